import numpy as np
import pytest

from probepool.heads import TokenBatch, make_head
from probepool.numerics import rng_stream
from probepool.store import EmbeddingDataset

# small-instance hyperparameters used across gradient and oracle tests
SMALL_HYPER = {
    "mlp": {"hidden_units": 8},
    "conv": {"conv_kernel": 3, "conv_channels": 6},
    "mhca": {"attn_heads": 4},
    "abmilp": {"attn_queries": 2},
    "proto": {"prototypes_per_class": 2},
    "protobin": {"prototypes_per_class": 2},
}


def small_head(kind, embed_dim=8, time_bins=4, freq_bins=2, num_classes=3):
    return make_head(kind, embed_dim, time_bins, freq_bins, num_classes, **SMALL_HYPER.get(kind, {}))


def random_batch(seed, batch=2, embed_dim=8, time_bins=4, freq_bins=2, dtype=np.float64):
    rng = rng_stream(seed, 900)
    tokens = rng.standard_normal((batch, time_bins * freq_bins, embed_dim)).astype(dtype)
    return TokenBatch.from_tokens(tokens, time_bins, freq_bins)


def random_dataset(seed, n=40, embed_dim=8, time_bins=4, freq_bins=2, num_classes=3):
    rng = rng_stream(seed, 901)
    tokens = rng.standard_normal((n, time_bins * freq_bins, embed_dim)).astype(np.float32)
    labels = (rng.random((n, num_classes)) < 0.4).astype(np.float32)
    labels[labels.sum(axis=1) == 0, 0] = 1.0  # no empty label rows
    return EmbeddingDataset(
        ids=np.arange(n, dtype=np.uint64),
        labels=labels,
        cls_vec=tokens.mean(axis=1),
        tokens=tokens,
        time_bins=time_bins,
        freq_bins=freq_bins,
    )


@pytest.fixture
def tiny_dataset():
    return random_dataset(7)
