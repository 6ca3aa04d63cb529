"""Training loop and the sklearn-style estimator around the pooling heads.

The protocol is fixed: AdamW with decoupled weight decay, cosine-annealed
learning rate stepped per optimizer step, batch size 128, 30 epochs,
asymmetric multi-label loss, validation metric at every epoch end. Given
(seed, data, config) every logged number is reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DimensionError, EmptyStoreError, NonFiniteError
from .heads import HEAD_KINDS, Head, TokenBatch, make_head
from .numerics import STREAM_INIT, STREAM_SHUFFLE, STREAM_SPLIT, rng_stream
from .objective import AslConfig, asl_loss, mean_average_precision, top1_accuracy
from .optim import AdamW, CosineSchedule, cosine_lr
from .store import EmbeddingDataset

_EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainConfig:
    head: str = "protobin"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    metric: str = "map"
    asl: AslConfig = field(default_factory=AslConfig)
    head_hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head '{self.head}'; valid: {', '.join(HEAD_KINDS)}")


@dataclass
class RunResult:
    final_val_metric: Optional[float]
    per_epoch_val: list
    seed: int
    wallclock: float


def _check_compatible(ds: EmbeddingDataset, head: Head):
    if ds.embed_dim != head.embed_dim or ds.tokens.shape[1] != head.num_tokens:
        raise DimensionError(
            f"store dims (D={ds.embed_dim}, T={ds.tokens.shape[1]}) do not match "
            f"head (D={head.embed_dim}, T={head.num_tokens})"
        )
    if ds.num_classes != head.num_classes:
        raise DimensionError(
            f"store has {ds.num_classes} classes, head expects {head.num_classes}"
        )


def _metric_value(logits: np.ndarray, labels: np.ndarray, metric: str) -> float:
    if metric == "map":
        return mean_average_precision(logits, labels)
    if metric == "accuracy":
        return top1_accuracy(logits, labels.argmax(axis=1))
    raise ValueError(f"unknown metric '{metric}'")


def predict_logits(ds: EmbeddingDataset, head: Head, params: dict) -> np.ndarray:
    """Forward over a whole dataset in evaluation-sized batches."""
    out = []
    for lo in range(0, len(ds), _EVAL_BATCH):
        idx = slice(lo, min(lo + _EVAL_BATCH, len(ds)))
        batch = _make_batch(ds, idx, head)
        logits, _ = head.forward(batch, params)
        out.append(logits)
    return np.concatenate(out, axis=0)


def _make_batch(ds: EmbeddingDataset, idx, head: Head) -> TokenBatch:
    if head.uses_tokens:
        return TokenBatch.from_dataset(ds, idx)
    cls_vec = ds.cls_vec[idx]
    empty = np.empty((cls_vec.shape[0], 0, 0), dtype=np.float32)
    return TokenBatch(
        tokens=empty,
        unit_tokens=empty,
        token_norms=np.empty((cls_vec.shape[0], 0), dtype=np.float32),
        cls_vec=cls_vec,
        time_bins=ds.time_bins,
        freq_bins=ds.freq_bins,
    )


class ProbeTrainer:
    """Epoch-resumable training of one head on one dataset.

    Resumability (shuffle stream and optimizer state live on the instance)
    is what the successive-halving rungs rely on: advancing 3 then 27 epochs
    is bit-identical to advancing 30.
    """

    def __init__(self, train_ds, val_ds, cfg: TrainConfig):
        if len(train_ds) == 0:
            raise EmptyStoreError("training dataset is empty")
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.cfg = cfg
        self.head = make_head(
            cfg.head,
            train_ds.embed_dim,
            train_ds.time_bins,
            train_ds.freq_bins,
            train_ds.num_classes,
            **cfg.head_hyper,
        )
        _check_compatible(train_ds, self.head)
        if val_ds is not None:
            _check_compatible(val_ds, self.head)
        self.params = self.head.init_params(rng_stream(cfg.seed, STREAM_INIT))
        self.optimizer = AdamW(self.params, weight_decay=cfg.weight_decay)
        steps_per_epoch = -(-len(train_ds) // cfg.batch_size)  # last partial batch kept
        self.schedule = CosineSchedule(cfg.lr, 0.0, cfg.epochs * steps_per_epoch)
        self.shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE)
        self.epoch = 0
        self.step = 0
        self.per_epoch_val: list = []
        self.log_rows: list = []

    def advance_to(self, epoch_target: int) -> None:
        epoch_target = min(epoch_target, self.cfg.epochs)
        n = len(self.train_ds)
        bs = self.cfg.batch_size
        labels = self.train_ds.labels
        while self.epoch < epoch_target:
            perm = self.shuffle_rng.permutation(n)
            for lo in range(0, n, bs):
                idx = perm[lo : lo + bs]
                lr_t = cosine_lr(self.step, self.schedule)
                batch = _make_batch(self.train_ds, idx, self.head)
                logits, cache = self.head.forward(batch, self.params)
                loss, dlogits = asl_loss(logits, labels[idx], self.cfg.asl)
                if not np.isfinite(loss):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {self.epoch} batch {lo // bs}"
                    )
                grads = self.head.backward(cache, dlogits)
                self.optimizer.step(self.params, grads, lr_t)
                self.log_rows.append((self.epoch, self.step, lr_t, loss, ""))
                self.step += 1
            self.epoch += 1
            if self.val_ds is not None:
                val = self.validate()
                self.per_epoch_val.append(val)
                self.log_rows.append((self.epoch - 1, self.step - 1, "", "", val))

    def validate(self) -> float:
        logits = predict_logits(self.val_ds, self.head, self.params)
        return _metric_value(logits, self.val_ds.labels, self.cfg.metric)

    def run_result(self, wallclock: float = 0.0) -> RunResult:
        final = self.per_epoch_val[-1] if self.per_epoch_val else None
        return RunResult(final, list(self.per_epoch_val), self.cfg.seed, wallclock)


def train(train_ds, val_ds, cfg: TrainConfig):
    """Full run per the fixed protocol; returns (head, params, RunResult)."""
    t0 = time.perf_counter()
    trainer = ProbeTrainer(train_ds, val_ds, cfg)
    trainer.advance_to(cfg.epochs)
    result = trainer.run_result(time.perf_counter() - t0)
    return trainer.head, trainer.params, result, trainer.log_rows


def evaluate(test_ds, head: Head, params: dict, metric: str = "map") -> float:
    if len(test_ds) == 0:
        raise EmptyStoreError("test dataset is empty")
    _check_compatible(test_ds, head)
    logits = predict_logits(test_ds, head, params)
    return _metric_value(logits, test_ds.labels, metric)


def multi_seed(train_ds, val_ds, cfg: TrainConfig, seeds):
    """Re-run the same config under each seed; returns (mean, sd, results).
    sd is the sample standard deviation (ddof=1), 0.0 for a single seed."""
    if val_ds is None:
        raise ValueError("multi_seed needs a validation dataset for its metric")
    results = []
    for seed in seeds:
        _, _, result, _ = train(train_ds, val_ds, replace(cfg, seed=int(seed)))
        results.append(result)
    values = np.array([r.final_val_metric for r in results], dtype=np.float64)
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return mean, sd, results


def split_train_val(ds: EmbeddingDataset, val_fraction: float = 0.2, seed: int = 0):
    """Seeded holdout split used when a store has no validation sibling."""
    n = len(ds)
    n_val = max(1, round(n * val_fraction))
    if n_val >= n:
        raise ValueError("validation fraction leaves no training data")
    perm = rng_stream(seed, STREAM_SPLIT).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)


# -- estimator ----------------------------------------------------------------


def validate_token_maps(X) -> np.ndarray:
    """Accept (N, D, S_t, S_f) float input; reject NaN/Inf."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise DimensionError(f"expected token maps (N, D, S_t, S_f), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("token maps contain NaN or Inf")
    return X


def validate_multi_hot(y, num_classes=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2:
        raise DimensionError(f"expected multi-hot labels (N, C), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if num_classes is not None and y.shape[1] != num_classes:
        raise DimensionError(f"labels have {y.shape[1]} classes, expected {num_classes}")
    return y.astype(np.float32)


def _dataset_from_arrays(X, y, cls_vec=None) -> EmbeddingDataset:
    X = validate_token_maps(X)
    y = validate_multi_hot(y)
    if X.shape[0] != y.shape[0]:
        raise DimensionError(f"{X.shape[0]} token maps vs {y.shape[0]} label rows")
    n, d, st, sf = X.shape
    tokens = X.reshape(n, d, st * sf).transpose(0, 2, 1).copy()
    if cls_vec is None:
        cls_vec = tokens.mean(axis=1)
    else:
        cls_vec = np.asarray(cls_vec, dtype=np.float32)
        if cls_vec.shape != (n, d):
            raise DimensionError(f"cls shape {cls_vec.shape}, expected ({n}, {d})")
    return EmbeddingDataset(
        ids=np.arange(n, dtype=np.uint64),
        labels=y,
        cls_vec=cls_vec,
        tokens=tokens,
        time_bins=st,
        freq_bins=sf,
    )


class PoolingProbe(BaseEstimator):
    """Trainable pooling probe over frozen token maps, sklearn style.

    ``X`` is (N, D, S_t, S_f) cached embeddings, ``y`` is (N, C) multi-hot.
    Backbones that expose a summary vector can pass it via ``cls_vec``;
    otherwise the token mean is used for the cls-consuming heads.
    """

    def __init__(
        self,
        head: str = "protobin",
        learning_rate: float = 1e-2,
        weight_decay: float = 1e-4,
        epochs: int = 30,
        batch_size: int = 128,
        seed: int = 0,
        metric: str = "map",
        prototypes_per_class: int = 20,
        hidden_units: int = 512,
        conv_kernel: int = 3,
        conv_channels: int = 256,
        attn_heads: int = 4,
        attn_queries: int = 1,
        gamma_pos: float = 0.0,
        gamma_neg: float = 4.0,
        asl_margin: float = 0.05,
    ):
        self.head = head
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.metric = metric
        self.prototypes_per_class = prototypes_per_class
        self.hidden_units = hidden_units
        self.conv_kernel = conv_kernel
        self.conv_channels = conv_channels
        self.attn_heads = attn_heads
        self.attn_queries = attn_queries
        self.gamma_pos = gamma_pos
        self.gamma_neg = gamma_neg
        self.asl_margin = asl_margin

    def _head_hyper(self) -> dict:
        return {
            "mlp": {"hidden_units": self.hidden_units},
            "conv": {"conv_kernel": self.conv_kernel, "conv_channels": self.conv_channels},
            "mhca": {"attn_heads": self.attn_heads},
            "abmilp": {"attn_queries": self.attn_queries},
            "proto": {"prototypes_per_class": self.prototypes_per_class},
            "protobin": {"prototypes_per_class": self.prototypes_per_class},
        }.get(self.head, {})

    def _config(self) -> TrainConfig:
        return TrainConfig(
            head=self.head,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            metric=self.metric,
            asl=AslConfig(self.gamma_pos, self.gamma_neg, self.asl_margin),
            head_hyper=self._head_hyper(),
        )

    def fit(self, X, y, cls_vec=None, validation=None):
        """Train the probe. ``validation`` is an optional (X_val, y_val) or
        (X_val, y_val, cls_val) tuple; the per-epoch metric trace lands in
        ``run_result_``."""
        train_ds = _dataset_from_arrays(X, y, cls_vec)
        val_ds = _dataset_from_arrays(*validation) if validation is not None else None
        head, params, result, _ = train(train_ds, val_ds, self._config())
        self.head_ = head
        self.params_ = params
        self.run_result_ = result
        self.n_features_in_ = train_ds.embed_dim
        return self

    def _require_fitted(self):
        if not hasattr(self, "head_"):
            raise AttributeError("this PoolingProbe is not fitted; call fit first")

    def decision_function(self, X, cls_vec=None) -> np.ndarray:
        self._require_fitted()
        X = validate_token_maps(X)
        dummy = np.zeros((X.shape[0], self.head_.num_classes), dtype=np.float32)
        ds = _dataset_from_arrays(X, dummy, cls_vec)
        return predict_logits(ds, self.head_, self.params_)

    def predict_proba(self, X, cls_vec=None) -> np.ndarray:
        logits = self.decision_function(X, cls_vec)
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, X, cls_vec=None) -> np.ndarray:
        return (self.predict_proba(X, cls_vec) >= 0.5).astype(np.uint8)

    def score(self, X, y, cls_vec=None) -> float:
        """Macro mAP (or accuracy when metric='accuracy')."""
        logits = self.decision_function(X, cls_vec)
        y = validate_multi_hot(y, self.head_.num_classes)
        return _metric_value(logits, y, self.metric)
