"""The ten pooling probes: forward, hand-derived backward, seeded init,
parameter counts, and checkpoint IO.

Every head consumes a frozen token map (or its cls/mean summary) and emits
class logits. Backward passes are written against the frozen inputs, so only
parameter gradients are produced. Functions are dtype-generic: training runs
float32, the finite-difference tests run the same code in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    StoreFormatError,
    TrainingStateError,
)

HEAD_KINDS = (
    "linear",
    "mlp",
    "linearc",
    "conv",
    "mhca",
    "ep",
    "simpool",
    "abmilp",
    "proto",
    "protobin",
)

# scores below any cosine; masks zero-norm tokens out of the max
_NEG_SENTINEL = -2.0


@dataclass
class TokenBatch:
    """Views over one batch of cached embeddings.

    ``tokens`` is (B, T, D) with T = S_t * S_f row-major over (t, f);
    ``unit_tokens`` and ``token_norms`` are precomputed once per store since
    the backbone is frozen.
    """

    tokens: np.ndarray
    unit_tokens: np.ndarray
    token_norms: np.ndarray
    cls_vec: np.ndarray
    time_bins: int
    freq_bins: int
    all_valid: bool = True

    @classmethod
    def from_dataset(cls, ds, idx=None):
        if idx is None:
            idx = slice(None)
        return cls(
            tokens=ds.tokens[idx],
            unit_tokens=ds.unit_tokens[idx],
            token_norms=ds.token_norms[idx],
            cls_vec=ds.cls_vec[idx],
            time_bins=ds.time_bins,
            freq_bins=ds.freq_bins,
            all_valid=bool(np.all(ds.token_norms[idx] > 0)),
        )

    @classmethod
    def from_tokens(cls, tokens, time_bins, freq_bins, cls_vec=None):
        tokens = np.asarray(tokens)
        norms = np.linalg.norm(tokens.astype(np.float64), axis=2)
        safe = np.where(norms == 0.0, 1.0, norms)
        unit = (tokens / safe[:, :, None]).astype(tokens.dtype)
        if cls_vec is None:
            cls_vec = tokens.mean(axis=1)
        return cls(
            tokens=tokens,
            unit_tokens=unit,
            token_norms=norms.astype(tokens.dtype),
            cls_vec=np.asarray(cls_vec),
            time_bins=time_bins,
            freq_bins=freq_bins,
            all_valid=bool(np.all(norms > 0)),
        )

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class ProbeOutput:
    """Single-clip forward result. ``argmax_locations`` holds the winning
    (t, f) per prototype (or per class for the ep head)."""

    logits: np.ndarray
    pooled_descriptor: np.ndarray
    argmax_locations: Optional[np.ndarray] = None


def binarize(p_tilde: np.ndarray) -> np.ndarray:
    """Sign with sign(0) := +1, mapping onto {-1, +1}."""
    p_tilde = np.asarray(p_tilde)
    return np.where(p_tilde >= 0, 1.0, -1.0).astype(p_tilde.dtype)


def pack_prototypes(p_tilde: np.ndarray) -> bytes:
    """One bit per weight (1 means +1), row-major, each prototype padded to a
    byte boundary: J * ceil(D/8) bytes, a 32x saving over float32 storage."""
    p_tilde = np.asarray(p_tilde)
    if p_tilde.ndim != 2:
        raise DimensionError(f"expected (J, D) prototypes, got {p_tilde.shape}")
    bits = (p_tilde >= 0).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def unpack_prototypes(blob: bytes, count: int, dim: int) -> np.ndarray:
    per_row = (dim + 7) // 8
    if len(blob) != count * per_row:
        raise DimensionError(
            f"packed blob has {len(blob)} bytes, expected {count * per_row}"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(count, per_row)
    bits = np.unpackbits(raw, axis=1, bitorder="little", count=dim)
    return np.where(bits > 0, 1.0, -1.0).astype(np.float32)


def _uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(attn, dattn, axis):
    inner = (attn * dattn).sum(axis=axis, keepdims=True)
    return attn * (dattn - inner)


class Head:
    """Shared surface: init_params / forward / backward / param_count."""

    kind = "?"
    uses_tokens = True

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes):
        self.embed_dim = embed_dim
        self.time_bins = time_bins
        self.freq_bins = freq_bins
        self.num_classes = num_classes
        self.num_tokens = time_bins * freq_bins

    def hyper(self) -> dict:
        return {}

    def param_count(self) -> int:
        raise NotImplementedError

    def init_params(self, rng) -> dict:
        raise NotImplementedError

    def forward(self, batch: TokenBatch, params: dict):
        raise NotImplementedError

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict:
        if cache is None:
            raise TrainingStateError("backward called before forward")
        return self._backward(cache, dlogits)

    def _backward(self, cache: dict, dlogits: np.ndarray) -> dict:
        raise NotImplementedError

    def _check_batch(self, batch: TokenBatch):
        if batch.tokens.shape[2] != self.embed_dim or batch.tokens.shape[1] != self.num_tokens:
            raise DimensionError(
                f"{self.kind}: batch tokens {batch.tokens.shape} incompatible with "
                f"(T={self.num_tokens}, D={self.embed_dim})"
            )


class LinearHead(Head):
    """Linear classifier on the cls (or mean) descriptor."""

    kind = "linear"
    uses_tokens = False

    def param_count(self):
        return self.embed_dim * self.num_classes + self.num_classes

    def init_params(self, rng):
        d, c = self.embed_dim, self.num_classes
        return {
            "weight": _uniform_init(rng, (c, d), d),
            "bias": _uniform_init(rng, (c,), d),
        }

    def forward(self, batch, params):
        x = batch.cls_vec
        logits = x @ params["weight"].T + params["bias"]
        return logits, {"x": x}

    def _backward(self, cache, dlogits):
        return {
            "weight": dlogits.T @ cache["x"],
            "bias": dlogits.sum(axis=0),
        }


class MlpHead(Head):
    """One hidden ReLU layer on the cls descriptor."""

    kind = "mlp"
    uses_tokens = False

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes, hidden_units=512):
        super().__init__(embed_dim, time_bins, freq_bins, num_classes)
        self.hidden_units = hidden_units

    def hyper(self):
        return {"hidden_units": self.hidden_units}

    def param_count(self):
        d, h, c = self.embed_dim, self.hidden_units, self.num_classes
        return d * h + h + h * c + c

    def init_params(self, rng):
        d, h, c = self.embed_dim, self.hidden_units, self.num_classes
        return {
            "w1": _uniform_init(rng, (h, d), d),
            "b1": _uniform_init(rng, (h,), d),
            "w2": _uniform_init(rng, (c, h), h),
            "b2": _uniform_init(rng, (c,), h),
        }

    def forward(self, batch, params):
        x = batch.cls_vec
        pre = x @ params["w1"].T + params["b1"]
        act = np.maximum(pre, 0.0)
        logits = act @ params["w2"].T + params["b2"]
        return logits, {"x": x, "pre": pre, "act": act, "w2": params["w2"]}

    def _backward(self, cache, dlogits):
        dact = dlogits @ cache["w2"]
        dpre = dact * (cache["pre"] > 0)
        return {
            "w1": dpre.T @ cache["x"],
            "b1": dpre.sum(axis=0),
            "w2": dlogits.T @ cache["act"],
            "b2": dlogits.sum(axis=0),
        }


class LinearConcatHead(Head):
    """Linear map over all tokens concatenated; bias-free so the parameter
    count is exactly N*D*C."""

    kind = "linearc"

    def param_count(self):
        return self.num_tokens * self.embed_dim * self.num_classes

    def init_params(self, rng):
        n_in = self.num_tokens * self.embed_dim
        return {"weight": _uniform_init(rng, (self.num_classes, n_in), n_in)}

    def forward(self, batch, params):
        self._check_batch(batch)
        flat = batch.tokens.reshape(len(batch), -1)
        return flat @ params["weight"].T, {"flat": flat}

    def _backward(self, cache, dlogits):
        return {"weight": dlogits.T @ cache["flat"]}


class ConvHead(Head):
    """k x k same-padded convolution over the (S_t, S_f) grid, ReLU, global
    mean pool, then a linear classifier."""

    kind = "conv"

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes, conv_kernel=3, conv_channels=256):
        super().__init__(embed_dim, time_bins, freq_bins, num_classes)
        if conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd for same padding")
        self.conv_kernel = conv_kernel
        self.conv_channels = conv_channels

    def hyper(self):
        return {"conv_kernel": self.conv_kernel, "conv_channels": self.conv_channels}

    def param_count(self):
        k, d, dh, c = self.conv_kernel, self.embed_dim, self.conv_channels, self.num_classes
        return k * k * d * dh + dh + dh * c + c

    def init_params(self, rng):
        k, d, dh, c = self.conv_kernel, self.embed_dim, self.conv_channels, self.num_classes
        fan = k * k * d
        return {
            "kernel": _uniform_init(rng, (dh, d, k, k), fan),
            "conv_bias": _uniform_init(rng, (dh,), fan),
            "weight": _uniform_init(rng, (c, dh), dh),
            "bias": _uniform_init(rng, (c,), dh),
        }

    def _padded(self, batch):
        b = len(batch)
        grid = batch.tokens.reshape(b, self.time_bins, self.freq_bins, self.embed_dim)
        p = self.conv_kernel // 2
        return np.pad(grid, ((0, 0), (p, p), (p, p), (0, 0)))

    def forward(self, batch, params):
        self._check_batch(batch)
        k = self.conv_kernel
        st, sf = self.time_bins, self.freq_bins
        padded = self._padded(batch)
        pre = np.zeros(
            (len(batch), st, sf, self.conv_channels), dtype=batch.tokens.dtype
        )
        for a in range(k):
            for bb in range(k):
                window = padded[:, a : a + st, bb : bb + sf, :]
                pre += window @ params["kernel"][:, :, a, bb].T
        pre += params["conv_bias"]
        act = np.maximum(pre, 0.0)
        pooled = act.mean(axis=(1, 2))
        logits = pooled @ params["weight"].T + params["bias"]
        return logits, {
            "padded": padded,
            "pre": pre,
            "pooled": pooled,
            "weight": params["weight"],
        }

    def _backward(self, cache, dlogits):
        k = self.conv_kernel
        st, sf = self.time_bins, self.freq_bins
        dpooled = dlogits @ cache["weight"]
        dact = np.broadcast_to(
            dpooled[:, None, None, :] / (st * sf), cache["pre"].shape
        )
        dpre = dact * (cache["pre"] > 0)
        dkernel = np.zeros(
            (self.conv_channels, self.embed_dim, k, k), dtype=dlogits.dtype
        )
        padded = cache["padded"]
        for a in range(k):
            for bb in range(k):
                window = padded[:, a : a + st, bb : bb + sf, :]
                dkernel[:, :, a, bb] = np.einsum(
                    "bxyo,bxyi->oi", dpre, window, optimize=True
                )
        return {
            "kernel": dkernel,
            "conv_bias": dpre.sum(axis=(0, 1, 2)),
            "weight": dlogits.T @ cache["pooled"],
            "bias": dlogits.sum(axis=0),
        }


class MhcaHead(Head):
    """Multi-head cross-attention with one learnable query: key and output
    projections (2 D^2), raw tokens as values, linear classifier on top."""

    kind = "mhca"

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes, attn_heads=4):
        super().__init__(embed_dim, time_bins, freq_bins, num_classes)
        if embed_dim % attn_heads != 0:
            raise ValueError("embed_dim must be divisible by attn_heads")
        self.attn_heads = attn_heads

    def hyper(self):
        return {"attn_heads": self.attn_heads}

    def param_count(self):
        d, c = self.embed_dim, self.num_classes
        return 2 * d * d + d + d * c + c

    def init_params(self, rng):
        d, c = self.embed_dim, self.num_classes
        return {
            "query": _uniform_init(rng, (d,), d),
            "key_proj": _uniform_init(rng, (d, d), d),
            "out_proj": _uniform_init(rng, (d, d), d),
            "weight": _uniform_init(rng, (c, d), d),
            "bias": _uniform_init(rng, (c,), d),
        }

    def forward(self, batch, params):
        self._check_batch(batch)
        b, t = len(batch), self.num_tokens
        nh = self.attn_heads
        dh = self.embed_dim // nh
        z = batch.tokens
        keys = (z @ params["key_proj"].T).reshape(b, t, nh, dh)
        q = params["query"].reshape(nh, dh)
        scale = 1.0 / np.sqrt(dh)
        scores = np.einsum("bthd,hd->bth", keys, q, optimize=True) * scale
        attn = _softmax(scores, axis=1)
        values = z.reshape(b, t, nh, dh)
        pooled = np.einsum("bth,bthd->bhd", attn, values, optimize=True).reshape(b, -1)
        desc = pooled @ params["out_proj"].T
        logits = desc @ params["weight"].T + params["bias"]
        return logits, {
            "z": z,
            "keys": keys,
            "attn": attn,
            "values": values,
            "pooled": pooled,
            "desc": desc,
            "scale": scale,
            "params": params,
        }

    def _backward(self, cache, dlogits):
        params = cache["params"]
        b, t = cache["attn"].shape[0], cache["attn"].shape[1]
        nh = self.attn_heads
        dh = self.embed_dim // nh
        ddesc = dlogits @ params["weight"]
        dout_proj = ddesc.T @ cache["pooled"]
        dpooled = (ddesc @ params["out_proj"]).reshape(b, nh, dh)
        dattn = np.einsum("bhd,bthd->bth", dpooled, cache["values"], optimize=True)
        dscores = _softmax_backward(cache["attn"], dattn, axis=1)
        dquery = (
            np.einsum("bth,bthd->hd", dscores, cache["keys"], optimize=True)
            * cache["scale"]
        ).reshape(-1)
        dkeys = (
            dscores[:, :, :, None] * params["query"].reshape(1, 1, nh, dh)
        ) * cache["scale"]
        dkey_proj = np.einsum(
            "btd,bte->de", dkeys.reshape(b, t, -1), cache["z"], optimize=True
        )
        return {
            "query": dquery,
            "key_proj": dkey_proj,
            "out_proj": dout_proj,
            "weight": dlogits.T @ cache["desc"],
            "bias": dlogits.sum(axis=0),
        }


class SimpoolHead(Head):
    """Mean token as the query, one D x D key projection, single-head
    attention over the raw tokens."""

    kind = "simpool"

    def param_count(self):
        d, c = self.embed_dim, self.num_classes
        return d * d + d * c + c

    def init_params(self, rng):
        d, c = self.embed_dim, self.num_classes
        return {
            "key_proj": _uniform_init(rng, (d, d), d),
            "weight": _uniform_init(rng, (c, d), d),
            "bias": _uniform_init(rng, (c,), d),
        }

    def forward(self, batch, params):
        self._check_batch(batch)
        z = batch.tokens
        q = z.mean(axis=1)
        keys = z @ params["key_proj"].T
        scale = 1.0 / np.sqrt(self.embed_dim)
        scores = np.einsum("bd,btd->bt", q, keys, optimize=True) * scale
        attn = _softmax(scores, axis=1)
        desc = np.einsum("bt,btd->bd", attn, z, optimize=True)
        logits = desc @ params["weight"].T + params["bias"]
        return logits, {
            "z": z,
            "q": q,
            "attn": attn,
            "desc": desc,
            "scale": scale,
            "params": params,
        }

    def _backward(self, cache, dlogits):
        params = cache["params"]
        ddesc = dlogits @ params["weight"]
        dattn = np.einsum("bd,btd->bt", ddesc, cache["z"], optimize=True)
        dscores = _softmax_backward(cache["attn"], dattn, axis=1)
        dkeys = dscores[:, :, None] * cache["q"][:, None, :] * cache["scale"]
        dkey_proj = np.einsum("btd,bte->de", dkeys, cache["z"], optimize=True)
        return {
            "key_proj": dkey_proj,
            "weight": dlogits.T @ cache["desc"],
            "bias": dlogits.sum(axis=0),
        }


class EpHead(Head):
    """Per-class cosine queries over affine-rescaled tokens with max pooling;
    emits class scores directly (no separate classifier), so the budget is
    D*C + 2D."""

    kind = "ep"

    def param_count(self):
        return self.embed_dim * self.num_classes + 2 * self.embed_dim

    def init_params(self, rng):
        d, c = self.embed_dim, self.num_classes
        return {
            "queries": _uniform_init(rng, (c, d), d),
            # affine starts at identity; a random-sign scale would scramble
            # every cosine at step 0
            "scale": np.ones(d, dtype=np.float32),
            "shift": np.zeros(d, dtype=np.float32),
        }

    def forward(self, batch, params):
        self._check_batch(batch)
        z = batch.tokens
        u = z * params["scale"] + params["shift"]
        u_norms = np.linalg.norm(u, axis=2)
        valid = u_norms > 0
        if not valid.any(axis=1).all():
            raise DegenerateInputError("a clip has only zero-norm rescaled tokens")
        safe = np.where(valid, u_norms, 1.0)
        u_hat = u / safe[:, :, None]
        q = params["queries"]
        q_norms = np.linalg.norm(q, axis=1)
        if np.any(q_norms == 0):
            raise DegenerateInputError("zero-norm class query")
        q_hat = q / q_norms[:, None]
        scores = np.einsum("btd,cd->btc", u_hat, q_hat, optimize=True)
        scores = np.clip(scores, -1.0, 1.0)
        scores = np.where(valid[:, :, None], scores, _NEG_SENTINEL)
        winners = scores.argmax(axis=1)
        logits = np.take_along_axis(scores, winners[:, None, :], axis=1)[:, 0, :]
        return logits, {
            "z": z,
            "u_hat": u_hat,
            "u_norms": safe,
            "q_hat": q_hat,
            "q_norms": q_norms,
            "winners": winners,
            "logits": logits,
            "params": params,
        }

    def _backward(self, cache, dlogits):
        winners = cache["winners"]  # (B, C)
        idx = winners[:, :, None]
        u_star = np.take_along_axis(cache["u_hat"], idx, axis=1)  # (B, C, D)
        z_star = np.take_along_axis(cache["z"], idx, axis=1)
        n_star = np.take_along_axis(cache["u_norms"], winners, axis=1)  # (B, C)
        s = cache["logits"]
        q_hat, q_norms = cache["q_hat"], cache["q_norms"]
        # d cos(q, u)/dq = (u_hat - cos * q_hat) / |q|, likewise for u
        dq = (
            np.einsum("bc,bcd->cd", dlogits, u_star, optimize=True)
            - ((dlogits * s).sum(axis=0))[:, None] * q_hat
        ) / q_norms[:, None]
        du_star = (
            dlogits[:, :, None]
            * (q_hat[None, :, :] - s[:, :, None] * u_star)
            / n_star[:, :, None]
        )
        return {
            "queries": dq,
            "scale": np.einsum("bcd,bcd->d", du_star, z_star, optimize=True),
            "shift": du_star.sum(axis=(0, 1)),
        }


class AbmilpHead(Head):
    """Gated attention MIL pooling: token scores a_q^T (tanh(Vz) * sigm(Uz)),
    softmax over tokens per query, weighted sum of raw tokens, queries
    averaged, linear classifier."""

    kind = "abmilp"

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes, attn_queries=1):
        super().__init__(embed_dim, time_bins, freq_bins, num_classes)
        self.attn_queries = attn_queries

    def hyper(self):
        return {"attn_queries": self.attn_queries}

    def param_count(self):
        d, c, q = self.embed_dim, self.num_classes, self.attn_queries
        return 2 * d * d + q * d + d * c + c

    def init_params(self, rng):
        d, c, q = self.embed_dim, self.num_classes, self.attn_queries
        return {
            "att_v": _uniform_init(rng, (d, d), d),
            "att_gate": _uniform_init(rng, (d, d), d),
            "att_w": _uniform_init(rng, (q, d), d),
            "weight": _uniform_init(rng, (c, d), d),
            "bias": _uniform_init(rng, (c,), d),
        }

    def forward(self, batch, params):
        self._check_batch(batch)
        z = batch.tokens
        g = np.tanh(z @ params["att_v"].T)
        m = 1.0 / (1.0 + np.exp(-(z @ params["att_gate"].T)))
        gm = g * m
        scores = np.einsum("btd,qd->btq", gm, params["att_w"], optimize=True)
        attn = _softmax(scores, axis=1)
        pooled = np.einsum("btq,btd->bqd", attn, z, optimize=True)
        desc = pooled.mean(axis=1)
        logits = desc @ params["weight"].T + params["bias"]
        return logits, {
            "z": z,
            "g": g,
            "m": m,
            "gm": gm,
            "attn": attn,
            "desc": desc,
            "params": params,
        }

    def _backward(self, cache, dlogits):
        params = cache["params"]
        q = self.attn_queries
        ddesc = dlogits @ params["weight"]
        dpooled = np.repeat(ddesc[:, None, :] / q, q, axis=1)
        dattn = np.einsum("bqd,btd->btq", dpooled, cache["z"], optimize=True)
        dscores = _softmax_backward(cache["attn"], dattn, axis=1)
        datt_w = np.einsum("btq,btd->qd", dscores, cache["gm"], optimize=True)
        dgm = np.einsum("btq,qd->btd", dscores, params["att_w"], optimize=True)
        dg = dgm * cache["m"]
        dm = dgm * cache["g"]
        dpre_v = dg * (1.0 - cache["g"] ** 2)
        dpre_gate = dm * cache["m"] * (1.0 - cache["m"])
        return {
            "att_v": np.einsum("btd,bte->de", dpre_v, cache["z"], optimize=True),
            "att_gate": np.einsum("btd,bte->de", dpre_gate, cache["z"], optimize=True),
            "att_w": datt_w,
            "weight": dlogits.T @ cache["desc"],
            "bias": dlogits.sum(axis=0),
        }


class PrototypeHead(Head):
    """Real-valued prototypical pooling.

    Maintains J = prototypes_per_class * C trainable exemplars. Every token
    is scored against every prototype by cosine similarity, evidence is
    max-pooled over the grid (ties to the first token in row-major order),
    and the stacked per-prototype scores feed a bias-free linear classifier,
    so the parameter count is exactly J*D + J*C.
    """

    kind = "proto"
    binarized = False

    def __init__(self, embed_dim, time_bins, freq_bins, num_classes, prototypes_per_class=20):
        super().__init__(embed_dim, time_bins, freq_bins, num_classes)
        self.prototypes_per_class = prototypes_per_class
        self.num_prototypes = prototypes_per_class * num_classes

    def hyper(self):
        return {"prototypes_per_class": self.prototypes_per_class}

    def param_count(self):
        j = self.num_prototypes
        return j * self.embed_dim + j * self.num_classes

    def init_params(self, rng):
        j, d, c = self.num_prototypes, self.embed_dim, self.num_classes
        protos = rng.standard_normal((j, d))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        return {
            "prototypes": protos.astype(np.float32),
            "weight": _uniform_init(rng, (c, j), j),
        }

    def _unit_prototypes(self, p_tilde):
        """Unit prototypes and the norms dividing the cosine gradient."""
        p64 = p_tilde.astype(np.float64)
        norms = np.sqrt((p64 * p64).sum(axis=1))
        if np.any(norms == 0):
            raise DegenerateInputError("zero-norm prototype")
        return (p64 / norms[:, None]).astype(p_tilde.dtype), norms.astype(p_tilde.dtype)

    def forward(self, batch, params):
        self._check_batch(batch)
        b, t = len(batch), self.num_tokens
        unit_p, p_norms = self._unit_prototypes(params["prototypes"])
        scores = (
            batch.unit_tokens.reshape(b * t, -1) @ unit_p.T
        ).reshape(b, t, self.num_prototypes)
        scores = np.clip(scores, -1.0, 1.0)
        if not batch.all_valid:
            valid = batch.token_norms > 0
            if not valid.any(axis=1).all():
                raise DegenerateInputError("a clip has only zero-norm tokens")
            scores = np.where(valid[:, :, None], scores, _NEG_SENTINEL)
        winners = scores.argmax(axis=1)  # first max in row-major (t, f) order
        pooled = np.take_along_axis(scores, winners[:, None, :], axis=1)[:, 0, :]
        logits = pooled @ params["weight"].T
        return logits, {
            "unit_tokens": batch.unit_tokens,
            "unit_p": unit_p,
            "p_norms": p_norms,
            "winners": winners,
            "pooled": pooled,
            "params": params,
        }

    def _backward(self, cache, dlogits):
        params = cache["params"]
        dpooled = dlogits @ params["weight"]  # (B, J)
        z_star = np.take_along_axis(
            cache["unit_tokens"], cache["winners"][:, :, None], axis=1
        )  # (B, J, D)
        pooled = cache["pooled"]
        # cosine gradient at the winning token; for the binarized head this
        # is evaluated at sign(p) with the sign Jacobian taken as identity
        dproto = (
            np.einsum("bj,bjd->jd", dpooled, z_star, optimize=True)
            - ((dpooled * pooled).sum(axis=0))[:, None] * cache["unit_p"]
        ) / cache["p_norms"][:, None]
        return {
            "prototypes": dproto,
            "weight": dlogits.T @ pooled,
        }

    def probe_output(self, batch, params, index=0):
        logits, cache = self.forward(batch, params)
        winners = cache["winners"][index]
        locations = np.stack(
            [winners // self.freq_bins, winners % self.freq_bins], axis=1
        )
        return ProbeOutput(
            logits=logits[index],
            pooled_descriptor=cache["pooled"][index],
            argmax_locations=locations,
        )


class BinaryPrototypeHead(PrototypeHead):
    """Prototypical pooling with on-the-fly sign binarization.

    The forward pass scores tokens against sign(p) in {-1, +1}^D (sign(0) is
    +1), making the probe invariant to any positive rescaling of the raw
    prototypes and bit-packable at 1 bit per weight. Gradients reach the
    real-valued prototypes through the straight-through estimator: the sign
    Jacobian is replaced by the identity, with no clipping window.
    """

    kind = "protobin"
    binarized = True

    def _unit_prototypes(self, p_tilde):
        signs = binarize(p_tilde)
        sqrt_d = np.sqrt(np.float64(self.embed_dim))
        unit = (signs.astype(np.float64) / sqrt_d).astype(p_tilde.dtype)
        norms = np.full(self.num_prototypes, sqrt_d, dtype=p_tilde.dtype)
        return unit, norms


_HEAD_CLASSES = {
    cls.kind: cls
    for cls in (
        LinearHead,
        MlpHead,
        LinearConcatHead,
        ConvHead,
        MhcaHead,
        SimpoolHead,
        EpHead,
        AbmilpHead,
        PrototypeHead,
        BinaryPrototypeHead,
    )
}


def make_head(kind, embed_dim, time_bins, freq_bins, num_classes, **hyper) -> Head:
    if kind not in _HEAD_CLASSES:
        raise ValueError(
            f"unknown head '{kind}'; valid kinds: {', '.join(HEAD_KINDS)}"
        )
    return _HEAD_CLASSES[kind](embed_dim, time_bins, freq_bins, num_classes, **hyper)


def param_count(kind, embed_dim, time_bins, freq_bins, num_classes, **hyper) -> int:
    return make_head(kind, embed_dim, time_bins, freq_bins, num_classes, **hyper).param_count()


# -- checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"PPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, head: Head, params: dict) -> None:
    """Deterministic binary checkpoint: meta JSON, named float32 tensors,
    and (for protobin) the bit-packed deployment blob."""
    meta = {
        "kind": head.kind,
        "embed_dim": head.embed_dim,
        "time_bins": head.time_bins,
        "freq_bins": head.freq_bins,
        "num_classes": head.num_classes,
        "hyper": head.hyper(),
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    extra = b""
    if getattr(head, "binarized", False):
        extra = pack_prototypes(params["prototypes"])
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            tensor = np.ascontiguousarray(params[name], dtype=np.float32)
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())
        fh.write(struct.pack("<I", len(extra)))
        fh.write(extra)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise StoreFormatError(f"{path}: not a head checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise StoreFormatError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            params[name] = data.reshape(shape).copy()
        (extra_len,) = struct.unpack("<I", fh.read(4))
        fh.read(extra_len)
    head = make_head(
        meta["kind"],
        meta["embed_dim"],
        meta["time_bins"],
        meta["freq_bins"],
        meta["num_classes"],
        **meta["hyper"],
    )
    return head, params
