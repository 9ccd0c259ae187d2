"""Small transformer encoder with an MLM head, in plain numpy.

Forward and backward passes are written by hand so gradients can be checked
against finite differences. Post-layer-norm ordering, GELU activations,
learned positions, and a tied output projection follow the BERT-Base
conventions. Training numerics are 32-bit; gradient checks run in 64-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from .tokenizer import SPECIALS
from .util import spawn_rng

LN_EPS = 1e-5
MASK_BIAS = -1e9
CKPT_HEADER = b"babelforge-ckpt v1\n"


@dataclass
class TransformerConfig:
    layers: int
    hidden: int
    heads: int
    vocab_size: int
    ffn: int = 0          # 0 resolves to 4*hidden
    max_seq: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.ffn == 0:
            self.ffn = 4 * self.hidden
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.ffn < self.hidden:
            raise ValueError("ffn must be >= hidden")
        if self.vocab_size < len(SPECIALS):
            raise ValueError("vocab_size smaller than the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0,1)")


def param_shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor in the model, in a fixed order. The output projection is
    tied to tok_emb and therefore has no tensor of its own."""
    H, F = cfg.hidden, cfg.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, H),
        "pos_emb": (cfg.max_seq, H),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes.update({
            p + "wq": (H, H), p + "bq": (H,),
            p + "wk": (H, H), p + "bk": (H,),
            p + "wv": (H, H), p + "bv": (H,),
            p + "wo": (H, H), p + "bo": (H,),
            p + "ln1_g": (H,), p + "ln1_b": (H,),
            p + "w1": (H, F), p + "b1": (F,),
            p + "w2": (F, H), p + "b2": (H,),
            p + "ln2_g": (H,), p + "ln2_b": (H,),
        })
    shapes.update({
        "final_ln_g": (H,), "final_ln_b": (H,),
        "head_w": (H, H), "head_b": (H,),
        "head_ln_g": (H,), "head_ln_b": (H,),
        "out_bias": (cfg.vocab_size,),
    })
    return shapes


def param_count(cfg: TransformerConfig) -> int:
    """Closed-form scalar count (tied output weight counted once)."""
    H, F, V, S, L = cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.max_seq, cfg.layers
    embeddings = V * H + S * H
    attention = 4 * (H * H + H)
    ffn = (H * F + F) + (F * H + H)
    layer_norms = 2 * 2 * H
    per_layer = attention + ffn + layer_norms
    head = (H * H + H) + 2 * H + V
    return embeddings + L * per_layer + 2 * H + head


class ModelParams:
    """Config plus a flat name->tensor dict (same structure as gradients
    and Adam moments). No language embedding exists anywhere."""

    def __init__(self, config: TransformerConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) ^ set(tensors)
            raise ValueError(f"tensor names mismatch: {sorted(missing)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(cfg: TransformerConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Weights ~ N(0, 0.02), biases 0, layer-norm gains 1; deterministic."""
    rng = spawn_rng(seed, "init")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_g"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(("_b", "bq", "bk", "bv", "bo", "b1", "b2", "head_b", "out_bias")):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return ModelParams(cfg, tensors)


def zeros_like_params(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# Primitive layers (forward + backward pairs).
# ---------------------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))


def _gelu_bwd(dy, x):
    cdf = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
    return dy * (cdf + x * pdf)


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout(x, p, rng, train):
    if not train or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    return x * keep * scale, keep * scale


def _dropout_bwd(dy, mask):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# Forward / backward.
# ---------------------------------------------------------------------------

def _validate_batch(cfg: TransformerConfig, tokens, attn_mask):
    B, S = tokens.shape
    if S > cfg.max_seq:
        raise ValueError(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    if (attn_mask.sum(axis=1) == 0).any():
        raise ValueError("empty row: all positions padded")


def _forward_internal(params: ModelParams, tokens, labels, attn_mask,
                      train_mode=False, rng=None):
    cfg = params.config
    t = params.tensors
    _validate_batch(cfg, tokens, attn_mask)
    B, S = tokens.shape
    H, A = cfg.hidden, cfg.heads
    dh = H // A
    inv_sqrt = 1.0 / math.sqrt(dh)
    dtype = params.dtype
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("train_mode with dropout requires an rng")

    cache: dict = {"tokens": tokens, "attn_mask": attn_mask, "layers": []}

    x0 = t["tok_emb"][tokens] + t["pos_emb"][:S][None, :, :]
    x, emb_drop = _dropout(x0, cfg.dropout, rng, train_mode)
    cache["emb_drop"] = emb_drop

    bias = np.where(attn_mask[:, None, None, :], dtype.type(0), dtype.type(MASK_BIAS))

    for i in range(cfg.layers):
        p = f"layer{i}."
        lc: dict = {"a_in": x}
        x2 = x.reshape(B * S, H)
        q = (x2 @ t[p + "wq"] + t[p + "bq"]).reshape(B, S, A, dh).transpose(0, 2, 1, 3)
        k = (x2 @ t[p + "wk"] + t[p + "bk"]).reshape(B, S, A, dh).transpose(0, 2, 1, 3)
        v = (x2 @ t[p + "wv"] + t[p + "bv"]).reshape(B, S, A, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * dtype.type(inv_sqrt) + bias
        probs = _softmax_last(scores)
        probs_d, attn_drop = _dropout(probs, cfg.dropout, rng, train_mode)
        ctx = np.matmul(probs_d, v)                       # [B,A,S,dh]
        ctx2 = ctx.transpose(0, 2, 1, 3).reshape(B * S, H)
        attn = (ctx2 @ t[p + "wo"] + t[p + "bo"]).reshape(B, S, H)
        attn, out_drop = _dropout(attn, cfg.dropout, rng, train_mode)
        s1 = x + attn
        x1, ln1c = _layer_norm(s1, t[p + "ln1_g"], t[p + "ln1_b"])

        x1f = x1.reshape(B * S, H)
        h1 = x1f @ t[p + "w1"] + t[p + "b1"]
        a1 = _gelu(h1)
        h2 = (a1 @ t[p + "w2"] + t[p + "b2"]).reshape(B, S, H)
        h2, ffn_drop = _dropout(h2, cfg.dropout, rng, train_mode)
        s2 = x1 + h2
        x, ln2c = _layer_norm(s2, t[p + "ln2_g"], t[p + "ln2_b"])

        lc.update(q=q, k=k, v=v, probs=probs, probs_d=probs_d, ctx2=ctx2,
                  x1=x1, h1=h1, a1=a1, ln1c=ln1c, ln2c=ln2c,
                  attn_drop=attn_drop, out_drop=out_drop, ffn_drop=ffn_drop)
        cache["layers"].append(lc)

    h, fin_c = _layer_norm(x, t["final_ln_g"], t["final_ln_b"])
    cache["fin_c"] = fin_c

    denom = attn_mask.sum(axis=1, keepdims=True).astype(dtype)
    pooled = (h * attn_mask[:, :, None]).sum(axis=1) / denom

    rows, cols = np.nonzero(labels >= 0)
    hm = h[rows, cols]                                    # [N,H]
    u = hm @ t["head_w"] + t["head_b"]
    ug = _gelu(u)
    uh, head_c = _layer_norm(ug, t["head_ln_g"], t["head_ln_b"])
    logits = uh @ t["tok_emb"].T + t["out_bias"]
    cache.update(h=h, rows=rows, cols=cols, hm=hm, u=u, uh=uh, head_c=head_c)
    return logits, pooled, cache


def forward(params: ModelParams, batch, train_mode: bool = False, rng=None):
    """Run the encoder; returns (logits at labeled positions [N,V],
    mean-pooled per-row vectors [B,H])."""
    logits, pooled, _ = _forward_internal(
        params, batch.tokens, batch.labels, batch.attn_mask, train_mode, rng)
    return logits, pooled


def mlm_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over labeled positions, with its logits gradient.

    `labels` is the length-N vector of original token ids at the labeled
    positions (batch.labels[batch.labels >= 0]).
    """
    n = len(labels)
    if n == 0:
        raise ValueError("zero labeled positions")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loss = float((lse - z[np.arange(n), labels]).mean())
    dlogits = _softmax_last(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


def _backward_internal(params: ModelParams, cache, dlogits):
    cfg = params.config
    t = params.tensors
    tokens = cache["tokens"]
    B, S = tokens.shape
    H, A = cfg.hidden, cfg.heads
    dh = H // A
    inv_sqrt = params.dtype.type(1.0 / math.sqrt(dh))
    grads = zeros_like_params(params)

    # MLM head (output projection tied to tok_emb).
    grads["out_bias"] += dlogits.sum(axis=0)
    grads["tok_emb"] += dlogits.T @ cache["uh"]
    duh = dlogits @ t["tok_emb"]
    dug, dg, db = _layer_norm_bwd(duh, cache["head_c"])
    grads["head_ln_g"] += dg
    grads["head_ln_b"] += db
    du = _gelu_bwd(dug, cache["u"])
    grads["head_w"] += cache["hm"].T @ du
    grads["head_b"] += du.sum(axis=0)
    dhm = du @ t["head_w"].T

    dhfull = np.zeros((B, S, H), dtype=params.dtype)
    dhfull[cache["rows"], cache["cols"]] = dhm

    dx, dg, db = _layer_norm_bwd(dhfull, cache["fin_c"])
    grads["final_ln_g"] += dg
    grads["final_ln_b"] += db

    for i in range(cfg.layers - 1, -1, -1):
        p = f"layer{i}."
        lc = cache["layers"][i]
        ds2, dg, db = _layer_norm_bwd(dx, lc["ln2c"])
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dh2 = _dropout_bwd(ds2, lc["ffn_drop"]).reshape(B * S, H)
        grads[p + "w2"] += lc["a1"].T @ dh2
        grads[p + "b2"] += dh2.sum(axis=0)
        da1 = dh2 @ t[p + "w2"].T
        dh1 = _gelu_bwd(da1, lc["h1"])
        x1f = lc["x1"].reshape(B * S, H)
        grads[p + "w1"] += x1f.T @ dh1
        grads[p + "b1"] += dh1.sum(axis=0)
        dx1 = (dh1 @ t[p + "w1"].T).reshape(B, S, H) + ds2

        ds1, dg, db = _layer_norm_bwd(dx1, lc["ln1c"])
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dattn = _dropout_bwd(ds1, lc["out_drop"]).reshape(B * S, H)
        grads[p + "wo"] += lc["ctx2"].T @ dattn
        grads[p + "bo"] += dattn.sum(axis=0)
        dctx2 = dattn @ t[p + "wo"].T
        dctx = dctx2.reshape(B, S, A, dh).transpose(0, 2, 1, 3)

        dprobs_d = np.matmul(dctx, lc["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(lc["probs_d"].transpose(0, 1, 3, 2), dctx)
        dprobs = _dropout_bwd(dprobs_d, lc["attn_drop"])
        probs = lc["probs"]
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, lc["k"]) * inv_sqrt
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), lc["q"]) * inv_sqrt

        a_in = lc["a_in"].reshape(B * S, H)
        da_in = ds1
        for dz, w_name, b_name in ((dq, "wq", "bq"), (dk, "wk", "bk"), (dv, "wv", "bv")):
            dz2 = dz.transpose(0, 2, 1, 3).reshape(B * S, H)
            grads[p + w_name] += a_in.T @ dz2
            grads[p + b_name] += dz2.sum(axis=0)
            da_in = da_in + (dz2 @ t[p + w_name].T).reshape(B, S, H)
        dx = da_in

    dx0 = _dropout_bwd(dx, cache["emb_drop"])
    np.add.at(grads["tok_emb"], tokens, dx0)
    grads["pos_emb"][:S] += dx0.sum(axis=0)
    return grads


def loss_and_grads(params: ModelParams, batch, train_mode: bool = False, rng=None):
    """Combined forward+backward for the training loop; returns
    (loss, grads, masked-token top-1 accuracy)."""
    logits, _, cache = _forward_internal(
        params, batch.tokens, batch.labels, batch.attn_mask, train_mode, rng)
    labels = batch.labels[batch.labels >= 0]
    loss, dlogits = mlm_loss(logits, labels)
    grads = _backward_internal(params, cache, dlogits)
    acc = float((logits.argmax(axis=-1) == labels).mean())
    return loss, grads, acc


def backward(params: ModelParams, batch) -> dict[str, np.ndarray]:
    """Exact MLM-loss gradients for every parameter tensor (dropout off,
    as used for gradient checking)."""
    return loss_and_grads(params, batch, train_mode=False)[1]


# ---------------------------------------------------------------------------
# Checkpoints: header line, JSON manifest line, then raw little-endian
# float32 blobs in manifest order.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, config: TransformerConfig,
                    named_tensors: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name in sorted(named_tensors):
        arr = np.ascontiguousarray(named_tensors[name], dtype="<f4")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": "<f4", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"config": asdict(config), "tensors": index, "extra": extra or {}}
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_HEADER)
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (config, {name: float32 tensor}, extra)."""
    with open(path, "rb") as f:
        header = f.readline()
        if header != CKPT_HEADER:
            raise ValueError(f"not a checkpoint file: {path}")
        manifest = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    config = TransformerConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return config, tensors, manifest["extra"]
