"""Interleaved intra-frame (self) and inter-frame (cross) attention blocks.

Each module projects descriptors to multi-head queries, keys and values,
forms a message per query, projects the re-concatenated heads, and applies
a residual update ``d + MLP([d, m])`` where the MLP is ``relu`` on the
concatenation followed by one linear layer.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import Descriptor, ModelConfig, Params
from .errors import InvalidInputError, ShapeError


def block_shapes(prefix: str, width: int) -> list:
    shapes = []
    for part in ("intra", "inter"):
        for w in ("wq", "wk", "wv", "wo"):
            shapes.append((f"{prefix}.{part}.{w}", (width, width), width))
        shapes.append((f"{prefix}.{part}.mlp.weight", (2 * width, width), 2 * width))
        shapes.append((f"{prefix}.{part}.mlp.bias", (width,), None))
    return shapes


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return dc.transpose(dc.reshape(x, (n, heads, c // heads)), (1, 0, 2))  # (H, n, dh)


def attend(queries: Tensor, kv: Tensor, params: Params, prefix: str, heads: int,
           scaling_mode: str = "pre_softmax", return_weights: bool = False):
    """Multi-head messages flowing from ``kv`` rows to each ``queries`` row.

    ``pre_softmax`` divides logits by sqrt(width / heads) before the softmax;
    ``literal_eq10`` applies the softmax first and then divides the weights
    by sqrt(width), so they no longer sum to one.
    """
    if kv.shape[0] == 0:
        raise InvalidInputError("attention over an empty key/value set")
    if queries.ndim != 2 or kv.ndim != 2 or queries.shape[1] != kv.shape[1]:
        raise ShapeError(f"attend: {queries.shape} vs {kv.shape}")
    n, c = queries.shape
    if c % heads:
        raise ShapeError("width must be divisible by heads")
    q = _split_heads(queries @ params[f"{prefix}.wq"], heads)
    k = _split_heads(kv @ params[f"{prefix}.wk"], heads)
    v = _split_heads(kv @ params[f"{prefix}.wv"], heads)
    logits = dc.matmul(q, dc.transpose(k, (0, 2, 1)))  # (H, n, m)
    if scaling_mode == "pre_softmax":
        weights = dc.softmax_lastdim(dc.mul_scalar(logits, 1.0 / np.sqrt(c // heads)))
    elif scaling_mode == "literal_eq10":
        weights = dc.mul_scalar(dc.softmax_lastdim(logits), 1.0 / np.sqrt(c))
    else:
        raise InvalidInputError(f"unknown scaling_mode {scaling_mode!r}")
    fused = dc.matmul(weights, v)  # (H, n, dh)
    merged = dc.reshape(dc.transpose(fused, (1, 0, 2)), (n, c))
    msg = merged @ params[f"{prefix}.wo"]
    return (msg, weights) if return_weights else msg


def _residual(d: Tensor, m: Tensor, params: Params, prefix: str) -> Tensor:
    z = dc.relu(dc.concat_lastdim([d, m]))
    upd = dc.add_bias(z @ params[f"{prefix}.mlp.weight"], params[f"{prefix}.mlp.bias"])
    return d + upd


def intra_update(d: Tensor, params: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    m = attend(d, d, params, f"{prefix}.intra", cfg.heads, cfg.scaling_mode)
    return _residual(d, m, params, f"{prefix}.intra")


def inter_update(da: Tensor, db: Tensor, params: Params, prefix: str, cfg: ModelConfig):
    if da.shape[0] == 0 or db.shape[0] == 0:
        raise InvalidInputError("inter-frame update needs two nonempty frames")
    p = f"{prefix}.inter"
    ma = attend(da, db, params, p, cfg.heads, cfg.scaling_mode)
    mb = attend(db, da, params, p, cfg.heads, cfg.scaling_mode)
    return _residual(da, ma, params, p), _residual(db, mb, params, p)


def run_stack(informed_a, informed_b, params: Params, cfg: ModelConfig):
    """K rounds of intra then inter updates; returns the globally-aware descriptors."""
    a = informed_a.values if isinstance(informed_a, Descriptor) else informed_a
    b = informed_b.values if isinstance(informed_b, Descriptor) else informed_b
    for layer in range(cfg.num_blocks):
        prefix = f"blocks.{layer}"
        a = intra_update(a, params, prefix, cfg)
        b = intra_update(b, params, prefix, cfg)
        a, b = inter_update(a, b, params, prefix, cfg)
    return Descriptor(a, "aware"), Descriptor(b, "aware")
