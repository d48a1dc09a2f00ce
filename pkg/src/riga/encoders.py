"""PointNet set encoders, descriptor fusion and the projection heads.

Parameters live in a flat ``dict`` from dotted name to :class:`Parameter`::

    psi_g.layer{0,1}.{weight,bias}      local PPF encoder
    psi_s.layer{0,1}.{weight,bias}      global PPF encoder
    blocks.{l}.{intra,inter}.*          attention stack (see attention.py)
    mlp_c.layer{0,1,2}.{weight,bias}    node projection head
    mlp_f.layer{0,1,2}.{weight,bias}    point projection head
    slack.alpha                         Sinkhorn slack score

Linear layers compute ``x @ weight + bias`` with ``weight`` of shape
``(fan_in, fan_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .errors import InvalidInputError, ShapeError
from .ppf import SignatureSet

Params = Dict[str, Parameter]

STAGES = ("geometric", "structural", "informed", "aware", "projected")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 4
    pointnet_hidden: int = 64
    width: int = 256
    proj_dims: tuple = (256, 128, 64, 32)
    num_blocks: int = 6
    heads: int = 4
    scaling_mode: str = "pre_softmax"
    # relu on the last per-point layer before max-pooling; False keeps it linear
    pool_relu: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise InvalidInputError("width must be divisible by heads")
        if self.proj_dims[0] != self.width:
            raise InvalidInputError("projection head must start at the descriptor width")
        if self.num_blocks < 0:
            raise InvalidInputError("num_blocks must be nonnegative")
        if self.scaling_mode not in ("pre_softmax", "literal_eq10"):
            raise InvalidInputError(f"unknown scaling_mode {self.scaling_mode!r}")

    @property
    def out_dim(self) -> int:
        return self.proj_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Descriptor:
    """A batch of descriptors (one per row) tagged with its pipeline stage."""

    values: Tensor
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidInputError(f"unknown stage {self.stage!r}")
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 2:
            raise ShapeError("descriptor values must be (count, width)")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def numpy(self) -> np.ndarray:
        return self.values.data


def _linear_shapes(prefix: str, dims: Sequence[int]) -> list:
    out = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out.append((f"{prefix}.layer{i}.weight", (a, b), a))
        out.append((f"{prefix}.layer{i}.bias", (b,), None))
    return out


def parameter_shapes(cfg: ModelConfig) -> list:
    """``(name, shape, fan_in)`` for every parameter; ``fan_in`` None marks a zero-init bias."""
    from .attention import block_shapes

    shapes = []
    pn_dims = (cfg.in_dim, cfg.pointnet_hidden, cfg.width)
    shapes += _linear_shapes("psi_g", pn_dims)
    shapes += _linear_shapes("psi_s", pn_dims)
    for layer in range(cfg.num_blocks):
        shapes += block_shapes(f"blocks.{layer}", cfg.width)
    shapes += _linear_shapes("mlp_c", cfg.proj_dims)
    shapes += _linear_shapes("mlp_f", cfg.proj_dims)
    return shapes


def init_params(seed: int, cfg: ModelConfig = ModelConfig()) -> Params:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases, slack 1.0."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape, fan_in in parameter_shapes(cfg):
        if fan_in is None:
            data = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(data, name)
    params["slack.alpha"] = Parameter(np.array([1.0]), "slack.alpha")
    return params


def mlp(x: Tensor, params: Params, prefix: str, n_layers: int, last_relu: bool) -> Tensor:
    for i in range(n_layers):
        w = params[f"{prefix}.layer{i}.weight"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"{prefix}.layer{i}: input width {x.shape[-1]} != {w.shape[0]}")
        lead = x.shape[:-1]
        flat = dc.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = dc.add_bias(dc.matmul(flat, w), params[f"{prefix}.layer{i}.bias"])
        if i < n_layers - 1 or last_relu:
            y = dc.relu(y)
        x = dc.reshape(y, lead + (w.shape[1],)) if len(lead) != 1 else y
    return x


def pack_sets(sets: Sequence[np.ndarray], in_dim: int = 4):
    """Pad variable-size ``(k_i, in_dim)`` sets into ``(B, S, in_dim)`` plus a validity mask."""
    if any(len(s) == 0 for s in sets):
        raise InvalidInputError("cannot encode an empty signature")
    S = max(len(s) for s in sets)
    packed = np.zeros((len(sets), S, in_dim))
    mask = np.zeros((len(sets), S), dtype=bool)
    for b, s in enumerate(sets):
        packed[b, : len(s)] = s
        mask[b, : len(s)] = True
    return packed, mask


def encode_sets(packed, mask, params: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    """Shared per-element MLP followed by a masked max-pool, for a batch of sets."""
    x = packed if isinstance(packed, Tensor) else Tensor(packed)
    h = mlp(x, params, prefix, 2, last_relu=cfg.pool_relu)
    return dc.max_over_set(h, mask)


def pointnet_encode(sig: SignatureSet, params: Params, which: str = "g",
                    cfg: ModelConfig = ModelConfig()) -> Descriptor:
    if len(sig) == 0:
        raise InvalidInputError("cannot encode an empty signature")
    prefix = {"g": "psi_g", "s": "psi_s"}[which]
    packed, mask = pack_sets([sig.quadruples], cfg.in_dim)
    out = encode_sets(packed, mask, params, prefix, cfg)
    return Descriptor(out, "geometric" if which == "g" else "structural")


def inform_descriptor(g: Descriptor, s: Descriptor) -> Descriptor:
    """Element-wise sum of geometric and structural descriptors."""
    if g.values.shape != s.values.shape:
        raise ShapeError(f"cannot add descriptors of shape {g.values.shape} and {s.values.shape}")
    return Descriptor(dc.add(g.values, s.values), "informed")


def project_descriptor(d: Descriptor, params: Params, head: str = "c") -> Descriptor:
    """Apply the node (``head="c"``) or point (``head="f"``) projection MLP."""
    prefix = {"c": "mlp_c", "f": "mlp_f"}[head]
    n_layers = sum(1 for k in params if k.startswith(prefix) and k.endswith(".weight"))
    if d.width != params[f"{prefix}.layer0.weight"].shape[0]:
        raise ShapeError(f"{prefix} expects width {params[f'{prefix}.layer0.weight'].shape[0]}, got {d.width}")
    return Descriptor(mlp(d.values, params, prefix, n_layers, last_relu=False), "projected")
