"""Run configuration: one flat ``key = value`` file covering every tunable.

Blank lines and lines starting with ``#`` are ignored. Unknown keys, repeated
keys and values that fail to parse are rejected with :class:`ConfigError`.
"""

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import SynthConfig, config_hash
from .encoders import ModelConfig
from .errors import ConfigError, RigaError
from .losses import LossConfig
from .matcher import InterpolationConfig
from .metrics import MetricThresholds
from .pipeline import PipelineConfig
from .solver import RansacConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    pointnet_hidden: int = 64
    width: int = 256
    proj_dims: tuple = (256, 128, 64, 32)
    num_blocks: int = 6
    heads: int = 4
    scaling_mode: str = "pre_softmax"
    init_seed: int = 0
    # description and matching
    n_nodes: int = 256
    support_radius: float = 0.2
    support_max: int = 64
    vicinity_max: int = 32
    normal_k: int = 16
    top_k: int = 256
    sinkhorn_iters: int = 100
    interp_k: int = 3
    interp_epsilon: float = 1e-9
    extract_mode: str = "row_and_col_argmax"
    local_features: str = "ppf"
    # losses
    lam: float = 1.0
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 10.0
    tau_p: float = 0.05
    anchors_per_frame: int = 128
    train_coarse: int = 256
    # optimisation
    lr: float = 1e-4
    lr_decay: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 300
    train_seed: int = 0
    # registration
    ransac_iterations: int = 5000
    ransac_threshold: float = 0.05
    ransac_seed: int = 0
    num_corr: int = 5000
    # evaluation
    tau1: float = 0.10
    tau2: float = 0.05
    tau3: float = 0.20
    # synthetic data
    shape: str = "composite"
    n_points: int = 1024
    partial_points: int = 768
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    rot_max_deg: float = 45.0
    trans_range: float = 0.5
    synth_seed: int = 0
    shape_pool: int = 0
    synth_normals: str = "estimated"

    def __post_init__(self):
        # build every sub-config once so invalid combinations fail early
        try:
            self.model(), self.pipeline(), self.loss(), self.ransac(), self.metrics(), self.synth()
        except RigaError as exc:
            raise ConfigError(str(exc)) from None

    def model(self) -> ModelConfig:
        return ModelConfig(pointnet_hidden=self.pointnet_hidden, width=self.width,
                           proj_dims=tuple(self.proj_dims), num_blocks=self.num_blocks, heads=self.heads,
                           scaling_mode=self.scaling_mode)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(n_nodes=self.n_nodes, support_radius=self.support_radius,
                              support_max=self.support_max, vicinity_max=self.vicinity_max,
                              normal_k=self.normal_k, top_k=self.top_k, sinkhorn_iters=self.sinkhorn_iters,
                              interp=InterpolationConfig(self.interp_k, self.interp_epsilon),
                              extract_mode=self.extract_mode, local_features=self.local_features)

    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam, delta_p=self.delta_p, delta_n=self.delta_n, gamma=self.gamma,
                          tau_p=self.tau_p, anchors_per_frame=self.anchors_per_frame,
                          train_coarse=self.train_coarse)

    def ransac(self) -> RansacConfig:
        return RansacConfig(iterations=self.ransac_iterations, inlier_threshold=self.ransac_threshold,
                            seed=self.ransac_seed)

    def metrics(self) -> MetricThresholds:
        return MetricThresholds(self.tau1, self.tau2, self.tau3)

    def synth(self, seed=None) -> SynthConfig:
        return SynthConfig(shape=self.shape, n_points=self.n_points, partial_points=self.partial_points,
                           noise_sigma=self.noise_sigma, noise_clip=self.noise_clip,
                           rot_max_deg=self.rot_max_deg, trans_range=self.trans_range,
                           shape_pool=self.shape_pool, normals=self.synth_normals,
                           seed=self.synth_seed if seed is None else seed)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def lines(self) -> list:
        """``key=value`` lines in field order, parseable by :func:`parse_config`."""
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self)]

    def model_hash(self) -> str:
        return config_hash(self.model().to_dict())

    def to_dict(self) -> dict:
        return asdict(self)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(name: str, kind, raw: str):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, _FIELD_TYPES[key], raw)
    return replace(base, **values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
