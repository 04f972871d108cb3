"""JSON run configuration, ``--set`` overrides and the seed environment override."""

import json
import os
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .losses import LossWeights
from .metrics import DEFAULT_RADII
from .pgsi import PgsiConfig
from .synth import DEFAULT_CLASS_MIX, SceneSpec
from .trainer import BankConfig, FeatureConfig, PgtmConfig, TrainConfig
from .voxel_core import TAIL_THRESHOLD_KITTI, GridDims

SEED_ENV = "VOXPROTO_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field (dotted)."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Section):
    x: int = Field(32, gt=0)
    y: int = Field(32, gt=0)
    z: int = Field(8, gt=0)
    voxel_size: float = Field(0.2, gt=0)


class SceneSection(_Section):
    dims: GridSection = GridSection()
    k_cls: int = Field(8, ge=1, lt=255)
    class_mix: tuple[float, ...] = DEFAULT_CLASS_MIX
    blob_count_per_class: int = Field(2, ge=1)
    ood_count: int = Field(2, ge=0)
    ood_size: tuple[int, int] = (3, 5)
    occlusion_fraction: float = Field(0.3, ge=0, le=1)

    @field_validator("class_mix")
    @classmethod
    def _fractions(cls, v):
        if any(not 0 <= f <= 1 for f in v):
            raise ValueError("fractions must lie in [0, 1]")
        return v

    @field_validator("ood_size")
    @classmethod
    def _size_range(cls, v):
        if not 1 <= v[0] <= v[1]:
            raise ValueError("expected an increasing pair of positive ints")
        return v

    @model_validator(mode="after")
    def _mix_length(self):
        if len(self.class_mix) != self.k_cls:
            raise ValueError(f"class_mix has {len(self.class_mix)} entries but k_cls is {self.k_cls}")
        return self


class FeatureSection(_Section):
    channels: int = Field(16, ge=1)
    mean_norm: float = Field(2.0, gt=0)
    sigma: float = Field(0.25, ge=0)
    ood_margin: float = Field(4.0, ge=0)
    shared_norm: float = Field(4.0, ge=0)
    occluded_gain: float = Field(0.7, ge=0)


class TrainSection(_Section):
    steps: int = Field(500, gt=0)
    batch_scenes: int = Field(2, ge=1)
    learning_rate: float = Field(0.4, ge=0)
    seed: int = Field(0, ge=0, lt=1 << 64)
    enable_pbcl: bool = True
    enable_pgsi: bool = True
    enable_pgtm: bool = True
    init_scale: float = Field(0.1, ge=0)
    eval_every: int = Field(0, ge=0)


class LossSection(_Section):
    w_sem: float = Field(1.0, ge=0)
    w_aux: float = Field(0.2, ge=0)
    w_tail: float = Field(1.0, ge=0)
    w_proto: float = Field(1.0, ge=0)
    tau_cl: float = Field(0.05, gt=0)


class PgsiSection(_Section):
    tau_att: float = Field(1.0, gt=0)
    alpha_pgsi: float = Field(0.2, gt=0)
    theta: float = Field(0.5, ge=0, le=1)


class PgtmSection(_Section):
    eta: float = 0.3
    delta: float = 0.1
    k_top_ratio: float = Field(0.02, ge=0, le=1)
    tau_tail: float = Field(1.0, gt=0)


class BankSection(_Section):
    beta: float = Field(0.05, gt=0, lt=1)
    t_warm: int = Field(100, ge=0)
    theta_max: float = Field(0.7, ge=0)
    theta_min: float = Field(0.3, ge=0)
    n_min: int = Field(2, ge=1)


class MetricSection(_Section):
    radii: tuple[float, ...] = DEFAULT_RADII
    tau_conf: float = Field(0.3, gt=0, lt=1)
    tail_threshold: float = Field(TAIL_THRESHOLD_KITTI, gt=0, lt=1)

    @field_validator("radii")
    @classmethod
    def _radii(cls, v):
        if any(r < 0 for r in v):
            raise ValueError("radii must be non-negative")
        return v


class RunConfig(_Section):
    scene: SceneSection = SceneSection()
    features: FeatureSection = FeatureSection()
    train: TrainSection = TrainSection()
    losses: LossSection = LossSection()
    pgsi: PgsiSection = PgsiSection()
    pgtm: PgtmSection = PgtmSection()
    bank: BankSection = BankSection()
    metrics: MetricSection = MetricSection()

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        return SceneSpec(GridDims(**s.dims.model_dump()), s.k_cls, s.class_mix,
                         s.blob_count_per_class, s.ood_count, s.ood_size, s.occlusion_fraction,
                         seed=self.train.seed)

    def to_train_config(self) -> TrainConfig:
        t, m = self.train, self.metrics
        return TrainConfig(
            steps=t.steps, batch_scenes=t.batch_scenes, learning_rate=t.learning_rate,
            weights=LossWeights(**self.losses.model_dump()),
            pgsi=PgsiConfig(**self.pgsi.model_dump()),
            pgtm=PgtmConfig(**self.pgtm.model_dump()),
            bank=BankConfig(**self.bank.model_dump()),
            scene=self.scene_spec(),
            features=FeatureConfig(**self.features.model_dump()),
            seed=t.seed, enable_pbcl=t.enable_pbcl, enable_pgsi=t.enable_pgsi,
            enable_pgtm=t.enable_pgtm, tail_threshold=m.tail_threshold, tau_conf=m.tau_conf,
            radii=tuple(m.radii), eval_every=t.eval_every, init_scale=t.init_scale,
        )

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _leaf_paths(model_cls, prefix=()):
    for name, info in model_cls.model_fields.items():
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            yield from _leaf_paths(ann, prefix + (name,))
        else:
            yield prefix + (name,)


LEAF_PATHS = tuple(_leaf_paths(RunConfig))


def resolve_key(key: str) -> tuple:
    """Dotted path for ``key``; a bare leaf name is accepted when it is unambiguous."""
    parts = tuple(key.split("."))
    if parts in LEAF_PATHS or any(p[: len(parts)] == parts for p in LEAF_PATHS):
        return parts
    matches = [p for p in LEAF_PATHS if p[-len(parts):] == parts]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError("unknown configuration key", key)
    options = ", ".join(".".join(m) for m in matches)
    raise ConfigError(f"ambiguous key, could be one of {options}", key)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings to a plain config dict; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        path = resolve_key(key.strip())
        node = out
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError("cannot descend into a non-object value", ".".join(path))
            node = child
        node[path[-1]] = _parse_value(value.strip())
    return out


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    return ConfigError(err["msg"], path)


def build_config(raw: dict = None, overrides=(), env=None) -> RunConfig:
    """Validate ``raw`` after overrides. ``VOXPROTO_SEED`` (from ``env``) replaces the seed,
    then explicit overrides are applied on top."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    env = os.environ if env is None else env
    raw = json.loads(json.dumps(raw))
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV], 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        raw.setdefault("train", {})
        if not isinstance(raw["train"], dict):
            raise ConfigError("expected an object", "train")
        raw["train"]["seed"] = seed
    raw = apply_overrides(raw, overrides)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise _first_error(exc) from None


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Read a JSON config file (or the defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return build_config(raw, overrides, env)
