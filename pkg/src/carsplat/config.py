"""Pipeline configuration: one section per stage, loaded from TOML."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .asset import DEFAULT_KEEP_FRACTION
from .insertion import ICP_MAX_ITERS, ICP_TOL, ICP_TRIM, SHADOW_MARGIN, SHADOW_OPACITY
from .metrics import IOU_THRESH, N_PROJ
from .recon import TrainConfig
from .retrieval import DEFAULT_MAX_OVERLAP, DEFAULT_MIN_AREA_PX


class ConfigError(ValueError):
    pass


@dataclass
class ReconstructConfig(TrainConfig):
    precision: str = "float32"

    def __post_init__(self):
        super().__post_init__()
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.background not in ("black", "env_lookup"):
            raise ValueError("background must be 'black' or 'env_lookup'")

    def train_config(self, seed: int) -> TrainConfig:
        d = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        d["seed"] = seed
        return TrainConfig(**d)


@dataclass
class PostprocessConfig:
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    front_hint: str = ""          # "", "+x" or "-x"

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.front_hint not in ("", "+x", "-x"):
            raise ValueError("front_hint must be '', '+x' or '-x'")


@dataclass
class BankConfig:
    normalize: bool = False       # unit-normalize embeddings at ingestion


@dataclass
class RetrieveConfig:
    k: int = 5
    min_area_px: int = DEFAULT_MIN_AREA_PX
    max_overlap: float = DEFAULT_MAX_OVERLAP

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class InsertConfig:
    icp_trim: float = ICP_TRIM
    icp_max_iters: int = ICP_MAX_ITERS
    icp_tol: float = ICP_TOL
    shadow_opacity: float = SHADOW_OPACITY
    shadow_margin: float = SHADOW_MARGIN

    def __post_init__(self):
        if not 0.0 <= self.icp_trim < 1.0:
            raise ValueError("icp_trim must lie in [0, 1)")
        if not 0.0 <= self.shadow_opacity < 1.0:
            raise ValueError("shadow_opacity must lie in [0, 1)")


@dataclass
class RenderConfig:
    background: str = "black"
    tile: int = 32
    n_mips: int = 6
    lut_res: int = 64

    def __post_init__(self):
        if self.background not in ("black", "env_lookup"):
            raise ValueError("background must be 'black' or 'env_lookup'")


@dataclass
class EvaluateConfig:
    iou_thresh: float = IOU_THRESH
    n_proj: int = N_PROJ
    max_color_samples: int = 20000

    def __post_init__(self):
        if not 0.0 < self.iou_thresh < 1.0:
            raise ValueError("iou_thresh must lie in (0, 1)")


SECTIONS = {
    "reconstruct": ReconstructConfig,
    "postprocess": PostprocessConfig,
    "bank": BankConfig,
    "retrieve": RetrieveConfig,
    "insert": InsertConfig,
    "render": RenderConfig,
    "evaluate": EvaluateConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    retrieve: RetrieveConfig = field(default_factory=RetrieveConfig)
    insert: InsertConfig = field(default_factory=InsertConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = _coerce("seed", data["seed"], int)
        for name, klass in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name: f for f in fields(klass) if f.name != "seed"}
            bad = set(section) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(bad))}")
            values = {k: _coerce(f"{name}.{k}", v, type(getattr(klass(), k))) for k, v in section.items()}
            try:
                kwargs[name] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            d.pop("seed", None)
            out[name] = d
        return out

    def snapshot(self, out_dir, stage: str):
        """Write the fully resolved configuration next to a stage's outputs."""
        path = Path(out_dir) / f"{stage}.config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _coerce(key: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def describe(section: str) -> str:
    """``key = default`` lines for one section, used in ``--help``."""
    klass = SECTIONS[section]
    inst = klass()
    lines = [f"[{section}]"]
    for f in fields(klass):
        if f.name == "seed":
            continue
        lines.append(f"  {f.name} = {json.dumps(getattr(inst, f.name))}")
    return "\n".join(lines)
