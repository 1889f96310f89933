"""Pipeline configuration: a flat ``key = value`` text file with ``#`` comments.

Every key has a default; an empty file gives the full configuration with the
reference hyperparameters (T = 300, betas 1e-4 .. 0.02, 100 diffusion epochs
at lr 1e-3 halved every 5, 20 fine-tuning epochs at lr 5e-3 halved every 4).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .nets import ArchConfig
from .preprocess import ClaheConfig
from .schedule import NoiseSchedule, build_linear_schedule


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.key = key


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _count(text: str) -> int | None:
    return None if text.strip().lower() == "all" else int(text)


@dataclass
class PipelineConfig:
    seed: int = 0
    image_size: int = 64
    # diffusion schedule
    T: int = 300
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimisation
    epochs_seg: int = 20
    epochs_diffusion: int = 100
    epochs_finetune: int = 20
    epochs_oracle: int = 20
    epochs_grid: int = 20
    lr_seg: float = 5e-3
    lr_diffusion: float = 1e-3
    lr_finetune: float = 5e-3
    lr_decay_every_seg: int = 4
    lr_decay_every_diffusion: int = 5
    lr_decay_every_finetune: int = 4
    lr_decay_factor: float = 0.5
    batch_size: int = 16
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    # architecture
    seg_width: int = 32
    denoiser_width: int = 32
    depth: int = 3
    time_dim: int = 64
    spade_hidden: int = 16
    spade_levels: str = "all"
    # data
    source_style: str = "source"
    target_styles: tuple[str, ...] = ("targetA", "targetB")
    data_dir: str = ""
    n_source: int = 200
    n_target: int = 200
    n_test: int = 40
    source_holdout: float = 0.2
    clahe_tiles: int = 4
    clahe_clip: float = 2.0
    clahe_bins: int = 64
    # adaptation
    pseudo_threshold: float = 0.5
    sample_count: int | None = None  # None: one sample per source label
    sample_batch: int = 64
    finetune_mix_source: bool = False
    # robustness grid
    pollution_fp: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4, 0.6)
    pollution_fn: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    grid_target: str = "targetA"
    n_grid_train: int = 100
    n_grid_eval: int = 16
    export_pgm: bool = False

    def validate(self) -> "PipelineConfig":
        for name in ("epochs_seg", "epochs_diffusion", "epochs_finetune", "epochs_oracle",
                     "epochs_grid", "batch_size", "n_source", "n_target", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        for name in ("lr_decay_every_seg", "lr_decay_every_diffusion", "lr_decay_every_finetune"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        for name in ("lr_seg", "lr_diffusion", "lr_finetune"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", key=name)
        if not 0 < self.pseudo_threshold < 1:
            raise ConfigError("pseudo_threshold must lie in (0, 1)", key="pseudo_threshold")
        if not 0 < self.source_holdout < 1:
            raise ConfigError("source_holdout must lie in (0, 1)", key="source_holdout")
        if self.sample_count is not None and self.sample_count < 0:
            raise ConfigError("sample_count must be >= 0 or 'all'", key="sample_count")
        try:
            self.schedule()
            self.arch("segmenter")
            self.arch("denoiser")
            self.clahe()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for rates, key in ((self.pollution_fp, "pollution_grid"), (self.pollution_fn, "pollution_grid")):
            if any(not 0 <= r <= 1 for r in rates):
                raise ConfigError("pollution rates must lie in [0, 1]", key=key)
        from .phantom import get_style

        for name in (self.source_style, *self.target_styles):
            try:
                get_style(name)
            except ValueError as exc:
                raise ConfigError(str(exc), key="target_styles") from exc
        return self

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def arch(self, kind: str) -> ArchConfig:
        return ArchConfig(
            kind=kind,
            image_size=self.image_size,
            base_width=self.denoiser_width if kind == "denoiser" else self.seg_width,
            depth=self.depth,
            time_dim=self.time_dim,
            spade_hidden=self.spade_hidden,
            spade_levels=self.spade_levels,
        )

    def clahe(self) -> ClaheConfig:
        return ClaheConfig(self.clahe_tiles, self.clahe_tiles, self.clahe_clip, self.clahe_bins)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        """Render back to the ``key = value`` grammar (round-trips through parse)."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("pollution_fp", "pollution_fn"):
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "all"
            lines.append(f"{f.name} = {v}")
        fp = ", ".join(f"{x:g}" for x in self.pollution_fp)
        fn = ", ".join(f"{x:g}" for x in self.pollution_fn)
        lines.append(f"pollution_grid = {fp} x {fn}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "target_styles": _strs,
    "sample_count": _count,
    "finetune_mix_source": _bool,
    "export_pgm": _bool,
}


def _pollution_grid(text: str):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError("expected '<fp rates> x <fn rates>'")
    return _floats(parts[0]), _floats(parts[1])


def parse_config_text(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    known = {f.name: f for f in fields(PipelineConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "pollution_grid":
                cfg.pollution_fp, cfg.pollution_fn = _pollution_grid(value)
                continue
            if key not in known:
                raise ConfigError(f"unknown key {key!r}", lineno, key)
            default = getattr(PipelineConfig(), key)
            if key in _PARSERS:
                parsed = _PARSERS[key](value)
            elif isinstance(default, bool):
                parsed = _bool(value)
            elif isinstance(default, int):
                parsed = int(value)
            elif isinstance(default, float):
                parsed = float(value)
            elif isinstance(default, tuple):
                parsed = _floats(value)
            else:
                parsed = value
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, key) from exc
        setattr(cfg, key, parsed)
    return cfg.validate()


def parse_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
