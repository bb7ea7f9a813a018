"""Run configuration: flat ``key = value`` config files plus defaults.

Unset keys fall back to the published defaults; the RoI-loss weight and
the training threshold default by shot count (1.0 and 0.5 for 1-shot,
0.5 and 0.7 for 5-shot) unless set explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderArch


def _coerce(raw: str):
    raw = raw.strip()
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        out[key.strip()] = _coerce(raw)
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def apply_overrides(mapping: dict, sets) -> dict:
    """Apply ``key=value`` override strings on top of a parsed mapping."""
    merged = dict(mapping)
    for item in sets or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        merged[key.strip()] = _coerce(raw)
    return merged


@dataclass
class RunConfig:
    data_dir: str = "data/shapes"
    arch_blocks: int = 3
    arch_channels: tuple = (8, 16, 32)
    arch_kernel: int = 3
    arch_input_size: int = 32
    image_size: int = 32
    per_class_count: int = 200
    distractors_min: int = 1
    distractors_max: int = 3
    background: str = "solid-noise"
    lr: float = 1e-4
    epochs_base: int = 200
    epochs_ours: int = 100
    episodes_per_epoch: int = 50
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.05
    pretrain_batch: int = 64
    temperature: float = 64.0
    lambda_roi: float | None = None
    tau_eval: float = 0.5
    tau_train: float | None = None
    connectivity: int = 4
    roi_grid: int = 3
    roi_samples: int = 2
    n_way: int = 5
    k_shot: int = 1
    queries: int = 15
    tasks: int = 10000
    workers: int = 1
    seed: int = 0

    _KEYS = {
        "dataset.path": "data_dir",
        "arch.blocks": "arch_blocks",
        "arch.channels": "arch_channels",
        "arch.kernel": "arch_kernel",
        "arch.input_size": "arch_input_size",
        "data.image_size": "image_size",
        "data.per_class_count": "per_class_count",
        "data.distractors_min": "distractors_min",
        "data.distractors_max": "distractors_max",
        "data.background": "background",
        "train.lr": "lr",
        "train.epochs_base": "epochs_base",
        "train.epochs_ours": "epochs_ours",
        "train.episodes_per_epoch": "episodes_per_epoch",
        "train.pretrain_epochs": "pretrain_epochs",
        "train.pretrain_lr": "pretrain_lr",
        "train.pretrain_batch": "pretrain_batch",
        "loss.T": "temperature",
        "loss.lambda_roi": "lambda_roi",
        "loc.tau_eval": "tau_eval",
        "loc.tau_train": "tau_train",
        "loc.connectivity": "connectivity",
        "roi.grid": "roi_grid",
        "roi.samples": "roi_samples",
        "eval.n_way": "n_way",
        "eval.k_shot": "k_shot",
        "eval.queries": "queries",
        "eval.tasks": "tasks",
        "eval.workers": "workers",
        "seed": "seed",
    }

    def __post_init__(self):
        if isinstance(self.arch_channels, str):
            self.arch_channels = tuple(int(c) for c in self.arch_channels.split(","))
        else:
            self.arch_channels = tuple(int(c) for c in self.arch_channels)
        for name in ("tau_eval", "tau_train"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("lr", "pretrain_lr", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_base", "epochs_ours", "episodes_per_epoch",
                     "pretrain_epochs", "pretrain_batch", "n_way", "k_shot",
                     "queries", "tasks", "workers", "roi_grid", "roi_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        kwargs = {}
        for key, value in mapping.items():
            if key not in cls._KEYS:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[cls._KEYS[key]] = value
        return cls(**kwargs)

    @property
    def arch(self) -> EncoderArch:
        return EncoderArch(blocks=self.arch_blocks, channels=self.arch_channels,
                           kernel=self.arch_kernel, input_size=self.arch_input_size)

    @property
    def lambda_roi_resolved(self) -> float:
        if self.lambda_roi is not None:
            return float(self.lambda_roi)
        return 1.0 if self.k_shot == 1 else 0.5

    @property
    def tau_train_resolved(self) -> float:
        if self.tau_train is not None:
            return float(self.tau_train)
        return 0.5 if self.k_shot == 1 else 0.7

    def echo(self) -> dict:
        """Canonical key -> value view for report embedding.

        Worker count is execution machinery, not experiment identity, and
        is left out so reports are byte-identical across worker counts.
        """
        by_field = {f: k for k, f in self._KEYS.items()}
        out = {}
        for f in fields(self):
            if f.name.startswith("_") or f.name == "workers":
                continue
            key = by_field[f.name]
            value = getattr(self, f.name)
            if f.name == "arch_channels":
                value = ",".join(str(c) for c in value)
            if f.name == "lambda_roi":
                value = self.lambda_roi_resolved
            if f.name == "tau_train":
                value = self.tau_train_resolved
            out[key] = value
        return out
