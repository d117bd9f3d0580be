"""Flat key = value run configuration.

One assignment per line, # starts a comment, blank lines are skipped.
Unknown keys and badly typed values are format errors so a bad file
fails loudly before any work happens.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import FormatError

STRATEGIES = (
    "obd",
    "obs",
    "c-obd",
    "c-obs",
    "kron-obd",
    "kron-obs",
    "eigendamage",
)


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "mlp:16"
    image: str = ""
    dataset: str = "blobs"
    classes: int = 4
    dim: int = 2
    n_train: int = 256
    n_test: int = 128
    sigma: float = 0.8
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    epochs: int = 10
    lr: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 32
    finetune_epochs: int = 4
    finetune_lr: float = 0.02
    strategy: str = "eigendamage"
    ratio: float = 0.5
    cap: float = -1.0
    iterations: int = 2
    damping: float = 1e-6
    fisher_batches: int = 0
    rank: int = 0
    out: str = "runs/default"
    checkpoint: str = ""


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as err:
        raise FormatError(f"bad value for {key!r}: {raw!r}") from err


def parse_config(path) -> RunConfig:
    cfg = RunConfig()
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise FormatError(f"cannot read config {path}: {err}") from err
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise FormatError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _FIELD_TYPES:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if cfg.strategy not in STRATEGIES:
        raise FormatError(
            f"unknown strategy {cfg.strategy!r}; pick one of {', '.join(STRATEGIES)}"
        )
    if not 0.0 <= cfg.ratio <= 1.0:
        raise FormatError(f"ratio must lie in [0, 1], got {cfg.ratio}")
    if cfg.cap != -1.0 and not 0.0 < cfg.cap <= 1.0:
        raise FormatError(f"cap must lie in (0, 1], got {cfg.cap}")
    if cfg.dataset not in ("blobs", "moons", "random", "idx"):
        raise FormatError(f"unknown dataset kind {cfg.dataset!r}")
    if cfg.epochs < 1 or cfg.finetune_epochs < 0:
        raise FormatError("epoch counts must be positive")
    if cfg.iterations < 1:
        raise FormatError("iterations must be at least 1")
    parse_arch(cfg.arch)
    if cfg.image:
        parse_image(cfg.image)


def parse_arch(spec: str) -> tuple:
    """Split an architecture spec like mlp:16,8 or cnn:8,16."""
    if ":" not in spec:
        raise FormatError(f"architecture spec needs kind:widths, got {spec!r}")
    kind, _, widths = spec.partition(":")
    if kind not in ("mlp", "cnn"):
        raise FormatError(f"unknown architecture kind {kind!r}")
    try:
        sizes = [int(w) for w in widths.split(",") if w.strip()]
    except ValueError as err:
        raise FormatError(f"bad width list in {spec!r}") from err
    if not sizes or any(s < 1 for s in sizes):
        raise FormatError(f"widths must be positive integers, got {spec!r}")
    return kind, sizes


def parse_image(spec: str) -> tuple:
    """Parse a CxHxW image shape like 1x12x12."""
    parts = spec.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as err:
        raise FormatError(f"bad image shape {spec!r}") from err
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"image shape must be CxHxW, got {spec!r}")
    return dims


def resolve_cap(cfg: RunConfig, iterative: bool) -> float:
    """Default removal cap: generous for one-shot, tight per round."""
    if cfg.cap != -1.0:
        return cfg.cap
    return 0.5 if iterative else 0.95
