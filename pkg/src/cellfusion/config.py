"""Pipeline configuration and its flat ``section.key = value`` file format.

Example::

    # comments start with '#'
    stage1.distance = 12.0
    peaks.scales = 0.8, 1.0, 1.2
    post.skip_gate = false

Every key is typed by its default. Every key also exists as a command-line
flag: ``stage1.distance`` is ``--stage1-distance``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

from .fusion import FusionConfig
from .heatmap import PeakConfig
from .metrics import AP_VARIANTS
from .postprocess import PostprocessConfig

SWEEP_ORDERS = ("after", "before")


def _default_sweep() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 2) for i in range(20))


@dataclass(frozen=True)
class EvalOptions:
    iou_threshold: float = 0.5
    ap_variant: str = "allpoint"
    sweep_thresholds: tuple[float, ...] = field(default_factory=_default_sweep)
    # whether the sweep filters final detections or fused detections before post-processing
    sweep_order: str = "after"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("eval iou_threshold must lie in (0, 1]")
        if self.ap_variant not in AP_VARIANTS:
            raise ValueError(f"ap_variant must be one of {AP_VARIANTS}")
        if self.sweep_order not in SWEEP_ORDERS:
            raise ValueError(f"sweep_order must be one of {SWEEP_ORDERS}")
        t = self.sweep_thresholds
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("sweep thresholds must be strictly increasing")


@dataclass(frozen=True)
class IOPaths:
    detector_a: str = ""
    detector_b: str = ""
    heatmaps: str = ""
    manifest: str = ""
    labels: str = ""
    scores: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    stage1: FusionConfig = FusionConfig(12.0, 0.35)
    stage2: FusionConfig = FusionConfig(12.0, 0.0)
    standardize: bool = True
    peaks: PeakConfig = PeakConfig()
    post: PostprocessConfig = PostprocessConfig()
    eval: EvalOptions = EvalOptions()
    io: IOPaths = IOPaths()


# key -> (section attribute, field name inside the section or None for top-level)
_KEYS: dict[str, tuple[str, str | None]] = {
    "stage1.distance": ("stage1", "distance_threshold"),
    "stage1.confidence": ("stage1", "singleton_confidence_threshold"),
    "stage2.distance": ("stage2", "distance_threshold"),
    "stage2.confidence": ("stage2", "singleton_confidence_threshold"),
    "fusion.standardize": ("standardize", None),
    "fusion.box_size": ("stage1", "box_size"),
    "peaks.kernel": ("peaks", "kernel"),
    "peaks.threshold": ("peaks", "confidence_threshold"),
    "peaks.scales": ("peaks", "scales"),
    "post.nms_iou": ("post", "nms_iou"),
    "post.grid": ("post", "grid_divisions"),
    "post.density_cutoff": ("post", "density_cutoff"),
    "post.high_threshold": ("post", "high_density_threshold"),
    "post.low_threshold": ("post", "low_density_threshold"),
    "post.gate_cutoff": ("post", "gate_confidence_cutoff"),
    "post.gate_threshold": ("post", "gate_binary_threshold"),
    "post.hard_negative_iou": ("post", "hard_negative_iou"),
    "post.skip_gate": ("post", "skip_gate"),
    "eval.iou_threshold": ("eval", "iou_threshold"),
    "eval.ap_variant": ("eval", "ap_variant"),
    "eval.sweep": ("eval", "sweep_thresholds"),
    "eval.sweep_order": ("eval", "sweep_order"),
    "io.detector_a": ("io", "detector_a"),
    "io.detector_b": ("io", "detector_b"),
    "io.heatmaps": ("io", "heatmaps"),
    "io.manifest": ("io", "manifest"),
    "io.labels": ("io", "labels"),
    "io.scores": ("io", "scores"),
}

KEYS = tuple(_KEYS)


def flag_for(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split()]
    return tuple(float(p) for p in parts)


def _parser_for(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return _parse_int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_floats
    return lambda s: s.strip()


def get(config: PipelineConfig, key: str) -> Any:
    section, name = _KEYS[key]
    obj = getattr(config, section)
    return obj if name is None else getattr(obj, name)


def parse_value(key: str, text: str) -> Any:
    if key not in _KEYS:
        raise KeyError(f"unknown config key {key!r}")
    return _parser_for(get(PipelineConfig(), key))(text)


def with_values(config: PipelineConfig, values: dict[str, Any]) -> PipelineConfig:
    """Copy of ``config`` with typed ``values`` applied; section invariants are re-checked."""
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, value in values.items():
        if key not in _KEYS:
            raise KeyError(f"unknown config key {key!r}")
        section, name = _KEYS[key]
        if name is None:
            top[section] = value
        elif key == "fusion.box_size":
            sections.setdefault("stage1", {})["box_size"] = value
            sections.setdefault("stage2", {})["box_size"] = value
            sections.setdefault("peaks", {})["box_size"] = value
        else:
            sections.setdefault(section, {})[name] = value
    updates = dict(top)
    for section, changes in sections.items():
        current = getattr(config, section)
        merged = {f.name: getattr(current, f.name) for f in fields(current)}
        merged.update(changes)
        updates[section] = type(current)(**merged)
    merged_top = {f.name: getattr(config, f.name) for f in fields(config)}
    merged_top.update(updates)
    return PipelineConfig(**merged_top)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        try:
            values[key] = parse_value(key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides``.

    Relative ``io.*`` paths in a file resolve against the file's directory.
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        for key in KEYS:
            if key.startswith("io.") and values.get(key):
                p = Path(values[key])
                if not p.is_absolute():
                    values[key] = str(path.parent / p)
    values.update(overrides or {})
    return with_values(PipelineConfig(), values)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(f"{v:g}" for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    return "".join(f"{key} = {_render(get(config, key))}\n" for key in KEYS)
