"""Run configuration files and SVG figure export."""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .model import EghnConfig, preset


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class RunConfig:
    """Everything a ``train`` invocation needs besides the command itself.

    Model fields live in ``model``; ``preset`` picks the default row of the
    hyper-parameter catalogue that file and flag values override.
    """

    preset: str = "(3,3,1)"
    dataset: str | None = None
    out: str = "runs"
    model_kind: str = "eghn"
    variant: str = "full"
    seeds: list = field(default_factory=lambda: [0])
    model: EghnConfig = field(default_factory=lambda: preset("(3,3,1)"))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d.update(self.model.to_dict())
        return d


RUN_KEYS = ("preset", "dataset", "out", "model_kind", "variant", "seeds")
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(EghnConfig))


def build_run_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge with precedence flags > file > preset defaults.

    Both mappings are flat: run keys and :class:`EghnConfig` fields side by
    side.  ``lam`` and ``clusters`` are the connectivity weight and the
    per-level K list.  ``None`` flag values mean "not given".
    """
    merged: dict = {}
    for src in (file_values or {}, {k: v for k, v in (flag_values or {}).items() if v is not None}):
        unknown = set(src) - set(RUN_KEYS) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(src)
    name = merged.get("preset", "(3,3,1)")
    try:
        base = preset(name)
    except KeyError as err:
        raise ConfigError(str(err)) from None
    model_vals = {k: merged[k] for k in MODEL_KEYS if k in merged}
    if "threshold" in model_vals and model_vals["threshold"] is None:
        model_vals["threshold"] = math.inf
    if "clusters" in model_vals and "levels" not in model_vals:
        model_vals["levels"] = len(model_vals["clusters"])
    try:
        cfg = base.replace(**model_vals)
        if isinstance(cfg.roles, list):
            cfg = cfg.replace(roles=tuple(cfg.roles))
        cfg.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid model config: {err}") from None
    run = RunConfig(model=cfg, **{k: merged[k] for k in RUN_KEYS if k in merged})
    if not isinstance(run.seeds, list) or not all(isinstance(s, int) for s in run.seeds) or not run.seeds:
        raise ConfigError(f"seeds must be a non-empty list of integers, got {run.seeds!r}")
    return run


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


# ----------------------------------------------------------------------
# SVG
# ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _frame(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _scale(vals: np.ndarray, lo_px: float, hi_px: float):
    lo, hi = float(np.min(vals)), float(np.max(vals))
    span = hi - lo if hi > lo else 1.0
    return lambda v: lo_px + (v - lo) / span * (hi_px - lo_px)


def scatter_svg(positions, clusters, sticks=(), title: str = "pooling", size: int = 400) -> str:
    """2D projection (first two coordinates) of one system, nodes colored by cluster."""
    P = np.asarray(positions, dtype=np.float64)[:, :2]
    c = np.asarray(clusters, dtype=np.int64)
    pad = 30
    sx = _scale(P[:, 0], pad, size - pad)
    sy = _scale(P[:, 1], size - pad, pad)
    out = _frame(size, size, title)
    for i, j in sticks:
        out.append(
            f'<line x1="{_fmt(sx(P[i, 0]))}" y1="{_fmt(sy(P[i, 1]))}" x2="{_fmt(sx(P[j, 0]))}" '
            f'y2="{_fmt(sy(P[j, 1]))}" stroke="#444" stroke-width="1.5"/>'
        )
    for k, (x, y) in enumerate(P):
        color = PALETTE[c[k] % len(PALETTE)]
        out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="6" fill="{color}"><title>node {k} '
                   f'cluster {c[k]}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def loss_curve_svg(series: dict, title: str = "loss", width: int = 560, height: int = 360, log_y: bool = True) -> str:
    """Polyline per named series against epoch index."""
    pad_l, pad_r, pad_t, pad_b = 60, 130, 30, 40
    clean = {k: np.asarray(v, dtype=np.float64) for k, v in series.items() if len(v)}
    out = _frame(width, height, title)
    if not clean:
        out.append("</svg>")
        return "\n".join(out) + "\n"
    tf = (lambda a: np.log10(np.maximum(a, 1e-300))) if log_y else (lambda a: a)
    ys = np.concatenate([tf(v) for v in clean.values()])
    n_max = max(len(v) for v in clean.values())
    sx = _scale(np.array([0, max(n_max - 1, 1)]), pad_l, width - pad_r)
    sy = _scale(ys, height - pad_b, pad_t)
    out.append(f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>')
    out.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>')
    out.append(f'<text x="{(pad_l + width - pad_r) / 2:.0f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="12">epoch</text>')
    label = "log10 value" if log_y else "value"
    out.append(f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" '
               f'text-anchor="middle">{label}</text>')
    for k, (name, v) in enumerate(clean.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(sx(i))},{_fmt(sy(y))}" for i, y in enumerate(tf(v)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad_r + 8}" y="{pad_t + 16 * (k + 1)}" font-size="12" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


_TAG = re.compile(r"<(/?)([A-Za-z][\w:.-]*)([^<>]*?)(/?)>")


def lint_svg(text: str) -> list[str]:
    """Structural check: one ``svg`` root with a ``viewBox`` and balanced tags.

    Returns a list of problems; empty means well formed.
    """
    problems = []
    stack: list[str] = []
    roots = 0
    for m in _TAG.finditer(text):
        closing, name, attrs, selfclose = m.groups()
        if closing:
            if not stack or stack[-1] != name:
                problems.append(f"unexpected </{name}>")
                return problems
            stack.pop()
        elif selfclose:
            if not stack:
                problems.append(f"<{name}/> outside the root")
        else:
            if not stack:
                roots += 1
                if name != "svg":
                    problems.append(f"root element is <{name}>, expected <svg>")
                elif not re.search(r'\bviewBox="[-\d.eE]+ [-\d.eE]+ [\d.eE]+ [\d.eE]+"', attrs):
                    problems.append("root <svg> declares no viewBox")
            stack.append(name)
    if stack:
        problems.append(f"unclosed tags: {stack}")
    if roots != 1:
        problems.append(f"expected exactly one root element, found {roots}")
    return problems
