"""Assisted excitation: ground-truth guided boosts added to mid-network activations.

During training the layer computes ``out = a + alpha(t) * e`` where ``e`` is derived
from the activation ``a`` and a binary map of ground-truth box locations. ``alpha``
follows a cosine ramp from 1 to 0; once it reaches 0 the layer is an exact identity
and never reads labels, so the inference network is unchanged.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, LabelError, UsageError
from .tensor import Tensor, broadcast_channels, channel_mean, elementwise_add, elementwise_mul, scalar_mul


@dataclass(frozen=True)
class BoxLabel:
    """Ground-truth box in normalized image coordinates (center, size)."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def validate(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise LabelError(f"non-finite box {self}")
        if self.w <= 0 or self.h <= 0:
            raise LabelError(f"degenerate box (w={self.w}, h={self.h})")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise LabelError(f"box center ({self.cx}, {self.cy}) outside the image")
        if self.w > 1.0 or self.h > 1.0:
            raise LabelError(f"box extent ({self.w}, {self.h}) exceeds the image")
        x0, y0, x1, y1 = self.corners()
        if min(x1, 1.0) <= max(x0, 0.0) or min(y1, 1.0) <= max(y0, 0.0):
            raise LabelError(f"box {self} does not overlap the image")

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabel":
        return cls(int(d["class_id"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


@dataclass
class BoxMap:
    """Binary (rows, cols) grid marking cells that overlap any box."""

    grid: np.ndarray
    stride: Optional[float] = None


def rasterize_box_map(boxes: Sequence[BoxLabel], grid_rows: int, grid_cols: int, image_size: Optional[int] = None) -> BoxMap:
    """Mark every cell whose area overlaps some box by a strictly positive amount.

    A box that only touches a cell edge does not mark that cell.
    """
    if grid_rows < 1 or grid_cols < 1:
        raise ConfigError(f"grid must be at least 1x1, got {grid_rows}x{grid_cols}")
    grid = np.zeros((grid_rows, grid_cols), dtype=np.uint8)
    col_lo = np.arange(grid_cols) / grid_cols
    col_hi = np.arange(1, grid_cols + 1) / grid_cols
    row_lo = np.arange(grid_rows) / grid_rows
    row_hi = np.arange(1, grid_rows + 1) / grid_rows
    for box in boxes:
        box.validate()
        x0, y0, x1, y1 = box.corners()
        in_x = (col_lo < x1) & (col_hi > x0)
        in_y = (row_lo < y1) & (row_hi > y0)
        grid |= np.outer(in_y, in_x).astype(np.uint8)
    stride = None if image_size is None else image_size / grid_cols
    return BoxMap(grid, stride)


def alpha_schedule(t: float, max_iteration: float) -> float:
    """Cosine curriculum factor: 1 at ``t=0``, 0 at and after ``max_iteration``.

    A horizon of 0 means excitation is switched off from the start.
    """
    if t < 0:
        raise ConfigError(f"progress t must be non-negative, got {t}")
    if max_iteration < 0:
        raise ConfigError(f"max_iteration must be non-negative, got {max_iteration}")
    if t >= max_iteration:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * t / max_iteration))


class Strategy(str, enum.Enum):
    PER_CHANNEL_EXCITE = "per_channel_excite"
    OUT_OF_BOX_SUPPRESS = "out_of_box_suppress"
    CHANNEL_AVERAGE_EXCITE = "channel_average_excite"

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, Strategy):
            return name
        key = str(name).strip().lower()
        if key in _STRATEGY_ALIASES:
            return _STRATEGY_ALIASES[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown excitation strategy {name!r}") from None

    @property
    def short(self) -> str:
        return {"per_channel_excite": "eq2", "out_of_box_suppress": "eq3", "channel_average_excite": "eq4"}[self.value]


_STRATEGY_ALIASES = {
    "eq2": Strategy.PER_CHANNEL_EXCITE,
    "eq3": Strategy.OUT_OF_BOX_SUPPRESS,
    "eq4": Strategy.CHANNEL_AVERAGE_EXCITE,
}


@dataclass
class ExcitationSchedule:
    """Annealing horizon for alpha; ``max_iteration=None`` means 0.8 x training epochs."""

    max_iteration: Optional[float] = None
    unit: str = "epoch"

    def __post_init__(self):
        if self.unit not in ("epoch", "iteration"):
            raise ConfigError(f"schedule unit must be 'epoch' or 'iteration', got {self.unit!r}")
        if self.max_iteration is not None and self.max_iteration < 0:
            raise ConfigError("max_iteration must be non-negative")

    def resolved(self, epochs: int, iters_per_epoch: int = 1) -> float:
        if self.max_iteration is not None:
            return float(self.max_iteration)
        horizon = round(0.8 * epochs)
        return float(horizon * iters_per_epoch if self.unit == "iteration" else horizon)

    def alpha(self, t: float, epochs: int = 0, iters_per_epoch: int = 1) -> float:
        return alpha_schedule(t, self.resolved(epochs, iters_per_epoch))


@dataclass
class ExcitationConfig:
    strategy: Strategy = Strategy.CHANNEL_AVERAGE_EXCITE
    stage: int = 3
    schedule: ExcitationSchedule = field(default_factory=ExcitationSchedule)
    detach: bool = False

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        self.stage = parse_stage(self.stage)
        if isinstance(self.schedule, dict):
            self.schedule = ExcitationSchedule(**self.schedule)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.short,
            "stage": self.stage,
            "schedule": {"max_iteration": self.schedule.max_iteration, "unit": self.schedule.unit},
            "detach": self.detach,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExcitationConfig":
        unknown = set(d) - {"strategy", "stage", "schedule", "detach"}
        if unknown:
            raise ConfigError(f"unknown ae config keys: {sorted(unknown)}")
        sched = d.get("schedule") or {}
        unknown = set(sched) - {"max_iteration", "unit"}
        if unknown:
            raise ConfigError(f"unknown ae.schedule keys: {sorted(unknown)}")
        return cls(
            strategy=d.get("strategy", "eq4"),
            stage=d.get("stage", 3),
            schedule=ExcitationSchedule(**sched),
            detach=bool(d.get("detach", False)),
        )


def parse_stage(stage) -> int:
    """Accept ``3``, ``"3"`` or ``"stage3"``."""
    text = str(stage).strip().lower()
    if text.startswith("stage"):
        text = text[5:]
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"cannot parse stage {stage!r}") from None
    if value < 1:
        raise ConfigError(f"stage numbers start at 1, got {value}")
    return value


def _mask_tensor(g, a: Tensor) -> np.ndarray:
    g = np.asarray(g.grid if isinstance(g, BoxMap) else g)
    if g.ndim == 2:
        g = g[None]
    if g.ndim != 3 or g.shape[1:] != a.shape[2:]:
        raise ConfigError(f"box map of shape {g.shape} does not match activation {a.shape}")
    if g.shape[0] not in (1, a.shape[0]):
        raise ConfigError(f"box map batch {g.shape[0]} does not match activation batch {a.shape[0]}")
    return g[:, None].astype(a.dtype)


def compute_excitation(a: Tensor, g, strategy) -> Tensor:
    """Excitation field ``e`` with the same shape as ``a``.

    ``g`` is a :class:`BoxMap`, a (rows, cols) array, or a per-image (B, rows, cols) stack.
    """
    strategy = Strategy.parse(strategy)
    if a.ndim != 4 or a.shape[1] < 1:
        raise ConfigError(f"activation must be (B, C>=1, H, W), got {a.shape}")
    mask = _mask_tensor(g, a)
    d = a.shape[1]
    if strategy is Strategy.PER_CHANNEL_EXCITE:
        return elementwise_mul(a, Tensor(mask / a.dtype.type(d)))
    if strategy is Strategy.OUT_OF_BOX_SUPPRESS:
        return elementwise_mul(a, Tensor(-(1 - mask)))
    avg = elementwise_mul(channel_mean(a), Tensor(mask))
    return broadcast_channels(avg, d)


def batch_box_maps(boxes: Sequence[Sequence[BoxLabel]], rows: int, cols: int) -> np.ndarray:
    """Stack per-image box maps into (B, rows, cols)."""
    return np.stack([rasterize_box_map(b, rows, cols).grid for b in boxes]) if boxes else np.zeros((0, rows, cols), np.uint8)


def excite(a: Tensor, boxes: Optional[Sequence[Sequence[BoxLabel]]], config: ExcitationConfig, alpha: float) -> Tensor:
    """Apply ``a + alpha * e`` for a batch, with one box list per image.

    With ``alpha == 0`` the input tensor itself is returned and ``boxes`` is not touched.
    """
    if alpha == 0.0:
        return a
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if boxes is None:
        raise UsageError("assisted excitation with alpha > 0 needs ground-truth boxes")
    if len(boxes) != a.shape[0]:
        raise UsageError(f"got {len(boxes)} label lists for a batch of {a.shape[0]}")
    g = batch_box_maps(boxes, a.shape[2], a.shape[3])
    e = compute_excitation(a, g, config.strategy)
    if config.detach:
        e = e.detach()
    return elementwise_add(a, scalar_mul(e, alpha))


def ae_forward(a: Tensor, boxes: Optional[Sequence[Sequence[BoxLabel]]], config: ExcitationConfig, t: float) -> Tensor:
    """AE layer at progress ``t``; the schedule horizon must already be resolved."""
    if config.schedule.max_iteration is None:
        raise ConfigError("schedule horizon unresolved; set schedule.max_iteration")
    return excite(a, boxes, config, alpha_schedule(t, config.schedule.max_iteration))
