"""Small YOLOv2-style grid detector with an optional assisted-excitation layer.

Backbone stages are ``[3x3 conv s1, leaky, 3x3 conv s2, leaky]``; each stage halves
the resolution. A 1x1 conv head predicts, per cell and anchor,
``(tx, ty, tw, th, to, class logits...)``. Channel layout of the head output is
anchor-major: channel ``a * (5 + num_classes) + k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .excitation import BoxLabel, ExcitationConfig, excite
from .tensor import Tensor, _make, _sigmoid, conv2d, leaky_relu

LEAKY_SLOPE = 0.1
DEFAULT_ANCHORS = ((1.0, 1.0), (2.5, 2.5))


class AssignmentWarning(UserWarning):
    """Two boxes competed for the same (cell, anchor) slot; the smaller was dropped."""


@dataclass
class DetectorConfig:
    input_size: int = 64
    stage_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    anchors: list = field(default_factory=lambda: [list(a) for a in DEFAULT_ANCHORS])
    num_classes: int = 3
    init_seed: int = 0

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.anchors = [(float(a[0]), float(a[1])) for a in self.anchors]
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be non-empty positive counts, got {self.stage_widths}")
        if not self.anchors or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ConfigError(f"anchors must be non-empty positive priors, got {self.anchors}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size % self.head_stride:
            raise ConfigError(f"input_size {self.input_size} is not divisible by head stride {self.head_stride}")

    @property
    def stage_count(self) -> int:
        return len(self.stage_widths)

    @property
    def head_stride(self) -> int:
        return 2**self.stage_count

    @property
    def grid_size(self) -> int:
        return self.input_size // self.head_stride

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def head_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    def stage_shape(self, stage: int) -> tuple[int, int]:
        """(channels, spatial size) of the activation leaving ``stage`` (1-based)."""
        return self.stage_widths[stage - 1], self.input_size // 2**stage

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stage_widths": list(self.stage_widths),
            "anchors": [list(a) for a in self.anchors],
            "num_classes": self.num_classes,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        unknown = set(d) - {"input_size", "stage_widths", "anchors", "num_classes", "init_seed"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Detection:
    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "score": self.score, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}


class Detector:
    """Parameters plus forward pass. ``ae`` is ``None`` for a plain detector."""

    def __init__(self, config: DetectorConfig, ae: Optional[ExcitationConfig] = None, params: Optional[dict] = None):
        if ae is not None and not 1 <= ae.stage <= config.stage_count:
            raise ConfigError(f"AE stage {ae.stage} does not exist; model has stages 1..{config.stage_count}")
        self.config = config
        self.ae = ae
        self.params: dict[str, Tensor] = params if params is not None else _init_params(config)

    def forward(self, images, boxes: Optional[Sequence[Sequence[BoxLabel]]] = None, alpha: float = 0.0) -> Tensor:
        """Raw head tensor (B, anchors*(5+classes), G, G).

        ``alpha`` is the current excitation factor; labels are only read when the
        model has an AE layer and ``alpha > 0``.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise ConfigError(f"expected images (B, 3, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
        p = self.params
        for s in range(1, cfg.stage_count + 1):
            x = leaky_relu(conv2d(x, p[f"stage{s}.conv1.weight"], p[f"stage{s}.conv1.bias"], 1, 1), LEAKY_SLOPE)
            x = leaky_relu(conv2d(x, p[f"stage{s}.conv2.weight"], p[f"stage{s}.conv2.bias"], 2, 1), LEAKY_SLOPE)
            if self.ae is not None and s == self.ae.stage:
                x = excite(x, boxes, self.ae, alpha)
        return conv2d(x, p["head.weight"], p["head.bias"], 1, 0)

    __call__ = forward

    def stage_activation(self, images, stage: int) -> Tensor:
        """Backbone output after ``stage`` with no excitation applied."""
        cfg = self.config
        if not 1 <= stage <= cfg.stage_count:
            raise ConfigError(f"stage {stage} not in 1..{cfg.stage_count}")
        x = images if isinstance(images, Tensor) else Tensor(images)
        p = self.params
        for s in range(1, stage + 1):
            x = leaky_relu(conv2d(x, p[f"stage{s}.conv1.weight"], p[f"stage{s}.conv1.bias"], 1, 1), LEAKY_SLOPE)
            x = leaky_relu(conv2d(x, p[f"stage{s}.conv2.weight"], p[f"stage{s}.conv2.bias"], 2, 1), LEAKY_SLOPE)
        return x

    def without_ae(self) -> "Detector":
        """Same weights (shared, not copied), AE node removed."""
        return Detector(self.config, None, self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ConfigError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> "Detector":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Detector(self.config, self.ae, params)


def _init_params(config: DetectorConfig, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.init_seed)
    params: dict[str, Tensor] = {}

    def conv(name, out_ch, in_ch, k):
        fan_in = in_ch * k * k
        std = math.sqrt(2.0 / ((1 + LEAKY_SLOPE**2) * fan_in))
        params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)).astype(dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(out_ch, dtype), requires_grad=True)

    in_ch = 3
    for s, width in enumerate(config.stage_widths, start=1):
        conv(f"stage{s}.conv1", width, in_ch, 3)
        conv(f"stage{s}.conv2", width, width, 3)
        in_ch = width
    conv("head", config.head_channels, in_ch, 1)
    params["head.weight"].data *= 0.1
    # start with low objectness so the no-object term does not dominate early steps
    bias = params["head.bias"].data.reshape(config.num_anchors, 5 + config.num_classes)
    bias[:, 4] = -4.0
    return params


def build_model(config: DetectorConfig, ae: Optional[ExcitationConfig] = None) -> Detector:
    return Detector(config, ae)


# ---------------------------------------------------------------------------
# targets


@dataclass
class GridTarget:
    """Encoded targets; arrays are (A, G, G[, 2]) or batched with a leading B."""

    resp: np.ndarray
    txy: np.ndarray
    twh: np.ndarray
    cls: np.ndarray

    @staticmethod
    def stack(targets: Sequence["GridTarget"]) -> "GridTarget":
        return GridTarget(
            np.stack([t.resp for t in targets]),
            np.stack([t.txy for t in targets]),
            np.stack([t.twh for t in targets]),
            np.stack([t.cls for t in targets]),
        )


def clip_box(box: BoxLabel) -> Optional[BoxLabel]:
    x0, y0, x1, y1 = box.corners()
    x0, y0, x1, y1 = max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0)
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == box.corners():
        return box
    return BoxLabel(box.class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def best_anchor(w_cells: float, h_cells: float, anchors: Sequence[tuple[float, float]]) -> int:
    """Anchor with the highest centered (shape-only) IoU; lowest index wins ties."""
    best, best_iou = 0, -1.0
    for k, (aw, ah) in enumerate(anchors):
        inter = min(w_cells, aw) * min(h_cells, ah)
        iou = inter / (w_cells * h_cells + aw * ah - inter)
        if iou > best_iou:
            best, best_iou = k, iou
    return best


def _priority(box: BoxLabel) -> tuple:
    # larger area wins; the rest makes the choice independent of label order
    return (box.area, box.class_id, box.cx, box.cy, box.w, box.h)


def encode_targets(boxes: Sequence[BoxLabel], config: DetectorConfig) -> GridTarget:
    g, a = config.grid_size, config.num_anchors
    resp = np.zeros((a, g, g), dtype=bool)
    txy = np.zeros((a, g, g, 2))
    twh = np.zeros((a, g, g, 2))
    cls = np.zeros((a, g, g), dtype=np.int64)
    owner: dict[tuple[int, int, int], BoxLabel] = {}
    for raw in boxes:
        box = clip_box(raw)
        if box is None:
            continue
        row = min(int(box.cy * g), g - 1)
        col = min(int(box.cx * g), g - 1)
        k = best_anchor(box.w * g, box.h * g, config.anchors)
        slot = (k, row, col)
        if slot in owner:
            kept = max(owner[slot], box, key=_priority)
            dropped = box if kept is owner[slot] else owner[slot]
            warnings.warn(f"boxes compete for anchor {k} at cell ({row}, {col}); dropping {dropped}", AssignmentWarning, stacklevel=2)
            if kept is owner[slot]:
                continue
        owner[slot] = box
        resp[slot] = True
        txy[slot] = (box.cx * g - col, box.cy * g - row)
        aw, ah = config.anchors[k]
        twh[slot] = (math.log(box.w * g / aw), math.log(box.h * g / ah))
        cls[slot] = box.class_id
    return GridTarget(resp, txy, twh, cls)


def encode_batch(batch_boxes: Sequence[Sequence[BoxLabel]], config: DetectorConfig) -> GridTarget:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssignmentWarning)
        return GridTarget.stack([encode_targets(b, config) for b in batch_boxes])


# ---------------------------------------------------------------------------
# decoding


def _split_head(raw: np.ndarray, config: DetectorConfig) -> np.ndarray:
    b, ch, gh, gw = raw.shape
    if ch != config.head_channels or gh != config.grid_size or gw != config.grid_size:
        raise ConfigError(f"head tensor {raw.shape} does not match config ({config.head_channels}, {config.grid_size})")
    return raw.reshape(b, config.num_anchors, 5 + config.num_classes, gh, gw)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def decode_predictions(raw, config: DetectorConfig, conf_threshold: float = 0.05) -> list[list[Detection]]:
    """One detection list per image, ordered by (anchor, row, col)."""
    arr = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    p = _split_head(arr, config)
    g = config.grid_size
    anchors = np.asarray(config.anchors)
    cols = np.arange(g)[None, None, :]
    rows = np.arange(g)[None, :, None]
    out: list[list[Detection]] = []
    for img in p:
        cx = (cols + _sigmoid(img[:, 0])) / g
        cy = (rows + _sigmoid(img[:, 1])) / g
        w = anchors[:, 0, None, None] * np.exp(img[:, 2]) / g
        h = anchors[:, 1, None, None] * np.exp(img[:, 3]) / g
        probs = _softmax(img[:, 5:], axis=1)
        cls = probs.argmax(axis=1)
        score = _sigmoid(img[:, 4]) * probs.max(axis=1)
        keep = (score >= conf_threshold) & (score > 0) & (w > 0) & (h > 0) & np.isfinite(w) & np.isfinite(h)
        dets = [
            Detection(int(cls[k, i, j]), float(score[k, i, j]), float(cx[k, i, j]), float(cy[k, i, j]), float(w[k, i, j]), float(h[k, i, j]))
            for k, i, j in zip(*np.nonzero(keep))
        ]
        out.append(dets)
    return out


# ---------------------------------------------------------------------------
# loss

LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5


def detection_loss(
    raw: Tensor,
    target: GridTarget,
    config: DetectorConfig,
    lambda_coord: float = LAMBDA_COORD,
    lambda_noobj: float = LAMBDA_NOOBJ,
) -> tuple[Tensor, dict[str, float]]:
    """Sum-squared YOLO loss with softmax cross-entropy for classes.

    Per image::

        lc * sum_resp[(s(tx)-tx*)^2 + (s(ty)-ty*)^2 + (tw-tw*)^2 + (th-th*)^2]
        + sum_resp (s(to)-1)^2 + ln * sum_nonresp s(to)^2 + sum_resp CE(class)

    averaged over the batch. Returns the scalar loss tensor and its parts
    (``box``, ``obj``, ``cls``) as floats.
    """
    data = raw.data
    p = _split_head(data, config)
    b = p.shape[0]
    resp = target.resp if target.resp.ndim == 4 else target.resp[None]
    txy = target.txy if target.txy.ndim == 5 else target.txy[None]
    twh = target.twh if target.twh.ndim == 5 else target.twh[None]
    cls = target.cls if target.cls.ndim == 4 else target.cls[None]
    if resp.shape[0] != b:
        raise ConfigError(f"target batch {resp.shape[0]} != prediction batch {b}")

    dt = data.dtype
    r = resp.astype(dt)
    nr = 1 - r
    sxy = _sigmoid(p[:, :, 0:2])
    dxy = sxy - np.moveaxis(txy, -1, 2).astype(dt)
    dwh = p[:, :, 2:4] - np.moveaxis(twh, -1, 2).astype(dt)
    so = _sigmoid(p[:, :, 4])
    logits = p[:, :, 5:]
    zmax = logits.max(axis=2, keepdims=True)
    lse = zmax[:, :, 0] + np.log(np.exp(logits - zmax).sum(axis=2))
    picked = np.take_along_axis(logits, cls[:, :, None], axis=2)[:, :, 0]

    rb = r[:, :, None]
    box = lambda_coord * float(np.sum(rb * (dxy**2 + dwh**2)))
    obj = float(np.sum(r * (so - 1) ** 2) + lambda_noobj * np.sum(nr * so**2))
    cl = float(np.sum(r * (lse - picked)))
    total = (box + obj + cl) / b
    if not math.isfinite(total):
        raise NumericError("detection loss is not finite")

    def bw(g):
        scale = dt.type(float(g) / b)
        grad = np.zeros_like(p)
        grad[:, :, 0:2] = (2 * lambda_coord) * rb * dxy * sxy * (1 - sxy)
        grad[:, :, 2:4] = (2 * lambda_coord) * rb * dwh
        grad[:, :, 4] = 2 * (r * (so - 1) + lambda_noobj * nr * so) * so * (1 - so)
        probs = np.exp(logits - lse[:, :, None])
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, cls[:, :, None], 1.0, axis=2)
        grad[:, :, 5:] = rb * (probs - onehot)
        return ((grad * scale).reshape(data.shape),)

    loss = _make(np.asarray(total, dtype=dt), (raw,), bw, "detection_loss")
    return loss, {"box": box / b, "obj": obj / b, "cls": cl / b}
