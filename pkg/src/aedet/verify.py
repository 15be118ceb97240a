"""Finite-difference and Jacobian checks over every differentiable op.

Used by the ``grad-check`` command. Each check draws random float64 instances
away from non-differentiable points (leaky-ReLU kinks, max-pool ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .excitation import BoxLabel, ExcitationConfig, Strategy, excite, rasterize_box_map
from .gradcheck import finite_diff_check
from .model import DetectorConfig, detection_loss, encode_batch
from .tensor import Tensor, backward, channel_mean, conv2d, elementwise_mul, leaky_relu, max_pool2d, tensor_sum

FD_TOLERANCE = 1e-4
JACOBIAN_TOLERANCE = 1e-8


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.worst < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name:<28} n={self.instances:<3} worst={self.worst:.3e} tol={self.tolerance:.0e}"


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return tensor_sum(elementwise_mul(out, Tensor(w)))


def _random_boxes(rng: np.random.Generator, n: int, classes: int = 3) -> list[BoxLabel]:
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.1, 0.7, size=2)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        out.append(BoxLabel(int(rng.integers(classes)), float(cx), float(cy), float(w), float(h)))
    return out


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap * 2, x)


def _untied_pool_input(rng, shape, k, gap=1e-3):
    """Values whose pooling windows have a clear winner."""
    while True:
        x = rng.normal(size=shape)
        n, c, h, w = shape
        ok = True
        for i in range(0, h - k + 1, k):
            for j in range(0, w - k + 1, k):
                win = np.sort(x[:, :, i : i + k, j : j + k].reshape(n, c, -1), axis=-1)
                if (win[..., -1] - win[..., -2]).min() < gap:
                    ok = False
        if ok:
            return x


def _cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, np.ndarray]]]:
    def conv():
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        stride = int(rng.integers(1, 3))
        x = rng.normal(size=(2, 2, 5, 5))
        wt = rng.normal(size=conv2d(Tensor(x), Tensor(w), Tensor(b), stride, 1).shape)
        return (lambda t: _weighted_sum(conv2d(t, Tensor(w), Tensor(b), stride, 1), wt)), x

    def conv_weight():
        x = rng.normal(size=(2, 2, 5, 5))
        b = rng.normal(size=3)
        w = rng.normal(size=(3, 2, 3, 3))
        wt = rng.normal(size=(2, 3, 3, 3))
        return (lambda t: _weighted_sum(conv2d(Tensor(x), t, Tensor(b), 2, 1), wt)), w

    def leaky():
        x = _away_from_zero(rng, (2, 3, 4, 4))
        wt = rng.normal(size=x.shape)
        return (lambda t: _weighted_sum(leaky_relu(t, 0.1), wt)), x

    def pool():
        x = _untied_pool_input(rng, (2, 2, 4, 4), 2)
        wt = rng.normal(size=(2, 2, 2, 2))
        return (lambda t: _weighted_sum(max_pool2d(t, 2, 2), wt)), x

    def cmean():
        x = rng.normal(size=(2, 4, 3, 3))
        wt = rng.normal(size=(2, 1, 3, 3))
        return (lambda t: _weighted_sum(channel_mean(t), wt)), x

    def loss():
        cfg = DetectorConfig(input_size=16, stage_widths=[2, 2], num_classes=3)
        boxes = [_random_boxes(rng, int(rng.integers(0, 3))) for _ in range(2)]
        target = encode_batch(boxes, cfg)
        raw = rng.normal(size=(2, cfg.head_channels, cfg.grid_size, cfg.grid_size))
        return (lambda t: detection_loss(t, target, cfg)[0]), raw

    def ae(strategy):
        def make():
            a = rng.normal(size=(2, 3, 4, 4))
            boxes = [_random_boxes(rng, 2) for _ in range(2)]
            # alpha near 1 makes the suppressed gradient vanish; stay clear of it
            alpha = float(rng.uniform(0.1, 0.9))
            cfg = ExcitationConfig(strategy)
            wt = rng.normal(size=a.shape)
            # squared output keeps the map from being linear in a
            return (lambda t: _weighted_sum(elementwise_mul(*(2 * [excite(t, boxes, cfg, alpha)])), wt)), a

        return make

    cases = {
        "conv2d (input)": conv,
        "conv2d (weight)": conv_weight,
        "leaky_relu": leaky,
        "max_pool2d": pool,
        "channel_mean": cmean,
        "detection_loss": loss,
    }
    for s in Strategy:
        cases[f"ae_forward ({s.short})"] = ae(s)
    return cases


def gradient_suite(instances: int = 10, seed: int = 0, eps: float = 1e-6) -> list[CheckResult]:
    """Worst finite-difference relative error per op over ``instances`` draws."""
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _cases(rng).items():
        worst = 0.0
        for _ in range(instances):
            f, x = make()
            worst = max(worst, finite_diff_check(f, x, eps))
        results.append(CheckResult(name, instances, worst, FD_TOLERANCE))
    return results


def excitation_jacobian(a: np.ndarray, boxes, alpha: float, config: ExcitationConfig) -> np.ndarray:
    """Dense Jacobian of ``excite`` w.r.t. its input, one backward pass per output."""
    out = excite(Tensor(a), boxes, config, alpha)
    rows = np.empty((out.data.size, a.size))
    for k in range(out.data.size):
        x = Tensor(a.copy(), requires_grad=True)
        onehot = np.zeros(out.shape)
        onehot.reshape(-1)[k] = 1.0
        backward(_weighted_sum(excite(x, boxes, config, alpha), onehot))
        rows[k] = x.grad.reshape(-1)
    return rows


def channel_average_jacobian(g: np.ndarray, channels: int, alpha: float) -> np.ndarray:
    """Closed form d out[c,i,j] / d a[c',i',j'] = (delta_cc' + alpha*g_ij/d) delta_ii' delta_jj'."""
    h, w = g.shape
    cells = h * w
    eye_cells = np.eye(cells)
    block = np.eye(channels)[:, None, :, None] * eye_cells[None, :, None, :]
    boost = (alpha * g.reshape(-1) / channels)[None, :, None, None] * eye_cells[None, :, None, :]
    full = block + np.broadcast_to(boost, (channels, cells, channels, cells))
    return full.reshape(channels * cells, channels * cells)


def jacobian_check(trials: int = 10, seed: int = 0, shape=(1, 4, 3, 3)) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = ExcitationConfig(Strategy.CHANNEL_AVERAGE_EXCITE)
    worst = 0.0
    for _ in range(trials):
        a = rng.normal(size=shape)
        boxes = [_random_boxes(rng, int(rng.integers(1, 3)))]
        alpha = float(rng.uniform(0.05, 1.0))
        g = rasterize_box_map(boxes[0], shape[2], shape[3]).grid.astype(np.float64)
        got = excitation_jacobian(a, boxes, alpha, cfg)
        worst = max(worst, float(np.abs(got - channel_average_jacobian(g, shape[1], alpha)).max()))
    return CheckResult("ae jacobian (eq4)", trials, worst, JACOBIAN_TOLERANCE)


def run_all(instances: int = 10, seed: int = 0) -> list[CheckResult]:
    return gradient_suite(instances, seed) + [jacobian_check(instances, seed)]
