"""Training loop, Adam with L2 weight decay, checkpoints and the stage x strategy ablation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serialize
from .data import Dataset
from .errors import CheckpointError, ConfigError, DatasetError, NumericError
from .excitation import ExcitationConfig, ExcitationSchedule, Strategy, alpha_schedule
from .metrics import EvalReport, evaluate
from .model import LAMBDA_COORD, LAMBDA_NOOBJ, Detector, DetectorConfig, detection_loss, encode_batch
from .tensor import backward

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "alpha", "loss_total", "loss_box", "loss_obj", "loss_cls", "ap", "ap50", "ap75"]
ABLATION_HEADER = ["stage", "strategy", "seed", "ap", "ap50", "ap75"]
CHECKPOINT_VERSION = 1

# full-scale optimizer settings reported for the original YOLO experiments
FULL_SCALE = {"learning_rate": 1e-5, "weight_decay": 5e-4, "batch_size": 48}


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    seed: int = 0
    ae: Optional[ExcitationConfig] = None
    eval_every: int = 10
    output_dir: Optional[str] = None
    lambda_coord: float = LAMBDA_COORD
    lambda_noobj: float = LAMBDA_NOOBJ

    def __post_init__(self):
        if isinstance(self.ae, dict):
            self.ae = ExcitationConfig.from_dict(self.ae)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ae"] = None if self.ae is None else self.ae.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update in place; weight decay is added to the gradient (classic L2).

    ``params`` maps names to arrays (or Tensors); ``grads`` maps the same names to
    gradient arrays. Nothing is modified if any update would be non-finite.
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    staged = {}
    for name, p in params.items():
        theta = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        dt = theta.dtype.type
        g = g + dt(weight_decay) * theta
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - dt(b1)) * g if m is None else dt(b1) * m + dt(1 - b1) * g
        v = (1 - dt(b2)) * g * g if v is None else dt(b2) * v + dt(1 - b2) * (g * g)
        with np.errstate(invalid="ignore", over="ignore"):
            new = theta - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        if not np.isfinite(new).all():
            raise NumericError(f"non-finite Adam update for {name} at step {step}")
        staged[name] = (new.astype(theta.dtype, copy=False), m, v)
    for name, (new, m, v) in staged.items():
        p = params[name]
        if isinstance(p, np.ndarray):
            p[...] = new
        else:
            p.data = new
        state.m[name] = m
        state.v[name] = v
    state.step = step


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Detector, state: AdamState, path, epoch: int, train_config: Optional[TrainConfig] = None) -> None:
    """Weights and Adam moments go into an AETN file; configs into ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam.m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in state.v.items()})
    serialize.save_tensors(path, tensors)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "ae": None if model.ae is None else model.ae.to_dict(),
        "train": None if train_config is None else train_config.to_dict(),
        "epoch": epoch,
        "seed": None if train_config is None else train_config.seed,
        "adam": {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path) -> tuple[Detector, AdamState, dict]:
    """Returns (model, adam state, sidecar dict)."""
    path = Path(path)
    try:
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint sidecar for {path}: {exc}") from exc
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {sidecar.get('version')} != {CHECKPOINT_VERSION}")
    tensors = serialize.load_tensors(path)
    config = DetectorConfig.from_dict(sidecar["model"])
    ae = None if sidecar["ae"] is None else ExcitationConfig.from_dict(sidecar["ae"])
    model = Detector(config, ae)
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    adam = sidecar["adam"]
    state = AdamState(
        m={k[len("adam.m/") :]: v for k, v in tensors.items() if k.startswith("adam.m/")},
        v={k[len("adam.v/") :]: v for k, v in tensors.items() if k.startswith("adam.v/")},
        step=int(adam["step"]),
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        eps=adam["eps"],
    )
    return model, state, sidecar


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Detector
    state: AdamState
    metrics: list
    report: Optional[EvalReport] = None
    reports: list = field(default_factory=list)


def resolve_ae(ae: Optional[ExcitationConfig], epochs: int, steps_per_epoch: int = 1) -> Optional[ExcitationConfig]:
    """Copy of ``ae`` with the schedule horizon filled in (0.8 x epochs by default)."""
    if ae is None or ae.schedule.max_iteration is not None:
        return ae
    horizon = ae.schedule.resolved(epochs, steps_per_epoch)
    return replace(ae, schedule=ExcitationSchedule(horizon, ae.schedule.unit))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[k]) for k in METRICS_HEADER[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise DatasetError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            {k: (int(v) if k == "epoch" else (float(v) if v != "" else None)) for k, v in row.items()} for row in reader
        ]


def train(
    model: Detector,
    dataset: Dataset,
    config: TrainConfig,
    val_dataset: Optional[Dataset] = None,
    resume_from=None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Train ``model`` in place.

    Each epoch: shuffle with an RNG seeded by ``(seed, epoch)``, compute alpha once,
    run forward/loss/backward/Adam over all batches, log one metrics row. AP columns
    are filled on ``eval_every`` epochs and the last epoch when ``val_dataset`` is given.
    ``stop_after`` ends the run early after that many epochs (used to test resume).
    """
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    if model.ae is not None and config.ae is not None and model.ae.stage != config.ae.stage:
        raise ConfigError("model AE stage and train config AE stage disagree")
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    ae = resolve_ae(model.ae if model.ae is not None else config.ae, config.epochs, steps_per_epoch)
    model.ae = ae
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    state = AdamState()
    metrics: list[dict] = []
    start_epoch = 0
    if resume_from is not None:
        loaded, state, sidecar = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        start_epoch = int(sidecar["epoch"])
        csv_path = Path(str(resume_from) + ".metrics.csv")
        if csv_path.exists():
            metrics = read_metrics_csv(csv_path)[:start_epoch]

    n = len(dataset)
    horizon = None if ae is None else ae.schedule.max_iteration
    report = None
    reports: list[EvalReport] = []
    end_epoch = config.epochs if stop_after is None else min(config.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        epoch_alpha = _alpha(ae, horizon, epoch, epoch * steps_per_epoch)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            images = dataset.images[idx]
            labels = [dataset.labels[i] for i in idx]
            alpha = epoch_alpha if ae is None or ae.schedule.unit == "epoch" else _alpha(ae, horizon, epoch, epoch * steps_per_epoch + b)
            try:
                raw = model.forward(images, labels if alpha > 0 else None, alpha)
                loss, parts = detection_loss(raw, encode_batch(labels, model.config), model.config, config.lambda_coord, config.lambda_noobj)
                for p in model.parameters():
                    p.zero_grad()
                backward(loss)
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, config.learning_rate, config.weight_decay)
            except NumericError:
                if out_dir:
                    save_checkpoint(model, state, out_dir / "crash.ckpt", epoch, config)
                logger.error("non-finite value at epoch %d batch %d; crash checkpoint saved", epoch, b)
                raise
            k = len(idx)
            sums["total"] += loss.item() * k
            for name in ("box", "obj", "cls"):
                sums[name] += parts[name] * k
        row = {
            "epoch": epoch,
            "alpha": epoch_alpha,
            "loss_total": sums["total"] / n,
            "loss_box": sums["box"] / n,
            "loss_obj": sums["obj"] / n,
            "loss_cls": sums["cls"] / n,
            "ap": None,
            "ap50": None,
            "ap75": None,
        }
        last = epoch == config.epochs - 1
        if val_dataset is not None and (last or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            report = evaluate(model, val_dataset)
            reports.append(report)
            row.update(ap=report.ap, ap50=report.ap50, ap75=report.ap75)
        metrics.append(row)
        logger.info(
            "epoch %d alpha %.4f loss %.4f ap50 %s (%.1fs)",
            epoch, epoch_alpha, row["loss_total"], _fmt(row["ap50"]) or "-", time.perf_counter() - t0,
        )
        if out_dir:
            if last or (config.eval_every and (epoch + 1) % config.eval_every == 0):
                ck = out_dir / ("final.ckpt" if last else f"epoch{epoch + 1:03d}.ckpt")
                save_checkpoint(model, state, ck, epoch + 1, config)
                write_metrics_csv(metrics, str(ck) + ".metrics.csv")
            write_metrics_csv(metrics, out_dir / "metrics.csv")
    if out_dir and report is not None:
        report.save(out_dir / "eval.json")
    return TrainResult(model, state, metrics, report, reports)


def _alpha(ae: Optional[ExcitationConfig], horizon, epoch: int, step: int) -> float:
    if ae is None:
        return 0.0
    t = epoch if ae.schedule.unit == "epoch" else step
    return alpha_schedule(t, horizon)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    stage: str
    strategy: str
    seed: int
    ap: float
    ap50: float
    ap75: float
    checkpoint: Optional[str] = None
    error: Optional[str] = None


def _run_one(model_config: DetectorConfig, train_config: TrainConfig, train_data: Dataset, val_data: Dataset) -> EvalReport:
    mc = replace(model_config, init_seed=train_config.seed)
    model = Detector(mc, train_config.ae)
    result = train(model, train_data, train_config, val_data)
    return result.report if result.report is not None else evaluate(model, val_data)


def run_ablation(
    base_config: TrainConfig,
    stages: Sequence,
    strategies: Sequence,
    seeds: Sequence[int],
    train_data: Dataset,
    val_data: Dataset,
    model_config: Optional[DetectorConfig] = None,
    output_dir=None,
) -> list[AblationRow]:
    """Train a no-AE baseline per seed plus one model per (stage, strategy, seed).

    Rows come out ordered by seed, baseline first. Failed runs are logged with NaN
    metrics and the sweep continues.
    """
    if not stages or not strategies or not seeds:
        raise ConfigError("ablation needs non-empty stage, strategy and seed lists")
    model_config = model_config or DetectorConfig()
    out_root = Path(output_dir or base_config.output_dir or "ablation")
    out_root.mkdir(parents=True, exist_ok=True)
    base_ae = base_config.ae or ExcitationConfig()
    plan = []
    for seed in seeds:
        plan.append(("none", "none", seed, None))
        for stage in stages:
            for strat in strategies:
                s = Strategy.parse(strat)
                plan.append((str(stage), s.short, seed, replace(base_ae, stage=stage, strategy=s)))

    rows: list[AblationRow] = []
    for stage, strat, seed, ae in plan:
        name = f"baseline_seed{seed}" if ae is None else f"stage{stage}_{strat}_seed{seed}"
        run_dir = out_root / name
        cfg = replace(base_config, seed=seed, ae=ae, output_dir=str(run_dir))
        try:
            report = _run_one(model_config, cfg, train_data, val_data)
            rows.append(AblationRow(stage, strat, seed, report.ap, report.ap50, report.ap75, str(run_dir / "final.ckpt")))
        except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
            logger.exception("ablation run %s failed", name)
            rows.append(AblationRow(stage, strat, seed, math.nan, math.nan, math.nan, None, f"{type(exc).__name__}: {exc}"))
        write_ablation_csv(rows, out_root / "ablation.csv")
    (out_root / "ablation.txt").write_text(format_ablation_table(rows))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.stage, r.strategy, r.seed, repr(r.ap), repr(r.ap50), repr(r.ap75)])


def read_ablation_csv(path) -> list[AblationRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [AblationRow(r["stage"], r["strategy"], int(r["seed"]), float(r["ap"]), float(r["ap50"]), float(r["ap75"])) for r in reader]


def summarize_ablation(rows: Sequence[AblationRow]) -> list[dict]:
    """Mean and std over seeds for each (stage, strategy)."""
    groups: dict[tuple[str, str], list[AblationRow]] = {}
    for r in rows:
        groups.setdefault((r.stage, r.strategy), []).append(r)
    out = []
    for (stage, strat), rs in groups.items():
        entry = {"stage": stage, "strategy": strat, "n": len(rs)}
        for k in ("ap", "ap50", "ap75"):
            vals = np.array([getattr(r, k) for r in rs], dtype=float)
            entry[k] = float(np.mean(vals))
            entry[k + "_std"] = float(np.std(vals))
        out.append(entry)
    return out


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    """Aligned text table, one line per configuration, AP values in percent."""
    summary = summarize_ablation(rows)
    lines = [f"{'Method':<10} {'Stage':<7} {'Strategy':<9} {'AP':>13} {'AP50':>13} {'AP75':>13}"]
    for e in summary:
        method = "baseline" if e["stage"] == "none" else "AE"
        cells = [f"{100 * e[k]:5.1f} ± {100 * e[k + '_std']:4.1f}" for k in ("ap", "ap50", "ap75")]
        lines.append(f"{method:<10} {e['stage']:<7} {e['strategy']:<9} {cells[0]:>13} {cells[1]:>13} {cells[2]:>13}")
    return "\n".join(lines) + "\n"
