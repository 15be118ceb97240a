"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plot, verify
from .data import Dataset, SceneSpec, read_dataset, read_ppm, write_dataset
from .errors import AEDetError, ConfigError, UsageError
from .excitation import ExcitationConfig, Strategy
from .metrics import DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD, ap_is_monotone, evaluate, predict
from .model import Detector, DetectorConfig
from .train import TrainConfig, format_ablation_table, load_checkpoint, resolve_ae, run_ablation, train

logger = logging.getLogger("aedet")

EVAL_KEYS = {"conf_threshold", "nms_threshold", "interpolation"}
SECTIONS = {"data", "model", "train", "ae", "eval"}


@dataclass
class RunConfig:
    data: SceneSpec = field(default_factory=SceneSpec)
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ae: Optional[ExcitationConfig] = None
    eval: dict = field(
        default_factory=lambda: {
            "conf_threshold": DEFAULT_CONF_THRESHOLD,
            "nms_threshold": DEFAULT_NMS_THRESHOLD,
            "interpolation": "coco",
        }
    )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        ev = dict(cls().eval)
        extra = set(d.get("eval") or {}) - EVAL_KEYS
        if extra:
            raise ConfigError(f"unknown eval config keys: {sorted(extra)}")
        ev.update(d.get("eval") or {})
        if ev["interpolation"] not in ("coco", "voc11"):
            raise ConfigError(f"interpolation must be coco or voc11, got {ev['interpolation']!r}")
        train_d = dict(d.get("train") or {})
        if "ae" in train_d:
            raise ConfigError("put the excitation settings in the top-level 'ae' section")
        ae = None if d.get("ae") is None else ExcitationConfig.from_dict(d["ae"])
        return cls(
            data=SceneSpec.from_dict(d.get("data") or {}),
            model=DetectorConfig.from_dict(d.get("model") or {}),
            train=TrainConfig.from_dict({**train_d, "ae": ae}),
            ae=ae,
            eval=ev,
        )

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        t.pop("ae")
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": t,
            "ae": None if self.ae is None else self.ae.to_dict(),
            "eval": dict(self.eval),
        }


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    def shared(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies must not overwrite values given before the subcommand
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        sp = argparse.ArgumentParser(add_help=False)
        sp.add_argument("--seed", type=int, help="override every seed in the config", **({"default": None} | kw))
        sp.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan only", **kw)
        sp.add_argument("-v", "--verbose", action="store_true", **kw)
        return sp

    common = shared(True)
    p = _Parser(prog="aedet", description="Grid detector training with assisted excitation.", parents=[shared(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="training dataset directory (generated in memory if absent)")
    t.add_argument("--val", help="validation dataset directory (generated in memory if absent)")
    t.add_argument("--train-count", type=int, default=2000)
    t.add_argument("--val-count", type=int, default=500)
    t.add_argument("--epochs", type=int)
    t.add_argument("--strategy", help="enable excitation with this strategy (eq2, eq3, eq4)")
    t.add_argument("--stage")
    t.add_argument("--no-ae", action="store_true", help="train the plain baseline")
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report JSON path (default: <checkpoint>.eval.json)")
    e.add_argument("--interpolation", choices=["coco", "voc11"])

    a = sub.add_parser("ablate", parents=[common], help="stage x strategy x seed sweep")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--stages", type=_int_list, required=True)
    a.add_argument("--strategies", type=_str_list, required=True)
    a.add_argument("--seeds", type=_int_list, required=True)
    a.add_argument("--data")
    a.add_argument("--val")
    a.add_argument("--train-count", type=int, default=2000)
    a.add_argument("--val-count", type=int, default=500)
    a.add_argument("--epochs", type=int)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference and Jacobian suite")
    c.add_argument("--instances", type=int, default=10)

    r = sub.add_parser("predict", parents=[common], help="detections for images")
    r.add_argument("--config")
    r.add_argument("--checkpoint", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--image", nargs="+")
    r.add_argument("--out", help="JSON output path (stdout if absent)")

    pl = sub.add_parser("plot", parents=[common], help="SVG figures")
    pl.add_argument("kind", choices=["ap-iou", "size", "schedule", "heatmap"])
    pl.add_argument("--out", required=True)
    pl.add_argument("--reports", nargs="+", default=[], help="EvalReport JSON files, optionally name=path")
    pl.add_argument("--metrics", nargs="+", default=[], help="metrics CSV files for the schedule plot")
    pl.add_argument("--config")
    pl.add_argument("--checkpoint")
    pl.add_argument("--image", help="PPM image for the heatmap")
    pl.add_argument("--data", help="dataset directory; use --index to pick the image")
    pl.add_argument("--index", type=int, default=0)
    pl.add_argument("--alpha", type=float, default=1.0)
    return p


# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if args.seed is not None:
        cfg.data = replace(cfg.data, seed=args.seed)
        cfg.model = replace(cfg.model, init_seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _plan(args, **fields) -> int:
    print(json.dumps({"command": args.command, **fields}, indent=2, default=str))
    return 0


def _datasets(args, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    tr = read_dataset(args.data) if args.data else Dataset.generate(cfg.data, args.train_count)
    va = read_dataset(args.val) if args.val else Dataset.generate(replace(cfg.data, seed=cfg.data.seed + 1), args.val_count)
    return tr, va


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    if args.dry_run:
        return _plan(args, spec=cfg.data.to_dict(), count=args.count, out=args.out)
    manifest = write_dataset(cfg.data, args.count, args.out)
    print(f"wrote {args.count} scenes to {args.out} (checksum {manifest['checksum']})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ae = cfg.ae
    if args.strategy or args.stage:
        ae = replace(ae or ExcitationConfig(), **({"strategy": Strategy.parse(args.strategy)} if args.strategy else {}))
        if args.stage:
            ae = replace(ae, stage=args.stage)
    if args.no_ae:
        ae = None
    tc = replace(cfg.train, ae=ae, output_dir=args.out, **({"epochs": args.epochs} if args.epochs else {}))
    if ae is not None and ae.stage > cfg.model.stage_count:
        raise ConfigError(f"stage {ae.stage} does not exist in a {cfg.model.stage_count}-stage model")
    if args.dry_run:
        resolved = resolve_ae(ae, tc.epochs)
        return _plan(
            args,
            model=cfg.model.to_dict(),
            train={k: v for k, v in tc.to_dict().items() if k != "ae"},
            ae=None if resolved is None else resolved.to_dict(),
            data=args.data or f"generated: {args.train_count} scenes, seed {cfg.data.seed}",
            val=args.val or f"generated: {args.val_count} scenes, seed {cfg.data.seed + 1}",
            out=args.out,
        )
    tr, va = _datasets(args, cfg)
    model = Detector(cfg.model, ae)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.json").write_text(json.dumps({**cfg.to_dict(), "ae": None if ae is None else ae.to_dict()}, indent=2))
    result = train(model, tr, tc, va, resume_from=args.resume)
    rep = result.report
    if rep is not None:
        print(f"AP {rep.ap:.4f}  AP50 {rep.ap50:.4f}  AP75 {rep.ap75:.4f}  sizes {rep.size_ap50}")
        if not ap_is_monotone(rep):
            logger.warning("AP-vs-IoU curve is not monotone")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    interp = args.interpolation or cfg.eval["interpolation"]
    out = args.out or f"{args.checkpoint}.eval.json"
    if args.dry_run:
        return _plan(args, checkpoint=args.checkpoint, data=args.data, eval={**cfg.eval, "interpolation": interp}, out=out)
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    rep = evaluate(model, ds, cfg.eval["conf_threshold"], cfg.eval["nms_threshold"], interp)
    rep.save(out)
    rep.save_curve_csv(Path(out).with_suffix(".csv"))
    print(f"AP {rep.ap:.4f}  AP50 {rep.ap50:.4f}  AP75 {rep.ap75:.4f}  sizes {rep.size_ap50}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    for s in args.strategies:
        Strategy.parse(s)
    for st in args.stages:
        if not 1 <= st <= cfg.model.stage_count:
            raise ConfigError(f"stage {st} does not exist in a {cfg.model.stage_count}-stage model")
    base = replace(cfg.train, ae=cfg.ae, output_dir=args.out, **({"epochs": args.epochs} if args.epochs else {}))
    n_rows = len(args.stages) * len(args.strategies) * len(args.seeds) + len(args.seeds)
    if args.dry_run:
        return _plan(args, stages=args.stages, strategies=args.strategies, seeds=args.seeds, runs=n_rows, epochs=base.epochs, out=args.out)
    tr, va = _datasets(args, cfg)
    rows = run_ablation(base, args.stages, args.strategies, args.seeds, tr, va, cfg.model, args.out)
    print(format_ablation_table(rows), end="")
    failed = [r for r in rows if r.error]
    if failed:
        logger.error("%d of %d runs failed", len(failed), len(rows))
        return 2
    return 0


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.dry_run:
        return _plan(args, instances=args.instances, seed=seed)
    results = verify.run_all(args.instances, seed)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 2


def cmd_predict(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        return _plan(args, checkpoint=args.checkpoint, inputs=args.data or args.image, eval=cfg.eval)
    model, _, _ = load_checkpoint(args.checkpoint)
    if args.data:
        images = read_dataset(args.data).images
        names = [f"{i:06d}" for i in range(len(images))]
    else:
        images = np.stack([read_ppm(Path(p)) for p in args.image])
        names = list(args.image)
    dets = predict(model, images, cfg.eval["conf_threshold"], cfg.eval["nms_threshold"])
    payload = {n: [d.to_dict() for d in ds] for n, ds in zip(names, dets)}
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _named(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        out[name if sep else Path(item).parent.name or Path(item).stem] = path if sep else item
    return out


def cmd_plot(args) -> int:
    if args.dry_run:
        return _plan(args, kind=args.kind, out=args.out)
    if args.kind == "ap-iou":
        plot.ap_vs_iou(_named(args.reports), args.out)
    elif args.kind == "size":
        plot.size_buckets(_named(args.reports), args.out)
    elif args.kind == "schedule":
        if args.metrics:
            series = {name: plot.read_alpha_column(path) for name, path in _named(args.metrics).items()}
        else:
            cfg = _config(args)
            ae = resolve_ae(cfg.ae or ExcitationConfig(), cfg.train.epochs)
            series = {"default": plot.schedule_points(ae.schedule.max_iteration, cfg.train.epochs)}
        plot.alpha_curve(series, args.out)
    else:
        if not args.checkpoint:
            raise UsageError("heatmap needs --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        if args.image:
            image, boxes = read_ppm(Path(args.image)), []
        elif args.data:
            image, boxes = read_dataset(args.data)[args.index]
        else:
            raise UsageError("heatmap needs --image or --data")
        plot.excitation_maps(model, image, boxes, args.alpha, args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "predict": cmd_predict,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"aedet: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"aedet: error: {exc}", file=sys.stderr)
        return 1
    except (AEDetError, OSError, FloatingPointError) as exc:
        print(f"aedet: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
