"""Command-line entry point: ``sfdet <subcommand> [options]``.

Every subcommand writes into ``--out`` and records the resolved config
(``config.txt``) and library versions (``versions.txt``) there.
"""

from __future__ import annotations

import argparse
import csv
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from sfdet import __version__, adapt, align, datagen, detector as det, metrics, tam as tam_mod
from sfdet.config import ExperimentConfig, load as load_config, parse_pairs
from sfdet.datagen import ConfigError, DatasetFormatError
from sfdet.kernels import BACKEND
from sfdet.params import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("sfdet")

SOURCE_SPLIT = "source_train"
TARGET_TRAIN = "target_train"
TARGET_VAL = "target_val"
STYLE_KEY = "style.image"


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _versions() -> str:
    import scipy
    return "\n".join([f"sfdet = {__version__}", f"python = {platform.python_version()}",
                      f"numpy = {np.__version__}", f"scipy = {scipy.__version__}",
                      f"kernels = {BACKEND}"]) + "\n"


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    (out / "versions.txt").write_text(_versions())
    return out


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise MissingInput(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _read_split(data: Path, split: str):
    if not (data / "images" / split).is_dir():
        raise MissingInput(f"dataset split not found: {data / 'images' / split}")
    pairs = datagen.read_dataset(data, split)
    if not pairs:
        raise MissingInput(f"dataset split is empty: {data / 'images' / split}")
    images = np.stack([p[0] for p in pairs]).astype(np.float32)
    return images, [p[1] for p in pairs]


def _load_detector(path) -> tuple[dict, dict]:
    params, meta = load_checkpoint(_require(path, "detector checkpoint"))
    if meta.get("kind") != "detector":
        raise CheckpointError(f"{path}: not a detector checkpoint (kind={meta.get('kind')!r})")
    return params, meta


def _load_tam(path) -> tuple[tam_mod.TamParams, np.ndarray]:
    params, meta = load_checkpoint(_require(path, "TAM checkpoint"))
    if meta.get("kind") != "tam" or STYLE_KEY not in params:
        raise CheckpointError(f"{path}: not a TAM checkpoint")
    style = params.pop(STYLE_KEY)
    return tam_mod.TamParams(params, meta.get("mode", "learned")), style


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- subcommands

def cmd_datagen(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    d, s = cfg.data, cfg.seed
    shift = datagen.preset(cfg.scenario)
    splits = {
        SOURCE_SPLIT: datagen.make_split(d.n_source, 1000 * s + 1, None, d.image_size, d.max_objects),
        TARGET_TRAIN: datagen.make_split(d.n_target_train, 1000 * s + 3, shift, d.image_size, d.max_objects),
        TARGET_VAL: datagen.make_split(d.n_target_val, 1000 * s + 2, shift, d.image_size, d.max_objects),
    }
    for name, pairs in splits.items():
        datagen.write_dataset(out, name, pairs)
        print(f"{name}: {len(pairs)} images -> {out / 'images' / name}")
    return 0


def cmd_train_source(args, cfg: ExperimentConfig) -> int:
    data = _require(args.data, "dataset directory")
    images, labels = _read_split(data, args.split)
    init = _load_detector(args.init)[0] if args.init else None
    dcfg = det.DetectorConfig(image_size=images.shape[1])
    out = _prepare_out(args, cfg)
    params, trace = det.train_detector(list(zip(images, labels)), dcfg, cfg.train, seed=cfg.seed, init=init)
    save_checkpoint(out / "detector.ckpt", params, dcfg.to_meta())
    _write_rows(out / "train_loss.csv", ("epoch", "loss"), [(i, f"{v:.6f}") for i, v in enumerate(trace)])
    print(f"trained on {len(images)} images of {args.split}; checkpoint {out / 'detector.ckpt'}")
    return 0


def cmd_train_tam(args, cfg: ExperimentConfig) -> int:
    data = _require(args.data, "dataset directory")
    images, _ = _read_split(data, args.split)
    out = _prepare_out(args, cfg)
    style = tam_mod.compute_style_image(images, args.style_mode, cfg.seed)
    tp, hist = tam_mod.train_tam(images, style, cfg.tam)
    save_checkpoint(out / "tam.ckpt", {**tp.params, STYLE_KEY: style}, tp.meta())
    _write_rows(out / "tam_loss.csv", ("step", "rec", "style"),
                [(s, f"{r:.6g}", f"{y:.6g}") for s, r, y in zip(hist.steps, hist.rec, hist.style)])
    (r0, s0), (r1, s1) = hist.holdout_initial, hist.holdout_final
    print(f"held-out rec {r0:.5f} -> {r1:.5f}, style {s0:.5f} -> {s1:.5f}; checkpoint {out / 'tam.ckpt'}")
    return 0


def cmd_stylize(args, cfg: ExperimentConfig) -> int:
    data = _require(args.data, "dataset directory")
    tp, style = _load_tam(args.tam)
    images, labels = _read_split(data, args.split)
    out = _prepare_out(args, cfg)
    stylized = tam_mod.stylize(tp, images, style)
    datagen.write_dataset(out, args.split, list(zip(stylized, labels)))
    print(f"stylized {len(images)} images -> {out / 'images' / args.split}")
    return 0


def _run_adapt(cfg: ExperimentConfig, source, source_meta, tam_pair, train_x, val_x, val_y, out: Path):
    tam, style = tam_pair if tam_pair else (None, None)
    res = adapt.run_adaptation(source, train_x, val_x, val_y, tam, cfg.adapt, style)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "teacher.ckpt", res.teacher, source_meta)
    save_checkpoint(out / "student.ckpt", res.student, source_meta)
    res.history.write_csv(out / "history.csv")
    _write_metrics(out / "metrics.csv", *_evaluate(res.teacher, val_x, val_y, cfg.adapt.eval_conf,
                                                    cfg.adapt.eval_nms))
    return res


def _adapt_inputs(args, cfg: ExperimentConfig):
    data = _require(args.data, "dataset directory")
    source, meta = _load_detector(args.source)
    needs_tam = cfg.adapt.variant != "strong_weak"
    tam_pair = _load_tam(args.tam) if needs_tam else None
    train_x, _ = _read_split(data, TARGET_TRAIN)  # labels, if present, are never used
    val_x, val_y = _read_split(data, TARGET_VAL)
    return source, meta, tam_pair, train_x, val_x, val_y


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    inputs = _adapt_inputs(args, cfg)
    out = _prepare_out(args, cfg)
    res = _run_adapt(cfg, *inputs, out)
    h = res.history
    if h.records:
        print(f"final teacher mAP50 {h.final_teacher:.4f} (best {h.best_teacher:.4f}, retention {h.retention:.3f})")
    else:
        print("0 epochs: teacher equals the source checkpoint")
    return 0


def _class_name(c: int) -> str:
    return datagen.CLASS_NAMES[c] if c < len(datagen.CLASS_NAMES) else str(c)


def _evaluate(params, images, labels, conf: float, nms: float) -> tuple[dict[int, float], float]:
    dets = det.detect(params, images, conf, nms)
    return metrics.per_class_ap(dets, labels), metrics.map50(dets, labels)


def _write_metrics(path: Path, aps: dict[int, float], m: float) -> None:
    rows = [(c, _class_name(c), f"{ap:.6f}") for c, ap in aps.items()]
    rows.append(("all", "mAP50", f"{m:.6f}"))
    _write_rows(path, ("class_id", "name", "ap50"), rows)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    data = _require(args.data, "dataset directory")
    params, _ = _load_detector(args.ckpt)
    images, labels = _read_split(data, args.split)
    aps, m = _evaluate(params, images, labels, args.conf, args.nms)
    width = max(len(n) for n in datagen.CLASS_NAMES)
    print(f"{'class':<{width}}  AP50")
    for c, ap in aps.items():
        print(f"{_class_name(c):<{width}}  {ap:.4f}")
    print(f"{'mAP50':<{width}}  {m:.4f}")
    if args.out:
        _write_metrics(_prepare_out(args, cfg) / "metrics.csv", aps, m)
    return 0


def ablation_grid(cfg: ExperimentConfig, etas: Sequence[float], lambdas: Sequence[float],
                  delayed_alphas: Sequence[float], gammas: Sequence[float]) -> list[tuple[str, adapt.AdaptConfig]]:
    """Named sweep points: learning rates without SSM, L2 strengths, delayed
    EMA, strong-weak augmentation and the SSM momentum grid."""
    base = cfg.adapt
    points = [("ssm", base.replace(variant="ssm"))]
    points += [(f"no_ssm-eta{e:g}", base.replace(variant="no_ssm", eta=e)) for e in etas]
    points += [(f"l2-lambda{lam:g}", base.replace(variant="l2", l2_lambda=lam)) for lam in lambdas]
    points += [(f"delayed_ema-alpha{a:g}", base.replace(variant="delayed_ema", alpha=a)) for a in delayed_alphas]
    points.append(("strong_weak", base.replace(variant="strong_weak")))
    points += [(f"ssm-gamma{g:g}", base.replace(variant="ssm", gamma=g)) for g in gammas]
    return points


def _sweep(args, cfg: ExperimentConfig, points, summary_name: str) -> int:
    source, meta, tam_pair, train_x, val_x, val_y = _adapt_inputs(args, cfg.with_overrides({"adapt.variant": "ssm"}))
    out = _prepare_out(args, cfg)
    rows = []
    for name, acfg in points:
        run_cfg = ExperimentConfig(cfg.scenario, cfg.seed, cfg.data, cfg.train, cfg.tam, acfg)
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(run_cfg.dumps())
        res = _run_adapt(run_cfg, source, meta, tam_pair, train_x, val_x, val_y, run_dir)
        h = res.history
        rows.append((name, acfg.variant, acfg.align, f"{h.final_teacher:.6f}", f"{h.best_teacher:.6f}",
                     f"{h.retention:.6f}"))
        print(f"{name:<24} final {h.final_teacher:.4f}  best {h.best_teacher:.4f}  retention {h.retention:.3f}")
    _write_rows(out / summary_name, ("run", "variant", "align", "final_map50", "best_map50", "retention"), rows)
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    points = ablation_grid(cfg, args.etas, args.lambdas, args.delayed_alphas, args.gammas)
    return _sweep(args, cfg, points, "ablate.csv")


def cmd_align_ablate(args, cfg: ExperimentConfig) -> int:
    points = [(a if a != "none" else "ssm", cfg.adapt.replace(variant="ssm", align=a)) for a in adapt.ALIGNMENTS]
    return _sweep(args, cfg, points, "align.csv")


def cmd_curves(args, cfg: ExperimentConfig) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for run in args.runs:
        p = _require(run, "run directory or history file")
        if p.is_dir():
            found = sorted(p.glob("**/history.csv"))
            if not found:
                raise MissingInput(f"no history.csv under {p}")
            files += found
        else:
            files.append(p)
    out = _prepare_out(args, cfg)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for f in files:
        h = adapt.AdaptHistory.read_csv(f)
        label = f.parent.name if f.name == "history.csv" else f.stem
        ax.plot([r.epoch for r in h.records], [100 * r.teacher_map50 for r in h.records], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("teacher mAP50 (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)
    print(f"plotted {len(files)} runs -> {out / 'curves.png'}")
    return 0


def cmd_mmd(args, cfg: ExperimentConfig) -> int:
    """Shift magnitude between the source split and each target split given."""
    params, _ = _load_detector(args.ckpt)
    data = _require(args.data, "dataset directory")
    src, _ = _read_split(data, SOURCE_SPLIT)
    pooled_src = det.features(params, src).mean(axis=(1, 2))
    rows = []
    for split in args.splits:
        tgt, _ = _read_split(data, split)
        value = align.mmd(pooled_src, det.features(params, tgt).mean(axis=(1, 2)))
        rows.append((split, f"{value:.6g}"))
        print(f"{split:<20} MMD^2 {value:.6g}")
    if args.out:
        _write_rows(_prepare_out(args, cfg) / "mmd.csv", ("split", "mmd2"), rows)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for data, training and adaptation")
    common.add_argument("--variant", choices=adapt.VARIANTS, help="adaptation variant")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. adapt.gamma=0.7 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sfdet", description="Source-free detector adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_, out_required=True):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("datagen", cmd_datagen, "generate source and shifted target datasets")

    sp = add("train-source", cmd_train_source, "supervised detector training on a labelled split")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--split", default=SOURCE_SPLIT)
    sp.add_argument("--init", help="start from this detector checkpoint (e.g. for a target oracle)")

    sp = add("train-tam", cmd_train_tam, "train the target augmentation module")
    sp.add_argument("--data")
    sp.add_argument("--split", default=TARGET_TRAIN)
    sp.add_argument("--style-mode", choices=("average", "random"), default="average")

    sp = add("stylize", cmd_stylize, "write TAM-stylized copies of a split")
    sp.add_argument("--data")
    sp.add_argument("--tam")
    sp.add_argument("--split", default=TARGET_TRAIN)

    for name, fn, help_ in (("adapt", cmd_adapt, "source-free adaptation of a source detector"),
                            ("ablate", cmd_ablate, "sweep of stabilisation variants"),
                            ("align-ablate", cmd_align_ablate, "SSM pipeline with and without feature alignment")):
        sp = add(name, fn, help_)
        sp.add_argument("--data")
        sp.add_argument("--source", help="source detector checkpoint")
        sp.add_argument("--tam", help="TAM checkpoint (not needed for strong_weak)")
        sp.add_argument("--epochs", type=int, help="shortcut for adapt.epochs")
        if name == "ablate":
            sp.add_argument("--etas", type=float, nargs="+", default=[0.01, 0.005, 0.0025])
            sp.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 0.01, 0.001])
            sp.add_argument("--delayed-alphas", type=float, nargs="+", default=[0.5, 0.9])
            sp.add_argument("--gammas", type=float, nargs="+", default=[0.3, 0.5, 0.7, 0.9])

    sp = add("eval", cmd_eval, "per-class AP50 and mAP50 of a detector on a split", out_required=False)
    sp.add_argument("--ckpt", help="detector checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", default=TARGET_VAL)
    sp.add_argument("--conf", type=float, default=0.001)
    sp.add_argument("--nms", type=float, default=0.6)

    sp = add("curves", cmd_curves, "plot teacher mAP50 per epoch from history.csv files")
    sp.add_argument("runs", nargs="+", help="run directories (searched recursively) or history.csv files")

    sp = add("mmd", cmd_mmd, "MMD between source and target backbone features", out_required=False)
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--splits", nargs="+", default=[TARGET_VAL])
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(_require(args.config, "config file")) if args.config else ExperimentConfig()
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_pairs(item, "--set"))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.variant:
        overrides["adapt.variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        overrides["adapt.epochs"] = str(args.epochs)
    cfg = cfg.with_overrides(overrides)
    # one seed drives every stochastic component
    return cfg.with_overrides({"adapt.seed": str(cfg.seed), "tam.seed": str(cfg.seed)})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.fn(args, cfg)
    except MissingInput as exc:
        print(f"sfdet {args.command}: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"sfdet {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetFormatError, adapt.AdaptationError, tam_mod.TamTrainingError,
            det.TrainingError, metrics.EvaluationError) as exc:
        print(f"sfdet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
