"""Command-line entry point: generate | pretrain | train | sweep | report.

Every command writes a run manifest (argv, resolved config, seed, dataset
checksum, code version, output paths) that is sufficient to reproduce the
run bit for bit. All randomness flows from --seed through named substreams,
so reruns with identical arguments produce identical bytes. Exit codes:
0 success, 1 usage or configuration problem, 2 contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .backbone import (
    ViTConfig, build_backbone, load_pretrained, pretext_pretrain,
    pretext_pretrain_stem, save_pretrained,
)
from .checkpoint import save_checkpoint
from .data import (
    GeneratorConfig, dataset_checksum, dataset_kind, degrade_mask, generate,
    generate_pretext, load_dataset, plan_folds, save_dataset,
)
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import ResNetStem
from .metrics import METRIC_NAMES
from .model import TuningMode
from .trainer import TrainConfig, run_cross_validation
from .util import format_mean_std, render_table, substream, substream_seed

MODE_NAMES = [m.value for m in TuningMode]


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; our contract wants 1
    def error(self, message):
        raise ConfigurationError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated integer list, got '{text}'")


def _int_pair(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise ConfigurationError(f"expected two comma-separated integers, got '{text}'")
    return vals[0], vals[1]


def _apply_config_file(args: argparse.Namespace, argv: list[str],
                       parser: argparse.ArgumentParser) -> None:
    """Fill args from a key=value config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    converters = {}
    for action in parser._actions:
        if action.option_strings:
            converters[action.dest] = action.type or str
    given = set()
    for tok in argv:
        if tok.startswith("--"):
            given.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}: malformed config line '{line}'")
        key, value = line.split("=", 1)
        dest = key.strip().replace("-", "_")
        if dest not in converters:
            raise ConfigurationError(f"{path}: unknown config key '{key.strip()}'")
        if dest in given:
            continue
        conv = converters[dest]
        setattr(args, dest, conv(value.strip()))


def _write_manifest(out_dir: Path, argv: list[str], config: dict, seed: int,
                    data_checksum: str | None, outputs: list[str]) -> None:
    manifest = {
        "command": argv,
        "config": config,
        "seed": seed,
        "dataset_checksum": data_checksum,
        "code_version": __version__,
        "outputs": sorted(outputs),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# generate


def _cmd_generate(args, argv) -> int:
    cfg = GeneratorConfig(
        videos_per_class=args.videos,
        frames_per_video=args.frames,
        image_size=args.size,
        pretext_videos=args.pretext_videos,
        seed=args.seed,
    )
    out = Path(args.out)
    save_dataset(generate(cfg), out, kind="eval")
    save_dataset(generate_pretext(cfg), out / "pretext", kind="pretext")
    checksum = dataset_checksum(out)
    _write_manifest(out, argv, {
        "videos": list(args.videos), "frames": args.frames, "size": args.size,
        "pretext_videos": args.pretext_videos,
    }, args.seed, checksum, ["manifest.csv", "meta.txt", "pretext"])
    n_videos = sum(cfg.videos_per_class)
    print(f"wrote {n_videos} videos x {cfg.frames_per_video} frames to {out} "
          f"(checksum {checksum[:12]})")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def _cmd_pretrain(args, argv) -> int:
    data_dir = Path(args.data)
    kind = dataset_kind(data_dir)
    if kind == "eval":
        raise ContractError(
            f"{data_dir} is an evaluation dataset; pretraining on it would leak into "
            f"the folds. Point --data at its pretext subset (e.g. {data_dir / 'pretext'})."
        )
    samples = load_dataset(data_dir)
    checksum = dataset_checksum(data_dir)
    size = samples[0].image.shape[-1]
    vit_cfg = ViTConfig(image_size=size)
    backbone = build_backbone(vit_cfg, args.seed)
    backbone, report = pretext_pretrain(backbone, samples, epochs=args.epochs, seed=args.seed)
    stem = ResNetStem(substream(args.seed, "init:seg_stem"))
    stem, stem_report = pretext_pretrain_stem(stem, samples, epochs=args.epochs, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pretrained(out, backbone, stem, meta={
        "pretext_checksum": checksum,
        "pretext_accuracy": f"{report.holdout_accuracy:.6f}",
        "stem_pretext_accuracy": f"{stem_report.holdout_accuracy:.6f}",
    })
    _write_manifest(out.parent, argv, {"epochs": args.epochs}, args.seed, checksum,
                    [out.name, out.name + ".meta"])
    print(f"pretext accuracy: backbone {report.holdout_accuracy:.4f}, "
          f"stem {stem_report.holdout_accuracy:.4f} (chance 0.25); wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# train / sweep


def _load_training_inputs(args):
    data_dir = Path(args.data)
    samples = load_dataset(data_dir)
    checksum = dataset_checksum(data_dir)
    bundle = load_pretrained(args.ckpt) if args.ckpt else None
    if bundle is not None and bundle.meta.get("pretext_checksum") == checksum:
        raise ContractError(
            "the backbone checkpoint was pretrained on this very dataset; "
            "pretraining and evaluation data must stay disjoint"
        )
    if args.degrade_dice < 1.0:
        samples = [
            type(s)(
                image=s.image,
                mask=degrade_mask(s.mask, args.degrade_dice,
                                  substream_seed(args.seed, f"degrade:{s.video_id}:{s.frame_id}"))
                if s.mask is not None else None,
                label=s.label, video_id=s.video_id, frame_id=s.frame_id,
            )
            for s in samples
        ]
    return samples, checksum, bundle


def _train_config(args, mode: TuningMode, l_s: int | None = None) -> TrainConfig:
    ablate = getattr(args, "ablate", None)
    return TrainConfig(
        mode=mode,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        l_s=args.ls if l_s is None else l_s,
        l_e=args.le,
        vpt_tokens=args.lp,
        no_indicator=ablate == "no-r",
        no_extra_tokens=ablate == "no-ze",
    )


def _guard_masks(mode: TuningMode, samples, data_dir: str) -> None:
    if mode.uses_mask and any(s.mask is None for s in samples):
        raise ConfigurationError(
            f"mode '{mode.value}' requires segmentation masks, but the dataset at "
            f"{data_dir} has frames without mask files"
        )


def _aggregate_csv_rows(label: str, result) -> list[list[str]]:
    rows = []
    for fold_id, rep in result.fold_reports:
        rows.append([f"fold_{fold_id}", label]
                    + [f"{getattr(rep, m):.12f}" for m in METRIC_NAMES])
    agg = result.aggregate
    rows.append(["aggregate_mean", label] + [f"{agg.mean(m):.12f}" for m in METRIC_NAMES])
    rows.append(["aggregate_std", label] + [f"{agg.std(m):.12f}" for m in METRIC_NAMES])
    return rows


def _write_report_files(out: Path, header_label: str, table_rows: list[list[str]],
                        csv_rows: list[list[str]]) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(
        [header_label, "Accuracy", "Precision", "Recall", "F1", "AUC"], table_rows
    )
    (out / "report.txt").write_text(table)
    csv_lines = ["row,label," + ",".join(METRIC_NAMES)]
    csv_lines += [",".join(r) for r in csv_rows]
    (out / "report.csv").write_text("\n".join(csv_lines) + "\n")
    return ["report.txt", "report.csv"]


def _mean_std_row(label: str, agg) -> list[str]:
    return [label] + [
        format_mean_std(100.0 * agg.mean(m), 100.0 * agg.std(m)) for m in METRIC_NAMES
    ]


def _cmd_train(args, argv) -> int:
    try:
        mode = TuningMode(args.mode)
    except ValueError:
        raise ConfigurationError(
            f"unknown mode '{args.mode}'; choose from {', '.join(MODE_NAMES)}"
        ) from None
    if args.ablate and not mode.is_segprompt:
        raise ConfigurationError(
            f"--ablate only applies to segprompt modes, not '{mode.value}'"
        )
    samples, checksum, bundle = _load_training_inputs(args)
    _guard_masks(mode, samples, args.data)
    cfg = _train_config(args, mode)
    plan = plan_folds(samples)
    result = run_cross_validation(cfg, samples, plan, bundle, jobs=args.jobs)

    out = Path(args.out)
    outputs = _write_report_files(out, "Method",
                                  [_mean_std_row(mode.value, result.aggregate)],
                                  _aggregate_csv_rows(mode.value, result))
    folds_dir = out / "folds"
    folds_dir.mkdir(parents=True, exist_ok=True)
    for (fold_id, _), train_report, model in zip(result.fold_reports,
                                                 result.train_reports, result.models):
        (folds_dir / f"fold_{fold_id}_train.csv").write_text(train_report.to_csv())
        save_checkpoint(folds_dir / f"fold_{fold_id}_model.ckpt", model.state())
        outputs += [f"folds/fold_{fold_id}_train.csv", f"folds/fold_{fold_id}_model.ckpt"]
    _write_manifest(out, argv, {
        "mode": mode.value, "ls": cfg.l_s, "le": cfg.l_e, "lp": cfg.vpt_tokens,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.learning_rate,
        "degrade_dice": args.degrade_dice, "ablate": args.ablate, "jobs": args.jobs,
        "ckpt": args.ckpt, "data": args.data,
    }, args.seed, checksum, outputs)
    print(render_table([ "Method", "Accuracy", "Precision", "Recall", "F1", "AUC"],
                       [_mean_std_row(mode.value, result.aggregate)]), end="")
    return 0


def _cmd_sweep(args, argv) -> int:
    try:
        mode = TuningMode(args.mode)
    except ValueError:
        raise ConfigurationError(
            f"unknown mode '{args.mode}'; choose from {', '.join(MODE_NAMES)}"
        ) from None
    if not mode.is_segprompt:
        raise ConfigurationError("sweep varies l_s, which only segprompt modes use")
    samples, checksum, bundle = _load_training_inputs(args)
    _guard_masks(mode, samples, args.data)
    plan = plan_folds(samples)

    table_rows, csv_rows = [], []
    for l_s in args.ls:
        cfg = _train_config(args, mode, l_s=l_s)
        result = run_cross_validation(cfg, samples, plan, bundle, jobs=args.jobs)
        table_rows.append(_mean_std_row(str(l_s), result.aggregate))
        agg = result.aggregate
        csv_rows.append([str(l_s), mode.value]
                        + [f"{agg.mean(m):.12f}" for m in METRIC_NAMES])
        csv_rows.append([f"{l_s}_std", mode.value]
                        + [f"{agg.std(m):.12f}" for m in METRIC_NAMES])

    out = Path(args.out)
    outputs = _write_report_files(out, "l_s", table_rows, csv_rows)
    _write_manifest(out, argv, {
        "mode": mode.value, "ls_values": args.ls, "le": args.le,
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "degrade_dice": args.degrade_dice, "jobs": args.jobs,
        "ckpt": args.ckpt, "data": args.data,
    }, args.seed, checksum, outputs)
    print(render_table(["l_s", "Accuracy", "Precision", "Recall", "F1", "AUC"],
                       table_rows), end="")
    return 0


# ---------------------------------------------------------------------------
# report


def _cmd_report(args, argv) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.csv"
        if not path.exists():
            raise ConfigurationError(f"missing metrics file: {path}")
        means = stds = label = None
        with open(path) as f:
            header = f.readline().strip().split(",")
            for line in f:
                cells = line.strip().split(",")
                row_kind = cells[0]
                if row_kind == "aggregate_mean":
                    label = cells[1]
                    means = [float(v) for v in cells[2:]]
                elif row_kind == "aggregate_std":
                    stds = [float(v) for v in cells[2:]]
        if means is None or stds is None:
            raise ConfigurationError(f"{path}: no aggregate rows found")
        rows.append((label or Path(run_dir).name, means, stds))

    table_rows = [
        [label] + [format_mean_std(100 * m, 100 * s) for m, s in zip(means, stds)]
        for label, means, stds in rows
    ]
    table = render_table(["Method", "Accuracy", "Precision", "Recall", "F1", "AUC"], table_rows)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        csv_lines = ["label," + ",".join(METRIC_NAMES) + "," + ",".join(f"{m}_std" for m in METRIC_NAMES)]
        for label, means, stds in rows:
            csv_lines.append(",".join([label] + [f"{v:.12f}" for v in means + stds]))
        (out / "report.csv").write_text("\n".join(csv_lines) + "\n")
        _write_manifest(out, argv, {"runs": list(args.runs)}, 0, None,
                        ["report.txt", "report.csv"])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="segprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=_int_pair, default=(3, 2),
                   help="videos per class as COM,CAP (default 3,2)")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--pretext-videos", type=int, default=2)
    p.add_argument("--config", default=None)

    p = sub.add_parser("pretrain", help="rotation-pretext pretrain the backbone")
    p.add_argument("--data", required=True, help="pretext dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)

    for name in ("train", "sweep"):
        p = sub.add_parser(name, help=f"{name} on a dataset with cross-validation")
        p.add_argument("--data", required=True)
        p.add_argument("--mode", default="segprompt",
                       help=f"one of: {', '.join(MODE_NAMES)}")
        p.add_argument("--ckpt", default=None, help="pretrained backbone checkpoint")
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--ls", type=int, default=16)
            p.add_argument("--ablate", choices=["no-r", "no-ze"], default=None)
        else:
            p.add_argument("--ls", type=_int_list, default=[25, 36, 49, 64, 81])
        p.add_argument("--le", type=int, default=2)
        p.add_argument("--lp", type=int, default=8, help="prompt tokens for vpt modes")
        p.add_argument("--degrade-dice", type=float, default=0.93,
                       help="emulated segmentation quality; 1.0 keeps masks exact")
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr", type=float, default=0.001)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--config", default=None)

    p = sub.add_parser("report", help="combine run reports into one table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    return parser


_COMMANDS = {
    "generate": _cmd_generate,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config_file(args, argv, sub)
        return _COMMANDS[args.command](args, argv)
    except (ConfigurationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
