"""Command-line entry point: ``m3s {synth,encode,train,evaluate,ablate,report}``.

Exit codes: 0 success, 2 bad input or configuration, 3 training divergence.
Errors are printed to stderr as ``<ErrorName>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergedLoss, InputError, InvalidConfig
from .experiment import TABLE_SCALE_SETS, ablation_grid, run_ablation, write_rows
from .gaf import encode, write_pgm
from .metrics import compute_metrics, confusion, count_flops, count_params, write_confusion_csv
from .model import M3SModel, TrainConfig, train
from .spectra import (
    DEFAULT_LENGTH,
    SynthConfig,
    load_dataset,
    patient_of,
    save_dataset,
    split_dataset,
    synth_generate,
)

log = logging.getLogger("m3s")


# -------------------------------------------------------------------- manifest

def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, command, argv, config, seed, inputs, outputs, started):
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "git": _git_describe(),
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------- helpers

def _int_list(text):
    try:
        return [int(v) for v in text.replace("+", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _train_config(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read {args.config} ({exc})", "config") from None
    overrides = {
        "seed": args.seed, "epochs": getattr(args, "epochs", None), "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None), "scales": getattr(args, "scales", None),
        "weights": getattr(args, "weights", None), "fixed_ratio": getattr(args, "ratio", None),
        "fusion": getattr(args, "fusion", None), "train_fraction": getattr(args, "train_fraction", None),
    }
    if overrides["scales"] is not None and overrides["scales"] != data.get("scales"):
        # kernel sizes are tied to the scales; rederive unless they still match
        data["kernel_sizes"] = None
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return TrainConfig.from_dict(data)


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    started = _now()
    config = SynthConfig.from_json(args.config) if args.config else SynthConfig().validate()
    seed = 1 if args.seed is None else args.seed
    dataset = synth_generate(config, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out, args.format)
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, "synth", sys.argv[1:], config.to_dict(), seed,
                   [args.config] if args.config else [], [out], started)
    print(f"wrote {len(dataset)} spectra to {out}")


def cmd_encode(args):
    started = _now()
    dataset = load_dataset(args.data, length=args.length)
    out = _out_dir(args.out)
    outputs = []
    for scale in args.scales:
        if args.format == "csv":
            path = out / f"gaf_{scale}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["id", "scale"] + [f"p{k}" for k in range(scale * scale)])
                for s in dataset:
                    writer.writerow([s.id, scale] + [repr(float(v)) for v in encode(s, scale).pixels.ravel()])
            outputs.append(path)
        else:
            sub = _out_dir(out / f"gaf_{scale}")
            for s in dataset:
                path = sub / f"{s.id}.pgm"
                write_pgm(encode(s, scale), path)
                outputs.append(path)
    write_manifest(out / "manifest.json", "encode", sys.argv[1:],
                   {"scales": args.scales, "format": args.format}, None, [args.data], outputs, started)
    print(f"encoded {len(dataset)} spectra at scales {args.scales} into {out}")


def cmd_train(args):
    started = _now()
    config = _train_config(args)
    dataset = load_dataset(args.data, length=args.length)
    train_set, test_set = split_dataset(dataset, config.train_fraction, config.seed,
                                        group_key=patient_of if args.group_by_patient else None)
    out = _out_dir(args.out)
    log_path = out / "loss_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc"], lineterminator="\n")
        writer.writeheader()

        def on_epoch(record):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in record.items()})
            fh.flush()
            if not args.quiet:
                print(f"epoch {record['epoch']:4d}  loss {record['loss']:.6f}  train_acc {record['train_acc']:.4f}")

        model = train(train_set, config, on_epoch=on_epoch)
    ckpt = out / "checkpoint.json"
    model.save(ckpt)
    split_path = out / "split.json"
    split_path.write_text(json.dumps({"train": train_set.ids, "test": test_set.ids,
                                      "group_by_patient": bool(args.group_by_patient)}))
    write_manifest(out / "manifest.json", "train", sys.argv[1:], config.to_dict(), config.seed,
                   [args.data] + ([args.config] if args.config else []), [ckpt, log_path, split_path], started)
    print(f"params {count_params(model)}  flops {count_flops(model)}  checkpoint {ckpt}")


def cmd_evaluate(args):
    started = _now()
    model = M3SModel.load(args.checkpoint)
    dataset = load_dataset(args.data, length=args.length)
    subset = dataset
    seed = model.config.seed if args.seed is None else args.seed
    if args.split != "all":
        train_set, test_set = split_dataset(dataset, model.config.train_fraction, seed,
                                            group_key=patient_of if args.group_by_patient else None)
        subset = train_set if args.split == "train" else test_set
    probs, preds = model.predict_dataset(subset)
    report = compute_metrics(confusion(preds, subset.labels()))
    report.params, report.flops = count_params(model), count_flops(model)
    out = _out_dir(args.out)
    metrics_path, cm_path, pred_path = out / "metrics.json", out / "confusion.csv", out / "predictions.csv"
    metrics_path.write_text(report.to_json())
    write_confusion_csv(report.confusion, cm_path)
    with open(pred_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "pred", "p_AMI", "p_CAD", "p_AF", "p_CON"])
        for s, p, row in zip(subset, preds, probs):
            writer.writerow([s.id, "NA" if s.label is None else s.label.name, ["AMI", "CAD", "AF", "CON"][p]]
                            + [repr(float(v)) for v in row])
    write_manifest(out / "evaluate_manifest.json", "evaluate", sys.argv[1:], {"split": args.split},
                   seed, [args.checkpoint, args.data], [metrics_path, cm_path, pred_path], started)
    print(report.table())


def _grid_from_args(args):
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read {args.grid} ({exc})", "grid") from None
        if isinstance(grid, list):
            return grid
        return ablation_grid(grid.get("scale_sets", TABLE_SCALE_SETS), grid.get("weights", ("fixed", "adaptive")),
                             grid.get("fusion", ("masked",)))
    return ablation_grid()


def cmd_ablate(args):
    started = _now()
    base = _train_config(args)
    dataset = load_dataset(args.data, length=args.length)
    cells = _grid_from_args(args)
    seeds = args.seeds or [1, 2, 3, 4, 5]

    def progress(cell, seed, report):
        if not args.quiet:
            print(f"{cell} seed {seed}: acc {report.accuracy:.4f}")

    rows = run_ablation(dataset, base, cells, seeds, progress)
    out = _out_dir(args.out)
    path = out / "ablation.csv"
    write_rows(rows, path)
    write_manifest(out / "manifest.json", "ablate", sys.argv[1:], {"base": base.to_dict(), "grid": cells},
                   seeds, [args.data] + ([args.grid] if args.grid else []), [path], started)
    print(f"wrote {len(rows)} rows to {path}")


def cmd_report(args):
    """Render figures for whatever a train/evaluate/ablate directory holds."""
    from . import plotting

    started = _now()
    run = Path(args.run)
    out = _out_dir(args.out or run)
    outputs, inputs = [], []
    summary = []
    if (run / "loss_log.csv").exists():
        with open(run / "loss_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        inputs.append(run / "loss_log.csv")
        if rows:
            outputs.append(plotting.plot_loss(rows, out / "loss.png"))
            summary.append({"item": "final_loss", "value": rows[-1]["loss"]})
            summary.append({"item": "epochs", "value": rows[-1]["epoch"]})
    if (run / "checkpoint.json").exists():
        model = M3SModel.load(run / "checkpoint.json")
        inputs.append(run / "checkpoint.json")
        outputs.append(plotting.plot_weight_matrix(model.weight.value, model.prob_matrix.entries,
                                                   out / "weight_matrix.png"))
        summary += [{"item": "params", "value": count_params(model)}, {"item": "flops", "value": count_flops(model)}]
        if model.log and not (run / "loss_log.csv").exists():
            outputs.append(plotting.plot_loss(model.log, out / "loss.png"))
    if (run / "confusion.csv").exists():
        with open(run / "confusion.csv") as fh:
            cm = np.array([[int(v) for v in row[1:]] for row in list(csv.reader(fh))[1:]])
        inputs.append(run / "confusion.csv")
        outputs.append(plotting.plot_confusion(cm, out / "confusion.png"))
        m = compute_metrics(cm)
        summary += [{"item": k, "value": repr(getattr(m, k))}
                    for k in ("accuracy", "precision", "recall", "specificity", "f1")]
    if (run / "ablation.csv").exists():
        with open(run / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        inputs.append(run / "ablation.csv")
        outputs.append(plotting.plot_ablation(rows, out / "ablation.png"))
        best = max(rows, key=lambda r: float(r["accuracy"]))
        summary.append({"item": "best_cell", "value": f"{best['scales']} {best['weights']} {best['fusion']}"})
    if not inputs:
        raise InvalidConfig(f"{run} holds no loss_log.csv, checkpoint.json, confusion.csv or ablation.csv", "run")
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["item", "value"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    outputs.append(summary_path)
    write_manifest(out / "report_manifest.json", "report", sys.argv[1:], {"run": str(run)}, None,
                   inputs, outputs, started)
    for path in outputs:
        print(path)


# --------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="dataset file (.csv or .json)")
    data.add_argument("--length", type=int, default=DEFAULT_LENGTH, help="points per spectrum")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--scales", type=_int_list, help="e.g. 32,64")
    training.add_argument("--weights", choices=["fixed", "adaptive"])
    training.add_argument("--ratio", type=float, help="spectral share of the fixed weight matrix")
    training.add_argument("--fusion", choices=["masked", "global", "none"])
    training.add_argument("--train-fraction", type=float)
    training.add_argument("--group-by-patient", action="store_true",
                          help="keep spectra of one patient (id prefix before the last '-') on one side")

    parser = argparse.ArgumentParser(prog="m3s", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.set_defaults(func=cmd_synth, out_required=True)

    p = sub.add_parser("encode", parents=[common, data], help="write GASF images")
    p.add_argument("--scales", type=_int_list, default=[32, 64])
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.set_defaults(func=cmd_encode, out_required=True)

    p = sub.add_parser("train", parents=[common, data, training], help="train a model")
    p.set_defaults(func=cmd_train, out_required=True)

    p = sub.add_parser("evaluate", parents=[common, data], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["all", "train", "test"], default="test")
    p.add_argument("--group-by-patient", action="store_true")
    p.set_defaults(func=cmd_evaluate, out_required=True)

    p = sub.add_parser("ablate", parents=[common, data, training], help="scale/weight/fusion grid")
    p.add_argument("--grid", help="JSON grid: list of cells or {scale_sets, weights, fusion}")
    p.add_argument("--seeds", type=_int_list, help="default 1,2,3,4,5")
    p.set_defaults(func=cmd_ablate, out_required=True)

    p = sub.add_parser("report", parents=[common], help="render figures and a summary table")
    p.add_argument("--run", required=True, help="directory written by train, evaluate or ablate")
    p.set_defaults(func=cmd_report, out_required=False)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.out_required and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        args.func(args)
    except DivergedLoss as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"FileNotFound: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
