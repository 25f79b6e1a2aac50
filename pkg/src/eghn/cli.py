"""Command-line entry point: ``python -m eghn <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import SPLITS, SchemaError, load_dataset, load_meta, load_split, make_dataset
from .io import ConfigError, build_run_config, lint_svg, load_config_file, loss_curve_svg, scatter_svg
from .pooling import hard_assignment
from .training import NumericError, RunRecord, cluster_purity, evaluate_checkpoint, load_model, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _counts(text: str) -> dict:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--counts expects train,val,test")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--counts must be integers, got {text!r}") from None
    return dict(zip(SPLITS, vals))


def _int_list(text: str) -> list:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eghn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate an M-complex dataset")
    g.add_argument("--m", type=int, required=True, help="complexes per system")
    g.add_argument("--avg-size", type=float, required=True, help="average particles per complex")
    g.add_argument("--j", type=int, default=1, help="distinct system topologies")
    g.add_argument("--t", type=int, default=1500, help="integration steps to the target")
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--counts", type=_counts, default=_counts("500,100,100"), help="train,val,test")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit a model and write checkpoint + run record")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--preset")
    t.add_argument("--model-kind", dest="model_kind", choices=("eghn", "egnn-baseline", "linear"))
    t.add_argument("--variant")
    t.add_argument("--seeds", type=_int_list)
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--clusters", type=_int_list, help="cluster count per level, e.g. 3 or 6,3")
    t.add_argument("--patience", type=int)
    t.add_argument("--grad-clip", dest="grad_clip", type=float, help="gradient-norm cap, 0 disables")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="position MSE of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", help="write the result as JSON here")

    r = sub.add_parser("pooling-report", help="per-node cluster ids and score matrices")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", choices=SPLITS, default="test")
    r.add_argument("--out", required=True)

    x = sub.add_parser("plot-export", help="SVG figures from a run record and/or a pooling report")
    x.add_argument("--record", help="run record JSON")
    x.add_argument("--report", help="pooling report JSON")
    x.add_argument("--dataset", help="dataset directory (needed with --report)")
    x.add_argument("--sample", type=int, default=0, help="which report entry to draw")
    x.add_argument("--out", required=True, help="output directory")
    return p


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    man = make_dataset(args.out, args.m, args.avg_size, args.j, args.counts, args.t, args.dt, args.seed)
    print(f"wrote {sum(man['counts'].values())} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_vals = load_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in ("dataset", "out", "preset", "model_kind", "variant", "seeds",
                                           "epochs", "hidden", "lr", "lam", "weight_decay", "batch_size",
                                           "clusters", "patience", "grad_clip")}
    run = build_run_config(file_vals, flags)
    if run.dataset is None:
        raise ConfigError("no dataset given (--dataset or 'dataset' in the config file)")
    data = load_dataset(run.dataset)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    for seed in run.seeds:
        stem = f"{run.model_kind}-{run.variant}-seed{seed}"
        ckpt = out / f"{stem}.ckpt.json" if run.model_kind != "linear" else None
        rec, _ = train(run.model_kind, run.model, data, seed=seed, variant=run.variant, log=log,
                       checkpoint_path=ckpt)
        rec.save(out / f"{stem}.record.json")
        rec.write_loss_csv(out / f"{stem}.loss.csv")
        print(f"{stem}: test MSE {rec.test_mse * 100:.4f} x1e-2")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = load_split(args.dataset, args.split)
    mse, per_node = evaluate_checkpoint(args.checkpoint, samples)
    print(f"{args.split} MSE {mse * 100:.4f} x1e-2")
    if args.out:
        doc = {"split": args.split, "mse": mse, "per_node_error": [e.tolist() for e in per_node]}
        Path(args.out).write_text(json.dumps(doc) + "\n")
    return EXIT_OK


def pooling_report(model, samples, metas=None) -> list[dict]:
    """Per sample: hard cluster id and score row for every node of the final E-Pool."""
    if model.cfg.levels == 0:
        raise ConfigError("checkpoint has no pooling layer")
    _, scores = predict(model, samples)
    out = []
    for k, sc in enumerate(scores):
        S = sc[-1]
        a = hard_assignment(S)
        entry = {"sample": k, "cluster": a.tolist(), "S": S.tolist()}
        if metas is not None:
            entry["purity"] = cluster_purity(a, metas[k]["membership"])
        out.append(entry)
    return out


def cmd_pooling_report(args) -> int:
    model = load_model(args.checkpoint)
    samples = load_split(args.dataset, args.split)
    metas = load_meta(args.dataset, args.split)
    rows = pooling_report(model, samples, metas)
    doc = {"split": args.split, "mean_purity": float(np.mean([r["purity"] for r in rows])), "samples": rows}
    Path(args.out).write_text(json.dumps(doc) + "\n")
    print(f"mean purity {doc['mean_purity']:.4f} over {len(rows)} samples")
    return EXIT_OK


def cmd_plot_export(args) -> int:
    if not args.record and not args.report:
        raise ConfigError("plot-export needs --record and/or --report")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.record:
        rec = RunRecord.load(args.record)
        svg = loss_curve_svg({"train loss": rec.train_loss, "val MSE": rec.val_mse},
                             title=f"{rec.model_kind} {rec.variant} seed {rec.seed}")
        written.append((out / "loss_curve.svg", svg))
    if args.report:
        if not args.dataset:
            raise ConfigError("--report needs --dataset for node positions")
        doc = json.loads(Path(args.report).read_text())
        try:
            entry = doc["samples"][args.sample]
        except (KeyError, IndexError):
            raise SchemaError(f"report has no sample {args.sample}") from None
        sample = load_split(args.dataset, doc.get("split", "test"))[entry["sample"]]
        svg = scatter_svg(sample.positions, entry["cluster"], sample.sticks.tolist(),
                          title=f"pooling, sample {entry['sample']}")
        written.append((out / "pooling_scatter.svg", svg))
    for path, svg in written:
        problems = lint_svg(svg)
        if problems:
            raise RuntimeError(f"generated malformed SVG {path}: {problems}")
        path.write_text(svg)
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "pooling-report": cmd_pooling_report,
    "plot-export": cmd_plot_export,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as stop:
        return int(stop.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, json.JSONDecodeError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # remaining validation failures come from the data (shapes, degenerate inputs)
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
