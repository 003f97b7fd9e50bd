"""``minlp-l2o`` command line: generate, train, eval, bench."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import baselines as bl
from . import correction as cr
from . import problems as pb
from . import projection as pj
from . import training as tr

log = logging.getLogger("minlp_l2o")

FAMILY_FLAGS = {"iqp": "IQP", "inp": "INP", "mirb": "MIRB", "rb2d": "ROSENBROCK2D"}


class CliError(Exception):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def run_generate(args) -> None:
    coeffs = pb.build_family(FAMILY_FLAGS[args.problem], args.n, args.m, args.seed)
    out = _out_dir(args.out)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    man = art.manifest("generate", coeffs, {"seed": args.seed}, counts)
    streams = {"train": pb.STREAM_TRAIN, "val": pb.STREAM_VAL, "test": pb.STREAM_TEST}
    try:
        art.write_coeffs(out / art.COEFFS_FILE, coeffs, man)
        for name, count in counts.items():
            xi = pb.sample_instances(coeffs, count, args.seed, streams[name])
            art.write_split(out / f"{name}.milo", name, xi, man)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    log.info("wrote %s dataset to %s", coeffs.family, out)


def _correction_config(method: str, args, training: bool = False) -> cr.CorrectionConfig:
    return cr.CorrectionConfig(method.upper(), args.tau, args.beta, noise=training and method.upper() == cr.RC)


def run_train(args) -> None:
    coeffs, splits = art.load_data_dir(args.data)
    if "train" not in splits or "val" not in splits:
        raise CliError(f"{args.data} lacks train/val splits")
    method = args.method.upper()
    dataset = tr.Dataset(splits["train"], splits["val"], splits.get("test", np.zeros((0, coeffs.n_xi))))
    tconf = tr.TrainingConfig(lam=args.lam, lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                              patience=args.patience, seed=args.seed)
    models = tr.build_models(coeffs, method, args.seed, args.width)
    config = _correction_config(method, args, training=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    best, history = tr.train(coeffs, dataset, models, config, tconf,
                             log=lambda h: log.info("epoch %d train %.6g val %.6g",
                                                    h["epoch"], h["train_loss"], h["val_loss"]))
    out = _out_dir(args.out)
    settings = {"lambda": args.lam, "lr": args.lr, "batch": args.batch, "epochs": args.epochs,
                "patience": args.patience, "width": best.pi.spec.widths[1], "tau": args.tau,
                "beta": args.beta}
    man = art.manifest("train", coeffs, {"seed": args.seed}, settings)
    art.write_weights(out / "weights.milo", best, man, {"tau": args.tau, "beta": args.beta})
    art.write_json(out / "history.json", {
        "manifest": man,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "history": history,
    })


def _load_model(path, coeffs: pb.CoefficientSet) -> tuple[tr.ModelWeights, dict]:
    if not Path(path).exists():
        raise CliError(f"weights file {path} not found")
    models, meta = art.read_weights(path)
    if models.pi.spec.widths[0] != coeffs.n_xi or models.pi.spec.widths[-1] != coeffs.n_x:
        raise CliError("weights do not match the dataset dimensions")
    return models, meta


def _write_instances(path, metrics: tr.Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "obj", "violation", "time_s", "proj_iters"])
        for r in metrics.instances:
            w.writerow([r.idx, repr(r.obj), repr(r.violation), repr(r.time_s), r.proj_iters])


def _write_heatmap(path, heat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"g{j}" for j in range(heat.shape[1])])
        for row in heat:
            w.writerow([repr(float(v)) for v in row])


def run_eval(args) -> None:
    coeffs, splits = art.load_data_dir(args.data)
    if "test" not in splits or len(splits["test"]) == 0:
        raise CliError(f"{args.data} has no test split")
    models, meta = _load_model(args.weights, coeffs)
    method = (args.method or meta["method"]).upper()
    if method != models.method:
        raise CliError(f"weights were trained for {models.method}, not {method}")
    config = cr.CorrectionConfig(method, meta.get("tau", 1.0), meta.get("beta", 10.0))
    pconf = None
    if args.project == "on":
        pconf = pj.ProjectionConfig(args.proj_step, args.proj_max_iter, args.tol)
    try:
        metrics = tr.evaluate(coeffs, splits["test"], models, config, args.tol, pconf)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args.out)
    art.write_json(out / "metrics.json", metrics.to_json())
    _write_instances(out / "instances.csv", metrics)
    _write_heatmap(out / "heatmap.csv", metrics.heatmap)


def _bench_method(name: str, coeffs, xi, models_dir, tol) -> tr.Metrics:
    if name == "rr":
        start = time.perf_counter()
        sols = bl.rr_baseline(coeffs, xi)
        per = (time.perf_counter() - start) / len(xi)
        return tr.metrics_from_solutions(coeffs, xi, sols, "RR", tol, np.full(len(xi), per))
    if name == "oracle":
        start = time.perf_counter()
        results = bl.brute_force_oracle(coeffs, xi)
        per = (time.perf_counter() - start) / len(xi)
        if not all(r.found for r in results):
            missing = sum(not r.found for r in results)
            raise CliError(f"oracle found no feasible point for {missing} instances")
        sols = np.stack([r.x for r in results])
        return tr.metrics_from_solutions(coeffs, xi, sols, "ORACLE", tol, np.full(len(xi), per))
    base, _, suffix = name.partition("-")
    if base not in ("rc", "lt", "rs", "rl") or suffix not in ("", "p"):
        raise CliError(f"unknown method {name!r}")
    if models_dir is None:
        raise CliError("--models is required for learned methods")
    models, meta = _load_model(Path(models_dir) / base / "weights.milo", coeffs)
    config = cr.CorrectionConfig(base.upper(), meta.get("tau", 1.0), meta.get("beta", 10.0))
    pconf = pj.ProjectionConfig(tol=tol) if suffix == "p" else None
    return tr.evaluate(coeffs, xi, models, config, tol, pconf)


def _table(rows: list[dict]) -> str:
    head = f"{'method':<8} {'obj_mean':>12} {'obj_median':>12} {'feasible':>9} {'time_s':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['method']:<8} error: {r['error']}")
        else:
            lines.append(f"{r['method']:<8} {r['obj_mean']:>12.4f} {r['obj_median']:>12.4f} "
                         f"{100 * r['feasible_frac']:>8.1f}% {r['mean_time_s']:>10.5f}")
    return "\n".join(lines) + "\n"


def run_bench(args) -> int:
    coeffs, splits = art.load_data_dir(args.data)
    if "test" not in splits:
        raise CliError(f"{args.data} has no test split")
    xi = splits["test"]
    rows = []
    for name in [m.strip().lower() for m in args.methods.split(",") if m.strip()]:
        try:
            m = _bench_method(name, coeffs, xi, args.models, args.tol)
            row = m.to_json()
            row.pop("instances")
            row.pop("pre_projection", None)
            row["method"] = name.upper()
        except (CliError, ValueError, RuntimeError, OSError) as exc:
            row = {"method": name.upper(), "error": str(exc)}
        rows.append(row)
    out = _out_dir(args.out)
    report = {"manifest": art.manifest("bench", coeffs, config={"methods": args.methods}), "rows": rows}
    art.write_json(out / "report.json", report)
    (out / "report.txt").write_text(_table(rows))
    sys.stdout.write(_table(rows))
    return 1 if any("error" in r for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minlp-l2o", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample coefficients and instance splits")
    g.add_argument("--problem", choices=sorted(FAMILY_FLAGS), required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--m", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=8000)
    g.add_argument("--val", type=int, default=1000)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a solution mapping and correction layer")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=["rc", "lt", "rs", "rl"], required=True)
    t.add_argument("--lambda", dest="lam", type=float, default=100.0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--width", type=int, default=None, help="hidden width (default: sized to the problem)")
    t.add_argument("--tau", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=10.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate trained weights on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--method", choices=["rc", "lt", "rs", "rl"], default=None)
    e.add_argument("--project", choices=["on", "off"], default="off")
    e.add_argument("--proj-step", type=float, default=0.01)
    e.add_argument("--proj-max-iter", type=int, default=1000)
    e.add_argument("--tol", type=float, default=1e-6)
    e.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="compare methods on the test split")
    b.add_argument("--data", required=True)
    b.add_argument("--methods", default="rc,lt,rr,oracle")
    b.add_argument("--models", default=None, help="directory holding <method>/weights.milo")
    b.add_argument("--tol", type=float, default=1e-6)
    b.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    commands = {"generate": run_generate, "train": run_train, "eval": run_eval, "bench": run_bench}
    try:
        code = commands[args.command](args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"minlp-l2o {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
