"""Command-line front end.

Subcommands: ``fit``, ``predict``, ``bifurcation``, ``newton-bench``,
``multistep`` and ``simulate``.  Outputs are CSV for per-step series and JSON
for metadata.  Each file records the config hash and the format version.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 partial batch
failure.  ``KOOPMAN_LOG`` (error, warn, info, debug) sets the log level.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dynamics import IntegrationError
from .edmd import FORMAT_VERSION, ModelFormatError, atomic_write_text, dumps_canonical, load_model, save_model
from .experiments import (
    ConfigError,
    RunConfig,
    bifurcation_table,
    fit_pipeline,
    multistep_runs,
    newton_bench,
    run_predictions,
    simulate,
)

log = logging.getLogger("koopman_reproj")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("KOOPMAN_LOG", "warn").lower()
    level = _LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if name not in _LEVELS:
        log.warning("unknown KOOPMAN_LOG value %r, using warn", name)


def _num(v) -> str:
    v = float(v)
    return "nan" if v != v else format(v, ".17g")


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "format_version": FORMAT_VERSION}


def _csv(cfg: RunConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.config_hash} format_version={FORMAT_VERSION}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else _num(v) for v in row) + "\n")
    return buf.getvalue()


def _json(cfg: RunConfig, body: dict) -> str:
    return dumps_canonical({**_stamp(cfg), **body}) + "\n"


def _model_and_q(cfg: RunConfig, args):
    if args.model and Path(args.model).exists():
        model, Q = load_model(args.model)
        return model, Q
    if args.model:
        raise ConfigError(f"model file {args.model} does not exist", "--model")
    log.info("no model file given; fitting from the config")
    fr = fit_pipeline(cfg)
    return fr.model, fr.Q


# --- subcommands -------------------------------------------------------------


def cmd_fit(cfg: RunConfig, args, out: Path) -> int:
    fr = fit_pipeline(cfg)
    path = Path(args.model) if args.model else out / "model.json"
    save_model(fr.model, fr.Q, path, extra={**_stamp(cfg), "config": cfg.to_json(), "diagnostics": fr.diagnostics})
    atomic_write_text(out / "fit_summary.json", _json(cfg, {"model_file": path.name, "diagnostics": fr.diagnostics}))
    d = fr.diagnostics
    cond = d["gram_condition"]
    print(
        f"fitted {d['system']}: M={d['M']} m={d['m']} N={d['n_samples']} "
        f"residual_rms={d['residual_rms']:.3e} condition={'singular' if cond is None else format(cond, '.3e')}"
    )
    print(f"model written to {path}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args, out: Path) -> int:
    model, Q = _model_and_q(cfg, args)
    records = run_predictions(cfg, model, Q, args.threads)
    tdir = out / "traces"
    for rec in records:
        if rec.error is None:
            tr = rec.trace
            cols = tr.csv_columns() + ["error"]
            err = rec.errors
            rows = []
            for line, k in zip(tr.to_csv().splitlines()[1:], range(tr.n_steps + 1)):
                e = err[k] if k < len(err) else float("nan")
                rows.append(line.split(",") + [_num(e)])
            atomic_write_text(tdir / f"{rec.name}.csv", _csv(cfg, cols, rows))
            atomic_write_text(tdir / f"{rec.name}.json", _json(cfg, {"run": rec.name, **tr.metadata()}))
    summary = [rec.summary() for rec in records]
    failed = sum(r.error is not None for r in records)
    atomic_write_text(out / "predict_summary.json", _json(cfg, {"runs": summary, "failed": failed}))
    for s in summary:
        if s["status"] == "ok":
            te = s["terminal_error"]
            print(f"{s['name']:40s} terminal_error={'n/a' if te is None else format(te, '.3e')} reprojections={s['reprojections']}")
        else:
            print(f"{s['name']:40s} FAILED {s['error']}")
    if failed == len(records) and records:
        return EXIT_NUMERIC
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_bifurcation(cfg: RunConfig, args, out: Path) -> int:
    model, Q = _model_and_q(cfg, args)
    table = bifurcation_table(cfg, model, Q)
    labels = [p.label for p in cfg.predictors]
    rows = []
    for p, maps, truth in table["rows"]:
        for i, x in enumerate(table["x"]):
            rows.append([*p, x, *(maps[lab][i] for lab in labels), truth[i]])
    cols = [f"p{j + 1}" for j in range(model.m)] + ["x"] + labels + ["truth"]
    atomic_write_text(out / "bifurcation.csv", _csv(cfg, cols, rows))
    print(f"{len(rows)} rows written to {out / 'bifurcation.csv'}")
    return EXIT_OK


def cmd_newton_bench(cfg: RunConfig, args, out: Path) -> int:
    model, Q = _model_and_q(cfg, args)
    res = newton_bench(cfg, model, Q)
    rows = []
    for cp in res["checkpoints"]:
        for kind in ("warm", "cold"):
            for it, v in enumerate(cp[kind]):
                rows.append([str(cp["step"]), kind, str(it + 1), v])
    atomic_write_text(out / "newton_bench.csv", _csv(cfg, ["step", "start", "iteration", "step_norm"], rows))
    body = {
        "p": res["p"].tolist(),
        "x0": res["x0"].tolist(),
        "cold_start": res["cold_start"].tolist(),
        "checkpoints": [
            {
                "step": cp["step"],
                "warm_iterations": len(cp["warm"]),
                "warm_converged": cp["warm_converged"],
                "cold_iterations": len(cp["cold"]),
                "cold_converged": cp["cold_converged"],
            }
            for cp in res["checkpoints"]
        ],
    }
    atomic_write_text(out / "newton_bench.json", _json(cfg, body))
    for cp in body["checkpoints"]:
        print(f"step {cp['step']:5d}: warm {cp['warm_iterations']} iterations, cold {cp['cold_iterations']} iterations")
    ok = all(cp["warm_converged"] for cp in body["checkpoints"])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_multistep(cfg: RunConfig, args, out: Path) -> int:
    model, Q = _model_and_q(cfg, args)
    if Q is None:
        raise ConfigError("multistep prediction needs a model file with a covariance surrogate", "--model")
    runs = multistep_runs(cfg, model, Q)
    summary = []
    for r in runs:
        tr = r["trace"]
        name = f"adaptive_{r['factor']:g}"
        cols = tr.csv_columns() + ["error"]
        rows = []
        for line, k in zip(tr.to_csv().splitlines()[1:], range(tr.n_steps + 1)):
            e = r["errors"][k] if k < len(r["errors"]) else float("nan")
            rows.append(line.split(",") + [_num(e)])
        atomic_write_text(out / "multistep" / f"{name}.csv", _csv(cfg, cols, rows))
        iv = r["intervals"]
        summary.append(
            {
                "factor": r["factor"],
                "intervals": iv,
                "typical_interval": int(np.median(iv)) if iv else None,
                "reprojections": int(tr.reprojected.sum()),
            }
        )
        print(f"factor {r['factor']:g}: reprojection intervals {iv[:8]}{' ...' if len(iv) > 8 else ''}")
    atomic_write_text(out / "multistep_summary.json", _json(cfg, {"runs": summary}))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args, out: Path) -> int:
    sims = simulate(cfg)
    partial = False
    for s in sims:
        xs = s["x"]
        cols = ["k", "time"] + [f"x{j + 1}" for j in range(xs.shape[1])]
        rows = [[str(k), k * cfg.t, *xs[k]] for k in range(xs.shape[0])]
        atomic_write_text(out / "truth" / f"{s['name']}.csv", _csv(cfg, cols, rows))
        if s["diagnostic"]:
            partial = True
            print(f"{s['name']}: truncated ({s['diagnostic']})")
    print(f"{len(sims)} trajectories written to {out / 'truth'}")
    return EXIT_PARTIAL if partial else EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bifurcation": cmd_bifurcation,
    "newton-bench": cmd_newton_bench,
    "multistep": cmd_multistep,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopman-reproj", description="Parametric Koopman models with reprojection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--model", help="model file to write (fit) or read (other commands)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="sampling seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="parallel runs within a batch")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("must be at least 1", "--threads")
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "config.json", cfg.dumps())
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ModelFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, IntegrationError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
