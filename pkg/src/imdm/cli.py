"""Command-line harness.

Exit codes: 0 ok, 2 config or input error, 3 training abort, 4 capacity
error, 5 property-suite failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _accel, analysis, checkpoint, experiments, oracles, report
from .config import SEED_ENV, ConfigError, RunConfig
from .core import CapacityError, DomainError, Rng, TrainingAbort
from .distill import sdtt
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_CAPACITY, EXIT_PROPERTY = 0, 2, 3, 4, 5

log = logging.getLogger("imdm")


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig.default()


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg["output_dir"]) / cfg["name"] / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_run(out: Path, cfg: RunConfig, command: str, argv, inputs: dict[str, Path] | None = None) -> None:
    inputs = inputs or {}
    try:
        blobs = [Path(p).read_bytes() for p in inputs.values()]
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from exc
    (out / "config.snapshot.toml").write_text(cfg.snapshot())
    report.write_json(out / "run.json", {
        "command": command,
        "argv": list(argv),
        "seeds": cfg.seeds(),
        "input_hash": cfg.content_hash(*blobs),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "numba": _accel.HAVE_NUMBA,
    })


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_shape(params, cfg: RunConfig) -> None:
    ds = cfg.dataset()
    if (params.n_data, params.length) != (ds.n_data, ds.length):
        raise ConfigError("checkpoint does not match the configured data (n_data, length)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(args, cfg, "pretrain")
    _record_run(out, cfg, "pretrain", args.argv)
    dataset = cfg.dataset()
    params = experiments.as_kind(experiments.fresh_model(cfg, dataset), cfg["model"]["kind"], cfg)
    tc = cfg.train_config()
    if args.iterations is not None:
        tc = type(tc)(**{**tc.__dict__, "iterations": args.iterations})
    result = train(params, tc, dataset, cfg.schedule(), experiments.noise_for(params, cfg))
    checkpoint.save(result.params, out / "model.ckpt")
    report.write_csv(out / "loss.csv", ["iteration", "loss"], result.trace)
    ev = experiments.evaluate(result.params, cfg)
    curve = experiments.step_curve(result.params, cfg) if args.plots else None
    experiments.write_evaluation(out, ev, args.plots, curve, "Pretraining")
    if args.plots and result.trace:
        xs, ys = zip(*result.trace)
        (out / "loss.svg").write_text(report.svg_line_chart({"loss": (list(xs), list(ys))}, "Training loss", "iteration", "NELBO"))
    print(out)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(args, cfg, f"distill-{args.method}")
    _record_run(out, cfg, f"distill {args.method}", args.argv, {"teacher": Path(args.teacher)})
    teacher = experiments.as_kind(_load_ckpt(args.teacher), args.kind or cfg["model"]["kind"], cfg)
    _check_shape(teacher, cfg)
    spec = experiments.noise_for(teacher, cfg)
    extra = {}
    if args.method == "sdtt":
        student, history = sdtt(teacher, cfg.distill_config(), cfg.dataset(), cfg.schedule(), spec)
        extra["rounds"] = history
    elif args.method == "redi":
        student, coupling, trace = experiments.run_redi(teacher, cfg, Path(args.teacher).name)
        experiments.save_coupling(out / "coupling.jsonl", coupling)
        extra["redi_trace"] = trace
        extra["coupling_validity"] = analysis.validity(coupling.tokens) if len(coupling) else None
    else:
        student, stages = experiments.run_combined(teacher, cfg)
        extra["rounds"] = stages["sdtt_history"]
        extra["redi_trace"] = stages.get("redi_trace", [])
        if "coupling" in stages:
            experiments.save_coupling(out / "coupling.jsonl", stages["coupling"])
        checkpoint.save(stages["sdtt"], out / "sdtt_student.ckpt")
    checkpoint.save(student, out / "student.ckpt")
    report.write_json(out / "distill.json", extra)
    ev = experiments.evaluate(student, cfg)
    experiments.write_evaluation(out, ev, args.plots, experiments.step_curve(student, cfg) if args.plots else None, f"Distillation ({args.method})")
    print(out)
    return EXIT_OK


def _override_decode(cfg: RunConfig, args) -> RunConfig:
    decode = {}
    if getattr(args, "steps", None):
        decode["steps"] = args.steps
    if getattr(args, "n", None):
        decode["n_samples"] = args.n
    return cfg.with_overrides(decode=decode) if decode else cfg


def cmd_sample(args) -> int:
    cfg = _override_decode(_load_config(args), args)
    out = _run_dir(args, cfg, "sample")
    _record_run(out, cfg, "sample", args.argv, {"checkpoint": Path(args.checkpoint)})
    params = _load_ckpt(args.checkpoint)
    _check_shape(params, cfg)
    ev = experiments.evaluate(params, cfg)
    experiments.write_evaluation(out, ev, args.plots, experiments.step_curve(params, cfg) if args.plots else None, "Samples")
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _override_decode(_load_config(args), args)
    out = _run_dir(args, cfg, "eval")
    if args.random_baseline:
        _record_run(out, cfg, "eval", args.argv)
        params = None
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --random-baseline")
        _record_run(out, cfg, "eval", args.argv, {"checkpoint": Path(args.checkpoint)})
        params = _load_ckpt(args.checkpoint)
        _check_shape(params, cfg)
    ev = experiments.evaluate(params, cfg)
    experiments.write_evaluation(out, ev, args.plots, experiments.step_curve(params, cfg) if args.plots else None, "Evaluation")
    print(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _override_decode(_load_config(args), args)
    out = _run_dir(args, cfg, "analyze")
    _record_run(out, cfg, "analyze", args.argv, {"checkpoint": Path(args.checkpoint)})
    params = _load_ckpt(args.checkpoint)
    _check_shape(params, cfg)
    coupling = experiments.load_coupling(args.coupling) if args.coupling else None
    ev = experiments.evaluate(params, cfg, coupling=coupling)
    experiments.write_evaluation(out, ev, args.plots, experiments.step_curve(params, cfg) if args.plots else None, "Analysis")
    spec = experiments.noise_for(params, cfg)
    joint = analysis.onestep_model_joint(params, cfg["analysis"]["n_eps"], Rng(cfg.seed, experiments.S_FACT), spec)
    outcomes = [tuple(int(i) for i in np.unravel_index(k, joint.table.shape)) for k in range(joint.flat.size)]
    data = analysis.JointDist.from_dataset(cfg.dataset()).flat
    report.write_csv(out / "onestep_joint.csv", ["outcome", "model", "data"],
                     [("".join(map(str, o)), m, d) for o, m, d in zip(outcomes, joint.flat, data)])
    table, _ = experiments.probe(params, cfg)
    report.write_csv(out / "probe.csv", [f"p0_pos{i}" for i in range(params.length)], table.tolist())
    pair = analysis.find_switching_pair(table)
    with open(out / "report.md", "a") as fh:
        fh.write("\n## Full-mask per-token P(token = 0)\n\n")
        rows = [("mean", *table.mean(axis=0))]
        if pair is not None:
            rows += [("A", *table[pair[0]]), ("B", *table[pair[1]])]
        fh.write(report.markdown_table(["eps", *[f"pos {i}" for i in range(params.length)]], rows) + "\n")
    print(out)
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg["output_dir"]) / cfg["name"] / ("repro-quick" if args.quick else "repro")
    res = experiments.repro_synthetic(cfg, out, quick=args.quick, combined=not args.no_combined, plots=args.plots)
    for c in res["checks"]:
        print(experiments.summary_line(c))
    print(out)
    return EXIT_OK if all(c.passed for c in res["checks"]) else EXIT_PROPERTY


def cmd_oracle(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, "0") or 0)
    results = oracles.run_all(seed=seed, only=args.only)
    payload = {"seed": seed, "passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    text = experiments.dump_json(payload)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if payload["passed"] else EXIT_PROPERTY


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imdm", description="Masked and infinite-mask discrete diffusion laboratory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, plots=True):
        sp.add_argument("-c", "--config", help="TOML run config (defaults when omitted)")
        sp.add_argument("-o", "--out", help="run directory (default: <output_dir>/<name>/<command>)")
        if plots:
            sp.add_argument("--plots", action="store_true", help="also write SVG charts")

    sp = sub.add_parser("pretrain", help="train a model on the configured data")
    common(sp)
    sp.add_argument("--iterations", type=int, help="override train.iterations")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("distill", help="distill a teacher checkpoint")
    sp.add_argument("method", choices=["sdtt", "redi", "combined"])
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--kind", choices=["mdm", "imdm"], help="wrap an MDM teacher as IMDM before distilling")
    sp.set_defaults(func=cmd_distill)

    for name, func, helptext in (("sample", cmd_sample, "decode samples"), ("eval", cmd_eval, "decode and score samples"),
                                 ("analyze", cmd_analyze, "factorization error, bound and per-token probe")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=name != "eval")
        sp.add_argument("--steps", type=int, help="override decode.steps")
        sp.add_argument("--n", type=int, help="override decode.n_samples")
        if name == "eval":
            sp.add_argument("--random-baseline", action="store_true", help="score uniform random sequences")
        if name == "analyze":
            sp.add_argument("--coupling", help="coupling file whose noise is reused when analysis.reuse_coupling_eps is set")
        sp.set_defaults(func=func)

    sp = sub.add_parser("repro-synthetic", help="full synthetic reproduction bundle")
    common(sp)
    sp.add_argument("--quick", action="store_true", help="500 samples, 1000 eps, short budgets, wider tolerances")
    sp.add_argument("--no-combined", action="store_true", help="skip the SDTT + ReDi pipeline")
    sp.set_defaults(func=cmd_repro)

    sp = sub.add_parser("oracle", help="run the property suites")
    sp.add_argument("--seed", type=int, help=f"suite seed (default: ${SEED_ENV} or 0)")
    sp.add_argument("--only", nargs="+", choices=sorted(oracles.SUITES))
    sp.add_argument("-o", "--out", help="write the JSON report here as well")
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
