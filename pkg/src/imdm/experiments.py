"""End-to-end stages shared by the CLI: pretraining, distillation, evaluation and the synthetic bundle."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel, analysis, checkpoint, report
from .config import RunConfig, validate_metrics
from .core import Rng
from .denoiser import IMDM, DenoiserParams, NoiseSpec, init_params, to_imdm
from .distill import CouplingSet, combined_pipeline, redi_build_coupling, redi_train
from .sampler import DecodeConfig, decode_arrays
from .training import DatasetSpec, train

log = logging.getLogger(__name__)

# stream ids, one per consumer of randomness
S_INIT, S_WRAP, S_COUPLING, S_DECODE, S_FACT, S_PROBE, S_BASELINE = 0x1517, 0x3A9, 0xC0C0, 0x5A4D, 0xFAC7, 0x9B0E, 0xBA5E

REFERENCE = {
    "mdm": {"validity": 0.498, "token_entropy_nats": 0.69, "fact_error_nats": 0.693},
    "imdm": {"validity": 0.977, "token_entropy_nats": 0.69, "fact_error_nats": 0.082},
    "random": {"validity": 0.500, "token_entropy_nats": 0.69},
}


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def fresh_model(cfg: RunConfig, dataset: DatasetSpec) -> DenoiserParams:
    m = cfg["model"]
    return init_params(dataset.n_data, dataset.length, Rng(cfg.seed, S_INIT), m["d_model"], m["width"])


def as_kind(params: DenoiserParams, kind: str, cfg: RunConfig) -> DenoiserParams:
    """MDM weights wrapped as IMDM when asked; IMDM weights are used as they are."""
    if kind == IMDM and params.kind != IMDM:
        return to_imdm(params, cfg.noise_spec(), Rng(cfg.seed, S_WRAP))
    return params


def noise_for(params: DenoiserParams, cfg: RunConfig) -> NoiseSpec | None:
    return cfg.noise_spec() if params.kind == IMDM else None


def pretrain(cfg: RunConfig, iterations: int | None = None):
    dataset = cfg.dataset()
    init = fresh_model(cfg, dataset)
    tc = cfg.train_config()
    if iterations is not None:
        tc = type(tc)(**{**tc.__dict__, "iterations": iterations})
    result = train(init, tc, dataset, cfg.schedule())
    return init, result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    metrics: dict
    samples: np.ndarray
    extras: dict = field(default_factory=dict)


def sample(params: DenoiserParams, cfg: RunConfig, steps: int, n: int, stream: int = S_DECODE) -> np.ndarray:
    mode = "imdm" if params.kind == IMDM else "mdm"
    dc = DecodeConfig(steps, mode, params.length, cfg.conditioning(), cfg.seed)
    root = Rng(cfg.seed, stream)
    return decode_arrays(params, dc, [root.split(i) for i in range(n)], cfg.schedule(), noise_for(params, cfg)).tokens


def random_samples(dataset: DatasetSpec, n: int, seed: int) -> np.ndarray:
    return Rng(seed, S_BASELINE).gen.integers(0, dataset.n_data, size=(n, dataset.length))


def evaluate(
    params: DenoiserParams | None,
    cfg: RunConfig,
    steps: int | None = None,
    n_samples: int | None = None,
    n_eps: int | None = None,
    coupling: CouplingSet | None = None,
) -> Evaluation:
    """Samples plus the standard metric record; ``params=None`` is the uniform random baseline."""
    dataset = cfg.dataset()
    steps = steps or cfg["decode"]["steps"]
    n_samples = n_samples or cfg["decode"]["n_samples"]
    n_eps = n_eps or cfg["analysis"]["n_eps"]
    a = cfg["analysis"]
    bound = analysis.thm1_lower_bound(dataset, cfg.schedule(), a["bound_s"], a["bound_t"])[0] if dataset.length > 1 else 0.0
    if params is None:
        rows = random_samples(dataset, n_samples, cfg.seed)
        fact, used_eps = None, 0
    else:
        rows = sample(params, cfg, steps, n_samples)
        data_joint = analysis.JointDist.from_dataset(dataset)
        eps = None
        if params.kind == IMDM and a["reuse_coupling_eps"] and coupling is not None and len(coupling):
            eps = coupling.noise[:n_eps]
        fact = analysis.factorization_error(params, data_joint, n_eps, Rng(cfg.seed, S_FACT), noise_for(params, cfg), eps=eps)
        used_eps = (n_eps if eps is None else len(eps)) if params.kind == IMDM else 1
    metrics = {
        "validity": analysis.validity(rows),
        "token_entropy_nats": analysis.token_entropy(rows),
        "fact_error_nats": fact,
        "thm1_bound_nats": bound,
        "n_samples": int(n_samples),
        "n_eps": int(used_eps),
        "steps": int(steps),
        "seed": int(cfg.seed),
        "model_kind": "random" if params is None else params.kind,
    }
    return Evaluation(metrics, rows)


def probe(params: DenoiserParams, cfg: RunConfig, n_eps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token P(0) table over eps draws and the draws themselves."""
    n_eps = n_eps or cfg["analysis"]["probe_eps"]
    spec = cfg.noise_spec()
    eps = spec.sample(Rng(cfg.seed, S_PROBE).gen, (n_eps, params.length))
    return analysis.per_token_probe(params, eps, noise_spec=spec), eps


def step_curve(params: DenoiserParams | None, cfg: RunConfig, n_samples: int | None = None) -> list[dict]:
    n_samples = n_samples or cfg["decode"]["n_samples"]
    rows = []
    for steps in cfg["decode"]["curve_steps"]:
        out = random_samples(cfg.dataset(), n_samples, cfg.seed) if params is None else sample(params, cfg, steps, n_samples)
        rows.append({"steps": steps, "validity": analysis.validity(out), "token_entropy_nats": analysis.token_entropy(out)})
    return rows


def write_evaluation(out: Path, ev: Evaluation, plots: bool = False, curve: list[dict] | None = None, title: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    validate_metrics(report._jsonable(ev.metrics))
    report.write_json(out / "metrics.json", ev.metrics)
    report.write_jsonl(
        out / "samples.jsonl",
        ({"tokens": row.tolist(), "steps": ev.metrics["steps"], "seed": ev.metrics["seed"], "stream": i} for i, row in enumerate(ev.samples)),
    )
    lines = [f"# {title or 'Evaluation'}", "", report.markdown_table(["metric", "value"], [(k, v) for k, v in ev.metrics.items()])]
    if curve:
        report.write_csv(out / "curve.csv", ["steps", "validity", "token_entropy_nats"], [(r["steps"], r["validity"], r["token_entropy_nats"]) for r in curve])
        lines += ["", "## By number of decoding steps", "", report.markdown_table(["steps", "validity", "token entropy"], [(r["steps"], r["validity"], r["token_entropy_nats"]) for r in curve])]
        if plots:
            xs = [r["steps"] for r in curve]
            svg = report.svg_line_chart(
                {"validity": (xs, [r["validity"] for r in curve]), "token entropy": (xs, [r["token_entropy_nats"] for r in curve])},
                "Metrics by decoding steps", "steps", "value",
            )
            (out / "plots.svg").write_text(svg)
    (out / "report.md").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# coupling persistence
# ---------------------------------------------------------------------------


def save_coupling(path, coupling: CouplingSet) -> None:
    header = {
        "kind": "coupling",
        "teacher_id": coupling.teacher_id,
        "steps": coupling.steps,
        "seed": coupling.seed,
        "rule": coupling.rule,
        "noise_dim": None if coupling.noise is None else int(coupling.noise.shape[-1]),
        "length": int(coupling.tokens.shape[1]),
    }
    rows = [header]
    for i, toks in enumerate(coupling.tokens):
        row = {"tokens": toks.tolist()}
        if coupling.noise is not None:
            row["noise"] = coupling.noise[i].tolist()
        rows.append(row)
    report.write_jsonl(path, rows)


def load_coupling(path) -> CouplingSet:
    rows = report.read_jsonl(path)
    if not rows or rows[0].get("kind") != "coupling":
        raise ValueError(f"{path} is not a coupling file")
    head, body = rows[0], rows[1:]
    tokens = np.array([r["tokens"] for r in body], dtype=np.int64).reshape(len(body), head["length"])
    noise = None
    if head["noise_dim"] is not None:
        noise = np.array([r["noise"] for r in body], dtype=np.float64).reshape(len(body), head["length"], head["noise_dim"])
    return CouplingSet(tokens, noise, head["teacher_id"], head["steps"], head["seed"], head["rule"])


# ---------------------------------------------------------------------------
# distillation stages
# ---------------------------------------------------------------------------


def run_redi(teacher: DenoiserParams, cfg: RunConfig, teacher_id: str = "teacher"):
    d = cfg.distill_config()
    spec = noise_for(teacher, cfg)
    coupling = redi_build_coupling(
        teacher, d.coupling_steps, d.coupling_size, Rng(cfg.seed, S_COUPLING), cfg.schedule(), spec,
        rule=d.coupling_rule, teacher_id=teacher_id,
    )
    result = redi_train(teacher, coupling, cfg.redi_train_config(), cfg.schedule(), spec)
    return result.params, coupling, result.trace


def run_combined(base: DenoiserParams, cfg: RunConfig):
    return combined_pipeline(
        base, cfg.distill_config(), cfg.dataset(), cfg.schedule(), noise_for(base, cfg),
        redi_train_config=cfg.redi_train_config(), seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# synthetic reproduction bundle
# ---------------------------------------------------------------------------

QUICK_OVERRIDES = {
    "train": {"iterations": 4000},
    "distill": {"coupling_size": 4000, "redi_iterations": 4000, "rounds": 1, "iterations_per_round": 300},
    "decode": {"n_samples": 500},
    "analysis": {"n_eps": 1000, "probe_eps": 500},
}

FULL_TOL = {
    "mdm_validity": (0.47, 0.53),
    "imdm_validity_min": 0.95,
    "entropy": (0.67, 0.70),
    "mdm_error": (0.673, 0.713),
    "imdm_error_max": 0.15,
    "probe_marginal": (0.45, 0.55),
    "combined_slack": 0.02,
}

# 500 samples: binomial sd ~0.022 on validity; shorter training budgets
QUICK_TOL = {
    "mdm_validity": (0.43, 0.57),
    "imdm_validity_min": 0.85,
    "entropy": (0.64, 0.70),
    "mdm_error": (0.65, 0.75),
    "imdm_error_max": 0.35,
    "probe_marginal": (0.40, 0.60),
    "combined_slack": 0.06,
}


@dataclass
class Check:
    name: str
    value: object
    target: str
    passed: bool


def _in(v, lo, hi):
    return v is not None and lo <= v <= hi


def repro_checks(res: dict, tol: dict) -> list[Check]:
    mdm, imdm, rnd = res["mdm"].metrics, res["imdm"].metrics, res["random"].metrics
    checks = [
        Check("table1/mdm_validity", mdm["validity"], f"in {tol['mdm_validity']}", _in(mdm["validity"], *tol["mdm_validity"])),
        Check("table1/imdm_validity", imdm["validity"], f">= {tol['imdm_validity_min']}", imdm["validity"] >= tol["imdm_validity_min"]),
        Check("table1/mdm_entropy", mdm["token_entropy_nats"], f"in {tol['entropy']}", _in(mdm["token_entropy_nats"], *tol["entropy"])),
        Check("table1/imdm_entropy", imdm["token_entropy_nats"], f"in {tol['entropy']}", _in(imdm["token_entropy_nats"], *tol["entropy"])),
        Check("table1/mdm_fact_error", mdm["fact_error_nats"], f"in {tol['mdm_error']}", _in(mdm["fact_error_nats"], *tol["mdm_error"])),
        Check("table1/imdm_fact_error", imdm["fact_error_nats"], f"<= {tol['imdm_error_max']}", imdm["fact_error_nats"] <= tol["imdm_error_max"]),
        Check("table1/random_validity", rnd["validity"], f"in {tol['mdm_validity']}", _in(rnd["validity"], *tol["mdm_validity"])),
    ]
    mp = res["mdm_probe"]
    checks.append(
        Check("table2/mdm_marginals", [float(v) for v in mp[0]], f"all in {tol['probe_marginal']}",
              bool(np.all((mp >= tol["probe_marginal"][0]) & (mp <= tol["probe_marginal"][1]))))
    )
    pair = res["imdm_switch"]
    checks.append(Check("table2/imdm_switching_pair", pair, "rows A>=0.9, B<=0.1, |P1-P2|<=0.1", pair is not None))
    if "mdm_combined" in res:
        mc, ic = res["mdm_combined"].metrics, res["imdm_combined"].metrics
        checks += [
            Check("bound/mdm_combined_validity", mc["validity"], f"in {tol['mdm_validity']}", _in(mc["validity"], *tol["mdm_validity"])),
            Check("bound/imdm_combined_validity", ic["validity"], f">= {tol['imdm_validity_min']}", ic["validity"] >= tol["imdm_validity_min"]),
            Check("distill/combined_vs_redi", ic["validity"], f">= {imdm['validity']:.4f} - {tol['combined_slack']}",
                  ic["validity"] >= imdm["validity"] - tol["combined_slack"]),
        ]
    return checks


def repro_synthetic(cfg: RunConfig, out: Path | None = None, quick: bool = False, combined: bool = True, plots: bool = False) -> dict:
    """Pretrain MDM, wrap as IMDM, distill both, evaluate one-step decoding.

    Writes each stage's artifacts to ``out`` as soon as they exist, so a
    failure leaves the finished stages on disk.
    """
    if quick:
        cfg = cfg.with_overrides(**QUICK_OVERRIDES)
    tol = QUICK_TOL if quick else FULL_TOL
    timings = {}
    res: dict = {"config": cfg, "timings": timings, "quick": quick}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def stage(name):
        timings[name] = time.perf_counter()
        log.info("stage %s", name)

    def done(name):
        timings[name] = time.perf_counter() - timings[name]

    def save(name, params):
        if out is not None:
            checkpoint.save(params, out / f"{name}.ckpt")

    def mark(status, failed=None):
        if out is not None:
            report.write_json(out / "status.json", {"status": status, "failed_stage": failed, "timings_s": timings})

    current = "pretrain"
    try:
        stage("pretrain")
        _, pre = pretrain(cfg)
        mdm = pre.params
        save("mdm_pretrained", mdm)
        done("pretrain")
        imdm0 = as_kind(mdm, IMDM, cfg)
        save("imdm_init", imdm0)
        if out is not None:
            report.write_csv(out / "pretrain_loss.csv", ["iteration", "loss"], pre.trace)
        res["pretrain_trace"] = pre.trace

        current = "redi"
        stage("redi")
        mdm_r, mdm_c, mdm_tr = run_redi(mdm, cfg, "mdm_pretrained")
        imdm_r, imdm_c, imdm_tr = run_redi(imdm0, cfg, "imdm_init")
        save("mdm_redi", mdm_r)
        save("imdm_redi", imdm_r)
        res.update(mdm_model=mdm_r, imdm_model=imdm_r, imdm_coupling=imdm_c, mdm_coupling=mdm_c)
        res["coupling_validity"] = {"mdm": analysis.validity(mdm_c.tokens), "imdm": analysis.validity(imdm_c.tokens)}
        done("redi")

        current = "evaluate"
        stage("evaluate")
        res["mdm"] = evaluate(mdm_r, cfg, steps=1, coupling=mdm_c)
        res["imdm"] = evaluate(imdm_r, cfg, steps=1, coupling=imdm_c)
        res["random"] = evaluate(None, cfg, steps=1)
        res["mdm_probe"], _ = probe(mdm_r, cfg, 2)
        table, eps = probe(imdm_r, cfg)
        res["imdm_probe"], res["imdm_probe_eps"] = table, eps
        res["imdm_switch"] = analysis.find_switching_pair(table)
        spread = table.max(axis=1) - table.min(axis=1)
        res["imdm_probe_agree_frac"] = float(np.mean(spread <= 0.1))
        done("evaluate")

        if combined:
            current = "combined"
            stage("combined")
            mdm_cb, mdm_stages = run_combined(mdm, cfg)
            imdm_cb, imdm_stages = run_combined(imdm0, cfg)
            save("mdm_combined", mdm_cb)
            save("imdm_combined", imdm_cb)
            res["mdm_combined"] = evaluate(mdm_cb, cfg, steps=1)
            res["imdm_combined"] = evaluate(imdm_cb, cfg, steps=1)
            res["sdtt_history"] = {"mdm": mdm_stages["sdtt_history"], "imdm": imdm_stages["sdtt_history"]}
            done("combined")
    except BaseException:
        mark("failed", current)
        raise

    res["checks"] = repro_checks(res, tol)
    if out is not None:
        _write_bundle(out, res, plots)
        mark("ok")
    return res


def _write_bundle(out: Path, res: dict, plots: bool) -> None:
    cfg = res["config"]
    names = ["mdm", "imdm", "random"] + (["mdm_combined", "imdm_combined"] if "mdm_combined" in res else [])
    for name in names:
        write_evaluation(out / name, res[name], title=name)
    rows = []
    for name in names:
        m = res[name].metrics
        ref = REFERENCE.get(name, {})
        rows.append((name, m["validity"], ref.get("validity", ""), m["token_entropy_nats"], ref.get("token_entropy_nats", ""),
                     m["fact_error_nats"] if m["fact_error_nats"] is not None else "", ref.get("fact_error_nats", "")))
    header = ["model", "validity", "validity_ref", "token_entropy_nats", "entropy_ref", "fact_error_nats", "fact_error_ref"]
    report.write_csv(out / "table1.csv", header, rows)
    probe_rows = [("mdm", "-", *res["mdm_probe"][0])]
    pair = res["imdm_switch"]
    if pair is not None:
        for label, idx in zip("AB", pair):
            probe_rows.append(("imdm", label, *res["imdm_probe"][idx]))
    length = res["imdm_probe"].shape[1]
    report.write_csv(out / "table2.csv", ["model", "eps", *[f"p0_pos{i}" for i in range(length)]], probe_rows)
    report.write_csv(out / "imdm_probe.csv", [f"p0_pos{i}" for i in range(length)], res["imdm_probe"].tolist())
    save_coupling(out / "imdm_coupling.jsonl", res["imdm_coupling"])
    checks = res["checks"]
    report.write_json(out / "checks.json", [c.__dict__ for c in checks])
    report.write_json(out / "run.json", {
        "command": "repro-synthetic",
        "quick": res["quick"],
        "seeds": cfg.seeds(),
        "input_hash": cfg.content_hash(),
        "numba": _accel.HAVE_NUMBA,
        "timings_s": res["timings"],
        "coupling_validity": res["coupling_validity"],
        "imdm_probe_agree_frac": res["imdm_probe_agree_frac"],
    })
    (out / "config.snapshot.toml").write_text(cfg.snapshot())
    lines = [
        "# Synthetic {00, 11} reproduction",
        "",
        f"Mode: {'quick' if res['quick'] else 'full'}; seed {cfg.seed}; schedule linear (alpha = 1 - t); numba: {_accel.HAVE_NUMBA}.",
        "",
        "## One-step decoding (reference values alongside)",
        "",
        report.markdown_table(header, rows),
        "",
        "## Full-mask per-token P(token = 0)",
        "",
        report.markdown_table(["model", "eps", *[f"pos {i}" for i in range(length)]], probe_rows),
        "",
        f"Fraction of IMDM eps draws whose positions agree within 0.1: {res['imdm_probe_agree_frac']:.4f}",
        "",
        "## Checks",
        "",
        report.markdown_table(["check", "value", "target", "pass"], [(c.name, c.value, c.target, "PASS" if c.passed else "FAIL") for c in checks]),
        "",
    ]
    (out / "report.md").write_text("\n".join(lines))
    if plots and res.get("pretrain_trace"):
        xs, ys = zip(*res["pretrain_trace"])
        (out / "pretrain_loss.svg").write_text(report.svg_line_chart({"MDM": (list(xs), list(ys))}, "Pretraining loss", "iteration", "NELBO"))


def summary_line(c: Check) -> str:
    value = c.value if not isinstance(c.value, float) else (f"{c.value:.4f}" if math.isfinite(c.value) else str(c.value))
    return f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {value} (target {c.target})"


def load_model(path) -> DenoiserParams:
    return checkpoint.load(path)


def dump_json(obj) -> str:
    return json.dumps(report._jsonable(obj), indent=2, sort_keys=True)
