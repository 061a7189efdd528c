import json
import os
import subprocess
import sys
import textwrap

import pytest

from imdm import checkpoint, cli, oracles
from imdm.config import ConfigError, RunConfig, validate_metrics
from imdm.experiments import load_coupling

TINY = textwrap.dedent(
    """
    seed = 3
    [train]
    iterations = 40
    batch_size = 16
    eval_every = 20
    [distill]
    rounds = 1
    iterations_per_round = 2
    n_eps_quad = 2
    batch_size = 8
    coupling_size = 20
    coupling_steps = 4
    redi_iterations = 5
    redi_batch_size = 8
    [decode]
    n_samples = 40
    curve_steps = [1, 2]
    [analysis]
    n_eps = 20
    probe_eps = 10
    """
)


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# config


def test_defaults_resolve():
    cfg = RunConfig.default(env={})
    assert cfg.seed == 0 and cfg.dataset().length == 2
    assert cfg.distill_config().train.seed == 1 and cfg.redi_train_config().seed == 2


def test_schema_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"train": {"bogus": 1}}, env={})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"extra": 1}, env={})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"iterations": "many"}}, env={})


def test_seed_env_override():
    assert RunConfig.from_dict({"seed": 4}, env={"IMDM_SEED": "9"}).seed == 9
    assert RunConfig.from_dict({"seed": 4}, env={"IMDM_SEED": ""}).seed == 4
    with pytest.raises(ConfigError):
        RunConfig.from_dict({}, env={"IMDM_SEED": "x"})


def test_explicit_data_checks():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"kind": "explicit_list", "n_data": 2, "sequences": [[0, 1], [0]]}}, env={})
    cfg = RunConfig.from_dict({"data": {"kind": "explicit_list", "n_data": 3, "sequences": [[0, 2, 1]]}}, env={})
    assert cfg.dataset().length == 3


def test_snapshot_round_trips(tmp_path):
    cfg = RunConfig.default(env={})
    path = tmp_path / "snap.toml"
    path.write_text(cfg.snapshot())
    assert RunConfig.load(path, env={}).data == cfg.data
    assert cfg.content_hash() == RunConfig.load(path, env={}).content_hash()
    assert cfg.content_hash(b"a") != cfg.content_hash(b"b")


def test_metrics_schema():
    good = {"validity": 0.5, "token_entropy_nats": 0.69, "fact_error_nats": 0.69, "thm1_bound_nats": 0.69,
            "n_samples": 10, "n_eps": 1, "steps": 1, "seed": 0}
    validate_metrics(good)
    with pytest.raises(Exception):
        validate_metrics({k: v for k, v in good.items() if k != "validity"})


# commands


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nbogus = 1\n")
    assert run("pretrain", "-c", bad, "-o", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err
    bad.write_text("not = [toml")
    assert run("pretrain", "-c", bad, "-o", tmp_path / "o") == 2


def test_missing_checkpoint_exits_2(tmp_path, tiny):
    assert run("sample", "-c", tiny, "-o", tmp_path / "o", "--checkpoint", tmp_path / "none.ckpt") == 2
    assert run("eval", "-c", tiny, "-o", tmp_path / "o") == 2


def test_capacity_exits_4(tmp_path):
    cfg = tmp_path / "big.toml"
    cfg.write_text('[data]\nkind = "explicit_list"\nn_data = 10\nsequences = [[0,1,2,3,4,5,6,7,8,9]]\n[decode]\nn_samples = 5\n')
    assert run("eval", "-c", cfg, "-o", tmp_path / "o", "--random-baseline") == 4


def test_divergence_exits_3(tmp_path):
    cfg = tmp_path / "nan.toml"
    cfg.write_text("[train]\nlearning_rate = 1e308\niterations = 5\n")
    with pytest.warns(RuntimeWarning):
        assert run("pretrain", "-c", cfg, "-o", tmp_path / "o") == 3


def test_pretrain_is_deterministic(tmp_path, tiny):
    for name in ("a", "b"):
        assert run("pretrain", "-c", tiny, "-o", tmp_path / name) == 0
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
    a = json.loads((tmp_path / "a/metrics.json").read_text())
    assert a == json.loads((tmp_path / "b/metrics.json").read_text())
    validate_metrics(a)
    run_info = json.loads((tmp_path / "a/run.json").read_text())
    assert run_info["seeds"]["root"] == 3 and run_info["command"] == "pretrain"
    assert (tmp_path / "a/config.snapshot.toml").exists()
    assert not list((tmp_path / "a").glob("*.svg"))


def test_pretrain_plots(tmp_path, tiny):
    assert run("pretrain", "-c", tiny, "-o", tmp_path / "p", "--plots", "--iterations", "20") == 0
    svgs = sorted(p.name for p in (tmp_path / "p").glob("*.svg"))
    assert "loss.svg" in svgs and "plots.svg" in svgs
    assert (tmp_path / "p/plots.svg").read_text().startswith("<svg")


def test_pipeline_commands(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("IMDM_SEED", "5")
    assert run("pretrain", "-c", tiny, "-o", tmp_path / "pre") == 0
    teacher = tmp_path / "pre/model.ckpt"
    assert run("distill", "redi", "-c", tiny, "-o", tmp_path / "redi", "--teacher", teacher, "--kind", "imdm") == 0
    coupling = load_coupling(tmp_path / "redi/coupling.jsonl")
    assert len(coupling) == 20 and coupling.noise.shape == (20, 2, 8)
    assert checkpoint.load(tmp_path / "redi/student.ckpt").kind == "imdm"
    assert run("distill", "sdtt", "-c", tiny, "-o", tmp_path / "sdtt", "--teacher", teacher) == 0
    assert run("distill", "combined", "-c", tiny, "-o", tmp_path / "comb", "--teacher", teacher, "--kind", "imdm") == 0
    assert (tmp_path / "comb/sdtt_student.ckpt").exists()
    student = tmp_path / "redi/student.ckpt"
    assert run("sample", "-c", tiny, "-o", tmp_path / "s", "--checkpoint", student, "--steps", "2", "--n", "30") == 0
    m = json.loads((tmp_path / "s/metrics.json").read_text())
    assert (m["steps"], m["n_samples"], m["seed"]) == (2, 30, 5)
    assert len((tmp_path / "s/samples.jsonl").read_text().splitlines()) >= 30
    assert run("analyze", "-c", tiny, "-o", tmp_path / "an", "--checkpoint", student,
               "--coupling", tmp_path / "redi/coupling.jsonl") == 0
    assert (tmp_path / "an/probe.csv").exists() and (tmp_path / "an/onestep_joint.csv").exists()
    assert run("eval", "-c", tiny, "-o", tmp_path / "rb", "--random-baseline") == 0
    assert json.loads((tmp_path / "rb/metrics.json").read_text())["fact_error_nats"] is None


def test_checkpoint_shape_mismatch(tmp_path, tiny):
    assert run("pretrain", "-c", tiny, "-o", tmp_path / "pre") == 0
    three = tmp_path / "three.toml"
    three.write_text('[data]\nkind = "explicit_list"\nn_data = 2\nsequences = [[0,0,0],[1,1,1]]\n')
    assert run("sample", "-c", three, "-o", tmp_path / "s", "--checkpoint", tmp_path / "pre/model.ckpt") == 2


def test_oracle_json(tmp_path, capsys):
    out = tmp_path / "oracle.json"
    assert run("oracle", "--only", "lemma", "zero_init", "--seed", "2", "-o", out) == 0
    payload = json.loads(out.read_text())
    assert payload["passed"] and payload["seed"] == 2
    assert [s["name"] for s in payload["suites"]] == [oracles.lemma_suite().name, oracles.zero_init_suite().name]
    assert json.loads(capsys.readouterr().out) == payload


def test_oracle_failure_exits_5(monkeypatch):
    failing = oracles.SuiteResult("broken", False, 1.0, 0.0, 1)
    monkeypatch.setitem(oracles.SUITES, "broken", lambda seed=0: failing)
    assert run("oracle", "--only", "broken") == 5


def test_module_entry_point(tmp_path):
    env = dict(os.environ, IMDM_SEED="1")
    res = subprocess.run([sys.executable, "-m", "imdm", "oracle", "--only", "lemma"], capture_output=True, text=True, env=env)
    assert res.returncode == 0
    assert json.loads(res.stdout)["seed"] == 1
