import json

import pytest

from enap.cli import main, validate_path
from enap.config import multiphase2d_config

SMALL = multiphase2d_config(rnn_epochs=5, residual_epochs=5, rnn_hidden=16)


def run(capsys, *argv):
    code = main([*map(str, argv), "--json"])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1]) if out else None


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.ini"
    SMALL.save(path)
    return path


def test_frozenlake_golden_run(tmp_path, capsys):
    d, pmm = tmp_path / "d.jsonl", tmp_path / "pmm.json"
    assert run(capsys, "demo", "frozenlake", "--out", d)[0] == 0
    code, res = run(capsys, "mine", "--data", d, "--encoder", "exact", "--tau-sim", "0.9", "--out", pmm)
    assert code == 0 and res["seed"] == 0 and len(res["config_hash"]) == 12
    code, res = run(capsys, "validate", pmm)
    assert code == 0 and res["violations"] == [] and res["valid"]


def test_export_dot_of_a_single_loop(tmp_path, capsys):
    from helpers import machine

    from enap.core import save_pmm

    save_pmm(machine(1, [(0, 0, 0, 1.0)]), tmp_path / "m.json")
    assert main(["export-dot", str(tmp_path / "m.json"), "--out", str(tmp_path / "m.dot")]) == 0
    lines = (tmp_path / "m.dot").read_text().splitlines()
    assert sum("->" in l for l in lines) == 1
    assert sum(l.strip().startswith("q") and "->" not in l for l in lines) == 1


def test_mine_twice_is_byte_identical(tmp_path, capsys):
    d = tmp_path / "d.jsonl"
    run(capsys, "demo", "frozenlake", "--out", d)
    for name in ("a.json", "b.json"):
        run(capsys, "mine", "--data", d, "--encoder", "exact", "--out", tmp_path / name)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_module_errors_exit_one_with_a_json_object(tmp_path, capsys):
    code = main(["mine", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "x.json")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) >= {"error", "message", "command"}


def test_unannotated_pipeline_and_artifacts_validate(tmp_path, capsys, small_cfg):
    d = tmp_path / "mp.jsonl"
    assert run(capsys, "demo", "multiphase2d", "--n", 20, "--out", d)[0] == 0
    ann, cb, fe = tmp_path / "ann.jsonl", tmp_path / "cb.json", tmp_path / "fe.json"
    code, res = run(capsys, "abstract", "--config", small_cfg, "--data", d, "--out", ann, "--codebook", cb,
                    "--encoder-out", fe)
    assert code == 0
    hist = tmp_path / "hist.json"
    code, res = run(capsys, "train-encoder", "--config", small_cfg, "--data", ann, "--out", hist)
    assert code == 0
    pmm, unpruned, diag = tmp_path / "pmm.json", tmp_path / "raw.json", tmp_path / "diag.jsonl"
    code, res = run(capsys, "mine", "--config", small_cfg, "--data", ann, "--history", hist, "--out", pmm,
                    "--unpruned", unpruned, "--diagnostics", diag)
    assert code == 0
    rounds = [json.loads(l) for l in diag.read_text().splitlines()]
    assert rounds and set(rounds[0]) >= {"round", "|U|", "counterexample"}
    pruned2 = tmp_path / "pruned2.json"
    assert run(capsys, "prune", unpruned, "--data", ann, "--out", pruned2, "--config", small_cfg)[0] == 0
    bundle = tmp_path / "bundle"
    assert run(capsys, "train-residual", "--config", small_cfg, "--data", d, "--out", bundle)[0] == 0
    roll = tmp_path / "roll.jsonl"
    code, res = run(capsys, "rollout", "--bundle", bundle, "--episodes", 3, "--jobs", 2, "--out", roll)
    assert code == 0 and 0.0 <= res["success_rate"] <= 1.0
    rep, csv = tmp_path / "rep.json", tmp_path / "rep.csv"
    code, res = run(capsys, "metrics", "--pmm", pmm, "--data", ann, "--rollouts", roll, "--feature-encoder", fe,
                    "--out", rep, "--csv", csv, "--config", small_cfg)
    assert code == 0
    assert csv.read_text().splitlines()[0] == "sr,srn,apf,lvr,css,asd"
    # raw data relabelled through the bundle's own codebook
    code, res = run(capsys, "metrics", "--bundle", bundle, "--data", d, "--rollouts", roll, "--config", small_cfg)
    assert code == 0 and res["node_count"] == len(json.loads((bundle / "pmm.json").read_text())["states"])
    for art in (d, ann, cb, fe, hist, pmm, unpruned, pruned2, bundle, small_cfg):
        kind, problems = validate_path(art)
        assert problems == [], (art, kind, problems)


def test_flags_override_the_config_file(tmp_path, capsys, small_cfg):
    d = tmp_path / "d.jsonl"
    run(capsys, "demo", "frozenlake", "--out", d)
    _, a = run(capsys, "mine", "--config", small_cfg, "--encoder", "exact", "--data", d, "--out", tmp_path / "a.json")
    _, b = run(capsys, "mine", "--config", small_cfg, "--encoder", "exact", "--tau-sim", "0.5", "--data", d,
               "--out", tmp_path / "b.json")
    assert a["config_hash"] != b["config_hash"]
