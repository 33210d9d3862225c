import json
import subprocess
import sys

import pytest

from kiut.cli import AblationConfig, AblationSpec, flags_of, main, thread_cap
from kiut.metrics import MetricsReport
from kiut.training import load_checkpoint

TINY = {"model": {"d_model": 16, "n_layers": 1, "n_memory": 1, "d_geometry": 8},
        "train": {"epochs": 10, "lr": 3e-3, "val_every": 0}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small corpus, a config, and a trained plus an untrained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "d.jsonl"), "--n", "120", "--grid", "3", "--seed", "1"]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(root / "d.jsonl"), "--config", str(root / "cfg.json"),
                 "--out", str(root / "m.kiut")]) == 0
    zero = {**TINY, "train": {**TINY["train"], "epochs": 0}}
    (root / "zero.json").write_text(json.dumps(zero))
    assert main(["train", "--data", str(root / "d.jsonl"), "--config", str(root / "zero.json"),
                 "--out", str(root / "z.kiut")]) == 0
    return root


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--out", tmp_path / f"{name}.jsonl", "--n", 30, "--seed", 4)
        assert code == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    stats = json.loads(out)
    assert stats["samples"] == 30 and stats["regions"] == 49


def test_gen_data_empty_and_invalid_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "e.jsonl", "--n", 0)
    assert code == 0 and json.loads(out)["samples"] == 0
    assert (tmp_path / "e.jsonl").read_text() == ""
    for grid in ("0", "3x", "axb", "2x0"):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path / "g.jsonl", "--grid", grid)
        assert code != 0
        assert err.count("\n") == 1 and "error" in err
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "g.jsonl", "--symptoms", 0)
    assert code == 2


def test_train_writes_loadable_checkpoint(workspace, capsys):
    ckpt = load_checkpoint(workspace / "m.kiut")
    assert ckpt.config.num_regions == 9 and ckpt.config.d_model == 16
    assert ckpt.meta["seed"] == 0


def test_train_prints_epoch_lines(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", workspace / "d.jsonl", "--config", workspace / "cfg.json",
                       "--out", tmp_path / "m.kiut")
    assert code == 0
    lines = [json.loads(x) for x in out.splitlines()]
    assert [x["epoch"] for x in lines] == list(range(11))
    assert (tmp_path / "m.kiut").read_bytes() == (workspace / "m.kiut").read_bytes()


def test_train_config_errors(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "train", "--data", workspace / "d.jsonl", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "invalid JSON" in err
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    code, _, _ = run(capsys, "train", "--data", workspace / "d.jsonl", "--config", bad, "--out", tmp_path / "x")
    assert code == 2
    code, _, _ = run(capsys, "train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "x")
    assert code == 1


def test_eval_references_are_perfect(workspace, capsys):
    code, out, _ = run(capsys, "eval", "--data", workspace / "d.jsonl", "--references")
    assert code == 0
    assert all(v == 1.0 for v in json.loads(out).values())


def test_eval_report_fields(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--ckpt", workspace / "m.kiut", "--data", workspace / "d.jsonl",
                       "--out", tmp_path / "r.json")
    assert code == 0
    written = json.loads((tmp_path / "r.json").read_text())
    assert written == json.loads(out)
    assert len(written) == 9 and all(0.0 <= v <= 1.0 for v in written.values())
    MetricsReport.from_dict(written)


def test_untrained_scores_below_trained(workspace, capsys):
    scores = {}
    for name in ("z", "m"):
        code, out, _ = run(capsys, "eval", "--ckpt", workspace / f"{name}.kiut", "--data", workspace / "d.jsonl")
        assert code == 0
        scores[name] = json.loads(out)
    for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
        assert scores["z"][k] < scores["m"][k]


def test_eval_errors(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--data", workspace / "d.jsonl")
    assert code == 2
    other = tmp_path / "o.jsonl"
    main(["gen-data", "--out", str(other), "--n", "20"])
    capsys.readouterr()
    code, _, err = run(capsys, "eval", "--ckpt", workspace / "m.kiut", "--data", other)
    assert code == 2 and "do not match" in err
    (tmp_path / "c.kiut").write_bytes((workspace / "m.kiut").read_bytes()[:100])
    code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "c.kiut", "--data", workspace / "d.jsonl")
    assert code == 1


def test_decode(workspace, capsys):
    code, out, _ = run(capsys, "decode", "--ckpt", workspace / "m.kiut", "--data", workspace / "d.jsonl",
                       "--id", 0)
    assert code == 0
    row = json.loads(out)
    assert row["id"] == 0 and isinstance(row["generated"], str) and row["reference"]
    code, _, _ = run(capsys, "decode", "--ckpt", workspace / "m.kiut", "--data", workspace / "d.jsonl",
                     "--id", 10_000)
    assert code == 2


def test_ablate_row_counts(workspace, tmp_path, capsys):
    stem = tmp_path / "abl"
    code, out, _ = run(capsys, "ablate", "--data", workspace / "d.jsonl", "--config", workspace / "zero.json",
                       "--out", stem, "--schema", "u", "--schema", "last", "--variant", "full",
                       "--variant", "no_knowledge", "--seeds", 0, 1)
    assert code == 0
    rows = json.loads(stem.with_suffix(".json").read_text())
    n_configs, n_seeds = 4, 2
    assert len(rows) == n_configs * n_seeds + n_configs >= 2 * n_seeds
    assert sum(r["seed"] == "mean" for r in rows) == n_configs
    csv_lines = stem.with_suffix(".csv").read_text().splitlines()
    assert len(csv_lines) == len(rows) + 1
    assert len(out.splitlines()) == n_configs
    means = {r["config"]: r for r in rows if r["seed"] == "mean"}
    assert set(means) == {"u+full", "last+full", "u+no_clinical+no_contextual", "last+no_clinical+no_contextual"}


def test_ablation_workers_do_not_change_results(workspace, tmp_path, capsys, monkeypatch):
    outs = {}
    for threads in ("1", "2"):
        monkeypatch.setenv("KIUT_THREADS", threads)
        stem = tmp_path / threads / "nested" / "abl"
        code, _, _ = run(capsys, "ablate", "--data", workspace / "d.jsonl", "--config", workspace / "cfg.json",
                         "--out", stem, "--variant", "full", "--variant", "no_contextual", "--seeds", 0, 1)
        assert code == 0
        outs[threads] = stem.with_suffix(".csv").read_bytes()
    assert outs["1"] == outs["2"]


def test_ablate_bad_variant(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "ablate", "--data", workspace / "d.jsonl", "--out", tmp_path / "a",
                       "--variant", "no_magic")
    assert code == 2 and "unknown variant" in err


def test_ablation_spec():
    spec = AblationSpec.from_flags(["u"], ["full", "no_er+no_ir"], {}, [1, 3], [0])
    assert [c.name for c in spec.configs] == ["u+full+N1", "u+full+N3", "u+no_er+no_ir+N1", "u+no_er+no_ir+N3"]
    assert flags_of("no_knowledge") == ("no_clinical", "no_contextual")
    with pytest.raises(ValueError):
        AblationSpec([AblationConfig(), AblationConfig()])
    with pytest.raises(ValueError):
        AblationSpec([AblationConfig()], [])
    cfg = AblationConfig(no_ir=True, no_er=True).apply(__import__("kiut.model").model.ModelConfig())
    assert cfg.n_memory == 0 and not cfg.use_er


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("KIUT_THREADS", raising=False)
    assert thread_cap() == 1
    monkeypatch.setenv("KIUT_THREADS", "3")
    assert thread_cap() == 3
    monkeypatch.setenv("KIUT_THREADS", "zero")
    with pytest.raises(Exception):
        thread_cap()


def test_console_script_usage_error():
    proc = subprocess.run([sys.executable, "-m", "kiut.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "kiut.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ablate" in proc.stdout
