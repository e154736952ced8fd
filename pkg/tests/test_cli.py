import json
import subprocess
import sys
import time

import numpy as np
import pytest

from stackelgrad.cli import main
from stackelgrad.models import PerturbationGenerator, save_checkpoint
from conftest import toy_spec_dict


def write_spec(tmp_path, body, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return str(path)


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.suffix in (".csv", ".json")}


def test_missing_budget_is_a_config_error(tmp_path, capsys):
    body = toy_spec_dict()
    del body["game"]["budget"]
    code = main(["train-gen", "--spec", write_spec(tmp_path, body), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "budget" in capsys.readouterr().err


def test_malformed_json_exits_before_compute(tmp_path):
    spec = tmp_path / "bad.json"
    spec.write_text("{\"game\": {")
    out = tmp_path / "o"
    for cmd in ("train-gen", "eval", "experiment", "diag"):
        assert main([cmd, "--spec", str(spec), "--out", str(out), "--quiet"]) == 2
    assert not out.exists()


def test_unknown_field_is_reported_with_path(tmp_path, capsys):
    body = toy_spec_dict(budgte=0.1)
    assert main(["train-gen", "--spec", write_spec(tmp_path, body), "--out",
                 str(tmp_path / "o")]) == 2
    assert "game.budgte" in capsys.readouterr().err


def test_train_gen_toy_spec_is_fast_and_deterministic(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict(epochs=5))
    start = time.perf_counter()
    assert main(["train-gen", "--spec", spec, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert time.perf_counter() - start < 60
    assert main(["train-gen", "--spec", spec, "--out", str(tmp_path / "b"), "--quiet"]) == 0
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert set(a) == {"config.json", "run.csv", "summary.json"}
    assert a == b
    assert (tmp_path / "a/generator.ckpt").read_bytes() == (tmp_path / "b/generator.ckpt").read_bytes()
    echo = json.loads(a["config.json"])
    assert echo["spec"]["game"]["epochs"] == 5 and echo["command"] == "train-gen"


def test_seed_override_changes_the_run(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict(epochs=1))
    main(["train-gen", "--spec", spec, "--out", str(tmp_path / "a"), "--quiet"])
    main(["train-gen", "--spec", spec, "--out", str(tmp_path / "b"), "--seed", "9", "--quiet"])
    assert outputs(tmp_path / "a")["run.csv"] != outputs(tmp_path / "b")["run.csv"]


def test_divergence_exits_3_with_partial_trace(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict(lr_theta=1e30, loss_a="ce", epochs=3))
    out = tmp_path / "o"
    assert main(["train-gen", "--spec", spec, "--out", str(out), "--quiet"]) == 3
    trace = (out / "run.csv").read_text().splitlines()
    assert len(trace) >= 2
    assert json.loads((out / "summary.json").read_text())["status"] == "diverged"


@pytest.fixture
def features_csv(tmp_path):
    x = np.random.default_rng(0).standard_normal((50, 4))
    path = tmp_path / "x.csv"
    np.savetxt(path, x, delimiter=",", fmt="%.17g")
    return x, str(path)


def test_zero_generator_poison_is_identity(tmp_path, features_csv, capsys):
    x, path = features_csv
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, PerturbationGenerator.init(4, budget=0.1).zero())
    assert main(["poison", "--checkpoint", str(ckpt), "--features", path,
                 "--out", str(tmp_path / "p"), "--quiet"]) == 0
    back = np.loadtxt(tmp_path / "p/poisoned_features.csv", delimiter=",", ndmin=2)
    assert back.tobytes() == x.tobytes()
    assert "max_perturbation_linf 0.0 budget 0.1" in capsys.readouterr().out


def test_poison_reports_max_within_budget(tmp_path, features_csv, capsys):
    x, path = features_csv
    gen = PerturbationGenerator.init(4, budget=0.3, seed=1)
    save_checkpoint(tmp_path / "g.ckpt", gen.with_params(gen.params * 100.0))
    assert main(["poison", "--checkpoint", str(tmp_path / "g.ckpt"), "--features", path,
                 "--out", str(tmp_path / "p"), "--quiet"]) == 0
    words = capsys.readouterr().out.split()
    printed = float(words[words.index("max_perturbation_linf") + 1])
    back = np.loadtxt(tmp_path / "p/poisoned_features.csv", delimiter=",", ndmin=2)
    assert printed <= 0.3
    assert np.abs(back - x).max() == printed


def test_poison_dimension_mismatch(tmp_path, features_csv):
    _, path = features_csv
    save_checkpoint(tmp_path / "g.ckpt", PerturbationGenerator.init(5, budget=0.1))
    assert main(["poison", "--checkpoint", str(tmp_path / "g.ckpt"), "--features", path,
                 "--out", str(tmp_path / "p"), "--quiet"]) == 2


def test_poison_rejects_non_generator_checkpoint(tmp_path, features_csv):
    _, path = features_csv
    (tmp_path / "g.ckpt").write_bytes(b"junk")
    assert main(["poison", "--checkpoint", str(tmp_path / "g.ckpt"), "--features", path,
                 "--out", str(tmp_path / "p"), "--quiet"]) == 2


def test_poison_hundred_thousand_rows_under_ten_seconds(tmp_path):
    x = np.random.default_rng(1).standard_normal((100_000, 10))
    path = tmp_path / "big.csv"
    np.savetxt(path, x, delimiter=",", fmt="%.17g")
    save_checkpoint(tmp_path / "g.ckpt", PerturbationGenerator.init(10, budget=0.1, seed=2))
    start = time.perf_counter()
    assert main(["poison", "--checkpoint", str(tmp_path / "g.ckpt"), "--features", str(path),
                 "--out", str(tmp_path / "p"), "--quiet"]) == 0
    assert time.perf_counter() - start < 10


def test_diag_emits_three_traces(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict(epochs=1))
    assert main(["diag", "--spec", spec, "--out", str(tmp_path / "d"), "--quiet"]) == 0
    traces = sorted(p.name for p in (tmp_path / "d").glob("trace_*.csv"))
    assert traces == ["trace_ce.csv", "trace_ce_clip.csv", "trace_sur.csv"]
    summary = json.loads((tmp_path / "d/summary.json").read_text())
    assert set(summary["variants"]) == {"ce", "ce_clip", "sur"}


def test_experiment_one_row_per_fraction(tmp_path):
    body = dict(toy_spec_dict(epochs=1), fractions=[0.2, 0.4, 0.6, 0.8, 1.0], seeds=[0])
    spec = write_spec(tmp_path, body)
    assert main(["experiment", "--spec", spec, "--out", str(tmp_path / "e"), "--quiet"]) == 0
    lines = (tmp_path / "e/ratio.csv").read_text().splitlines()
    assert len(lines) == 1 + 5
    assert [float(r.split(",")[0]) for r in lines[1:]] == [0.2, 0.4, 0.6, 0.8, 1.0]


def test_eval_writes_per_seed_rows(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict(epochs=1))
    assert main(["eval", "--spec", spec, "--out", str(tmp_path / "v"), "--quiet"]) == 0
    assert len((tmp_path / "v/eval.csv").read_text().splitlines()) == 3
    assert len((tmp_path / "v/curve.csv").read_text().splitlines()) == 1 + 5
    assert {"run_seed0.csv", "run_seed1.csv"} <= set(outputs(tmp_path / "v"))


def test_baseline_gate_exits_2(tmp_path):
    body = dict(toy_spec_dict(epochs=1), clean_floor=1.01, seeds=[0])
    assert main(["eval", "--spec", write_spec(tmp_path, body), "--out", str(tmp_path / "v"),
                 "--quiet"]) == 2


def test_make_data_writes_splits(tmp_path):
    spec = write_spec(tmp_path, toy_spec_dict())
    assert main(["make-data", "--spec", spec, "--out", str(tmp_path / "m"), "--quiet"]) == 0
    names = set(outputs(tmp_path / "m"))
    assert {"config.json"} < names and len(names) == 5


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "stackelgrad", "--help"], capture_output=True,
                         text=True, timeout=60)
    assert out.returncode == 0
    for cmd in ("train-gen", "poison", "eval", "experiment", "diag"):
        assert cmd in out.stdout
