import csv
import json

import pytest

from lfmm.cli import main
from lfmm.io import read_samples


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, truth, samples = root / "data.csv", root / "truth.json", root / "draws.jsonl"
    assert main(["simulate", "--seed", "3", "--n", "10", "--trials", "2", "--levels", "2,2,3",
                 "--out", str(data), "--truth", str(truth)]) == 0
    assert main(["fit", "--data", str(data), "--out", str(samples), "--seed", "1",
                 "--iterations", "300", "--burnin", "100", "--thin", "2"]) == 0
    return root, data, truth, samples


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def test_simulate_writes_data_and_truth(fitted):
    _, data, truth, _ = fitted
    rows = read_csv(data)
    assert len(rows) == 10 * 2 * 20
    assert list(rows[0]) == ["subject", "trial", "time", "y", "x1", "x2", "x3"]
    assert json.loads(truth.read_text())["levels"] == [2, 2, 3]


def test_fit_stores_thinned_draws(fitted):
    store = read_samples(fitted[3])
    assert len(store) == 100
    assert store.meta["seed"] == 1
    assert store.meta["levels"] == [2, 2, 3]


def test_summarize_table_and_predictor(fitted, tmp_path, capsys):
    out = tmp_path / "summary.csv"
    assert main(["summarize", "--samples", str(fitted[3]), "--out", str(out), "--predictor", "3"]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "k,ell=1,ell=2,ell=3"
    assert len(printed) == 21
    assert all(abs(sum(float(v) for v in line.split(",")[1:]) - 1) < 1e-12 for line in printed[1:])
    rows = read_csv(out)
    names = {r["quantity"] for r in rows}
    assert {"cluster_count[x1]", "fixed_effect", "overall", "main[x3]", "interaction[x1,x3]"} <= names
    for r in rows:
        if r["lower"]:
            # a skewed posterior may put its mean outside the equal-tailed interval
            assert float(r["lower"]) <= float(r["upper"])


def test_summarize_needs_an_output(fitted):
    assert main(["summarize", "--samples", str(fitted[3])]) == 1
    assert main(["summarize", "--samples", str(fitted[3]), "--predictor", "9"]) == 1


def test_diagnose(fitted, tmp_path, capsys):
    out = tmp_path / "geweke.csv"
    assert main(["diagnose", "--samples", str(fitted[3]), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("sigma_eps2\t") for line in lines)
    assert read_csv(out)[0].keys() == {"parameter", "z", "p_value", "formatted"}


def test_diagnose_short_chain_fails(fitted, tmp_path):
    assert main(["diagnose", "--samples", str(fitted[3]), "--min-length", "1000"]) == 1


def test_predict(fitted, tmp_path, capsys):
    out = tmp_path / "pred.csv"
    assert main(["predict", "--samples", str(fitted[3]), "--data", str(fitted[1]), "--out", str(out)]) == 0
    metrics = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert set(metrics) == {"rmse", "coverage", "interval_width"}
    assert 0.8 < float(metrics["coverage"]) <= 1.0
    assert len(read_csv(out)) == 400


def test_fit_from_config_with_two_chains(fitted, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = 20\nburn_in = 10\nthin = 1\nrandom_effects = false\nseed = 4\n")
    out = tmp_path / "d.jsonl"
    assert main(["fit", "--data", str(fitted[1]), "--out", str(out), "--config", str(cfg), "--chains", "2"]) == 0
    first, second = read_samples(tmp_path / "d.chain1.jsonl"), read_samples(tmp_path / "d.chain2.jsonl")
    assert len(first) == len(second) == 10
    assert "random_effects" not in first.records[0]
    assert first.records != second.records


def test_missing_input_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "x.jsonl")])
    assert info.value.code == 2


def test_bad_arguments(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--out", str(tmp_path / "d.csv"), "--levels", "2,x"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main([])


def test_bad_config_is_reported(fitted, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["fit", "--data", str(fitted[1]), "--out", str(tmp_path / "x.jsonl"), "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err
