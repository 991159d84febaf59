import csv
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirm.cli import CSV_COLUMNS, ResultsWriter, main, read_results
from cirm.harness import MetricsRecord
from cirm.runconfig import ConfigError, parse_config

REPO = Path(__file__).resolve().parents[1]

SMALL = {
    "experiment": "tiny",
    "n_envs": 2,
    "samples_per_env": 60,
    "test_samples": 120,
    "repetitions": 2,
    "methods": [
        {"id": "erm", "hidden": [8], "epochs": 2, "batch_size": 30},
        {"id": "c-virmv1", "hidden": [8], "epochs": 2, "batch_size": 30, "n_mc": 1},
    ],
}


def write_config(tmp_path, body, name="cfg.json"):
    p = tmp_path / name
    p.write_text(body if isinstance(body, str) else json.dumps(body, indent=2))
    return str(p)


def rows_without_time(path):
    with open(path, newline="") as fh:
        return [r[:-1] for r in csv.reader(fh)]


def test_run_is_deterministic_and_writes_all_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = rows_without_time(tmp_path / "a/results.csv"), rows_without_time(tmp_path / "b/results.csv")
    assert a == b and len(a) == 1 + 2 * 4
    assert tuple(a[0]) == CSV_COLUMNS[:-1]
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["seeds"] == [7] and len(manifest["content_hash"]) == 40
    assert (tmp_path / "a/summary.csv").exists()
    assert "c-virmv1" in capsys.readouterr().out


def test_parallel_jobs_match_serial(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert main(["run", "--config", cfg, "--jobs", "2", "--out", str(tmp_path / "p")]) == 0
    assert rows_without_time(tmp_path / "s/results.csv") == rows_without_time(tmp_path / "p/results.csv")


def test_manifest_alone_reruns_the_experiment(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a/manifest.json"
    assert main(["run", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    assert rows_without_time(tmp_path / "a/results.csv") == rows_without_time(tmp_path / "b/results.csv")
    m2 = json.loads((tmp_path / "b/manifest.json").read_text())
    assert m2["content_hash"] == json.loads(manifest.read_text())["content_hash"]


def test_validate_passes(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7


def test_report_formats_cells(tmp_path, capsys):
    path = tmp_path / "results.csv"
    w = ResultsWriter(path)
    # test accuracies with mean 0.46 and sample std 0.021
    vals = [0.46 - 0.021, 0.46, 0.46 + 0.021]
    w.write([MetricsRecord("c-virmv1", s, 0, "test", "accuracy", v, 1.0, "x") for s, v in enumerate(vals)])
    w.close()
    assert main(["report", str(path), "--group-by", "method", "--out", str(tmp_path / "s.csv")]) == 0
    out = capsys.readouterr().out
    assert "46.0 (2.1)" in out
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert rows[0]["method"] == "c-virmv1" and rows[0]["n"] == "3"


def test_results_csv_is_valid_between_flushes(tmp_path):
    path = tmp_path / "r.csv"
    w = ResultsWriter(path)
    w.write([MetricsRecord("erm", 0, 0, "train", "accuracy", 0.5, 2.0, "x")])
    # still open: the file must parse as complete CSV already
    assert [r.value for r in read_results(path)] == [0.5]
    w.write([MetricsRecord("erm", 0, 0, "test", "accuracy", 0.25, 2.0, "x")])
    assert len(read_results(path)) == 2
    w.close()


@pytest.mark.parametrize("body, where", [
    ('{"methods": [{"id": "irmv1", "lambda": -1}]}', "methods[0].lambda"),
    ('{"methods": [{"id": "erm", "lr": "fast"}]}', "methods[0].lr"),
    ('{"experiment": "x",\n "n_env": 2}', "n_env"),
    ('{"methods": [{"id": "nope"}]}', "methods[0].id"),
    ('{"methods": [{"id": "erm",\n "epochs": 0}]}', "methods[0].epochs"),
    ('{"experiment": ', "invalid JSON"),
])
def test_config_errors_exit_2_with_location(tmp_path, capsys, body, where):
    assert main(["run", "--config", write_config(tmp_path, body), "--out", str(tmp_path / "o")]) == 2
    assert where in capsys.readouterr().err


def test_config_error_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config('{\n  "experiment": "x",\n  "bogus": 1\n}')
    assert info.value.line == 3 and "bogus" in str(info.value)


def test_missing_config_and_runtime_failure_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 2
    assert main(["run", "--config", "x", "--jobs", "0"]) == 2
    (tmp_path / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x00\x00garbage")
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    bad = dict(SMALL, data_dir=str(tmp_path))
    assert main(["run", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "o")]) == 1


def test_empty_config_gives_defaults():
    cfg = parse_config('{"experiment": "defaults"}')
    assert [m.id for m in cfg.methods] == ["erm", "c-virmv1"]
    c = cfg.methods[1].config()
    assert (c.beta, c.rho0, c.rho1, c.epochs, c.batch_size) == (1.0, 10.0, 10.0, 100, 256)
    assert cfg.plan.n_envs == 2 and cfg.plan.p_c == [0.2, 0.1]


def test_shipped_configs_parse():
    for p in (REPO / "experiments").glob("*.json"):
        cfg = parse_config(p.read_text())
        assert parse_config(cfg.dumps()) == cfg


def test_gen_data_writes_caches(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["gen-data", "--config", cfg, "--seed", "0", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "data").iterdir())) >= 3


override = st.fixed_dictionaries({}, optional={
    "lambda": st.floats(0, 1e5), "lr": st.floats(1e-5, 1.0), "epochs": st.integers(1, 500),
    "n_mc": st.integers(1, 10), "hidden": st.lists(st.integers(1, 64), max_size=3),
    "theta_constraint": st.booleans(), "block_lr": st.none() | st.floats(1e-4, 1.0),
})


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["erm", "irmv1", "c-bvirm", "vcl"]), override, st.integers(1, 6))
def test_parse_serialize_round_trip(method, over, n_envs):
    body = {"experiment": "rt", "n_envs": n_envs, "methods": [{"id": method, **over}]}
    cfg = parse_config(json.dumps(body))
    again = parse_config(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()
