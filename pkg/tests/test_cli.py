import csv
import json
import os
import shutil

import pytest

from servesim.cli import ConfigError, load_config, main, parse_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
GOLDEN = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")

TINY = {
    "model": "mistral7b",
    "workload": {
        "prompt": {"median": 1500, "p90": 4000}, "output": {"median": 60, "p90": 150},
        "max_total": 8192, "seed": 5, "qps": 2.0, "n_requests": 48,
    },
    "capacity": {"n_requests": 160, "qps_start": 1.0, "rel_tol": 0.2},
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_bundled_simulate_config_meets_slo(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--config", os.path.join(CONFIGS, "yi34b_sarathi_strict.json"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["latency"]["tbt_p99"] <= report["slo_ms"]
    assert report["meets_slo"] is True
    with open(os.path.join(GOLDEN, "yi34b_sarathi_strict.report.json")) as f:
        assert (out / "report.json").read_text() == f.read()
    assert "tbt_p99=" in capsys.readouterr().out
    for name in ("events.jsonl", "requests.csv", "config.resolved.json"):
        assert (out / name).exists()
    first = json.loads((out / "events.jsonl").open().readline())
    assert first["kind"] == "Arrival"
    rows = read_csv(out / "requests.csv")
    assert len(rows) == 256


def test_missing_seed_is_config_error(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    del doc["workload"]["seed"]
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 2
    assert "workload.seed" in capsys.readouterr().err
    # --seed fills the gap
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path), "--seed", "1"]) == 0


def test_unknown_scheduler_lists_valid_values(tmp_path, capsys):
    doc = dict(TINY, replica={"scheduler": "Fifo"})
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    for name in ("RequestLevel", "VllmEager", "OrcaHybrid", "SarathiStallFree"):
        assert name in err


def test_unknown_field_and_bad_json(tmp_path, capsys):
    doc = dict(TINY, replica={"token_budgt": 512})
    assert main(["simulate", "--config", write(tmp_path, doc)]) == 2
    assert "token_budgt" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": "yi34b",\n  oops\n}')
    assert main(["simulate", "--config", str(bad)]) == 2
    assert "bad.json:3:" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x"])
    assert exc.value.code == 2
    cfg = write(tmp_path, TINY)
    assert main(["sweep", "--config", cfg, "--knob", "temperature", "--values", "1,2", "--out", str(tmp_path)]) == 2


def test_config_round_trip():
    for name in sorted(os.listdir(CONFIGS)):
        if "anchors" in name:
            continue
        cfg = load_config(os.path.join(CONFIGS, name))
        again = parse_config(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
        assert again == cfg


def test_parse_errors_name_the_field():
    with pytest.raises(ConfigError, match="workload.qps"):
        parse_config(dict(TINY, workload=dict(TINY["workload"], qps=-1)))
    with pytest.raises(ConfigError, match="slo"):
        parse_config(dict(TINY, slo="lenient"))
    with pytest.raises(ConfigError, match="workload.dataset"):
        parse_config(dict(TINY, workload={"dataset": "wiki", "seed": 1}))


def test_trace_file_workload(tmp_path):
    (tmp_path / "t.csv").write_text("arrival_ms,prompt_tokens,output_tokens\n0.0,100,3\n10.5,200,2\n")
    doc = {"model": "yi34b", "workload": {"trace": "t.csv", "seed": 0}}
    out = tmp_path / "o"
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(out)]) == 0
    assert len(read_csv(out / "requests.csv")) == 2


def test_capacity_grid_is_eight_rows(tmp_path):
    out = tmp_path / "cap"
    assert main(["capacity", "--config", write(tmp_path, TINY), "--out", str(out)]) == 0
    rows = read_csv(out / "capacity.csv")
    assert len(rows) == 8
    assert list(rows[0]) == ["scheduler", "slo", "qps", "infeasible"]
    assert {(r["scheduler"], r["slo"]) for r in rows} == {
        (s, m) for s in ("RequestLevel", "VllmEager", "OrcaHybrid", "SarathiStallFree")
        for m in ("strict", "relaxed")}
    probes = read_csv(out / "probes.csv")
    assert list(probes[0]) == ["scheduler", "slo", "qps", "tbt_p99", "ttft_median", "sched_delay_median", "pass"]


def test_capacity_infeasible_exit_code(tmp_path):
    doc = dict(TINY, capacity=dict(TINY["capacity"], slo_modes=[0.5], schedulers=["SarathiStallFree"]))
    out = tmp_path / "cap"
    assert main(["capacity", "--config", write(tmp_path, doc), "--out", str(out)]) == 1
    rows = read_csv(out / "capacity.csv")
    assert rows == [{"scheduler": "SarathiStallFree", "slo": "0.5ms", "qps": "0", "infeasible": "1"}]


def test_capacity_parallel_matches_serial(tmp_path):
    doc = dict(TINY, capacity=dict(TINY["capacity"], schedulers=["SarathiStallFree", "VllmEager"],
                                   slo_modes=["strict"]))
    cfg = write(tmp_path, doc)
    main(["capacity", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["capacity", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"])
    for name in ("capacity.csv", "probes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tau_sweep_tbt_grows(tmp_path):
    doc = dict(TINY, model="yi34b", replica={"scheduler": "SarathiStallFree"},
               workload={"dataset": "openchat", "qps": 0.6, "n_requests": 96, "seed": 3})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", write(tmp_path, doc), "--out", str(out),
                 "--knob", "tau", "--values", "512,1024,2048"]) == 0
    rows = [r for r in read_csv(out / "sweep.csv") if r["metric"] == "tbt_p99"]
    vals = [float(r["result"]) for r in rows]
    assert [r["value"] for r in rows] == ["512", "1024", "2048"]
    assert vals == sorted(vals)


def test_chunk_overhead_sweep(tmp_path):
    out = tmp_path / "ch"
    assert main(["sweep", "--config", os.path.join(CONFIGS, "yi34b_chunk_overhead.json"), "--out", str(out)]) == 0
    over = {int(r["value"]): float(r["result"]) for r in read_csv(out / "sweep.csv")
            if r["metric"] == "prefill_overhead"}
    assert over[512] <= 1.25
    assert over[2048] <= 1.05


def test_calibrate_command(tmp_path, capsys):
    out = tmp_path / "cal"
    assert main(["calibrate", "--config", os.path.join(CONFIGS, "falcon180b_anchors.json"), "--out", str(out)]) == 0
    doc = json.loads((out / "params.json").read_text())
    assert all(abs(r) < 0.15 for r in doc["residuals"])
    assert abs(doc["residuals"][0]) <= 0.1 and abs(doc["residuals"][1]) <= 0.1
    assert "residual=" in capsys.readouterr().out


def test_calibrate_underdetermined(tmp_path, capsys):
    src = json.loads(open(os.path.join(CONFIGS, "falcon180b_anchors.json")).read())
    src["anchors"] = src["anchors"][:3]
    assert main(["calibrate", "--config", write(tmp_path, src), "--out", str(tmp_path)]) == 2
    assert "unconstrained" in capsys.readouterr().err


def test_outputs_are_written_atomically(tmp_path):
    out = tmp_path / "run"
    main(["simulate", "--config", write(tmp_path, TINY), "--out", str(out)])
    assert not [n for n in os.listdir(out) if n.startswith(".tmp-")]
    shutil.rmtree(out)
