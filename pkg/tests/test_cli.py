"""End-to-end CLI behavior: subcommands, config plumbing, exit codes."""

import json

import numpy as np
import pytest

from onea import RunReport, load_module, save_module
from onea.cli import main

from conftest import make_module

RUN_ARGS = ["--set", "classes=4", "--set", "tasks=2",
            "--set", "samples_per_class=10", "--set", "epochs_base=1",
            "--set", "epochs_min=1"]


def _strip_timings(path):
    payload = json.loads(path.read_text())
    payload.pop("timings")
    return payload


def _two_modules(tmp_path, shape=(4, 2)):
    rng = np.random.default_rng(0)
    rows, cols = shape
    a = make_module([rng.normal(size=(rows, cols)),
                     rng.normal(size=(cols, rows))],
                    task_id=1, class_ids=(0, 1), sample_count=40,
                    bottleneck=cols)
    b = make_module([rng.normal(size=(rows, cols)),
                     rng.normal(size=(cols, rows))],
                    task_id=2, class_ids=(2,), sample_count=20,
                    bottleneck=cols)
    pa, pb = tmp_path / "a.onea", tmp_path / "b.onea"
    save_module(a, pa)
    save_module(b, pb)
    return pa, pb


# --------------------------------------------------------------- gen-stream

def test_gen_stream_stdout(capsys):
    assert main(["gen-stream", "--classes", "10", "--tasks", "2",
                 "--seed", "3"]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["schema_version"] == 1
    assert manifest["spec"]["classes"] == 10
    assert sum(t["class_count"] for t in manifest["tasks"]) == 10


def test_gen_stream_deterministic_files(tmp_path):
    out1, out2 = tmp_path / "m1.json", tmp_path / "m2.json"
    argv = ["gen-stream", "--classes", "12", "--tasks", "3", "--seed", "9"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_gen_stream_balanced(capsys):
    assert main(["gen-stream", "--classes", "10", "--tasks", "5",
                 "--gamma", "1.0", "--order", "balanced"]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert [t["class_count"] for t in manifest["tasks"]] == [2] * 5


def test_gen_stream_bad_flags_exit_2(capsys):
    assert main(["gen-stream", "--classes", "5", "--tasks", "9"]) == 2
    assert main(["gen-stream", "--classes", "10", "--tasks", "2",
                 "--order", "sideways"]) == 2


# ---------------------------------------------------------------------- run

def test_run_writes_reports_and_adapters(tmp_path, capsys):
    out = tmp_path / "runs"
    argv = ["run", *RUN_ARGS, "--set", 'strategies=["one-a","average"]',
            "--out-dir", str(out)]
    assert main(argv) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    for name in ("one-a", "average"):
        report = RunReport.from_json((out / f"report-{name}.json").read_text())
        assert report.schema_version == 1
        assert report.strategy == name
        assert report.config["classes"] == 4
        module = load_module(out / f"adapter-{name}.onea")
        assert module.meta.class_ids == set(range(4))


def test_run_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["run", *RUN_ARGS, "--set", 'strategies=["one-a"]']
    assert main(argv + ["--out-dir", str(a)]) == 0
    assert main(argv + ["--out-dir", str(b)]) == 0
    assert _strip_timings(a / "report-one-a.json") == \
        _strip_timings(b / "report-one-a.json")


def test_run_per_task_writes_one_adapter_per_task(tmp_path):
    out = tmp_path / "runs"
    argv = ["run", *RUN_ARGS, "--set", 'strategies=["per-task"]',
            "--out-dir", str(out)]
    assert main(argv) == 0
    assert (out / "adapter-per-task-t1.onea").exists()
    assert (out / "adapter-per-task-t2.onea").exists()


def test_run_parallelism_does_not_change_results(tmp_path, monkeypatch):
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    argv = ["run", *RUN_ARGS, "--set",
            'strategies=["one-a","average","symmetric"]']
    monkeypatch.setenv("ONEA_THREADS", "1")
    assert main(argv + ["--out-dir", str(serial)]) == 0
    monkeypatch.setenv("ONEA_THREADS", "3")
    assert main(argv + ["--out-dir", str(parallel)]) == 0
    for name in ("one-a", "average", "symmetric"):
        assert _strip_timings(serial / f"report-{name}.json") == \
            _strip_timings(parallel / f"report-{name}.json")


def test_run_rejects_bad_threads(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ONEA_THREADS", "many")
    argv = ["run", *RUN_ARGS, "--out-dir", str(tmp_path / "x")]
    assert main(argv) == 2
    assert "ONEA_THREADS" in capsys.readouterr().err


def test_run_config_file_and_overrides(tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"classes": 4, "tasks": 2,
                                "samples_per_class": 10, "epochs_base": 1,
                                "epochs_min": 1, "strategies": ["average"]}))
    out = tmp_path / "runs"
    argv = ["run", "--config", str(conf), "--set", "stream_seed=5",
            "--out-dir", str(out)]
    assert main(argv) == 0
    report = RunReport.from_json((out / "report-average.json").read_text())
    assert report.stream_seed == 5


@pytest.mark.parametrize("argv", [
    ["run", "--set", "no_such_key=1"],
    ["run", "--set", "classes"],                   # missing '='
    ["run", "--set", "classes=maybe"],             # wrong type
    ["run", "--set", "epochs_base=1.5"],           # float for int
    ["run", "--set", 'strategies=["warp"]'],       # unknown strategy
    ["run", "--set", "strategies=[]"],
])
def test_run_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out-dir", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


def test_run_rejects_bad_config_file(tmp_path, capsys):
    conf = tmp_path / "conf.json"
    conf.write_text("{broken")
    assert main(["run", "--config", str(conf)]) == 2
    conf.write_text(json.dumps({"intruder": 1}))
    assert main(["run", "--config", str(conf)]) == 2
    conf.write_text(json.dumps([1, 2]))
    assert main(["run", "--config", str(conf)]) == 2
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 4


# -------------------------------------------------------------------- merge

def test_merge_one_a_roundtrip(tmp_path, capsys):
    pa, pb = _two_modules(tmp_path)
    out = tmp_path / "merged.onea"
    assert main(["merge", str(pa), str(pb), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "base: task 1" in stdout            # 40 samples beats 20
    assert "effective rank" in stdout
    merged = load_module(out)
    assert merged.meta.class_ids == {0, 1, 2}
    assert merged.meta.sample_count == 60


def test_merge_self_is_near_identity(tmp_path):
    pa, _ = _two_modules(tmp_path)
    out = tmp_path / "self.onea"
    assert main(["merge", str(pa), str(pa), "--out", str(out)]) == 0
    original = load_module(pa)
    merged = load_module(out)
    for got, want in zip(merged.layers, original.layers):
        # two float32 quantization passes on top of the 1e-8 merge math
        assert np.allclose(got, want, atol=1e-5)


def test_merge_average_and_symmetric(tmp_path, capsys):
    pa, pb = _two_modules(tmp_path)
    for strategy in ("average", "symmetric"):
        out = tmp_path / f"{strategy}.onea"
        assert main(["merge", str(pa), str(pb), "--out", str(out),
                     "--strategy", strategy, "--n-prev", "2"]) == 0
        assert load_module(out).meta.class_ids == {0, 1, 2}
    outputs = [load_module(tmp_path / f"{s}.onea").layers[0]
               for s in ("average", "symmetric")]
    assert np.linalg.norm(outputs[0] - outputs[1]) > 0.0


def test_merge_error_exit_codes(tmp_path, capsys):
    pa, _ = _two_modules(tmp_path)
    other = tmp_path / "wide.onea"
    save_module(make_module([np.ones((6, 3)), np.ones((3, 6))], task_id=3,
                            bottleneck=3), other)
    out = tmp_path / "out.onea"
    assert main(["merge", str(pa), str(other), "--out", str(out)]) == 2

    corrupt = tmp_path / "corrupt.onea"
    corrupt.write_bytes(b"JUNKJUNKJUNK")
    assert main(["merge", str(pa), str(corrupt), "--out", str(out)]) == 4
    assert "byte offset" in capsys.readouterr().err

    assert main(["merge", str(pa), str(tmp_path / "absent.onea"),
                 "--out", str(out)]) == 4


# --------------------------------------------------------------- eval

def _run_one(tmp_path):
    out = tmp_path / "runs"
    assert main(["run", *RUN_ARGS, "--set", 'strategies=["one-a","average"]',
                 "--out-dir", str(out)]) == 0
    return out


def test_eval_prints_metrics(tmp_path, capsys):
    out = _run_one(tmp_path)
    capsys.readouterr()
    assert main(["eval", str(out / "report-one-a.json")]) == 0
    stdout = capsys.readouterr().out
    payload = json.loads(stdout[:stdout.rindex("\n", 0, -1)])
    assert set(payload) == {"last_accuracy", "avg_accuracy",
                            "weighted_avg_accuracy", "forgetting"}
    csv_line = stdout.strip().splitlines()[-1]
    assert len(csv_line.split(",")) == 4


def test_eval_error_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    assert main(["eval", str(bad)]) == 2
    assert main(["eval", str(tmp_path / "absent.json")]) == 4


# ------------------------------------------------------------------ compare

def test_compare_table_and_outputs(tmp_path, capsys):
    out = _run_one(tmp_path)
    capsys.readouterr()
    csv_path = tmp_path / "table.csv"
    json_path = tmp_path / "table.json"
    assert main(["compare", str(out / "report-one-a.json"),
                 str(out / "report-average.json"),
                 "--out-csv", str(csv_path), "--out-json", str(json_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split(",")[:2] == ["strategy", "last_accuracy"]
    assert len(lines) == 3
    assert lines[1].startswith("one-a,")
    assert csv_path.read_text().strip() == "\n".join(lines)
    payload = json.loads(json_path.read_text())
    assert payload["schema_version"] == 1
    assert len(payload["rows"]) == 2


def test_compare_rejects_mismatched_streams(tmp_path, capsys):
    out = _run_one(tmp_path)
    moved = json.loads((out / "report-average.json").read_text())
    moved["stream_seed"] = 1
    other_seed = tmp_path / "other-seed.json"
    other_seed.write_text(json.dumps(moved))
    assert main(["compare", str(out / "report-one-a.json"),
                 str(other_seed)]) == 2

    moved = json.loads((out / "report-average.json").read_text())
    moved["config"]["classes"] = 9
    other_shape = tmp_path / "other-shape.json"
    other_shape.write_text(json.dumps(moved))
    assert main(["compare", str(out / "report-one-a.json"),
                 str(other_shape)]) == 2
    assert "stream" in capsys.readouterr().err
