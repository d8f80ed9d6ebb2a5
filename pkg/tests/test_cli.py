import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from eventgpt import cli
from eventgpt.events import read_pgm, read_stream
from eventgpt.model import TINY
from eventgpt.sim import read_manifest

SIM = {"resolution": [32, 32], "size_range": [8.0, 10.0], "duration": 200_000}
WARM = {"encoder_steps": 2, "encoder_batch": 4, "lm_steps": 2, "lm_batch": 2}


def write(path: Path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "sim.json", {"schema_version": 1, "n": 10, "sim": SIM})
    assert cli.main(["simulate", "--config", cfg, "--seed", "2", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = write(dataset / "train.json", {
        "model": TINY.to_dict(), "warm_start": WARM,
        "stages": [{"stage": k, "max_steps": 2, "batch_size": 2} for k in (1, 2, 3)],
    })
    out = dataset / "run"
    code = cli.main(["train", "--pipeline", "--config", cfg, "--manifest", str(dataset / "data" / "train.jsonl"),
                     "--out", str(out)])
    assert code == 0
    return out / "stage3"


def first_event_file(dataset) -> str:
    rec = read_manifest(dataset / "data" / "train.jsonl")[0]
    return str(dataset / "data" / rec.events)


def test_simulate_writes_all_splits(dataset):
    total = sum(len(read_manifest(dataset / "data" / f"{s}.jsonl")) for s in ("train", "val", "test"))
    assert total == 10


def test_flags_override_config_file(tmp_path):
    cfg = write(tmp_path / "c.json", {"n": 4, "sim": SIM})
    assert cli.main(["simulate", "--config", cfg, "--n", "3", "--out", str(tmp_path / "d")]) == 0
    assert sum(len(read_manifest(tmp_path / "d" / f"{s}.jsonl")) for s in ("train", "val", "test")) == 3


@pytest.mark.parametrize("doc, field", [({"n": "ten"}, "n"), ({"n": 0}, "n"), ({"colour": 1}, "<root>"),
                                        ({"schema_version": 2}, "schema_version"),
                                        ({"sim": {"resolution": [32]}}, "sim.resolution")])
def test_schema_violation_names_field_and_writes_nothing(tmp_path, capsys, doc, field):
    cfg = write(tmp_path / "bad.json", doc)
    out = tmp_path / "never"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == cli.EXIT_CONFIG
    assert f"field {field}" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_json_and_missing_config(tmp_path):
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["gradcheck", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG
    assert cli.main(["gradcheck", "--config", str(tmp_path / "absent.json")]) == cli.EXIT_MISSING


def test_print_schema_is_a_json_schema(capsys):
    assert cli.main(["train", "--print-schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert schema["type"] == "object" and "stages" in schema["properties"]


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["simulate", "--frobnicate"])
    assert info.value.code == cli.EXIT_USAGE


def test_render_writes_pgm(dataset, tmp_path):
    events = first_event_file(dataset)
    assert cli.main(["render", events, "--t0", "0", "--t1", "100000", "--out", str(tmp_path)]) == 0
    img = read_pgm(tmp_path / "frame.pgm")
    assert img.shape == (32, 32)


def test_render_errors(dataset, tmp_path):
    assert cli.main(["render", str(tmp_path / "no.evst"), "--t0", "0", "--t1", "5", "--out", str(tmp_path)]) == 4
    bad = tmp_path / "bad.evst"
    bad.write_bytes(b"NOPE" + bytes(30))
    assert cli.main(["render", str(bad), "--t0", "0", "--t1", "5", "--out", str(tmp_path)]) == cli.EXIT_FORMAT
    events = first_event_file(dataset)
    assert cli.main(["render", events, "--t0", "9", "--t1", "9", "--out", str(tmp_path)]) == cli.EXIT_FORMAT


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    assert cli.main(["gradcheck", "--instances", "2", "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["passed"] for r in rows.values()) and "end_to_end_loss" in rows
    assert "FAIL" not in capsys.readouterr().out


def test_train_requires_mode_and_manifest(dataset, tmp_path):
    manifest = str(dataset / "data" / "train.jsonl")
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--stage", "1", "--manifest", str(tmp_path / "x.jsonl"),
                     "--out", str(tmp_path)]) == cli.EXIT_MISSING


def test_train_single_stage(dataset, tmp_path):
    cfg = write(tmp_path / "t.json", {"model": TINY.to_dict()})
    code = cli.main(["train", "--stage", "1", "--steps", "1", "--config", cfg,
                     "--manifest", str(dataset / "data" / "train.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 0
    report = json.loads((tmp_path / "o" / "stage1_report.json").read_text())
    assert report["trainable"] and all(n.startswith("projector.") for n in report["trainable"])


def test_pipeline_writes_every_stage(trained):
    for name in ("init", "warm_start", "stage1", "stage2", "stage3"):
        assert (trained.parent / name / "config.json").exists()


def test_chat_with_prompts(dataset, trained):
    out = io.StringIO()
    opts = {**cli.DEFAULTS["chat"], "checkpoint": str(trained), "events": first_event_file(dataset),
            "prompt": ["What shape is it?", "Which way?"], "max_new": 4}
    assert cli.cmd_chat(opts, stdout=out) == 0
    text = out.getvalue()
    assert f"event prefix: {TINY.prefix_len} tokens" in text
    assert text.count("assistant:") == 2 and "bin 2:" in text


def test_chat_reads_stdin_until_eof(dataset, trained):
    out = io.StringIO()
    opts = {**cli.DEFAULTS["chat"], "checkpoint": str(trained), "events": first_event_file(dataset), "max_new": 2}
    assert cli.cmd_chat(opts, stdin=io.StringIO("one\n\ntwo\n"), stdout=out) == 0
    assert out.getvalue().count("assistant:") == 2


def test_chat_rejects_mismatched_sensor(dataset, trained, tmp_path):
    from eventgpt.events import EventStream, write_stream
    path = tmp_path / "big.evst"
    write_stream(path, EventStream(64, 64, [1, 2], [0, 1], [0, 1], [1, -1]))
    assert cli.main(["chat", str(trained), str(path), "--prompt", "hi"]) == cli.EXIT_FORMAT


def test_chat_missing_or_incomplete_checkpoint(dataset, tmp_path):
    events = first_event_file(dataset)
    assert cli.main(["chat", str(tmp_path / "none"), events, "--prompt", "x"]) == cli.EXIT_MISSING
    (tmp_path / "empty").mkdir()
    assert cli.main(["chat", str(tmp_path / "empty"), events, "--prompt", "x"]) == cli.EXIT_FORMAT


def test_eval_writes_metrics(dataset, trained, tmp_path):
    code = cli.main(["eval", str(trained), str(dataset / "data" / "test.jsonl"), "--out", str(tmp_path)])
    assert code == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert {"vqa_shape", "vqa_direction", "vqa_speed"} <= set(metrics)


def test_eval_judge_without_endpoint(dataset, trained, tmp_path, monkeypatch):
    monkeypatch.delenv("EVENTGPT_JUDGE_URL", raising=False)
    code = cli.main(["eval", str(trained), str(dataset / "data" / "test.jsonl"), "--judge", "--out", str(tmp_path)])
    assert code == cli.EXIT_JUDGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eventgpt", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
