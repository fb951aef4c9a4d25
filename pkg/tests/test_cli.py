import json
import shutil

import pytest
import yaml

from conftest import FIXTURES, png
from pixelpilot.cli import main
from scenarios import reminder_entry


@pytest.fixture
def cfg(tmp_path):
    for name in ("scripted.yaml", "two_pages.yaml"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path / "scripted.yaml"


def edit(cfg, fn):
    d = yaml.safe_load(cfg.read_text())
    fn(d)
    cfg.write_text(yaml.safe_dump(d))
    return cfg


# -- run ---------------------------------------------------------------------------------

def test_run_success(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "What is the answer?", "--config", str(cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "status: complete" in text and "answer: 42" in text
    assert (out / "trajectory.jsonl").is_file()


def test_run_missing_grounder(cfg, capsys):
    edit(cfg, lambda d: d["backends"].update(grounder=None))
    assert main(["run", "x", "--config", str(cfg)]) == 2
    assert "grounder" in capsys.readouterr().err


def test_run_deadline_zero(cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "x", "--config", str(cfg), "--out", str(out), "--deadline", "0"]) == 1
    footer = json.loads((out / "trajectory.jsonl").read_text().splitlines()[-1])
    assert footer["final_state"]["status"] == "timed_out"


def test_run_bad_config(tmp_path):
    assert main(["run", "x", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_bad_flags():
    assert main(["run"]) == 2
    assert main(["fly"]) == 2


# -- bench -------------------------------------------------------------------------------

def showdown_dataset(tmp_path):
    (tmp_path / "img.png").write_bytes(png((100, 100)))
    rows = [
        {"id": "a", "image": "img.png", "instruction": "Click element a", "bbox": [10, 10, 20, 20]},
        {"id": "b", "image": "img.png", "instruction": "Click element b", "bbox": [50, 50, 60, 60]},
        {"id": "b2", "image": "img.png", "instruction": "Click element b again", "bbox": [50, 50, 60, 60]},
        {"id": "a2", "image": "img.png", "instruction": "Click element a again", "bbox": [10, 10, 20, 20]},
    ]
    f = tmp_path / "showdown.jsonl"
    f.write_text("\n".join(json.dumps(r) for r in rows))
    return f


def test_bench_showdown(cfg, tmp_path, capsys):
    report = tmp_path / "reports" / "sd.json"
    assert main(["bench", "showdown", "--dataset", str(showdown_dataset(tmp_path)), "--config", str(cfg), "--report", str(report)]) == 0
    assert "Top-1 accuracy: 100.00%" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert data["total"] == 4 and data["accuracy_percent"] == 100.0
    assert report.with_suffix(".txt").is_file()


def test_bench_webvoyager(cfg, tmp_path, capsys):
    f = tmp_path / "tasks.jsonl"
    f.write_text("\n".join(json.dumps({"web_name": "Sim", "id": f"t{i}", "ques": "What is the answer?", "web": "https://sim.test/home", "answer": "42"}) for i in range(2)))
    report = tmp_path / "wv.json"
    assert main(["bench", "webvoyager", "--dataset", str(f), "--config", str(cfg), "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["status_histogram"] == {"complete": 2}
    assert data["success_percent"] == 100.0
    assert "Success rate: 100.00%" in capsys.readouterr().out


def test_bench_bad_dataset(cfg, tmp_path):
    assert main(["bench", "showdown", "--dataset", str(tmp_path / "none.jsonl"), "--config", str(cfg)]) == 2
    (tmp_path / "bad.jsonl").write_text("{")
    assert main(["bench", "webvoyager", "--dataset", str(tmp_path / "bad.jsonl"), "--config", str(cfg)]) == 2


def test_bench_errors_exit_one(cfg, tmp_path):
    edit(cfg, lambda d: d["backends"].update(grounder={"type": "scripted", "replies": ["Action: wait()"]}))
    # the scripted grounder runs out after one sample; later calls fail
    d = showdown_dataset(tmp_path)
    assert main(["bench", "showdown", "--dataset", str(d), "--config", str(cfg), "--concurrency", "1"]) == 1


# -- augment -----------------------------------------------------------------------------

def write_annotations(path, entries):
    rows = [
        {"id": e.id, "image": e.image_ref, "platform": e.platform, "bbox": list(e.bbox), "resolution": list(e.image_size),
         "type": e.element_type, "OCR": e.ocr_text, "name": e.name, "purpose": e.purpose, "expectation": e.expected_result}
        for e in entries
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    return path


def test_augment_reminder_entry(tmp_path, capsys):
    src = write_annotations(tmp_path / "in.jsonl", [reminder_entry()])
    out = tmp_path / "train.jsonl"
    assert main(["augment", "--in", str(src), "--out", str(out), "--seed", "4"]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert "samples out: 3" in capsys.readouterr().out
    first = out.read_bytes()
    assert main(["augment", "--in", str(src), "--out", str(out), "--seed", "4"]) == 0
    assert out.read_bytes() == first


def test_augment_empty_input(tmp_path, capsys):
    src = tmp_path / "in.jsonl"
    src.write_text("")
    assert main(["augment", "--in", str(src), "--out", str(tmp_path / "o.jsonl")]) == 0
    assert "samples out: 0" in capsys.readouterr().out


def test_augment_io_errors(tmp_path):
    assert main(["augment", "--in", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o.jsonl")]) == 2
    src = write_annotations(tmp_path / "in.jsonl", [reminder_entry()])
    (tmp_path / "blocker").write_text("")
    assert main(["augment", "--in", str(src), "--out", str(tmp_path / "blocker" / "o.jsonl")]) == 2
    assert main(["augment", "--in", str(src), "--out", str(tmp_path / "o.jsonl"), "--variants", "0"]) == 2


# -- replay ------------------------------------------------------------------------------

def test_replay(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "What is the answer?", "--config", str(cfg), "--out", str(out)])
    capsys.readouterr()
    assert main(["replay", "--trajectory", str(out), "--step", "1"]) == 0
    text = capsys.readouterr().out
    footer = json.loads((out / "trajectory.jsonl").read_text().splitlines()[-1])
    assert f"steps: {footer['steps']}" in text
    assert "before: " in text and "screenshots/" in text
    assert main(["replay", "--trajectory", str(out), "--step", "9"]) == 2


def test_replay_attribute_failed_run(cfg, tmp_path, capsys):
    edit(cfg, lambda d: d["backends"].update(verifier={"type": "lookup", "rules": [], "default": "OUTCOME: stalled"}))
    edit(cfg, lambda d: d["backends"].update(planner={"type": "lookup", "rules": [], "default": "<step>Click 'Search'</step>"}))
    edit(cfg, lambda d: d["backends"].update(reasoner={"type": "lookup", "rules": [], "default": "<action>Click the 'Search' button</action>"}))
    out = tmp_path / "run"
    assert main(["run", "x", "--config", str(cfg), "--out", str(out)]) == 1
    capsys.readouterr()
    assert main(["replay", "--trajectory", str(out), "--attribute"]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("attribution:")][0]
    assert line.split(": ")[1] in ("planning", "reasoning", "action", "verification")


def test_replay_truncated(cfg, tmp_path):
    out = tmp_path / "run"
    main(["run", "x", "--config", str(cfg), "--out", str(out)])
    f = out / "trajectory.jsonl"
    f.write_text("\n".join(f.read_text().splitlines()[:-1]))
    assert main(["replay", "--trajectory", str(f)]) == 2
