import csv
import json

import pytest

from ffdet.cli import build_parser, main
from ffdet.config import dumps

from conftest import tiny_run_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "4", "--size", "64", "--face-size", "12,40", "--seed", "3"]) == 0
    (root / "cfg.json").write_text(dumps(tiny_run_config(steps=3)))
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    ck = workspace / "m.ckpt"
    code = main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                 "--out", str(ck), "--log", str(workspace / "log.csv")])
    assert code == 0
    return ck


def test_train_outputs(workspace, trained):
    rows = list(csv.reader(open(workspace / "log.csv")))
    assert rows[0] == ["step", "L_c", "L_r", "L_s", "total", "lr"] and len(rows) == 4
    echoed = json.loads((workspace / "log.config.json").read_text())
    assert echoed["train"]["max_steps"] == 3


def test_flag_beats_config(workspace, tmp_path):
    log = tmp_path / "l.csv"
    assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "m.ckpt"), "--log", str(log), "--max-steps", "2", "--lambda2", "0.2"]) == 0
    cfg = json.loads((tmp_path / "l.config.json").read_text())
    assert cfg["train"]["max_steps"] == 2 and cfg["loss"]["lambda2"] == 0.2
    assert cfg["model"]["head"]["width"] == 8  # from the file, not the default


def test_eval_report_and_idempotence(workspace, trained, tmp_path):
    args = ["eval", "--ckpt", str(trained), "--data", str(workspace / "data"), "--scales", "64"]
    assert main(args + ["--report", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--report", str(tmp_path / "b.json")]) == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    for key in ("ap", "ap_small", "ap_medium", "ap_large", "pr_curve", "config"):
        assert key in rep
    assert rep["config"]["detect"]["scales"] == [64]
    for suffix in (".json", ".pr.csv", ".pr.png"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    assert (tmp_path / "a.pr.png").read_bytes()[:4] == b"\x89PNG"


def test_detect_jsonl(workspace, trained, tmp_path, capsys):
    images = sorted(str(p) for p in (workspace / "data" / "images").iterdir())[:2]
    out = tmp_path / "d.jsonl"
    assert main(["detect", "--ckpt", str(trained), "--image", *images, "--out", str(out), "--score", "0.0"]) == 0
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert [x["image"] for x in lines] == images
    d = lines[0]["detections"][0]
    assert len(d["box"]) == 4 and 0.0 <= d["score"] <= 1.0
    assert (tmp_path / "d.config.json").is_file()
    assert main(["detect", "--ckpt", str(trained), "--image", images[0], "--score", "0.0"]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0]) == lines[0]


def test_ablate(workspace, tmp_path):
    out = tmp_path / "abl.csv"
    code = main(["ablate", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                 "--variants", "eq1,seg-off", "--seeds", "1,2", "--out", str(out), "--scales", "64"])
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4
    assert [r["variant"] for r in rows] == ["eq1", "eq1", "seg-off", "seg-off"]
    assert (tmp_path / "abl.png").is_file() and (tmp_path / "abl.summary.csv").is_file()


@pytest.mark.parametrize("argv,code", [
    (["detect", "--ckpt", "/nonexistent.ckpt", "--image", "x.pgm"], 2),
    (["train", "--data", "/nonexistent", "--out", "x"], 2),
    (["train"], 1),
    (["bogus"], 1),
    (["ablate", "--data", "d", "--out", "o", "--variants", "nope"], 1),
    (["eval", "--ckpt", "c", "--data", "d", "--report", "r", "--nms", "1.5"], 1),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err.strip()


def test_missing_checkpoint_names_path(capsys):
    main(["detect", "--ckpt", "/nonexistent.ckpt", "--image", "x.pgm"])
    assert "/nonexistent.ckpt" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit(workspace, tmp_path):
    cfg = tiny_run_config(steps=2, base_lr=1e30, augment=False)
    (tmp_path / "c.json").write_text(dumps(cfg))
    code = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "m.ckpt")])
    assert code == 3


def test_help_lists_defaults():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        text = sub.format_help()
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            assert action.help and ("default" in sub.formatter_class(name)._get_help_string(action)
                                    or action.required), (name, action.dest)
        assert "--" in text


def test_help_exit_zero(capsys):
    assert main(["train", "--help"]) == 0
    assert "--max-steps" in capsys.readouterr().out


def test_gradcheck_single_seed(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out
