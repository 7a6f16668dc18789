import json

import numpy as np
import pytest
import yaml

from multimodal_ad.cli import RESULT_HEADER, main, read_results
from multimodal_ad.data.corpus import parse_manifest
from multimodal_ad.ensemble import combine

TINY = {
    "data": {"train": {"n_frames": 30}, "eval": {"n_frames": 24}},
    "anglenet": {"branch_widths": [2, 2], "post_width": 2, "hidden": [4, 4]},
    "pretrain": {"n_pairs": 40, "train": {"epochs": 1}},
    "finetune": {"epochs": 1, "pairs_per_epoch": 16},
    "imu": {"train": {"epochs": 3}},
    "attack": {"n_eval_pairs": 12, "uap_images": 10, "uap_passes": 1, "attack": {"iterations": 2}},
    "defense": {"n_train_pairs": 16, "defense": {"epochs": 1}},
}


def _run(tmp, *argv):
    return main([*argv, "--config", str(tmp / "tiny.yaml"), "--work-dir", str(tmp / "work")])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    (tmp / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    for cmd in ("gen-data", "train", "detect", "eval"):
        assert _run(tmp, cmd) == 0, cmd
    return tmp


def test_detection_rows_are_self_consistent(pipeline):
    path = pipeline / "work" / "reports" / "detections.txt"
    assert path.read_text().splitlines()[0] == RESULT_HEADER
    rows = read_results(path)
    assert len(rows) == 24
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
    for t, d, m, l, n, verdict in rows:
        assert abs(n - combine(d, m, l)) <= 3e-6  # six printed decimals
        if abs(n - 1.0) > 1e-6:
            assert verdict == ("abnormal" if n >= 1.0 else "normal")


def test_eval_metrics_match_a_recount(pipeline):
    work = pipeline / "work"
    metrics = json.loads((work / "reports" / "metrics.json").read_text())
    labels = parse_manifest(work / "corpus" / "eval" / "manifest.txt").labels
    rows = read_results(work / "reports" / "detections.txt")
    pairs = [(r[5], labels[round(r[0], 6)].label) for r in rows]
    assert metrics["tp"] == pairs.count(("abnormal", "abnormal"))
    assert metrics["fn"] == pairs.count(("normal", "abnormal"))
    assert metrics["fp"] == pairs.count(("abnormal", "normal"))
    assert metrics["accuracy"] == pytest.approx(sum(p == t for p, t in pairs) / len(pairs))


def test_attack_and_defend_write_reports(pipeline):
    assert _run(pipeline, "attack") == 0
    assert _run(pipeline, "defend") == 0
    reports = pipeline / "work" / "reports"
    attack = json.loads((reports / "attack.json").read_text())
    assert [r["attack"] for r in attack["rows"]] == ["clean", "fgsm", "pgd", "uap", "patch"]
    defend = json.loads((reports / "defend.json").read_text())
    assert [r["attack"] for r in defend["rows"]] == ["clean", "fgsm", "pgd", "uap", "patch"]
    assert (pipeline / "work" / "models" / "anglenet_hardened.bin").exists()


def test_training_is_byte_reproducible(pipeline, tmp_path):
    (tmp_path / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert _run(tmp_path, "gen-data") == 0
    assert _run(tmp_path, "train") == 0
    for name in ("anglenet.bin", "imu.bin"):
        assert (tmp_path / "work" / "models" / name).read_bytes() == \
            (pipeline / "work" / "models" / name).read_bytes()


def test_training_refuses_abnormal_frames(pipeline, capsys):
    tmp = pipeline
    code = main(["train", "--config", str(tmp / "tiny.yaml"), "--work-dir", str(tmp / "bad"),
                 "--set", "paths.work_dir=ignored"])
    assert code == 2  # no corpus yet
    assert main(["gen-data", "--config", str(tmp / "tiny.yaml"), "--work-dir", str(tmp / "bad"),
                 "--set", "data.train.anomaly_fraction=0.2"]) == 0
    capsys.readouterr()
    assert main(["train", "--config", str(tmp / "tiny.yaml"), "--work-dir", str(tmp / "bad")]) == 2
    assert "abnormal" in capsys.readouterr().err


@pytest.mark.parametrize("argv, message", [
    (["detect", "--work-dir", "/nonexistent/work"], "missing"),
    (["train", "--set", "pretrain.nope=1"], "unknown key"),
    (["train", "--set", "pretrain"], "section.key=value"),
    (["gen-data", "--set", "attack.attack.epsilon=3"], "epsilon"),
])
def test_errors_exit_with_code_2(argv, message, capsys):
    assert main(argv) == 2
    assert message in capsys.readouterr().err


def test_master_seed_changes_the_corpus(tmp_path):
    (tmp_path / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--config", str(tmp_path / "tiny.yaml"), "--work-dir", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(tmp_path / "tiny.yaml"), "--work-dir", str(tmp_path / "b"),
                 "--seed", "1"]) == 0
    a = (tmp_path / "a" / "corpus" / "eval" / "manifest.txt").read_text()
    b = (tmp_path / "b" / "corpus" / "eval" / "manifest.txt").read_text()
    assert a != b


def test_dump_config_round_trips(tmp_path):
    out = tmp_path / "effective.yaml"
    assert main(["gen-data", "--work-dir", str(tmp_path / "w"), "--set", "data.eval.n_frames=5",
                 "--set", "data.train.n_frames=5", "--dump-config", str(out)]) == 0
    data = yaml.safe_load(out.read_text())
    assert data["data"]["eval"]["n_frames"] == 5 and data["paths"]["work_dir"] == str(tmp_path / "w")
