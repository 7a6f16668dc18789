"""End-to-end acceptance checks, each at its stated tolerance.

Every test records one PASS/FAIL line that the terminal summary prints. The two
full pipeline runs (gen-data, train, detect, eval, attack, defend) are shared by
module-scoped fixtures.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import gradcases
from multimodal_ad.adversarial import AttackConfig, craft_uap, fgsm_batch, pgd_batch
from multimodal_ad.anglenet import frame_accuracy, predict_angles
from multimodal_ad.cli import main
from multimodal_ad.config import RunConfig
from multimodal_ad.data.serialization import load_anglenet
from multimodal_ad.data.synthetic import anomaly_mask, make_rotation_pairs, simulate_imu
from multimodal_ad.ensemble import classify, combine
from multimodal_ad.imu import fit_imu_detector

pytestmark = pytest.mark.slow

COMMANDS = ("gen-data", "train", "detect", "eval", "attack", "defend")


def _pipeline(work: Path) -> dict[str, float]:
    timings = {}
    for cmd in COMMANDS:
        t0 = time.perf_counter()
        extra = ["--quiet"] if cmd == "detect" else []
        assert main([cmd, "--work-dir", str(work), *extra]) == 0, cmd
        timings[cmd] = time.perf_counter() - t0
    return timings


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    work = tmp_path_factory.mktemp("run_a") / "work"
    return work, _pipeline(work)


@pytest.fixture(scope="module")
def run_b(tmp_path_factory):
    work = tmp_path_factory.mktemp("run_b") / "work"
    return work, _pipeline(work)


def _json(work, name):
    return json.loads((work / "reports" / name).read_text())


def test_c1_gradient_checks(acceptance):
    t0 = time.perf_counter()
    errors = gradcases.run_all(seed=0, n_points=10)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-3 and elapsed < 60
    acceptance.record("C1 gradient checks", ok, f"{len(errors)} ops x 10 points, worst {worst} "
                      f"rel err {errors[worst]:.2e} (<= 1e-3), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c2_exact_formulas(acceptance):
    from multimodal_ad.imu import Calibration, sigma_data

    cal = Calibration(0.0123, 0.0456)
    checks = {
        "sigma_d(L_max)=1": abs(sigma_data(cal.l_max_data, cal) - 1.0) <= 1e-9,
        "sigma_d(0)=0": abs(sigma_data(0.0, cal)) <= 1e-9,
        "combine(1,1,1)=2.65": abs(combine(1, 1, 1) - 2.65) <= 1e-9,
        "combine(.5,.4,.2)=1.01": abs(combine(0.5, 0.4, 0.2) - 1.01) <= 1e-9,
        "classify(1.0)=abnormal": classify(1.0).label == "abnormal",
    }
    ok = all(checks.values())
    acceptance.record("C2 exact formulas", ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def test_c3_anglenet_accuracy(run_a, acceptance):
    work, timings = run_a
    model, _ = load_anglenet(work / "models" / "anglenet_pretrained.bin")
    # fresh pairs from a seed the training pairs never use
    refs, tests, angles = make_rotation_pairs(1000, seed=777)
    pred = predict_angles(model, refs, tests)
    mae = float(np.mean(np.abs(pred - angles)))
    acc = frame_accuracy(pred, angles, 30.0)
    n_pairs = RunConfig().pretrain.n_pairs
    ok = mae <= 5.0 and acc >= 0.90 and timings["train"] <= 600
    acceptance.record("C3 AngleNet", ok, f"pretrained on {n_pairs} pairs: MAE {mae:.2f} deg (<= 5), "
                      f"accuracy@30 {acc:.3f} (>= 0.90), whole train command {timings['train']:.0f} s (<= 600 s)")
    assert ok


def test_c4_imu_detection(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    t = np.arange(1000) * 0.1
    data, mag = simulate_imu(t, np.zeros(1000, bool), rng)
    det, _ = fit_imu_detector(data, mag)
    rows, ok = [], True
    for mult in (4.0, 8.0, 16.0):
        ab = anomaly_mask(1000, 0.37, rng)
        d, m = simulate_imu(200 + t, ab, rng, variance_multiplier=mult)
        sd, sm = det.sigmas(d, m)
        acc_d, acc_m = np.mean((sd >= 1) == ab), np.mean((sm >= 1) == ab)
        fn_d = int(np.sum((sd < 1) & ab))
        fn_imu = int(np.sum((sd + 0.9 * sm < 1) & ab))
        if mult == 4.0:
            ok &= acc_d >= 0.95 and acc_m >= 0.95
            rows.append(f"x4: data acc {acc_d:.3f}, mag acc {acc_m:.3f} (>= 0.95)")
        else:
            ok &= fn_imu == 0
            rows.append(f"x{mult:g}: IMU FN {fn_imu} (= 0; data-only FN {fn_d})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 120
    acceptance.record("C4 IMU", ok, "; ".join(rows) + f"; {elapsed:.1f} s (<= 120 s)")
    assert ok


def test_c5_ensemble(run_a, acceptance):
    work, _ = run_a
    m = _json(work, "metrics.json")
    ok = m["total"] == 669 and m["accuracy"] >= 0.95 and m["f1"] >= 0.95
    acceptance.record("C5 ensemble", ok, f"{m['total']} frames: accuracy {m['accuracy']:.4f} (>= 0.95), "
                      f"F1 {m['f1']:.4f} (>= 0.95), FN {m['fn']}, FP {m['fp']}")
    assert ok


def test_c6_perturbation_bounds(run_a, acceptance):
    work, _ = run_a
    cfg = RunConfig()
    model, _ = load_anglenet(work / "models" / "anglenet.bin")
    refs, tests, angles = make_rotation_pairs(cfg.attack.n_eval_pairs, seed=cfg.attack.eval_seed)
    x0 = tests[:, None].astype(np.float64)
    eps = cfg.attack.attack.epsilon
    f = fgsm_batch(model, refs, tests, angles, eps)
    p = pgd_batch(model, refs, tests, angles, cfg.attack.attack)
    u = craft_uap(model, *make_rotation_pairs(cfg.attack.uap_images, seed=cfg.attack.eval_seed + 1),
                  cfg.attack.attack, max_passes=1).apply(tests)[:, None]
    worst, ok = {}, True
    for name, adv in (("fgsm", f), ("pgd", p), ("uap", u)):
        worst[name] = float(np.abs(adv.astype(np.float64) - x0).max())
        ok &= worst[name] <= eps and adv.min() >= 0 and adv.max() <= 1
    one = pgd_batch(model, refs, tests, angles, AttackConfig(epsilon=eps, iterations=1, step_size=eps,
                                                             random_start=False))
    same = one.tobytes() == f.tobytes()
    ok &= same
    acceptance.record("C6 perturbation bounds", ok,
                      ", ".join(f"{k} max |delta| {v:.10f}" for k, v in worst.items())
                      + f" (<= {eps}), all in [0, 1]; PGD(1 step) == FGSM bitwise: {same}")
    assert ok


def test_c7_attack_ordering_and_defense(run_a, acceptance):
    work, _ = run_a
    acc = {r["attack"]: r["attacked_accuracy"] for r in _json(work, "attack.json")["rows"]}
    rows = {r["attack"]: r for r in _json(work, "defend.json")["rows"]}
    gain = rows["pgd"]["hardened_accuracy"] - rows["pgd"]["baseline_accuracy"]
    drop = rows["clean"]["baseline_accuracy"] - rows["clean"]["hardened_accuracy"]
    order = acc["pgd"] < acc["fgsm"] < acc["clean"]
    ok = order and gain >= 0.20 and drop <= 0.05
    acceptance.record("C7 attacks and defense", ok,
                      f"accuracy pgd {acc['pgd']:.3f} < fgsm {acc['fgsm']:.3f} < clean {acc['clean']:.3f}: {order}; "
                      f"adversarial training PGD +{100 * gain:.1f} pts (>= 20), clean drop {100 * drop:.1f} pts (<= 5)")
    assert ok


def test_c8_determinism(run_a, run_b, acceptance):
    (a, _), (b, _) = run_a, run_b
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.parts[-2] in ("models", "reports"))
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = bool(files) and not differ
    acceptance.record("C8 determinism", ok, f"{len(files)} model and report files compared, "
                      f"{len(differ)} differ{': ' + ', '.join(differ) if differ else ''}")
    assert ok


# -- supplementary checks on the trained system (no criterion line) -----------------


def test_trained_anglenet_spot_checks(run_a):
    from multimodal_ad.data.images import render_scene, rotate_augment

    work, _ = run_a
    model, _ = load_anglenet(work / "models" / "anglenet.bin")
    rng = np.random.default_rng(4242)
    scenes = [render_scene(rng)[0] for _ in range(20)]
    ref = np.stack([rotate_augment(s, 0.0)[0] for s in scenes])
    t45 = np.stack([rotate_augment(s, 45.0)[0] for s in scenes])
    assert np.all(predict_angles(model, ref, ref) <= 5.0)
    assert np.mean(np.abs(predict_angles(model, ref, t45) - 45.0) <= 5.0) >= 0.9


def test_finetuning_does_not_hurt_target_domain(run_a):
    from multimodal_ad.anglenet import self_labelled_pairs
    from multimodal_ad.data.corpus import load_corpus

    work, _ = run_a
    frames = np.stack([s.image for s in load_corpus(work / "corpus" / "eval" / "manifest.txt")
                       if s.label.label == "normal"])
    r, t, a = self_labelled_pairs(frames, 300, np.random.default_rng(0), same_scene_fraction=0.0)
    mae = {}
    for name in ("anglenet_pretrained", "anglenet"):
        model, _ = load_anglenet(work / "models" / f"{name}.bin")
        mae[name] = float(np.mean(np.abs(predict_angles(model, r, t) - a)))
    assert mae["anglenet"] <= mae["anglenet_pretrained"] + 1e-9, mae


def test_training_stream_is_mostly_normal(run_a, tmp_path):
    work, _ = run_a
    out = tmp_path / "train_detections.txt"
    assert main(["detect", "--work-dir", str(work), "--corpus", str(work / "corpus" / "train"),
                 "--output", str(out), "--quiet"]) == 0
    verdicts = [line.split()[-1] for line in out.read_text().splitlines() if not line.startswith("#")]
    assert np.mean([v == "normal" for v in verdicts]) >= 0.95


def test_attack_strength_ordering(run_a):
    work, _ = run_a
    rows = {r["attack"]: r for r in _json(work, "attack.json")["rows"]}
    assert rows["fgsm"]["attacked_accuracy"] < rows["clean"]["attacked_accuracy"]
    assert rows["pgd"]["success_rate"] >= rows["fgsm"]["success_rate"]


def test_uap_beats_random_sign_noise(run_a):
    from multimodal_ad.adversarial import fooling_rate, random_sign_perturbation

    work, _ = run_a
    cfg = RunConfig()
    model, _ = load_anglenet(work / "models" / "anglenet.bin")
    refs, tests, angles = make_rotation_pairs(cfg.attack.uap_images, seed=cfg.attack.eval_seed + 1)
    uap = craft_uap(model, refs, tests, angles, cfg.attack.attack, max_passes=cfg.attack.uap_passes)
    noise = random_sign_perturbation(uap.delta.shape, uap.epsilon, seed=0)
    assert uap.fooling_rate >= fooling_rate(model, refs, tests, angles, noise)


def test_hardening_helps_on_patched_frames(run_a):
    work, _ = run_a
    rows = {r["attack"]: r for r in _json(work, "defend.json")["rows"]}
    assert rows["patch"]["hardened_accuracy"] > rows["patch"]["baseline_accuracy"]
    assert rows["pgd"]["hardened_accuracy"] > rows["pgd"]["baseline_accuracy"]


def test_no_op_adversarial_training_matches_plain_retraining(run_a):
    from multimodal_ad.adversarial import DefenseConfig, adversarial_train, evaluate_attack

    work, _ = run_a
    cfg = RunConfig()
    model, _ = load_anglenet(work / "models" / "anglenet.bin")
    refs, tests, angles = make_rotation_pairs(cfg.attack.n_eval_pairs, seed=cfg.attack.eval_seed)
    before = evaluate_attack(model, refs, tests, angles, None).clean_accuracy
    tiny = AttackConfig(epsilon=1e-6, iterations=1, step_size=1e-6, random_start=False)
    control = DefenseConfig(epochs=1, mix_ratio=1.0, patch_ratio=0.0, train_attack=tiny)
    adversarial_train(model, *make_rotation_pairs(1000, seed=cfg.defense.train_seed), control)
    after = evaluate_attack(model, refs, tests, angles, None).clean_accuracy
    assert abs(after - before) <= 0.02
