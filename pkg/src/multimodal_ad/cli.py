"""Command-line entry point: gen-data, train, detect, eval, attack, defend."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import adversarial as adv
from .anglenet import FinetuneConfig, build_anglenet, finetune, pretrain
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, dump_config, load_config
from .data.corpus import ManifestError, align, imu_pairs, parse_manifest
from .data.serialization import (WeightFileError, load_anglenet, load_imu_detector, save_anglenet,
                                 save_imu_detector)
from .data.synthetic import generate_synthetic_corpus, make_rotation_pairs
from .ensemble import EnsembleConfig, score_stream
from .imu import fit_imu_detector
from .metrics import confusion

log = logging.getLogger("multimodal_ad")

RESULT_HEADER = "# timestamp sigma_d sigma_m sigma_l N verdict"


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _seeded(cfg: RunConfig, seed: int) -> int:
    """Component seeds are offset by the master seed."""
    return int(seed) + int(cfg.seed)


def _portable(cfg: RunConfig, path: Path) -> str:
    """Paths inside the work directory are reported relative to it, so reports compare across runs."""
    try:
        return str(Path(path).resolve().relative_to(Path(cfg.paths.work_dir).resolve()))
    except ValueError:
        return str(path)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    summary = {}
    for name, corpus_cfg, out in (("train", cfg.data.train, cfg.paths.train_corpus),
                                  ("eval", cfg.data.eval, cfg.paths.eval_corpus)):
        c = replace(corpus_cfg, seed=_seeded(cfg, corpus_cfg.seed))
        manifest = generate_synthetic_corpus(c, out)
        counts = manifest.label_counts()
        summary[name] = {"path": _portable(cfg, out), "frames": len(manifest.frames), **counts}
        print(f"{name}: {len(manifest.frames)} frames ({counts['normal']} normal, "
              f"{counts['abnormal']} abnormal) -> {out}")
    _write_json(cfg.paths.reports / "gen_data.json", summary)
    return 0


# -- train ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    manifest_path = _require(cfg.paths.train_corpus / "manifest.txt", "training corpus manifest")
    manifest = parse_manifest(manifest_path)
    counts = manifest.label_counts()
    if counts["abnormal"]:
        raise ValueError(f"training corpus {manifest_path} contains {counts['abnormal']} frames labelled "
                         "abnormal; training uses normal data only")
    samples = align(manifest, cfg.data.alignment_tolerance)
    frames = np.stack([s.image for s in samples])

    t0 = time.perf_counter()
    model = build_anglenet(cfg.anglenet, seed=_seeded(cfg, 0))
    refs, tests, angles = make_rotation_pairs(cfg.pretrain.n_pairs, seed=_seeded(cfg, cfg.pretrain.pair_seed))
    pre = pretrain(model, refs, tests, angles, replace(cfg.pretrain.train, seed=_seeded(cfg, cfg.pretrain.train.seed)))
    print(f"AngleNet pretraining: validation MAE {pre.val_mae:.3f} deg (best epoch {pre.best_epoch})")
    cfg.paths.models.mkdir(parents=True, exist_ok=True)
    save_anglenet(cfg.paths.models / "anglenet_pretrained.bin", model)
    ft_cfg: FinetuneConfig = replace(cfg.finetune, seed=_seeded(cfg, cfg.finetune.seed))
    ft = finetune(model, frames, ft_cfg)
    if ft.history:
        print(f"AngleNet finetuning on {len(frames)} normal frames: final loss {ft.history[-1]['train_loss']:.5f}")

    data_raw, mag_raw = imu_pairs(manifest, cfg.data.alignment_tolerance)
    imu_cfg = replace(cfg.imu, seed=_seeded(cfg, cfg.imu.seed),
                      train=replace(cfg.imu.train, seed=_seeded(cfg, cfg.imu.train.seed)))
    detector, joint = fit_imu_detector(data_raw, mag_raw, imu_cfg)
    print(f"IMU autoencoders on {len(data_raw)} samples: final L1+L2 {joint.history[-1]:.6f}; "
          f"L_max data {detector.calibration.l_max_data:.6g}, mag {detector.calibration.l_max_mag:.6g}")

    save_anglenet(cfg.paths.models / "anglenet.bin", model)
    save_imu_detector(cfg.paths.models / "imu.bin", detector)
    _write_json(cfg.paths.reports / "train.json", {
        "anglenet_val_mae": pre.val_mae, "anglenet_best_epoch": pre.best_epoch,
        "anglenet_history": pre.history, "finetune_history": ft.history,
        "imu_final_loss": joint.history[-1], "calibration": vars(detector.calibration),
        "n_normal_frames": len(frames), "n_imu_samples": len(data_raw),
    })
    log.info("training took %.1f s", time.perf_counter() - t0)
    return 0


# -- detect / eval ---------------------------------------------------------------


def _load_models(cfg: RunConfig):
    anglenet, _ = load_anglenet(_require(cfg.paths.models / "anglenet.bin", "AngleNet model file"))
    imu, _ = load_imu_detector(_require(cfg.paths.models / "imu.bin", "IMU model file"))
    return anglenet, imu


def cmd_detect(cfg: RunConfig, args) -> int:
    anglenet, imu = _load_models(cfg)
    corpus = Path(args.corpus) if args.corpus else cfg.paths.eval_corpus
    manifest = parse_manifest(_require(corpus / "manifest.txt", "corpus manifest"))
    samples = align(manifest, cfg.data.alignment_tolerance, lenient=cfg.ensemble.lenient)
    ens = EnsembleConfig(cfg.ensemble.weights, cfg.ensemble.threshold, cfg.ensemble.lenient)
    t0 = time.perf_counter()
    records = score_stream(samples, anglenet, imu, ens)
    latency = (time.perf_counter() - t0) / max(len(records), 1)
    lines = [RESULT_HEADER]
    for s, v in records:
        lines.append(f"{s.timestamp:.6f} {s.sigma_d:.6f} {s.sigma_m:.6f} {s.sigma_l:.6f} {s.N:.6f} {v.label}")
    out = Path(args.output) if args.output else cfg.paths.reports / "detections.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print("\n".join(lines[1:]))
    n_ab = sum(v.label == "abnormal" for _, v in records)
    print(f"{len(records)} timestamps scored, {n_ab} abnormal -> {out}", file=sys.stderr)
    print(f"mean latency per frame: {latency * 1e3:.2f} ms", file=sys.stderr)
    return 0


def read_results(path: Path) -> list[tuple[float, float, float, float, float, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6 or parts[5] not in ("normal", "abnormal"):
            raise ValueError(f"{path}:{lineno}: malformed result line {line!r}")
        rows.append((*map(float, parts[:5]), parts[5]))
    return rows


def cmd_eval(cfg: RunConfig, args) -> int:
    results = Path(args.results) if args.results else cfg.paths.reports / "detections.txt"
    rows = read_results(_require(results, "detection results"))
    corpus = Path(args.corpus) if args.corpus else cfg.paths.eval_corpus
    manifest = parse_manifest(_require(corpus / "manifest.txt", "corpus manifest"), check_paths=False)
    pred, truth = [], []
    for row in rows:
        lab = manifest.labels.get(round(row[0], 6))
        if lab is None:
            raise ValueError(f"no label for scored timestamp {row[0]:.6f}")
        pred.append(row[5])
        truth.append(lab.label)
    report = confusion(pred, truth, scores_path=_portable(cfg, results))
    out = _write_json(cfg.paths.reports / "metrics.json", report.as_dict())
    print(f"accuracy {report.accuracy:.4f}  F1 {report.f1:.4f}  TP {report.tp}  TN {report.tn}  "
          f"FP {report.fp}  FN {report.fn}  (n={report.total}) -> {out}")
    return 0


# -- attack / defend --------------------------------------------------------------


def _attack_set(cfg: RunConfig):
    return make_rotation_pairs(cfg.attack.n_eval_pairs, seed=_seeded(cfg, cfg.attack.eval_seed))


def _uap(cfg: RunConfig, model) -> adv.UniversalPerturbation:
    r, t, a = make_rotation_pairs(cfg.attack.uap_images, seed=_seeded(cfg, cfg.attack.eval_seed + 1))
    return adv.craft_uap(model, r, t, a, cfg.attack.attack, max_passes=cfg.attack.uap_passes,
                         threshold_angle=cfg.anglenet.threshold_angle)


def _attack_reports(cfg: RunConfig, model, eval_set) -> list[adv.AttackReport]:
    atk_cfg = replace(cfg.attack.attack, seed=_seeded(cfg, cfg.attack.attack.seed))
    attacks = {"clean": None, **adv.standard_attacks(atk_cfg, _uap(cfg, model),
                                                      patch_seed=_seeded(cfg, cfg.attack.patch_seed))}
    return [adv.evaluate_attack(model, *eval_set, a, name, cfg.anglenet.threshold_angle)
            for name, a in attacks.items()]


def _print_table(rows: list[dict], columns: list[str]) -> None:
    print("  ".join(f"{c:>18}" for c in columns))
    for r in rows:
        print("  ".join(f"{r[c]:>18.4f}" if isinstance(r[c], float) else f"{r[c]:>18}" for c in columns))


def cmd_attack(cfg: RunConfig, args) -> int:
    model, _ = load_anglenet(_require(cfg.paths.models / "anglenet.bin", "AngleNet model file"))
    reports = _attack_reports(cfg, model, _attack_set(cfg))
    rows = [r.as_dict() for r in reports]
    _print_table(rows, ["attack", "clean_accuracy", "attacked_accuracy", "success_rate"])
    _write_json(cfg.paths.reports / "attack.json", {"epsilon": cfg.attack.attack.epsilon, "rows": rows})
    return 0


def cmd_defend(cfg: RunConfig, args) -> int:
    model, _ = load_anglenet(_require(cfg.paths.models / "anglenet.bin", "AngleNet model file"))
    eval_set = _attack_set(cfg)
    before = _attack_reports(cfg, model, eval_set)
    d = cfg.defense
    refs, tests, angles = make_rotation_pairs(d.n_train_pairs, seed=_seeded(cfg, d.train_seed))
    dcfg = replace(d.defense, seed=_seeded(cfg, d.defense.seed),
                   train_attack=replace(d.defense.train_attack, seed=_seeded(cfg, d.defense.train_attack.seed)))
    result = adv.adversarial_train(model, refs, tests, angles, dcfg)
    save_anglenet(cfg.paths.models / "anglenet_hardened.bin", model)
    after = _attack_reports(cfg, model, eval_set)
    rows = [{"attack": b.attack, "baseline_accuracy": b.attacked_accuracy, "hardened_accuracy": a.attacked_accuracy,
             "delta": a.attacked_accuracy - b.attacked_accuracy} for b, a in zip(before, after)]
    _print_table(rows, ["attack", "baseline_accuracy", "hardened_accuracy", "delta"])
    _write_json(cfg.paths.reports / "defend.json", {
        "rows": rows, "before": [r.as_dict() for r in before], "after": [r.as_dict() for r in after],
        "history": result.history})
    return 0


# -- plumbing ---------------------------------------------------------------------

COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic training and evaluation corpora"),
    "train": (cmd_train, "train AngleNet and the IMU autoencoders on normal data"),
    "detect": (cmd_detect, "score every timestamp of a corpus"),
    "eval": (cmd_eval, "compute metrics for a detection results file"),
    "attack": (cmd_attack, "evaluate FGSM, PGD, UAP and patch attacks on AngleNet"),
    "defend": (cmd_defend, "adversarially train AngleNet and compare attack accuracy"),
}


def _apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = yaml.safe_load(value)
    return config_from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multimodal-ad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--work-dir", help="override paths.work_dir")
        p.add_argument("--seed", type=int, help="master seed (offsets every component seed)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set pretrain.n_pairs=2000")
        p.add_argument("--dump-config", metavar="PATH", help="write the effective configuration and continue")
        if name == "detect":
            p.add_argument("--corpus", help="corpus directory (default: the evaluation corpus)")
            p.add_argument("--output", help="results file (default: reports/detections.txt)")
            p.add_argument("--quiet", action="store_true", help="do not echo result lines")
        if name == "eval":
            p.add_argument("--results", help="detection results file")
            p.add_argument("--corpus", help="labelled corpus directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args.set)
        if args.work_dir:
            cfg.paths.work_dir = args.work_dir
        if args.seed is not None:
            cfg.seed = args.seed
        if args.dump_config:
            dump_config(cfg, args.dump_config)
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, ManifestError, WeightFileError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
