"""Weighted fusion of the three per-modality scores into one verdict per timestamp."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anglenet import ANGLE_SCALE, AngleNetModel, predict_angles
from .data.corpus import AlignedSample
from .imu import ImuDetector

NORMAL = "normal"
ABNORMAL = "abnormal"


@dataclass(frozen=True)
class EnsembleWeights:
    w_d: float = 1.0
    w_m: float = 0.9
    w_l: float = 0.75

    def __post_init__(self):
        w = (self.w_d, self.w_m, self.w_l)
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise ValueError(f"weights must be finite and >= 0, got {w}")
        if sum(w) == 0:
            raise ValueError("at least one weight must be positive")

    def total(self) -> float:
        return self.w_d + self.w_m + self.w_l


@dataclass(frozen=True)
class AnomalyScores:
    timestamp: float
    sigma_d: float
    sigma_m: float
    sigma_l: float
    N: float


@dataclass(frozen=True)
class Verdict:
    label: str
    N: float
    threshold: float = 1.0


def combine(sigma_d: float, sigma_m: float, sigma_l: float,
            weights: EnsembleWeights | None = None) -> float:
    """Combined degree of abnormality: the weighted sum of the three scores."""
    w = weights or EnsembleWeights()
    for name, s in (("sigma_d", sigma_d), ("sigma_m", sigma_m), ("sigma_l", sigma_l)):
        if not s >= 0:
            raise ValueError(f"{name} must be >= 0, got {s}")
    return w.w_d * sigma_d + w.w_m * sigma_m + w.w_l * sigma_l


def classify(N: float, threshold: float = 1.0) -> Verdict:
    """Abnormal when N reaches the threshold (inclusive)."""
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    return Verdict(ABNORMAL if N >= threshold else NORMAL, float(N), float(threshold))


@dataclass
class EnsembleConfig:
    weights: EnsembleWeights = EnsembleWeights()
    threshold: float = 1.0
    lenient: bool = False
    reference_timestamp: float | None = None  # default: first normal frame


class MissingModalityError(ValueError):
    pass


def pick_reference(samples: Sequence[AlignedSample], timestamp: float | None = None) -> np.ndarray:
    """The reference frame: the frame at `timestamp` if given, else the first normal frame.

    Unlabelled streams count as normal, so the first frame with an image is used.
    """
    ordered = sorted(samples, key=lambda s: s.timestamp)
    if timestamp is not None:
        for s in ordered:
            if abs(s.timestamp - timestamp) <= 1e-6 and s.image is not None:
                return s.image
        raise ValueError(f"no frame at reference timestamp {timestamp}")
    for s in ordered:
        if s.image is not None and (s.label is None or s.label.label == NORMAL):
            return s.image
    raise ValueError("stream has no normal frame to use as reference")


def score_stream(samples: Sequence[AlignedSample], anglenet: AngleNetModel, imu: ImuDetector,
                 config: EnsembleConfig | None = None,
                 reference: np.ndarray | None = None) -> list[tuple[AnomalyScores, Verdict]]:
    """Score every aligned sample; records come back in timestamp order.

    Strict mode rejects a sample missing any modality. Lenient mode scores what is
    present and scales the threshold by the share of weight that was available.
    """
    cfg = config or EnsembleConfig()
    w = cfg.weights
    ordered = sorted(samples, key=lambda s: s.timestamp)
    if not ordered:
        return []
    for s in ordered:
        if not s.complete and not cfg.lenient:
            missing = [n for n, v in (("image", s.image), ("IMU/data", s.imu_data), ("IMU/mag", s.imu_mag))
                       if v is None]
            raise MissingModalityError(f"sample t={s.timestamp:.6f} lacks {', '.join(missing)}")
    if reference is None:
        reference = pick_reference(ordered, cfg.reference_timestamp)

    img_idx = [i for i, s in enumerate(ordered) if s.image is not None]
    sig_l = np.full(len(ordered), np.nan)
    if img_idx:
        angles = predict_angles(anglenet, reference, np.stack([ordered[i].image for i in img_idx]))
        sig_l[img_idx] = angles / ANGLE_SCALE

    sig_d = np.full(len(ordered), np.nan)
    sig_m = np.full(len(ordered), np.nan)
    d_idx = [i for i, s in enumerate(ordered) if s.imu_data is not None]
    m_idx = [i for i, s in enumerate(ordered) if s.imu_mag is not None]
    if d_idx:
        raw = np.stack([ordered[i].imu_data.vector() for i in d_idx])
        sig_d[d_idx] = imu.sigmas_data(raw)
    if m_idx:
        raw = np.stack([ordered[i].imu_mag.vector() for i in m_idx])
        sig_m[m_idx] = imu.sigmas_mag(raw)

    out = []
    for i, s in enumerate(ordered):
        present = ~np.isnan([sig_d[i], sig_m[i], sig_l[i]])
        d, m, l = (float(v) if p else 0.0 for v, p in zip((sig_d[i], sig_m[i], sig_l[i]), present))
        N = combine(d, m, l, w)
        threshold = cfg.threshold
        if not present.all():
            share = float(np.dot(present, [w.w_d, w.w_m, w.w_l])) / w.total()
            if share == 0:
                raise MissingModalityError(f"sample t={s.timestamp:.6f} has no weighted modality present")
            threshold *= share
        out.append((AnomalyScores(s.timestamp, d, m, l, N), classify(N, threshold)))
    return out
