"""Procedural stand-in for drone surveillance recordings.

Normal frames show a fixed scene with a tracked object, small rotation jitter
and a few pixels of drift. Abnormal frames are rotated by 30-90 degrees and/or
lose the object. The IMU streams come from a drone circling the scene in a
steady wind; at abnormal timestamps the axes decouple and every channel's
deviation from its normal mean is amplified so its variance grows by
`variance_multiplier`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import CorpusManifest, FrameLabel
from .images import SCENE_SIZE, render_scene, rotate_augment

GRAVITY = 9.81
ORBIT_PERIOD = 40.0  # s, one full heading revolution
BANK_ANGLE = 0.25  # rad, mean bank while orbiting
WIND_BANK = 0.15  # rad, once-per-lap bank variation from a steady wind
WIND_YAW = 0.4  # rad, once-per-lap heading lead/lag from the same wind
SWAY_PERIOD = 4.3  # s
SWAY_AMPLITUDE = 0.02  # rad
EARTH_FIELD = np.array([220000.0, 0.0, -330000.0])  # raw magnetometer units


@dataclass
class SyntheticCorpusConfig:
    n_frames: int = 669
    anomaly_fraction: float = 0.37
    jitter_angle: float = 3.0
    abnormal_angle_min: float = 30.0
    abnormal_angle_max: float = 90.0
    object_removal_prob: float = 0.3
    drift_pixels: int = 4
    pixel_noise: float = 0.01
    imu_noise_scale: float = 1.0
    variance_multiplier: float = 4.0
    frame_interval: float = 0.1
    start_time: float = 0.0
    imu_time_jitter: float = 0.01
    threshold_angle: float = 30.0
    scene_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValueError(f"anomaly_fraction must lie in [0, 1], got {self.anomaly_fraction}")
        if self.abnormal_angle_min < self.threshold_angle:
            raise ValueError(
                f"abnormal rotations start at {self.abnormal_angle_min} deg, below the "
                f"{self.threshold_angle} deg threshold; labels would be inconsistent")
        if self.abnormal_angle_max < self.abnormal_angle_min:
            raise ValueError("abnormal_angle_max < abnormal_angle_min")
        if self.variance_multiplier < 1.0:
            raise ValueError("variance_multiplier must be >= 1")


# -- IMU ----------------------------------------------------------------------


def _quat_from_euler(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.stack([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ], axis=-1)


def _body_field(roll, pitch, yaw) -> np.ndarray:
    """World magnetic field expressed in the body frame (ZYX Euler angles)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    bx, by, bz = EARTH_FIELD
    # R^T b with R = Rz(yaw) Ry(pitch) Rx(roll)
    x1 = cy * bx + sy * by
    y1 = -sy * bx + cy * by
    x2 = cp * x1 - sp * bz
    z2 = sp * x1 + cp * bz
    return np.stack([x2, cr * y1 + sr * z2, -sr * y1 + cr * z2], axis=-1)


def imu_signal(t: np.ndarray, phases=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free IMU/data (..., 10) and IMU/mag (..., 3) for the normal flight pattern.

    The drone orbits the scene banked into the turn; a steady wind modulates the bank
    once per lap and gusts add a small sway.
    """
    t = np.asarray(t, dtype=np.float64)
    rate = 2 * np.pi / ORBIT_PERIOD
    omega = 2 * np.pi / SWAY_PERIOD
    lap = phases[0] + rate * t
    yaw = lap + WIND_YAW * np.sin(lap)
    sway = phases[1] + omega * t
    roll = BANK_ANGLE + WIND_BANK * np.cos(lap) + SWAY_AMPLITUDE * np.sin(sway)
    pitch = SWAY_AMPLITUDE * np.cos(sway)
    q = _quat_from_euler(roll, pitch, yaw)
    # small-angle body rates
    gyro = np.stack([
        -WIND_BANK * rate * np.sin(lap) + SWAY_AMPLITUDE * omega * np.cos(sway),
        -SWAY_AMPLITUDE * omega * np.sin(sway),
        rate * (1 + WIND_YAW * np.cos(lap)),
    ], axis=-1)
    accel = np.stack([
        -GRAVITY * np.sin(pitch),
        GRAVITY * np.sin(roll) * np.cos(pitch),
        GRAVITY * np.cos(roll) * np.cos(pitch),
    ], axis=-1)
    return np.concatenate([q, gyro, accel], axis=-1), _body_field(roll, pitch, yaw)


def nominal_means() -> tuple[np.ndarray, np.ndarray]:
    """Channel means of the normal pattern over its full (yaw, sway) torus."""
    g = np.linspace(0, 1, 96, endpoint=False)
    # yaw spans two turns so the quaternion double cover averages out
    ty, ts = np.meshgrid(g * 2 * ORBIT_PERIOD, g * SWAY_PERIOD, indexing="ij")
    yaw_phase = 2 * np.pi * ty.ravel() / ORBIT_PERIOD
    sway_phase = 2 * np.pi * ts.ravel() / SWAY_PERIOD
    data, mag = imu_signal(np.zeros(yaw_phase.size), phases=(yaw_phase, sway_phase))
    return data.mean(axis=0), mag.mean(axis=0)


NOISE_DATA = np.array([0.002] * 4 + [0.01] * 3 + [0.05] * 3)
NOISE_MAG = np.array([3000.0] * 3)


def simulate_imu(t: np.ndarray, abnormal: np.ndarray, rng: np.random.Generator,
                 noise_scale: float = 1.0, variance_multiplier: float = 4.0):
    """Noisy IMU streams for the normal pattern, with turbulent rows where `abnormal` is set.

    In a turbulent row the axes decouple: each channel is read from its own random point
    of the flight pattern and its deviation from the nominal mean is scaled by
    sqrt(variance_multiplier), so every channel's variance grows by that factor.
    """
    t = np.asarray(t, dtype=np.float64)
    ab = np.asarray(abnormal, dtype=bool)
    data, mag = imu_signal(t)
    n_ab = int(ab.sum())
    if n_ab:
        tau_d = rng.uniform(0.0, 2 * ORBIT_PERIOD, size=(n_ab, data.shape[1]))
        tau_m = rng.uniform(0.0, 2 * ORBIT_PERIOD, size=(n_ab, mag.shape[1]))
        d_all, _ = imu_signal(tau_d)
        _, m_all = imu_signal(tau_m)
        cols_d, cols_m = np.arange(data.shape[1]), np.arange(mag.shape[1])
        data[ab] = d_all[:, cols_d, cols_d]
        mag[ab] = m_all[:, cols_m, cols_m]
    data = data + rng.standard_normal(data.shape) * NOISE_DATA * noise_scale
    mag = mag + rng.standard_normal(mag.shape) * NOISE_MAG * noise_scale
    mu_d, mu_m = nominal_means()
    gain = np.sqrt(variance_multiplier)
    data[ab] = mu_d + gain * (data[ab] - mu_d)
    mag[ab] = mu_m + gain * (mag[ab] - mu_m)
    data[:, :4] /= np.linalg.norm(data[:, :4], axis=1, keepdims=True)
    return data, mag


# -- frames -------------------------------------------------------------------


def anomaly_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with round(fraction * n) abnormal entries arranged in bursts."""
    target = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    while mask.sum() < target:
        free = np.flatnonzero(~mask)
        start = int(free[rng.integers(len(free))])
        length = int(rng.integers(5, 21))
        for i in range(start, n):
            if mask.sum() >= target or i - start >= length:
                break
            mask[i] = True
    return mask


def scene_layers(scene_seed: int, drift: int) -> tuple[np.ndarray, np.ndarray]:
    """The surveillance scene rendered with and without its tracked object."""
    size = SCENE_SIZE + 2 * drift
    with_obj, layout = render_scene(np.random.default_rng(scene_seed), size=size)
    without_obj, _ = render_scene(np.random.default_rng(scene_seed), size=size, with_object=False, layout=layout)
    return with_obj, without_obj


def render_frame(layer: np.ndarray, angle: float, dy: int, dx: int, noise: np.ndarray | None) -> np.ndarray:
    window = layer[dy:dy + SCENE_SIZE, dx:dx + SCENE_SIZE]
    img, _ = rotate_augment(window, angle)
    if noise is not None:
        img = np.clip(img + noise, 0.0, 1.0)
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic_corpus(config: SyntheticCorpusConfig, output_dir: str | Path) -> CorpusManifest:
    """Write frames and a manifest under `output_dir`; fully determined by the config seeds."""
    out = Path(output_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_frames
    abnormal = anomaly_mask(n, cfg.anomaly_fraction, rng)
    times = cfg.start_time + np.arange(n) * cfg.frame_interval
    with_obj, without_obj = scene_layers(cfg.scene_seed, cfg.drift_pixels)

    manifest = CorpusManifest(root=out)
    for k in range(n):
        drift = rng.integers(0, 2 * cfg.drift_pixels + 1, size=2)
        jitter = float(rng.uniform(-cfg.jitter_angle, cfg.jitter_angle))
        angle, present = jitter, True
        if abnormal[k]:
            removed = rng.random() < cfg.object_removal_prob
            rotate = (not removed) or rng.random() < 0.5
            present = not removed
            if rotate:
                angle = float(rng.uniform(cfg.abnormal_angle_min, cfg.abnormal_angle_max))
        noise = rng.standard_normal((64, 64)) * cfg.pixel_noise if cfg.pixel_noise > 0 else None
        img = render_frame(with_obj if present else without_obj, angle, int(drift[0]), int(drift[1]), noise)
        rel = f"frames/{k:06d}.png"
        Image.fromarray(to_uint8(img), mode="L").save(out / rel)
        t = float(times[k])
        manifest.frames.append((t, rel))
        manifest.labels[round(t, 6)] = FrameLabel("abnormal" if abnormal[k] else "normal", angle, present)

    imu_t = times + rng.uniform(-cfg.imu_time_jitter, cfg.imu_time_jitter, size=n)
    mag_t = times + rng.uniform(-cfg.imu_time_jitter, cfg.imu_time_jitter, size=n)
    data, _ = simulate_imu(imu_t, abnormal, rng, cfg.imu_noise_scale, cfg.variance_multiplier)
    _, mag = simulate_imu(mag_t, abnormal, rng, cfg.imu_noise_scale, cfg.variance_multiplier)
    # jitter never exceeds half the frame interval, so per-stream order is preserved
    manifest.imu_data = [(round(float(t), 6), v) for t, v in zip(imu_t, data)]
    manifest.imu_mag = [(round(float(t), 6), v) for t, v in zip(mag_t, mag)]
    manifest.write(out / "manifest.txt")
    (out / "corpus_config.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in asdict(cfg).items()))
    return manifest


# -- rotation pairs for pretraining -------------------------------------------


def make_rotation_pairs(n_pairs: int, seed: int = 0, pairs_per_scene: int = 5, max_angle: float = 90.0):
    """Random scenes paired with rotated copies of themselves, labelled by the rotation angle.

    Returns ``(references, tests, angles)`` with images of shape (N, 64, 64).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    refs, tests, angles = [], [], []
    while len(angles) < n_pairs:
        scene, _ = render_scene(rng)
        ref, _ = rotate_augment(scene, 0.0)
        for _ in range(min(pairs_per_scene, n_pairs - len(angles))):
            theta = float(rng.uniform(0.0, max_angle))
            refs.append(ref)
            tests.append(rotate_augment(scene, theta)[0])
            angles.append(theta)
    return np.stack(refs), np.stack(tests), np.array(angles)
