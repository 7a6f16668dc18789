"""Twin IMU autoencoders trained jointly on normal data, plus their calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .optim import make_optimizer
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class Normalizer:
    """Per-channel min-max scaling learned from normal data; no clipping on apply."""

    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mins) / (self.maxs - self.mins)

    def invert(self, z) -> np.ndarray:
        return np.asarray(z) * (self.maxs - self.mins) + self.mins


def fit_normalizer(samples) -> Normalizer:
    """`samples` is (n_samples, n_channels). Constant channels get max = min + 1."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n_samples, n_channels) array, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a normalizer")
    mins, maxs = x.min(axis=0), x.max(axis=0)
    maxs = np.where(maxs > mins, maxs, mins + 1.0)
    return Normalizer(mins, maxs)


@dataclass
class LossPair:
    l1: float  # IMU/data reconstruction MSE
    l2: float  # IMU/mag reconstruction MSE


@dataclass
class Calibration:
    l_max_data: float
    l_max_mag: float


class AutoencoderModel:
    """Mirrored MLP autoencoder: tanh hidden layers, linear output."""

    def __init__(self, widths: Sequence[int], seed: int = 0):
        widths = [int(w) for w in widths]
        if len(widths) < 3 or widths[0] != widths[-1]:
            raise ValueError(f"widths must start and end with the input dimension, got {widths}")
        if min(widths[1:-1]) >= widths[0]:
            raise ValueError(f"bottleneck must be narrower than the input, got {widths}")
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.layers = [
            (Tensor(rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), requires_grad=True),
             Tensor(np.zeros(n_out), requires_grad=True))
            for n_in, n_out in zip(widths[:-1], widths[1:])
        ]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"layer.{i}.weights", w), (f"layer.{i}.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"state keys mismatch: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = T.dense(x, w, b)
            if i < last:
                x = T.tanh(x)
        return x

    def reconstruct(self, x) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(np.atleast_2d(x))).data


def build_autoencoder(input_dim: int, hidden: Sequence[int], seed: int = 0) -> AutoencoderModel:
    """Encoder widths `hidden` (ending at the bottleneck) mirrored into the decoder."""
    hidden = list(hidden)
    return AutoencoderModel([input_dim, *hidden, *hidden[-2::-1], input_dim], seed)


def per_sample_losses(model: AutoencoderModel, x) -> np.ndarray:
    """Reconstruction MSE of each row of `x` (already normalized)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    if x.shape[1] != model.input_dim:
        raise T.ShapeError(f"samples have {x.shape[1]} channels, autoencoder expects {model.input_dim}")
    rec = model.reconstruct(x)
    return np.mean((rec.astype(np.float64) - x) ** 2, axis=1)


def reconstruction_losses(models: tuple[AutoencoderModel, AutoencoderModel], data_sample, mag_sample) -> LossPair:
    ae_data, ae_mag = models
    return LossPair(float(per_sample_losses(ae_data, data_sample)[0]),
                    float(per_sample_losses(ae_mag, mag_sample)[0]))


def sigma_data(l1: float, cal: Calibration) -> float:
    if not cal.l_max_data > 0:
        raise ValueError(f"degenerate calibration: L_max,data = {cal.l_max_data}")
    return l1 / cal.l_max_data


def sigma_mag(l2: float, cal: Calibration) -> float:
    if not cal.l_max_mag > 0:
        raise ValueError(f"degenerate calibration: L_max,mag = {cal.l_max_mag}")
    return l2 / cal.l_max_mag


@dataclass
class ImuTrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0


@dataclass
class JointTrainResult:
    calibration: Calibration
    history: list[float] = field(default_factory=list)


def calibrate(ae_data: AutoencoderModel, ae_mag: AutoencoderModel, data, mag) -> Calibration:
    """Maximum per-sample reconstruction losses over the normal set."""
    return Calibration(float(per_sample_losses(ae_data, data).max()),
                       float(per_sample_losses(ae_mag, mag).max()))


def train_joint(ae_data: AutoencoderModel, ae_mag: AutoencoderModel, data, mag,
                cfg: ImuTrainConfig | None = None) -> JointTrainResult:
    """Minimise L1 + L2 over aligned, normalized normal samples, then calibrate."""
    cfg = cfg or ImuTrainConfig()
    data = np.asarray(data, dtype=np.float32)
    mag = np.asarray(mag, dtype=np.float32)
    if len(data) != len(mag):
        raise ValueError(f"misaligned IMU sets: {len(data)} IMU/data vs {len(mag)} IMU/mag samples")
    if len(data) == 0:
        raise ValueError("no IMU samples to train on")
    rng = np.random.default_rng(cfg.seed)
    params = ae_data.parameters() + ae_mag.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            with T.Tape() as tape:
                xd, xm = Tensor(data[idx]), Tensor(mag[idx])
                loss = T.mse(ae_data(xd), xd.data) + T.mse(ae_mag(xm), xm.data)
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(data))
    log.info("IMU autoencoders: final L1+L2 = %.6g", history[-1])
    return JointTrainResult(calibrate(ae_data, ae_mag, data, mag), history)


@dataclass
class ImuDetector:
    """Normalizers, both autoencoders and the calibration, ready for scoring raw samples."""

    norm_data: Normalizer
    norm_mag: Normalizer
    ae_data: AutoencoderModel
    ae_mag: AutoencoderModel
    calibration: Calibration

    def losses(self, data_raw, mag_raw) -> tuple[np.ndarray, np.ndarray]:
        return (per_sample_losses(self.ae_data, self.norm_data.apply(data_raw)),
                per_sample_losses(self.ae_mag, self.norm_mag.apply(mag_raw)))

    def sigmas(self, data_raw, mag_raw) -> tuple[np.ndarray, np.ndarray]:
        return self.sigmas_data(data_raw), self.sigmas_mag(mag_raw)

    def sigmas_data(self, data_raw) -> np.ndarray:
        return sigma_data(per_sample_losses(self.ae_data, self.norm_data.apply(data_raw)), self.calibration)

    def sigmas_mag(self, mag_raw) -> np.ndarray:
        return sigma_mag(per_sample_losses(self.ae_mag, self.norm_mag.apply(mag_raw)), self.calibration)


@dataclass
class ImuConfig:
    data_hidden: tuple[int, ...] = (8, 4)
    mag_hidden: tuple[int, ...] = (4, 2)
    train: ImuTrainConfig = field(default_factory=ImuTrainConfig)
    seed: int = 0


def fit_imu_detector(data_raw, mag_raw, cfg: ImuConfig | None = None) -> tuple[ImuDetector, JointTrainResult]:
    cfg = cfg or ImuConfig()
    data_raw = np.asarray(data_raw, dtype=np.float64)
    mag_raw = np.asarray(mag_raw, dtype=np.float64)
    norm_d, norm_m = fit_normalizer(data_raw), fit_normalizer(mag_raw)
    ae_d = build_autoencoder(data_raw.shape[1], cfg.data_hidden, seed=cfg.seed)
    ae_m = build_autoencoder(mag_raw.shape[1], cfg.mag_hidden, seed=cfg.seed + 1)
    result = train_joint(ae_d, ae_m, norm_d.apply(data_raw), norm_m.apply(mag_raw), cfg.train)
    return ImuDetector(norm_d, norm_m, ae_d, ae_m, result.calibration), result
