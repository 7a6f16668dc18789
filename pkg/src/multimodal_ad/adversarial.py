"""White-box attacks on the angle regressor and adversarial training as a defense.

Attacks perturb only the test frame and push the squared angle error up. A sample
counts as a successful attack when its frame verdict at the angle threshold flips.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .anglenet import (ANGLE_SCALE, AngleNetModel, TrainConfig, as_batch, fit_pairs,
                       predict_angles)
from .tensor import Tensor

log = logging.getLogger(__name__)

PATCH_KINDS = ("checkerboard", "noise", "solid", "stripes", "rings")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.25
    iterations: int = 20
    step_size: float | None = None  # None means epsilon / 8
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and not 0 < self.step_size <= max(self.epsilon, 0):
            raise ValueError(f"step size must lie in (0, epsilon], got {self.step_size}")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")

    @property
    def alpha(self) -> float:
        return self.epsilon / 8 if self.step_size is None else self.step_size

    @classmethod
    def fgsm(cls, epsilon: float = 0.25) -> "AttackConfig":
        return cls(epsilon=epsilon, iterations=1, step_size=epsilon or None, random_start=False)


@dataclass
class AdversarialSample:
    original: np.ndarray
    perturbed: np.ndarray
    attack: str
    success: bool


@dataclass
class UniversalPerturbation:
    delta: np.ndarray
    epsilon: float
    fooling_rate: float = float("nan")

    def apply(self, images, clip=(0.0, 1.0)) -> np.ndarray:
        """Add the same delta to every image, then clip."""
        return add_universal(images, self.delta, clip)


def add_universal(images, delta, clip=(0.0, 1.0)) -> np.ndarray:
    """``images + delta`` clipped to the box; float32 rounding of the sum is kept inside
    the l_inf radius of delta."""
    x = np.asarray(images, dtype=np.float32)
    radius = float(np.abs(np.asarray(delta, dtype=np.float64)).max())
    return project(x + delta, x, radius, *clip)


# -- gradients and the l_inf ball ----------------------------------------------


def input_gradient(model: AngleNetModel, refs: np.ndarray, tests: np.ndarray, angles) -> np.ndarray:
    """Gradient of the summed squared (scaled) angle error with respect to the test frames."""
    dtype = model.parameters()[0].dtype
    target = (np.asarray(angles, dtype=np.float64) / ANGLE_SCALE).astype(dtype)
    with model.frozen():
        x = Tensor(tests, requires_grad=True, dtype=dtype)
        with T.Tape() as tape:
            pred = model.forward_scaled(Tensor(refs, dtype=dtype), x)
            diff = pred - Tensor(target, dtype=dtype)
            loss = T.tsum(diff * diff)
        tape.backward(loss)
    return x.grad


def project(x: np.ndarray, x0: np.ndarray, eps: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Clamp to the box and to the l_inf ball around `x0`, exact in float64 terms.

    The ball bounds are formed in float64 and rounded to float32; a bound that
    rounded outward is nudged one ulp inward.
    """
    x0 = x0.astype(np.float32)
    x64 = x0.astype(np.float64)
    upper = (x64 + eps).astype(np.float32)
    lower = (x64 - eps).astype(np.float32)
    upper = np.where(upper.astype(np.float64) - x64 > eps, np.nextafter(upper, np.float32(-np.inf)), upper)
    lower = np.where(x64 - lower.astype(np.float64) > eps, np.nextafter(lower, np.float32(np.inf)), lower)
    return np.clip(np.clip(x, lo, hi), lower, upper).astype(np.float32)


def _prepare(model, references, tests, angles):
    c = model.config.channels
    refs, tests = as_batch(references, c), as_batch(tests, c)
    if len(refs) == 1 and len(tests) > 1:
        refs = np.repeat(refs, len(tests), axis=0)
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if not (len(refs) == len(tests) == len(angles)):
        raise ValueError(f"{len(refs)} references, {len(tests)} tests, {len(angles)} angles")
    if len(tests) == 0:
        raise ValueError("nothing to attack")
    if tests.min() < 0 or tests.max() > 1:
        raise ValueError("test images must lie in [0, 1]")
    return refs, tests, angles


def pgd_batch(model: AngleNetModel, references, tests, angles, config: AttackConfig | None = None,
              rng: np.random.Generator | None = None, batch_size: int = 64) -> np.ndarray:
    """Projected sign-gradient ascent; returns perturbed test frames, shape [N, C, H, W]."""
    cfg = config or AttackConfig()
    refs, x0, angles = _prepare(model, references, tests, angles)
    if cfg.epsilon == 0:
        return x0.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lo, hi = cfg.clip_min, cfg.clip_max
    alpha = np.float32(cfg.alpha)
    out = np.empty_like(x0)
    for i in range(0, len(x0), batch_size):
        sl = slice(i, i + batch_size)
        r, base, y = refs[sl], x0[sl], angles[sl]
        x = base.copy()
        if cfg.random_start:
            x = project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(np.float32),
                        base, cfg.epsilon, lo, hi)
        for _ in range(cfg.iterations):
            g = input_gradient(model, r, x, y)
            x = project(x + alpha * np.sign(g), base, cfg.epsilon, lo, hi)
        out[sl] = x
    return out


def fgsm_batch(model: AngleNetModel, references, tests, angles, epsilon: float = 0.25,
               clip=(0.0, 1.0), batch_size: int = 64) -> np.ndarray:
    """One signed-gradient step of size epsilon, clipped to the box."""
    refs, x0, angles = _prepare(model, references, tests, angles)
    e = np.float32(epsilon)
    out = np.empty_like(x0)
    for i in range(0, len(x0), batch_size):
        sl = slice(i, i + batch_size)
        g = input_gradient(model, refs[sl], x0[sl], angles[sl])
        out[sl] = project(x0[sl] + e * np.sign(g), x0[sl], epsilon, *clip)
    return out


def _flipped(model, ref, clean, adv, threshold_angle) -> bool:
    a = predict_angles(model, np.stack([ref, ref]), np.stack([clean, adv]))
    return bool((a[0] >= threshold_angle) != (a[1] >= threshold_angle))


def _single(model, reference, test, true_angle, adv_fn, name, threshold_angle):
    c = model.config.channels
    ref, x = as_batch(reference, c), as_batch(test, c)
    adv = adv_fn(ref, x, [true_angle])
    if not np.any(adv != x):
        log.info("%s: zero input gradient, sample left unmodified", name)
        return AdversarialSample(x[0], adv[0], name, False)
    return AdversarialSample(x[0], adv[0], name, _flipped(model, ref[0], x[0], adv[0], threshold_angle))


def fgsm(model: AngleNetModel, reference, test, true_angle: float, config: AttackConfig | None = None,
         threshold_angle: float = 30.0) -> AdversarialSample:
    cfg = config or AttackConfig.fgsm()
    return _single(model, reference, test, true_angle,
                   lambda r, x, y: fgsm_batch(model, r, x, y, cfg.epsilon, (cfg.clip_min, cfg.clip_max)),
                   "fgsm", threshold_angle)


def pgd(model: AngleNetModel, reference, test, true_angle: float, config: AttackConfig | None = None,
        threshold_angle: float = 30.0) -> AdversarialSample:
    cfg = config or AttackConfig()
    return _single(model, reference, test, true_angle,
                   lambda r, x, y: pgd_batch(model, r, x, y, cfg), "pgd", threshold_angle)


# -- universal perturbation -----------------------------------------------------


def craft_uap(model: AngleNetModel, references, tests, angles, config: AttackConfig | None = None,
              max_passes: int = 3, target_fooling_rate: float = 0.8,
              threshold_angle: float = 30.0) -> UniversalPerturbation:
    """Greedy accumulation: every image the current delta does not fool adds one signed
    gradient step to delta, which is then projected back into the ball."""
    cfg = config or AttackConfig()
    refs, tests, angles = _prepare(model, references, tests, angles)
    if len(tests) < 10:
        raise ValueError(f"need at least 10 images to craft a universal perturbation, got {len(tests)}")
    lo, hi = cfg.clip_min, cfg.clip_max
    delta = np.zeros(tests.shape[1:], dtype=np.float32)
    truth = angles >= threshold_angle
    uap = UniversalPerturbation(delta, cfg.epsilon)
    zero = np.zeros_like(delta)
    for p in range(max_passes):
        for i in range(len(tests)):
            x = add_universal(tests[i:i + 1], delta, (lo, hi))
            if (predict_angles(model, refs[i:i + 1], x)[0] >= threshold_angle) != truth[i]:
                continue
            g = input_gradient(model, refs[i:i + 1], x, angles[i:i + 1])[0]
            delta = project(delta + np.float32(cfg.alpha) * np.sign(g), zero, cfg.epsilon, -1.0, 1.0)
        uap = UniversalPerturbation(delta, cfg.epsilon, fooling_rate(model, refs, tests, angles, delta,
                                                                      threshold_angle, (lo, hi)))
        log.info("UAP pass %d: fooling rate %.3f", p + 1, uap.fooling_rate)
        if uap.fooling_rate >= target_fooling_rate:
            break
    return uap


def fooling_rate(model, references, tests, angles, delta, threshold_angle=30.0, clip=(0.0, 1.0)) -> float:
    """Fraction of frames whose verdict under ``tests + delta`` is wrong."""
    adv = add_universal(tests, delta, clip)
    pred = predict_angles(model, references, adv) >= threshold_angle
    return float(np.mean(pred != (np.asarray(angles) >= threshold_angle)))


def random_sign_perturbation(shape, epsilon: float, seed: int = 0) -> np.ndarray:
    """Baseline: uniformly random +-epsilon noise of the given shape."""
    rng = np.random.default_rng(seed)
    return (np.float32(epsilon) * rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=shape)).astype(np.float32)


# -- patches --------------------------------------------------------------------


def make_patch(kind: str, size: int = 16, seed: int = 0) -> np.ndarray:
    """One of the five procedural patch textures, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "checkerboard":
        cell = max(size // 4, 1)
        p = ((yy // cell + xx // cell) % 2).astype(np.float32)
    elif kind == "noise":
        p = np.random.default_rng(seed).random((size, size))
    elif kind == "solid":
        p = np.ones((size, size))
    elif kind == "stripes":
        p = ((xx // max(size // 8, 1)) % 2).astype(np.float32)
    elif kind == "rings":
        c = (size - 1) / 2
        r = np.hypot(yy - c, xx - c)
        p = ((r // max(size / 8, 1)) % 2).astype(np.float32)
    else:
        raise ValueError(f"unknown patch kind {kind!r}; choose from {PATCH_KINDS}")
    return np.asarray(p, dtype=np.float32)


def apply_patch(image, patch, position: tuple[int, int], opacity: float = 1.0) -> np.ndarray:
    """Overlay `patch` with its top-left corner at `position` (row, col)."""
    img = np.array(image, dtype=np.float32)
    patch = np.asarray(patch, dtype=np.float32)
    if not 0 <= opacity <= 1:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    ph, pw = patch.shape[-2:]
    h, w = img.shape[-2:]
    r, c = position
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValueError(f"patch {ph}x{pw} at {position} does not fit in a {h}x{w} image")
    region = img[..., r:r + ph, c:c + pw]
    img[..., r:r + ph, c:c + pw] = patch if opacity == 1 else (1 - opacity) * region + opacity * patch
    return np.clip(img, 0.0, 1.0)


def patch_batch(tests, rng: np.random.Generator, size: int = 16, kinds=PATCH_KINDS) -> np.ndarray:
    """Each image gets one random procedural patch at a random position."""
    tests = np.asarray(tests, dtype=np.float32)
    out = np.empty_like(tests)
    h, w = tests.shape[-2:]
    for i, img in enumerate(tests):
        kind = kinds[int(rng.integers(len(kinds)))]
        patch = make_patch(kind, size, seed=int(rng.integers(2**31)))
        pos = (int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1)))
        out[i] = apply_patch(img, patch, pos)
    return out


# -- evaluation -----------------------------------------------------------------


@dataclass
class AttackReport:
    attack: str
    clean_accuracy: float
    attacked_accuracy: float
    success_rate: float  # verdict flips among originally correct frames
    n: int

    def as_dict(self) -> dict:
        return {"attack": self.attack, "clean_accuracy": self.clean_accuracy,
                "attacked_accuracy": self.attacked_accuracy, "success_rate": self.success_rate, "n": self.n}


Attack = Callable[[AngleNetModel, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def evaluate_attack(model: AngleNetModel, references, tests, angles, attack: Attack | None,
                    name: str = "attack", threshold_angle: float = 30.0) -> AttackReport:
    """Clean and attacked frame accuracy at the angle threshold; `attack=None` is a no-op."""
    c = model.config.channels
    refs, tests = as_batch(references, c), as_batch(tests, c)
    if len(refs) == 1 and len(tests) > 1:
        refs = np.repeat(refs, len(tests), axis=0)
    angles = np.asarray(angles, dtype=np.float64)
    if len(tests) == 0:
        raise ValueError("cannot evaluate an attack on an empty set")
    truth = angles >= threshold_angle
    clean_ok = (predict_angles(model, refs, tests) >= threshold_angle) == truth
    adv = tests if attack is None else attack(model, refs, tests, angles)
    adv_ok = (predict_angles(model, refs, adv) >= threshold_angle) == truth
    n_ok = int(clean_ok.sum())
    success = float(np.mean(~adv_ok[clean_ok])) if n_ok else 0.0
    return AttackReport(name, float(clean_ok.mean()), float(adv_ok.mean()), success, len(tests))


def standard_attacks(config: AttackConfig | None = None, uap: UniversalPerturbation | None = None,
                     patch_seed: int = 0) -> dict[str, Attack]:
    """The evaluation attacks keyed by name: fgsm, pgd, and optionally uap; plus patch."""
    cfg = config or AttackConfig()
    attacks: dict[str, Attack] = {
        "fgsm": lambda m, r, t, y: fgsm_batch(m, r, t, y, cfg.epsilon, (cfg.clip_min, cfg.clip_max)),
        "pgd": lambda m, r, t, y: pgd_batch(m, r, t, y, cfg),
    }
    if uap is not None:
        attacks["uap"] = lambda m, r, t, y: uap.apply(t, (cfg.clip_min, cfg.clip_max))
    attacks["patch"] = lambda m, r, t, y: patch_batch(t, np.random.default_rng(patch_seed))
    return attacks


# -- defense --------------------------------------------------------------------


@dataclass
class DefenseConfig:
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    mix_ratio: float = 0.75  # adversarial share of every batch
    patch_ratio: float = 0.1  # share of the clean remainder that gets a random patch
    train_attack: AttackConfig = field(default_factory=lambda: AttackConfig(iterations=1, step_size=0.25))
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mix_ratio <= 1:
            raise ValueError(f"mix ratio must lie in (0, 1], got {self.mix_ratio}")
        if not 0 <= self.patch_ratio <= 1:
            raise ValueError(f"patch ratio must lie in [0, 1], got {self.patch_ratio}")


@dataclass
class DefenseResult:
    before: list[AttackReport]
    after: list[AttackReport]
    history: list[dict]


def adversarial_batch_hook(cfg: DefenseConfig):
    """Replace a share of each batch's test frames with attacks on the current model."""
    atk = cfg.train_attack

    def hook(model, refs, tests, angles, rng):
        n_adv = int(round(cfg.mix_ratio * len(tests)))
        out = tests.copy()
        if n_adv:
            out[:n_adv] = pgd_batch(model, refs[:n_adv], tests[:n_adv], angles[:n_adv], atk, rng=rng)
        n_patch = int(round(cfg.patch_ratio * (len(tests) - n_adv)))
        if n_patch:
            sl = slice(n_adv, n_adv + n_patch)
            out[sl] = patch_batch(tests[sl], rng)
        return out

    return hook


def adversarial_train(model: AngleNetModel, references, tests, angles, config: DefenseConfig | None = None,
                      eval_set: tuple | None = None, eval_attacks: dict[str, Attack] | None = None,
                      threshold_angle: float = 30.0) -> DefenseResult:
    """Retrain in place on clean frames mixed with attacks crafted per batch against the
    current parameters; reports attack accuracy before and after on `eval_set`."""
    cfg = config or DefenseConfig()
    c = model.config.channels
    refs, tests = as_batch(references, c), as_batch(tests, c)
    angles = np.asarray(angles, dtype=np.float64)
    if len(angles) == 0:
        raise ValueError("adversarial training needs a non-empty clean corpus")

    def report():
        if eval_set is None:
            return []
        attacks = {"clean": None, **(eval_attacks or standard_attacks())}
        return [evaluate_attack(model, *eval_set, atk, name, threshold_angle) for name, atk in attacks.items()]

    before = report()
    train_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                            optimizer=cfg.optimizer, val_fraction=0.0, seed=cfg.seed)
    result = fit_pairs(model, refs, tests, angles, train_cfg, val=None, batch_hook=adversarial_batch_hook(cfg))
    after = report()
    return DefenseResult(before, after, result.history)

