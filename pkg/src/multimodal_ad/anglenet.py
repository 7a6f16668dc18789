"""Two-branch convolutional regressor for the rotation angle between two frames.

Both frames pass through one shared convolution stack; the feature maps are
concatenated channel-wise, go through one more conv block and two hidden
dense layers, and a ReLU head produces the angle in degrees.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .data.images import rotate_augment
from .optim import make_optimizer
from .tensor import Tensor

log = logging.getLogger(__name__)

ANGLE_SCALE = 90.0


@dataclass
class AngleNetConfig:
    input_size: int = 64
    channels: int = 1
    branch_widths: tuple[int, ...] = (8, 16, 32)
    post_width: int = 32
    hidden: tuple[int, int] = (128, 32)
    threshold_angle: float = 30.0

    def __post_init__(self):
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_size != 64:
            raise ValueError(f"input size is fixed at 64, got {self.input_size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not self.branch_widths or any(w <= 0 for w in self.branch_widths) or self.post_width <= 0:
            raise ValueError(f"invalid conv widths {self.branch_widths} / {self.post_width}")
        if len(self.hidden) != 2 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"need two positive hidden widths, got {self.hidden}")
        if len(self.branch_widths) + 1 > 6:
            raise ValueError("too many pooling stages for a 64x64 input")
        if not self.threshold_angle > 0:
            raise ValueError(f"threshold angle must be > 0, got {self.threshold_angle}")

    @property
    def feature_size(self) -> int:
        side = self.input_size // 2 ** (len(self.branch_widths) + 1)
        return self.post_width * side * side


@dataclass(frozen=True)
class AngleEstimate:
    angle: float
    sigma_l: float

    @classmethod
    def from_angle(cls, angle: float) -> "AngleEstimate":
        return cls(angle=float(angle), sigma_l=float(angle) / ANGLE_SCALE)


def _init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)): small enough that the head's positive bias
    # dominates at the start, so the output ReLU is not dead from step one
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(n: int, value: float = 0.0) -> Tensor:
    return Tensor(np.full(n, value), requires_grad=True)


class ConvBranch:
    """Stack of conv(3x3, same) -> ReLU -> maxpool blocks."""

    def __init__(self, in_channels: int, widths: Sequence[int], rng: np.random.Generator):
        self.layers: list[tuple[Tensor, Tensor]] = []
        c = in_channels
        for w in widths:
            self.layers.append((_init(rng, (w, c, 3, 3), c * 9), _zeros(w)))
            c = w

    def __call__(self, x: Tensor) -> Tensor:
        for kernels, bias in self.layers:
            x = T.maxpool2d(T.relu(T.conv2d(x, kernels, bias, padding="same")))
        return x


class AngleNetModel:
    def __init__(self, config: AngleNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        branch = ConvBranch(config.channels, config.branch_widths, rng)
        # one object serves both inputs: weights are aliased, never copied
        self.branches = (branch, branch)
        c = 2 * config.branch_widths[-1]
        self.post = (_init(rng, (config.post_width, c, 3, 3), c * 9), _zeros(config.post_width))
        h1, h2 = config.hidden
        f = config.feature_size
        self.fc1 = (_init(rng, (h1, f), f), _zeros(h1))
        self.fc2 = (_init(rng, (h2, h1), h1), _zeros(h2))
        # positive head bias keeps the ReLU output alive at initialisation
        self.head = (_init(rng, (1, h2), h2), _zeros(1, 0.5))

    @property
    def branch(self) -> ConvBranch:
        return self.branches[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (k, b) in enumerate(self.branch.layers):
            out += [(f"branch.{i}.kernels", k), (f"branch.{i}.bias", b)]
        for name in ("post", "fc1", "fc2", "head"):
            w, b = getattr(self, name)
            out += [(f"{name}.weights", w), (f"{name}.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"state keys mismatch: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def astype(self, dtype) -> "AngleNetModel":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @contextlib.contextmanager
    def frozen(self) -> Iterator["AngleNetModel"]:
        """Parameters stop collecting gradients inside the block (input gradients still flow)."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def forward_scaled(self, reference: Tensor, test: Tensor) -> Tensor:
        """Batched forward returning angle / 90 with shape [N]."""
        n = reference.shape[0]
        feats = self.branch(T.concat_batch(reference, test))
        ref_f, test_f = T.split_batch(feats, n)
        x = T.concat_channels(ref_f, test_f)
        x = T.maxpool2d(T.relu(T.conv2d(x, *self.post, padding="same")))
        x = T.relu(T.dense(T.flatten(x), *self.fc1))
        x = T.relu(T.dense(x, *self.fc2))
        return T.reshape(T.relu(T.dense(x, *self.head)), (n,))

    def __call__(self, reference: Tensor, test: Tensor) -> Tensor:
        """Batched forward returning angles in degrees, shape [N]."""
        return self.forward_scaled(reference, test) * ANGLE_SCALE


def build_anglenet(config: AngleNetConfig | None = None, seed: int = 0) -> AngleNetModel:
    return AngleNetModel(config or AngleNetConfig(), seed)


def as_batch(images, channels: int = 1, size: int = 64) -> np.ndarray:
    """Stack images into a float32 ``[N, C, H, W]`` array, validating the size."""
    arr = np.asarray(images, dtype=np.float32)
    if channels == 1 and arr.ndim == 3 and arr.shape[1:] == (size, size):
        arr = arr[:, None]
    elif channels == 1 and arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3 and arr.shape[0] == channels:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (channels, size, size):
        raise ValueError(f"expected {channels}x{size}x{size} images, got array of shape {np.shape(images)}")
    return arr


def predict_angles(model: AngleNetModel, references, tests, batch_size: int = 64) -> np.ndarray:
    """Angles in degrees for aligned batches of reference/test images."""
    c = model.config.channels
    refs = as_batch(references, c)
    tests = as_batch(tests, c)
    if len(refs) == 1 and len(tests) > 1:
        refs = np.repeat(refs, len(tests), axis=0)
    if len(refs) != len(tests):
        raise ValueError(f"{len(refs)} references for {len(tests)} test images")
    out = np.empty(len(tests), dtype=np.float64)
    with T.no_grad():
        for i in range(0, len(tests), batch_size):
            sl = slice(i, i + batch_size)
            out[sl] = model(Tensor(refs[sl]), Tensor(tests[sl])).data
    return out


def estimate_angle(model: AngleNetModel, reference, test) -> AngleEstimate:
    angle = predict_angles(model, reference, test)[0]
    return AngleEstimate.from_angle(angle)


def classify_frame(estimate: AngleEstimate | float, threshold_angle: float = 30.0) -> str:
    """'abnormal' when the angle reaches the threshold (inclusive)."""
    if not threshold_angle > 0:
        raise ValueError(f"threshold angle must be > 0, got {threshold_angle}")
    angle = estimate.angle if isinstance(estimate, AngleEstimate) else float(estimate)
    return "abnormal" if angle >= threshold_angle else "normal"


def frame_accuracy(pred_angles, true_angles, threshold_angle: float = 30.0) -> float:
    pred = np.asarray(pred_angles) >= threshold_angle
    true = np.asarray(true_angles) >= threshold_angle
    return float(np.mean(pred == true))


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class TrainResult:
    val_mae: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)


BatchHook = Callable[[AngleNetModel, np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/validation split."""
    if n == 0:
        raise ValueError("cannot split an empty corpus")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0:
        n_val = max(n_val, 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_epoch(model: AngleNetModel, refs: np.ndarray, tests: np.ndarray, angles: np.ndarray,
                opt, batch_size: int, rng: np.random.Generator, batch_hook: BatchHook | None = None) -> float:
    """One pass of minibatch MSE descent on angle/90; returns the mean batch loss."""
    order = rng.permutation(len(angles))
    losses = []
    params = model.parameters()
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        r, t, y = refs[idx], tests[idx], angles[idx]
        if batch_hook is not None:
            t = batch_hook(model, r, t, y, rng)
        for p in params:
            p.grad = None
        with T.Tape() as tape:
            pred = model.forward_scaled(Tensor(r), Tensor(t))
            loss = T.mse(pred, (y / ANGLE_SCALE).astype(np.float32))
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def fit_pairs(model: AngleNetModel, refs, tests, angles, cfg: TrainConfig,
              val: tuple | None = None, batch_hook: BatchHook | None = None) -> TrainResult:
    """Train on labelled pairs, keeping the parameters with the lowest validation MAE."""
    c = model.config.channels
    refs, tests = as_batch(refs, c), as_batch(tests, c)
    angles = np.asarray(angles, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    history = []
    best_state, best_mae, best_epoch = model.state_dict(), np.inf, 0
    if val is not None:
        best_mae = float(np.mean(np.abs(predict_angles(model, val[0], val[1]) - val[2])))
        history.append({"epoch": 0, "train_loss": None, "val_mae": best_mae})
    for epoch in range(1, cfg.epochs + 1):
        loss = train_epoch(model, refs, tests, angles, opt, cfg.batch_size, rng, batch_hook)
        record = {"epoch": epoch, "train_loss": loss}
        if val is not None:
            mae = float(np.mean(np.abs(predict_angles(model, val[0], val[1]) - val[2])))
            record["val_mae"] = mae
            if mae < best_mae:
                best_state, best_mae, best_epoch = model.state_dict(), mae, epoch
        else:
            best_state, best_epoch = model.state_dict(), epoch
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
    model.load_state_dict(best_state)
    return TrainResult(val_mae=float(best_mae), best_epoch=best_epoch, history=history)


def pretrain(model: AngleNetModel, refs, tests, angles, cfg: TrainConfig | None = None) -> TrainResult:
    """Supervised pretraining on rotation-augmented pairs with an 80/20 split."""
    cfg = cfg or TrainConfig()
    angles = np.asarray(angles, dtype=np.float64)
    if len(angles) == 0:
        raise ValueError("pretraining corpus is empty")
    refs, tests = np.asarray(refs), np.asarray(tests)
    train_idx, val_idx = split_indices(len(angles), cfg.val_fraction, cfg.seed)
    val = (refs[val_idx], tests[val_idx], angles[val_idx]) if len(val_idx) else None
    return fit_pairs(model, refs[train_idx], tests[train_idx], angles[train_idx], cfg, val=val)


@dataclass
class FinetuneConfig:
    epochs: int = 2
    pairs_per_epoch: int = 1500
    batch_size: int = 32
    lr: float = 3e-4
    optimizer: str = "adam"
    same_scene_fraction: float = 0.25
    max_angle: float = 90.0
    seed: int = 1


def self_labelled_pairs(frames: np.ndarray, n: int, rng: np.random.Generator,
                        same_scene_fraction: float = 0.25, max_angle: float = 90.0):
    """Pairs built from normal frames only: (frame, rotated frame) labelled with the
    rotation, and (frame_i, frame_j) labelled 0."""
    frames = np.asarray(frames, dtype=np.float32)
    refs, tests, angles = [], [], []
    for _ in range(n):
        i = int(rng.integers(len(frames)))
        if len(frames) > 1 and rng.random() < same_scene_fraction:
            j = int(rng.integers(len(frames)))
            refs.append(frames[i])
            tests.append(frames[j])
            angles.append(0.0)
        else:
            theta = float(rng.uniform(0.0, max_angle))
            refs.append(frames[i])
            tests.append(rotate_augment(frames[i], theta)[0])
            angles.append(theta)
    return np.stack(refs), np.stack(tests), np.array(angles)


def finetune(model: AngleNetModel, normal_frames, cfg: FinetuneConfig | None = None) -> TrainResult:
    """Continue training on self-labelled pairs from normal frames at a lower learning rate."""
    cfg = cfg or FinetuneConfig()
    frames = np.asarray(normal_frames, dtype=np.float32)
    if frames.size == 0 or len(frames) == 0:
        raise ValueError("finetuning needs at least one normal frame")
    if cfg.epochs == 0:
        return TrainResult(val_mae=float("nan"), best_epoch=0, history=[])
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        refs, tests, angles = self_labelled_pairs(frames, cfg.pairs_per_epoch, rng,
                                                  cfg.same_scene_fraction, cfg.max_angle)
        loss = train_epoch(model, as_batch(refs), as_batch(tests), angles, opt, cfg.batch_size, rng)
        history.append({"epoch": epoch, "train_loss": loss})
        log.info("finetune epoch %d: loss %.5f", epoch, loss)
    return TrainResult(val_mae=float("nan"), best_epoch=cfg.epochs, history=history)
