"""Corpus manifests and timestamp alignment of image and IMU streams.

A manifest is line-oriented text; blank lines and ``#`` comments are ignored::

    frame     <t> <relative image path>
    imu_data  <t> qw qx qy qz wx wy wz ax ay az
    imu_mag   <t> mx my mz
    label     <t> normal|abnormal [rotation_deg [object_present]]

Label timestamps refer to frame timestamps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .images import IMAGE_SIZE, resize, to_grayscale

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# multimodal-ad manifest v1"
IMU_DATA_DIM = 10
IMU_MAG_DIM = 3
QUATERNION_TOLERANCE = 1e-3


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImuDataSample:
    timestamp: float
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    angular_velocity: np.ndarray  # rad/s
    linear_acceleration: np.ndarray  # m/s^2

    @classmethod
    def from_vector(cls, timestamp: float, values) -> "ImuDataSample":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (IMU_DATA_DIM,):
            raise ValueError(f"IMU/data vector needs {IMU_DATA_DIM} values, got {v.shape}")
        q = v[:4]
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"orientation quaternion norm {norm:.6f} is not within 1 +- {QUATERNION_TOLERANCE}")
        return cls(float(timestamp), q / norm, v[4:7].copy(), v[7:10].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.orientation, self.angular_velocity, self.linear_acceleration])


@dataclass(frozen=True)
class ImuMagSample:
    timestamp: float
    field: np.ndarray  # raw sensor units

    @classmethod
    def from_vector(cls, timestamp: float, values) -> "ImuMagSample":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (IMU_MAG_DIM,) or not np.all(np.isfinite(v)):
            raise ValueError(f"IMU/mag needs {IMU_MAG_DIM} finite values, got {values!r}")
        return cls(float(timestamp), v.copy())

    def vector(self) -> np.ndarray:
        return self.field


@dataclass(frozen=True)
class FrameLabel:
    label: str
    rotation: float | None = None
    object_present: bool | None = None


@dataclass
class CorpusManifest:
    root: Path
    frames: list[tuple[float, str]] = field(default_factory=list)
    imu_data: list[tuple[float, np.ndarray]] = field(default_factory=list)
    imu_mag: list[tuple[float, np.ndarray]] = field(default_factory=list)
    labels: dict[float, FrameLabel] = field(default_factory=dict)

    def label_counts(self) -> dict[str, int]:
        counts = {"normal": 0, "abnormal": 0}
        for lab in self.labels.values():
            counts[lab.label] += 1
        return counts

    def to_text(self) -> str:
        lines = [MANIFEST_HEADER]
        lines += [f"frame {t:.6f} {p}" for t, p in self.frames]
        lines += [f"imu_data {t:.6f} " + " ".join(f"{x:.9g}" for x in v) for t, v in self.imu_data]
        lines += [f"imu_mag {t:.6f} " + " ".join(f"{x:.9g}" for x in v) for t, v in self.imu_mag]
        for t, lab in sorted(self.labels.items()):
            extra = ""
            if lab.rotation is not None:
                extra += f" {lab.rotation:.6f}"
                if lab.object_present is not None:
                    extra += f" {int(lab.object_present)}"
            lines.append(f"label {t:.6f} {lab.label}{extra}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def _ts_key(t: float) -> float:
    return round(float(t), 6)


def parse_manifest(path: str | Path, check_paths: bool = True) -> CorpusManifest:
    """Parse a manifest; any malformed line is rejected with its line number."""
    path = Path(path)
    manifest = CorpusManifest(root=path.parent)
    last = {"frame": -np.inf, "imu_data": -np.inf, "imu_mag": -np.inf}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            t = float(parts[1])
        except (IndexError, ValueError):
            raise ManifestError(f"{path}:{lineno}: missing or bad timestamp in {line!r}") from None
        if tag in last:
            if t < last[tag]:
                raise ManifestError(f"{path}:{lineno}: {tag} timestamp {t} decreases")
            last[tag] = t
        try:
            if tag == "frame":
                if len(parts) != 3:
                    raise ValueError("expected: frame <t> <path>")
                if check_paths and not (manifest.root / parts[2]).is_file():
                    raise ValueError(f"image {parts[2]} does not exist")
                manifest.frames.append((t, parts[2]))
            elif tag == "imu_data":
                vals = np.array([float(x) for x in parts[2:]])
                ImuDataSample.from_vector(t, vals)
                manifest.imu_data.append((t, vals))
            elif tag == "imu_mag":
                vals = np.array([float(x) for x in parts[2:]])
                ImuMagSample.from_vector(t, vals)
                manifest.imu_mag.append((t, vals))
            elif tag == "label":
                if len(parts) not in (3, 4, 5) or parts[2] not in ("normal", "abnormal"):
                    raise ValueError("expected: label <t> normal|abnormal [rotation [object]]")
                rot = float(parts[3]) if len(parts) > 3 else None
                obj = bool(int(parts[4])) if len(parts) > 4 else None
                manifest.labels[_ts_key(t)] = FrameLabel(parts[2], rot, obj)
            else:
                raise ValueError(f"unknown record tag {tag!r}")
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return manifest


@dataclass
class AlignedSample:
    timestamp: float
    image: np.ndarray | None
    imu_data: ImuDataSample | None
    imu_mag: ImuMagSample | None
    label: FrameLabel | None = None

    @property
    def complete(self) -> bool:
        return self.image is not None and self.imu_data is not None and self.imu_mag is not None


def nearest_within(times: np.ndarray, t: float, tolerance: float) -> int | None:
    """Index of the record nearest to `t` (earlier wins ties), or None if outside tolerance."""
    if len(times) == 0:
        return None
    i = int(np.searchsorted(times, t))
    candidates = [j for j in (i - 1, i) if 0 <= j < len(times)]
    best = min(candidates, key=lambda j: (abs(times[j] - t), j))
    return best if abs(times[best] - t) <= tolerance + 1e-12 else None


def load_image(path: str | Path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return resize(to_grayscale(pixels), size)


def align(manifest: CorpusManifest, tolerance: float = 0.05, lenient: bool = False,
          load_images: bool = True) -> list[AlignedSample]:
    """Pair every frame with the nearest IMU/data and IMU/mag records within `tolerance` seconds."""
    if not manifest.frames:
        raise ManifestError("manifest has no frame records")
    data_t = np.array([t for t, _ in manifest.imu_data])
    mag_t = np.array([t for t, _ in manifest.imu_mag])
    out = []
    skipped = 0
    for t, rel in manifest.frames:
        di = nearest_within(data_t, t, tolerance)
        mi = nearest_within(mag_t, t, tolerance)
        if (di is None or mi is None) and not lenient:
            skipped += 1
            log.warning("frame t=%.6f has no IMU partner within %.3fs; skipped", t, tolerance)
            continue
        data = ImuDataSample.from_vector(*manifest.imu_data[di]) if di is not None else None
        mag = ImuMagSample.from_vector(*manifest.imu_mag[mi]) if mi is not None else None
        image = load_image(manifest.root / rel) if load_images else None
        out.append(AlignedSample(t, image, data, mag, manifest.labels.get(_ts_key(t))))
    if not out:
        raise ManifestError(f"no frame could be paired with IMU records within {tolerance}s")
    if skipped:
        log.warning("%d of %d frames skipped during alignment", skipped, len(manifest.frames))
    return out


def load_corpus(manifest_path: str | Path, tolerance: float = 0.05, lenient: bool = False) -> list[AlignedSample]:
    return align(parse_manifest(manifest_path), tolerance, lenient)


def imu_pairs(manifest: CorpusManifest, tolerance: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """All IMU/data records paired with their nearest IMU/mag record, as two arrays."""
    mag_t = np.array([t for t, _ in manifest.imu_mag])
    data, mag = [], []
    for t, v in manifest.imu_data:
        mi = nearest_within(mag_t, t, tolerance)
        if mi is not None:
            data.append(ImuDataSample.from_vector(t, v).vector())
            mag.append(manifest.imu_mag[mi][1])
    return np.array(data).reshape(-1, IMU_DATA_DIM), np.array(mag).reshape(-1, IMU_MAG_DIM)
