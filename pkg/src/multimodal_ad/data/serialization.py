"""Versioned binary weight files.

Layout (all integers little-endian)::

    magic        4 bytes  b"MMAD"
    version      uint32
    meta_len     uint32, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_tensors    uint32
    per tensor:  name_len uint16, name (UTF-8), rank uint8, rank x uint32 dims,
                 prod(dims) little-endian float32 values

Float64 side data (normalizers, calibration) lives in the JSON block, where
Python's shortest-repr floats round-trip exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = b"MMAD"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def _encode(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise WeightFileError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is stored")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def save_weights(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(_encode(tensors, metadata or {}))
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise WeightFileError(f"{self.path}: truncated file (needed {n} bytes at offset {self.pos}, "
                                  f"{len(self.raw) - self.pos} left)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a weight file; any malformed or truncated content raises before returning."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version} (this build reads {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.raw):
        raise WeightFileError(f"{path}: {len(r.raw) - r.pos} trailing bytes after the last tensor")
    return tensors, metadata


# -- model bundles --------------------------------------------------------------


def save_anglenet(path, model, extra: dict | None = None) -> Path:
    meta = {"kind": "anglenet", "config": asdict(model.config), **(extra or {})}
    return save_weights(path, model.state_dict(), meta)


def load_anglenet(path):
    from ..anglenet import AngleNetConfig, AngleNetModel

    tensors, meta = load_weights(path)
    if meta.get("kind") != "anglenet":
        raise WeightFileError(f"{path}: not an AngleNet file (kind={meta.get('kind')!r})")
    model = AngleNetModel(AngleNetConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model, meta


def save_imu_detector(path, detector, extra: dict | None = None) -> Path:
    tensors = {f"data.{k}": v for k, v in detector.ae_data.state_dict().items()}
    tensors.update({f"mag.{k}": v for k, v in detector.ae_mag.state_dict().items()})
    meta = {
        "kind": "imu",
        "data_widths": detector.ae_data.widths,
        "mag_widths": detector.ae_mag.widths,
        "norm_data": {"mins": detector.norm_data.mins.tolist(), "maxs": detector.norm_data.maxs.tolist()},
        "norm_mag": {"mins": detector.norm_mag.mins.tolist(), "maxs": detector.norm_mag.maxs.tolist()},
        "calibration": asdict(detector.calibration),
        **(extra or {}),
    }
    return save_weights(path, tensors, meta)


def load_imu_detector(path):
    from ..imu import AutoencoderModel, Calibration, ImuDetector, Normalizer

    tensors, meta = load_weights(path)
    if meta.get("kind") != "imu":
        raise WeightFileError(f"{path}: not an IMU detector file (kind={meta.get('kind')!r})")
    ae_d, ae_m = AutoencoderModel(meta["data_widths"]), AutoencoderModel(meta["mag_widths"])
    ae_d.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("data.")})
    ae_m.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("mag.")})

    def norm(d):
        return Normalizer(np.array(d["mins"], dtype=np.float64), np.array(d["maxs"], dtype=np.float64))

    det = ImuDetector(norm(meta["norm_data"]), norm(meta["norm_mag"]), ae_d, ae_m,
                      Calibration(**meta["calibration"]))
    return det, meta
