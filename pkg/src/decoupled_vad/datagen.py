"""Synthetic weakly labelled feature sequences and the DSF1 feature-file format."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"DSF1"
_HEADER = struct.Struct("<4sIIBB")


class InvalidSpecError(ValueError):
    pass


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSequence:
    features: np.ndarray
    video_label: int
    frame_labels: Optional[np.ndarray] = None
    id: str = ""
    # "normal", "transient" or "sustained"; carried by the manifest, not the binary file
    kind: str = "normal"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise InvalidSpecError(f"features must be T x D, got shape {self.features.shape}")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.uint8)
            if self.frame_labels.shape != (self.features.shape[0],):
                raise InvalidSpecError("frame_labels length must equal T")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]


@dataclass
class SynthSpec:
    T: int = 256
    D: int = 64
    n_videos: int = 200
    transient_len_range: tuple[int, int] = (3, 8)
    sustained_len_range: tuple[int, int] = (48, 96)
    anomaly_shift: float = 1.5
    noise_sigma: float = 1.0
    anomalous_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        tmin, tmax = self.transient_len_range
        smin, smax = self.sustained_len_range
        if self.T < 2:
            raise InvalidSpecError("T must be >= 2")
        if self.D < 2:
            raise InvalidSpecError("D must be >= 2 (two anomaly directions)")
        if self.n_videos < 1:
            raise InvalidSpecError("n_videos must be >= 1")
        if not (1 <= tmin <= tmax):
            raise InvalidSpecError(f"degenerate transient range {self.transient_len_range}")
        if not (1 <= smin <= smax):
            raise InvalidSpecError(f"degenerate sustained range {self.sustained_len_range}")
        if tmax >= smin:
            raise InvalidSpecError("transient and sustained length ranges must be disjoint")
        if smax > self.T:
            raise InvalidSpecError("sustained intervals cannot exceed T")
        if not self.anomaly_shift > 0:
            raise InvalidSpecError("anomaly_shift must be positive")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be non-negative")
        if not 0 < self.anomalous_fraction < 1:
            raise InvalidSpecError("anomalous_fraction must lie in (0, 1)")


def anomaly_directions(D: int) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal directions: the mean shift and the regime signature.

    They depend only on ``D`` so that splits drawn with different seeds share
    the same anomaly geometry.
    """
    rng = np.random.default_rng([D, 0xD5F1])
    q, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    return q[:, 0], q[:, 1]


def generate(spec: SynthSpec) -> list[FeatureSequence]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    u, v = anomaly_directions(spec.D)
    n_anom = int(round(spec.anomalous_fraction * spec.n_videos))
    labels = np.zeros(spec.n_videos, dtype=np.int64)
    labels[:n_anom] = 1
    rng.shuffle(labels)

    out = []
    for i, label in enumerate(labels):
        x = rng.normal(0.0, spec.noise_sigma, size=(spec.T, spec.D))
        frames = np.zeros(spec.T, dtype=np.uint8)
        kind = "normal"
        if label:
            kind = "transient" if rng.random() < 0.5 else "sustained"
            lo, hi = spec.transient_len_range if kind == "transient" else spec.sustained_len_range
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.T - length + 1))
            t = np.arange(length)
            if kind == "transient":
                signature = 0.5 * spec.anomaly_shift * np.where(t % 2 == 0, 1.0, -1.0)
            else:
                signature = 0.5 * spec.anomaly_shift * np.sin(math.pi * (t + 0.5) / length)
            x[start:start + length] += spec.anomaly_shift * u + signature[:, None] * v
            frames[start:start + length] = 1
        out.append(FeatureSequence(x, int(label), frames, id=f"vid{i:04d}", kind=kind))
    return out


def save_features(seq: FeatureSequence, path) -> None:
    if not np.all(np.isfinite(seq.features)):
        raise InvalidSpecError("features must be finite")
    has_frames = seq.frame_labels is not None
    buf = bytearray(_HEADER.pack(MAGIC, seq.T, seq.D, int(seq.video_label), int(has_frames)))
    buf += seq.features.astype("<f4").tobytes(order="C")
    if has_frames:
        buf += seq.frame_labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_features(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(data))
    magic, T, D, video_label, has_frames = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if video_label not in (0, 1):
        raise FeatureFormatError(f"video label must be 0 or 1, got {video_label}", 12)
    if has_frames not in (0, 1):
        raise FeatureFormatError(f"frame-label flag must be 0 or 1, got {has_frames}", 13)
    off = _HEADER.size
    n = T * D * 4
    if len(data) < off + n:
        raise FeatureFormatError("truncated feature payload", len(data))
    feats = np.frombuffer(data, dtype="<f4", count=T * D, offset=off).reshape(T, D).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(feats.reshape(-1)))
    if bad.size:
        raise FeatureFormatError("non-finite feature value", off + 4 * int(bad[0]))
    off += n
    frame_labels = None
    if has_frames:
        if len(data) < off + T:
            raise FeatureFormatError("truncated frame labels", len(data))
        frame_labels = np.frombuffer(data, dtype=np.uint8, count=T, offset=off).copy()
        bad = np.flatnonzero(frame_labels > 1)
        if bad.size:
            raise FeatureFormatError("frame label must be 0 or 1", off + int(bad[0]))
        off += T
    if len(data) != off:
        raise FeatureFormatError("trailing bytes after payload", off)
    return FeatureSequence(feats, int(video_label), frame_labels, id=Path(path).stem)


def save_features_csv(seq: FeatureSequence, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for t in range(seq.T):
            row = [repr(float(v)) for v in seq.features[t]]
            if seq.frame_labels is not None:
                row.append(str(int(seq.frame_labels[t])))
            w.writerow(row)


def load_features_csv(path, video_label: int, D: Optional[int] = None) -> FeatureSequence:
    """Read one-row-per-frame CSV. A trailing column is taken as the frame label
    when ``D`` is given and the row has ``D + 1`` columns."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    if not rows:
        raise InvalidSpecError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InvalidSpecError(f"{path}: ragged rows")
    has_frames = D is not None and width == D + 1
    arr = np.array(rows, dtype=np.float64)
    feats = arr[:, :-1] if has_frames else arr
    frames = arr[:, -1].astype(np.uint8) if has_frames else None
    return FeatureSequence(feats, int(video_label), frames, id=Path(path).stem)


MANIFEST_FIELDS = ["id", "split", "file", "video_label", "kind", "T", "D"]


def write_manifest(path, entries: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in entries:
            w.writerow({k: e[k] for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["video_label"] = int(r["video_label"])
        r["T"] = int(r["T"])
        r["D"] = int(r["D"])
    return rows


def load_split(root, split: str) -> list[FeatureSequence]:
    root = Path(root)
    out = []
    for entry in read_manifest(root / "manifest.csv"):
        if entry["split"] != split:
            continue
        f = root / entry["file"]
        if f.suffix == ".csv":
            seq = load_features_csv(f, entry["video_label"], entry["D"])
        else:
            seq = load_features(f)
        seq.id = entry["id"]
        seq.kind = entry["kind"]
        out.append(seq)
    return out


def synth_fields() -> list[str]:
    return [f.name for f in fields(SynthSpec)]
