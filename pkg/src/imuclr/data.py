"""Aligned-triplet datasets: synthetic generation, stream windowing, CSV
ingestion, alignment stripping, few-shot sampling, and a binary on-disk
container with per-blob CRC validation.

IMU segments are 6-channel (triaxial accelerometer + gyroscope) float
arrays; video/text enter as precomputed unit embedding vectors with
presence masks. Storage is float32 / int32; compute is float64.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDatasetError, DataError, ParseError
from .seeding import make_rng

FORMAT_VERSION = 1
IMU_CHANNELS = 6
DEFAULT_TEST_FRACTION = 0.2

_BLOBS = ("imu.bin", "video.bin", "text.bin", "labels.bin",
          "video_mask.bin", "text_mask.bin")


@dataclass
class AlignedTriplet:
    """Per-sample view: one IMU segment plus optional modality embeddings."""

    imu: np.ndarray                  # [6, T]
    video_emb: np.ndarray | None     # unit vector [d]
    text_emb: np.ndarray | None      # unit vector [d]
    label: int | None
    source_id: str


@dataclass
class TripletDataset:
    """Column-major container; absent embeddings are zero rows with a false
    mask bit, absent labels are -1."""

    imu: np.ndarray           # [n, 6, T] float64
    video_emb: np.ndarray     # [n, d]
    video_mask: np.ndarray    # [n] bool
    text_emb: np.ndarray      # [n, d]
    text_mask: np.ndarray     # [n] bool
    labels: np.ndarray        # [n] int32, -1 = unlabeled
    class_names: list[str]
    sample_rate_hz: float
    train_range: tuple[int, int]
    test_range: tuple[int, int]
    source_ids: list[str]
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(IMU_CHANNELS))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(IMU_CHANNELS))

    def __len__(self) -> int:
        return self.imu.shape[0]

    @property
    def n_segments(self) -> int:
        return self.imu.shape[0]

    @property
    def segment_length(self) -> int:
        return self.imu.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.video_emb.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(*self.train_range)

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(*self.test_range)

    def __getitem__(self, i: int) -> AlignedTriplet:
        label = int(self.labels[i])
        return AlignedTriplet(
            imu=self.imu[i],
            video_emb=self.video_emb[i] if self.video_mask[i] else None,
            text_emb=self.text_emb[i] if self.text_mask[i] else None,
            label=label if label >= 0 else None,
            source_id=self.source_ids[i],
        )

    def validate(self) -> None:
        n = self.n_segments
        for name, arr, want in (
            ("video_emb", self.video_emb, (n, self.embed_dim)),
            ("text_emb", self.text_emb, (n, self.embed_dim)),
            ("video_mask", self.video_mask, (n,)),
            ("text_mask", self.text_mask, (n,)),
            ("labels", self.labels, (n,)),
        ):
            if arr.shape != want:
                raise DataError(f"{name} has shape {arr.shape}, expected {want}")
        if not np.all(np.isfinite(self.imu)):
            raise DataError("IMU data contains non-finite values")
        for mask, emb, name in ((self.video_mask, self.video_emb, "video"),
                                (self.text_mask, self.text_emb, "text")):
            if mask.any():
                norms = np.linalg.norm(emb[mask], axis=1)
                if np.any(np.abs(norms - 1.0) > 1e-6):
                    raise DataError(f"present {name} embeddings must be unit-norm")
        lo, hi = self.train_range
        lo2, hi2 = self.test_range
        if not (0 <= lo <= hi <= n and 0 <= lo2 <= hi2 <= n):
            raise DataError("split ranges out of bounds")
        if max(lo, lo2) < min(hi, hi2):
            raise DataError("train/test index ranges overlap")

    def alignment_stats(self) -> dict[str, int]:
        return {
            "video_aligned": int(self.video_mask.sum()),
            "text_aligned": int(self.text_mask.sum()),
            "labeled": int((self.labels >= 0).sum()),
        }


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale surrogate corpus: class-coded sinusoid mixtures with
    matching modality embeddings built from per-class prototypes."""

    n_classes: int = 8
    segments_per_class: int = 250
    T: int = 100
    sample_rate_hz: float = 20.0
    embed_dim: int = 64
    imu_noise: float = 0.7
    video_noise: float = 0.25
    text_noise: float = 0.1
    text_coarseness: int = 2
    test_fraction: float = DEFAULT_TEST_FRACTION
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.segments_per_class < 1:
            raise ConfigError("n_classes and segments_per_class must be >= 1")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        for name in ("imu_noise", "video_noise", "text_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.text_coarseness < 1 or self.n_classes % self.text_coarseness != 0:
            raise ConfigError(
                f"n_classes ({self.n_classes}) must be divisible by "
                f"text_coarseness ({self.text_coarseness})"
            )
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.embed_dim < self.n_classes:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be >= n_classes ({self.n_classes}) "
                "for orthogonal prototypes"
            )


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _orthonormal_prototypes(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return q.T[:k].copy()


def gen_synthetic(spec: SyntheticSpec) -> TripletDataset:
    """Deterministic synthetic dataset: per class, IMU segments are a sum of
    two sinusoids with class-specific frequencies and channel amplitudes,
    plus per-segment phase/amplitude jitter and Gaussian noise; video/text
    embeddings are noisy copies of per-class (per-group for text)
    orthonormal prototypes."""
    rng = make_rng(spec.seed, "synthetic")
    k, d = spec.n_classes, spec.embed_dim

    video_protos = _orthonormal_prototypes(k, d, rng)
    n_groups = k // spec.text_coarseness
    text_protos = _orthonormal_prototypes(n_groups, d, rng)

    freqs1 = rng.uniform(0.5, 4.0, size=k)
    freqs2 = rng.uniform(4.0, 8.5, size=k)
    amps1 = rng.uniform(0.1, 1.0, size=(k, IMU_CHANNELS))
    amps2 = rng.uniform(0.1, 1.0, size=(k, IMU_CHANNELS))

    t_axis = np.arange(spec.T) / spec.sample_rate_hz
    per = spec.segments_per_class
    n = k * per
    imu = np.zeros((n, IMU_CHANNELS, spec.T))
    video = np.zeros((n, d))
    text = np.zeros((n, d))
    labels = np.zeros(n, dtype=np.int32)
    source_ids = [""] * n

    for c in range(k):
        for j in range(per):
            i = c * per + j
            phase1, phase2 = rng.uniform(0, 2 * np.pi, size=2)
            amp = math.exp(rng.normal(0.0, 0.35))
            wave1 = np.sin(2 * np.pi * freqs1[c] * t_axis + phase1)
            wave2 = np.sin(2 * np.pi * freqs2[c] * t_axis + phase2)
            clean = amps1[c][:, None] * wave1 + amps2[c][:, None] * wave2
            imu[i] = amp * clean + spec.imu_noise * rng.normal(size=(IMU_CHANNELS, spec.T))
            video[i] = video_protos[c] + spec.video_noise * rng.normal(size=d)
            text[i] = text_protos[c // spec.text_coarseness] + spec.text_noise * rng.normal(size=d)
            labels[i] = c
            source_ids[i] = f"synthetic/{spec.seed}/class{c}/seg{j}"

    video = _unit_rows(video)
    text = _unit_rows(text)

    # Class-stratified split, test block at the tail so ranges stay contiguous.
    test_per = max(1, int(round(spec.test_fraction * per)))
    train_idx, test_idx = [], []
    for c in range(k):
        rows = np.arange(c * per, (c + 1) * per)
        train_idx.extend(rows[: per - test_per])
        test_idx.extend(rows[per - test_per:])
    order = np.array(train_idx + test_idx)
    n_train = len(train_idx)

    ds = TripletDataset(
        imu=imu[order],
        video_emb=video[order],
        video_mask=np.ones(n, dtype=bool),
        text_emb=text[order],
        text_mask=np.ones(n, dtype=bool),
        labels=labels[order],
        class_names=[f"class{c}" for c in range(k)],
        sample_rate_hz=spec.sample_rate_hz,
        train_range=(0, n_train),
        test_range=(n_train, n),
        source_ids=[source_ids[i] for i in order],
    )
    _normalize_channels(ds)
    ds.validate()
    return ds


def _normalize_channels(ds: TripletDataset) -> None:
    """Per-channel z-normalization with statistics from the training split."""
    train = ds.imu[slice(*ds.train_range)]
    mean = train.mean(axis=(0, 2))
    std = train.std(axis=(0, 2))
    std = np.where(std < 1e-12, 1.0, std)
    ds.imu = (ds.imu - mean[None, :, None]) / std[None, :, None]
    ds.norm_mean = mean
    ds.norm_std = std


# ---------------------------------------------------------------------------
# Windowing / alignment / sampling
# ---------------------------------------------------------------------------

def window_stream(stream: np.ndarray, sample_rate_hz: float,
                  window_s: float = 5.0, hop_s: float | None = None) -> list[np.ndarray]:
    """Cut a [C, N] stream into fixed [C, T] windows; the trailing remainder
    is dropped. A stream shorter than one window yields an empty list and a
    warning."""
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2:
        raise DataError(f"stream must be [C, N], got shape {stream.shape}")
    window = int(round(window_s * sample_rate_hz))
    hop = window if hop_s is None else int(round(hop_s * sample_rate_hz))
    if window < 1 or hop < 1:
        raise ConfigError(f"window/hop must span >= 1 sample, got {window}/{hop}")
    n = stream.shape[1]
    if n < window:
        warnings.warn(f"stream of {n} samples shorter than one {window}-sample window")
        return []
    count = (n - window) // hop + 1
    return [stream[:, i * hop : i * hop + window].copy() for i in range(count)]


def strip_alignment(ds: TripletDataset, keep_fraction: float,
                    rng: np.random.Generator) -> TripletDataset:
    """Remove video and text embeddings from a uniformly random subset so
    that exactly round(keep_fraction * aligned) segments stay aligned."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    out = replace(
        ds,
        video_emb=ds.video_emb.copy(),
        video_mask=ds.video_mask.copy(),
        text_emb=ds.text_emb.copy(),
        text_mask=ds.text_mask.copy(),
    )
    aligned = np.flatnonzero(ds.video_mask | ds.text_mask)
    keep = int(round(keep_fraction * aligned.size))
    drop = rng.choice(aligned, size=aligned.size - keep, replace=False)
    out.video_mask[drop] = False
    out.text_mask[drop] = False
    out.video_emb[drop] = 0.0
    out.text_emb[drop] = 0.0
    return out


def sample_few_shot(ds: TripletDataset, n_per_class: int, trial_seed: int) -> np.ndarray:
    """Sorted indices of exactly n_per_class labeled training segments per
    class, sampled without replacement."""
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = make_rng(trial_seed, "few-shot")
    train = ds.train_indices
    labels = ds.labels[train]
    picked = []
    for c in range(ds.n_classes):
        rows = train[labels == c]
        if rows.size < n_per_class:
            raise DataError(
                f"class '{ds.class_names[c]}' has only {rows.size} labeled training "
                f"segments, need {n_per_class}"
            )
        picked.append(rng.choice(rows, size=n_per_class, replace=False))
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

DEFAULT_CSV_SCHEMA = {
    "acc_x": "acc_x", "acc_y": "acc_y", "acc_z": "acc_z",
    "gyro_x": "gyro_x", "gyro_y": "gyro_y", "gyro_z": "gyro_z",
}
_CHANNEL_ROLES = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z")


def import_csv(path: str, sample_rate_hz: float, label_column: str = "label",
               schema: dict[str, str] | None = None,
               timestamp_column: str | None = None,
               window_s: float = 5.0, hop_s: float | None = None,
               test_fraction: float = DEFAULT_TEST_FRACTION) -> TripletDataset:
    """Load a labeled 6-channel sensor recording into windowed segments.

    Rows are grouped into maximal runs of one label; each run is windowed
    independently. The result carries labels only (no video/text), so it is
    usable for probing but not for multimodal pretraining.
    """
    schema = dict(DEFAULT_CSV_SCHEMA if schema is None else schema)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        col_of: dict[str, int] = {}
        for role in _CHANNEL_ROLES:
            name = schema.get(role, role)
            if name not in header:
                raise ParseError(f"missing column '{name}' (role {role}) in {path}", line=1)
            col_of[role] = header.index(name)
        if label_column not in header:
            raise ParseError(f"missing label column '{label_column}' in {path}", line=1)
        label_idx = header.index(label_column)
        ts_idx = None
        if timestamp_column is not None:
            if timestamp_column not in header:
                raise ParseError(f"missing timestamp column '{timestamp_column}'", line=1)
            ts_idx = header.index(timestamp_column)

        rows: list[list[float]] = []
        row_labels: list[str] = []
        prev_ts = None
        expected_dt = 1.0 / sample_rate_hz
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(row[col_of[r]]) for r in _CHANNEL_ROLES]
            except (ValueError, IndexError) as exc:
                raise ParseError(f"non-numeric or missing sensor value ({exc})",
                                 line=lineno) from None
            if ts_idx is not None:
                try:
                    ts = float(row[ts_idx])
                except ValueError:
                    raise ParseError("non-numeric timestamp", line=lineno) from None
                if prev_ts is not None:
                    dt = ts - prev_ts
                    if dt <= 0:
                        raise ParseError("non-monotone timestamp", line=lineno)
                    if abs(dt - expected_dt) > 0.1 * expected_dt:
                        raise ParseError(
                            f"sample interval {dt:.6f}s inconsistent with "
                            f"{sample_rate_hz} Hz", line=lineno)
                prev_ts = ts
            rows.append(values)
            row_labels.append(row[label_idx].strip())

    if not rows:
        raise DataError(f"{path} contains no data rows")

    data = np.asarray(rows).T  # [6, N]
    class_names = sorted(set(row_labels))
    class_id = {name: i for i, name in enumerate(class_names)}

    segments: list[np.ndarray] = []
    seg_labels: list[int] = []
    seg_sources: list[str] = []
    start = 0
    base = os.path.basename(path)
    for end in range(1, len(row_labels) + 1):
        if end == len(row_labels) or row_labels[end] != row_labels[start]:
            run = data[:, start:end]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                wins = window_stream(run, sample_rate_hz, window_s, hop_s)
            for w_i, win in enumerate(wins):
                segments.append(win)
                seg_labels.append(class_id[row_labels[start]])
                seg_sources.append(f"{base}:{row_labels[start]}:{start}+{w_i}")
            start = end
    if not segments:
        raise DataError(f"{path}: no label run is long enough for one window")

    imu = np.stack(segments)
    labels = np.asarray(seg_labels, dtype=np.int32)
    n = imu.shape[0]

    # Class-stratified split: the tail of each class's windows becomes test.
    train_idx, test_idx = [], []
    for c in range(len(class_names)):
        rows_c = np.flatnonzero(labels == c)
        n_test = max(1, int(round(test_fraction * rows_c.size))) if rows_c.size > 1 else 0
        train_idx.extend(rows_c[: rows_c.size - n_test])
        test_idx.extend(rows_c[rows_c.size - n_test:])
    order = np.array(train_idx + test_idx, dtype=int)
    n_train = len(train_idx)

    d = 1  # no modality embeddings; keep a minimal placeholder width
    ds = TripletDataset(
        imu=imu[order],
        video_emb=np.zeros((n, d)),
        video_mask=np.zeros(n, dtype=bool),
        text_emb=np.zeros((n, d)),
        text_mask=np.zeros(n, dtype=bool),
        labels=labels[order],
        class_names=class_names,
        sample_rate_hz=sample_rate_hz,
        train_range=(0, n_train),
        test_range=(n_train, n),
        source_ids=[seg_sources[i] for i in order],
    )
    _normalize_channels(ds)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# On-disk container
# ---------------------------------------------------------------------------

def _blob_bytes(ds: TripletDataset) -> dict[str, bytes]:
    return {
        "imu.bin": np.ascontiguousarray(ds.imu, dtype="<f4").tobytes(),
        "video.bin": np.ascontiguousarray(ds.video_emb, dtype="<f4").tobytes(),
        "text.bin": np.ascontiguousarray(ds.text_emb, dtype="<f4").tobytes(),
        "labels.bin": np.ascontiguousarray(ds.labels, dtype="<i4").tobytes(),
        "video_mask.bin": np.packbits(ds.video_mask).tobytes(),
        "text_mask.bin": np.packbits(ds.text_mask).tobytes(),
    }


def save_dataset(ds: TripletDataset, path: str) -> None:
    """Write manifest.json plus binary blobs (f32/i32, little-endian) with a
    CRC32 per blob recorded in the manifest."""
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs = _blob_bytes(ds)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_segments": ds.n_segments,
        "imu_channels": IMU_CHANNELS,
        "T": ds.segment_length,
        "sample_rate_hz": ds.sample_rate_hz,
        "embed_dim": ds.embed_dim,
        "class_names": ds.class_names,
        "splits": {"train": list(ds.train_range), "test": list(ds.test_range)},
        "alignment": ds.alignment_stats(),
        "normalization": {"mean": ds.norm_mean.tolist(), "std": ds.norm_std.tolist()},
        "blobs": {name: {"crc32": zlib.crc32(data), "bytes": len(data)}
                  for name, data in blobs.items()},
        "source_ids": ds.source_ids,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    )
    for name, data in blobs.items():
        (root / name).write_bytes(data)


def load_dataset(path: str) -> TripletDataset:
    """Read a dataset directory back, validating version, sizes, and CRCs.
    Present embedding rows are re-normalized to exact unit norm (storage is
    float32)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptDatasetError(f"{path}: manifest.json missing")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptDatasetError(
            f"unsupported dataset format version {manifest.get('format_version')}"
        )
    n = manifest["n_segments"]
    t = manifest["T"]
    d = manifest["embed_dim"]

    raw: dict[str, bytes] = {}
    for name in _BLOBS:
        blob_path = root / name
        if not blob_path.exists():
            raise CorruptDatasetError(f"{path}: blob {name} missing")
        data = blob_path.read_bytes()
        meta = manifest["blobs"][name]
        if len(data) != meta["bytes"]:
            raise CorruptDatasetError(
                f"{name}: size {len(data)} does not match manifest ({meta['bytes']})"
            )
        if zlib.crc32(data) != meta["crc32"]:
            raise CorruptDatasetError(f"{name}: CRC32 mismatch")
        raw[name] = data

    def as_f64(name: str, shape: tuple[int, ...], dtype: str) -> np.ndarray:
        want = int(np.prod(shape))
        arr = np.frombuffer(raw[name], dtype=dtype)
        if arr.size != want:
            raise CorruptDatasetError(
                f"{name}: {arr.size} values do not fit manifest shape {shape}"
            )
        return arr.reshape(shape)

    imu = as_f64("imu.bin", (n, IMU_CHANNELS, t), "<f4").astype(np.float64)
    video = as_f64("video.bin", (n, d), "<f4").astype(np.float64)
    text = as_f64("text.bin", (n, d), "<f4").astype(np.float64)
    labels = as_f64("labels.bin", (n,), "<i4").astype(np.int32)
    video_mask = np.unpackbits(
        np.frombuffer(raw["video_mask.bin"], dtype=np.uint8), count=n).astype(bool)
    text_mask = np.unpackbits(
        np.frombuffer(raw["text_mask.bin"], dtype=np.uint8), count=n).astype(bool)

    for emb, mask, name in ((video, video_mask, "video"), (text, text_mask, "text")):
        if mask.any():
            norms = np.linalg.norm(emb[mask], axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-3):
                raise CorruptDatasetError(f"{name} embeddings drifted far from unit norm")
            emb[mask] /= norms[:, None]

    ds = TripletDataset(
        imu=imu,
        video_emb=video,
        video_mask=video_mask,
        text_emb=text,
        text_mask=text_mask,
        labels=labels,
        class_names=list(manifest["class_names"]),
        sample_rate_hz=float(manifest["sample_rate_hz"]),
        train_range=tuple(manifest["splits"]["train"]),
        test_range=tuple(manifest["splits"]["test"]),
        source_ids=list(manifest["source_ids"]),
        norm_mean=np.asarray(manifest["normalization"]["mean"]),
        norm_std=np.asarray(manifest["normalization"]["std"]),
    )
    stats = ds.alignment_stats()
    for key, val in manifest["alignment"].items():
        if stats.get(key) != val:
            raise CorruptDatasetError(
                f"alignment statistic {key}: manifest says {val}, blobs say {stats.get(key)}"
            )
    ds.validate()
    return ds


def dataset_content_hash(path: str) -> str:
    """SHA-256 over the manifest and all blobs, for run manifests."""
    root = Path(path)
    h = hashlib.sha256()
    h.update((root / "manifest.json").read_bytes())
    for name in _BLOBS:
        h.update((root / name).read_bytes())
    return h.hexdigest()
