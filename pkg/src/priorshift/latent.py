"""Latent frame sequences and the operations that shape them.

Covers per-dimension standardization, nearest-entry codebook quantization,
nearest-neighbor label upsampling, and the line-delimited dataset format
used to move sequences between commands.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LatentSequence:
    """One utterance-like unit: aligned labels and latent frames.

    ``zc2`` (quantization residual targets) and ``h`` (encoder features)
    are optional aligned tracks carried by training data; converted output
    drops them.
    """

    id: str
    labels: np.ndarray
    frames: np.ndarray
    zc2: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be (n, d) with n >= 1, got shape {frames.shape}")
        if labels.shape != (frames.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {frames.shape[0]} frames"
            )
        if not np.isfinite(frames).all():
            raise ValueError(f"sequence {self.id!r} has non-finite frames")
        for name in ("zc2", "h"):
            track = getattr(self, name)
            if track is not None and np.asarray(track).shape != frames.shape:
                raise ValueError(f"{name} track shape does not match frames")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map to zero mean, unit scale."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError("mean and std must be matching 1-D arrays")
        if not (std > 0).all():
            raise ValueError("standardizer scale must be strictly positive")


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError(f"codebook must be (M, d) with M >= 1, got shape {e.shape}")

    def __len__(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])


@dataclass(frozen=True)
class LabelTrack:
    """Condition labels at source frame resolution."""

    labels: np.ndarray


def fit_standardizer(dataset: Iterable[LatentSequence]) -> Standardizer:
    """Pool all frames and fit population mean and scale per dimension."""
    stacks = [np.asarray(seq.frames, dtype=np.float64) for seq in dataset]
    if not stacks:
        raise ValueError("cannot fit a standardizer on an empty dataset")
    frames = np.concatenate(stacks, axis=0)
    if frames.shape[0] < 2:
        raise ValueError("need at least 2 frames to fit a standardizer")
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    dead = np.flatnonzero(var == 0.0)
    if dead.size:
        raise ValueError(f"zero variance in dimension {int(dead[0])}")
    return Standardizer(mean=mean, std=np.sqrt(var))


def standardize_frames(frames: np.ndarray, s: Standardizer) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != s.mean.shape[0]:
        raise ValueError(
            f"frame dim {frames.shape[-1]} does not match standardizer dim {s.mean.shape[0]}"
        )
    return (frames - s.mean) / s.std


def destandardize_frames(frames: np.ndarray, s: Standardizer) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != s.mean.shape[0]:
        raise ValueError(
            f"frame dim {frames.shape[-1]} does not match standardizer dim {s.mean.shape[0]}"
        )
    return frames * s.std + s.mean


def standardize(seq: LatentSequence, s: Standardizer) -> LatentSequence:
    """Standardize the frame track; labels and auxiliary tracks pass through."""
    return LatentSequence(
        id=seq.id, labels=seq.labels, frames=standardize_frames(seq.frames, s),
        zc2=seq.zc2, h=seq.h,
    )


def destandardize(seq: LatentSequence, s: Standardizer) -> LatentSequence:
    return LatentSequence(
        id=seq.id, labels=seq.labels, frames=destandardize_frames(seq.frames, s),
        zc2=seq.zc2, h=seq.h,
    )


def snap_to_codebook(frame: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    """Nearest entry under squared Euclidean distance; ties take the lowest index."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (cb.dim,):
        raise ValueError(f"frame shape {frame.shape} does not match codebook dim {cb.dim}")
    diff = cb.entries - frame
    idx = int(np.argmin((diff * diff).sum(axis=1)))
    return idx, np.array(cb.entries[idx], dtype=np.float64)


def snap_frames(frames: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized snap of an (n, d) block; returns (indices, snapped frames)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.dim:
        raise ValueError(f"frames shape {frames.shape} does not match codebook dim {cb.dim}")
    diff = frames[:, None, :] - cb.entries[None, :, :]
    idx = (diff * diff).sum(axis=2).argmin(axis=1)
    return idx, np.array(cb.entries[idx], dtype=np.float64)


def upsample_nearest(track: LabelTrack, target_len: int) -> np.ndarray:
    """Resample labels to ``target_len`` by nearest source position.

    Output slot i reads source index floor((i + 0.5) * L / target_len),
    evaluated exactly in integers.
    """
    labels = np.asarray(track.labels)
    L = labels.shape[0]
    if L < 1:
        raise ValueError("label track is empty")
    if target_len < 1:
        raise ValueError(f"target length must be >= 1, got {target_len}")
    i = np.arange(target_len, dtype=np.int64)
    src = (2 * i + 1) * L // (2 * target_len)
    return labels[src]


# Dataset file format: one sequence per line, tab-separated fields
#   id, comma-joined labels, frame track, then optional zc2 and h tracks.
# Frame tracks join dimensions with "," and frames with "|".  A leading
# header line "#dim=<d> labels=<K>" pins the frame dimension and the label
# vocabulary size.  Floats are written with 17 significant digits, which
# round-trips float64 exactly.

def _encode_track(track: np.ndarray) -> str:
    return "|".join(",".join(f"{v:.17g}" for v in row) for row in track)


def _decode_track(text: str, dim: int, seq_id: str, what: str) -> np.ndarray:
    rows = []
    for part in text.split("|"):
        row = [float(v) for v in part.split(",")]
        if len(row) != dim:
            raise ValueError(
                f"sequence {seq_id!r}: {what} frame has {len(row)} dims, header says {dim}"
            )
        rows.append(row)
    return np.array(rows, dtype=np.float64)


def save_dataset(seqs: Sequence[LatentSequence], path: str, n_labels: int) -> None:
    if not seqs:
        raise ValueError("refusing to write an empty dataset")
    dim = seqs[0].dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={dim} labels={int(n_labels)}\n")
        for seq in seqs:
            if seq.dim != dim:
                raise ValueError(f"sequence {seq.id!r} dim {seq.dim} != dataset dim {dim}")
            if seq.labels.min() < 0 or seq.labels.max() >= n_labels:
                raise ValueError(f"sequence {seq.id!r} has labels outside [0, {n_labels})")
            fields = [
                seq.id,
                ",".join(str(int(v)) for v in seq.labels),
                _encode_track(seq.frames),
            ]
            if seq.zc2 is not None or seq.h is not None:
                if seq.zc2 is None or seq.h is None:
                    raise ValueError(f"sequence {seq.id!r} must carry both zc2 and h or neither")
                fields.append(_encode_track(seq.zc2))
                fields.append(_encode_track(seq.h))
            fh.write("\t".join(fields) + "\n")


def load_dataset(path: str) -> tuple[list[LatentSequence], int, int]:
    """Read a dataset file; returns (sequences, frame dim, label vocabulary size)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        m = header.split()
        if len(m) != 2 or not m[0].startswith("#dim=") or not m[1].startswith("labels="):
            raise ValueError(f"{path}: bad dataset header {header!r}")
        dim = int(m[0][len("#dim="):])
        n_labels = int(m[1][len("labels="):])
        seqs: list[LatentSequence] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 5):
                raise ValueError(f"{path}:{lineno}: expected 3 or 5 fields, got {len(fields)}")
            seq_id = fields[0]
            labels = np.array([int(v) for v in fields[1].split(",")], dtype=np.int64)
            if labels.min() < 0 or labels.max() >= n_labels:
                raise ValueError(f"{path}:{lineno}: label outside [0, {n_labels})")
            frames = _decode_track(fields[2], dim, seq_id, "latent")
            zc2 = h = None
            if len(fields) == 5:
                zc2 = _decode_track(fields[3], dim, seq_id, "zc2")
                h = _decode_track(fields[4], dim, seq_id, "h")
            seqs.append(LatentSequence(id=seq_id, labels=labels, frames=frames, zc2=zc2, h=h))
    if not seqs:
        raise ValueError(f"{path}: dataset has no sequences")
    return seqs, dim, n_labels
