"""On-disk layout for labeled sequences.

A dataset directory holds an ``index.ini`` listing the sequences and, per
sequence, a MOTChallenge-style ground-truth text file ``<name>.txt``
(``frame,id,x,y,w,h,conf,-1,-1,-1``; frames are 1-based, false positives
use id -1) plus a little-endian binary feature sidecar ``<name>.feat``.
Feature rows follow the text lines one-to-one.

Feature file layout::

    0   4s   magic b"IDTF"
    4   u32  version (1)
    8   u32  feature_dim
    12  u64  count
    20  f32  count * feature_dim values, row-major
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .scene import NO_TRACK, Frame, LabeledSequence

FEAT_MAGIC = b"IDTF"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIQ")
INDEX_NAME = "index.ini"


@dataclass(frozen=True)
class MOTRow:
    frame: int
    track_id: int
    box: tuple[float, float, float, float]
    confidence: float


def format_mot_line(frame: int, track_id: int, box, confidence: float) -> str:
    x, y, w, h = (repr(float(v)) for v in box)
    return f"{frame},{track_id},{x},{y},{w},{h},{float(confidence)!r},-1,-1,-1"


def parse_mot_line(line: str) -> MOTRow:
    parts = line.strip().split(",")
    if len(parts) < 7:
        raise FormatError(f"expected at least 7 comma-separated fields, got {line!r}")
    try:
        return MOTRow(
            int(float(parts[0])),
            int(float(parts[1])),
            (float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5])),
            float(parts[6]),
        )
    except ValueError:
        raise FormatError(f"non-numeric field in {line!r}") from None


def read_mot_file(path: str | Path) -> list[MOTRow]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(parse_mot_line(line))
    return rows


def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise FormatError("feature block must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, features.shape[1], features.shape[0]))
        fh.write(features.tobytes())


def read_features(path: str | Path, feature_dim: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    magic, version, dim, count = _FEAT_HEADER.unpack_from(data, 0)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if feature_dim is not None and dim != feature_dim:
        raise FormatError(f"{path}: feature_dim {dim} does not match expected {feature_dim}", offset=8)
    expected = _FEAT_HEADER.size + 4 * dim * count
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload holds {len(data) - _FEAT_HEADER.size} bytes, header implies {4 * dim * count}",
            offset=min(len(data), expected),
        )
    out = np.frombuffer(data, dtype="<f4", offset=_FEAT_HEADER.size, count=dim * count)
    return out.reshape(count, dim).astype(np.float32)


def write_sequence(seq: LabeledSequence, directory: str | Path) -> None:
    directory = Path(directory)
    lines = []
    feats = []
    for f, frame in enumerate(seq.frames, 1):
        for i in range(len(frame)):
            lines.append(format_mot_line(f, int(frame.gt_ids[i]), frame.boxes[i], frame.scores[i]))
        feats.append(frame.features)
    (directory / f"{seq.name}.txt").write_text("".join(line + "\n" for line in lines))
    block = np.concatenate(feats) if feats else np.zeros((0, seq.feature_dim), np.float32)
    write_features(directory / f"{seq.name}.feat", block)


def read_sequence(directory: str | Path, name: str, num_frames: int, feature_dim: int) -> LabeledSequence:
    directory = Path(directory)
    rows = read_mot_file(directory / f"{name}.txt")
    feats = read_features(directory / f"{name}.feat", feature_dim)
    if len(feats) != len(rows):
        raise FormatError(f"{name}: {len(rows)} text rows but {len(feats)} feature rows", offset=12)
    per_frame: list[list[int]] = [[] for _ in range(num_frames)]
    for r, row in enumerate(rows):
        if not 1 <= row.frame <= num_frames:
            raise FormatError(f"{name}: frame {row.frame} outside 1..{num_frames}")
        per_frame[row.frame - 1].append(r)
    frames = []
    for idx in per_frame:
        if not idx:
            frames.append(Frame.empty(feature_dim))
            continue
        frames.append(
            Frame(
                np.array([rows[r].box for r in idx], np.float64),
                np.array([rows[r].confidence for r in idx], np.float64),
                feats[idx],
                np.array([rows[r].track_id if rows[r].track_id >= 0 else NO_TRACK for r in idx], np.int64),
            )
        )
    return LabeledSequence(name, feature_dim, frames)


def write_dataset(seqs: list[LabeledSequence], path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = configparser.ConfigParser()
    index["dataset"] = {"version": str(FEAT_VERSION), "count": str(len(seqs))}
    for i, seq in enumerate(seqs):
        write_sequence(seq, path)
        index[f"sequence.{i}"] = {
            "name": seq.name,
            "seqLength": str(len(seq.frames)),
            "featureDim": str(seq.feature_dim),
        }
    with open(path / INDEX_NAME, "w") as fh:
        index.write(fh)


def read_dataset(path: str | Path) -> list[LabeledSequence]:
    path = Path(path)
    index = configparser.ConfigParser()
    if not index.read(path / INDEX_NAME):
        raise FormatError(f"{path / INDEX_NAME}: missing dataset index")
    try:
        count = index.getint("dataset", "count")
        seqs = []
        for i in range(count):
            sec = index[f"sequence.{i}"]
            seqs.append(read_sequence(path, sec["name"], int(sec["seqLength"]), int(sec["featureDim"])))
    except (KeyError, ValueError, configparser.Error) as err:
        raise FormatError(f"{path / INDEX_NAME}: malformed index ({err})") from None
    return seqs
