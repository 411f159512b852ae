"""Encoded corpora: outlier trimming, splits and the binary tensor pack."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .agents import TrajectoryLog
from .encoding import CHANNELS, SERIES_LEN, EncodedSample, encode_sample
from .landscape import HeightMap

SUBSETS = ("x1", "x4", "all")
SUBSET_PEAKS = {"x1": {1}, "x4": {4}, "all": {1, 4}}

PACK_MAGIC = b"AIDT"
PACK_VERSION = 1
_HEADER = struct.Struct("<4s6I")
_U32 = struct.Struct("<I")


class TooFewTrials(ValueError):
    pass


class PackError(Exception):
    pass


class FormatError(PackError):
    pass


class ChecksumMismatch(PackError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    test: np.ndarray
    seed: int | None = None


@dataclass(eq=False)
class Corpus:
    images: np.ndarray  # (N, C, H, W) float32
    series: np.ndarray  # (N, L) float32
    labels: np.ndarray  # (N,) uint8, 1 = aided
    session_ids: list[str]
    peaks: np.ndarray
    interactions: np.ndarray  # submitted moves per trial, before any truncation
    formulation: str
    subset: str = "all"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.images) == len(self.series) == len(self.session_ids) == len(self.peaks) == n):
            raise ValueError("corpus arrays disagree on sample count")
        if len(set(self.session_ids)) != n:
            raise ValueError("session ids must be unique")
        if self.formulation not in CHANNELS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if n and self.images.shape[1] != CHANNELS[self.formulation]:
            raise ValueError(
                f"{self.formulation} needs {CHANNELS[self.formulation]} channels, got {self.images.shape[1]}"
            )
        if self.subset not in SUBSETS:
            raise ValueError(f"unknown subset {self.subset!r}")
        if n and not set(np.unique(self.peaks).tolist()) <= SUBSET_PEAKS[self.subset]:
            raise ValueError(f"subset {self.subset} inconsistent with peaks {np.unique(self.peaks)}")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: Sequence[int], **changes) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            series=self.series[idx],
            labels=self.labels[idx],
            session_ids=[self.session_ids[i] for i in idx],
            peaks=self.peaks[idx],
            interactions=self.interactions[idx],
            provenance=dict(self.provenance),
            **changes,
        )

    def filter_subset(self, subset: str) -> "Corpus":
        if subset not in SUBSETS:
            raise ValueError(f"unknown subset {subset!r}")
        keep = np.flatnonzero(np.isin(self.peaks, list(SUBSET_PEAKS[subset])))
        return self.take(keep, subset=subset)


def build_corpus(
    logs: Sequence[TrajectoryLog],
    maps: Mapping[str, HeightMap] | Iterable[HeightMap],
    formulation: str,
    wrap: bool = True,
    provenance: dict | None = None,
) -> Corpus:
    if not isinstance(maps, Mapping):
        maps = {m.landscape_id: m for m in maps}
    samples: list[EncodedSample] = []
    for log in logs:
        if log.landscape_id not in maps:
            raise KeyError(f"{log.session_id}: landscape {log.landscape_id} not found")
        samples.append(encode_sample(log, maps[log.landscape_id], formulation, wrap))
    peaks = np.array([s.peaks for s in samples], dtype=np.int64)
    return Corpus(
        images=np.stack([s.image.channels for s in samples]).astype(np.float32),
        series=np.stack([s.series.values for s in samples]).astype(np.float32),
        labels=np.array([s.label for s in samples], dtype=np.uint8),
        session_ids=[s.session_id for s in samples],
        peaks=peaks,
        interactions=np.array([len(log.moves) for log in logs], dtype=np.int64),
        formulation=formulation,
        subset=_subset_for(peaks),
        provenance={"trimmed": False, "wrap_distance": wrap, **(provenance or {})},
    )


def _subset_for(peaks: np.ndarray) -> str:
    present = set(np.unique(peaks).tolist())
    if present == {1}:
        return "x1"
    if present == {4}:
        return "x4"
    return "all"


def tail_count(n: int, fraction: float = 0.025) -> int:
    return int(math.floor(fraction * n))


def _trim_order(counts: Sequence[int], session_ids: Sequence[str], fraction: float) -> list[int]:
    n = len(counts)
    if n < 40:
        raise TooFewTrials(f"trimming needs at least 40 trials, got {n}")
    drop = tail_count(n, fraction)
    order = sorted(range(n), key=lambda i: (counts[i], session_ids[i]))
    return sorted(order[drop : n - drop])


def trim_outliers(logs: Sequence[TrajectoryLog], fraction: float = 0.025) -> list[TrajectoryLog]:
    """Drop ``floor(fraction * N)`` trials from each end of the interaction-count ranking.

    Ties are broken by session id; survivors keep their input order.
    """
    keep = _trim_order([len(log.moves) for log in logs], [log.session_id for log in logs], fraction)
    return [logs[i] for i in keep]


def trim_corpus(corpus: Corpus, fraction: float = 0.025) -> Corpus:
    if corpus.provenance.get("trimmed"):
        raise ValueError("corpus has already been trimmed")
    keep = _trim_order(corpus.interactions.tolist(), corpus.session_ids, fraction)
    out = corpus.take(keep)
    out.provenance["trimmed"] = True
    out.provenance["trim_fraction"] = fraction
    return out


def _count(corpus_or_n) -> int:
    return corpus_or_n if isinstance(corpus_or_n, (int, np.integer)) else len(corpus_or_n)


def split_80_20(corpus_or_n, seed: int, test_fraction: float = 0.2) -> SplitSpec:
    n = _count(corpus_or_n)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    n_test = int(math.floor(test_fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(np.sort(perm[n_test:]), np.sort(perm[:n_test]), seed)


def kfold(corpus_or_n, k: int = 10, seed: int = 0) -> list[SplitSpec]:
    """``k`` splits whose test sides partition the index set; sizes differ by at most one."""
    n = _count(corpus_or_n)
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, fold in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append(SplitSpec(np.sort(rest), np.sort(fold), seed))
    return out


def _sample_dtype(c: int, h: int, w: int, length: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("image", "<f4", (c, h, w)), ("series", "<f4", (length,))])


def pack_bytes(corpus: Corpus) -> bytes:
    n = len(corpus)
    c, h, w = corpus.images.shape[1:] if n else (CHANNELS[corpus.formulation], 24, 24)
    length = corpus.series.shape[1] if n else SERIES_LEN
    meta = {
        "formulation": corpus.formulation,
        "subset": corpus.subset,
        "session_ids": list(corpus.session_ids),
        "peaks": [int(p) for p in corpus.peaks],
        "interactions": [int(i) for i in corpus.interactions],
        "provenance": corpus.provenance,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = np.zeros(n, dtype=_sample_dtype(c, h, w, length))
    records["label"] = corpus.labels
    records["image"] = corpus.images
    records["series"] = corpus.series
    body = b"".join(
        [
            _HEADER.pack(PACK_MAGIC, PACK_VERSION, n, c, h, w, length),
            _U32.pack(len(meta_bytes)),
            meta_bytes,
            records.tobytes(),
        ]
    )
    return body + _U32.pack(zlib.crc32(body))


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pack(corpus: Corpus, path: str | Path) -> None:
    atomic_write(path, pack_bytes(corpus))


def unpack_bytes(data: bytes) -> Corpus:
    if len(data) < _HEADER.size + 2 * _U32.size:
        raise FormatError("file too short for a tensor pack header")
    magic, version, n, c, h, w, length = _HEADER.unpack_from(data, 0)
    if magic != PACK_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != PACK_VERSION:
        raise FormatError(f"unsupported pack version {version}")
    (meta_len,) = _U32.unpack_from(data, _HEADER.size)
    meta_start = _HEADER.size + _U32.size
    dtype = _sample_dtype(c, h, w, length)
    expected = meta_start + meta_len + n * dtype.itemsize + _U32.size
    if len(data) != expected:
        raise FormatError(f"pack is {len(data)} bytes, header implies {expected}")
    (crc,) = _U32.unpack_from(data, len(data) - _U32.size)
    if zlib.crc32(data[: len(data) - _U32.size]) != crc:
        raise ChecksumMismatch("CRC32 does not match pack contents")
    try:
        meta = json.loads(data[meta_start : meta_start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata block: {exc}") from exc
    formulation = meta.get("formulation")
    if CHANNELS.get(formulation) != c:
        raise FormatError(f"header has {c} channels but formulation is {formulation!r}")
    records = np.frombuffer(data, dtype=dtype, count=n, offset=meta_start + meta_len)
    try:
        return Corpus(
            images=records["image"].astype(np.float32),
            series=records["series"].astype(np.float32),
            labels=records["label"].copy(),
            session_ids=list(meta["session_ids"]),
            peaks=np.asarray(meta["peaks"], dtype=np.int64),
            interactions=np.asarray(meta["interactions"], dtype=np.int64),
            formulation=formulation,
            subset=meta["subset"],
            provenance=meta.get("provenance", {}),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"inconsistent pack metadata: {exc}") from exc


def load_pack(path: str | Path) -> Corpus:
    with open(path, "rb") as fh:
        return unpack_bytes(fh.read())
