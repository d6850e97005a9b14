"""Forward and inverted keyword indexes over a static gallery.

Gallery items are dense integers ``0..N-1``. The inverted index is kept in
CSR form: ``offsets[k]:offsets[k+1]`` slices the sorted posting list of
label ``k`` out of one flat ``ids`` array.
"""

from __future__ import annotations

import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CorruptIndex, InvalidLabel, KwScreenError, MissingFile, VocabMismatch
from .jsonl import read_jsonl, write_jsonl

FALLBACKS = ("full_gallery", "empty")

MAGIC = b"KWIX"
VERSION = 1
_HEADER = struct.Struct("<4sH16sII")


@dataclass(frozen=True)
class ForwardIndex:
    entries: Mapping[int, frozenset[int]]

    def __post_init__(self):
        n = len(self.entries)
        if set(self.entries) != set(range(n)):
            raise KwScreenError("gallery ids must be the dense range 0..N-1")

    @classmethod
    def from_label_sets(cls, label_sets: Iterable[Iterable[int]]) -> "ForwardIndex":
        return cls({g: frozenset(int(k) for k in labels) for g, labels in enumerate(label_sets)})

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class InvertedIndex:
    offsets: np.ndarray  # (L + 1,) int64
    ids: np.ndarray  # (M,) int64, each slice strictly ascending
    gallery_count: int
    vocab_hash: str = ""

    @property
    def label_count(self) -> int:
        return len(self.offsets) - 1

    def postings(self, label: int) -> np.ndarray:
        return self.ids[self.offsets[label] : self.offsets[label + 1]]

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (
            self.gallery_count == other.gallery_count
            and self.vocab_hash == other.vocab_hash
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class ScreenResult:
    retained: np.ndarray
    fallback_used: bool = False
    touched: int = field(default=0, compare=False)

    @property
    def n_retained(self) -> int:
        return len(self.retained)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build(forward: ForwardIndex, n_labels: int | None = None, vocab_hash: str = "") -> InvertedIndex:
    """Invert ``forward`` into sorted posting lists.

    ``n_labels`` is the vocabulary size; any label at or beyond it raises
    InvalidLabel. When omitted it is inferred as ``max label + 1``.
    """
    n = len(forward)
    sizes = np.fromiter((len(forward.entries[g]) for g in range(n)), dtype=np.int64, count=n)
    labels = np.fromiter(
        (k for g in range(n) for k in forward.entries[g]), dtype=np.int64, count=int(sizes.sum())
    )
    return build_from_arrays(np.repeat(np.arange(n, dtype=np.int64), sizes), labels, n, n_labels, vocab_hash)


def build_from_arrays(
    gallery: np.ndarray, labels: np.ndarray, n_gallery: int, n_labels: int | None = None, vocab_hash: str = ""
) -> InvertedIndex:
    """Same as :func:`build` from parallel (gallery_id, label_id) arrays with no duplicate pairs."""
    gallery = np.asarray(gallery, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise InvalidLabel("negative label id")
    if n_labels is None:
        n_labels = int(labels.max()) + 1 if labels.size else 0
    elif labels.size and labels.max() >= n_labels:
        raise InvalidLabel(f"label {int(labels.max())} exceeds vocabulary size {n_labels}")
    order = np.lexsort((gallery, labels))
    counts = np.bincount(labels, minlength=n_labels)
    offsets = np.zeros(n_labels + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return InvertedIndex(_frozen(offsets), _frozen(gallery[order]), int(n_gallery), vocab_hash)


def invert(index: InvertedIndex) -> ForwardIndex:
    """Recover the forward map from an inverted index."""
    per: list[set[int]] = [set() for _ in range(index.gallery_count)]
    for k in range(index.label_count):
        for g in index.postings(k).tolist():
            per[g].add(k)
    return ForwardIndex({g: frozenset(s) for g, s in enumerate(per)})


def union(index: InvertedIndex, query_labels: Iterable[int]) -> tuple[np.ndarray, int]:
    """Sorted, deduplicated union of the postings of ``query_labels``.

    Returns ``(ids, touched)`` where ``touched`` is the total posting mass
    read. Unknown label ids contribute nothing. Cost depends on the
    touched postings only, never on the gallery size.
    """
    L = index.label_count
    off = index.offsets
    parts = []
    for k in set(query_labels):
        if 0 <= k < L and off[k + 1] > off[k]:
            parts.append(index.ids[off[k] : off[k + 1]])
    if not parts:
        return np.empty(0, dtype=np.int64), 0
    if len(parts) == 1:
        return parts[0], len(parts[0])
    cat = np.concatenate(parts)
    return np.unique(cat), len(cat)


def screen(index: InvertedIndex, query_labels: Iterable[int], fallback: str = "full_gallery") -> ScreenResult:
    if fallback not in FALLBACKS:
        raise KwScreenError(f"unknown fallback {fallback!r}")
    ids, touched = union(index, query_labels)
    if ids.size:
        return ScreenResult(ids, False, touched)
    if fallback == "full_gallery":
        return ScreenResult(np.arange(index.gallery_count, dtype=np.int64), True, touched)
    return ScreenResult(ids, True, touched)


def check_vocab(index: InvertedIndex, vocab_hash: str) -> None:
    if index.vocab_hash != vocab_hash:
        raise VocabMismatch(f"index built for vocabulary {index.vocab_hash!r}, expected {vocab_hash!r}")


# -- varint (LEB128) coding ---------------------------------------------------


def encode_varints(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    nbytes = np.ones(v.shape, dtype=np.int64)
    rest = v >> np.uint64(7)
    while rest.any():
        nbytes += rest > 0
        rest >>= np.uint64(7)
    starts = np.zeros(v.shape, dtype=np.int64)
    np.cumsum(nbytes[:-1], out=starts[1:])
    out = np.zeros(int(nbytes.sum()), dtype=np.uint8)
    for j in range(int(nbytes.max())):
        m = nbytes > j
        byte = (v[m] >> np.uint64(7 * j)) & np.uint64(0x7F)
        cont = (nbytes[m] - 1 > j).astype(np.uint64) << np.uint64(7)
        out[starts[m] + j] = (byte | cont).astype(np.uint8)
    return out.tobytes()


def decode_varints(data: bytes) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size == 0:
        return np.empty(0, dtype=np.uint64)
    ends = b < 0x80
    if not ends[-1]:
        raise CorruptIndex("varint stream ends mid-value")
    starts = np.flatnonzero(np.concatenate(([True], ends[:-1])))
    group = np.cumsum(np.concatenate(([0], ends[:-1].astype(np.int64))))
    pos = np.arange(b.size) - starts[group]
    if pos.max() > 9:
        raise CorruptIndex("varint longer than 10 bytes")
    shifted = (b & 0x7F).astype(np.uint64) << (7 * pos).astype(np.uint64)
    return np.add.reduceat(shifted, starts)


# -- file format --------------------------------------------------------------


def _hash_bytes(vocab_hash: str) -> bytes:
    raw = vocab_hash.encode("ascii")
    if len(raw) > 16:
        raise KwScreenError("vocab_hash longer than 16 characters")
    return raw.ljust(16, b"\0")


def to_bytes(index: InvertedIndex) -> bytes:
    """Serialize: header, then per label varints ``label_id, length, gaps...``, then CRC-32."""
    header = _HEADER.pack(MAGIC, VERSION, _hash_bytes(index.vocab_hash), index.gallery_count, index.label_count)
    L = index.label_count
    lengths = np.diff(index.offsets)
    gaps = index.ids.copy()
    if gaps.size:
        firsts = np.zeros(gaps.size, dtype=bool)
        firsts[index.offsets[:-1][lengths > 0]] = True
        gaps[~firsts] = np.diff(index.ids)[~firsts[1:]]
    # interleave (label_id, length) pairs ahead of each posting's gaps
    stream = np.empty(gaps.size + 2 * L, dtype=np.int64)
    head_pos = index.offsets[:-1] + 2 * np.arange(L)
    stream[head_pos] = np.arange(L)
    stream[head_pos + 1] = lengths
    body_mask = np.ones(stream.size, dtype=bool)
    body_mask[head_pos] = False
    body_mask[head_pos + 1] = False
    stream[body_mask] = gaps
    body = header + encode_varints(stream)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> InvertedIndex:
    if len(data) < _HEADER.size + 4:
        raise CorruptIndex("index file truncated")
    magic, version, vh, n, L = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptIndex("bad magic")
    if version != VERSION:
        raise CorruptIndex(f"unsupported index version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptIndex("checksum mismatch")
    stream = decode_varints(data[_HEADER.size : -4]).astype(np.int64)
    offsets = np.zeros(L + 1, dtype=np.int64)
    ids = np.empty(max(stream.size - 2 * L, 0), dtype=np.int64)
    pos = 0
    for k in range(L):
        if pos + 2 > stream.size or stream[pos] != k:
            raise CorruptIndex(f"posting header for label {k} missing")
        length = int(stream[pos + 1])
        pos += 2
        if pos + length > stream.size:
            raise CorruptIndex(f"posting for label {k} truncated")
        seg = np.cumsum(stream[pos : pos + length])
        ids[offsets[k] : offsets[k] + length] = seg
        offsets[k + 1] = offsets[k] + length
        pos += length
    if pos != stream.size:
        raise CorruptIndex("trailing data after last posting")
    for k in range(L):
        seg = ids[offsets[k] : offsets[k + 1]]
        if seg.size and (np.any(np.diff(seg) <= 0) or seg[0] < 0 or seg[-1] >= n):
            raise CorruptIndex(f"posting for label {k} is not a sorted subset of the gallery")
    return InvertedIndex(_frozen(offsets), _frozen(ids), int(n), vh.rstrip(b"\0").decode("ascii"))


def save(index: InvertedIndex, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(index))


def load(path: str | Path) -> InvertedIndex:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    return from_bytes(path.read_bytes())


def stats(index: InvertedIndex) -> dict:
    lengths = np.diff(index.offsets)
    hist = Counter(int(x) for x in lengths[lengths > 0])
    return {
        "N": index.gallery_count,
        "label_count": index.label_count,
        "nonempty_labels": int((lengths > 0).sum()),
        "postings_total": int(index.ids.size),
        "posting_length_histogram": dict(sorted(hist.items())),
        "bytes": len(to_bytes(index)),
    }


def save_forward(path: str | Path, forward: ForwardIndex) -> None:
    write_jsonl(path, ({"gallery_id": g, "labels": sorted(forward.entries[g])} for g in range(len(forward))))


def load_forward(path: str | Path) -> ForwardIndex:
    return ForwardIndex({int(r["gallery_id"]): frozenset(int(k) for k in r["labels"]) for r in read_jsonl(path)})
