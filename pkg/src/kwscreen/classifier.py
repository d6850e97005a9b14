"""Per-modality linear multi-label keyword classifier.

The classifier is a single label-embedding layer over fixed feature
vectors, ``p = sigmoid(W x + b)``, trained by plain mini-batch gradient
descent with either the asymmetric loss (ASL) or binary cross-entropy.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import AnnotationSet
from .errors import (
    CorruptFeatures,
    CorruptModel,
    DimensionMismatch,
    DivergenceError,
    DomainError,
    InvalidLabel,
    JoinError,
    KwScreenError,
    MissingFile,
    NoPositives,
)
from .jsonl import read_jsonl, write_jsonl

log = logging.getLogger(__name__)

EPS = 1e-7
MODALITIES = ("image", "text")


@dataclass(frozen=True)
class AslParams:
    alpha_plus: float = 0.0
    alpha_minus: float = 3.0
    delta: float = 0.05

    def __post_init__(self):
        if not (self.alpha_plus >= 0 and self.alpha_minus >= 0):
            raise KwScreenError("focusing parameters must be non-negative")
        if not (0.0 <= self.delta < 1.0):
            raise KwScreenError("delta must lie in [0, 1)")


@dataclass(frozen=True)
class BceParams:
    pass


BCE = BceParams()


@dataclass
class FeatureRecord:
    sample_id: str
    modality: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise DimensionMismatch("feature vector must be 1-D")
        if not np.all(np.isfinite(self.vector)):
            raise DomainError(f"non-finite feature in {self.sample_id!r}")


@dataclass(eq=False)
class ClassifierModel:
    weights: np.ndarray  # (L, d)
    bias: np.ndarray  # (L,)
    modality: str
    vocab_hash: str = ""
    history: list[float] = field(default_factory=list)

    @property
    def n_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.vocab_hash == other.vocab_hash
            and self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )


@dataclass(frozen=True)
class KeywordPrediction:
    sample_id: str
    probabilities: np.ndarray
    top_r: tuple[int, ...]


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0


# -- losses -----------------------------------------------------------------


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise DomainError("probabilities contain NaN or Inf")
    return np.clip(p, EPS, 1.0 - EPS)


def _label_vector(labels, n: int) -> np.ndarray:
    if isinstance(labels, np.ndarray) and labels.shape == (n,) and labels.dtype != object:
        return labels.astype(np.float64)
    y = np.zeros(n)
    for k in labels:
        if not 0 <= k < n:
            raise InvalidLabel(f"label {k} outside [0, {n})")
        y[k] = 1.0
    return y


def asl_terms(p: np.ndarray, y: np.ndarray, params: AslParams) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ASL loss and d(loss)/dp on already-clamped probabilities."""
    ap, am, delta = params.alpha_plus, params.alpha_minus, params.delta
    log_p = np.log(p)
    one_m = 1.0 - p
    pos = -(one_m**ap) * log_p
    if ap == 0:
        dpos = -1.0 / p
    else:
        dpos = ap * one_m ** (ap - 1.0) * log_p - one_m**ap / p

    q = np.maximum(p - delta, 0.0)
    live = p > delta
    qs = np.where(live, q, 0.5)  # placeholder keeps logs finite in the dead zone
    log_1mq = np.log1p(-qs)
    neg = np.where(live, -(qs**am) * log_1mq, 0.0)
    if am == 0:
        dneg = 1.0 / (1.0 - qs)
    else:
        dneg = -am * qs ** (am - 1.0) * log_1mq + qs**am / (1.0 - qs)
    dneg = np.where(live, dneg, 0.0)

    loss = y * pos + (1.0 - y) * neg
    grad = y * dpos + (1.0 - y) * dneg
    return loss, grad


def bce_terms(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    return loss, grad


def asl_loss(probs, labels, params: AslParams = AslParams()) -> tuple[float, np.ndarray]:
    """Summed asymmetric loss of one sample and its gradient w.r.t. ``probs``.

    ``labels`` is a set of positive label ids (or a 0/1 vector).
    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` first. Negatives with
    ``p <= delta`` lie in the dead zone and contribute exactly zero.
    """
    p = _check_probs(probs)
    y = _label_vector(labels, p.shape[-1])
    loss, grad = asl_terms(p, y, params)
    return float(loss.sum()), grad


def bce_loss(probs, labels) -> tuple[float, np.ndarray]:
    p = _check_probs(probs)
    y = _label_vector(labels, p.shape[-1])
    loss, grad = bce_terms(p, y)
    return float(loss.sum()), grad


def _loss_terms(p, y, loss):
    if isinstance(loss, AslParams):
        return asl_terms(p, y, loss)
    if isinstance(loss, BceParams):
        return bce_terms(p, y)
    raise KwScreenError(f"unsupported loss {loss!r}")


# -- model ------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def forward(model: ClassifierModel, x) -> np.ndarray:
    """Label probabilities for one vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimensionMismatch(f"expected dimension {model.dim}, got {x.shape[-1]}")
    return sigmoid(x @ model.weights.T + model.bias)


def init_model(n_labels: int, dim: int, modality: str, seed: int = 0, vocab_hash: str = "") -> ClassifierModel:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    w = rng.uniform(-bound, bound, size=(n_labels, dim))
    return ClassifierModel(w, np.zeros(n_labels), modality, vocab_hash)


def _join(features: Sequence[FeatureRecord], annotations: Sequence[AnnotationSet], n_labels: int):
    ann = {a.sample_id: a for a in annotations}
    modalities = {f.modality for f in features}
    if len(modalities) != 1:
        raise JoinError(f"train expects a single modality, got {sorted(modalities)}")
    dims = {f.vector.shape[0] for f in features}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed feature dimensions {sorted(dims)}")
    X = np.stack([f.vector for f in features])
    Y = np.zeros((len(features), n_labels))
    for i, f in enumerate(features):
        a = ann.get(f.sample_id)
        if a is None:
            raise JoinError(f"no annotation for sample {f.sample_id!r}")
        for k in a.labels:
            if not 0 <= k < n_labels:
                raise InvalidLabel(f"label {k} outside [0, {n_labels})")
            Y[i, k] = 1.0
    return X, Y, modalities.pop()


def train(
    features: Sequence[FeatureRecord],
    annotations: Sequence[AnnotationSet],
    n_labels: int,
    loss: AslParams | BceParams = AslParams(),
    hyper: TrainHyper = TrainHyper(),
    vocab_hash: str = "",
) -> ClassifierModel:
    """Fit ``W, b`` by mini-batch gradient descent.

    The loss is summed over labels and averaged over the batch. Shuffling
    is driven by ``hyper.seed`` so the result is bit-reproducible.
    """
    if not features:
        raise JoinError("no features to train on")
    X, Y, modality = _join(features, annotations, n_labels)
    rng = np.random.default_rng(hyper.seed)
    model = init_model(n_labels, X.shape[1], modality, hyper.seed, vocab_hash)
    W, b = model.weights, model.bias
    n = X.shape[0]
    bs = max(1, hyper.batch_size)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = X[idx], Y[idx]
            p_raw = sigmoid(xb @ W.T + b)
            p = np.clip(p_raw, EPS, 1.0 - EPS)
            terms, dp = _loss_terms(p, yb, loss)
            batch_loss = float(terms.sum())
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"loss became non-finite in epoch {epoch}")
            total += batch_loss
            dz = dp * p_raw * (1.0 - p_raw) / len(idx)
            gW = dz.T @ xb
            if hyper.weight_decay:
                gW += hyper.weight_decay * W
            with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check below
                W -= hyper.lr * gW
                b -= hyper.lr * dz.sum(axis=0)
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"parameters became non-finite in epoch {epoch}")
        model.history.append(total / n)
        log.info("epoch %d  loss %.6f", epoch + 1, total / n)
    return model


def topr(probs, R: int) -> np.ndarray:
    """Indices of the ``R`` largest entries; ties go to the lower index."""
    if R < 1:
        raise KwScreenError("R must be >= 1")
    probs = np.asarray(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :R]


def predict_topr(model: ClassifierModel, x, R: int, sample_id: str = "") -> KeywordPrediction:
    p = forward(model, x)
    return KeywordPrediction(sample_id, p, tuple(int(k) for k in topr(p, R)))


# -- evaluation -------------------------------------------------------------


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP of one ranked list; ties in ``scores`` resolve by sample order."""
    order = np.argsort(-scores, kind="stable")
    rel = positives[order].astype(bool)
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float((hits[rel] / ranks[rel]).mean())


def mean_average_precision(predictions, annotations) -> float:
    """Macro mAP over labels that have at least one positive sample.

    ``annotations`` may hold AnnotationSet objects or plain label-id sets,
    aligned with ``predictions``.
    """
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != len(annotations):
        raise DimensionMismatch("predictions and annotations are not aligned")
    Y = np.zeros(P.shape, dtype=bool)
    for i, a in enumerate(annotations):
        labels = a.labels if isinstance(a, AnnotationSet) else a
        for k in labels:
            Y[i, k] = True
    has_pos = Y.any(axis=0)
    if not has_pos.any():
        raise NoPositives("no label has a positive sample")
    aps = [average_precision(P[:, k], Y[:, k]) for k in np.flatnonzero(has_pos)]
    return float(np.mean(aps))


# -- file formats -----------------------------------------------------------

_MODEL_MAGIC = b"KWCM"
_MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHBII16s")
_FEAT_MAGIC = b"KWFT"
_FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHII")


def _hash_bytes(vocab_hash: str) -> bytes:
    raw = vocab_hash.encode("ascii")
    if len(raw) > 16:
        raise KwScreenError("vocab_hash longer than 16 characters")
    return raw.ljust(16, b"\0")


def model_to_bytes(model: ClassifierModel) -> bytes:
    header = _MODEL_HEADER.pack(
        _MODEL_MAGIC,
        _MODEL_VERSION,
        MODALITIES.index(model.modality),
        model.n_labels,
        model.dim,
        _hash_bytes(model.vocab_hash),
    )
    body = (
        header
        + np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
        + np.ascontiguousarray(model.bias, dtype="<f8").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> ClassifierModel:
    if len(data) < _MODEL_HEADER.size + 4:
        raise CorruptModel("model file truncated")
    magic, version, mod, L, d, vh = _MODEL_HEADER.unpack_from(data)
    if magic != _MODEL_MAGIC:
        raise CorruptModel("bad magic")
    if version != _MODEL_VERSION:
        raise CorruptModel(f"unsupported model version {version}")
    expected = _MODEL_HEADER.size + 8 * (L * d + L) + 4
    if len(data) != expected or mod >= len(MODALITIES):
        raise CorruptModel("model file size does not match header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptModel("checksum mismatch")
    off = _MODEL_HEADER.size
    w = np.frombuffer(data, dtype="<f8", count=L * d, offset=off).reshape(L, d).astype(np.float64)
    b = np.frombuffer(data, dtype="<f8", count=L, offset=off + 8 * L * d).astype(np.float64)
    return ClassifierModel(w, b, MODALITIES[mod], vh.rstrip(b"\0").decode("ascii"))


def save_model(path: str | Path, model: ClassifierModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> ClassifierModel:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    return model_from_bytes(path.read_bytes())


def save_features(path: str | Path, records: Iterable[FeatureRecord], binary: bool = False) -> None:
    path = Path(path)
    records = list(records)
    if not binary:
        write_jsonl(
            path,
            ({"sample_id": r.sample_id, "modality": r.modality, "vector": r.vector.tolist()} for r in records),
        )
        return
    dims = {r.vector.shape[0] for r in records}
    if len(dims) > 1:
        raise DimensionMismatch("binary feature files need a single dimension")
    d = dims.pop() if dims else 0
    parts = [_FEAT_HEADER.pack(_FEAT_MAGIC, _FEAT_VERSION, d, len(records))]
    for r in records:
        sid = r.sample_id.encode("utf-8")
        parts.append(struct.pack("<BH", MODALITIES.index(r.modality), len(sid)))
        parts.append(sid)
        parts.append(np.ascontiguousarray(r.vector, dtype="<f8").tobytes())
    body = b"".join(parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _features_from_binary(data: bytes) -> list[FeatureRecord]:
    if len(data) < _FEAT_HEADER.size + 4:
        raise CorruptFeatures("feature file truncated")
    _, version, d, count = _FEAT_HEADER.unpack_from(data)
    if version != _FEAT_VERSION:
        raise CorruptFeatures(f"unsupported feature version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFeatures("checksum mismatch")
    out = []
    off = _FEAT_HEADER.size
    try:
        for _ in range(count):
            mod, n = struct.unpack_from("<BH", data, off)
            off += 3
            sid = data[off : off + n].decode("utf-8")
            off += n
            vec = np.frombuffer(data, dtype="<f8", count=d, offset=off).astype(np.float64)
            off += 8 * d
            out.append(FeatureRecord(sid, MODALITIES[mod], vec))
    except (struct.error, ValueError, IndexError) as exc:
        raise CorruptFeatures(f"malformed record: {exc}") from exc
    if off != len(data) - 4:
        raise CorruptFeatures("trailing bytes after last record")
    return out


def load_features(path: str | Path) -> list[FeatureRecord]:
    """Read a feature file, JSONL or binary (detected by magic)."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == _FEAT_MAGIC:
        return _features_from_binary(path.read_bytes())
    return [FeatureRecord(str(r["sample_id"]), r["modality"], r["vector"]) for r in read_jsonl(path)]
