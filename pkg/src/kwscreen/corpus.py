"""Caption ingestion, keyword extraction and ground-truth label derivation.

Image annotations are the union of in-vocabulary keywords found in all of
the image's captions. In ground-truth mode a caption simply inherits the
labels of the image it describes, which guarantees cross-modal overlap.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyVocabulary, KwScreenError, MissingFile, OrphanText
from .jsonl import read_jsonl, write_jsonl

POS_TAGS = ("NOUN", "VERB", "ADJ")
POS_MODES = {
    "NOUN": frozenset({"NOUN"}),
    "NVA": frozenset({"NOUN", "VERB", "ADJ"}),
}

# letters and digits only; underscore is excluded from \w on purpose
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Caption:
    text_id: str
    image_id: str
    text: str


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, frozenset[str]]
    stopwords: frozenset[str] = frozenset()
    canonical: dict[str, str] = field(default_factory=dict)

    def tags(self, word: str) -> frozenset[str]:
        return self.entries.get(word.lower(), frozenset())

    def canonical_form(self, word: str) -> str:
        word = word.lower()
        return self.canonical.get(word, word)

    @classmethod
    def from_mapping(
        cls,
        entries: dict[str, Iterable[str]],
        stopwords: Iterable[str] = (),
        canonical: dict[str, str] | None = None,
    ) -> "Lexicon":
        ents = {}
        for word, tags in entries.items():
            if isinstance(tags, str):
                tags = [tags]
            ents[word.lower()] = frozenset(t.upper() for t in tags)
        canon = {k.lower(): v.lower() for k, v in (canonical or {}).items()}
        return cls(ents, frozenset(w.lower() for w in stopwords), canon)


@dataclass(frozen=True)
class Vocabulary:
    labels: tuple[str, ...]
    image_df: tuple[int, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.labels) != len(self.image_df):
            raise ValueError("labels and image_df differ in length")
        index = {kw: i for i, kw in enumerate(self.labels)}
        if len(index) != len(self.labels):
            raise ValueError("duplicate keyword in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.labels)

    def records(self) -> list[dict]:
        return [
            {"label_id": i, "keyword": kw, "image_df": df}
            for i, (kw, df) in enumerate(zip(self.labels, self.image_df))
        ]

    def to_bytes(self) -> bytes:
        lines = [json.dumps(r, ensure_ascii=False, separators=(",", ":")) for r in self.records()]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    @property
    def hash(self) -> str:
        """16 hex chars of the SHA-256 of the serialized vocabulary."""
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def ids(self, keywords: Iterable[str]) -> frozenset[int]:
        return frozenset(self.index[k] for k in keywords if k in self.index)


@dataclass(frozen=True)
class AnnotationSet:
    sample_id: str
    modality: str
    labels: frozenset[int]

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "modality": self.modality, "labels": sorted(self.labels)}


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _pos_classes(pos_mode: str) -> frozenset[str]:
    try:
        return POS_MODES[pos_mode.upper()]
    except KeyError:
        raise KwScreenError(f"unknown pos_mode {pos_mode!r}; expected NOUN or NVA") from None


def extract_keywords(text: str, lexicon: Lexicon, pos_mode: str = "NOUN") -> set[str]:
    """Keywords of one caption: tokens tagged with a requested POS class.

    Stopwords are dropped both before and after canonicalization. Words
    missing from the lexicon are skipped.
    """
    wanted = _pos_classes(pos_mode)
    out = set()
    for tok in tokenize(text):
        if tok in lexicon.stopwords:
            continue
        if not (lexicon.tags(tok) & wanted):
            continue
        kw = lexicon.canonical_form(tok)
        if kw in lexicon.stopwords:
            continue
        out.add(kw)
    return out


def _image_keywords(captions: Sequence[Caption], lexicon: Lexicon, pos_mode: str) -> dict[str, set[str]]:
    per_image: dict[str, set[str]] = {}
    for cap in captions:
        per_image.setdefault(cap.image_id, set()).update(extract_keywords(cap.text, lexicon, pos_mode))
    return per_image


def build_vocabulary(
    captions: Sequence[Caption], lexicon: Lexicon, pos_mode: str = "NOUN", min_images: int = 100
) -> Vocabulary:
    if not captions:
        raise KwScreenError("captions must be nonempty")
    if min_images < 1:
        raise KwScreenError("min_images must be >= 1")
    df: Counter[str] = Counter()
    for kws in _image_keywords(captions, lexicon, pos_mode).values():
        df.update(kws)
    kept = sorted(((kw, n) for kw, n in df.items() if n >= min_images), key=lambda t: (-t[1], t[0]))
    if not kept:
        raise EmptyVocabulary(f"no keyword is paired with >= {min_images} images")
    return Vocabulary(tuple(k for k, _ in kept), tuple(n for _, n in kept))


def build_annotations(
    captions: Sequence[Caption],
    vocab: Vocabulary,
    lexicon: Lexicon,
    pos_mode: str = "NOUN",
    images: Iterable[str] | None = None,
    text_mode: str = "gt",
) -> list[AnnotationSet]:
    """Image annotations first (in first-appearance order), then texts.

    ``images`` optionally declares the image universe; a caption pointing
    outside it raises OrphanText. ``text_mode="extracted"`` labels each
    caption with its own in-vocabulary keywords instead of its image's.
    """
    if text_mode not in ("gt", "extracted"):
        raise KwScreenError(f"unknown text_mode {text_mode!r}")
    known = None if images is None else set(images)
    image_order: list[str] = []
    per_image: dict[str, set[int]] = {}
    if known is not None:
        for img in images:  # type: ignore[union-attr]
            if img not in per_image:
                image_order.append(img)
                per_image[img] = set()
    text_kws: list[frozenset[int]] = []
    for cap in captions:
        if known is not None and cap.image_id not in known:
            raise OrphanText(f"caption {cap.text_id!r} references unknown image {cap.image_id!r}")
        ids = vocab.ids(extract_keywords(cap.text, lexicon, pos_mode))
        text_kws.append(ids)
        if cap.image_id not in per_image:
            image_order.append(cap.image_id)
            per_image[cap.image_id] = set()
        per_image[cap.image_id].update(ids)

    out = [AnnotationSet(img, "image", frozenset(per_image[img])) for img in image_order]
    for cap, own in zip(captions, text_kws):
        labels = frozenset(per_image[cap.image_id]) if text_mode == "gt" else own
        out.append(AnnotationSet(cap.text_id, "text", labels))
    return out


def annotation_stats(annotations: Sequence[AnnotationSet]) -> dict:
    empty = Counter(a.modality for a in annotations if not a.labels)
    sizes = [len(a.labels) for a in annotations]
    return {
        "samples": len(annotations),
        "empty_images": empty.get("image", 0),
        "empty_texts": empty.get("text", 0),
        "mean_labels": (sum(sizes) / len(sizes)) if sizes else 0.0,
    }


def pair_map(captions: Sequence[Caption]) -> dict[str, str]:
    """text_id -> image_id."""
    return {c.text_id: c.image_id for c in captions}


# -- file formats -----------------------------------------------------------


def load_captions(path: str | Path) -> list[Caption]:
    caps = [Caption(str(r["text_id"]), str(r["image_id"]), str(r["text"])) for r in read_jsonl(path)]
    seen = set()
    for c in caps:
        if c.text_id in seen:
            raise KwScreenError(f"duplicate text_id {c.text_id!r}")
        seen.add(c.text_id)
    return caps


def save_captions(path: str | Path, captions: Iterable[Caption]) -> None:
    write_jsonl(path, ({"text_id": c.text_id, "image_id": c.image_id, "text": c.text} for c in captions))


def load_lexicon(path: str | Path, stopwords_path: str | Path | None = None) -> Lexicon:
    """Tab-separated ``word<TAB>TAG[,TAG...][<TAB>canonical]``; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    entries: dict[str, frozenset[str]] = {}
    canonical: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) < 2:
            raise KwScreenError(f"{path}:{lineno}: expected word<TAB>tags")
        word = cols[0].strip().lower()
        tags = frozenset(t.strip().upper() for t in cols[1].split(",") if t.strip())
        bad = tags - set(POS_TAGS)
        if bad:
            raise KwScreenError(f"{path}:{lineno}: unknown POS tag(s) {sorted(bad)}")
        entries[word] = entries.get(word, frozenset()) | tags
        if len(cols) > 2 and cols[2].strip():
            canonical[word] = cols[2].strip().lower()
    stop: frozenset[str] = frozenset()
    if stopwords_path is not None:
        sp = Path(stopwords_path)
        if not sp.exists():
            raise MissingFile(f"no such file: {sp}")
        stop = frozenset(w.strip().lower() for w in sp.read_text(encoding="utf-8").splitlines() if w.strip())
    return Lexicon(entries, stop, canonical)


def save_vocabulary(path: str | Path, vocab: Vocabulary) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(vocab.to_bytes())


def load_vocabulary(path: str | Path) -> Vocabulary:
    recs = list(read_jsonl(path))
    for i, r in enumerate(recs):
        if r["label_id"] != i:
            raise KwScreenError(f"vocabulary file out of order at line {i + 1}")
    return Vocabulary(tuple(r["keyword"] for r in recs), tuple(int(r["image_df"]) for r in recs))


def save_annotations(path: str | Path, annotations: Iterable[AnnotationSet]) -> None:
    write_jsonl(path, (a.to_json() for a in annotations))


def load_annotations(path: str | Path) -> list[AnnotationSet]:
    return [
        AnnotationSet(str(r["sample_id"]), r["modality"], frozenset(int(x) for x in r["labels"]))
        for r in read_jsonl(path)
    ]
