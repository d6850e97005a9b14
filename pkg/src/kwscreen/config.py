"""Experiment configuration.

The on-disk form is a flat YAML mapping of dotted keys
(``screening.R_I: 15``). Relative paths resolve against the directory of
the config file. Every key can be overridden from the command line by a
flag with the same dotted name; ``PRESCREEN_SEED`` overrides the seed from
the file, and an explicit flag beats both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .errors import ConfigError, MissingFile


@dataclass
class PathsConfig:
    captions: str = "captions.jsonl"
    lexicon: str = "lexicon.tsv"
    stopwords: str = "stopwords.txt"
    vocab: str = "out/vocab.jsonl"
    annotations: str = "out/annotations.jsonl"
    features: str = "features.jsonl"
    rerank_features: str = ""  # empty: reuse paths.features
    model: str = "out/models"
    predictions: str = "out/predictions.jsonl"
    index: str = "out/index"
    screen: str = "out/screen.jsonl"
    report: str = "out/report.json"
    sweep_csv: str = "out/sweep.csv"
    ground_truth: str = ""


@dataclass
class CorpusConfig:
    pos_mode: str = "NOUN"
    min_images: int = 100


@dataclass
class ClassifierConfig:
    loss: str = "asl"
    alpha_plus: float = 0.0
    alpha_minus: float = 3.0
    delta: float = 0.05
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class ScreeningConfig:
    R_I: int = 15
    R_T: int = 3
    image_keywords: str = "predicted"
    text_keywords: str = "predicted"
    fallback: str = "full_gallery"
    direction: str = "both"


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [1, 5])
    timing_repeats: int = 3


@dataclass
class SweepConfig:
    R_I: list[int] = field(default_factory=lambda: [5, 10, 15, 20, 25, 30])
    R_T: list[int] = field(default_factory=lambda: [3])


@dataclass
class Config:
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    screening: ScreeningConfig = field(default_factory=ScreeningConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, key: str) -> Path:
        raw = getattr(self.paths, key)
        if key == "rerank_features" and not raw:
            raw = self.paths.features
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> "Config":
        c, s = self.corpus, self.screening
        checks = [
            (c.pos_mode in ("NOUN", "NVA"), "corpus.pos_mode must be NOUN or NVA"),
            (c.min_images >= 1, "corpus.min_images must be >= 1"),
            (self.classifier.loss in ("asl", "bce"), "classifier.loss must be asl or bce"),
            (self.classifier.alpha_plus >= 0 and self.classifier.alpha_minus >= 0, "focusing parameters must be >= 0"),
            (0 <= self.classifier.delta < 1, "classifier.delta must lie in [0, 1)"),
            (self.classifier.lr > 0, "classifier.lr must be > 0"),
            (self.classifier.epochs >= 0, "classifier.epochs must be >= 0"),
            (self.classifier.batch_size >= 1, "classifier.batch_size must be >= 1"),
            (s.R_I >= 1 and s.R_T >= 1, "screening.R_I and screening.R_T must be >= 1"),
            (s.image_keywords in ("predicted", "ground_truth"), "screening.image_keywords must be predicted or ground_truth"),
            (
                s.text_keywords in ("predicted", "extracted", "merged", "ground_truth"),
                "screening.text_keywords must be predicted, extracted, merged or ground_truth",
            ),
            (s.fallback in ("full_gallery", "empty"), "screening.fallback must be full_gallery or empty"),
            (s.direction in ("IR", "TR", "both"), "screening.direction must be IR, TR or both"),
            (bool(self.eval.ks) and all(k >= 1 for k in self.eval.ks), "eval.ks must be positive"),
            (self.eval.timing_repeats >= 1, "eval.timing_repeats must be >= 1"),
            (all(r >= 1 for r in self.sweep.R_I + self.sweep.R_T), "sweep values must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


SECTIONS = ("paths", "corpus", "classifier", "screening", "eval", "sweep")


def keys() -> dict[str, Any]:
    """Every dotted key mapped to its declared type."""
    out = {}
    base = Config()
    for sec in SECTIONS:
        obj = getattr(base, sec)
        hints = get_type_hints(type(obj))
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = hints[f.name]
    return out


def _coerce(key: str, typ, value):
    try:
        if typ == list[int]:
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return [int(v) for v in value]
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(typ, '__name__', typ)}") from None


def apply(cfg: Config, overrides: dict[str, Any]) -> Config:
    types = keys()
    for key, value in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, _coerce(key, types[key], value))
    return cfg


def load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"no such config file: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a flat key/value mapping")
        for k, v in raw.items():
            if isinstance(v, dict):
                raise ConfigError(f"nested section {k!r}; use dotted keys such as {k}.<name>")
        apply(cfg, raw)
        cfg.base_dir = path.resolve().parent
    env_seed = os.environ.get("PRESCREEN_SEED")
    if env_seed:
        apply(cfg, {"classifier.seed": env_seed})
    apply(cfg, overrides or {})
    return cfg.validate()


def flat(cfg: Config) -> dict[str, Any]:
    return {k: getattr(getattr(cfg, k.split(".")[0]), k.split(".")[1]) for k in keys()}
