"""Keyword-guided pre-screening for two-stage image-text retrieval."""

from .classifier import AslParams, BCE, ClassifierModel, TrainHyper, asl_loss, bce_loss, forward, predict_topr, train
from .corpus import Caption, Lexicon, Vocabulary, build_annotations, build_vocabulary, extract_keywords, tokenize
from .index import ForwardIndex, InvertedIndex, ScreenResult, build, screen
from .pipeline import EvalReport, KeywordSource, RetrievalTask, evaluate, run, sweep

__version__ = "0.1.0"
