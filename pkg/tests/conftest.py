from __future__ import annotations

import shutil
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

TOY = Path(__file__).resolve().parents[1] / "src" / "kwscreen" / "data" / "toy"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def toy_dir(tmp_path) -> Path:
    dst = tmp_path / "toy"
    shutil.copytree(TOY, dst, ignore=shutil.ignore_patterns("out"))
    return dst


@pytest.fixture
def small_lexicon():
    from kwscreen.corpus import Lexicon

    return Lexicon.from_mapping(
        {"dog": "NOUN", "ball": "NOUN", "chases": "VERB", "grass": "NOUN", "boy": "NOUN", "red": "ADJ"},
        stopwords={"a", "the"},
    )
