"""Regenerate the toy feature file shipped in src/kwscreen/data/toy.

Each vector has one slot per vocabulary label (multi-hot of the sample's
own in-vocabulary keywords) followed by a 4-d identity code of the image,
shared by its captions. Small Gaussian noise is added everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from kwscreen import corpus
from kwscreen.classifier import FeatureRecord, save_features

TOY = Path(__file__).resolve().parents[1] / "src" / "kwscreen" / "data" / "toy"
ID_DIM = 4
NOISE = 0.1


def main() -> None:
    rng = np.random.default_rng(7)
    caps = corpus.load_captions(TOY / "captions.jsonl")
    lex = corpus.load_lexicon(TOY / "lexicon.tsv", TOY / "stopwords.txt")
    vocab = corpus.build_vocabulary(caps, lex, "NOUN", min_images=2)
    anns = {a.sample_id: a for a in corpus.build_annotations(caps, vocab, lex, "NOUN")}
    images = list(dict.fromkeys(c.image_id for c in caps))
    code = {img: rng.standard_normal(ID_DIM) for img in images}

    def vec(labels, img):
        v = np.zeros(len(vocab) + ID_DIM)
        v[sorted(labels)] = 1.0
        v[len(vocab):] = code[img]
        return np.round(v + NOISE * rng.standard_normal(v.shape), 6)

    recs = [FeatureRecord(img, "image", vec(anns[img].labels, img)) for img in images]
    for c in caps:
        own = vocab.ids(corpus.extract_keywords(c.text, lex, "NOUN"))
        recs.append(FeatureRecord(c.text_id, "text", vec(own, c.image_id)))
    save_features(TOY / "features.jsonl", recs)
    print(f"wrote {len(recs)} feature records to {TOY / 'features.jsonl'}")


if __name__ == "__main__":
    main()
