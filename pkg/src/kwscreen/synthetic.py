"""Synthetic cross-modal corpora with known keyword structure.

Classifier inputs are noisy one-hot (multi-hot plus Gaussian noise) label
indicators; reranker vectors mix label embeddings with a per-image
identity code so that paired retrieval is meaningful but imperfect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import AslParams, BceParams, FeatureRecord, TrainHyper, forward, train
from .corpus import AnnotationSet
from .pipeline import CrossModalData, InnerProductReranker, ModalityData, RetrievalTask


@dataclass
class SyntheticSplit:
    image_labels: list[frozenset[int]]
    text_labels: list[frozenset[int]]  # keywords actually mentioned by each caption
    text_image: np.ndarray  # caption -> image position
    image_features: np.ndarray
    text_features: np.ndarray
    image_embed: np.ndarray
    text_embed: np.ndarray


def _label_prior(n_labels: int, skew: float) -> np.ndarray:
    w = 1.0 / (np.arange(n_labels) + 5.0) ** skew
    return w / w.sum()


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_split(
    rng: np.random.Generator,
    n_images: int,
    n_labels: int,
    label_embed: np.ndarray,
    texts_per_image: int = 5,
    labels_per_image: tuple[int, int] = (2, 5),
    mention_prob: float = 0.7,
    feature_noise: float = 0.25,
    identity_weight: float = 0.8,
    caption_noise: float = 0.5,
    skew: float = 0.6,
) -> SyntheticSplit:
    prior = _label_prior(n_labels, skew)
    dim = label_embed.shape[1]
    image_labels, text_labels, text_image = [], [], []
    for i in range(n_images):
        k = int(rng.integers(labels_per_image[0], labels_per_image[1] + 1))
        labels = frozenset(rng.choice(n_labels, size=k, replace=False, p=prior).tolist())
        image_labels.append(labels)
        ordered = sorted(labels)
        for _ in range(texts_per_image):
            said = [c for c in ordered if rng.random() < mention_prob]
            if not said:
                said = [ordered[int(rng.integers(len(ordered)))]]
            text_labels.append(frozenset(said))
            text_image.append(i)
    text_image = np.array(text_image, dtype=np.int64)

    def multi_hot(sets):
        m = np.zeros((len(sets), n_labels))
        for r, s in enumerate(sets):
            m[r, list(s)] = 1.0
        return m

    img_hot, txt_hot = multi_hot(image_labels), multi_hot(text_labels)
    image_features = img_hot + feature_noise * rng.standard_normal(img_hot.shape)
    text_features = txt_hot + feature_noise * rng.standard_normal(txt_hot.shape)

    identity = rng.standard_normal((n_images, dim)) / np.sqrt(dim)
    image_embed = _unit(img_hot @ label_embed + identity_weight * identity)
    text_embed = _unit(
        txt_hot @ label_embed
        + identity_weight * identity[text_image]
        + caption_noise * rng.standard_normal((len(text_labels), dim)) / np.sqrt(dim)
    )
    return SyntheticSplit(image_labels, text_labels, text_image, image_features, text_features, image_embed, text_embed)


def _records(prefix: str, modality: str, X: np.ndarray) -> list[FeatureRecord]:
    return [FeatureRecord(f"{prefix}{i}", modality, X[i]) for i in range(X.shape[0])]


def synthetic_crossmodal(
    n_images: int = 1000,
    n_labels: int = 200,
    n_train_images: int = 2000,
    texts_per_image: int = 5,
    embed_dim: int = 256,
    seed: int = 0,
    loss: AslParams | BceParams = AslParams(),
    hyper: TrainHyper = TrainHyper(lr=0.5, epochs=20, batch_size=128),
    **split_kw,
) -> CrossModalData:
    """Train image and text classifiers on a training split, then package
    the held-out split (``n_images`` galleries) with predicted probabilities."""
    rng = np.random.default_rng(seed)
    label_embed = rng.standard_normal((n_labels, embed_dim)) / np.sqrt(embed_dim)
    tr = make_split(rng, n_train_images, n_labels, label_embed, texts_per_image, **split_kw)
    te = make_split(rng, n_images, n_labels, label_embed, texts_per_image, **split_kw)

    img_ann = [AnnotationSet(f"i{i}", "image", s) for i, s in enumerate(tr.image_labels)]
    txt_ann = [AnnotationSet(f"t{j}", "text", tr.image_labels[g]) for j, g in enumerate(tr.text_image)]
    h = TrainHyper(hyper.lr, hyper.epochs, hyper.batch_size, seed, hyper.weight_decay)
    img_model = train(_records("i", "image", tr.image_features), img_ann, n_labels, loss, h)
    txt_model = train(_records("t", "text", tr.text_features), txt_ann, n_labels, loss, h)

    image_ids = [f"img{i}" for i in range(n_images)]
    text_ids = [f"txt{j}" for j in range(len(te.text_labels))]
    images = ModalityData(
        "image", image_ids, te.image_embed, forward(img_model, te.image_features), list(te.image_labels)
    )
    texts = ModalityData(
        "text",
        text_ids,
        te.text_embed,
        forward(txt_model, te.text_features),
        [te.image_labels[g] for g in te.text_image],
        list(te.text_labels),
    )
    pairs = {t: image_ids[g] for t, g in zip(text_ids, te.text_image)}
    return CrossModalData(images, texts, pairs, n_labels)


@dataclass
class KeywordTask:
    task: RetrievalTask
    gallery_pairs: tuple[np.ndarray, np.ndarray]  # (gallery_id, label_id), deduplicated
    query_keywords: list[frozenset[int]]
    reranker: InnerProductReranker
    n_labels: int


def make_keyword_task(
    n_gallery: int = 100_000,
    n_labels: int = 500,
    n_queries: int = 200,
    gallery_keywords: int = 15,
    true_keywords: int = 3,
    query_true: int = 2,
    query_noise: int = 1,
    dim: int = 64,
    label_offset: int = 0,
    seed: int = 0,
) -> KeywordTask:
    """A gallery with keywords drawn uniformly; each query targets one item.

    Each gallery item owns ``true_keywords`` labels plus random extras up to
    roughly ``gallery_keywords``. A query carries ``query_true`` of its
    target's true labels and ``query_noise`` random ones.
    """
    rng = np.random.default_rng(seed)
    true = rng.integers(0, n_labels, size=(n_gallery, true_keywords))
    extra = rng.integers(0, n_labels, size=(n_gallery, max(gallery_keywords - true_keywords, 0)))
    lab = np.concatenate([true, extra], axis=1)
    gal = np.repeat(np.arange(n_gallery, dtype=np.int64), lab.shape[1])
    key = np.unique(gal * n_labels + lab.ravel())
    pairs = (key // n_labels, key % n_labels + label_offset)

    targets = rng.choice(n_gallery, size=n_queries, replace=False)
    q_kws = []
    for g in targets:
        own = rng.permutation(true[g])[:query_true]
        noise = rng.integers(0, n_labels, size=query_noise)
        q_kws.append(frozenset((np.concatenate([own, noise]) + label_offset).tolist()))

    gvec = rng.standard_normal((n_gallery, dim))
    qvec = gvec[targets] + 0.8 * rng.standard_normal((n_queries, dim))
    gallery = [f"g{i}" for i in range(n_gallery)]
    queries = [f"q{j}" for j in range(n_queries)]
    gt = {q: {gallery[g]} for q, g in zip(queries, targets)}
    task = RetrievalTask("IR", queries, gallery, gt)
    return KeywordTask(task, pairs, q_kws, InnerProductReranker(qvec, gvec), n_labels + label_offset)
