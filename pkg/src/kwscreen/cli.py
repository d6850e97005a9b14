"""Command-line entry point.

stdout carries exactly one JSON document per invocation; logs go to
stderr. Exit codes: 0 ok, 1 module error, 2 missing input / bad config /
empty vocabulary, 3 vocabulary mismatch, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import corpus, index as kwindex
from .classifier import (
    BCE,
    AslParams,
    TrainHyper,
    forward,
    load_features,
    load_model,
    mean_average_precision,
    save_model,
    topr,
    train,
)
from .errors import InvariantViolation, KwScreenError, MissingFile, MissingVector, NoPositives, VocabMismatch
from .jsonl import read_jsonl, write_jsonl
from .pipeline import (
    CrossModalData,
    KeywordSource,
    ModalityData,
    evaluate,
    load_ground_truth,
    sweep,
    sweep_csv,
)

log = logging.getLogger("kwscreen")

COMMANDS = ("build-vocab", "train", "predict", "index", "screen", "evaluate", "sweep")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


# -- shared loading -------------------------------------------------------------


def _lexicon(cfg):
    stop = cfg.path("stopwords") if cfg.paths.stopwords else None
    return corpus.load_lexicon(cfg.path("lexicon"), stop)


def _images_in_order(captions) -> list[str]:
    seen, out = set(), []
    for c in captions:
        if c.image_id not in seen:
            seen.add(c.image_id)
            out.append(c.image_id)
    return out


def _loss(cfg):
    c = cfg.classifier
    return BCE if c.loss == "bce" else AslParams(c.alpha_plus, c.alpha_minus, c.delta)


def _load_predictions(cfg, vocab) -> dict[str, np.ndarray]:
    probs = {}
    for rec in read_jsonl(cfg.path("predictions")):
        if rec.get("vocab_hash") != vocab.hash:
            raise VocabMismatch(f"predictions made for vocabulary {rec.get('vocab_hash')!r}, expected {vocab.hash!r}")
        probs[rec["sample_id"]] = np.asarray(rec["probabilities"], dtype=np.float64)
    return probs


def _load_data(cfg, need_probs: bool) -> CrossModalData:
    vocab = corpus.load_vocabulary(cfg.path("vocab"))
    captions = corpus.load_captions(cfg.path("captions"))
    ann = {a.sample_id: a.labels for a in corpus.load_annotations(cfg.path("annotations"))}
    image_ids = _images_in_order(captions)
    text_ids = [c.text_id for c in captions]
    vecs = {r.sample_id: r.vector for r in load_features(cfg.path("rerank_features"))}
    probs = _load_predictions(cfg, vocab) if need_probs else {}

    def side(modality, ids, extracted=None):
        missing = [s for s in ids if s not in vecs]
        if missing:
            raise MissingVector(f"no rerank vector for {modality} {missing[0]!r} ({len(missing)} missing)")
        p = None
        if need_probs:
            gaps = [s for s in ids if s not in probs]
            if gaps:
                raise MissingVector(f"no prediction for {modality} {gaps[0]!r}")
            p = np.stack([probs[s] for s in ids]) if ids else np.zeros((0, len(vocab)))
        gt = [ann.get(s, frozenset()) for s in ids]
        return ModalityData(modality, ids, np.stack([vecs[s] for s in ids]), p, gt, extracted)

    extracted = None
    if cfg.screening.text_keywords in ("extracted", "merged"):
        lex = _lexicon(cfg)
        extracted = [vocab.ids(corpus.extract_keywords(c.text, lex, cfg.corpus.pos_mode)) for c in captions]
    return CrossModalData(
        side("image", image_ids), side("text", text_ids, extracted), corpus.pair_map(captions), len(vocab), vocab.hash
    )


def _sources(cfg):
    s = cfg.screening
    return KeywordSource(s.image_keywords, s.R_I), KeywordSource(s.text_keywords, s.R_T)


def _directions(cfg):
    return ("TR", "IR") if cfg.screening.direction == "both" else (cfg.screening.direction,)


def _gallery_modality(direction):
    return "image" if direction == "IR" else "text"


def _load_index(cfg, direction, data: CrossModalData):
    g_mod = _gallery_modality(direction)
    base = cfg.path("index")
    idx = kwindex.load(base / f"{g_mod}.kwix")
    kwindex.check_vocab(idx, data.vocab_hash)
    ids_path = base / f"{g_mod}.ids.json"
    if not ids_path.exists():
        raise MissingFile(f"no such file: {ids_path}")
    ids = json.loads(ids_path.read_text(encoding="utf-8"))
    if ids != data.side(g_mod).ids:
        raise InvariantViolation("index-gallery alignment", f"{ids_path} does not match the {g_mod} gallery")
    return idx


# -- commands --------------------------------------------------------------------


def cmd_build_vocab(cfg) -> dict:
    captions = corpus.load_captions(cfg.path("captions"))
    lex = _lexicon(cfg)
    vocab = corpus.build_vocabulary(captions, lex, cfg.corpus.pos_mode, cfg.corpus.min_images)
    anns = corpus.build_annotations(captions, vocab, lex, cfg.corpus.pos_mode)
    for a in anns:
        if any(k >= len(vocab) for k in a.labels):
            raise InvariantViolation("annotation labels < |vocabulary|", a.sample_id)
    corpus.save_vocabulary(cfg.path("vocab"), vocab)
    corpus.save_annotations(cfg.path("annotations"), anns)
    df = np.array(vocab.image_df)
    stats = corpus.annotation_stats(anns)
    return {
        "command": "build-vocab",
        "label_count": len(vocab),
        "vocab_hash": vocab.hash,
        "df_percentiles": {str(q): float(np.percentile(df, q)) for q in (0, 25, 50, 75, 100)},
        "empty_annotations": {"image": stats["empty_images"], "text": stats["empty_texts"]},
        "samples": stats["samples"],
    }


def cmd_train(cfg) -> dict:
    vocab = corpus.load_vocabulary(cfg.path("vocab"))
    anns = corpus.load_annotations(cfg.path("annotations"))
    feats = load_features(cfg.path("features"))
    c = cfg.classifier
    hyper = TrainHyper(c.lr, c.epochs, c.batch_size, c.seed, c.weight_decay)
    out = {"command": "train", "vocab_hash": vocab.hash, "models": {}}
    for modality in ("image", "text"):
        recs = [f for f in feats if f.modality == modality]
        if not recs:
            continue
        model = train(recs, anns, len(vocab), _loss(cfg), hyper, vocab.hash)
        path = cfg.path("model") / f"{modality}.kwcm"
        save_model(path, model)
        out["models"][modality] = {"path": str(path), "samples": len(recs), "loss_history": model.history}
    return out


def cmd_predict(cfg) -> dict:
    vocab = corpus.load_vocabulary(cfg.path("vocab"))
    feats = load_features(cfg.path("features"))
    anns = {a.sample_id: a.labels for a in corpus.load_annotations(cfg.path("annotations"))}
    records, summary = [], {}
    for modality, R in (("image", cfg.screening.R_I), ("text", cfg.screening.R_T)):
        recs = [f for f in feats if f.modality == modality]
        if not recs:
            continue
        model = load_model(cfg.path("model") / f"{modality}.kwcm")
        if model.vocab_hash != vocab.hash:
            raise VocabMismatch(f"{modality} model trained for vocabulary {model.vocab_hash!r}, expected {vocab.hash!r}")
        P = forward(model, np.stack([f.vector for f in recs]))
        top = topr(P, R)
        for f, p, t in zip(recs, P, top):
            records.append(
                {
                    "sample_id": f.sample_id,
                    "modality": modality,
                    "vocab_hash": vocab.hash,
                    "top_r": t.tolist(),
                    "probabilities": p.tolist(),
                }
            )
        try:
            m = 100.0 * mean_average_precision(P, [anns.get(f.sample_id, frozenset()) for f in recs])
        except NoPositives:
            m = None
        summary[modality] = {"samples": len(recs), "R": R, "mAP": m}
    write_jsonl(cfg.path("predictions"), records)
    return {"command": "predict", "path": str(cfg.path("predictions")), "modalities": summary}


def cmd_index(cfg) -> dict:
    s = cfg.screening
    need_probs = "predicted" in (s.image_keywords, s.text_keywords) or s.text_keywords == "merged"
    data = _load_data(cfg, need_probs)
    img_src, txt_src = _sources(cfg)
    base = cfg.path("index")
    out = {"command": "index", "vocab_hash": data.vocab_hash, "indexes": {}}
    for modality, src in (("image", img_src), ("text", txt_src)):
        md = data.side(modality)
        forward_map = kwindex.ForwardIndex.from_label_sets(md.keywords(src))
        idx = kwindex.build(forward_map, data.n_labels, data.vocab_hash)
        if kwindex.invert(idx) != forward_map:
            raise InvariantViolation("inverted index round-trips to forward index", modality)
        kwindex.save(idx, base / f"{modality}.kwix")
        (base / f"{modality}.ids.json").write_text(json.dumps(md.ids), encoding="utf-8")
        kwindex.save_forward(base / f"{modality}.forward.jsonl", forward_map)
        out["indexes"][modality] = kwindex.stats(idx)
    return out


def cmd_screen(cfg) -> dict:
    s = cfg.screening
    need_probs = "predicted" in (s.image_keywords, s.text_keywords) or s.text_keywords == "merged"
    data = _load_data(cfg, need_probs)
    img_src, txt_src = _sources(cfg)
    sources = {"image": img_src, "text": txt_src}
    records, summary = [], {}
    for d in _directions(cfg):
        g_mod = _gallery_modality(d)
        q_mod = "text" if g_mod == "image" else "image"
        idx = _load_index(cfg, d, data)
        q = data.side(q_mod)
        g_ids = data.side(g_mod).ids
        kept, fallbacks = [], 0
        for qid, kws in zip(q.ids, q.keywords(sources[q_mod])):
            res = kwindex.screen(idx, kws, s.fallback)
            fallbacks += res.fallback_used
            kept.append(res.n_retained)
            records.append(
                {
                    "query_id": qid,
                    "direction": d,
                    "retained": [g_ids[g] for g in res.retained.tolist()],
                    "fallback_used": bool(res.fallback_used),
                }
            )
        n = max(len(g_ids), 1)
        summary[d] = {
            "queries": len(q.ids),
            "mean_retained": float(np.mean(kept)) if kept else 0.0,
            "screening_rate": float(100.0 * (1.0 - np.mean(kept) / n)) if kept else 0.0,
            "fallback_count": fallbacks,
        }
    write_jsonl(cfg.path("screen"), records)
    return {"command": "screen", "path": str(cfg.path("screen")), "directions": summary}


def cmd_evaluate(cfg) -> dict:
    s = cfg.screening
    need_probs = "predicted" in (s.image_keywords, s.text_keywords) or s.text_keywords == "merged"
    data = _load_data(cfg, need_probs)
    img_src, txt_src = _sources(cfg)
    if cfg.paths.ground_truth:
        gt_override = load_ground_truth(cfg.path("ground_truth"))
    else:
        gt_override = None
    reports = {}
    for d in _directions(cfg):
        idx = _load_index(cfg, d, data)
        if gt_override is not None:
            task = data.task(d)
            expected = {q: task.ground_truth[q] for q in task.queries}
            got = {q: gt_override.get(q, set()) for q in task.queries}
            if got != expected:
                raise InvariantViolation("ground-truth file agrees with caption pairing", d)
        _, _, rep = evaluate(
            data, d, img_src, txt_src, s.fallback, cfg.eval.ks, cfg.eval.timing_repeats, index=idx
        )
        if s.image_keywords == "ground_truth" and s.text_keywords == "ground_truth" and rep.gt_recall != 100.0:
            raise InvariantViolation("ground-truth keywords give 100% screening recall", f"{d}: {rep.gt_recall}")
        reports[d] = rep.to_json()
    out = {"command": "evaluate", "reports": reports, "config": cfgmod.flat(cfg)}
    if len(reports) == 2:
        out["mean_speedup"] = (reports["TR"]["speedup"] + reports["IR"]["speedup"]) / 2.0
    path = cfg.path("report")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return out


def cmd_sweep(cfg) -> dict:
    data = _load_data(cfg, need_probs=True)
    rows = sweep(data, cfg.sweep.R_I, cfg.sweep.R_T, cfg.screening.fallback, cfg.eval.timing_repeats)
    path = cfg.path("sweep_csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(sweep_csv(rows), encoding="utf-8")
    slim = [{k: v for k, v in r.items() if k != "reports"} for r in rows]
    return {"command": "sweep", "path": str(path), "rows": slim}


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "predict": cmd_predict,
    "index": cmd_index,
    "screen": cmd_screen,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwscreen", description="Keyword-guided pre-screening for cross-modal retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="flat YAML config file")
        p.add_argument("--verbose", "-v", action="store_true")
        for key in cfgmod.keys():
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {k: v for k, v in vars(args).items() if k in cfgmod.keys() and v is not None}
    try:
        cfg = cfgmod.load(args.config, overrides)
        _emit(HANDLERS[args.command](cfg))
    except KwScreenError as exc:
        log.error("%s", exc)
        _emit(exc.to_json())
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
