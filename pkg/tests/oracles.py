"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math
from collections import defaultdict


def naive_tokens(text):
    out, cur = [], []
    for ch in text:
        if ch.isalnum():
            cur.append(ch.lower())
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def naive_vocab(captions, entries, stopwords, canonical, wanted, min_images):
    """captions: (text_id, image_id, text); entries: word -> set of tags."""
    per_image = defaultdict(set)
    for _, img, text in captions:
        for tok in naive_tokens(text):
            if tok in stopwords or not (entries.get(tok, set()) & wanted):
                continue
            kw = canonical.get(tok, tok)
            if kw not in stopwords:
                per_image[img].add(kw)
    df = defaultdict(int)
    for kws in per_image.values():
        for k in kws:
            df[k] += 1
    kept = [(k, n) for k, n in df.items() if n >= min_images]
    kept.sort(key=lambda t: (-t[1], t[0]))
    return kept


def asl_scalar(p, y, ap, am, delta):
    if y:
        return -((1 - p) ** ap) * math.log(p)
    q = max(p - delta, 0.0)
    if q == 0.0:
        return 0.0
    return -(q**am) * math.log(1 - q)


def brute_ap(scores, positives):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for r, i in enumerate(ranked, 1):
        if positives[i]:
            hits += 1
            total += hits / r
    return total / hits


def brute_map(P, label_sets):
    n_labels = len(P[0])
    aps = []
    for k in range(n_labels):
        pos = [k in s for s in label_sets]
        if any(pos):
            aps.append(brute_ap([row[k] for row in P], pos))
    return sum(aps) / len(aps)


def brute_screen(forward, query):
    q = set(query)
    return sorted(g for g, labels in forward.items() if labels & q)
