"""Top-k retrieval metrics and the chance/baseline/encoder comparison report.

Protocol: every test sketch queries an index built from all test
screenshots (the candidate pool is the test set itself, which is what
makes the analytic chance level 1/N). Top-k accuracy is the fraction of
queries whose ground-truth screenshot appears among the first k results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import baseline as bl
from . import encoder as enc
from . import index as idx


@dataclass
class MethodRow:
    name: str
    top1: float
    top10: float


@dataclass
class EvalReport:
    methods: list  # MethodRow, in chance/baseline/encoder order
    n: int
    fingerprints: dict

    def to_json(self) -> str:
        doc = {
            "methods": [{"name": m.name, "top1": m.top1, "top10": m.top10} for m in self.methods],
            "n": self.n,
            "fingerprints": self.fingerprints,
        }
        return json.dumps(doc, indent=2)

    def to_text(self) -> str:
        lines = [f"{'Technique':<18} {'Top-1':>8} {'Top-10':>8}", "-" * 36]
        for m in self.methods:
            lines.append(f"{m.name:<18} {m.top1 * 100:>7.1f}% {m.top10 * 100:>7.1f}%")
        lines.append(f"(test set: {self.n} examples)")
        return "\n".join(lines)


def _ranked_ids(ranking):
    out = []
    for entry in ranking:
        if isinstance(entry, str):
            out.append(entry)
        else:
            out.append(entry[0])
    return out


def topk_accuracy(rankings, truth, k: int) -> float:
    """Fraction of queries whose true item appears in the first k results."""
    rankings = list(rankings)
    truth = list(truth)
    if len(rankings) != len(truth):
        raise ValueError(f"{len(rankings)} rankings vs {len(truth)} truth labels")
    if not rankings:
        raise ValueError("no queries to score")
    hits = sum(1 for ranking, t in zip(rankings, truth) if t in _ranked_ids(ranking)[:k])
    return hits / len(rankings)


def chance_accuracy(n_corpus: int, k: int) -> float:
    """Analytic expectation for a uniformly random ranking."""
    return min(k, n_corpus) / n_corpus


def simulate_chance(n_corpus: int, k: int, trials: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo chance level: the truth lands at a uniform random rank."""
    rng = np.random.default_rng(seed)
    ranks = rng.integers(0, n_corpus, size=trials)
    return float(np.mean(ranks < k))


# ---------------------------------------------------------------------------
# Full comparison run
# ---------------------------------------------------------------------------


@dataclass
class EvalItem:
    """One test pair with its images loaded."""

    example_id: str
    sketch: np.ndarray
    screenshot: np.ndarray


def load_eval_items(manifest, records) -> list:
    from . import imaging

    items = []
    for rec in records:
        sketch = imaging.read_image(manifest.resolve(rec.sketch))
        shot = imaging.read_image(manifest.resolve(rec.screenshot))
        if shot.ndim == 3:
            shot = imaging.to_gray(shot)
        if sketch.ndim == 3:
            sketch = imaging.to_gray(sketch)
        items.append(EvalItem(example_id=rec.example_id, sketch=sketch, screenshot=shot))
    return items


def encoder_rankings(items, pair: enc.EncoderPair):
    """Embed all test screenshots, then rank them for each test sketch."""
    store = idx.build(
        [idx.IndexedItem(item_id=it.example_id, full=enc.embed_image(pair.screenshot, it.screenshot)) for it in items]
    )
    return [store.query_full(enc.embed_image(pair.sketch, it.sketch), k=len(items)) for it in items]


def baseline_rankings(items, book: bl.Codebook, cfg: bl.BaselineConfig):
    """BoW-HOG histograms for both modalities, ranked by Euclidean distance."""
    corpus = [
        (it.example_id, bl.bow_encode(bl.screenshot_descriptor(it.screenshot, cfg), book)) for it in items
    ]
    rankings = []
    for it in items:
        hist = bl.bow_encode(bl.sketch_descriptor(it.sketch, cfg), book)
        rankings.append(bl.baseline_rank(hist, corpus))
    return rankings


def run_eval(
    items,
    pair: enc.EncoderPair,
    book: bl.Codebook,
    baseline_cfg: bl.BaselineConfig | None = None,
    fingerprints: dict | None = None,
) -> EvalReport:
    """Score chance, the BoW-HOG baseline, and the encoder on one test set.

    Deterministic for fixed artifacts: repeated runs produce identical
    reports. Rows follow the chance, baseline, encoder order.
    """
    items = list(items)
    if not items:
        raise ValueError("evaluation needs a nonempty test set")
    baseline_cfg = baseline_cfg or bl.BaselineConfig()
    truth = [it.example_id for it in items]
    n = len(items)

    rows = [MethodRow("(chance)", chance_accuracy(n, 1), chance_accuracy(n, 10))]

    b_rank = baseline_rankings(items, book, baseline_cfg)
    rows.append(MethodRow("bow-hog", topk_accuracy(b_rank, truth, 1), topk_accuracy(b_rank, truth, 10)))

    e_rank = encoder_rankings(items, pair)
    rows.append(MethodRow("encoder", topk_accuracy(e_rank, truth, 1), topk_accuracy(e_rank, truth, 10)))

    return EvalReport(methods=rows, n=n, fingerprints=fingerprints or {})
