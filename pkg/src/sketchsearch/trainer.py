"""Triplet sampling, the hinge-margin embedding loss, and the training loop.

Each training triplet pairs an anchor sketch with its matching
screenshot (positive) and the screenshot of a different UI example drawn
from the same mini-batch (negative). The loss

    L = ||f_s(s) - f_i(i)||_2 + max(0, m - ||f_s(s) - f_i(i')||_2)

pulls matching pairs together while pushing mismatched pairs at least
margin m apart; the margin prevents the trivial all-zero solution.
Distances are true (unsquared) L2 norms.

The data split holds out one designer entirely for testing and drops any
training pairs whose app also appears in the test set, so neither
designers nor apps are shared between the two sides.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .numerics import Tape, Tensor, add, add_n, backward, mul, relu, sgd_step, sqrt, sub, tensor_sum

DEFAULT_MARGIN = 0.2
DEFAULT_LR = 1e-2
DEFAULT_BATCH = 32


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def euclidean_distance(a, b) -> Tensor:
    """Differentiable ||a - b||_2 with a damped subgradient at zero."""
    d = sub(_as_tensor(a), _as_tensor(b))
    return sqrt(tensor_sum(mul(d, d)))


def triplet_loss(es, ep, en, margin: float = DEFAULT_MARGIN) -> Tensor:
    """L = D(anchor, positive) + max(0, margin - D(anchor, negative)).

    Accepts tensors or arrays; returns a scalar tensor (differentiable
    when called under a tape). Nonnegative by construction.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    es, ep, en = _as_tensor(es), _as_tensor(ep), _as_tensor(en)
    for name, t in (("anchor", es), ("positive", ep), ("negative", en)):
        if t.data.ndim != 1:
            raise ValueError(f"{name} embedding must be 1-D, got shape {t.data.shape}")
    if not (es.data.shape == ep.data.shape == en.data.shape):
        raise ValueError("embeddings must share a single length")
    d_pos = euclidean_distance(es, ep)
    d_neg = euclidean_distance(es, en)
    return add(d_pos, relu(sub(margin, d_neg)))


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


@dataclass
class TrainExample:
    """One matched pair, already preprocessed to encoder input tensors."""

    example_id: str
    app_id: str
    designer_id: str
    sketch: np.ndarray  # (C, H, W) in [-1, 1]
    screenshot: np.ndarray


@dataclass
class Triplet:
    anchor: np.ndarray  # sketch of the anchor example
    positive: np.ndarray  # its matching screenshot
    negative: np.ndarray  # screenshot of a different example from the batch
    anchor_example: str
    negative_example: str


def assign_negatives(example_ids, rng: np.random.Generator) -> list[int]:
    """For each batch position pick another position with a different example id."""
    n = len(example_ids)
    if n < 2:
        raise ValueError("a batch needs at least 2 examples to sample negatives")
    out = []
    for i in range(n):
        candidates = [j for j in range(n) if example_ids[j] != example_ids[i]]
        if not candidates:
            raise ValueError(f"no valid negative for example {example_ids[i]!r} in batch")
        out.append(int(candidates[rng.integers(len(candidates))]))
    return out


def sample_batch(examples, batch_size: int, rng: np.random.Generator) -> list[Triplet]:
    """Draw one shuffled mini-batch and pair every anchor with an in-batch negative.

    The negative is sampled uniformly from the other batch members whose
    UI example differs from the anchor's, never the anchor's own
    positive.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (a negative must exist in-batch)")
    if batch_size > len(examples):
        raise ValueError(f"batch_size {batch_size} exceeds {len(examples)} available pairs")
    order = rng.permutation(len(examples))[:batch_size]
    batch = [examples[i] for i in order]
    negs = assign_negatives([b.example_id for b in batch], rng)
    return [
        Triplet(
            anchor=batch[i].sketch,
            positive=batch[i].screenshot,
            negative=batch[negs[i]].screenshot,
            anchor_example=batch[i].example_id,
            negative_example=batch[negs[i]].example_id,
        )
        for i in range(len(batch))
    ]


# ---------------------------------------------------------------------------
# Designer/app split
# ---------------------------------------------------------------------------


def split(records, test_designer: str | None = None):
    """Hold out one designer as the test set; drop its apps from training.

    Returns (train, test). ``records`` need ``designer_id`` and ``app_id``
    attributes; by default the lexically last designer is held out.
    """
    records = list(records)
    designers = sorted({r.designer_id for r in records})
    if len(designers) < 2:
        raise ValueError(f"need at least 2 designers to split, got {designers}")
    if test_designer is None:
        test_designer = designers[-1]
    elif test_designer not in designers:
        raise ValueError(f"unknown designer {test_designer!r}")
    test = [r for r in records if r.designer_id == test_designer]
    test_apps = {r.app_id for r in test}
    train = [r for r in records if r.designer_id != test_designer and r.app_id not in test_apps]
    return train, test


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    margin: float = DEFAULT_MARGIN
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 5  # epochs without val Top-10 improvement before stopping
    lr_decay: float = 1.0  # per-epoch multiplicative decay; 1.0 = constant lr

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class TrainResult:
    pair: enc.EncoderPair
    trace: list  # rows of (epoch, step, loss, lr)
    epoch_losses: list
    val_top10: list
    epochs_run: int
    stopped_early: bool
    aborted: bool = False


def _snapshot(pair: enc.EncoderPair) -> dict:
    state = {}
    for branch in (pair.sketch, pair.screenshot):
        for name, t in branch.params.items():
            state[f"{branch.branch}/{name}"] = t.data.copy()
    return state


def _restore(pair: enc.EncoderPair, state: dict):
    for branch in (pair.sketch, pair.screenshot):
        for name, t in branch.params.items():
            t.data[...] = state[f"{branch.branch}/{name}"]


def _val_top10(pair: enc.EncoderPair, val_examples) -> float:
    sketches = np.stack([enc.encode(pair.sketch, ex.sketch) for ex in val_examples])
    shots = np.stack([enc.encode(pair.screenshot, ex.screenshot) for ex in val_examples])
    d2 = (
        np.sum(sketches.astype(np.float64) ** 2, axis=1)[:, None]
        + np.sum(shots.astype(np.float64) ** 2, axis=1)[None, :]
        - 2.0 * sketches.astype(np.float64) @ shots.astype(np.float64).T
    )
    hits = 0
    k = min(10, len(val_examples))
    for i in range(len(val_examples)):
        if i in np.argsort(d2[i], kind="stable")[:k]:
            hits += 1
    return hits / len(val_examples)


def train(
    config: TrainConfig,
    examples,
    pair: enc.EncoderPair | None = None,
    encoder_config: enc.EncoderConfig = enc.DESK,
    checkpoint_dir=None,
    log=None,
) -> TrainResult:
    """Optimize both branches with plain SGD over in-batch triplets.

    Carves a validation holdout from the examples for early stopping,
    logs per-epoch mean loss, checkpoints each epoch, and aborts back to
    the last finished epoch if the loss turns non-finite. The returned
    weights are the best-validation snapshot when validation is active.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("training needs a nonempty example list")
    if pair is None:
        pair = enc.build(encoder_config, config.seed)
    rng = np.random.default_rng(config.seed)

    n_val = int(round(len(examples) * config.val_fraction))
    use_val = n_val >= 2 and len(examples) - n_val >= config.batch_size
    if use_val:
        order = rng.permutation(len(examples))
        val_set = [examples[i] for i in order[:n_val]]
        pool = [examples[i] for i in order[n_val:]]
    else:
        val_set, pool = [], examples

    params = pair.sketch.parameters() + pair.screenshot.parameters()
    trace, epoch_losses, val_scores = [], [], []
    best_score, best_state, since_best = -1.0, None, 0
    last_good = _snapshot(pair)
    stopped_early = aborted = False
    epochs_run = 0

    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay**epoch
        order = rng.permutation(len(pool))
        step_losses = []
        t0 = time.time()
        try:
            for step, start in enumerate(range(0, len(pool), config.batch_size)):
                chunk = order[start : start + config.batch_size]
                if len(chunk) < 2:
                    continue
                batch = [pool[i] for i in chunk]
                negs = assign_negatives([b.example_id for b in batch], rng)
                with Tape() as tape:
                    emb_s = [enc.forward(pair.sketch, Tensor(b.sketch)) for b in batch]
                    emb_c = [enc.forward(pair.screenshot, Tensor(b.screenshot)) for b in batch]
                    losses = [
                        triplet_loss(emb_s[i], emb_c[i], emb_c[negs[i]], config.margin)
                        for i in range(len(batch))
                    ]
                    loss = mul(add_n(losses), 1.0 / len(batch))
                backward(tape, loss)
                # these weights just produced a finite loss; they are the
                # restore point if the next update diverges
                last_good = _snapshot(pair)
                sgd_step(params, lr)
                value = loss.item()
                step_losses.append(value)
                trace.append((epoch, step, value, lr))
        except ValueError as err:
            if log:
                log(f"epoch {epoch}: aborted ({err}); restoring last good weights")
            _restore(pair, last_good)
            aborted = True
            break

        epochs_run = epoch + 1
        mean_loss = float(np.mean(step_losses)) if step_losses else float("nan")
        epoch_losses.append(mean_loss)
        if checkpoint_dir is not None:
            enc.save(pair, f"{checkpoint_dir}/checkpoint_epoch{epoch:03d}.swenc")

        if use_val:
            score = _val_top10(pair, val_set)
            val_scores.append(score)
            if score > best_score:
                best_score, best_state, since_best = score, _snapshot(pair), 0
            else:
                since_best += 1
            if log:
                log(
                    f"epoch {epoch}: loss {mean_loss:.4f}, val top-10 {score:.3f} "
                    f"({time.time() - t0:.1f}s)"
                )
            if since_best >= config.patience:
                stopped_early = True
                break
        elif log:
            log(f"epoch {epoch}: loss {mean_loss:.4f} ({time.time() - t0:.1f}s)")

    if use_val and best_state is not None:
        _restore(pair, best_state)
    return TrainResult(
        pair=pair,
        trace=trace,
        epoch_losses=epoch_losses,
        val_top10=val_scores,
        epochs_run=epochs_run,
        stopped_early=stopped_early,
        aborted=aborted,
    )


def write_trace(trace, path):
    """Loss trace CSV: epoch, step, loss, lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "lr"])
        writer.writerows(trace)
