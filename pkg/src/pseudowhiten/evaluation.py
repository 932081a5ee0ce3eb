"""Frozen-representation evaluation: linear probe, KNN, majority vote.

Probes consume the encoder representation (the projector exists only for the
training loss) and never mutate it.  The ensemble prediction is a strict
plurality vote; tied leaders are scored by summing the candidate label's
rank in the other blocks' top-5 lists (1 best, absent counts as 6), and any
remaining tie falls back to the smallest class index.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .nets import LinearLayer
from .numerics import Tensor
from .seeding import derive_seed, rng_for
from .training import Block

__all__ = [
    "ProbeConfig",
    "LinearProbe",
    "VoteRecord",
    "EvalReport",
    "encode_dataset",
    "train_linear_probe",
    "probe_scores",
    "probe_top1",
    "knn_predict",
    "knn_classify",
    "majority_vote",
    "evaluate",
]

TOP_K = 5


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    weight_decay: float = 1e-6
    batch_size: int = 128


@dataclass
class LinearProbe:
    layer: LinearLayer
    num_classes: int


@dataclass
class VoteRecord:
    per_block_pred: list[int]
    per_block_top5: list[list[int]]
    final_label: int
    resolution: str  # majority | top5_rank | index_tiebreak


@dataclass
class EvalReport:
    top1: float  # ensemble vote accuracy, percent
    knn_top1: float  # mean over blocks, percent
    per_block_top1: list[float]
    per_block_knn: list[float]
    vote_resolution_counts: dict[str, int]
    config_hash: str
    seed: int
    epoch: int
    transfer: bool = False

    def to_json(self) -> str:
        payload = {
            "top1": self.top1,
            "knn_top1": self.knn_top1,
            "per_block_top1": self.per_block_top1,
            "per_block_knn": self.per_block_knn,
            "vote_resolution_counts": dict(sorted(self.vote_resolution_counts.items())),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "epoch": self.epoch,
            "transfer": self.transfer,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def render_table(self) -> str:
        rows = [("block", "linear", "knn")]
        for i, (lin, knn) in enumerate(zip(self.per_block_top1, self.per_block_knn)):
            rows.append((str(i), f"{lin:.2f}", f"{knn:.2f}"))
        rows.append(("ensemble", f"{self.top1:.2f}", f"{self.knn_top1:.2f}"))
        widths = [max(len(r[c]) for r in rows) for c in range(3)]
        lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)) for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def encode_dataset(encoder, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Frozen-encoder representations as a plain array."""
    outs = []
    with nm.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(encoder.forward(Tensor(x[i : i + batch_size])).data)
    return np.vstack(outs)


def train_linear_probe(
    encoder,
    train_x: np.ndarray,
    train_y: np.ndarray,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int,
) -> LinearProbe:
    """Cross-entropy training of one linear layer on frozen representations."""
    train_y = np.asarray(train_y)
    if train_y.min() < 0 or train_y.max() >= num_classes:
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{train_y.min()}, {train_y.max()}]"
        )
    feats = encode_dataset(encoder, train_x)
    n, h = feats.shape
    layer = LinearLayer.init(h, num_classes, rng_for(seed, "probe-init"))
    params = layer.parameters("probe")
    state = nm.init_adam(params, cfg.lr_start, weight_decay=cfg.weight_decay)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), train_y] = 1.0
    sched = nm.LrSchedule(
        kind="exp_decay", total_epochs=cfg.epochs, lr_start=cfg.lr_start, lr_end=cfg.lr_end
    )
    for epoch in range(cfg.epochs):
        state.learning_rate = nm.lr_schedule(epoch, sched)
        order = rng_for(seed, "probe-shuffle", epoch).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            logits = layer.forward(Tensor(feats[idx]))
            shift = nm.subtract(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
            logp = nm.subtract(shift, nm.log(nm.row_sum(nm.exp(shift))))
            loss = nm.scalar_multiply(
                nm.negate(nm.tensor_sum(nm.multiply(Tensor(onehot[idx]), logp))), 1.0 / len(idx)
            )
            nm.backward(loss)
            nm.adam_step(params, nm.collect_grads(params), state)
            nm.zero_grads(params)
    return LinearProbe(layer, num_classes)


def probe_scores(probe: LinearProbe, feats: np.ndarray) -> np.ndarray:
    """Softmax class scores for precomputed representations."""
    with nm.no_grad():
        logits = probe.layer.forward(Tensor(feats)).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def probe_top1(probe: LinearProbe, feats: np.ndarray, labels: np.ndarray) -> float:
    preds = probe_scores(probe, feats).argmax(axis=1)
    return 100.0 * float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# KNN
# ---------------------------------------------------------------------------


def _l2_normalize(e: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    return e / np.maximum(norms, 1e-12)


def _knn_vote(labels: np.ndarray, dists: np.ndarray) -> list[int]:
    """Labels among the k neighbors ranked by count, then summed distance,
    then class index."""
    counts = Counter(int(l) for l in labels)
    sums = {}
    for lab, d in zip(labels, dists):
        sums[int(lab)] = sums.get(int(lab), 0.0) + float(d)
    return sorted(counts, key=lambda lab: (-counts[lab], sums[lab], lab))


def knn_predict(
    train_emb: np.ndarray,
    train_y: np.ndarray,
    test_emb: np.ndarray,
    k: int = 5,
) -> tuple[np.ndarray, list[list[int]]]:
    """Nearest-neighbor labels on L2-normalized embeddings.

    Returns predictions and, per test point, the neighbor-label frequency
    ranking (the KNN analogue of a top-5 list).
    """
    if len(train_emb) == 0:
        raise ValueError("knn: empty train set")
    if k > len(train_emb):
        raise ValueError(f"knn: k={k} exceeds train size {len(train_emb)}")
    a = _l2_normalize(np.asarray(train_emb, dtype=np.float64))
    b = _l2_normalize(np.asarray(test_emb, dtype=np.float64))
    train_y = np.asarray(train_y)
    d2 = np.maximum(
        (b * b).sum(axis=1)[:, None] + (a * a).sum(axis=1)[None, :] - 2.0 * (b @ a.T), 0.0
    )
    preds = np.zeros(len(b), dtype=int)
    rankings: list[list[int]] = []
    for i in range(len(b)):
        order = np.argsort(d2[i], kind="stable")[:k]  # distance ties: lower train index
        ranked = _knn_vote(train_y[order], np.sqrt(d2[i][order]))
        preds[i] = ranked[0]
        rankings.append(ranked[:TOP_K])
    return preds, rankings


def knn_classify(encoder, train_set, test_set, k: int = 5) -> float:
    """KNN top-1 accuracy (percent) on frozen encoder representations."""
    train_x, train_y = train_set
    test_x, test_y = test_set
    preds, _ = knn_predict(
        encode_dataset(encoder, train_x), train_y, encode_dataset(encoder, test_x), k=k
    )
    return 100.0 * float(np.mean(preds == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# Majority vote
# ---------------------------------------------------------------------------


def _rank_score(label: int, top5: list[int]) -> int:
    return top5.index(label) + 1 if label in top5 else TOP_K + 1


def majority_vote(per_block_top5: list[list[int]]) -> VoteRecord:
    """Combine per-block ranked predictions into one label.

    Strict plurality wins outright.  Tied leaders (including the
    all-distinct case) are scored by the sum of their rank in the *other*
    blocks' lists; the minimum wins, then the smallest class index.
    """
    if not per_block_top5:
        raise ValueError("majority_vote: no block predictions")
    preds = [int(t[0]) for t in per_block_top5]
    counts = Counter(preds)
    top_count = max(counts.values())
    leaders = sorted(lab for lab, c in counts.items() if c == top_count)
    if len(leaders) == 1:
        return VoteRecord(preds, per_block_top5, leaders[0], "majority")
    scores = {
        lab: sum(_rank_score(lab, top5) for pred, top5 in zip(preds, per_block_top5) if pred != lab)
        for lab in leaders
    }
    best = min(scores.values())
    winners = sorted(lab for lab, s in scores.items() if s == best)
    resolution = "top5_rank" if len(winners) == 1 else "index_tiebreak"
    return VoteRecord(preds, per_block_top5, winners[0], resolution)


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


def evaluate(
    blocks: list[Block],
    probe_data,
    test_data,
    probe_cfg: ProbeConfig,
    seed: int,
    config_hash: str = "",
    epoch: int = 0,
    knn_k: int = 5,
    transfer: bool = False,
) -> EvalReport:
    """Train one probe per block, vote across blocks, report KNN alongside.

    ``probe_data`` and ``test_data`` are (x, labels) pairs of original
    (unaugmented) samples; pass data from another generator for transfer
    evaluation.
    """
    probe_x, probe_y = probe_data
    test_x, test_y = test_data
    probe_y = np.asarray(probe_y)
    test_y = np.asarray(test_y)
    num_classes = int(probe_y.max()) + 1
    if test_y.min() < 0 or test_y.max() >= num_classes:
        raise ValueError(
            f"test labels span [{test_y.min()}, {test_y.max()}] but probe data "
            f"has {num_classes} classes"
        )

    per_block_top1: list[float] = []
    per_block_knn: list[float] = []
    block_rankings: list[list[list[int]]] = []
    for block in blocks:
        block.train(False)
        probe = train_linear_probe(
            block.encoder, probe_x, probe_y, num_classes, probe_cfg,
            seed=derive_seed(seed, "probe", block.block_id),
        )
        test_feats = encode_dataset(block.encoder, test_x)
        scores = probe_scores(probe, test_feats)
        order = np.argsort(-scores, axis=1, kind="stable")
        k = min(TOP_K, num_classes)
        block_rankings.append([list(map(int, row[:k])) for row in order])
        per_block_top1.append(100.0 * float(np.mean(order[:, 0] == test_y)))
        per_block_knn.append(
            knn_classify(block.encoder, (probe_x, probe_y), (test_x, test_y), k=knn_k)
        )

    resolution_counts: Counter[str] = Counter()
    hits = 0
    for i in range(len(test_y)):
        record = majority_vote([ranking[i] for ranking in block_rankings])
        resolution_counts[record.resolution] += 1
        hits += record.final_label == int(test_y[i])
    return EvalReport(
        top1=100.0 * hits / len(test_y),
        knn_top1=float(np.mean(per_block_knn)),
        per_block_top1=per_block_top1,
        per_block_knn=per_block_knn,
        vote_resolution_counts=dict(resolution_counts),
        config_hash=config_hash,
        seed=seed,
        epoch=epoch,
        transfer=transfer,
    )

