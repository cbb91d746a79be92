"""Ranking metrics, per-pattern explanations and key-item recall."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ptsr.errors import ConfigError, ProtocolError
from ptsr.model import PAD, PTSR, pad_sequence


@dataclass
class RankResult:
    user: int | None
    candidates: np.ndarray
    scores: np.ndarray
    rank: int  # 1-based rank of the ground truth


def rank_of(scores, candidates, truth: int) -> int:
    """Rank of ``truth`` under descending score, ties broken by ascending item id."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    hits = np.flatnonzero(candidates == truth)
    if len(hits) != 1:
        raise ProtocolError(f"ground truth {truth} must appear exactly once among the candidates")
    s = scores[hits[0]]
    ahead = (scores > s) | ((scores == s) & (candidates < truth))
    return int(np.count_nonzero(ahead)) + 1


def rank_candidates(model: PTSR, sequence, candidates, ground_truth: int, user=None) -> RankResult:
    candidates = np.asarray(candidates, dtype=np.int64)
    if np.count_nonzero(candidates == ground_truth) != 1:
        raise ProtocolError("candidates must include the ground truth exactly once")
    seq = pad_sequence(sequence, model.config.max_len)
    scores = model.score_batch(seq[None, :], candidates[None, :])[0]
    return RankResult(user, candidates, scores, rank_of(scores, candidates, ground_truth))


def evaluate(model: PTSR, dataset, split: str = "test", users=None, chunk: int = 256) -> list[RankResult]:
    """Rank every user's target against its sampled negatives."""
    users = range(dataset.n_users) if users is None else users
    users = list(users)
    n = model.config.max_len
    out = []
    for lo in range(0, len(users), chunk):
        part = users[lo:lo + chunk]
        seqs = np.stack([pad_sequence(dataset.eval_input(u, split), n) for u in part])
        cands = np.array([dataset.candidates(u, split) for u in part], dtype=np.int64)
        scores = model.score_batch(seqs, cands)
        for row, u in enumerate(part):
            truth = dataset.target(u, split)
            out.append(RankResult(u, cands[row], scores[row], rank_of(scores[row], cands[row], truth)))
    return out


def metrics(results, ks=(5, 10)) -> dict:
    """HR@K and NDCG@K averaged over users."""
    if not results:
        raise ProtocolError("no rank results to summarise")
    ranks = np.array([r.rank for r in results])
    out = {}
    for k in ks:
        if k < 1:
            raise ConfigError(f"K must be >= 1, got {k}")
        hit = ranks <= k
        out[f"HR@{k}"] = float(np.mean(hit))
        out[f"NDCG@{k}"] = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return out


# -- explanations -------------------------------------------------------------

@dataclass
class PatternRecord:
    level: int
    start: int  # 1-based position within the unpadded sequence
    items: list
    distance: float
    weight: float
    bias: float
    contribution: float


@dataclass
class Explanation:
    target: int
    sequence: list
    score: float
    patterns: list = field(default_factory=list)  # PatternRecord, level-major
    item_importance: dict = field(default_factory=dict)
    position_importance: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return math.fsum(p.contribution for p in self.patterns)

    def level(self, level: int) -> list:
        return [p for p in self.patterns if p.level == level]

    def ranked_items(self) -> list:
        """Distinct sequence items by descending importance; ties favour recent items."""
        last_pos = {item: i for i, item in enumerate(self.sequence)}
        return sorted(self.item_importance, key=lambda it: (-self.item_importance[it], -last_pos[it]))

    def to_record(self, names=None) -> dict:
        name = (lambda i: names[i - 1]) if names is not None else (lambda i: i)
        levels: dict = {}
        for p in self.patterns:
            levels.setdefault(str(p.level), []).append({
                "start": p.start,
                "items": [name(i) for i in p.items],
                "distance": p.distance,
                "weight": p.weight,
                "bias": p.bias,
                "contribution": p.contribution,
            })
        return {
            "target": name(self.target),
            "sequence": [name(i) for i in self.sequence],
            "score": self.score,
            "levels": levels,
            "item_importance": {str(name(i)): v for i, v in self.item_importance.items()},
        }


def explain(model: PTSR, sequence, target: int, point_level_only: bool = False) -> Explanation:
    """Decompose the score of ``target`` into one record per unmasked pattern.

    Item importance sums the contributions of every pattern containing the
    item (each pattern once), or only level-1 patterns with ``point_level_only``.
    """
    cfg = model.config
    padded = pad_sequence(sequence, cfg.max_len)
    n_pad = int(np.count_nonzero(padded == PAD))
    seq = [int(i) for i in padded[n_pad:]]
    parts = model.forward(padded[None, :], [[target]])
    records = []
    item_imp: dict = {}
    pos_imp = [0.0] * len(seq)
    for lp in parts.levels:
        dis = lp.distance.value[0, 0]
        eta = lp.eta.value[0, 0]
        delta = lp.delta.value[0] if lp.delta is not None else np.zeros_like(eta)
        contrib = lp.contribution.value[0, 0]
        for k in np.flatnonzero(lp.mask[0]):
            start = int(k) - n_pad
            items = seq[start:start + lp.level]
            c = float(contrib[k])
            records.append(PatternRecord(lp.level, start + 1, items, float(dis[k]), float(eta[k]),
                                         float(delta[k]), c))
            if point_level_only and lp.level != 1:
                continue
            for pos in range(start, start + lp.level):
                pos_imp[pos] += c
            for item in set(items):
                item_imp[item] = item_imp.get(item, 0.0) + c
    return Explanation(int(target), seq, float(parts.score.value[0, 0]), records, item_imp, pos_imp)


# -- key-item recall ----------------------------------------------------------

def read_relations(path, vocab: dict | None = None) -> dict:
    """Relation file rows (user, target, related, relation) -> {(user, target): {relation: set}}.

    With ``vocab`` (raw id -> dense id) items are translated and unknown ones dropped.
    """
    out: dict = {}
    with open(path, newline="") as fh:
        first = fh.readline()
        delim = "\t" if "\t" in first else ","
        for row in csv.reader(fh, delimiter=delim):
            if not row:
                continue
            user, target, related, relation = (c.strip() for c in row[:4])
            if vocab is not None:
                if target not in vocab or related not in vocab:
                    continue
                target, related = vocab[target], vocab[related]
            out.setdefault((user, target), {}).setdefault(relation, set()).add(related)
    return out


def _recall(ranked, related, k):
    top = set(ranked[:k])
    return len(top & related) / min(k, len(related))


def key_item_recall(model: PTSR, relations: dict, sequences: dict, ks=(1, 2, 3, 5),
                    point_level_only: bool = False) -> dict:
    """Recall@K of related items in the model's item-importance ranking, per relation type.

    ``sequences`` maps each (user, target) key of ``relations`` to the input
    sequence that was scored. Pairs without a sequence or without related
    items inside it are skipped and counted under ``"skipped"``.
    """
    if not relations:
        raise ConfigError("relation map is empty")
    sums: dict = {}
    counts: dict = {}
    skipped = 0
    for key, by_type in sorted(relations.items(), key=lambda kv: str(kv[0])):
        seq = sequences.get(key)
        if seq is None:
            skipped += 1
            continue
        ranked = explain(model, seq, key[1], point_level_only).ranked_items()
        present = set(ranked)
        for rel, related in sorted(by_type.items()):
            related = set(related) & present
            if not related:
                skipped += 1
                continue
            counts[rel] = counts.get(rel, 0) + 1
            acc = sums.setdefault(rel, {k: 0.0 for k in ks})
            for k in ks:
                acc[k] += _recall(ranked, related, k)
    out = {rel: {k: v / counts[rel] for k, v in acc.items()} for rel, acc in sums.items()}
    out["pairs"] = dict(counts)
    out["skipped"] = skipped
    return out


def random_recall_baseline(relations: dict, sequences: dict, ks=(1, 2, 3, 5),
                           trials: int = 200, seed: int = 0) -> dict:
    """Monte Carlo Recall@K when the item ranking is a uniformly random permutation."""
    rng = np.random.default_rng(seed)
    sums: dict = {}
    counts: dict = {}
    for key, by_type in sorted(relations.items(), key=lambda kv: str(kv[0])):
        seq = sequences.get(key)
        if seq is None:
            continue
        distinct = list(dict.fromkeys(int(i) for i in seq))
        for rel, related in sorted(by_type.items()):
            related = set(related) & set(distinct)
            if not related:
                continue
            counts[rel] = counts.get(rel, 0) + 1
            acc = sums.setdefault(rel, {k: 0.0 for k in ks})
            for _ in range(trials):
                ranked = [distinct[i] for i in rng.permutation(len(distinct))]
                for k in ks:
                    acc[k] += _recall(ranked, related, k) / trials
    return {rel: {k: v / counts[rel] for k, v in acc.items()} for rel, acc in sums.items()}


def sequences_for_relations(dataset, relations: dict) -> dict:
    """Resolve (user name, dense target) keys to the validation or test input sequence."""
    index = {u: i for i, u in enumerate(dataset.users)}
    out = {}
    for user, target in relations:
        u = index.get(user)
        if u is None:
            continue
        if dataset.test[u] == target:
            out[(user, target)] = dataset.eval_input(u, "test")
        elif dataset.valid[u] == target:
            out[(user, target)] = dataset.eval_input(u, "valid")
    return out
