"""Synthetic interaction logs with planted point- and union-level rules.

Each user sequence is generated step by step. A step is uniform noise with
probability ``noise``. Otherwise, if the most recent items form the
antecedent of a rule, that rule fires with its firing probability and emits
the consequent (recorded as a ground-truth key pattern). When nothing fires,
the generator plants the antecedent of a uniformly chosen rule, one item per
step; noise interrupts a planting in progress.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ptsr.data import InteractionLog
from ptsr.errors import ConfigError


@dataclass(frozen=True)
class PlantedRule:
    antecedent: tuple
    consequent: int
    prob: float

    def __post_init__(self):
        ante = tuple(int(i) for i in self.antecedent)
        object.__setattr__(self, "antecedent", ante)
        if not 1 <= len(ante) <= 3:
            raise ConfigError(f"rule antecedent must hold 1-3 items, got {ante}")
        if len(set(ante)) != len(ante):
            raise ConfigError(f"rule antecedent items must be distinct: {ante}")
        if self.consequent in ante:
            raise ConfigError(f"consequent {self.consequent} is part of its antecedent {ante}")
        if not 0 < self.prob <= 1:
            raise ConfigError(f"firing probability must lie in (0, 1], got {self.prob}")


@dataclass
class SynthConfig:
    vocab_size: int = 200
    n_users: int = 2000
    min_len: int = 15
    max_len: int = 20
    n_pair_rules: int = 20
    n_single_rules: int = 10
    firing_prob: float = 0.9
    noise: float = 0.2
    seed: int = 7
    rules: list | None = None  # explicit rules override the random rule draw

    def __post_init__(self):
        if self.rules is not None:
            self.rules = [r if isinstance(r, PlantedRule) else PlantedRule(
                tuple(r["antecedent"]), int(r["consequent"]), float(r["prob"])) for r in self.rules]
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must lie in [0, 1)")
        if self.rules is None:
            if not 0 < self.firing_prob <= 1:
                raise ConfigError("firing_prob must lie in (0, 1]")
            slots = 3 * self.n_pair_rules + 2 * self.n_single_rules
            if slots > self.vocab_size:
                raise ConfigError(f"{slots} distinct rule items do not fit in vocab_size={self.vocab_size}")
            return
        top = max((max(r.antecedent + (r.consequent,)) for r in self.rules), default=0)
        if top > self.vocab_size or any(min(r.antecedent + (r.consequent,)) < 1 for r in self.rules):
            raise ConfigError("rule item ids must lie in [1, vocab_size]")
        totals: dict = {}
        for r in self.rules:
            totals[r.antecedent] = totals.get(r.antecedent, 0.0) + r.prob
        for ante, total in totals.items():
            if total > 1 + 1e-12:
                raise ConfigError(f"rules sharing antecedent {ante} have firing probabilities summing to {total}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.rules is not None:
            out["rules"] = [{"antecedent": list(r.antecedent), "consequent": r.consequent, "prob": r.prob}
                            for r in self.rules]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown synth config fields: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_config() -> SynthConfig:
    return SynthConfig.load(Path(__file__).parent / "configs" / "synth_reference.json")


def separable_config(vocab_size: int = 200, n_users: int = 2000, seed: int = 7) -> SynthConfig:
    """A noise-free successor cycle i -> i+1 (mod V): every item after the first is determined."""
    rules = [PlantedRule((i,), i % vocab_size + 1, 1.0) for i in range(1, vocab_size + 1)]
    return replace(reference_config(), vocab_size=vocab_size, n_users=n_users, noise=0.0,
                   seed=seed, rules=rules)


def exchangeable_log(n_users: int = 2500, vocab_size: int = 1000, min_len: int = 15, max_len: int = 20,
                     seed: int = 0) -> InteractionLog:
    """Histories drawn uniformly without repetition: no item is distinguishable from another.

    Under this log any model that ignores the data ranks the held-out item
    uniformly among its candidates, which makes it the calibration set for
    the evaluation harness.
    """
    if not 1 <= min_len <= max_len <= vocab_size:
        raise ConfigError("need 1 <= min_len <= max_len <= vocab_size")
    rng = np.random.default_rng(seed)
    records = []
    for u in range(n_users):
        items = rng.choice(vocab_size, int(rng.integers(min_len, max_len + 1)), replace=False)
        records.extend((f"u{u}", str(int(i) + 1), t + 1) for t, i in enumerate(items))
    return InteractionLog(records)


@dataclass
class SynthData:
    log: InteractionLog
    # (user, target position) -> antecedent positions, all 0-based
    key_patterns: dict
    rules: list
    sequences: dict  # user -> list of item ids (ints)
    noise_positions: dict = field(default_factory=dict)


def draw_rules(config: SynthConfig, rng) -> list:
    if config.rules is not None:
        return list(config.rules)
    slots = rng.permutation(np.arange(1, config.vocab_size + 1))
    rules, pos = [], 0
    for _ in range(config.n_pair_rules):
        a, b, c = (int(x) for x in slots[pos:pos + 3])
        rules.append(PlantedRule((a, b), c, config.firing_prob))
        pos += 3
    for _ in range(config.n_single_rules):
        a, c = (int(x) for x in slots[pos:pos + 2])
        rules.append(PlantedRule((a,), c, config.firing_prob))
        pos += 2
    return rules


def generate(config: SynthConfig) -> SynthData:
    config.validate()
    rng = np.random.default_rng(config.seed)
    rules = draw_rules(config, rng)
    by_ante: dict = {}
    for r in rules:
        by_ante.setdefault(r.antecedent, []).append(r)
    sizes = sorted({len(a) for a in by_ante}, reverse=True)
    V = config.vocab_size

    records, keys, sequences, noise_at = [], {}, {}, {}
    width = len(str(config.n_users - 1))
    for u in range(config.n_users):
        user = f"u{u:0{width}d}"
        length = int(rng.integers(config.min_len, config.max_len + 1))
        seq: list[int] = []
        pending: list[int] = []
        noisy = set()
        for t in range(length):
            if rng.random() < config.noise or not rules:
                item = int(rng.integers(1, V + 1))
                pending.clear()
                noisy.add(t)
            else:
                item = None
                for size in sizes:
                    if len(seq) < size:
                        continue
                    matches = by_ante.get(tuple(seq[-size:]))
                    if matches:
                        draw, cum = rng.random(), 0.0
                        for r in matches:
                            cum += r.prob
                            if draw < cum:
                                item = r.consequent
                                keys[(user, t)] = tuple(range(t - size, t))
                                break
                        break
                if item is None:
                    if not pending:
                        pending = list(rules[int(rng.integers(len(rules)))].antecedent)
                    item = pending.pop(0)
            seq.append(item)
            records.append((user, str(item), t + 1))
        sequences[user] = seq
        noise_at[user] = noisy
    return SynthData(InteractionLog(records), keys, rules, sequences, noise_at)


def write_outputs(data: SynthData, config: SynthConfig, out_dir) -> dict:
    """Write the interaction log, key-pattern map and relation file; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "log": out / "interactions.tsv",
        "keys": out / "key_patterns.tsv",
        "relations": out / "relations.tsv",
        "config": out / "synth_config.json",
    }
    data.log.write(paths["log"])
    with open(paths["keys"], "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "target_position", "antecedent_positions"])
        for (user, t), ante in sorted(data.key_patterns.items()):
            w.writerow([user, t, ",".join(map(str, ante))])
    with open(paths["relations"], "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "target", "related", "relation"])
        for row in relations_for_final_targets(data):
            w.writerow(row)
    paths["config"].write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    return {k: str(v) for k, v in paths.items()}


def relations_for_final_targets(data: SynthData) -> list:
    """(user, target, related, relation) rows for planted consequents at the last two positions."""
    rows = []
    for (user, t), ante in sorted(data.key_patterns.items()):
        seq = data.sequences[user]
        if t < len(seq) - 2:
            continue
        kind = "planted-point" if len(ante) == 1 else "planted-union"
        for p in ante:
            rows.append((user, str(seq[t]), str(seq[p]), kind))
    return rows
