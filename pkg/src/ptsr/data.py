"""Interaction logs, 5-core filtering, leave-one-out splits and batching."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ptsr.errors import ConfigError, DataError, ParseError
from ptsr.model import PAD

BUNDLE_FORMAT = "ptsr-dataset"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class TextFormat:
    """How to read one interaction per line.

    ``kind`` is ``"delimited"`` (header row naming the columns, or positional
    columns when ``header`` is False) or ``"jsonl"`` (one JSON object per line).
    """

    kind: str = "delimited"
    delimiter: str | None = None  # None: sniff tab vs comma from the first line
    columns: tuple = ("user", "item", "timestamp")
    header: bool = True


FORMATS = {
    "tsv": TextFormat(delimiter="\t"),
    "csv": TextFormat(delimiter=","),
    "auto": TextFormat(),
    # ratings_<Category>.csv dumps: user,item,rating,timestamp without a header
    "amazon-ratings": TextFormat(delimiter=",", columns=(0, 1, 3), header=False),
    # reviews_<Category>_5.json dumps
    "amazon-json": TextFormat(kind="jsonl", columns=("reviewerID", "asin", "unixReviewTime")),
}


def parse_format(spec) -> TextFormat:
    """Accepts a :class:`TextFormat`, a preset name, or ``preset:user=u,item=i,timestamp=t``."""
    if isinstance(spec, TextFormat):
        return spec
    name, _, overrides = str(spec).partition(":")
    if name not in FORMATS:
        raise ConfigError(f"unknown input format {name!r}; expected one of {sorted(FORMATS)}")
    fmt = FORMATS[name]
    if overrides:
        cols = dict(zip(("user", "item", "timestamp"), fmt.columns))
        for part in overrides.split(","):
            key, eq, value = part.partition("=")
            if not eq or key not in cols:
                raise ConfigError(f"bad column override {part!r}")
            cols[key] = value
        fmt = TextFormat(fmt.kind, fmt.delimiter, (cols["user"], cols["item"], cols["timestamp"]), fmt.header)
    return fmt


@dataclass
class InteractionLog:
    """(user, item, timestamp) records grouped by user, each user chronological."""

    records: list

    def __len__(self):
        return len(self.records)

    def by_user(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for user, item, _ in self.records:
            out.setdefault(user, []).append(item)
        return out

    @property
    def n_users(self) -> int:
        return len({r[0] for r in self.records})

    @property
    def n_items(self) -> int:
        return len({r[1] for r in self.records})

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        """Drop exact duplicate triples, then stable-sort per user by timestamp."""
        seen = set()
        first = {}
        kept = []
        for rec in records:
            if rec in seen:
                continue
            seen.add(rec)
            first.setdefault(rec[0], len(first))
            kept.append(rec)
        order = sorted(range(len(kept)), key=lambda i: (first[kept[i][0]], kept[i][2], i))
        return cls([kept[i] for i in order])

    def write(self, path, delimiter="\t") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(["user", "item", "timestamp"])
            w.writerows(self.records)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8", newline="")


def _timestamp(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        return int(float(raw))


def ingest(path, fmt="auto") -> InteractionLog:
    path = Path(path)
    fmt = parse_format(fmt)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    records = []
    with _open_text(path) as fh:
        if fmt.kind == "jsonl":
            u, i, t = fmt.columns
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    records.append((str(obj[u]), str(obj[i]), _timestamp(str(obj[t]))))
                except (ValueError, KeyError) as exc:
                    raise ParseError(path, line_no, f"malformed record ({exc})") from None
        else:
            lines = iter(fh)
            first_line = next(lines, None)
            if first_line is None:
                raise DataError(f"{path}: empty file")
            delim = fmt.delimiter or ("\t" if "\t" in first_line else ",")
            if fmt.header:
                header = next(csv.reader([first_line], delimiter=delim))
                header = [h.strip() for h in header]
                try:
                    pos = [header.index(c) for c in fmt.columns]
                except ValueError:
                    raise ParseError(path, 1, f"header {header} lacks columns {list(fmt.columns)}") from None
                body, start = lines, 2
            else:
                pos = list(fmt.columns)
                body, start = _chain(first_line, lines), 1
            need = max(pos) + 1
            for line_no, row in enumerate(csv.reader(body, delimiter=delim), start=start):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < need or any(not row[p].strip() for p in pos):
                    raise ParseError(path, line_no, f"expected {need} fields, got {row!r}")
                try:
                    ts = _timestamp(row[pos[2]].strip())
                except ValueError:
                    raise ParseError(path, line_no, f"bad timestamp {row[pos[2]]!r}") from None
                records.append((row[pos[0]].strip(), row[pos[1]].strip(), ts))
    if not records:
        raise DataError(f"{path}: no interactions found")
    return InteractionLog.from_records(records)


def _chain(first, rest):
    yield first
    yield from rest


def five_core_filter(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users, then items, with fewer than ``k`` interactions until nothing changes."""
    if not len(log):
        raise DataError("cannot filter an empty log")
    records = log.records
    while True:
        users = Counter(r[0] for r in records)
        step = [r for r in records if users[r[0]] >= k]
        items = Counter(r[1] for r in step)
        step = [r for r in step if items[r[1]] >= k]
        if len(step) == len(records):
            break
        records = step
    if not records:
        raise DataError(f"no user/item survives {k}-core filtering (dataset too sparse)")
    return InteractionLog(records)


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray  # (B, n), left-padded with PAD
    positives: np.ndarray
    negatives: np.ndarray
    mask: np.ndarray  # (B, n), True on padding positions


@dataclass
class SplitDataset:
    items: list  # dense id i <-> items[i - 1]; id 0 is padding
    users: list
    history: list  # full chronological dense-id history per user
    train: list  # most recent <= max_len items before the validation target
    valid: list
    test: list
    max_len: int
    negatives: list | None = None
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def eval_input(self, u: int, split: str) -> list:
        if split == "valid":
            return self.train[u][-self.max_len:]
        if split == "test":
            return (self.train[u] + [self.valid[u]])[-self.max_len:]
        raise ConfigError(f"split must be 'valid' or 'test', got {split!r}")

    def target(self, u: int, split: str) -> int:
        return self.valid[u] if split == "valid" else self.test[u]

    def candidates(self, u: int, split: str) -> list:
        if self.negatives is None:
            raise DataError("evaluation candidates have not been built")
        return [self.target(u, split)] + list(self.negatives[u])

    def history_sets(self) -> list:
        if "sets" not in self._cache:
            self._cache["sets"] = [set(h) for h in self.history]
        return self._cache["sets"]

    def instances(self, augment: bool = True):
        """Training (user, left-padded input, target) arrays.

        With ``augment`` every prefix of the training sequence predicts its next
        item; without it each user contributes one instance (last train item).
        """
        key = ("inst", augment)
        if key not in self._cache:
            users, seqs, targets = [], [], []
            n = self.max_len
            for u, seq in enumerate(self.train):
                ks = range(1, len(seq)) if augment else [len(seq) - 1]
                for k in ks:
                    if k < 1:
                        continue
                    prefix = seq[max(0, k - n):k]
                    users.append(u)
                    seqs.append([PAD] * (n - len(prefix)) + prefix)
                    targets.append(seq[k])
            self._cache[key] = (np.array(users, dtype=np.int64),
                                np.array(seqs, dtype=np.int64).reshape(-1, n),
                                np.array(targets, dtype=np.int64))
        return self._cache[key]

    def to_json(self) -> str:
        body = {
            "format": BUNDLE_FORMAT,
            "format_version": BUNDLE_VERSION,
            "max_len": self.max_len,
            "items": self.items,
            "users": self.users,
            "history": self.history,
            "train": self.train,
            "valid": self.valid,
            "test": self.test,
            "negatives": self.negatives,
            "meta": self.meta,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SplitDataset":
        try:
            body = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a dataset bundle ({exc})") from None
        if body.get("format") != BUNDLE_FORMAT:
            raise DataError(f"{path}: not a dataset bundle")
        if body.get("format_version") != BUNDLE_VERSION:
            raise DataError(f"{path}: bundle version {body.get('format_version')} != {BUNDLE_VERSION}")
        return cls(body["items"], body["users"], body["history"], body["train"], body["valid"],
                   body["test"], body["max_len"], body["negatives"], body["meta"])


def split(log: InteractionLog, max_len: int = 20) -> SplitDataset:
    """Leave-one-out: last item tests, second-to-last validates, the rest trains."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    per_user = log.by_user()
    items = sorted({r[1] for r in log.records})
    ids = {item: i + 1 for i, item in enumerate(items)}
    users = sorted(per_user)
    history, train, valid, test = [], [], [], []
    for user in users:
        seq = [ids[i] for i in per_user[user]]
        if len(seq) < 3:
            raise DataError(f"user {user!r} has {len(seq)} interactions; need at least 3")
        history.append(seq)
        train.append(seq[:-2][-max_len:])
        valid.append(seq[-2])
        test.append(seq[-1])
    meta = {"n_interactions": len(log), "n_users": len(users), "n_items": len(items)}
    return SplitDataset(items, users, history, train, valid, test, max_len, meta=meta)


def build_eval_candidates(dataset: SplitDataset, count: int = 100, seed: int = 0) -> list:
    """``count`` uniform negatives per user, disjoint from that user's whole history."""
    rng = np.random.default_rng(seed)
    V = dataset.n_items
    out = []
    for seen in dataset.history_sets():
        if V - len(seen) < count:
            raise ConfigError(f"vocabulary of {V} items too small for {count} negatives")
        chosen: list[int] = []
        taken = set(seen)
        while len(chosen) < count:
            for c in rng.integers(1, V + 1, size=2 * (count - len(chosen))):
                c = int(c)
                if c not in taken:
                    taken.add(c)
                    chosen.append(c)
                    if len(chosen) == count:
                        break
        out.append(chosen)
    dataset.negatives = out
    dataset.meta = {**dataset.meta, "negatives": count, "candidate_seed": seed}
    return out


def sample_negatives(dataset: SplitDataset, users: np.ndarray, rng) -> np.ndarray:
    sets = dataset.history_sets()
    V = dataset.n_items
    neg = rng.integers(1, V + 1, size=len(users))
    for i, u in enumerate(users):
        seen = sets[u]
        while int(neg[i]) in seen:
            neg[i] = rng.integers(1, V + 1)
    return neg


def batches(dataset: SplitDataset, batch_size: int, seed: int, epoch: int = 0, augment: bool = True):
    """One epoch of shuffled batches with one fresh negative per positive."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    users, seqs, targets = dataset.instances(augment)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(users))
    negatives = sample_negatives(dataset, users[order], rng)
    for lo in range(0, len(order), batch_size):
        sel = order[lo:lo + batch_size]
        items = seqs[sel]
        yield Batch(users[sel], items, targets[sel], negatives[lo:lo + batch_size], items == PAD)


def prepare_dataset(log: InteractionLog, max_len: int = 20, negatives: int = 100, seed: int = 0) -> SplitDataset:
    """ingest output -> 5-core -> leave-one-out split -> evaluation candidates."""
    ds = split(five_core_filter(log), max_len=max_len)
    build_eval_candidates(ds, count=negatives, seed=seed)
    ds.meta = {**ds.meta, "max_len": max_len}
    return ds
