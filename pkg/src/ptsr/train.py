"""Adam with decoupled weight decay, the epoch loop, early stopping and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ptsr import diff as D
from ptsr.data import SplitDataset, batches
from ptsr.errors import (CheckpointError, ChecksumError, ConfigError, DomainError, TrainingError,
                         VersionMismatchError)
from ptsr.evaluate import evaluate, metrics
from ptsr.model import PTSR, ModelConfig, bce_loss

MAGIC = b"PTSRCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")  # magic, version, header length
_DIGEST = 32


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-8
    batch_size: int = 512
    epochs: int = 200
    patience: int = 10
    seed: int = 0  # parameter init and batch shuffling
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("need 0 <= beta1, beta2 < 1 and eps > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown training fields: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, params: dict, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   0, lr, beta1, beta2, eps, weight_decay)

    @classmethod
    def for_training(cls, params: dict, tc: TrainConfig) -> "OptimizerState":
        return cls.zeros(params, tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)

    def hyper(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}

    def copy(self) -> "OptimizerState":
        return replace(self, m={k: a.copy() for k, a in self.m.items()},
                       v={k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """One in-place Adam update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def batch_loss(model: PTSR, batch):
    tape = D.Tape()
    loss = bce_loss(model.config, model.tensors(tape), batch.items, batch.positives, batch.negatives)
    return loss, D.backward(tape, loss)


def train_epoch(model: PTSR, dataset: SplitDataset, state: OptimizerState, seed: int,
                epoch: int = 0, batch_size: int = 512, augment: bool = True) -> float:
    """One shuffled pass; returns the instance-weighted mean of the batch losses."""
    total, count = 0.0, 0
    for batch in batches(dataset, batch_size, seed, epoch, augment):
        try:
            # overflow is caught below as a non-finite loss or gradient
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = batch_loss(model, batch)
        except DomainError as exc:  # parameters drifted to non-finite values
            raise TrainingError(f"numeric failure in epoch {epoch}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} in epoch {epoch}")
        adam_step(model.params, grads, state)
        total += value * len(batch.positives)
        count += len(batch.positives)
    return total / count


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    optimizer: OptimizerState
    train_config: TrainConfig = field(default_factory=TrainConfig)
    data_seed: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)  # one dict per finished epoch
    best_epoch: int = 0
    best_metric: float = float("-inf")
    data_fingerprint: str = ""
    run_config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def model(self) -> PTSR:
        return PTSR(self.model_config, {k: v.copy() for k, v in self.params.items()})

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.model_config.to_dict(), sort_keys=True).encode()).hexdigest()


def _groups(ckpt: Checkpoint):
    for group, arrays in (("param", ckpt.params), ("adam_m", ckpt.optimizer.m), ("adam_v", ckpt.optimizer.v)):
        for name in sorted(arrays):
            yield group, name, np.ascontiguousarray(arrays[name], dtype="<f8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = [[g, n, list(a.shape)] for g, n, a in _groups(ckpt)]
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "optimizer": ckpt.optimizer.hyper(),
        "data_seed": ckpt.data_seed,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "best_metric": ckpt.best_metric if np.isfinite(ckpt.best_metric) else None,
        "data_fingerprint": ckpt.data_fingerprint,
        "run_config": ckpt.run_config,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join([_HEAD.pack(MAGIC, ckpt.version, len(head)), head]
                    + [a.tobytes() for _, _, a in _groups(ckpt)])
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes, source="<bytes>") -> Checkpoint:
    if len(blob) < _HEAD.size + _DIGEST:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(blob)} bytes)")
    magic, version, head_len = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch (corrupted or truncated file)")
    pos = _HEAD.size
    header = json.loads(body[pos:pos + head_len])
    pos += head_len
    arrays: dict = {"param": {}, "adam_m": {}, "adam_v": {}}
    for group, name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(body):
            raise CheckpointError(f"{source}: array {group}/{name} runs past the end of the file")
        arrays[group][name] = np.frombuffer(body, "<f8", n // 8, pos).reshape(shape).astype(np.float64)
        pos += n
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes after the arrays")
    opt = OptimizerState(arrays["adam_m"], arrays["adam_v"], **header["optimizer"])
    best = header["best_metric"]
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), arrays["param"], opt,
                      TrainConfig.from_dict(header["train_config"]), header["data_seed"], header["epoch"],
                      header["history"], header["best_epoch"], float("-inf") if best is None else best,
                      header["data_fingerprint"], header["run_config"], version)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), path)


# -- fitting ------------------------------------------------------------------

class Trainer:
    """Epoch loop with early stopping; ``snapshot`` and ``resume`` make runs restartable.

    A resumed run needs the last-epoch checkpoint and the best-so-far
    checkpoint, and reproduces the uninterrupted trajectory exactly because
    each epoch's shuffling depends only on (seed, epoch).
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, dataset: SplitDataset,
                 run_config: dict | None = None, eval_k: int = 10):
        if model_config.max_len != dataset.max_len:
            raise ConfigError(f"model max_len {model_config.max_len} != dataset max_len {dataset.max_len}")
        if model_config.n_items != dataset.n_items:
            raise ConfigError(f"model n_items {model_config.n_items} != dataset n_items {dataset.n_items}")
        self.tc = train_config
        self.dataset = dataset
        self.eval_k = eval_k
        self.run_config = dict(run_config or {})
        self.model = PTSR(model_config, seed=train_config.seed)
        self.state = OptimizerState.for_training(self.model.params, train_config)
        self.epoch = 0
        self.history: list = []
        self.best: Checkpoint | None = None
        self._fingerprint = dataset.fingerprint()

    @property
    def stale(self) -> int:
        return self.epoch - (self.best.epoch if self.best else 0)

    @property
    def done(self) -> bool:
        return self.epoch >= self.tc.epochs or (self.best is not None and self.stale >= self.tc.patience)

    def snapshot(self) -> Checkpoint:
        best_epoch = self.best.epoch if self.best else 0
        best_metric = self.best.best_metric if self.best else float("-inf")
        return Checkpoint(self.model.config, {k: v.copy() for k, v in self.model.params.items()},
                          self.state.copy(), self.tc, self.dataset.meta.get("candidate_seed", 0),
                          self.epoch, [dict(h) for h in self.history], best_epoch, best_metric,
                          self._fingerprint, self.run_config)

    def step(self) -> dict:
        self.epoch += 1
        loss = train_epoch(self.model, self.dataset, self.state, self.tc.seed, self.epoch,
                           self.tc.batch_size, self.tc.augment)
        scores = metrics(evaluate(self.model, self.dataset, "valid"), (self.eval_k,))
        record = {"epoch": self.epoch, "loss": loss, **{f"valid_{k}": v for k, v in scores.items()}}
        self.history.append(record)
        ndcg = scores[f"NDCG@{self.eval_k}"]
        if self.best is None or ndcg > self.best.best_metric:
            self.best = self.snapshot()
            self.best.best_epoch, self.best.best_metric = self.epoch, ndcg
        return record

    def run(self, max_epochs: int | None = None, callback=None) -> Checkpoint:
        """Train until early stopping (or ``max_epochs`` more epochs); return the best checkpoint."""
        ran = 0
        while not self.done and (max_epochs is None or ran < max_epochs):
            record = self.step()
            ran += 1
            if callback is not None:
                callback(record, self)
        return self.best_checkpoint()

    def best_checkpoint(self) -> Checkpoint:
        if self.best is None:
            raise TrainingError("no epoch has finished yet")
        out = self.best
        # the best checkpoint carries the full history seen so far
        out.history = [dict(h) for h in self.history]
        return out

    @classmethod
    def resume(cls, last: Checkpoint, best: Checkpoint, dataset: SplitDataset, eval_k: int = 10) -> "Trainer":
        if last.data_fingerprint and last.data_fingerprint != dataset.fingerprint():
            raise CheckpointError("checkpoint was trained on a different dataset bundle")
        tr = cls(last.model_config, last.train_config, dataset, last.run_config, eval_k)
        tr.model = PTSR(last.model_config, {k: v.copy() for k, v in last.params.items()})
        tr.state = last.optimizer.copy()
        tr.epoch = last.epoch
        tr.history = [dict(h) for h in last.history]
        tr.best = best
        return tr


def fit(model_config: ModelConfig, train_config: TrainConfig, dataset: SplitDataset,
        run_config: dict | None = None, callback=None) -> Checkpoint:
    """Train with early stopping on validation NDCG@10 and return the best checkpoint."""
    return Trainer(model_config, train_config, dataset, run_config).run(callback=callback)
