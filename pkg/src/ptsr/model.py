"""Pattern-wise transparent scorer over Gamma/Beta item embeddings.

Every item is a set of ``d`` independent Gamma (shape, rate) or Beta
distributions. A sequence is cut into contiguous windows of size 1..L, each
window is fused into one distribution by a weighted conjunction, and a
candidate item is scored by how close (KL) it sits to the windows, with a
per-level softmax over negative distances and an order-aware bias network
deciding how much each window counts::

    score = sum_l sum_k (eta_lk + lam * delta_lk) * (gamma - Dis_lk)

Batched code paths operate on :class:`ptsr.diff.Tensor` so the same forward
pass serves training (on a tape) and inference (untracked constants).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ptsr import diff as D
from ptsr import specfn
from ptsr.errors import ConfigError, ItemLookupError, ScoringError

FAMILIES = ("gamma", "beta")
PAD = 0


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    d: int = 64
    levels: int = 2
    max_len: int = 20
    gamma: float = 2.0
    lam: float = 0.4
    family: str = "gamma"
    use_weight: bool = True
    use_bias: bool = True
    use_kl: bool = True
    use_prob_embedding: bool = True
    conj_depth: int = 1
    floor: float = 0.05
    init_mean: float = 0.5
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_items < 1:
            raise ConfigError("n_items must be >= 1")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if not 1 <= self.levels <= self.max_len:
            raise ConfigError(f"levels must lie in [1, max_len={self.max_len}], got {self.levels}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.conj_depth < 1:
            raise ConfigError("conj_depth must be >= 1")
        if not self.floor > 0:
            raise ConfigError("floor must be > 0")

    @property
    def bias_active(self) -> bool:
        return self.use_bias and self.lam > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ProbEmbedding:
    alpha: np.ndarray
    beta: np.ndarray


@dataclass
class Pattern:
    level: int
    start: int  # 1-based window start
    item_ids: list
    masked: bool = False
    embedding: ProbEmbedding | None = None


@dataclass
class LevelParts:
    level: int
    mask: np.ndarray  # (B, m) True = real pattern
    distance: D.Tensor  # (B, C, m)
    eta: D.Tensor  # (B, C, m)
    delta: D.Tensor | None  # (B, m)
    contribution: D.Tensor  # (B, C, m)
    total: D.Tensor  # (B, C)


@dataclass
class ScoreParts:
    score: D.Tensor  # (B, C)
    levels: list = field(default_factory=list)


# -- parameters ---------------------------------------------------------------

def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    V, d, n = config.n_items + 1, config.d, config.max_len
    params = {}
    if config.use_prob_embedding:
        params["alpha"] = rng.normal(config.init_mean, config.init_std, (V, d))
        params["beta"] = rng.normal(config.init_mean, config.init_std, (V, d))
        width = 2 * d
    else:
        params["embed"] = rng.normal(0.0, config.init_std, (V, d))
        width = d
    for i in range(config.conj_depth):
        params[f"conj.w{i}"] = rng.normal(0.0, 0.02, (width, d))
        params[f"conj.b{i}"] = np.zeros(d)
        width = d
    if config.use_bias:
        for level in range(1, config.levels + 1):
            m = n - level + 1
            params[f"bias{level}.w1"] = rng.normal(0.0, 0.02, (n * d, d))
            params[f"bias{level}.b1"] = np.zeros(d)
            params[f"bias{level}.w2"] = rng.normal(0.0, 0.02, (d, m))
            params[f"bias{level}.b2"] = np.zeros(m)
    return params


def _positive(raw, floor):
    return D.maximum(D.softplus(raw), floor)


def _embed(config, P, ids):
    """Item ids (any shape) -> (alpha, beta) tensors, or (vector, None) for plain embeddings."""
    if config.use_prob_embedding:
        return (_positive(D.take(P["alpha"], ids, 0), config.floor),
                _positive(D.take(P["beta"], ids, 0), config.floor))
    return D.take(P["embed"], ids, 0), None


def _scorer(config, P, feats):
    h = feats
    for i in range(config.conj_depth):
        if i:
            h = D.tanh(h)
        h = h @ P[f"conj.w{i}"] + P[f"conj.b{i}"]
    return h


def _means(config, alpha, beta):
    if config.family == "gamma":
        return alpha / beta
    return alpha / (alpha + beta)


def _unit(x):
    return x / D.sqrt(D.sum(x * x, axis=-1, keepdims=True) + 1e-300)


def window_index(n: int, level: int) -> np.ndarray:
    """(n - level + 1, level) array of 0-based window positions."""
    return np.arange(n - level + 1)[:, None] + np.arange(level)[None, :]


# -- KL distances -------------------------------------------------------------

def _target_terms(config, ta, tb):
    """Candidate-only part of KL(target || pattern) and its bilinear features."""
    if config.family == "gamma":
        psi = D.digamma(ta)
        const = D.sum(ta * psi - D.lgamma(ta) - ta, axis=-1)
        feats = D.concat([D.log(tb) - psi, ta / tb], axis=-1)
    else:
        s = ta + tb
        psi_a, psi_b, psi_s = D.digamma(ta), D.digamma(tb), D.digamma(s)
        const = D.sum(D.lgamma(s) - D.lgamma(ta) - D.lgamma(tb)
                      + ta * psi_a + tb * psi_b - s * psi_s, axis=-1)
        feats = D.concat([psi_s - psi_a, psi_s - psi_b], axis=-1)
    return const, feats


def _pattern_terms(config, pa, pb):
    if config.family == "gamma":
        const = D.sum(D.lgamma(pa) - pa * D.log(pb), axis=-1)
    else:
        const = D.sum(D.lgamma(pa) + D.lgamma(pb) - D.lgamma(pa + pb), axis=-1)
    return const, D.concat([pa, pb], axis=-1)


def kl_distance(target: ProbEmbedding, pattern: ProbEmbedding, family: str = "gamma") -> float:
    """Sum over dimensions of KL(target_i || pattern_i), direct closed form.

    Gamma uses the shape-rate convention. This is the elementwise reference;
    batched scoring uses an algebraically equivalent separable form.
    """
    a1, b1 = np.asarray(target.alpha, float), np.asarray(target.beta, float)
    a2, b2 = np.asarray(pattern.alpha, float), np.asarray(pattern.beta, float)
    if a1.shape != a2.shape or b1.shape != b2.shape:
        raise ConfigError("target and pattern embeddings differ in dimension")
    lg, psi = specfn.lgamma, specfn.digamma
    if family == "gamma":
        kl = ((a1 - a2) * psi(a1) - lg(a1) + lg(a2)
              + a2 * (np.log(b1) - np.log(b2)) + a1 * (b2 - b1) / b1)
    elif family == "beta":
        s1, s2 = a1 + b1, a2 + b2
        kl = (lg(s1) - lg(a1) - lg(b1) - lg(s2) + lg(a2) + lg(b2)
              + (a1 - a2) * psi(a1) + (b1 - b2) * psi(b1) + (a2 - a1 + b2 - b1) * psi(s1))
    else:
        raise ConfigError(f"unknown family {family!r}")
    return float(np.sum(kl))


# -- batched forward ----------------------------------------------------------

def forward(config: ModelConfig, P: dict, seqs, cands) -> ScoreParts:
    """Score candidates ``cands`` (B, C) against left-padded sequences ``seqs`` (B, n)."""
    seqs = np.asarray(seqs, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    B, n = seqs.shape
    if n != config.max_len:
        raise ScoringError(f"sequences must have length {config.max_len}, got {n}")
    if cands.ndim != 2 or cands.shape[0] != B:
        raise ScoringError(f"candidates must have shape (B, C) with B={B}")
    if np.any(cands <= PAD) or np.any(cands > config.n_items) or np.any(seqs < 0) or np.any(seqs > config.n_items):
        raise ItemLookupError("item id outside the vocabulary")
    valid = seqs != PAD
    if not np.all(valid.any(axis=1)):
        raise ScoringError("cannot score an empty (all-padding) sequence")

    prob = config.use_prob_embedding
    use_kl = prob and config.use_kl
    # every per-item quantity is computed once per distinct id in the batch and
    # then gathered, so the wide (B, n, d) tensors only appear inside windows
    s_uniq, s_inv = np.unique(seqs, return_inverse=True)
    s_inv = s_inv.reshape(seqs.shape)
    ua, ub = _embed(config, P, s_uniq)
    u_logits = _scorer(config, P, D.concat([ua, ub], axis=-1) if prob else ua)

    c_uniq, c_inv = np.unique(cands, return_inverse=True)
    c_inv = c_inv.reshape(cands.shape)
    ta, tb = _embed(config, P, c_uniq)
    if use_kl:
        t_const, t_feats = _target_terms(config, ta, tb)
        t_const = D.take(D.reshape(t_const, t_const.shape + (1,)), c_inv, 0)
        t_feats = D.take(t_feats, c_inv, 0)
    else:
        t_unit = D.take(_unit(_means(config, ta, tb) if prob else ta), c_inv, 0)

    if config.bias_active:
        e = D.take(ua / (ua + ub) if prob else ua, s_inv, 0) * valid[..., None]
        e = D.reshape(e, (B, n * config.d))

    levels = []
    score = None
    for level in range(1, config.levels + 1):
        idx = window_index(n, level)
        mask = valid[:, idx].all(axis=-1)  # (B, m)
        m = idx.shape[0]
        if level == 1:
            if use_kl:
                p_const, p_feats = _pattern_terms(config, ua, ub)
                p_const, p_feats = D.take(p_const, s_inv, 0), D.take(p_feats, s_inv, 0)
            else:
                p_unit = D.take(_unit(_means(config, ua, ub) if prob else ua), s_inv, 0)
        else:
            widx = s_inv[:, idx]  # (B, m, l) rows of the distinct-item tables
            w = D.softmax(D.take(u_logits, widx, 0), axis=2)  # (B, m, l, d)
            pa = D.sum(w * D.take(ua, widx, 0), axis=2)
            pb = D.sum(w * D.take(ub, widx, 0), axis=2) if prob else None
            if use_kl:
                p_const, p_feats = _pattern_terms(config, pa, pb)
            else:
                p_unit = _unit(_means(config, pa, pb) if prob else pa)

        if use_kl:
            dis = (t_const + D.reshape(p_const, (B, 1, m))
                   + t_feats @ D.swapaxes(p_feats, -1, -2))
        else:
            dis = -(t_unit @ D.swapaxes(p_unit, -1, -2))

        if config.use_weight:
            eta = D.softmax(-dis, axis=-1, mask=mask[:, None, :])
        else:
            eta = D.constant(np.broadcast_to(mask[:, None, :], dis.shape).astype(np.float64))

        delta = None
        coef = eta
        if config.bias_active:
            h = D.tanh(e @ P[f"bias{level}.w1"] + P[f"bias{level}.b1"])
            delta = D.softmax(h @ P[f"bias{level}.w2"] + P[f"bias{level}.b2"], axis=-1, mask=mask)
            coef = eta + config.lam * D.reshape(delta, (B, 1, m))

        contribution = coef * (config.gamma - dis)
        total = D.sum(contribution, axis=-1)
        levels.append(LevelParts(level, mask, dis, eta, delta, contribution, total))
        score = total if score is None else score + total
    return ScoreParts(score, levels)


def bce_loss(config: ModelConfig, P: dict, seqs, pos, neg) -> D.Tensor:
    """Mean over the batch of -log sigma(y_pos) - log sigma(-y_neg)."""
    cands = np.stack([np.asarray(pos), np.asarray(neg)], axis=1)
    s = forward(config, P, seqs, cands).score
    return -D.mean(D.sum(D.log_sigmoid(s * np.array([1.0, -1.0])), axis=1))


def loss(score_pos, score_neg) -> float:
    """Pairwise binary cross-entropy for one positive and one negative score."""
    return -specfn.log_sigmoid(score_pos) - specfn.log_sigmoid(-score_neg)


# -- model object -------------------------------------------------------------

def pad_sequence(sequence, n: int) -> np.ndarray:
    """Keep the ``n`` most recent items and left-pad with the padding id."""
    seq = [int(i) for i in sequence][-n:]
    return np.array([PAD] * (n - len(seq)) + seq, dtype=np.int64)


class PTSR:
    """A config plus its parameter arrays, with convenience scoring methods."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params

    def tensors(self, tape: D.Tape | None = None) -> dict:
        if tape is None:
            return {k: D.constant(v) for k, v in self.params.items()}
        return {k: tape.leaf(v, k) for k, v in self.params.items()}

    def forward(self, seqs, cands, tape=None) -> ScoreParts:
        return forward(self.config, self.tensors(tape), seqs, cands)

    def score_batch(self, seqs, cands) -> np.ndarray:
        return self.forward(seqs, cands).score.value

    def score(self, sequence, candidate: int) -> float:
        seq = pad_sequence(sequence, self.config.max_len)
        return float(self.score_batch(seq[None, :], [[candidate]])[0, 0])


# -- single-sequence helpers --------------------------------------------------

def lookup_embedding(item: int, params: dict, config: ModelConfig) -> ProbEmbedding:
    table = params["alpha"]
    if not 0 <= int(item) < table.shape[0]:
        raise ItemLookupError(f"unknown item id {item}")
    alpha = np.maximum(specfn.softplus(params["alpha"][item]), config.floor)
    beta = np.maximum(specfn.softplus(params["beta"][item]), config.floor)
    return ProbEmbedding(np.asarray(alpha), np.asarray(beta))


def extract_patterns(sequence, L: int) -> dict[int, list[Pattern]]:
    """All contiguous windows of sizes 1..L, in order; windows touching padding are masked."""
    seq = [int(i) for i in sequence]
    n = len(seq)
    if not 1 <= L <= n:
        raise ConfigError(f"pattern level L={L} must lie in [1, {n}]")
    out = {}
    for level in range(1, L + 1):
        out[level] = [
            Pattern(level, k + 1, seq[k:k + level], masked=PAD in seq[k:k + level])
            for k in range(n - level + 1)
        ]
    return out


def attention_weights(items: list[ProbEmbedding], params: dict, config: ModelConfig) -> np.ndarray:
    """(l, d) conjunction weights; every column is a softmax over the window."""
    feats = np.stack([np.concatenate([e.alpha, e.beta]) for e in items])
    P = {k: D.constant(v) for k, v in params.items()}
    logits = _scorer(config, P, D.constant(feats)).value
    return specfn.softmax(logits, axis=0)


def conjunction(items: list[ProbEmbedding], weights: np.ndarray) -> ProbEmbedding:
    alpha = np.sum(weights * np.stack([e.alpha for e in items]), axis=0)
    beta = np.sum(weights * np.stack([e.beta for e in items]), axis=0)
    return ProbEmbedding(alpha, beta)


def distance_weights(distances, mask=None) -> np.ndarray:
    """Softmax of negative distances over unmasked patterns (mask True = keep)."""
    distances = np.asarray(distances, dtype=np.float64)
    if mask is None:
        mask = np.ones(distances.shape, dtype=bool)
    return specfn.softmax(-distances, mask=mask)


def sequence_bias(sequence, level: int, params: dict, config: ModelConfig) -> np.ndarray:
    """Order-aware bias over the ``n - level + 1`` windows of a padded sequence."""
    seq = pad_sequence(sequence, config.max_len)
    n, d = config.max_len, config.d
    valid = seq != PAD
    alpha = np.maximum(specfn.softplus(params["alpha"][seq]), config.floor)
    beta = np.maximum(specfn.softplus(params["beta"][seq]), config.floor)
    e = (alpha / (alpha + beta) * valid[:, None]).reshape(n * d)
    h = np.tanh(e @ params[f"bias{level}.w1"] + params[f"bias{level}.b1"])
    logits = h @ params[f"bias{level}.w2"] + params[f"bias{level}.b2"]
    mask = valid[window_index(n, level)].all(axis=-1)
    return specfn.softmax(logits, mask=mask)
