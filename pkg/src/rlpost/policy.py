"""Linear-softmax autoregressive policy over a small tag/option vocabulary.

The policy scores the next token with ``logits = W @ phi`` where ``phi`` is an
explicit feature vector built from the prompt, the last emitted token and the
current position.  Everything is float64 so that analytic gradients can be
checked against finite differences.

Token id layout (``V`` = number of generatable tokens)::

    0               <eos>
    1..4            <think> </think> <answer> </answer>
    5..10           option letters A..F
    11..V-1         filler tokens f0, f1, ...
    V..V+5          prompt symbols s0..s5 (input only, never generated)
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractViolation, NumericalOverflowError

EOS = 0
THINK_OPEN = 1
THINK_CLOSE = 2
ANS_OPEN = 3
ANS_CLOSE = 4
OPTION_LETTERS = "ABCDEF"
FIRST_OPTION = 5
FIRST_FILLER = FIRST_OPTION + len(OPTION_LETTERS)
N_PROMPT_SYMBOLS = 6
N_POSITION_BUCKETS = 8
TAG_IDS = frozenset({THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE})

_TAG_NAMES = ["<eos>", "<think>", "</think>", "<answer>", "</answer>"]


class Role(str, Enum):
    EOS = "eos"
    THINK_OPEN = "think_open"
    THINK_CLOSE = "think_close"
    ANS_OPEN = "ans_open"
    ANS_CLOSE = "ans_close"
    OPTION = "option"
    FILLER = "filler"
    PROMPT_SYMBOL = "prompt_symbol"


_FIXED_ROLES = [Role.EOS, Role.THINK_OPEN, Role.THINK_CLOSE, Role.ANS_OPEN, Role.ANS_CLOSE]


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory. ``size`` counts only the generatable tokens."""

    n_filler: int = 5

    def __post_init__(self):
        if self.n_filler < 0:
            raise ContractViolation("n_filler must be >= 0")

    @classmethod
    def with_size(cls, size: int) -> "Vocabulary":
        if size < FIRST_FILLER:
            raise ContractViolation(f"vocabulary size must be >= {FIRST_FILLER}, got {size}")
        return cls(n_filler=size - FIRST_FILLER)

    @property
    def size(self) -> int:
        return FIRST_FILLER + self.n_filler

    @property
    def total(self) -> int:
        return self.size + N_PROMPT_SYMBOLS

    @property
    def tokens(self) -> list[str]:
        names = list(_TAG_NAMES) + list(OPTION_LETTERS)
        names += [f"f{i}" for i in range(self.n_filler)]
        names += [f"s{i}" for i in range(N_PROMPT_SYMBOLS)]
        return names

    def role(self, token_id: int) -> tuple[Role, int | str | None]:
        if not 0 <= token_id < self.total:
            raise ContractViolation(f"token id {token_id} out of range")
        if token_id < FIRST_OPTION:
            return _FIXED_ROLES[token_id], None
        if token_id < FIRST_FILLER:
            return Role.OPTION, OPTION_LETTERS[token_id - FIRST_OPTION]
        if token_id < self.size:
            return Role.FILLER, token_id - FIRST_FILLER
        return Role.PROMPT_SYMBOL, token_id - self.size

    def option_id(self, letter: str) -> int:
        if len(letter) != 1 or letter not in OPTION_LETTERS:
            raise ContractViolation(f"not an option letter: {letter!r}")
        return FIRST_OPTION + OPTION_LETTERS.index(letter)

    def option_letter(self, token_id: int) -> str | None:
        if FIRST_OPTION <= token_id < FIRST_FILLER:
            return OPTION_LETTERS[token_id - FIRST_OPTION]
        return None

    def filler_id(self, index: int) -> int:
        if not 0 <= index < self.n_filler:
            raise ContractViolation(f"filler index {index} out of range")
        return FIRST_FILLER + index

    def symbol_id(self, index: int) -> int:
        if not 0 <= index < N_PROMPT_SYMBOLS:
            raise ContractViolation(f"prompt symbol index {index} out of range")
        return self.size + index

    def name(self, token_id: int) -> str:
        return self.tokens[token_id]

    def id_of(self, name: str) -> int:
        try:
            return self.tokens.index(name)
        except ValueError:
            raise ContractViolation(f"unknown token name {name!r}") from None

    def encode(self, names) -> tuple[int, ...]:
        lookup = {n: i for i, n in enumerate(self.tokens)}
        try:
            return tuple(lookup[n] for n in names)
        except KeyError as e:
            raise ContractViolation(f"unknown token name {e.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        names = self.tokens
        return [names[i] for i in ids]


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...] = ()
    terminated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.terminated:
            if not self.ids or self.ids[-1] != EOS:
                raise ContractViolation("terminated sequence must end with EOS")
            if EOS in self.ids[:-1]:
                raise ContractViolation("EOS may only appear as the final token")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class FeatureMap:
    """Builds the conditioning vector for each generation step.

    Layout: ``[prompt symbol frequencies (6) | last token one-hot (V) |
    position bucket one-hot (P) | bias]``.
    """

    vocab: Vocabulary
    L_hard: int
    n_buckets: int = N_POSITION_BUCKETS

    def __post_init__(self):
        if self.L_hard < 1:
            raise ContractViolation("L_hard must be >= 1")
        if self.n_buckets < 1:
            raise ContractViolation("n_buckets must be >= 1")

    @property
    def V(self) -> int:
        return self.vocab.size

    @property
    def dim(self) -> int:
        return N_PROMPT_SYMBOLS + self.V + self.n_buckets + 1

    @property
    def last_offset(self) -> int:
        return N_PROMPT_SYMBOLS

    @property
    def bucket_offset(self) -> int:
        return N_PROMPT_SYMBOLS + self.V

    def bucket(self, position: int) -> int:
        return position * self.n_buckets // self.L_hard

    def prompt_counts(self, prompt: TokenSeq) -> np.ndarray:
        ids = np.asarray(prompt.ids, dtype=np.int64)
        sym = ids - self.V
        if ids.size and (sym.min() < 0 or sym.max() >= N_PROMPT_SYMBOLS):
            bad = int(ids[(sym < 0) | (sym >= N_PROMPT_SYMBOLS)][0])
            raise ContractViolation(f"prompt token {bad} is not a prompt symbol")
        counts = np.bincount(sym, minlength=N_PROMPT_SYMBOLS).astype(np.float64)
        if ids.size:
            counts /= ids.size
        return counts

    def step_features(self, counts: np.ndarray, last: int | None, position: int) -> np.ndarray:
        if not 0 <= position < self.L_hard:
            raise ContractViolation(f"position {position} outside [0, {self.L_hard})")
        phi = np.zeros(self.dim)
        phi[:N_PROMPT_SYMBOLS] = counts
        if last is not None:
            if not 0 <= last < self.V:
                raise ContractViolation(f"prefix token {last} is not generatable")
            phi[self.last_offset + last] = 1.0
        phi[self.bucket_offset + self.bucket(position)] = 1.0
        phi[-1] = 1.0
        return phi

    def featurize(self, prompt: TokenSeq, prefix: TokenSeq, position: int) -> np.ndarray:
        if position != len(prefix):
            raise ContractViolation(f"position {position} != prefix length {len(prefix)}")
        last = prefix.ids[-1] if prefix.ids else None
        return self.step_features(self.prompt_counts(prompt), last, position)

    def sequence_features(self, prompt: TokenSeq, seq: TokenSeq) -> np.ndarray:
        """Feature rows for every step of ``seq`` (shape ``len(seq) x D``)."""
        counts = self.prompt_counts(prompt)
        n = len(seq)
        if n > self.L_hard:
            raise ContractViolation(f"sequence length {n} exceeds L_hard={self.L_hard}")
        ids = np.asarray(seq.ids, dtype=np.int64)
        if n and (ids.min() < 0 or ids.max() >= self.V):
            raise ContractViolation("sequence contains a non-generatable token")
        phi = np.zeros((n, self.dim))
        phi[:, :N_PROMPT_SYMBOLS] = counts
        if n > 1:
            phi[np.arange(1, n), self.last_offset + ids[:-1]] = 1.0
        pos = np.arange(n)
        phi[pos, self.bucket_offset + pos * self.n_buckets // self.L_hard] = 1.0
        phi[:, -1] = 1.0
        return phi


@dataclass
class PolicyParams:
    fmap: FeatureMap
    weights: np.ndarray
    version: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        expected = (self.fmap.V, self.fmap.dim)
        if self.weights.shape != expected:
            raise ContractViolation(f"weights shape {self.weights.shape} != {expected}")
        if not np.all(np.isfinite(self.weights)):
            raise NumericalOverflowError("policy weights contain non-finite entries")

    @classmethod
    def zeros(cls, fmap: FeatureMap) -> "PolicyParams":
        return cls(fmap, np.zeros((fmap.V, fmap.dim)))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.fmap, self.weights.copy(), self.version)

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.fmap, weights, self.version)


# Row-wise multiply-and-reduce instead of BLAS so that each row's logits are
# bit-identical no matter how many rows are evaluated together.
def logits(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    # overflow is reported by log_softmax, which names the row
    with np.errstate(over="ignore", invalid="ignore"):
        if features.ndim == 1:
            return (weights * features).sum(axis=-1)
        return (features[:, None, :] * weights[None, :, :]).sum(axis=-1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(z)))[0]
        raise NumericalOverflowError(f"non-finite logit for vocabulary row {int(bad[-1])}")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def token_log_distribution(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    return log_softmax(logits(params.weights, features))


def token_distribution(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    return np.exp(token_log_distribution(params, features))


def rollout_rng(seed: int, prompt_index: int, rollout_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, prompt_index, rollout_index])


def _inverse_cdf(logp: np.ndarray, u) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp), axis=-1)
    k = (cdf <= np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(k, logp.shape[-1] - 1)


def sample_sequence(
    params: PolicyParams,
    prompt: TokenSeq,
    rng: np.random.Generator,
    L_hard: int | None = None,
) -> tuple[TokenSeq, np.ndarray]:
    """Draw one response token by token until EOS or the length cap."""
    fmap = params.fmap
    L_hard = fmap.L_hard if L_hard is None else L_hard
    if not 1 <= L_hard <= fmap.L_hard:
        raise ContractViolation(f"L_hard must be in [1, {fmap.L_hard}]")
    counts = fmap.prompt_counts(prompt)
    ids: list[int] = []
    logps: list[float] = []
    for t in range(L_hard):
        phi = fmap.step_features(counts, ids[-1] if ids else None, t)
        logp = token_log_distribution(params, phi)
        k = int(_inverse_cdf(logp, rng.random()))
        ids.append(k)
        logps.append(float(logp[k]))
        if k == EOS:
            break
    return TokenSeq(tuple(ids), terminated=ids[-1] == EOS), np.array(logps)


@dataclass
class Rollout:
    seq: TokenSeq
    logprobs: np.ndarray
    features: np.ndarray = field(repr=False)


def _sample_chunk(params: PolicyParams, counts: np.ndarray, uniforms: np.ndarray) -> list[Rollout]:
    fmap = params.fmap
    R, L = uniforms.shape
    tokens = np.zeros((R, L), dtype=np.int64)
    logps = np.zeros((R, L))
    feats = np.zeros((R, L, fmap.dim))
    lengths = np.full(R, L)
    active = np.arange(R)
    for t in range(L):
        if active.size == 0:
            break
        phi = np.zeros((active.size, fmap.dim))
        phi[:, :N_PROMPT_SYMBOLS] = counts[active]
        if t > 0:
            phi[np.arange(active.size), fmap.last_offset + tokens[active, t - 1]] = 1.0
        phi[:, fmap.bucket_offset + fmap.bucket(t)] = 1.0
        phi[:, -1] = 1.0
        logp = token_log_distribution(params, phi)
        k = _inverse_cdf(logp, uniforms[active, t])
        tokens[active, t] = k
        logps[active, t] = logp[np.arange(active.size), k]
        feats[active, t] = phi
        done = k == EOS
        lengths[active[done]] = t + 1
        active = active[~done]
    out = []
    for r in range(R):
        n = int(lengths[r])
        ids = tuple(int(x) for x in tokens[r, :n])
        out.append(Rollout(TokenSeq(ids, terminated=ids[-1] == EOS), logps[r, :n].copy(), feats[r, :n].copy()))
    return out


def sample_rollouts(
    params: PolicyParams,
    prompts: list[TokenSeq],
    rngs: list[np.random.Generator],
    L_hard: int | None = None,
    workers: int = 1,
) -> list[Rollout]:
    """Vectorised equivalent of calling :func:`sample_sequence` per (prompt, rng).

    Each rng supplies the per-step uniforms for its own rollout, so the
    result does not depend on ``workers`` or on how rollouts are batched.
    """
    fmap = params.fmap
    L_hard = fmap.L_hard if L_hard is None else L_hard
    if len(prompts) != len(rngs):
        raise ContractViolation("need one rng per prompt")
    if not prompts:
        return []
    counts = np.stack([fmap.prompt_counts(p) for p in prompts])
    uniforms = np.stack([g.random(L_hard) for g in rngs])
    if workers <= 1:
        return _sample_chunk(params, counts, uniforms)
    bounds = np.linspace(0, len(prompts), workers + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda b: _sample_chunk(params, counts[b[0]:b[1]], uniforms[b[0]:b[1]]), chunks)
        return [r for part in parts for r in part]


def greedy_sequence(params: PolicyParams, prompt: TokenSeq, L_hard: int | None = None) -> TokenSeq:
    """Argmax decoding; ties go to the lowest token id."""
    fmap = params.fmap
    L_hard = fmap.L_hard if L_hard is None else L_hard
    counts = fmap.prompt_counts(prompt)
    ids: list[int] = []
    for t in range(L_hard):
        phi = fmap.step_features(counts, ids[-1] if ids else None, t)
        k = int(np.argmax(logits(params.weights, phi)))
        ids.append(k)
        if k == EOS:
            break
    return TokenSeq(tuple(ids), terminated=ids[-1] == EOS)


def token_logprobs(params: PolicyParams, prompt: TokenSeq, seq: TokenSeq) -> np.ndarray:
    phi = params.fmap.sequence_features(prompt, seq)
    logp = token_log_distribution(params, phi)
    return logp[np.arange(len(seq)), list(seq.ids)]


def sequence_logprob(params: PolicyParams, prompt: TokenSeq, seq: TokenSeq) -> float:
    return float(token_logprobs(params, prompt, seq).sum())


def grad_log_prob(params: PolicyParams, prompt: TokenSeq, seq: TokenSeq) -> np.ndarray:
    """Gradient of ``log pi(seq | prompt)`` w.r.t. the weight matrix.

    Equals ``sum_t (onehot(o_t) - pi(.|s_t)) phi_t^T``.
    """
    phi = params.fmap.sequence_features(prompt, seq)
    probs = token_distribution(params, phi)
    coef = -probs
    coef[np.arange(len(seq)), list(seq.ids)] += 1.0
    return np.einsum("tv,td->vd", coef, phi)
