"""Group-relative advantages and the clipped GRPO / DAPO surrogate objectives.

Both objectives are *maximised*.  Gradients are analytic: for a token with
new log-probability ``l`` the clipped term contributes ``d term / d l`` times
``(onehot(o_t) - pi(.|s_t)) phi_t^T``; the exact KL term contributes
``-beta * p * (log p - log q - KL)`` on the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import is_equivalent
from .errors import ContractViolation, NumericalOverflowError, UndefinedKLError
from .policy import PolicyParams, TokenSeq, token_log_distribution
from .rewards import RewardBreakdown

DEFAULT_EPS_SIGMA = 1e-8


@dataclass
class RolloutGroup:
    prompt: TokenSeq
    responses: list[TokenSeq]
    old_logprobs: list[np.ndarray]
    ground_truth: str
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    breakdowns: list[RewardBreakdown] | None = None
    # per-response (len x D) feature rows cached at sampling time
    features: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.responses) < 2:
            raise ContractViolation(f"a group needs G >= 2 responses, got {len(self.responses)}")
        if len(self.old_logprobs) != len(self.responses):
            raise ContractViolation("old_logprobs must have one entry per response")
        self.old_logprobs = [np.asarray(lp, dtype=np.float64) for lp in self.old_logprobs]
        for i, (seq, lp) in enumerate(zip(self.responses, self.old_logprobs)):
            if lp.shape != (len(seq),):
                raise ContractViolation(f"response {i}: old_logprobs shape {lp.shape} != ({len(seq)},)")
            if len(seq) == 0:
                raise ContractViolation(f"response {i} is empty")

    @property
    def G(self) -> int:
        return len(self.responses)

    def n_correct(self) -> int:
        return sum(is_equivalent(self.ground_truth, r) for r in self.responses)


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.04

    def __post_init__(self):
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ContractViolation("clip epsilons must be > 0")
        if 1 - self.eps_low <= 0:
            raise ContractViolation("eps_low must be < 1")
        if self.beta < 0:
            raise ContractViolation("beta must be >= 0")

    @classmethod
    def symmetric(cls, eps: float = 0.2, beta: float = 0.04) -> "ClipConfig":
        return cls(eps, eps, beta)


@dataclass
class ObjectiveReport:
    value: float
    gradient: np.ndarray
    diagnostics: dict[str, float]


def group_advantages(rewards, eps_sigma: float = DEFAULT_EPS_SIGMA) -> np.ndarray:
    """``(r - mean) / std`` with the population std; all zeros when std < eps_sigma."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractViolation(f"need a 1-D group of at least 2 rewards, got shape {r.shape}")
    mu = r.mean()
    sigma = np.sqrt(np.mean((r - mu) ** 2))
    if sigma < eps_sigma:
        return np.zeros_like(r)
    return (r - mu) / sigma


def importance_ratio(new_logprob: float, old_logprob: float) -> float:
    return float(np.exp(new_logprob - old_logprob))


def clipped_term(ratio: float, adv: float, eps_low: float, eps_high: float) -> float:
    unclipped = ratio * adv
    clipped = min(max(ratio, 1.0 - eps_low), 1.0 + eps_high) * adv
    return unclipped if unclipped <= clipped else clipped


def token_kl(pi_new, pi_ref) -> float:
    p = np.asarray(pi_new, dtype=np.float64)
    q = np.asarray(pi_ref, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractViolation("distributions must share a vocabulary")
    support = p > 0
    if np.any(q[support] <= 0):
        raise UndefinedKLError("reference has zero mass where the new policy does not")
    return float(max(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))), 0.0))


def dynamic_sampling_filter(groups: list[RolloutGroup]) -> tuple[list[RolloutGroup], list[RolloutGroup]]:
    """Keep groups whose number of correct responses lies strictly between 0 and G."""
    kept, dropped = [], []
    for g in groups:
        (kept if 0 < g.n_correct() < g.G else dropped).append(g)
    return kept, dropped


def _flatten(groups: list[RolloutGroup], params: PolicyParams):
    fmap = params.fmap
    phis, ids, old, adv, lens = [], [], [], [], []
    for gi, g in enumerate(groups):
        if g.advantages is None:
            raise ContractViolation(f"group {gi} has no advantages")
        for i, seq in enumerate(g.responses):
            phi = g.features[i] if g.features is not None else fmap.sequence_features(g.prompt, seq)
            phis.append(phi)
            ids.append(np.asarray(seq.ids, dtype=np.int64))
            old.append(g.old_logprobs[i])
            adv.append(np.full(len(seq), g.advantages[i]))
            lens.append(len(seq))
    return (
        np.concatenate(phis),
        np.concatenate(ids),
        np.concatenate(old),
        np.concatenate(adv),
        np.asarray(lens),
    )


def _clipped_surrogate(
    groups: list[RolloutGroup],
    params: PolicyParams,
    token_weights: np.ndarray,
    eps_low: float,
    eps_high: float,
    beta: float,
    ref_params: PolicyParams | None,
) -> ObjectiveReport:
    phi, ids, old, adv, _ = _flatten(groups, params)
    T = ids.size
    rows = np.arange(T)
    logp = token_log_distribution(params, phi)
    p = np.exp(logp)
    new = logp[rows, ids]

    ratio = np.exp(new - old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv
    # ties go to the unclipped branch, which carries the gradient
    use_unclipped = unclipped <= clipped
    term = np.where(use_unclipped, unclipped, clipped)
    dterm = np.where(use_unclipped, unclipped, 0.0)

    coef = -p * dterm[:, None]
    coef[rows, ids] += dterm

    kl = np.zeros(T)
    if ref_params is not None:
        diff = logp - token_log_distribution(ref_params, phi)
        kl = np.maximum((p * diff).sum(axis=1), 0.0)
        if beta:
            coef -= beta * p * (diff - kl[:, None])

    value = float(np.sum(token_weights * (term - beta * kl)))
    grad = np.einsum("tv,td->vd", coef * token_weights[:, None], phi)
    if not np.all(np.isfinite(grad)):
        raise NumericalOverflowError("non-finite objective gradient")

    rewards = [r for g in groups if g.rewards is not None for r in g.rewards]
    diagnostics = {
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(~use_unclipped)),
        "mean_kl": float(kl.mean()),
        "mean_entropy": float(-(p * logp).sum(axis=1).mean()),
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "n_tokens": float(T),
    }
    return ObjectiveReport(value, grad, diagnostics)


def grpo_objective(
    groups: list[RolloutGroup],
    params: PolicyParams,
    ref_params: PolicyParams,
    cfg: ClipConfig,
) -> ObjectiveReport:
    """Sequence-averaged, group-averaged clipped surrogate minus ``beta`` * exact per-token KL."""
    if not groups:
        raise ContractViolation("grpo_objective needs at least one group")
    weights = []
    for g in groups:
        for seq in g.responses:
            weights.append(np.full(len(seq), 1.0 / (len(groups) * g.G * len(seq))))
    return _clipped_surrogate(
        groups, params, np.concatenate(weights), cfg.eps_low, cfg.eps_high, cfg.beta, ref_params
    )


def dapo_objective(
    groups: list[RolloutGroup],
    params: PolicyParams,
    cfg: ClipConfig,
    ref_params: PolicyParams | None = None,
) -> ObjectiveReport:
    """Token-level normalised clipped surrogate with decoupled clip bounds and no KL penalty.

    ``ref_params`` is only used to report a KL diagnostic.
    """
    if not groups:
        raise ContractViolation("dapo_objective needs at least one group")
    weights = []
    for gi, g in enumerate(groups):
        c = g.n_correct()
        if not 0 < c < g.G:
            raise ContractViolation(f"group {gi} has {c}/{g.G} correct responses; it must be filtered out")
        total = sum(len(s) for s in g.responses)
        weights.append(np.full(total, 1.0 / (len(groups) * total)))
    return _clipped_surrogate(
        groups, params, np.concatenate(weights), cfg.eps_low, cfg.eps_high, 0.0, ref_params
    )
