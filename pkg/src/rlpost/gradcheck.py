"""Central-difference checks of the analytic policy and objective gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import (
    ANS_CLOSE,
    ANS_OPEN,
    FIRST_OPTION,
    OPTION_LETTERS,
    THINK_CLOSE,
    THINK_OPEN,
    FeatureMap,
    PolicyParams,
    TokenSeq,
    Vocabulary,
    grad_log_prob,
    sequence_logprob,
    token_logprobs,
)
from .rlcore import ClipConfig, RolloutGroup, dapo_objective, grpo_objective

FD_STEP = 1e-5
KINK_MARGIN = 1e-3
TOLERANCE = 1e-5


def central_difference(f: Callable[[np.ndarray], float], W: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp = W.copy()
        Wm = W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        grad[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _random_fmap(rng: np.random.Generator) -> FeatureMap:
    V = int(rng.integers(FIRST_OPTION + len(OPTION_LETTERS), 17))
    return FeatureMap(Vocabulary.with_size(V), int(rng.integers(6, 13)))


def _random_params(fmap: FeatureMap, rng: np.random.Generator, scale: float = 0.7) -> PolicyParams:
    return PolicyParams(fmap, rng.normal(scale=scale, size=(fmap.V, fmap.dim)))


def _random_prompt(fmap: FeatureMap, rng: np.random.Generator) -> TokenSeq:
    n = int(rng.integers(3, 11))
    return TokenSeq(tuple(fmap.vocab.symbol_id(int(s)) for s in rng.integers(0, 6, size=n)))


def _random_seq(fmap: FeatureMap, rng: np.random.Generator, max_len: int | None = None) -> TokenSeq:
    n = int(rng.integers(1, (max_len or fmap.L_hard) + 1))
    ids = tuple(int(t) for t in rng.integers(1, fmap.V, size=n))
    return TokenSeq(ids)


def _answer_seq(letter_id: int) -> TokenSeq:
    return TokenSeq((THINK_OPEN, THINK_CLOSE, ANS_OPEN, letter_id, ANS_CLOSE))


def random_logprob_instance(rng: np.random.Generator):
    fmap = _random_fmap(rng)
    return _random_params(fmap, rng), _random_prompt(fmap, rng), _random_seq(fmap, rng)


def random_groups(
    rng: np.random.Generator,
    fmap: FeatureMap,
    old: PolicyParams,
    n_groups: int,
    mixed: bool,
) -> list[RolloutGroup]:
    groups = []
    for _ in range(n_groups):
        G = int(rng.integers(2, 9))
        prompt = _random_prompt(fmap, rng)
        truth = int(rng.integers(len(OPTION_LETTERS)))
        responses = [_random_seq(fmap, rng) for _ in range(G)]
        if mixed:
            responses[0] = _answer_seq(FIRST_OPTION + truth)
            responses[1] = _answer_seq(FIRST_OPTION + (truth + 1) % len(OPTION_LETTERS))
        old_lp = [token_logprobs(old, prompt, s) for s in responses]
        groups.append(RolloutGroup(
            prompt=prompt,
            responses=responses,
            old_logprobs=old_lp,
            ground_truth=OPTION_LETTERS[truth],
            rewards=rng.normal(size=G),
            advantages=rng.normal(size=G),
        ))
    return groups


def near_kink(groups: list[RolloutGroup], params: PolicyParams, cfg: ClipConfig, margin: float = KINK_MARGIN) -> bool:
    for g in groups:
        for seq, old in zip(g.responses, g.old_logprobs):
            ratio = np.exp(token_logprobs(params, g.prompt, seq) - old)
            for bound in (1 - cfg.eps_low, 1 + cfg.eps_high):
                if np.any(np.abs(ratio - bound) < margin):
                    return True
    return False


@dataclass
class ObjectiveInstance:
    groups: list[RolloutGroup]
    params: PolicyParams
    ref: PolicyParams
    cfg: ClipConfig


def random_objective_instance(rng: np.random.Generator, algorithm: str) -> ObjectiveInstance:
    """Draw groups sampled under a perturbed old policy, rejecting draws near a clip kink."""
    while True:
        fmap = _random_fmap(rng)
        params = _random_params(fmap, rng)
        old = params.with_weights(params.weights + rng.normal(scale=0.05, size=params.weights.shape))
        ref = _random_params(fmap, rng)
        if algorithm == "GRPO":
            cfg = ClipConfig.symmetric(0.2, float(rng.uniform(0.01, 0.2)))
        else:
            cfg = ClipConfig(0.2, 0.28, 0.0)
        groups = random_groups(rng, fmap, old, int(rng.integers(1, 3)), mixed=algorithm == "DAPO")
        if not near_kink(groups, params, cfg):
            return ObjectiveInstance(groups, params, ref, cfg)


def objective_fn(inst: ObjectiveInstance, algorithm: str):
    def f(W: np.ndarray):
        p = inst.params.with_weights(W)
        if algorithm == "GRPO":
            return grpo_objective(inst.groups, p, inst.ref, inst.cfg)
        return dapo_objective(inst.groups, p, inst.cfg)
    return f


def check_logprob(rng: np.random.Generator, corrupt: bool = False) -> float:
    params, prompt, seq = random_logprob_instance(rng)
    analytic = grad_log_prob(params, prompt, seq)
    if corrupt:
        analytic = analytic * 1.01
    numeric = central_difference(lambda W: sequence_logprob(params.with_weights(W), prompt, seq), params.weights)
    return relative_error(analytic, numeric)


def check_objective(rng: np.random.Generator, algorithm: str, corrupt: bool = False) -> float:
    inst = random_objective_instance(rng, algorithm)
    f = objective_fn(inst, algorithm)
    analytic = f(inst.params.weights).gradient
    if corrupt:
        analytic = analytic * 1.01
    numeric = central_difference(lambda W: f(W).value, inst.params.weights)
    return relative_error(analytic, numeric)


def run_gradcheck(seed: int = 0, instances: int = 20, corrupt: bool = False) -> dict[str, float]:
    """Max relative error over ``instances`` random draws for each gradient."""
    if instances < 1:
        raise ValueError("instances must be >= 1")
    rng = np.random.default_rng(seed)
    report = {}
    report["log_prob"] = max(check_logprob(rng, corrupt) for _ in range(instances))
    report["grpo_objective"] = max(check_objective(rng, "GRPO", corrupt) for _ in range(instances))
    report["dapo_objective"] = max(check_objective(rng, "DAPO", corrupt) for _ in range(instances))
    return report
