"""Verifiable rewards: response format, answer accuracy, overlong penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ConfigError, ContractViolation
from .policy import (
    ANS_CLOSE,
    ANS_OPEN,
    EOS,
    FIRST_OPTION,
    OPTION_LETTERS,
    TAG_IDS,
    THINK_CLOSE,
    THINK_OPEN,
    TokenSeq,
)


@dataclass(frozen=True)
class AnswerExtraction:
    found: bool
    letter: str | None = None

    def __post_init__(self):
        if self.found != (self.letter is not None):
            raise ContractViolation("letter must be present iff found")
        if self.letter is not None and self.letter not in OPTION_LETTERS:
            raise ContractViolation(f"invalid option letter {self.letter!r}")


NOT_FOUND = AnswerExtraction(False)


@dataclass(frozen=True)
class RewardBreakdown:
    fmt: int
    acc: int
    len_penalty: float
    combined: float


def _is_content(token: int) -> bool:
    return token not in TAG_IDS and token != EOS


def format_reward(seq: TokenSeq) -> int:
    """1 iff the response is ``<think> .. </think><answer> .. </answer>`` and nothing else.

    A single trailing EOS is allowed; block contents may be any non-tag,
    non-EOS tokens (including none).
    """
    ids = seq.ids
    if ids and ids[-1] == EOS:
        ids = ids[:-1]
    n = len(ids)
    if n < 4 or ids[0] != THINK_OPEN or ids[-1] != ANS_CLOSE:
        return 0
    i = 1
    while i < n and _is_content(ids[i]):
        i += 1
    if i + 1 >= n or ids[i] != THINK_CLOSE or ids[i + 1] != ANS_OPEN:
        return 0
    i += 2
    while i < n and _is_content(ids[i]):
        i += 1
    return int(i == n - 1)


def extract_answer(seq: TokenSeq) -> AnswerExtraction:
    """Letter inside the first well-formed answer span, if the span is a single option."""
    ids = seq.ids
    start = None
    for i, tok in enumerate(ids):
        if tok == ANS_OPEN:
            start = i
        elif tok == ANS_CLOSE and start is not None:
            body = ids[start + 1:i]
            if len(body) == 1:
                k = body[0] - FIRST_OPTION
                if 0 <= k < len(OPTION_LETTERS):
                    return AnswerExtraction(True, OPTION_LETTERS[k])
            return NOT_FOUND
    return NOT_FOUND


def accuracy_reward(extracted: AnswerExtraction, ground_truth: str) -> int:
    if ground_truth not in OPTION_LETTERS or len(ground_truth) != 1:
        raise ContractViolation(f"ground truth must be one of {OPTION_LETTERS}, got {ground_truth!r}")
    return int(extracted.found and extracted.letter == ground_truth)


def check_length_config(L_max: int, L_cache: int) -> None:
    if not 0 < L_cache < L_max:
        raise ConfigError(f"need 0 < L_cache < L_max, got L_max={L_max}, L_cache={L_cache}")


def length_penalty(length: int, L_max: int, L_cache: int) -> float:
    """Soft overlong punishment: 0, then a linear ramp to -1 over the last ``L_cache`` tokens."""
    check_length_config(L_max, L_cache)
    if length < 0:
        raise ContractViolation("length must be >= 0")
    free = L_max - L_cache
    if length <= free:
        return 0.0
    if length <= L_max:
        return (free - length) / L_cache
    return -1.0


def grpo_combine(fmt: int, acc: int) -> float:
    # 0.1 * fmt + 0.9 * acc on the gated branch; only reachable at fmt = acc = 1.
    if fmt == 1 and acc == 1:
        return 0.1 * fmt + 0.9 * acc
    return 0.0


def dapo_combine(acc: int, len_pen: float) -> float:
    # Gate "length reward = 1" read as "no length violation" (len_pen == 0).
    if acc == 1 and len_pen == 0.0:
        return 0.5 * acc + 0.5 * len_pen
    return -1.0


Combiner = Callable[[int, int, float], float]


def _grpo(fmt: int, acc: int, len_pen: float) -> float:
    return grpo_combine(fmt, acc)


def _dapo(fmt: int, acc: int, len_pen: float) -> float:
    return dapo_combine(acc, len_pen)


COMBINERS: dict[str, Combiner] = {"GRPO": _grpo, "DAPO": _dapo}


def get_combiner(algorithm: str) -> Combiner:
    try:
        return COMBINERS[algorithm.upper()]
    except KeyError:
        raise ConfigError(f"unknown algorithm {algorithm!r}; expected one of {sorted(COMBINERS)}") from None


def score_response(
    seq: TokenSeq,
    ground_truth: str,
    combiner: Combiner,
    L_max: int,
    L_cache: int,
) -> RewardBreakdown:
    fmt = format_reward(seq)
    acc = accuracy_reward(extract_answer(seq), ground_truth)
    pen = length_penalty(len(seq), L_max, L_cache)
    return RewardBreakdown(fmt, acc, pen, combiner(fmt, acc, pen))
