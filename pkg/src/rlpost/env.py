"""Synthetic six-option multiple-choice environment.

Each prompt is a bag of ``N`` prompt symbols ``s0..s5``; the correct option is
the letter of the most frequent symbol (``s0 -> A`` ... ``s5 -> F``).  The
generator boosts one designated symbol and redraws until the mode is unique.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError
from .jsonl import read_records, write_records
from .policy import N_PROMPT_SYMBOLS, OPTION_LETTERS, Role, TokenSeq, Vocabulary
from .rewards import extract_answer

STRATA = ("histopathology", "gross", "cytology", "ihc", "fish", "other")
# Relative stratum sizes for generated datasets (last entry is headroom).
STRATUM_WEIGHTS = (5000, 1000, 1900, 1900, 200, 500)
DEFAULT_BOOST = 0.5


@dataclass(frozen=True)
class McqItem:
    id: str
    prompt: TokenSeq
    answer: str
    stratum: str

    def symbol_counts(self, vocab: Vocabulary) -> np.ndarray:
        return np.bincount(np.asarray(self.prompt.ids) - vocab.size, minlength=N_PROMPT_SYMBOLS)


def majority_letter(symbols) -> str | None:
    """Letter of the unique most frequent symbol, or None on a tie."""
    counts = np.bincount(np.asarray(symbols, dtype=np.int64), minlength=N_PROMPT_SYMBOLS)
    top = counts.max()
    if (counts == top).sum() != 1:
        return None
    return OPTION_LETTERS[int(counts.argmax())]


def generate_item(
    rng: np.random.Generator,
    N: int,
    stratum: str,
    vocab: Vocabulary | None = None,
    item_id: str = "mcq",
    boost: float = DEFAULT_BOOST,
) -> McqItem:
    if N < 3:
        raise ContractViolation(f"prompt length N must be >= 3, got {N}")
    vocab = vocab or Vocabulary()
    target = int(rng.integers(N_PROMPT_SYMBOLS))
    probs = np.full(N_PROMPT_SYMBOLS, (1.0 - boost) / (N_PROMPT_SYMBOLS - 1))
    probs[target] = boost
    while True:
        symbols = rng.choice(N_PROMPT_SYMBOLS, size=N, p=probs)
        letter = majority_letter(symbols)
        if letter is not None:
            break
    prompt = TokenSeq(tuple(vocab.symbol_id(int(s)) for s in symbols))
    return McqItem(item_id, prompt, letter, stratum)


def generate_dataset(
    n: int,
    seed: int,
    N: int = 10,
    vocab: Vocabulary | None = None,
    strata: tuple[str, ...] = STRATA,
    weights: tuple[float, ...] = STRATUM_WEIGHTS,
) -> list[McqItem]:
    rng = np.random.default_rng([seed, 0x5EED])
    w = np.asarray(weights, dtype=np.float64)
    labels = rng.choice(len(strata), size=n, p=w / w.sum())
    return [
        generate_item(rng, N, strata[int(labels[i])], vocab, item_id=f"mcq-{i:06d}")
        for i in range(n)
    ]


def is_equivalent(answer: str, response: TokenSeq) -> bool:
    ex = extract_answer(response)
    return ex.found and ex.letter == answer


def item_to_record(item: McqItem, vocab: Vocabulary) -> dict:
    return {
        "id": item.id,
        "prompt": vocab.decode(item.prompt.ids),
        "answer": item.answer,
        "stratum": item.stratum,
    }


def item_from_record(rec: dict, vocab: Vocabulary, lineno: int | None = None) -> McqItem:
    try:
        prompt = TokenSeq(vocab.encode(rec["prompt"]))
        item = McqItem(str(rec["id"]), prompt, str(rec["answer"]), str(rec["stratum"]))
    except KeyError as e:
        raise ParseError(f"missing field {e.args[0]!r}", lineno) from None
    except (ContractViolation, TypeError) as e:
        raise ParseError(str(e), lineno) from None
    if item.answer not in OPTION_LETTERS or len(item.answer) != 1:
        raise ParseError(f"invalid answer {item.answer!r}", lineno)
    if not prompt.ids or any(vocab.role(i)[0] is not Role.PROMPT_SYMBOL for i in prompt.ids):
        raise ParseError("prompt must be a nonempty list of prompt symbols", lineno)
    return item


def save_dataset(items: list[McqItem], path: str | Path, vocab: Vocabulary | None = None) -> None:
    vocab = vocab or Vocabulary()
    write_records(path, (item_to_record(it, vocab) for it in items))


def load_dataset(path: str | Path, vocab: Vocabulary | None = None) -> list[McqItem]:
    vocab = vocab or Vocabulary()
    return [item_from_record(rec, vocab, n) for n, rec in read_records(path)]


def dataset_roundtrip(items: list[McqItem], path: str | Path, vocab: Vocabulary | None = None) -> list[McqItem]:
    save_dataset(items, path, vocab)
    return load_dataset(path, vocab)
