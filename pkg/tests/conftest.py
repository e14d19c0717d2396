import numpy as np
import pytest

from rlpost.policy import FeatureMap, PolicyParams, TokenSeq, Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary.with_size(16)


@pytest.fixture
def fmap(vocab):
    return FeatureMap(vocab, 12)


@pytest.fixture
def random_params(fmap):
    rng = np.random.default_rng(7)
    return PolicyParams(fmap, rng.normal(scale=0.5, size=(fmap.V, fmap.dim)))


def prompt_of(vocab, symbols):
    return TokenSeq(tuple(vocab.symbol_id(s) for s in symbols))


def answer_seq(letter_index: int, think=(), eos=True):
    from rlpost.policy import ANS_CLOSE, ANS_OPEN, EOS, FIRST_OPTION, THINK_CLOSE, THINK_OPEN
    ids = (THINK_OPEN, *think, THINK_CLOSE, ANS_OPEN, FIRST_OPTION + letter_index, ANS_CLOSE)
    return TokenSeq(ids + (EOS,), terminated=True) if eos else TokenSeq(ids)


def make_group(params, prompt, responses, truth="A", rewards=None, advantages=None):
    """Group with old logprobs computed under ``params``."""
    from rlpost.policy import token_logprobs
    from rlpost.rlcore import RolloutGroup, group_advantages
    old = [token_logprobs(params, prompt, s) for s in responses]
    if rewards is None:
        rewards = np.zeros(len(responses))
    rewards = np.asarray(rewards, dtype=float)
    if advantages is None:
        advantages = group_advantages(rewards)
    return RolloutGroup(prompt, list(responses), old, truth, rewards, np.asarray(advantages, dtype=float))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
