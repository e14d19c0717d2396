"""GRPO / DAPO training loop for the toy policy."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .checkpoint import params_digest
from .env import McqItem, generate_dataset, is_equivalent
from .errors import ConfigError, ContractViolation, NumericalOverflowError
from .policy import (
    ANS_CLOSE,
    ANS_OPEN,
    EOS,
    FIRST_OPTION,
    OPTION_LETTERS,
    THINK_CLOSE,
    THINK_OPEN,
    FeatureMap,
    PolicyParams,
    TokenSeq,
    Vocabulary,
    logits,
    rollout_rng,
    sample_rollouts,
    greedy_sequence,
)
from .rewards import format_reward, get_combiner, score_response
from .rlcore import (
    ClipConfig,
    RolloutGroup,
    dapo_objective,
    dynamic_sampling_filter,
    group_advantages,
    grpo_objective,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("GRPO", "DAPO")
OPTIMIZERS = ("sgd", "adam")
INITS = ("format_prior", "zero")
DAPO_EPS_HIGH = 0.28
_EVAL_STREAM = 0xE7A1
_ORDER_STREAM = 0x0DE5

# Settings used for 3B/7B vision-language models on a 10k-item MCQ set.
# They are kept for reference; the toy defaults below are what actually trains.
FULL_SCALE_DEFAULTS = {
    "GRPO": {"learning_rate": 1e-6, "generation_batch": 256, "epochs": 5, "dataset_size": 10000},
    "DAPO": {"learning_rate": 1e-6, "generation_batch": 256, "train_batch": 128, "epochs": 3,
             "dataset_size": 10000},
}
CRITIC_LEARNING_RATE = 1e-5  # documented only; both objectives are critic-free


@dataclass
class TrainConfig:
    algorithm: str = "GRPO"
    G: int = 8
    generation_batch: int = 32
    train_batch: int = 16
    epochs: int = 5
    opt_epochs_per_batch: int = 1
    learning_rate: float = 15.0
    optimizer: str = "sgd"
    eps_low: float = 0.2
    # None: equal to eps_low for GRPO, 0.28 for DAPO
    eps_high: float | None = None
    beta: float = 0.04
    L_hard: int = 12
    L_max: int = 12
    L_cache: int = 6
    seed: int = 0
    eps_sigma: float = 1e-8
    max_refill_rounds: int = 4
    vocab_size: int = 16
    prompt_len: int = 10
    dataset_size: int = 3200
    init: str = "format_prior"
    prior_strength: float = 3.0
    workers: int = 1

    def __post_init__(self):
        self.algorithm = str(self.algorithm).upper()
        self.optimizer = str(self.optimizer).lower()
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"must be one of {ALGORITHMS}")
        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"must be one of {OPTIMIZERS}")
        if self.init not in INITS:
            bad("init", f"must be one of {INITS}")
        if self.G < 2:
            bad("G", "must be >= 2")
        if self.generation_batch < 1:
            bad("generation_batch", "must be >= 1")
        if not 1 <= self.train_batch <= self.generation_batch:
            bad("train_batch", "must be in [1, generation_batch]")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if self.opt_epochs_per_batch < 1:
            bad("opt_epochs_per_batch", "must be >= 1")
        if not (self.learning_rate >= 0 and np.isfinite(self.learning_rate)):
            bad("learning_rate", "must be finite and >= 0")
        if not 0 < self.eps_low < 1:
            bad("eps_low", "must be in (0, 1)")
        if self.eps_high is not None and self.eps_high <= 0:
            bad("eps_high", "must be > 0")
        if self.algorithm == "GRPO" and self.eps_high is not None and self.eps_high != self.eps_low:
            bad("eps_high", "GRPO clips symmetrically; eps_high must equal eps_low")
        if self.beta < 0:
            bad("beta", "must be >= 0")
        if not 0 < self.L_cache < self.L_max <= self.L_hard:
            raise ConfigError(
                f"L_cache/L_max/L_hard: need 0 < L_cache < L_max <= L_hard "
                f"(got {self.L_cache}, {self.L_max}, {self.L_hard})"
            )
        if self.eps_sigma <= 0:
            bad("eps_sigma", "must be > 0")
        if self.max_refill_rounds < 0:
            bad("max_refill_rounds", "must be >= 0")
        if self.vocab_size < FIRST_OPTION + len(OPTION_LETTERS):
            bad("vocab_size", f"must be >= {FIRST_OPTION + len(OPTION_LETTERS)}")
        if self.prompt_len < 3:
            bad("prompt_len", "must be >= 3")
        if self.dataset_size < 1:
            bad("dataset_size", "must be >= 1")
        if self.workers < 1:
            bad("workers", "must be >= 1")

    @property
    def clip(self) -> ClipConfig:
        if self.algorithm == "GRPO":
            return ClipConfig.symmetric(self.eps_low, self.beta)
        eps_high = DAPO_EPS_HIGH if self.eps_high is None else self.eps_high
        return ClipConfig(self.eps_low, eps_high, self.beta)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            kwargs[name] = _coerce(name, known[name].type, value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def _coerce(name: str, annotation: str, value):
    kind = str(annotation)
    if value is None and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind.startswith("str"):
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind}, got {value!r}") from None
    return value


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a flat key-value object")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: nested values are not allowed")
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    accuracy_rate: float
    format_rate: float
    mean_kl: float
    clip_fraction: float
    mean_entropy: float
    kept_groups: int
    dropped_groups: int
    wall_ms: float = 0.0


# wall_ms is excluded so that logs from identical runs are byte-identical
METRICS_COLUMNS = [f.name for f in fields(StepMetrics) if f.name != "wall_ms"]


def write_metrics(metrics: list[StepMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in metrics:
            w.writerow([repr(getattr(m, c)) for c in METRICS_COLUMNS])


def read_metrics(path: str | Path) -> list[StepMetrics]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_COLUMNS:
            raise ContractViolation(f"unexpected metrics columns {header}")
        for row in reader:
            vals = dict(zip(header, row))
            out.append(StepMetrics(**{
                k: (int(v) if k in ("step", "kept_groups", "dropped_groups") else float(v))
                for k, v in vals.items()
            }))
    return out


def write_timing(metrics: list[StepMetrics], path: str | Path) -> None:
    with open(path, "w") as f:
        f.write("step,wall_ms\n")
        for m in metrics:
            f.write(f"{m.step},{m.wall_ms:.3f}\n")


class TrainingDiverged(NumericalOverflowError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def make_feature_map(config: TrainConfig) -> FeatureMap:
    return FeatureMap(Vocabulary.with_size(config.vocab_size), config.L_hard)


def format_prior(fmap: FeatureMap, strength: float) -> PolicyParams:
    """Weights that favour the ``<think></think><answer>X</answer><eos>`` template.

    Every option letter gets the same weight, so the answer itself is uniform.
    Stands in for the supervised warm start that precedes RL.
    """
    W = np.zeros((fmap.V, fmap.dim))
    last = fmap.last_offset
    W[THINK_OPEN, fmap.bucket_offset + fmap.bucket(0)] = strength
    W[THINK_CLOSE, last + THINK_OPEN] = 2 * strength
    W[ANS_OPEN, last + THINK_CLOSE] = 2 * strength
    W[FIRST_OPTION:FIRST_OPTION + len(OPTION_LETTERS), last + ANS_OPEN] = 2 * strength
    for k in range(len(OPTION_LETTERS)):
        W[ANS_CLOSE, last + FIRST_OPTION + k] = 2 * strength
    W[EOS, last + ANS_CLOSE] = 2 * strength
    return PolicyParams(fmap, W)


def initial_params(config: TrainConfig) -> PolicyParams:
    fmap = make_feature_map(config)
    if config.init == "zero":
        return PolicyParams.zeros(fmap)
    return format_prior(fmap, config.prior_strength)


class Optimizer:
    """Gradient *ascent* with plain steps or adaptive moments."""

    def __init__(self, kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return weights + self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return weights + self.lr * mhat / (np.sqrt(vhat) + self.eps)


class PromptStream:
    """Endless prompt iterator: a fresh seeded shuffle of the dataset per pass."""

    def __init__(self, dataset: list[McqItem], seed: int):
        self.dataset = dataset
        self.seed = seed
        self.drawn = 0
        self._it = self._gen()

    def _gen(self) -> Iterator[McqItem]:
        n_pass = 0
        while True:
            order = np.random.default_rng([self.seed, _ORDER_STREAM, n_pass]).permutation(len(self.dataset))
            for i in order:
                yield self.dataset[int(i)]
            n_pass += 1

    def take(self, n: int) -> tuple[int, list[McqItem]]:
        start = self.drawn
        self.drawn += n
        return start, [next(self._it) for _ in range(n)]


def collect_groups(
    params: PolicyParams,
    items: list[McqItem],
    first_prompt_index: int,
    config: TrainConfig,
) -> list[RolloutGroup]:
    """Sample G responses per item under ``params`` and score them."""
    G = config.G
    combiner = get_combiner(config.algorithm)
    prompts = [it.prompt for it in items for _ in range(G)]
    rngs = [rollout_rng(config.seed, first_prompt_index + i, j) for i in range(len(items)) for j in range(G)]
    rollouts = sample_rollouts(params, prompts, rngs, workers=config.workers)
    groups = []
    for i, it in enumerate(items):
        rs = rollouts[i * G:(i + 1) * G]
        breakdowns = [score_response(r.seq, it.answer, combiner, config.L_max, config.L_cache) for r in rs]
        rewards = np.array([b.combined for b in breakdowns])
        groups.append(RolloutGroup(
            prompt=it.prompt,
            responses=[r.seq for r in rs],
            old_logprobs=[r.logprobs for r in rs],
            ground_truth=it.answer,
            rewards=rewards,
            advantages=group_advantages(rewards, config.eps_sigma),
            breakdowns=breakdowns,
            features=[r.features for r in rs],
        ))
    return groups


def run_training(
    config: TrainConfig,
    dataset: list[McqItem],
    init: PolicyParams | None = None,
    on_update: Callable[[StepMetrics, PolicyParams], bool | None] | None = None,
) -> tuple[PolicyParams, list[StepMetrics]]:
    """Run ``epochs * len(dataset) // generation_batch`` outer steps.

    ``on_update`` is called after every parameter update; returning True stops
    training early.
    """
    if not dataset:
        raise ContractViolation("dataset must be nonempty")
    config.validate()
    params = init.copy() if init is not None else initial_params(config)
    if params.fmap != make_feature_map(config):
        raise ContractViolation("initial params do not match the configured vocabulary / L_hard")
    ref = params.copy()
    ref.weights.setflags(write=False)
    ref_digest = params_digest(ref)
    clip = config.clip
    opt = Optimizer(config.optimizer, config.learning_rate)
    stream = PromptStream(dataset, config.seed)
    n_steps = config.epochs * max(1, len(dataset) // config.generation_batch)
    metrics: list[StepMetrics] = []

    for step in range(n_steps):
        try:
            params, stop = _outer_step(step, params, ref, clip, opt, stream, config, metrics, on_update)
        except TrainingDiverged:
            raise
        except NumericalOverflowError as e:
            raise TrainingDiverged(f"step {step}: {e}", {
                "step": step,
                "max_abs_weight": float(np.max(np.abs(params.weights))),
                "last_metrics": dataclasses.asdict(metrics[-1]) if metrics else None,
            }) from e
        if stop:
            break

    assert params_digest(ref) == ref_digest, "reference policy was modified"
    return params, metrics


def _outer_step(step, params, ref, clip, opt, stream, config, metrics, on_update):
    """One sample / filter / update cycle.  Returns ``(params, stop_requested)``."""
    t0 = time.perf_counter()
    old = params.copy()
    start, items = stream.take(config.generation_batch)
    generated = collect_groups(old, items, start, config)
    if config.algorithm == "DAPO":
        kept, dropped = dynamic_sampling_filter(generated)
        rounds = 0
        while len(kept) < config.train_batch and rounds < config.max_refill_rounds:
            rounds += 1
            start, items = stream.take(config.generation_batch)
            more = collect_groups(old, items, start, config)
            generated += more
            k, d = dynamic_sampling_filter(more)
            kept += k
            dropped += d
        batch = kept[:config.train_batch]
        if not batch:
            log.warning("step %d: no group passed dynamic sampling after %d refills; skipped", step, rounds)
            return params, False
    else:
        kept, dropped = generated, []
        batch = generated

    bds = [b for g in generated for b in g.breakdowns]
    acc_rate = float(np.mean([b.acc for b in bds]))
    fmt_rate = float(np.mean([b.fmt for b in bds]))
    mean_reward = float(np.mean([b.combined for b in bds]))

    for _ in range(config.opt_epochs_per_batch):
        if config.algorithm == "GRPO":
            report = grpo_objective(batch, params, ref, clip)
        else:
            report = dapo_objective(batch, params, clip, ref_params=ref)
        diag = report.diagnostics
        if not np.isfinite(report.value):
            raise TrainingDiverged(f"non-finite objective at step {step}", {"step": step, **diag})
        new_weights = opt.step(params.weights, report.gradient)
        if not np.all(np.isfinite(new_weights)):
            raise TrainingDiverged(f"non-finite weights after update at step {step}", {"step": step, **diag})
        params = params.with_weights(new_weights)
        m = StepMetrics(
            step=len(metrics),
            mean_reward=mean_reward,
            accuracy_rate=acc_rate,
            format_rate=fmt_rate,
            mean_kl=diag["mean_kl"],
            clip_fraction=diag["clip_fraction"],
            mean_entropy=diag["mean_entropy"],
            kept_groups=len(kept),
            dropped_groups=len(dropped),
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        metrics.append(m)
        if on_update is not None and on_update(m, params):
            return params, True
    return params, False


def forced_answer_sequence(params: PolicyParams, prompt: TokenSeq, u: float | None) -> TokenSeq:
    """Template response whose only free choice is the option letter.

    The letter is drawn from the policy's distribution restricted to the six
    options (``u`` is the inverse-CDF uniform), or taken greedily when ``u`` is None.
    """
    fmap = params.fmap
    if fmap.L_hard < 6:
        raise ContractViolation("forced decoding needs L_hard >= 6")
    phi = fmap.step_features(fmap.prompt_counts(prompt), ANS_OPEN, 3)
    z = logits(params.weights, phi)[FIRST_OPTION:FIRST_OPTION + len(OPTION_LETTERS)]
    if u is None:
        k = int(np.argmax(z))
    else:
        p = np.exp(z - z.max())
        cdf = np.cumsum(p / p.sum())
        k = min(int((cdf <= u).sum()), len(OPTION_LETTERS) - 1)
    return TokenSeq((THINK_OPEN, THINK_CLOSE, ANS_OPEN, FIRST_OPTION + k, ANS_CLOSE, EOS), terminated=True)


def decode_responses(
    params: PolicyParams,
    items: list[McqItem],
    mode: str = "sampled",
    forced: bool = False,
    seed: int = 0,
) -> list[TokenSeq]:
    if mode not in ("sampled", "greedy"):
        raise ContractViolation(f"unknown decoding mode {mode!r}")
    if forced:
        if mode == "greedy":
            return [forced_answer_sequence(params, it.prompt, None) for it in items]
        us = [np.random.default_rng([seed, _EVAL_STREAM, i]).random() for i in range(len(items))]
        return [forced_answer_sequence(params, it.prompt, u) for it, u in zip(items, us)]
    if mode == "greedy":
        return [greedy_sequence(params, it.prompt) for it in items]
    rngs = [np.random.default_rng([seed, _EVAL_STREAM, i]) for i in range(len(items))]
    return [r.seq for r in sample_rollouts(params, [it.prompt for it in items], rngs)]


def evaluate(
    params: PolicyParams,
    items: list[McqItem],
    mode: str = "sampled",
    forced: bool = False,
    seed: int = 0,
) -> tuple[float, float]:
    """Return ``(accuracy_rate, format_rate)`` over ``items``.

    ``forced=True`` decodes through the answer template so that only the
    option choice is left to the policy.
    """
    if not items:
        raise ContractViolation("evaluate needs at least one item")
    seqs = decode_responses(params, items, mode, forced, seed)
    acc = np.mean([is_equivalent(it.answer, s) for it, s in zip(items, seqs)])
    fmt = np.mean([format_reward(s) for s in seqs])
    return float(acc), float(fmt)


def toy_dataset(config: TrainConfig) -> list[McqItem]:
    return generate_dataset(config.dataset_size, config.seed, config.prompt_len,
                            Vocabulary.with_size(config.vocab_size))


@dataclass
class ThresholdRun:
    params: PolicyParams
    metrics: list[StepMetrics]
    # (update count, accuracy, format rate) on the monitoring set at every evaluation
    curve: list[tuple[int, float, float]]
    updates_to_threshold: int | None
    seconds: float

    @property
    def updates(self) -> int:
        return len(self.metrics)


def train_to_threshold(
    config: TrainConfig,
    dataset: list[McqItem],
    monitor_items: list[McqItem],
    every: int = 50,
    accuracy: float = 0.9,
    format_rate: float = 0.99,
    overshoot: int = 0,
    eval_seed: int = 0,
) -> ThresholdRun:
    """Train while evaluating sampled decoding on ``monitor_items`` every ``every`` updates.

    The first evaluation meeting both thresholds fixes ``updates_to_threshold``;
    training then continues for ``overshoot`` more updates and stops.
    """
    t0 = time.perf_counter()
    curve: list[tuple[int, float, float]] = []
    hit: list[int] = []

    def check(m: StepMetrics, params: PolicyParams) -> bool:
        n = m.step + 1
        if hit:
            return n >= hit[0] + overshoot
        if n % every:
            return False
        acc, fmt = evaluate(params, monitor_items, "sampled", seed=eval_seed)
        curve.append((n, acc, fmt))
        if acc >= accuracy and fmt >= format_rate:
            hit.append(n)
            return overshoot == 0
        return False

    params, metrics = run_training(config, dataset, on_update=check)
    return ThresholdRun(params, metrics, curve, hit[0] if hit else None, time.perf_counter() - t0)
