"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into the "acceptance criteria" section of the terminal summary.
"""

import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, answer_seq, make_group, prompt_of
from oracles import all_sequences, as_chars, oracle_format, oracle_letter
from rlpost import checkpoint
from rlpost.corpus import (
    dedup_by_prefix,
    detect_repetition,
    kmeans3,
    parse_multipanel_caption,
    proportional_quotas,
    stratified_sample,
)
from rlpost.corpus.records import CaptionRecord
from rlpost.env import dataset_roundtrip, generate_dataset, load_dataset
from rlpost.errors import IntegrityError, ParseError
from rlpost.gradcheck import TOLERANCE, run_gradcheck
from rlpost.policy import FIRST_FILLER, FeatureMap, PolicyParams, TokenSeq, Vocabulary, grad_log_prob
from rlpost.rewards import (
    AnswerExtraction,
    NOT_FOUND,
    accuracy_reward,
    dapo_combine,
    extract_answer,
    format_reward,
    grpo_combine,
    length_penalty,
)
from rlpost.rlcore import ClipConfig, RolloutGroup, dapo_objective, dynamic_sampling_filter, group_advantages, grpo_objective
from rlpost.trainer import (
    TrainConfig,
    evaluate,
    initial_params,
    run_training,
    toy_dataset,
    train_to_threshold,
    write_metrics,
)

SEEDS = range(5)
MAX_UPDATES = 5000
OVERSHOOT = 100


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_reward_truth_tables():
    t0 = time.perf_counter()
    grpo_ok = all(
        grpo_combine(f, a) == (1.0 if (f, a) == (1, 1) else 0.0) for f in (0, 1) for a in (0, 1)
    )
    pens = [0.0, -0.0, -1e-12, -0.25, -0.5, -1.0]
    dapo_ok = all(
        dapo_combine(a, p) == (0.5 if (a == 1 and p == 0) else -1.0) for a in (0, 1) for p in pens
    )
    mismatches = 0
    n = 0
    for ids in all_sequences(6):
        chars = as_chars(ids)
        seq = TokenSeq(ids)
        letter = oracle_letter(chars)
        ex = extract_answer(seq)
        if format_reward(seq) != oracle_format(chars):
            mismatches += 1
        if ex != (AnswerExtraction(True, letter) if letter else NOT_FOUND):
            mismatches += 1
        if any(accuracy_reward(ex, t) != int(letter == t) for t in "AB"):
            mismatches += 1
        n += 1
    elapsed = time.perf_counter() - t0
    report(1, grpo_ok and dapo_ok and mismatches == 0 and elapsed < 10,
           f"combiner tables exact={grpo_ok and dapo_ok}; {n} sequences, {mismatches} grammar mismatches; "
           f"{elapsed:.1f}s (< 10s)")


def test_criterion_02_length_penalty():
    cases = {80: 0.0, 100: -1.0, 90: -0.5, 101: -1.0, 150: -1.0}
    got = {n: length_penalty(n, 100, 20) for n in cases}
    report(2, got == cases, f"(L_max, L_cache)=(100, 20): {got}")


def test_criterion_03_advantage_normalisation():
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    done = 0
    while done < 1000:
        G = int(rng.integers(2, 17))
        r = rng.normal(size=G) * rng.uniform(0.01, 10) + rng.uniform(-5, 5)
        if rng.random() < 0.3:
            r = rng.integers(0, 2, size=G).astype(float)
        if np.std(r) < 1e-8:
            continue
        a = group_advantages(r)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1))
        done += 1
    degenerate_ok = all(
        np.all(group_advantages(np.full(G, c)) == 0) for G in range(2, 17) for c in (0.0, 1.0, -0.7)
    )
    report(3, worst_mean <= 1e-9 and worst_std <= 1e-9 and degenerate_ok,
           f"1000 groups: max|mean|={worst_mean:.1e}, max|std-1|={worst_std:.1e}; degenerate -> zeros: {degenerate_ok}")


def test_criterion_04_gradient_correctness():
    t0 = time.perf_counter()
    errs = run_gradcheck(seed=0, instances=20)
    elapsed = time.perf_counter() - t0
    ok = all(e <= TOLERANCE for e in errs.values()) and elapsed < 120
    report(4, ok, "max rel. error over 20 instances: "
           + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f"; {elapsed:.0f}s (< 120s)")


def test_criterion_05_ratio_one_reduction():
    rng = np.random.default_rng(5)
    worst = 0.0
    clip_fracs = []
    for _ in range(20):
        V = int(rng.integers(11, 17))
        fmap = FeatureMap(Vocabulary.with_size(V), int(rng.integers(6, 13)))
        params = PolicyParams(fmap, rng.normal(scale=0.7, size=(fmap.V, fmap.dim)))
        groups = []
        for _ in range(int(rng.integers(1, 4))):
            G = int(rng.integers(2, 9))
            prompt = prompt_of(fmap.vocab, rng.integers(0, 6, size=int(rng.integers(3, 11))))
            responses = [TokenSeq(tuple(int(t) for t in rng.integers(1, V, size=int(rng.integers(1, fmap.L_hard + 1)))))
                         for _ in range(G)]
            groups.append(make_group(params, prompt, responses, rewards=rng.normal(size=G)))
        rep = grpo_objective(groups, params, params, ClipConfig.symmetric(0.2, 0.0))
        reinforce = sum(
            a * grad_log_prob(params, g.prompt, s) / (len(s) * g.G * len(groups))
            for g in groups for a, s in zip(g.advantages, g.responses)
        )
        worst = max(worst, float(np.max(np.abs(rep.gradient - reinforce))))
        clip_fracs.append(rep.diagnostics["clip_fraction"])
    report(5, worst <= 1e-10 and max(clip_fracs) == 0.0,
           f"max |grad - REINFORCE| = {worst:.1e} (<= 1e-10); max clipped-token fraction = {max(clip_fracs)}")


def test_criterion_06_dynamic_sampling():
    rng = np.random.default_rng(6)
    vocab = Vocabulary.with_size(16)
    prompt = prompt_of(vocab, [0, 1, 2])
    pool = [answer_seq(0), answer_seq(1), answer_seq(2, think=(FIRST_FILLER,)),
            TokenSeq((FIRST_FILLER, FIRST_FILLER)), answer_seq(0, think=(FIRST_FILLER, FIRST_FILLER))]
    groups = []
    for _ in range(10_000):
        G = int(rng.integers(2, 9))
        picks = [pool[int(k)] for k in rng.integers(0, len(pool), size=G)]
        if rng.random() < 0.3:
            picks = [pool[int(rng.choice([0, 4]))]] * G if rng.random() < 0.5 else [pool[1]] * G
        groups.append(RolloutGroup(prompt, picks, [np.zeros(len(s)) for s in picks], "A"))
    kept, dropped = dynamic_sampling_filter(groups)
    kept_ok = all(0 < g.n_correct() < g.G for g in kept)
    dropped_ok = all(g.n_correct() in (0, g.G) for g in dropped)
    kept_ids, dropped_ids = {id(g) for g in kept}, {id(g) for g in dropped}
    partition_ok = (len(kept) + len(dropped) == len(groups) and not kept_ids & dropped_ids
                    and [g for g in groups if id(g) in kept_ids] == kept)

    fmap = FeatureMap(vocab, 12)
    params = PolicyParams(fmap, rng.normal(scale=0.5, size=(fmap.V, fmap.dim)))
    worst = 0.0
    for _ in range(200):
        G = int(rng.integers(2, 9))
        letters = rng.integers(0, 6, size=G)
        letters[0], letters[1] = 0, 1  # one correct, one wrong
        g = make_group(params, prompt_of(vocab, rng.integers(0, 6, size=10)),
                       [answer_seq(int(k)) for k in letters], "A", rewards=(letters == 0).astype(float))
        d = dapo_objective([g], params, ClipConfig(0.2, 0.28, 0.0))
        r = grpo_objective([g], params, params, ClipConfig.symmetric(0.2, 0.0))
        worst = max(worst, abs(d.value - r.value), float(np.max(np.abs(d.gradient - r.gradient))))
    report(6, kept_ok and dropped_ok and partition_ok and worst <= 1e-10,
           f"10000 groups: kept={len(kept)} all 0<correct<G={kept_ok}, dropped={len(dropped)} complement={dropped_ok}, "
           f"order-preserving partition={partition_ok}; |DAPO-GRPO| equal lengths = {worst:.1e}")


def _end_to_end(algorithm: str):
    runs = []
    for seed in SEEDS:
        cfg = TrainConfig(algorithm=algorithm, seed=seed, epochs=MAX_UPDATES // 100)
        train = toy_dataset(cfg)
        monitor = generate_dataset(1000, 10_000 + seed)
        final_items = generate_dataset(2000, 20_000 + seed)
        init = initial_params(cfg)
        base_items = generate_dataset(10_000, 30_000 + seed)
        # chance level is measured with forced-valid decoding; free decoding is reported alongside
        base_forced = evaluate(init, base_items, forced=True, seed=seed)[0]
        base_free = evaluate(init, base_items[:2000], seed=seed)
        run = train_to_threshold(cfg, train, monitor, overshoot=OVERSHOOT, eval_seed=seed)
        acc, fmt = evaluate(run.params, final_items, "sampled", seed=50_000 + seed)
        runs.append(dict(seed=seed, baseline=base_forced, free=base_free, hit=run.updates_to_threshold,
                         updates=run.updates, acc=acc, fmt=fmt, seconds=run.seconds))
    return runs


@pytest.mark.parametrize("algorithm", ["GRPO", "DAPO"])
def test_criterion_07_end_to_end_learning(algorithm):
    runs = _end_to_end(algorithm)
    med_base = statistics.median(r["baseline"] for r in runs)
    med_acc = statistics.median(r["acc"] for r in runs)
    med_fmt = statistics.median(r["fmt"] for r in runs)
    hits = [r["hit"] for r in runs]
    reached = [h for h in hits if h is not None]
    med_hit = statistics.median(reached) if len(reached) > len(runs) // 2 else None
    slowest = max(r["seconds"] for r in runs)
    for r in runs:
        print(f"  {algorithm} seed {r['seed']}: baseline {r['baseline']:.3f} (free decoding acc "
              f"{r['free'][0]:.3f} fmt {r['free'][1]:.3f}), threshold at {r['hit']} updates, "
              f"stopped at {r['updates']}, final acc {r['acc']:.3f} fmt {r['fmt']:.3f}, {r['seconds']:.0f}s")
    ok = (abs(med_base - 1 / 6) <= 0.03 and med_acc >= 0.90 and med_fmt >= 0.99
          and med_hit is not None and med_hit <= MAX_UPDATES and slowest < 600)
    report(7, ok, f"{algorithm}: median baseline acc {med_base:.3f} (1/6 +- 0.03) -> median final acc {med_acc:.3f}, "
                  f"fmt {med_fmt:.3f}; updates to threshold per seed {hits} (median {med_hit}); "
                  f"slowest run {slowest:.0f}s (< 600s)")


def test_criterion_08_determinism(tmp_path):
    outputs = {}
    for algorithm in ("GRPO", "DAPO"):
        for workers in (1, 1, 2, 4):
            cfg = TrainConfig(algorithm=algorithm, seed=11, dataset_size=320, workers=workers)
            params, metrics = run_training(cfg, toy_dataset(cfg))
            m, c = tmp_path / "m.csv", tmp_path / "c.bin"
            write_metrics(metrics, m)
            checkpoint.save(params, c)
            outputs.setdefault(algorithm, []).append((m.read_bytes(), c.read_bytes()))
    ok = all(len(set(v)) == 1 for v in outputs.values())
    report(8, ok, "metrics logs and checkpoints byte-identical across 2 repeats and workers 1/2/4 for "
                  + ", ".join(f"{a} ({len(set(v))} distinct)" for a, v in outputs.items()))


def test_criterion_09_corpus_rules():
    t0 = time.perf_counter()
    rep_ok = detect_repetition("cell " * 16)[0] and not detect_repetition("cell " * 15)[0]
    rng = np.random.default_rng(9)
    stems = ["".join(rng.choice(list("ab"), size=int(rng.integers(40, 70)))) for _ in range(100)]
    recs = [CaptionRecord(f"r{i}", stems[int(rng.integers(100))] + "x" * int(rng.integers(0, 5)))
            for i in range(500)]
    once = dedup_by_prefix(recs, 50)
    dedup_ok = dedup_by_prefix(once, 50) == once and len(once) < len(recs)
    quotas = proportional_quotas({"x": 500, "y": 300, "z": 200}, 100)
    strata = [CaptionRecord(f"{s}{i}", "t" * (i % 37), s) for s, n in (("x", 500), ("y", 300), ("z", 200))
              for i in range(n)]
    sample = stratified_sample(strata, 100)
    counts = {s: sum(r.stratum == s for r in sample) for s in "xyz"}
    quota_ok = quotas == {"x": 50, "y": 30, "z": 20} == counts
    split = parse_multipanel_caption("Tumor margin. (a) low power. (b) high power.")
    split_ok = (split.shared_prefix == "Tumor margin."
                and split.panels == [("a", "Tumor margin. low power."), ("b", "Tumor margin. high power.")])
    centers = np.array([[0.0, 0.0, 0.0], [8.0, 0.0, 0.0], [0.0, 8.0, 0.0]])
    labels = np.repeat(np.arange(3), 200)
    X = centers[labels] + rng.normal(scale=0.6, size=(600, 3))
    assign, _ = kmeans3(X, rng=np.random.default_rng(0))
    import itertools
    agreement = max(np.mean(np.array(p)[assign] == labels) for p in itertools.permutations(range(3)))
    elapsed = time.perf_counter() - t0
    ok = rep_ok and dedup_ok and quota_ok and split_ok and agreement >= 0.99 and elapsed < 30
    report(9, ok, f"repetition boundary={rep_ok}, dedup idempotent={dedup_ok}, quotas={quotas} sample={counts}, "
                  f"caption split={split_ok}, kmeans agreement={agreement:.3f}; {elapsed:.1f}s (< 30s)")


def test_criterion_10_roundtrips(tmp_path):
    rng = np.random.default_rng(10)
    fmap = FeatureMap(Vocabulary.with_size(16), 12)
    params = PolicyParams(fmap, rng.normal(size=(fmap.V, fmap.dim)))
    ck_ok = checkpoint.checkpoint_roundtrip(params, tmp_path / "c.bin").weights.tobytes() == params.weights.tobytes()
    blob = bytearray((tmp_path / "c.bin").read_bytes())
    blob[len(blob) // 2] ^= 0x10
    (tmp_path / "bad.bin").write_bytes(bytes(blob))
    try:
        checkpoint.load(tmp_path / "bad.bin")
        ck_reject = False
    except IntegrityError:
        ck_reject = True
    items = generate_dataset(1000, 10)
    ds_ok = dataset_roundtrip(items, tmp_path / "d.jsonl") == items
    raw = (tmp_path / "d.jsonl").read_bytes()
    (tmp_path / "t.jsonl").write_bytes(raw[:-7])
    try:
        load_dataset(tmp_path / "t.jsonl")
        ds_reject = False
    except ParseError as e:
        ds_reject = "line 1000" in str(e)
    report(10, ck_ok and ck_reject and ds_ok and ds_reject,
           f"checkpoint bit-exact={ck_ok}, corrupted checkpoint rejected={ck_reject}, "
           f"dataset equal={ds_ok}, truncated dataset rejected at its line={ds_reject}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
