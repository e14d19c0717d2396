"""Proportionate stratified sampling with longest-caption-first selection."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np


def proportional_quotas(
    sizes: dict[str, int],
    total: int,
    rng: np.random.Generator | None = None,
) -> dict[str, int]:
    """Largest-remainder (Hamilton) apportionment of ``total`` over strata.

    Quotas are capped at the stratum size and any shortfall goes to the
    remaining strata, again by largest remainder.  Remainder ties are broken
    by larger stratum, then by name, or randomly when ``rng`` is given.
    """
    n = sum(sizes.values())
    if total < 0 or total > n:
        raise ValueError(f"cannot draw {total} records from {n}")
    names = sorted(sizes)
    if total == 0:
        return {s: 0 for s in names}
    exact = {s: total * sizes[s] / n for s in names}
    quotas = {s: min(math.floor(exact[s]), sizes[s]) for s in names}
    jitter = dict(zip(names, rng.random(len(names)))) if rng is not None else {s: 0.0 for s in names}

    def order(candidates):
        return sorted(candidates, key=lambda s: (-(exact[s] - quotas[s]), -sizes[s], jitter[s], s))

    while sum(quotas.values()) < total:
        open_strata = [s for s in names if quotas[s] < sizes[s]]
        if not open_strata:
            raise ValueError("quotas cannot be satisfied")
        short = total - sum(quotas.values())
        for s in order(open_strata)[:short]:
            quotas[s] += 1
    return quotas


def stratified_sample(records, total: int, rng: np.random.Generator | None = None) -> list:
    """Draw ``total`` records with per-stratum quotas proportional to stratum size.

    Within a stratum the longest texts are taken first (ties by id).  The
    result keeps the input order.
    """
    sizes = Counter(r.stratum for r in records)
    if any(s is None or s == "" for s in sizes):
        raise ValueError("every record needs a stratum")
    quotas = proportional_quotas(dict(sizes), total, rng)
    chosen: set[int] = set()
    for stratum, q in quotas.items():
        members = [i for i, r in enumerate(records) if r.stratum == stratum]
        members.sort(key=lambda i: (-len(records[i].text), records[i].id))
        chosen.update(members[:q])
    return [r for i, r in enumerate(records) if i in chosen]
