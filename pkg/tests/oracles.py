"""Independent reference implementations the package must agree with.

Everything here is deliberately naive: exhaustive enumeration, exact
rational arithmetic, numeric quadrature, and finite differences. Nothing
is imported from the package, so agreement between the two routes is a
real check rather than a tautology.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy import integrate

MASK = -1


# ---------------------------------------------------------------------------
# run-length helpers (groupby-based, unlike the package's scan loop)


def rle(units: Sequence[int]) -> list[tuple[int, int]]:
    return [(sym, len(list(grp))) for sym, grp in itertools.groupby(units)]


def expand(runs: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    out: list[int] = []
    for sym, count in runs:
        out.extend([sym] * count)
    return tuple(out)


# ---------------------------------------------------------------------------
# compositions and posterior enumeration


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All tuples of ``parts`` positive integers summing to ``total``."""
    if parts <= 0 or total < parts:
        return
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


def consistent_completions(
    skeleton: Sequence[int], tokens: Sequence[int]
) -> list[tuple[int, ...]]:
    """Full sequences over ``skeleton`` runs that match the visible tokens.

    ``tokens`` uses MASK for unknown positions; its length fixes the total.
    """
    total = len(tokens)
    out = []
    for comp in compositions(total, len(skeleton)):
        seq = expand(list(zip(skeleton, comp)))
        if all(tok == MASK or tok == s for tok, s in zip(tokens, seq)):
            out.append(seq)
    return out


def brute_posterior(
    skeleton: Sequence[int], tokens: Sequence[int], vocab_size: int
) -> dict[int, dict[int, Fraction]]:
    """Masked-position marginals, uniform over consistent completions."""
    seqs = consistent_completions(skeleton, tokens)
    if not seqs:
        raise ValueError("no completion is consistent with the visible tokens")
    n = Fraction(len(seqs))
    marginals: dict[int, dict[int, Fraction]] = {}
    for i, tok in enumerate(tokens):
        if tok != MASK:
            continue
        counts: dict[int, Fraction] = {v: Fraction(0) for v in range(vocab_size)}
        for seq in seqs:
            counts[seq[i]] += 1
        marginals[i] = {v: c / n for v, c in counts.items()}
    return marginals


def brute_joint(
    skeleton: Sequence[int], total: int
) -> dict[tuple[int, ...], Fraction]:
    """Uniform distribution over all full sequences with the given skeleton."""
    seqs = consistent_completions(skeleton, [MASK] * total)
    p = Fraction(1, len(seqs))
    return {seq: p for seq in seqs}


# ---------------------------------------------------------------------------
# speed adaptation reference


def best_total_length(n_runs: int, r_src: Fraction) -> int:
    """Scan every candidate length for the minimal speed deviation.

    The package brackets the optimum analytically; this route checks all
    integers in a window provably containing the minimum (the deviation is
    decreasing up to n_runs/r_src and increasing after), ties to smaller.
    """
    hi = math.ceil(Fraction(n_runs) / r_src) + n_runs + 2
    best = None
    best_dev = None
    for cand in range(n_runs, hi + 1):
        dev = abs(Fraction(n_runs, cand) - r_src)
        if best_dev is None or dev < best_dev:
            best, best_dev = cand, dev
    return best


def reference_allocation(ideals: Sequence[Fraction], total: int) -> list[int]:
    """Floor-clamp-then-redistribute apportionment, written from the policy.

    Floor each ideal, clamp to one, then hand out any shortfall by
    descending fractional remainder (ties to the earliest run) or claw back
    any clamp overshoot by ascending remainder (ties to the latest run),
    never dropping a run below one. Rounds repeat if one pass is not enough.
    """
    m = len(ideals)
    fracs = [q - math.floor(q) for q in ideals]
    counts = [max(1, math.floor(q)) for q in ideals]
    delta = total - sum(counts)
    give_order = sorted(range(m), key=lambda i: (-fracs[i], i))
    take_order = sorted(range(m), key=lambda i: (fracs[i], -i))
    guard = 0
    while delta != 0:
        guard += 1
        assert guard < 10 * (m + total), "allocation failed to converge"
        if delta > 0:
            for i in give_order:
                if delta == 0:
                    break
                counts[i] += 1
                delta -= 1
        else:
            for i in take_order:
                if delta == 0:
                    break
                if counts[i] > 1:
                    counts[i] -= 1
                    delta += 1
    return counts


def brute_adapt(units: Sequence[int], r_src: Fraction) -> tuple[int, ...]:
    """Reference speed adaptation: full-scan length, policy allocation."""
    runs = rle(units)
    m = len(runs)
    r_tgt = Fraction(m, len(units))
    total = best_total_length(m, r_src)
    scale = r_tgt / r_src
    ideals = [Fraction(count) * scale for _, count in runs]
    alloc = reference_allocation(ideals, total)
    return expand([(sym, c) for (sym, _), c in zip(runs, alloc)])


def all_run_profiles(max_runs: int, max_len: int) -> Iterator[tuple[int, ...]]:
    """Every run-count profile with 1..max_runs runs and total <= max_len."""
    for m in range(1, max_runs + 1):
        for total in range(m, max_len + 1):
            yield from compositions(total, m)


def alternating_sequence(profile: Sequence[int], vocab_size: int = 2) -> list[int]:
    """Canonical two-symbol realization of a run-count profile."""
    assert vocab_size >= 2
    return list(expand([(i % 2, c) for i, c in enumerate(profile)]))


# ---------------------------------------------------------------------------
# flow-matching references


def central_difference(f: Callable[[float], np.ndarray], t: float, h: float = 1e-6) -> np.ndarray:
    return (np.asarray(f(t + h)) - np.asarray(f(t - h))) / (2.0 * h)


def gaussian_bin_affine(
    mu0: float,
    v0: float,
    mu1: float,
    v1: float,
    sigma_min: float,
    t_lo: float,
    t_hi: float,
) -> tuple[float, float]:
    """Best affine predictor of the velocity from the path value on a t-bin.

    For 1-d Gaussian endpoints, integrates the closed-form per-t moments of
    (phi_t, u) over t ~ Uniform[t_lo, t_hi] with adaptive quadrature and
    solves the two-moment normal equations. Independent of the package's
    per-t conditional-expectation formulas.
    """
    b = 1.0 - sigma_min

    def a(t: float) -> float:
        return 1.0 - b * t

    mean_u = mu1 - b * mu0
    var_u = b * b * v0 + v1

    def mean_phi(t: float) -> float:
        return a(t) * mu0 + t * mu1

    def var_phi(t: float) -> float:
        return a(t) ** 2 * v0 + t * t * v1

    def cov_phi_u(t: float) -> float:
        return t * v1 - a(t) * b * v0

    width = t_hi - t_lo

    def avg(f: Callable[[float], float]) -> float:
        val, _ = integrate.quad(f, t_lo, t_hi, epsabs=1e-12, epsrel=1e-12)
        return val / width

    e_phi = avg(mean_phi)
    e_u = mean_u
    e_phi_u = avg(lambda t: cov_phi_u(t) + mean_phi(t) * mean_u)
    e_phi2 = avg(lambda t: var_phi(t) + mean_phi(t) ** 2)
    slope = (e_phi_u - e_phi * e_u) / (e_phi2 - e_phi**2)
    intercept = e_u - slope * e_phi
    del var_u
    return slope, intercept


# ---------------------------------------------------------------------------
# categorical goodness of fit


def chi2_statistic(
    observed: Mapping[tuple[int, ...], int],
    expected: Mapping[tuple[int, ...], Fraction],
    n_draws: int,
) -> tuple[float, int]:
    """Pearson chi-squared statistic and degrees of freedom."""
    stat = 0.0
    for outcome, prob in expected.items():
        exp = float(prob) * n_draws
        obs = observed.get(outcome, 0)
        stat += (obs - exp) ** 2 / exp
    unexpected = set(observed) - set(expected)
    assert not unexpected, f"sampler produced impossible outcomes: {sorted(unexpected)[:3]}"
    return stat, len(expected) - 1
