"""Synthetic bilingual unit task with an exact posterior oracle.

A task spec draws a shared skeleton, maps it through a fixed bijection, and
expands both sides with independent geometric run lengths. Because the
geometric is memoryless, run lengths conditioned on a total length are
uniform over compositions, which makes exact per-position posteriors
computable by dynamic programming at desk scale. A count-based denoiser
trained on masked states provides a cheap learnable baseline with the same
interface as the oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .diffusion import (
    MASK,
    Denoiser,
    DiffusionState,
    LossStrategy,
    MaskSchedule,
    SamplerConfig,
    mask_with_rng,
    masked_ce_loss,
    sample,
    scoring_positions,
)
from .errors import DataError, InconsistentStateError, ValidationError
from .seeding import derive_item_seed, rng_from
from .units import (
    SpeedEstimate,
    UnitSequence,
    adapt_speed,
    dedup,
    to_runs,
    unit_speed,
)

# Positions beyond this make the exact composition DP needlessly slow.
ORACLE_MAX_TARGET_LEN = 24

BOUNDARY = -1  # left-context sentinel: sequence start or hidden neighbor


@dataclass(frozen=True)
class ToyTaskSpec:
    """Generative settings for the synthetic bilingual task.

    ``mapping[s]`` is the target symbol for source symbol ``s`` and must be
    injective. Run lengths are geometric with the given means (support >= 1),
    and sequences longer than ``max_len`` are cut at a run boundary.
    """

    v_src: int
    v_tgt: int
    mapping: tuple[int, ...]
    skeleton_len_range: tuple[int, int]
    mean_run_src: float
    mean_run_tgt: float
    max_len: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(x) for x in self.mapping))
        object.__setattr__(
            self, "skeleton_len_range", tuple(int(x) for x in self.skeleton_len_range)
        )
        if self.v_src < 1 or self.v_tgt < 1:
            raise ValidationError("vocab sizes must be >= 1")
        if len(self.mapping) != self.v_src:
            raise ValidationError(
                f"mapping covers {len(self.mapping)} symbols, expected v_src = {self.v_src}"
            )
        if any(not 0 <= x < self.v_tgt for x in self.mapping):
            raise ValidationError("mapping values must lie in [0, v_tgt)")
        if len(set(self.mapping)) != len(self.mapping):
            raise ValidationError("mapping must be injective")
        lo, hi = self.skeleton_len_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad skeleton length range ({lo}, {hi})")
        if hi > 1 and self.v_src < 2:
            raise ValidationError("skeletons without adjacent repeats need v_src >= 2")
        if self.mean_run_src < 1.0 or self.mean_run_tgt < 1.0:
            raise ValidationError("mean run lengths must be >= 1")
        if self.max_len < hi:
            raise ValidationError(
                f"max_len {self.max_len} cannot be below the skeleton range upper end {hi}"
            )

    @classmethod
    def standard(cls, seed: int = 0) -> "ToyTaskSpec":
        """Bilingual setting with fast source speech and near-minimal target runs."""
        return cls(
            v_src=6,
            v_tgt=6,
            mapping=(1, 2, 3, 4, 5, 0),
            skeleton_len_range=(8, 16),
            mean_run_src=3.0,
            mean_run_tgt=1.5,
            max_len=96,
            seed=seed,
        )

    @classmethod
    def copy_task(cls, seed: int = 0) -> "ToyTaskSpec":
        """Identity mapping with unit runs: target equals source exactly."""
        return cls(
            v_src=4,
            v_tgt=4,
            mapping=(0, 1, 2, 3),
            skeleton_len_range=(2, 6),
            mean_run_src=1.0,
            mean_run_tgt=1.0,
            max_len=6,
            seed=seed,
        )

    def to_json_obj(self) -> dict:
        return {
            "v_src": self.v_src,
            "v_tgt": self.v_tgt,
            "mapping": list(self.mapping),
            "skeleton_len_range": list(self.skeleton_len_range),
            "mean_run_src": self.mean_run_src,
            "mean_run_tgt": self.mean_run_tgt,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ToyTaskSpec":
        if not isinstance(obj, dict):
            raise ValidationError("task spec must be a JSON object")
        required = {
            "v_src",
            "v_tgt",
            "mapping",
            "skeleton_len_range",
            "mean_run_src",
            "mean_run_tgt",
            "max_len",
        }
        missing = required - set(obj)
        if missing:
            raise ValidationError(f"task spec missing keys: {sorted(missing)}")
        unknown = set(obj) - required - {"seed"}
        if unknown:
            raise ValidationError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(
            v_src=int(obj["v_src"]),
            v_tgt=int(obj["v_tgt"]),
            mapping=tuple(obj["mapping"]),
            skeleton_len_range=tuple(obj["skeleton_len_range"]),
            mean_run_src=float(obj["mean_run_src"]),
            mean_run_tgt=float(obj["mean_run_tgt"]),
            max_len=int(obj["max_len"]),
            seed=int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class ParallelPair:
    """One bilingual example; ``tgt_adapted`` is filled by speed adaptation."""

    id: str
    src: UnitSequence
    tgt: UnitSequence
    tgt_adapted: UnitSequence | None = None

    def training_target(self) -> UnitSequence:
        return self.tgt_adapted if self.tgt_adapted is not None else self.tgt


@dataclass(frozen=True)
class SourceContext:
    """Conditioning information derived from a source sequence."""

    src: UnitSequence
    src_speed: SpeedEstimate
    src_skeleton: UnitSequence

    @classmethod
    def from_source(cls, src: UnitSequence) -> "SourceContext":
        return cls(src=src, src_speed=unit_speed(src), src_skeleton=dedup(src))


def _runs_within(counts: Sequence[int], max_len: int) -> int:
    total = 0
    kept = 0
    for c in counts:
        if total + int(c) > max_len:
            break
        total += int(c)
        kept += 1
    return kept


def generate_pair(spec: ToyTaskSpec, pair_seed: int, pair_id: str | None = None) -> ParallelPair:
    """Draw one pair, deterministic per ``(spec.seed, pair_seed)``.

    Draw order is fixed: skeleton length, skeleton symbols, source run
    lengths, target run lengths. Both sides are cut at a run boundary so the
    total length stays within ``max_len`` (always keeping at least one run),
    and the shorter surviving skeleton prefix is used for both, preserving
    the dedup correspondence.
    """
    rng = rng_from(spec.seed, pair_seed)
    lo, hi = spec.skeleton_len_range
    m = int(rng.integers(lo, hi + 1))
    syms = [int(rng.integers(spec.v_src))]
    for _ in range(m - 1):
        step = int(rng.integers(spec.v_src - 1))
        syms.append(step if step < syms[-1] else step + 1)
    src_runs = rng.geometric(1.0 / spec.mean_run_src, size=m).astype(int)
    tgt_runs = rng.geometric(1.0 / spec.mean_run_tgt, size=m).astype(int)
    m_keep = max(
        1, min(_runs_within(src_runs, spec.max_len), _runs_within(tgt_runs, spec.max_len))
    )
    src_units: list[int] = []
    tgt_units: list[int] = []
    for i in range(m_keep):
        src_units.extend([syms[i]] * int(src_runs[i]))
        tgt_units.extend([spec.mapping[syms[i]]] * int(tgt_runs[i]))
    return ParallelPair(
        id=pair_id if pair_id is not None else f"pair-{pair_seed:06d}",
        src=UnitSequence(tuple(src_units), spec.v_src),
        tgt=UnitSequence(tuple(tgt_units), spec.v_tgt),
    )


def generate_corpus(spec: ToyTaskSpec, n_pairs: int, id_prefix: str = "pair") -> list[ParallelPair]:
    """Pairs with seeds ``0..n_pairs-1`` and ids ``{prefix}-{i:06d}``."""
    if n_pairs < 0:
        raise ValidationError(f"n_pairs must be >= 0, got {n_pairs}")
    return [generate_pair(spec, i, f"{id_prefix}-{i:06d}") for i in range(n_pairs)]


def adapt_corpus(corpus: Sequence[ParallelPair], adaptation_on: bool = True) -> list[ParallelPair]:
    """Fill ``tgt_adapted`` for every pair.

    With adaptation on, the target's run counts are rescaled to the source
    speed; off copies the target through unchanged, so downstream consumers
    can rely on the field either way.
    """
    out: list[ParallelPair] = []
    for pair in corpus:
        if adaptation_on:
            adapted = adapt_speed(pair.tgt, unit_speed(pair.src))
        else:
            adapted = pair.tgt
        out.append(replace(pair, tgt_adapted=adapted))
    return out


class SpeedAdapter(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`adapt_corpus`."""

    def __init__(self, adaptation_on: bool = True):
        self.adaptation_on = adaptation_on

    def fit(self, X: Sequence[ParallelPair], y=None) -> "SpeedAdapter":
        return self

    def transform(self, X: Sequence[ParallelPair]) -> list[ParallelPair]:
        return adapt_corpus(X, self.adaptation_on)


# ---------------------------------------------------------------------------
# Corpus serialization


def write_corpus_jsonl(path, pairs: Iterable[ParallelPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            obj: dict = {
                "id": pair.id,
                "src_units": list(pair.src.units),
                "tgt_units": list(pair.tgt.units),
            }
            if pair.tgt_adapted is not None:
                obj["tgt_adapted_units"] = list(pair.tgt_adapted.units)
            obj["vocab_src"] = pair.src.vocab_size
            obj["vocab_tgt"] = pair.tgt.vocab_size
            fh.write(json.dumps(obj, separators=(", ", ": ")) + "\n")


def read_corpus_jsonl(path) -> list[ParallelPair]:
    """Read pairs, enforcing unique ids and uniform vocabulary sizes."""
    path = Path(path)
    pairs: list[ParallelPair] = []
    seen: set[str] = set()
    vocabs: tuple[int, int] | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                pid = str(obj["id"])
                v_src = int(obj["vocab_src"])
                v_tgt = int(obj["vocab_tgt"])
                src = UnitSequence(tuple(obj["src_units"]), v_src)
                tgt = UnitSequence(tuple(obj["tgt_units"]), v_tgt)
                adapted = None
                if "tgt_adapted_units" in obj:
                    adapted = UnitSequence(tuple(obj["tgt_adapted_units"]), v_tgt)
            except (KeyError, TypeError, ValidationError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
            if pid in seen:
                raise DataError(f"{path}:{lineno}: duplicate pair id {pid!r}")
            seen.add(pid)
            if vocabs is None:
                vocabs = (v_src, v_tgt)
            elif vocabs != (v_src, v_tgt):
                raise DataError(
                    f"{path}:{lineno}: vocab sizes {(v_src, v_tgt)} differ from {vocabs}"
                )
            pairs.append(ParallelPair(pid, src, tgt, adapted))
    return pairs


# ---------------------------------------------------------------------------
# Exact composition posterior

def _feasible(skeleton: Sequence[int], tokens: Sequence[int], limit: int | None = None) -> bool:
    """Whether any composition matches the visible tokens (prefix-limited).

    ``limit`` ignores visibility constraints at positions > limit.
    """
    m = len(skeleton)
    n = len(tokens)
    if m > n:
        return False
    vis = [
        (tokens[i] if (limit is None or i <= limit) else MASK) for i in range(n)
    ]
    # next_conflict[v][s]: first position >= s whose visible token differs from v
    symbols = sorted(set(skeleton))
    next_conflict: dict[int, list[int]] = {}
    for v in symbols:
        nc = [n] * (n + 1)
        for s in range(n - 1, -1, -1):
            nc[s] = s if (vis[s] != MASK and vis[s] != v) else nc[s + 1]
        next_conflict[v] = nc
    reach = {0}
    for i in range(m):
        nc = next_conflict[skeleton[i]]
        nxt: set[int] = set()
        for s in reach:
            hi = min(nc[s], n) if s < n else s
            # runs [s, e) of symbol skeleton[i], e up to first conflict
            for e in range(s + 1, hi + 1):
                if e + (m - i - 1) <= n:
                    nxt.add(e)
        reach = nxt
        if not reach:
            return False
    return n in reach


def composition_posterior_exact(
    skeleton: Sequence[int], tokens: Sequence[int], vocab_size: int
) -> dict[int, dict[int, Fraction]]:
    """Exact masked-position marginals under uniform compositions.

    The model: run lengths ``k_1..k_m >= 1`` with ``sum k_i = len(tokens)``,
    uniform over compositions (equivalently geometric run lengths conditioned
    on the total, by memorylessness), run ``i`` painted with ``skeleton[i]``.
    Marginals are exact rationals. Raises :class:`InconsistentStateError`
    naming the first position whose visibility admits no completion.
    """
    skeleton = [int(x) for x in skeleton]
    tokens = [int(x) for x in tokens]
    m = len(skeleton)
    n = len(tokens)
    if m == 0:
        raise ValidationError("skeleton must be nonempty")
    if m > n:
        raise InconsistentStateError(
            0, f"skeleton length {m} exceeds target length {n}: no composition exists"
        )
    symbols = sorted(set(skeleton))
    next_conflict: dict[int, list[int]] = {}
    for v in symbols:
        nc = [n] * (n + 1)
        for s in range(n - 1, -1, -1):
            nc[s] = s if (tokens[s] != MASK and tokens[s] != v) else nc[s + 1]
        next_conflict[v] = nc

    # forward[i][s]: compositions of runs 1..i exactly filling [0, s)
    forward = [[0] * (n + 1) for _ in range(m + 1)]
    forward[0][0] = 1
    for i in range(m):
        nc = next_conflict[skeleton[i]]
        row = forward[i]
        nxt = forward[i + 1]
        for s in range(n + 1):
            w = row[s]
            if w == 0 or s >= n:
                continue
            for e in range(s + 1, min(nc[s], n) + 1):
                nxt[e] += w
    total = forward[m][n]
    if total == 0:
        self_visible = [i for i, x in enumerate(tokens) if x != MASK]
        for p in sorted(self_visible):
            if not _feasible(skeleton, tokens, limit=p):
                raise InconsistentStateError(p)
        raise InconsistentStateError(self_visible[0] if self_visible else 0)

    backward = [[0] * (n + 1) for _ in range(m + 1)]
    backward[m][n] = 1
    for i in range(m - 1, -1, -1):
        nc = next_conflict[skeleton[i]]
        row = backward[i + 1]
        cur = backward[i]
        for s in range(n, -1, -1):
            if s >= n:
                continue
            acc = 0
            for e in range(s + 1, min(nc[s], n) + 1):
                acc += row[e]
            cur[s] = acc

    # weight[i][p]: compositions in which run i covers position p,
    # accumulated with a difference array over each feasible interval
    cover: dict[int, list[int]] = {v: [0] * n for v in symbols}
    for i in range(m):
        nc = next_conflict[skeleton[i]]
        diff = [0] * (n + 1)
        for s in range(n):
            w = forward[i][s]
            if w == 0:
                continue
            for e in range(s + 1, min(nc[s], n) + 1):
                wb = backward[i + 1][e]
                if wb == 0:
                    continue
                contrib = w * wb
                diff[s] += contrib
                diff[e] -= contrib
        acc = 0
        row = cover[skeleton[i]]
        for p in range(n):
            acc += diff[p]
            row[p] += acc

    out: dict[int, dict[int, Fraction]] = {}
    for p in range(n):
        if tokens[p] != MASK:
            continue
        dist = {v: Fraction(0) for v in range(vocab_size)}
        for v in symbols:
            c = cover[v][p]
            if c:
                dist[v] = Fraction(c, total)
        out[p] = dist
    return out


def oracle_posterior(
    state: DiffusionState, ctx: SourceContext, spec: ToyTaskSpec
) -> dict[int, np.ndarray]:
    """Float view of the exact masked-position posterior.

    The target skeleton is the mapped source skeleton; run lengths are
    conditioned on ``state.target_len``. Lengths above
    ``ORACLE_MAX_TARGET_LEN`` are refused to keep the DP tractable.
    """
    if state.target_len > ORACLE_MAX_TARGET_LEN:
        raise ValidationError(
            f"target_len {state.target_len} exceeds the exact-posterior bound "
            f"{ORACLE_MAX_TARGET_LEN}"
        )
    skeleton = [spec.mapping[s] for s in ctx.src_skeleton.units]
    exact = composition_posterior_exact(skeleton, state.tokens, spec.v_tgt)
    out: dict[int, np.ndarray] = {}
    for p, dist in exact.items():
        arr = np.zeros(spec.v_tgt)
        for v, q in dist.items():
            arr[v] = float(q)
        out[p] = arr
    return out


class OracleDenoiser:
    """Exact-conditional denoiser for the toy task.

    Prediction marginals are the true ``P(x_i = v | visible, source)`` under
    the composition model, so sampling with the random rule, one commit per
    step, and temperature one reproduces the exact joint. Results are
    memoized per (skeleton, tokens) since states repeat heavily at desk
    scale.
    """

    def __init__(self, spec: ToyTaskSpec):
        self.spec = spec
        self._cache: dict[tuple, dict[int, np.ndarray]] = {}

    @property
    def vocab_size(self) -> int:
        return self.spec.v_tgt

    def predict(self, state: DiffusionState, ctx: SourceContext) -> dict[int, np.ndarray]:
        key = (tuple(ctx.src_skeleton.units), state.tokens)
        hit = self._cache.get(key)
        if hit is None:
            hit = oracle_posterior(state, ctx, self.spec)
            for arr in hit.values():
                arr.flags.writeable = False
            self._cache[key] = hit
        return dict(hit)

    def posterior_exact(
        self, state: DiffusionState, ctx: SourceContext
    ) -> dict[int, dict[int, Fraction]]:
        skeleton = [self.spec.mapping[s] for s in ctx.src_skeleton.units]
        return composition_posterior_exact(skeleton, state.tokens, self.spec.v_tgt)


# ---------------------------------------------------------------------------
# Count-based denoiser

COUNT_MODEL_FORMAT = "dubkit.count-denoiser/1"


def _aligned_symbols(src_skeleton: Sequence[int], target_len: int) -> list[int]:
    # position i aligns to skeleton slot floor(i * m / N)
    m = len(src_skeleton)
    return [src_skeleton[(i * m) // target_len] for i in range(target_len)]


class CountDenoiser(BaseEstimator):
    """Additive-smoothing count model over local masked-state features.

    Each position is keyed by its aligned source skeleton symbol, its left
    visible neighbor (or BOUNDARY when absent or hidden), and a quantized
    noise-level bin; values are per-target-unit counts. Predictions are the
    smoothed normalized counts, hence strictly positive.

    ``fit`` draws ``steps`` masked states from the corpus (uniform pair,
    uniform t), accumulates counts over the positions the loss strategy
    scores, and records the label-smoothed cross-entropy of the current
    model before each update as ``loss_trace_``.
    """

    def __init__(
        self,
        schedule: MaskSchedule = MaskSchedule.linear(),
        steps: int = 20000,
        strategy: str = "masked_only",
        label_smoothing: float = 0.01,
        t_bins: int = 4,
        smoothing_alpha: float = 0.1,
        seed: int = 0,
    ):
        self.schedule = schedule
        self.steps = steps
        self.strategy = strategy
        self.label_smoothing = label_smoothing
        self.t_bins = t_bins
        self.smoothing_alpha = smoothing_alpha
        self.seed = seed

    @property
    def vocab_size(self) -> int:
        self._check_fitted()
        return self.v_tgt_

    def _check_fitted(self):
        if not hasattr(self, "counts_"):
            raise NotFittedError("CountDenoiser is not fitted; call fit or load a model file")

    def _validate_params(self):
        # steps = 0 is legal: the fitted model is pure smoothing (uniform)
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.t_bins < 1:
            raise ValidationError(f"t_bins must be >= 1, got {self.t_bins}")
        if self.smoothing_alpha <= 0:
            raise ValidationError(f"smoothing_alpha must be > 0, got {self.smoothing_alpha}")

    def _t_bin(self, t: float) -> int:
        return min(self.t_bins - 1, int(t * self.t_bins))

    def fit(self, corpus: Sequence[ParallelPair], y=None) -> "CountDenoiser":
        self._validate_params()
        strategy = LossStrategy.parse(self.strategy) if isinstance(self.strategy, str) else self.strategy
        if len(corpus) == 0:
            raise ValidationError("cannot fit on an empty corpus")
        v_src = corpus[0].src.vocab_size
        v_tgt = corpus[0].tgt.vocab_size
        for pair in corpus:
            if pair.src.vocab_size != v_src or pair.tgt.vocab_size != v_tgt:
                raise ValidationError(f"pair {pair.id} has inconsistent vocab sizes")
        truths = [pair.training_target() for pair in corpus]
        aligned = [
            _aligned_symbols(dedup(pair.src).units, len(truth))
            for pair, truth in zip(corpus, truths)
        ]
        counts: dict[tuple[int, int, int], np.ndarray] = {}
        losses: list[float] = []
        rng = rng_from(self.seed)
        n = len(corpus)
        for _ in range(self.steps):
            pi = int(rng.integers(n))
            truth = truths[pi]
            t = float(rng.random())
            state = mask_with_rng(truth, t, self.schedule, rng)
            positions = scoring_positions(state, truth, strategy)
            if positions:
                preds = self._distributions_raw(
                    counts, state.tokens, aligned[pi], self._t_bin(t), v_tgt, positions
                )
                result = masked_ce_loss(
                    preds, truth, state, strategy, self.label_smoothing
                )
                losses.append(result.loss)
                bin_idx = self._t_bin(t)
                for i in positions:
                    key = self._key(state.tokens, aligned[pi], bin_idx, i)
                    vec = counts.get(key)
                    if vec is None:
                        vec = np.zeros(v_tgt, dtype=np.int64)
                        counts[key] = vec
                    vec[truth.units[i]] += 1
            else:
                losses.append(0.0)
        self.counts_ = counts
        self.v_src_ = v_src
        self.v_tgt_ = v_tgt
        self.loss_trace_ = losses
        return self

    @staticmethod
    def _key(tokens: Sequence[int], aligned: Sequence[int], t_bin: int, i: int) -> tuple[int, int, int]:
        left = tokens[i - 1] if i > 0 and tokens[i - 1] != MASK else BOUNDARY
        return (aligned[i], left, t_bin)

    def _distributions_raw(
        self,
        counts: Mapping[tuple[int, int, int], np.ndarray],
        tokens: Sequence[int],
        aligned: Sequence[int],
        t_bin: int,
        v_tgt: int,
        positions: Sequence[int],
    ) -> dict[int, np.ndarray]:
        alpha = self.smoothing_alpha
        out: dict[int, np.ndarray] = {}
        for i in positions:
            key = self._key(tokens, aligned, t_bin, i)
            vec = counts.get(key)
            if vec is None:
                out[i] = np.full(v_tgt, 1.0 / v_tgt)
            else:
                out[i] = (vec + alpha) / (vec.sum() + alpha * v_tgt)
        return out

    def distributions(
        self, state: DiffusionState, ctx: SourceContext, positions: Sequence[int]
    ) -> dict[int, np.ndarray]:
        """Predicted unit distributions at arbitrary positions."""
        self._check_fitted()
        if ctx.src.vocab_size != self.v_src_:
            raise ValidationError(
                f"context vocab {ctx.src.vocab_size} does not match model vocab {self.v_src_}"
            )
        aligned = _aligned_symbols(ctx.src_skeleton.units, state.target_len)
        return self._distributions_raw(
            self.counts_, state.tokens, aligned, self._t_bin(state.t), self.v_tgt_, positions
        )

    def predict(self, state: DiffusionState, ctx: SourceContext) -> dict[int, np.ndarray]:
        return self.distributions(state, ctx, state.masked_positions())

    def to_json_obj(self) -> dict:
        self._check_fitted()
        counts = {
            f"{s},{l},{b}": [int(x) for x in vec]
            for (s, l, b), vec in self.counts_.items()
        }
        return {
            "format": COUNT_MODEL_FORMAT,
            "v_src": self.v_src_,
            "v_tgt": self.v_tgt_,
            "t_bins": self.t_bins,
            "smoothing_alpha": self.smoothing_alpha,
            "train": {
                "schedule": self.schedule.to_json_value(),
                "steps": self.steps,
                "strategy": self.strategy if isinstance(self.strategy, str) else self.strategy.value,
                "label_smoothing": self.label_smoothing,
                "seed": self.seed,
            },
            "counts": counts,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True, separators=(", ", ": "))
            fh.write("\n")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CountDenoiser":
        if not isinstance(obj, dict) or obj.get("format") != COUNT_MODEL_FORMAT:
            raise DataError(
                f"not a count-denoiser model file (format {obj.get('format')!r}, "
                f"expected {COUNT_MODEL_FORMAT!r})"
            )
        train = obj.get("train", {})
        model = cls(
            schedule=MaskSchedule.from_json_value(train.get("schedule", "linear")),
            steps=int(train.get("steps", 1)),
            strategy=str(train.get("strategy", "masked_only")),
            label_smoothing=float(train.get("label_smoothing", 0.01)),
            t_bins=int(obj["t_bins"]),
            smoothing_alpha=float(obj["smoothing_alpha"]),
            seed=int(train.get("seed", 0)),
        )
        counts: dict[tuple[int, int, int], np.ndarray] = {}
        v_tgt = int(obj["v_tgt"])
        for key, values in obj["counts"].items():
            s, l, b = (int(x) for x in key.split(","))
            vec = np.asarray([int(x) for x in values], dtype=np.int64)
            if vec.shape != (v_tgt,):
                raise DataError(f"count vector for key {key!r} has wrong length")
            counts[(s, l, b)] = vec
        model.counts_ = counts
        model.v_src_ = int(obj["v_src"])
        model.v_tgt_ = v_tgt
        model.loss_trace_ = []
        return model

    @classmethod
    def load(cls, path) -> "CountDenoiser":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid model JSON: {exc}") from exc
        return cls.from_json_obj(obj)


def train_count_denoiser(
    corpus: Sequence[ParallelPair],
    schedule: MaskSchedule = MaskSchedule.linear(),
    steps: int = 20000,
    strategy: LossStrategy = LossStrategy.MASKED_ONLY,
    label_smoothing: float = 0.01,
    seed: int = 0,
    t_bins: int = 4,
    smoothing_alpha: float = 0.1,
) -> tuple[CountDenoiser, list[float]]:
    """Fit a :class:`CountDenoiser`; returns the model and its loss trace."""
    model = CountDenoiser(
        schedule=schedule,
        steps=steps,
        strategy=strategy.value if isinstance(strategy, LossStrategy) else strategy,
        label_smoothing=label_smoothing,
        t_bins=t_bins,
        smoothing_alpha=smoothing_alpha,
        seed=seed,
    )
    model.fit(corpus)
    return model, model.loss_trace_


# ---------------------------------------------------------------------------
# Evaluation


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Plain edit distance (insert, delete, substitute, unit cost)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def skeleton_accuracy(output: UnitSequence, reference_skeleton: UnitSequence) -> float:
    """1 - normalized edit distance between skeletons, in [0, 1]."""
    a = dedup(output).units
    b = reference_skeleton.units
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


@dataclass(frozen=True)
class EvalRow:
    """Translation quality at one NFE setting."""

    nfe: int
    skeleton_accuracy: float
    exact_match: float
    oracle_loglik: float
    consistent_frac: float


def _output_oracle_loglik(output: UnitSequence, reference_skeleton: UnitSequence) -> float | None:
    """Log-probability of ``output`` under uniform compositions, or None.

    A sequence consistent with the skeleton pins one composition out of
    ``C(N-1, m-1)``; anything else has probability zero.
    """
    if dedup(output).units != reference_skeleton.units:
        return None
    n = len(output)
    m = len(reference_skeleton)
    return -math.log(math.comb(n - 1, m - 1))


def evaluate_translation(
    denoiser: Denoiser,
    corpus: Sequence[ParallelPair],
    nfe_grid: Sequence[int],
    cfg: SamplerConfig,
) -> list[EvalRow]:
    """Sample every pair at ``target_len = len(src)`` for each NFE.

    Skeleton accuracy compares the output skeleton against ``dedup(tgt)``
    (the mapped source skeleton by construction); exact match compares
    against the adapted target when present, else the raw target. The oracle
    log-likelihood averages over skeleton-consistent outputs and is NaN when
    none are consistent. Per-pair RNG streams are derived from
    ``(cfg.seed, pair id, nfe)``.
    """
    if not corpus:
        raise ValidationError("cannot evaluate on an empty corpus")
    rows: list[EvalRow] = []
    for nfe in nfe_grid:
        cfg_n = replace(cfg, nfe=int(nfe))
        accs: list[float] = []
        exact = 0
        logliks: list[float] = []
        for pair in corpus:
            ctx = SourceContext.from_source(pair.src)
            pair_rng = rng_from(derive_item_seed(cfg.seed, f"{pair.id}:nfe={nfe}"))
            out = sample(denoiser, ctx, len(pair.src), cfg_n, rng=pair_rng)
            ref_skel = dedup(pair.tgt)
            accs.append(skeleton_accuracy(out, ref_skel))
            reference = pair.training_target()
            if out.units == reference.units:
                exact += 1
            ll = _output_oracle_loglik(out, ref_skel)
            if ll is not None:
                logliks.append(ll)
        rows.append(
            EvalRow(
                nfe=int(nfe),
                skeleton_accuracy=float(np.mean(accs)),
                exact_match=exact / len(corpus),
                oracle_loglik=float(np.mean(logliks)) if logliks else float("nan"),
                consistent_frac=len(logliks) / len(corpus),
            )
        )
    return rows


def oracle_cross_entropy(
    denoiser: Denoiser,
    corpus: Sequence[ParallelPair],
    spec: ToyTaskSpec,
    n_states: int = 2000,
    seed: int = 0,
    schedule: MaskSchedule = MaskSchedule.linear(),
) -> float:
    """Mean cross-entropy of predictions against the exact posterior.

    Draws masked states from raw targets (pair uniform, t uniform), where the
    composition posterior is the true conditional, and averages
    ``-sum_v P_oracle(v) log P_model(v)`` over masked positions.

    Every target must fit the exact-posterior bound
    (``ORACLE_MAX_TARGET_LEN``); filter the corpus before calling.
    """
    if not corpus:
        raise ValidationError("cannot evaluate on an empty corpus")
    for pair in corpus:
        if len(pair.tgt) > ORACLE_MAX_TARGET_LEN:
            raise ValidationError(
                f"pair {pair.id!r}: target length {len(pair.tgt)} exceeds the "
                f"exact-posterior bound {ORACLE_MAX_TARGET_LEN}; filter the corpus"
            )
    oracle = OracleDenoiser(spec)
    rng = rng_from(seed)
    total = 0.0
    count = 0
    n = len(corpus)
    for _ in range(n_states):
        pair = corpus[int(rng.integers(n))]
        truth = pair.tgt
        t = float(rng.random())
        state = mask_with_rng(truth, t, schedule, rng)
        masked = state.masked_positions()
        if not masked:
            continue
        ctx = SourceContext.from_source(pair.src)
        po = oracle.predict(state, ctx)
        pm = denoiser.predict(state, ctx)
        for i in masked:
            p_ref = po[i]
            p_model = np.asarray(pm[i], dtype=float)
            with np.errstate(divide="ignore"):
                logs = np.log(p_model)
            total += float(-(p_ref * np.where(p_ref > 0, logs, 0.0)).sum())
            count += 1
    if count == 0:
        raise ValidationError("no masked positions were drawn; increase n_states")
    return total / count


def _translate_chunk(
    denoiser: Denoiser, pairs: Sequence[ParallelPair], cfg: SamplerConfig
) -> list[UnitSequence]:
    out = []
    for pair in pairs:
        ctx = SourceContext.from_source(pair.src)
        rng = rng_from(derive_item_seed(cfg.seed, pair.id))
        out.append(sample(denoiser, ctx, len(pair.src), cfg, rng=rng))
    return out


def translate_corpus(
    denoiser: Denoiser,
    corpus: Sequence[ParallelPair],
    cfg: SamplerConfig,
    workers: int = 1,
) -> list[UnitSequence]:
    """Sample one output per pair at the source length, in corpus order.

    Each pair gets its own seed stream derived from the sampler seed and the
    pair id, so results are identical for any worker count.
    """
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")
    pairs = list(corpus)
    if workers == 1 or len(pairs) < 2:
        return _translate_chunk(denoiser, pairs, cfg)
    import concurrent.futures

    bounds = [(len(pairs) * k) // workers for k in range(workers + 1)]
    chunks = [pairs[bounds[k] : bounds[k + 1]] for k in range(workers)]
    results: list[list[UnitSequence]] = [[] for _ in chunks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(_translate_chunk, denoiser, chunk, cfg): k
            for k, chunk in enumerate(chunks)
            if chunk
        }
        for fut in concurrent.futures.as_completed(futures):
            results[futures[fut]] = fut.result()
    return [seq for chunk in results for seq in chunk]
