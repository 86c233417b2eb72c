"""Absorbing-state masked diffusion over unit sequences.

The forward process replaces each position independently with a MASK token
with probability ``gamma(t)``; the reverse process starts from an all-MASK
sequence of an explicitly chosen length and unmasks iteratively, so output
duration is exact by construction. Training scores cross-entropy over a
configurable position set: every position, masked positions only, or masked
positions excluding those trivially recoverable from a partially visible run.

All rounding of lengths and mask counts is round-half-to-even.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .seeding import rng_from
from .units import UnitSequence, to_runs

MASK = -1


@dataclass(frozen=True)
class MaskSchedule:
    """Masking level ``gamma(t)`` on ``t in [0, 1]``.

    ``linear``: gamma(t) = t. ``cosine``: gamma(t) = 1 - cos(pi * t / 2).
    ``fixed``: gamma(t) = rho regardless of t (the no-schedule ablation).
    """

    kind: str
    rho: float | None = None

    _KINDS = ("linear", "cosine", "fixed")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValidationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "fixed":
            if self.rho is None or not 0.0 <= self.rho <= 1.0:
                raise ValidationError(f"fixed schedule needs rho in [0, 1], got {self.rho}")
        elif self.rho is not None:
            raise ValidationError(f"{self.kind} schedule takes no rho")

    @classmethod
    def linear(cls) -> "MaskSchedule":
        return cls("linear")

    @classmethod
    def cosine(cls) -> "MaskSchedule":
        return cls("cosine")

    @classmethod
    def fixed(cls, rho: float = 0.5) -> "MaskSchedule":
        return cls("fixed", float(rho))

    def gamma(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {t}")
        if self.kind == "linear":
            return float(t)
        if self.kind == "cosine":
            return 1.0 - math.cos(math.pi * t / 2.0)
        return float(self.rho)

    def to_json_value(self):
        if self.kind == "fixed":
            return {"fixed": self.rho}
        return self.kind

    @classmethod
    def from_json_value(cls, value) -> "MaskSchedule":
        if isinstance(value, str):
            if value in ("linear", "cosine"):
                return cls(value)
            raise ValidationError(f"unknown schedule {value!r}")
        if isinstance(value, dict) and set(value) == {"fixed"}:
            return cls.fixed(float(value["fixed"]))
        raise ValidationError(f"bad schedule value: {value!r}")


@dataclass(frozen=True)
class DiffusionState:
    """Partially masked sequence at noise level ``t``.

    ``tokens`` holds unit ids with MASK (-1) at hidden positions and has
    exactly ``target_len`` entries.
    """

    tokens: tuple[int, ...]
    t: float
    target_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(x) for x in self.tokens))
        if len(self.tokens) != self.target_len:
            raise ValidationError(
                f"state has {len(self.tokens)} tokens but target_len {self.target_len}"
            )
        if not 0.0 <= self.t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {self.t}")
        for i, x in enumerate(self.tokens):
            if x != MASK and x < 0:
                raise ValidationError(f"token {x} at position {i} is neither MASK nor a unit id")

    def masked_positions(self) -> tuple[int, ...]:
        return tuple(i for i, x in enumerate(self.tokens) if x == MASK)

    def visible_positions(self) -> tuple[int, ...]:
        return tuple(i for i, x in enumerate(self.tokens) if x != MASK)


class Denoiser(Protocol):
    """Predicts per-position unit distributions for masked positions.

    ``predict`` must return a distribution over ``[0, vocab_size)`` for every
    masked position of ``state`` and nothing else, must not mutate its
    arguments, and must be deterministic. Implementations are read-only after
    construction so evaluation loops may share them.
    """

    @property
    def vocab_size(self) -> int: ...

    def predict(self, state: DiffusionState, ctx) -> Mapping[int, np.ndarray]: ...


class LossStrategy(enum.Enum):
    """Which positions contribute to the training loss."""

    ALL = "all"
    MASKED_ONLY = "masked_only"
    MASKED_NONTRIVIAL = "masked_nontrivial"

    @classmethod
    def parse(cls, value: str) -> "LossStrategy":
        try:
            return cls(value)
        except ValueError:
            raise ValidationError(
                f"unknown loss strategy {value!r}; expected one of "
                f"{[s.value for s in cls]}"
            ) from None


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings.

    ``unmask_rule`` is ``confidence`` (commit the most confident draws first)
    or ``random`` (commit a uniformly chosen subset). ``temperature`` scales
    the predicted distributions before drawing; zero means argmax with ties
    to the lowest unit id.
    """

    nfe: int
    unmask_rule: str = "confidence"
    temperature: float = 1.0
    seed: int = 0
    schedule: MaskSchedule = field(default_factory=MaskSchedule.linear)

    def __post_init__(self):
        if self.nfe < 1:
            raise ValidationError(f"nfe must be >= 1, got {self.nfe}")
        if self.unmask_rule not in ("confidence", "random"):
            raise ValidationError(f"unknown unmask rule {self.unmask_rule!r}")
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")

    def to_json(self) -> str:
        obj = {
            "nfe": self.nfe,
            "unmask_rule": self.unmask_rule,
            "temperature": self.temperature,
            "seed": self.seed,
            "schedule": self.schedule.to_json_value(),
        }
        return json.dumps(obj, sort_keys=True, separators=(", ", ": "))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SamplerConfig":
        if not isinstance(obj, dict):
            raise ValidationError("sampler config must be a JSON object")
        known = {"nfe", "unmask_rule", "temperature", "seed", "schedule"}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown sampler config keys: {sorted(unknown)}")
        if "nfe" not in obj:
            raise ValidationError("sampler config requires 'nfe'")
        return cls(
            nfe=int(obj["nfe"]),
            unmask_rule=obj.get("unmask_rule", "confidence"),
            temperature=float(obj.get("temperature", 1.0)),
            seed=int(obj.get("seed", 0)),
            schedule=MaskSchedule.from_json_value(obj.get("schedule", "linear")),
        )

    @classmethod
    def from_json(cls, text: str) -> "SamplerConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid sampler config JSON: {exc}") from exc
        return cls.from_json_obj(obj)


def mask_with_rng(
    seq: UnitSequence, t: float, schedule: MaskSchedule, rng: np.random.Generator
) -> DiffusionState:
    """Mask each position independently with probability ``gamma(t)``."""
    gamma = schedule.gamma(t)
    u = rng.random(len(seq))
    tokens = tuple(MASK if u[i] < gamma else x for i, x in enumerate(seq.units))
    return DiffusionState(tokens, float(t), len(seq))


def forward_mask(seq: UnitSequence, t: float, schedule: MaskSchedule, seed: int) -> DiffusionState:
    """Seeded forward corruption; reproducible for equal arguments."""
    if len(seq) == 0:
        raise ValidationError("cannot mask an empty sequence")
    return mask_with_rng(seq, t, schedule, rng_from(seed))


def classify_trivial(state: DiffusionState, truth: UnitSequence) -> frozenset[int]:
    """Masked positions whose run in ``truth`` has a visible member.

    Such positions are recoverable by copying a neighbor, so excluding them
    concentrates the loss on genuinely hidden content.
    """
    if len(truth) != state.target_len:
        raise ValidationError(
            f"truth length {len(truth)} does not match target_len {state.target_len}"
        )
    for i, x in enumerate(state.tokens):
        if x != MASK and x != truth.units[i]:
            raise ValidationError(
                f"state disagrees with truth at visible position {i}: {x} != {truth.units[i]}"
            )
    rl = to_runs(truth)
    run_of = np.empty(len(truth), dtype=np.int64)
    pos = 0
    for run_idx, (_, count) in enumerate(rl.runs):
        run_of[pos : pos + count] = run_idx
        pos += count
    visible_runs = {int(run_of[i]) for i, x in enumerate(state.tokens) if x != MASK}
    return frozenset(
        i for i, x in enumerate(state.tokens) if x == MASK and int(run_of[i]) in visible_runs
    )


@dataclass(frozen=True)
class MaskedLossResult:
    """Mean smoothed cross-entropy plus per-position contributions.

    ``empty_scoring_set`` flags states where the strategy scored nothing;
    the loss is then defined as zero so trainers can skip the step.
    """

    loss: float
    per_position: dict[int, float]
    empty_scoring_set: bool


def scoring_positions(
    state: DiffusionState, truth: UnitSequence, strategy: LossStrategy
) -> tuple[int, ...]:
    """Positions the strategy scores, in ascending order."""
    if strategy is LossStrategy.ALL:
        return tuple(range(state.target_len))
    masked = state.masked_positions()
    if strategy is LossStrategy.MASKED_ONLY:
        return masked
    trivial = classify_trivial(state, truth)
    return tuple(i for i in masked if i not in trivial)


def smoothed_target(true_unit: int, vocab_size: int, label_smoothing: float) -> np.ndarray:
    """Label-smoothed one-hot: ``1 - eps`` on truth, ``eps/(V-1)`` elsewhere."""
    if not 0.0 <= label_smoothing < 1.0:
        raise ValidationError(f"label smoothing must lie in [0, 1), got {label_smoothing}")
    if vocab_size == 1:
        return np.ones(1)
    q = np.full(vocab_size, label_smoothing / (vocab_size - 1))
    q[true_unit] = 1.0 - label_smoothing
    return q


def masked_ce_loss(
    predictions: Mapping[int, np.ndarray],
    truth: UnitSequence,
    state: DiffusionState,
    strategy: LossStrategy = LossStrategy.MASKED_ONLY,
    label_smoothing: float = 0.01,
) -> MaskedLossResult:
    """Mean label-smoothed cross-entropy over the strategy's scoring set.

    ``predictions`` must cover every scored position with a distribution over
    ``[0, truth.vocab_size)``. An empty scoring set yields loss 0.0 with the
    ``empty_scoring_set`` flag raised.
    """
    if len(truth) != state.target_len:
        raise ValidationError(
            f"truth length {len(truth)} does not match target_len {state.target_len}"
        )
    positions = scoring_positions(state, truth, strategy)
    if not positions:
        return MaskedLossResult(0.0, {}, True)
    vocab = truth.vocab_size
    per_position: dict[int, float] = {}
    for i in positions:
        if i not in predictions:
            raise ValidationError(f"predictions missing scored position {i}")
        p = np.asarray(predictions[i], dtype=float)
        if p.shape != (vocab,):
            raise ValidationError(
                f"prediction at position {i} has shape {p.shape}, expected ({vocab},)"
            )
        if np.any(p < 0) or not math.isclose(float(p.sum()), 1.0, abs_tol=1e-6):
            raise ValidationError(f"prediction at position {i} is not a distribution")
        q = smoothed_target(truth.units[i], vocab, label_smoothing)
        with np.errstate(divide="ignore"):
            logs = np.log(p)
        contrib = float(-(q * np.where(q > 0, logs, 0.0)).sum())
        per_position[i] = contrib
    loss = float(sum(per_position.values()) / len(per_position))
    return MaskedLossResult(loss, per_position, False)


def _masked_count_after(target_len: int, gamma: float) -> int:
    return int(round(target_len * gamma))


def _draw_unit(p: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0.0:
        return int(np.argmax(p))  # argmax takes the lowest index on ties
    if temperature == 1.0:
        q = p
    else:
        q = p ** (1.0 / temperature)
    c = np.cumsum(q / q.sum())
    idx = int(np.searchsorted(c, rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample(
    denoiser: Denoiser,
    ctx,
    target_len: int,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> UnitSequence:
    """Generate ``target_len`` units by iterative unmasking.

    Starts fully masked at t = 1 and walks ``t_k = 1 - k/nfe`` for k = 1..nfe,
    keeping ``round(target_len * gamma(t_k))`` positions masked after step k
    and none after the final step. Each step draws a unit per masked position
    from the temperature-scaled prediction, then commits the required number:
    the highest raw predicted probabilities first under ``confidence``, a
    uniform subset under ``random``. Deterministic given the seed.
    """
    if target_len < 1:
        raise ValidationError(f"target_len must be >= 1, got {target_len}")
    if rng is None:
        rng = rng_from(cfg.seed)
    vocab = denoiser.vocab_size
    tokens = np.full(target_len, MASK, dtype=np.int64)
    for k in range(1, cfg.nfe + 1):
        cur_masked = [i for i in range(target_len) if tokens[i] == MASK]
        if not cur_masked:
            break
        t_prev = 1.0 - (k - 1) / cfg.nfe
        t_k = 1.0 - k / cfg.nfe
        if k == cfg.nfe:
            n_after = 0
        else:
            n_after = min(
                _masked_count_after(target_len, cfg.schedule.gamma(t_k)), len(cur_masked)
            )
        n_commit = len(cur_masked) - n_after
        state = DiffusionState(tuple(int(x) for x in tokens), t_prev, target_len)
        preds = denoiser.predict(state, ctx)
        if set(preds) != set(cur_masked):
            raise ValidationError(
                "denoiser predictions must cover exactly the masked positions"
            )
        draws: dict[int, int] = {}
        confidence: dict[int, float] = {}
        for i in cur_masked:
            p = np.asarray(preds[i], dtype=float)
            if p.shape != (vocab,):
                raise ValidationError(
                    f"prediction at position {i} has shape {p.shape}, expected ({vocab},)"
                )
            u = _draw_unit(p, cfg.temperature, rng)
            draws[i] = u
            confidence[i] = float(p[u])
        if n_commit <= 0:
            continue
        if cfg.unmask_rule == "confidence":
            ranked = sorted(cur_masked, key=lambda i: (-confidence[i], i))
            commit = ranked[:n_commit]
        else:
            commit = rng.choice(np.asarray(cur_masked), size=n_commit, replace=False)
        for i in commit:
            tokens[int(i)] = draws[int(i)]
    return UnitSequence(tuple(int(x) for x in tokens), vocab)


def duration_sweep(
    denoiser: Denoiser,
    ctx,
    base_len: int,
    ratios: Sequence[float],
    cfg: SamplerConfig,
) -> list[UnitSequence]:
    """Sample once per ratio at length ``round(base_len * ratio)``.

    Each RNG stream is derived from the rounded target length, so the sweep
    is deterministic given the config seed, insensitive to ratio order, and
    ratios that round to the same length give the same output.
    """
    if base_len < 1:
        raise ValidationError(f"base_len must be >= 1, got {base_len}")
    outputs: list[UnitSequence] = []
    for ratio in ratios:
        if ratio <= 0:
            raise ValidationError(f"ratio must be positive, got {ratio}")
        n = int(round(base_len * float(ratio)))
        if n < 1:
            raise ValidationError(f"ratio {ratio} rounds length {base_len} down to zero")
        outputs.append(sample(denoiser, ctx, n, cfg, rng=rng_from(cfg.seed, n)))
    return outputs
