"""Conditional flow-matching math core.

The probability path interpolates ``phi_t = (1 - (1 - sigma_min) t) x0 +
t x1``; its target velocity ``x1 - (1 - sigma_min) x0`` does not depend on
t. A per-time-bin affine regressor is the reference model family: fitting it
on a diagonal-Gaussian testbed has a closed-form answer (Gaussian
conditioning is affine), which makes the whole pipeline checkable without
any neural machinery.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DataError, DegenerateBinError, ValidationError
from .seeding import rng_from

DEFAULT_SIGMA_MIN = 1e-4


@dataclass(frozen=True, eq=False)
class FlowSample:
    """One training tuple: endpoints, time, and conditioning vector."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    cond: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x1", np.asarray(self.x1, dtype=float))
        object.__setattr__(self, "cond", np.asarray(self.cond, dtype=float))
        if self.x0.ndim != 1 or self.x1.ndim != 1 or self.cond.ndim != 1:
            raise ValidationError("flow sample fields must be 1-d vectors")
        if self.x0.shape != self.x1.shape:
            raise ValidationError(
                f"x0 and x1 dims differ: {self.x0.shape} vs {self.x1.shape}"
            )
        if not 0.0 <= self.t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {self.t}")

    def phi_t(self, sigma_min: float = DEFAULT_SIGMA_MIN) -> np.ndarray:
        """Path point of this sample, exact in (x0, x1, t, sigma_min)."""
        return interpolate(self.x0, self.x1, self.t, sigma_min)

    def u_t(self, sigma_min: float = DEFAULT_SIGMA_MIN) -> np.ndarray:
        """Velocity target of this sample."""
        return target_velocity(self.x0, self.x1, sigma_min)


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float, sigma_min: float = DEFAULT_SIGMA_MIN) -> np.ndarray:
    """Path point ``(1 - (1 - sigma_min) t) x0 + t x1``."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    return (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1


def target_velocity(x0: np.ndarray, x1: np.ndarray, sigma_min: float = DEFAULT_SIGMA_MIN) -> np.ndarray:
    """Regression target ``x1 - (1 - sigma_min) x0``; constant in t."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    return x1 - (1.0 - sigma_min) * x0


def build_condition(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Ordered concatenation of conditioning vectors; empty gives shape (0,)."""
    if not parts:
        return np.zeros(0)
    flat = [np.ravel(np.asarray(p, dtype=float)) for p in parts]
    return np.concatenate(flat)


class VectorFieldModel(Protocol):
    """Velocity field ``v(phi, t, cond)``; deterministic, no mutation."""

    def velocity(self, phi: np.ndarray, t: float, cond: np.ndarray | None = None) -> np.ndarray: ...


class AffineFieldModel(BaseEstimator):
    """Per-time-bin affine velocity model fitted by ridge least squares.

    Time splits into ``bins`` equal intervals; within bin b the field is
    ``v = W_b z + c_b`` with ``z = concat(phi, cond)``. Fitting solves the
    normal equations with ``ridge`` added to the diagonal, so collapsed
    directions stay finite; a bin with fewer samples than coefficients is
    refused by name. The closed form makes the fit invariant to sample order
    up to floating-point summation noise.
    """

    def __init__(self, bins: int = 32, ridge: float = 1e-8, sigma_min: float = DEFAULT_SIGMA_MIN):
        self.bins = bins
        self.ridge = ridge
        self.sigma_min = sigma_min

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("AffineFieldModel is not fitted")

    def bin_of(self, t: float) -> int:
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {t}")
        return min(self.bins - 1, int(t * self.bins))

    def fit(self, samples: Sequence[FlowSample], y=None) -> "AffineFieldModel":
        if self.bins < 1:
            raise ValidationError(f"bins must be >= 1, got {self.bins}")
        if self.ridge < 0:
            raise ValidationError(f"ridge must be >= 0, got {self.ridge}")
        if not samples:
            raise ValidationError("cannot fit on an empty sample list")
        dim = samples[0].x0.shape[0]
        cond_dim = samples[0].cond.shape[0]
        for s in samples:
            if s.x0.shape[0] != dim or s.cond.shape[0] != cond_dim:
                raise ValidationError("samples have inconsistent dimensions")
        n = len(samples)
        phis = np.empty((n, dim))
        us = np.empty((n, dim))
        conds = np.empty((n, cond_dim))
        ts = np.empty(n)
        for i, s in enumerate(samples):
            phis[i] = interpolate(s.x0, s.x1, s.t, self.sigma_min)
            us[i] = target_velocity(s.x0, s.x1, self.sigma_min)
            conds[i] = s.cond
            ts[i] = s.t
        bins_idx = np.minimum((ts * self.bins).astype(int), self.bins - 1)
        p = dim + cond_dim
        weights = np.empty((self.bins, dim, p))
        offsets = np.empty((self.bins, dim))
        for b in range(self.bins):
            mask = bins_idx == b
            n_b = int(mask.sum())
            if n_b < p + 1:
                raise DegenerateBinError(
                    b, f"time bin {b} has {n_b} samples, needs at least {p + 1}"
                )
            z = np.concatenate([phis[mask], conds[mask], np.ones((n_b, 1))], axis=1)
            a = z.T @ z + self.ridge * np.eye(p + 1)
            rhs = z.T @ us[mask]
            theta = np.linalg.solve(a, rhs)  # (p + 1, dim)
            weights[b] = theta[:p].T
            offsets[b] = theta[p]
        self.weights_ = weights
        self.offsets_ = offsets
        self.dim_ = dim
        self.cond_dim_ = cond_dim
        return self

    def velocity(self, phi: np.ndarray, t: float, cond: np.ndarray | None = None) -> np.ndarray:
        """Field value at ``phi``; accepts a single vector or an (n, d) batch."""
        self._check_fitted()
        phi = np.asarray(phi, dtype=float)
        b = self.bin_of(t)
        if cond is None:
            cond = np.zeros(self.cond_dim_)
        cond = np.asarray(cond, dtype=float)
        if cond.shape[-1] != self.cond_dim_ and not (self.cond_dim_ == 0 and cond.size == 0):
            raise ValidationError(
                f"cond has dimension {cond.shape[-1]}, model expects {self.cond_dim_}"
            )
        single = phi.ndim == 1
        phi2 = phi[None, :] if single else phi
        if phi2.shape[1] != self.dim_:
            raise ValidationError(f"phi has dimension {phi2.shape[1]}, model expects {self.dim_}")
        cond2 = np.broadcast_to(cond.reshape(-1, self.cond_dim_), (phi2.shape[0], self.cond_dim_)) if self.cond_dim_ else np.zeros((phi2.shape[0], 0))
        z = np.concatenate([phi2, cond2], axis=1)
        out = z @ self.weights_[b].T + self.offsets_[b]
        return out[0] if single else out

    def to_json_obj(self) -> dict:
        self._check_fitted()
        return {
            "format": "dubkit.affine-field/1",
            "bins": self.bins,
            "ridge": self.ridge,
            "sigma_min": self.sigma_min,
            "dim": self.dim_,
            "cond_dim": self.cond_dim_,
            "weights": [w.ravel().tolist() for w in self.weights_],  # row-major (dim, p)
            "offsets": [c.tolist() for c in self.offsets_],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AffineFieldModel":
        if not isinstance(obj, dict) or obj.get("format") != "dubkit.affine-field/1":
            raise DataError(f"not an affine-field model file (format {obj.get('format')!r})")
        model = cls(bins=int(obj["bins"]), ridge=float(obj["ridge"]), sigma_min=float(obj["sigma_min"]))
        dim = int(obj["dim"])
        cond_dim = int(obj["cond_dim"])
        p = dim + cond_dim
        weights = np.asarray([np.asarray(w).reshape(dim, p) for w in obj["weights"]])
        offsets = np.asarray(obj["offsets"], dtype=float)
        if weights.shape != (model.bins, dim, p) or offsets.shape != (model.bins, dim):
            raise DataError("affine-field model arrays have inconsistent shapes")
        model.weights_ = weights
        model.offsets_ = offsets
        model.dim_ = dim
        model.cond_dim_ = cond_dim
        return model


def fit_affine_field(
    samples: Sequence[FlowSample],
    bins: int = 32,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    ridge: float = 1e-8,
) -> AffineFieldModel:
    """Fit the per-bin affine field on ``samples``."""
    return AffineFieldModel(bins=bins, ridge=ridge, sigma_min=sigma_min).fit(samples)


def cfm_loss(
    model: VectorFieldModel, batch: Sequence[FlowSample], sigma_min: float = DEFAULT_SIGMA_MIN
) -> float:
    """Mean squared error ``E ||u_t - v(phi_t, t, cond)||^2`` over the batch."""
    if not batch:
        raise ValidationError("cannot evaluate the loss on an empty batch")
    total = 0.0
    for s in batch:
        phi = interpolate(s.x0, s.x1, s.t, sigma_min)
        u = target_velocity(s.x0, s.x1, sigma_min)
        v = model.velocity(phi, s.t, s.cond)
        diff = u - np.asarray(v, dtype=float)
        total += float(diff @ diff)
    return total / len(batch)


def euler_sample(
    model: VectorFieldModel,
    x0: np.ndarray,
    steps: int,
    cond: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate the field from t = 0 to 1 with explicit Euler steps.

    ``x <- x + (1/steps) * v(x, t, cond)`` at ``t = k/steps``. Accepts a
    single vector or an (n, d) batch when the model supports batched calls.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=float)
    h = 1.0 / steps
    for k in range(steps):
        x = x + h * np.asarray(model.velocity(x, k * h, cond), dtype=float)
    return x


# ---------------------------------------------------------------------------
# Diagonal-Gaussian testbed with closed-form answers


@dataclass(frozen=True)
class GaussianTestbed:
    """Independent diagonal Gaussians for ``x0`` and ``x1``."""

    mu0: tuple[float, ...]
    sigma0: tuple[float, ...]
    mu1: tuple[float, ...]
    sigma1: tuple[float, ...]

    def __post_init__(self):
        for name in ("mu0", "sigma0", "mu1", "sigma1"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        d = len(self.mu0)
        if not (len(self.sigma0) == len(self.mu1) == len(self.sigma1) == d) or d == 0:
            raise ValidationError("testbed vectors must share a positive dimension")
        if any(s <= 0 for s in self.sigma0 + self.sigma1):
            raise ValidationError("testbed standard deviations must be positive")

    @property
    def dim(self) -> int:
        return len(self.mu0)

    @classmethod
    def default_1d(cls) -> "GaussianTestbed":
        return cls((0.0,), (1.0,), (5.0,), (1.0,))

    def to_json_obj(self) -> dict:
        return {
            "format": "dubkit.gaussian-testbed/1",
            "mu0": list(self.mu0),
            "sigma0": list(self.sigma0),
            "mu1": list(self.mu1),
            "sigma1": list(self.sigma1),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "GaussianTestbed":
        if not isinstance(obj, dict) or obj.get("format") != "dubkit.gaussian-testbed/1":
            raise DataError(f"not a gaussian-testbed file (format {obj.get('format')!r})")
        return cls(tuple(obj["mu0"]), tuple(obj["sigma0"]), tuple(obj["mu1"]), tuple(obj["sigma1"]))


def sample_flow_batch(
    testbed: GaussianTestbed, n: int, seed: int = 0
) -> list[FlowSample]:
    """Independent draws ``x0 ~ N0``, ``x1 ~ N1``, ``t ~ U[0, 1)``."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = rng_from(seed)
    d = testbed.dim
    x0 = rng.normal(testbed.mu0, testbed.sigma0, size=(n, d))
    x1 = rng.normal(testbed.mu1, testbed.sigma1, size=(n, d))
    ts = rng.random(n)
    return [FlowSample(x0[i], x1[i], float(ts[i])) for i in range(n)]


def analytic_affine_coefficients(
    testbed: GaussianTestbed, t: float, sigma_min: float = DEFAULT_SIGMA_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate slope and intercept of ``E[u | phi_t]`` at time t.

    With independent Gaussians the pair (u, phi_t) is jointly Gaussian per
    coordinate, so the conditional expectation is affine:
    slope = Cov(u, phi) / Var(phi), intercept = E[u] - slope E[phi].
    """
    a = 1.0 - (1.0 - sigma_min) * t
    b = 1.0 - sigma_min
    mu0 = np.asarray(testbed.mu0)
    mu1 = np.asarray(testbed.mu1)
    v0 = np.asarray(testbed.sigma0) ** 2
    v1 = np.asarray(testbed.sigma1) ** 2
    var_phi = a * a * v0 + t * t * v1
    cov = t * v1 - a * b * v0
    slope = cov / var_phi
    e_u = mu1 - b * mu0
    e_phi = a * mu0 + t * mu1
    intercept = e_u - slope * e_phi
    return slope, intercept


def analytic_residual_variance(
    testbed: GaussianTestbed, t: float, sigma_min: float = DEFAULT_SIGMA_MIN
) -> np.ndarray:
    """Per-coordinate ``Var(u | phi_t)``: what the optimal field cannot explain."""
    a = 1.0 - (1.0 - sigma_min) * t
    b = 1.0 - sigma_min
    v0 = np.asarray(testbed.sigma0) ** 2
    v1 = np.asarray(testbed.sigma1) ** 2
    var_phi = a * a * v0 + t * t * v1
    cov = t * v1 - a * b * v0
    return (b * b * v0 + v1) - cov * cov / var_phi


def endpoint_marginal(testbed: GaussianTestbed, sigma_min: float = DEFAULT_SIGMA_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``phi_1 = sigma_min x0 + x1`` per coordinate."""
    mu = sigma_min * np.asarray(testbed.mu0) + np.asarray(testbed.mu1)
    var = (sigma_min**2) * np.asarray(testbed.sigma0) ** 2 + np.asarray(testbed.sigma1) ** 2
    return mu, var


@dataclass(frozen=True)
class FlowCheckResult:
    """One named check with its measured error and tolerance."""

    name: str
    value: float
    tolerance: float
    passed: bool


def gaussian_field_checks(
    testbed: GaussianTestbed | None = None,
    n_samples: int = 100_000,
    bins: int = 32,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    seed: int = 0,
    euler_steps: int = 100,
    transport_samples: int = 10_000,
    field_tolerance: float = 0.02,
    loss_tolerance: float = 0.02,
    mean_tolerance: float = 0.05,
    var_tolerance: float = 0.10,
) -> tuple[AffineFieldModel, list[FlowCheckResult]]:
    """Fit on the testbed and measure agreement with the closed forms.

    Checks: RMS field error against the analytic conditional expectation on
    a grid of typical (t, phi) points, relative to the field's RMS magnitude;
    training loss against the mean analytic residual variance; Euler
    transport mean and variance against the endpoint marginal.
    """
    testbed = testbed or GaussianTestbed.default_1d()
    samples = sample_flow_batch(testbed, n_samples, seed=seed)
    model = fit_affine_field(samples, bins=bins, sigma_min=sigma_min)

    # field agreement on a grid: bin centers x phi within +/- 3 sd of the path marginal
    mu0 = np.asarray(testbed.mu0)
    mu1 = np.asarray(testbed.mu1)
    sq_err = 0.0
    sq_ref = 0.0
    n_pts = 0
    for b in range(bins):
        t = (b + 0.5) / bins
        slope, intercept = analytic_affine_coefficients(testbed, t, sigma_min)
        a = 1.0 - (1.0 - sigma_min) * t
        e_phi = a * mu0 + t * mu1
        sd_phi = np.sqrt(
            a * a * np.asarray(testbed.sigma0) ** 2 + t * t * np.asarray(testbed.sigma1) ** 2
        )
        for z in np.linspace(-3.0, 3.0, 13):
            phi = e_phi + z * sd_phi
            ref = slope * phi + intercept
            got = model.velocity(phi, t)
            sq_err += float(((got - ref) ** 2).sum())
            sq_ref += float((ref**2).sum())
            n_pts += 1
    field_rel = math.sqrt(sq_err / n_pts) / math.sqrt(sq_ref / n_pts)

    loss = cfm_loss(model, samples, sigma_min)
    # mean residual variance over t ~ U[0,1] by midpoint quadrature
    grid = (np.arange(512) + 0.5) / 512
    resid = float(
        np.mean([analytic_residual_variance(testbed, float(t), sigma_min).sum() for t in grid])
    )
    loss_rel = abs(loss - resid) / resid

    rng = rng_from(seed, 1)
    x0 = rng.normal(testbed.mu0, testbed.sigma0, size=(transport_samples, testbed.dim))
    x1_hat = euler_sample(model, x0, euler_steps)
    mu_ref, var_ref = endpoint_marginal(testbed, sigma_min)
    mean_rel = float(np.max(np.abs(x1_hat.mean(axis=0) - mu_ref) / np.abs(mu_ref)))
    var_rel = float(np.max(np.abs(x1_hat.var(axis=0) - var_ref) / var_ref))

    checks = [
        FlowCheckResult("field_rms_relative_error", field_rel, field_tolerance, field_rel <= field_tolerance),
        FlowCheckResult("loss_vs_residual_variance", loss_rel, loss_tolerance, loss_rel <= loss_tolerance),
        FlowCheckResult("euler_mean_relative_error", mean_rel, mean_tolerance, mean_rel <= mean_tolerance),
        FlowCheckResult("euler_var_relative_error", var_rel, var_tolerance, var_rel <= var_tolerance),
    ]
    return model, checks
