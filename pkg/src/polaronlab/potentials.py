"""Interaction profiles and numerical certificates for the model assumptions.

The gas-impurity coupling is specified through a rotationally invariant
momentum profile v(|k|) that must sit below the screened envelope
(|k|^2 + R)^(-1). The optional direct impurity-impurity potential w is
either absent or a bounded even table.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ENVELOPE_SLACK = 1e-12


def yukawa_hat(k_abs, R: float):
    """Screened-interaction profile (|k|^2 + R)^(-1); R > 0."""
    if R <= 0:
        raise ValueError("screening parameter R must be positive")
    k_abs = np.asarray(k_abs, dtype=float)
    out = 1.0 / (k_abs**2 + R)
    return float(out) if out.ndim == 0 else out


def step_hat(k_abs):
    """Band-limited profile: 1/2 on |k| <= 1, zero beyond (boundary included)."""
    k_abs = np.asarray(k_abs, dtype=float)
    out = np.where(k_abs**2 <= 1.0 + ENVELOPE_SLACK, 0.5, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PotentialSpec:
    """Rotationally invariant gas-impurity profile |k| -> v(|k|).

    `R` is the screening parameter of the certified envelope (k^2+R)^(-1).
    The evaluator takes |k| (scalar or array) and returns real values.
    """

    kind: str
    R: float
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def hat(self, k_abs):
        """Profile value at radius |k|; vectorized."""
        return self.evaluator(np.asarray(k_abs, dtype=float))

    def hat_sq(self, k_abs):
        v = self.hat(k_abs)
        return v * v

    @property
    def support_radius(self) -> float:
        """Radius beyond which the profile is exactly zero (inf if none)."""
        return getattr(self.evaluator, "support_radius", np.inf)


def _with_support(fn, radius):
    fn.support_radius = radius
    return fn


def yukawa_spec(R: float = 1.0) -> PotentialSpec:
    return PotentialSpec(kind="yukawa", R=float(R), evaluator=lambda k: yukawa_hat(k, R))


def step_spec() -> PotentialSpec:
    # envelope holds with R = 1: 1/2 <= (k^2+1)^(-1) on the support k^2 <= 1
    return PotentialSpec(kind="step", R=1.0, evaluator=_with_support(step_hat, 1.0))


def zero_spec() -> PotentialSpec:
    """Decoupled gas (v = 0); useful for trivial-limit checks."""
    return PotentialSpec(
        kind="zero", R=1.0, evaluator=_with_support(lambda k: np.zeros_like(k), 0.0)
    )


def table_spec(path, R: float) -> PotentialSpec:
    """Profile from a two-column text file (|k|, value).

    Linear interpolation between samples, zero beyond the last radius.
    """
    data = np.loadtxt(path, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError("table file must have two columns: |k|, value")
    radii, values = data[:, 0], data[:, 1]
    if (np.diff(radii) <= 0).any():
        raise ValueError("table radii must be strictly increasing")

    def evaluator(k):
        return np.interp(k, radii, values, left=values[0], right=0.0)

    return PotentialSpec(
        kind="table", R=float(R), evaluator=_with_support(evaluator, float(radii[-1]))
    )


def spec_by_id(spec_id: str, R: float = 1.0) -> PotentialSpec:
    """Resolve a config identifier ('yukawa', 'step', 'zero') to a spec."""
    if spec_id == "yukawa":
        return yukawa_spec(R)
    if spec_id == "step":
        return step_spec()
    if spec_id == "zero":
        return zero_spec()
    raise ValueError(f"unknown potential spec id {spec_id!r}")


# --- assumption certificates -------------------------------------------------


def certify_assumptions(spec: PotentialSpec, R: float | None = None,
                        sample_count: int = 1000) -> dict:
    """Sample-based certificate for the envelope and core-window assumptions.

    Checks |v(k)| <= (k^2+R)^(-1) on a logarithmic radius grid (0 plus
    10^-3..10^3) and the lower bound |v(k)| >= (1+R)^(-1) on k^2 <= 1.
    Raises on envelope violation; a missing core bound only warns since it
    is needed only by the attractive-core experiments.
    """
    if sample_count < 1000:
        raise ValueError("sample_count must be at least 1000")
    if R is None:
        R = spec.R
    grid = np.concatenate([[0.0], np.logspace(-3, 3, sample_count - 1)])
    values = np.abs(spec.hat(grid))
    envelope = 1.0 / (grid**2 + R)
    violation = float((values - envelope).max())
    if violation > ENVELOPE_SLACK:
        raise ValueError(
            f"assumption Av violated: profile exceeds (k^2+{R})^(-1) "
            f"by {violation:.3e}"
        )
    core = grid <= 1.0
    core_margin = float((np.abs(spec.hat(grid[core])) - 1.0 / (1.0 + R)).min())
    core_ok = core_margin >= -ENVELOPE_SLACK
    if not core_ok:
        warnings.warn(
            f"core lower bound |v| >= 1/(1+R) fails by {-core_margin:.3e}; "
            "attractive-core experiments need it",
            stacklevel=2,
        )
    return {
        "kind": spec.kind,
        "R": R,
        "sample_count": sample_count,
        "envelope_violation": violation,
        "envelope_ok": True,
        "core_margin": core_margin,
        "core_ok": bool(core_ok),
    }


# --- impurity-impurity potential --------------------------------------------


@dataclass(frozen=True)
class ImpurityPotentialSpec:
    """Direct impurity pair potential w, either zero or a bounded even table.

    For bounded w the certified relative-bound constant is c = sup|w|^2,
    which must stay below 1.
    """

    kind: str
    sup_abs: float
    relative_bound_c: float
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def value(self, x):
        """w at signed separation x (scalar or array, per-axis displacement norm)."""
        return self.evaluator(np.asarray(x, dtype=float))


def zero_impurity() -> ImpurityPotentialSpec:
    return ImpurityPotentialSpec(
        kind="zero", sup_abs=0.0, relative_bound_c=0.0,
        evaluator=lambda x: np.zeros_like(x),
    )


def bounded_impurity(fn: Callable[[np.ndarray], np.ndarray],
                     sample_max: float, samples: int = 4096) -> ImpurityPotentialSpec:
    """Certify a callable w on [-sample_max, sample_max]: even, sup|w| < 1."""
    x = np.linspace(-sample_max, sample_max, samples)
    vals = np.asarray(fn(x), dtype=float)
    if not np.allclose(vals, vals[::-1], atol=1e-10):
        raise ValueError("impurity potential must be even")
    sup = float(np.abs(vals).max())
    if sup >= 1.0:
        raise ValueError(
            f"bounded impurity potential needs sup|w| < 1 for the relative "
            f"bound certificate, got {sup:.3f}"
        )
    return ImpurityPotentialSpec(
        kind="bounded", sup_abs=sup, relative_bound_c=sup * sup, evaluator=fn
    )
