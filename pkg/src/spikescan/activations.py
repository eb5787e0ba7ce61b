"""Power-of-two piecewise activations and their deviation certificates.

``pow2_softplus`` and ``pow2_silu`` replace softplus/SiLU with branches built
from 2**x so that fixed-point hardware can evaluate them with shifts and adds.
Branch constants are derived here from their closed forms (never hard-coded
decimals) by solving for continuity at the breakpoint:

* softplus variant: below ``SOFTPLUS_CUT`` use 2**x, above use x + shift.
  The cut is where d/dx 2**x == 1, i.e. x = log2(1/ln 2).
* SiLU variant: below ``SILU_CUT`` use -(2**x), above use 2**(-x-1) + x + shift.
  The cut is where the two branch derivatives agree.

Both approximations stay within certified uniform bounds of the smooth
reference functions; ``verify_deviation_bounds`` re-checks the bounds on a
dense grid and reports the empirical maxima and their locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm

LN2 = math.log(2.0)

# Continuity/derivative-matching constants, from closed forms.
SOFTPLUS_CUT = math.log2(1.0 / LN2)
SOFTPLUS_SHIFT = 1.0 / LN2 - SOFTPLUS_CUT

_SILU_ROOT = math.sqrt(1.0 + 2.0 * LN2 * LN2)
SILU_CUT = math.log2((_SILU_ROOT - 1.0) / (2.0 * LN2))
SILU_SHIFT = -_SILU_ROOT / LN2 - SILU_CUT

# Certified uniform deviation bounds against the smooth references.
SOFTPLUS_VALUE_BOUND = 0.914
SOFTPLUS_GRAD_BOUND = 0.371
SILU_VALUE_BOUND = 0.316
SILU_GRAD_BOUND = 0.263


# --- smooth references ------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def softplus_grad(x):
    return _sigmoid(x)


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def silu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- power-of-two approximations --------------------------------------------


def pow2_softplus(x):
    """Piecewise softplus: 2**x below the cut, x + shift above (continuous)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < SOFTPLUS_CUT, np.exp2(x), x + SOFTPLUS_SHIFT)


def pow2_softplus_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < SOFTPLUS_CUT, LN2 * np.exp2(x), 1.0)


def pow2_silu(x):
    """Piecewise SiLU: -(2**x) below the cut, 2**(-x-1) + x + shift above."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < SILU_CUT, -np.exp2(x), np.exp2(-x - 1.0) + x + SILU_SHIFT)


def pow2_silu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < SILU_CUT, -LN2 * np.exp2(x), 1.0 - LN2 * np.exp2(-x - 1.0))


# --- taped variants ---------------------------------------------------------


def pow2_softplus_t(x: nm.Tensor) -> nm.Tensor:
    return nm.unary(x, pow2_softplus, pow2_softplus_grad)


def pow2_silu_t(x: nm.Tensor) -> nm.Tensor:
    return nm.unary(x, pow2_silu, pow2_silu_grad)


# --- deviation verification --------------------------------------------------


@dataclass
class DeviationReport:
    """Empirical max |approx - reference| for values and derivatives.

    ``*_argmax`` are the grid points attaining each maximum.  ``passed`` is
    true when every empirical maximum sits within its certified bound.
    """

    grid_lo: float
    grid_hi: float
    grid_step: float
    softplus_value_max: float
    softplus_value_argmax: float
    softplus_grad_max: float
    softplus_grad_argmax: float
    silu_value_max: float
    silu_value_argmax: float
    silu_grad_max: float
    silu_grad_argmax: float

    @property
    def passed(self) -> bool:
        return (
            self.softplus_value_max <= SOFTPLUS_VALUE_BOUND
            and self.softplus_grad_max <= SOFTPLUS_GRAD_BOUND
            and self.silu_value_max <= SILU_VALUE_BOUND
            and self.silu_grad_max <= SILU_GRAD_BOUND
        )

    def to_text(self) -> str:
        rows = [
            ("softplus value", self.softplus_value_max, self.softplus_value_argmax, SOFTPLUS_VALUE_BOUND),
            ("softplus grad ", self.softplus_grad_max, self.softplus_grad_argmax, SOFTPLUS_GRAD_BOUND),
            ("silu value    ", self.silu_value_max, self.silu_value_argmax, SILU_VALUE_BOUND),
            ("silu grad     ", self.silu_grad_max, self.silu_grad_argmax, SILU_GRAD_BOUND),
        ]
        lines = [f"deviation grid [{self.grid_lo}, {self.grid_hi}] step {self.grid_step}"]
        for name, got, at, bound in rows:
            status = "ok" if got <= bound else "EXCEEDED"
            lines.append(f"  {name}  max {got:.6f} at x={at:+.4f}  bound {bound:.3f}  {status}")
        return "\n".join(lines)


def branch_continuity_gaps() -> dict[str, float]:
    """Branch disagreement of each approximation at its cut, value and slope.

    Evaluates both branches exactly at the breakpoint; the constants are
    closed-form continuity solutions so every gap is float rounding only.
    """
    c = SOFTPLUS_CUT
    gaps = {
        "softplus_value": abs(float(np.exp2(c)) - (c + SOFTPLUS_SHIFT)),
        "softplus_grad": abs(LN2 * float(np.exp2(c)) - 1.0),
    }
    c = SILU_CUT
    gaps["silu_value"] = abs(-float(np.exp2(c)) - (float(np.exp2(-c - 1.0)) + c + SILU_SHIFT))
    gaps["silu_grad"] = abs(-LN2 * float(np.exp2(c)) - (1.0 - LN2 * float(np.exp2(-c - 1.0))))
    return gaps


def grid_points(lo: float, hi: float, step: float) -> np.ndarray:
    """Inclusive uniform grid from lo to hi."""
    if hi <= lo or step <= 0:
        raise ValueError(f"grid_points: bad grid [{lo}, {hi}] step {step}")
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def verify_deviation_bounds(lo: float = -10.0, hi: float = 10.0, step: float = 1e-3) -> DeviationReport:
    """Scan the grid and report max deviations of both approximations."""
    x = grid_points(lo, hi, step)

    def peak(diff):
        i = int(np.argmax(np.abs(diff)))
        return float(np.abs(diff[i])), float(x[i])

    sp_v, sp_v_at = peak(pow2_softplus(x) - softplus(x))
    sp_g, sp_g_at = peak(pow2_softplus_grad(x) - softplus_grad(x))
    si_v, si_v_at = peak(pow2_silu(x) - silu(x))
    si_g, si_g_at = peak(pow2_silu_grad(x) - silu_grad(x))
    return DeviationReport(
        grid_lo=lo,
        grid_hi=hi,
        grid_step=step,
        softplus_value_max=sp_v,
        softplus_value_argmax=sp_v_at,
        softplus_grad_max=sp_g,
        softplus_grad_argmax=sp_g_at,
        silu_value_max=si_v,
        silu_value_argmax=si_v_at,
        silu_grad_max=si_g,
        silu_grad_argmax=si_g_at,
    )
