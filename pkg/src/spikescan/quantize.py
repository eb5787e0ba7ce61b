"""Learned-step-size quantizers with straight-through gradients.

A ``Quantizer`` owns a trainable step size ``alpha`` and offset ``beta`` and
maps reals onto ``2**bits`` integer codes:

    x_q = alpha * clip(round((x - beta) / alpha), Qn, Qp) + beta

Activation quantizers are asymmetric (codes 0 .. 2**bits - 1, beta trainable);
symmetric mode is available for signed data.  Two rounding modes exist:

* ``nearest``: round half away from zero (explicit quantization sites);
* ``floor``: floor with a +1e-9 grid-snap nudge, matching the integrate-and-
  fire spike count so spike-encode sites quantize identically in both the
  real-arithmetic and the spiking forward (the nudge compensates ties that
  land one ulp under the threshold, see spike.average_if_encode).

Backward is straight-through: gradients pass where the code was not clipped,
``alpha`` receives the learned-step-size rule (code - v inside the range, the
clip code outside), and ``beta`` collects gradient on clipped entries only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm

ALPHA_FLOOR = 1e-8
GRID_SNAP = 1e-9


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def floor_with_snap(v: np.ndarray) -> np.ndarray:
    """Floor with a tiny positive nudge so exact grid points stay put."""
    return np.floor(np.asarray(v, dtype=np.float64) + GRID_SNAP)


def init_step_size(x: np.ndarray) -> float:
    """Initial step size: mean of entries >= 0.5, else max(mean |x|, 1e-3)."""
    x = np.asarray(x, dtype=np.float64)
    big = x[x >= 0.5]
    if big.size:
        return float(big.mean())
    return float(max(np.mean(np.abs(x)), 1e-3))


@dataclass
class Quantizer:
    """Per-site quantization state; ``alpha``/``beta`` are tape leaves."""

    bits: int
    alpha: Optional[nm.Tensor] = None
    beta: Optional[nm.Tensor] = None
    symmetric: bool = False
    rounding: str = "nearest"  # "nearest" | "floor"
    train_alpha: bool = True
    train_beta: bool = True
    name: str = "q"

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"quantizer {self.name}: bits must be >= 1, got {self.bits}")
        if self.rounding not in ("nearest", "floor"):
            raise ValueError(f"quantizer {self.name}: unknown rounding {self.rounding!r}")
        if isinstance(self.alpha, (int, float)):
            self.alpha = nm.Tensor(float(self.alpha))
        if isinstance(self.beta, (int, float)):
            self.beta = nm.Tensor(float(self.beta))
        if self.alpha is not None:
            self.alpha.trainable = self.train_alpha
            self.alpha.name = f"{self.name}.alpha"
        if self.beta is None and self.alpha is not None:
            self.set_beta(0.0)
        elif self.beta is not None:
            self.beta.trainable = self.train_beta
            self.beta.name = f"{self.name}.beta"

    @property
    def initialized(self) -> bool:
        return self.alpha is not None

    @property
    def code_min(self) -> int:
        return -(2 ** (self.bits - 1)) if self.symmetric else 0

    @property
    def code_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2 ** self.bits - 1

    def set_alpha(self, value: float) -> None:
        self.alpha = nm.Tensor(float(value), trainable=self.train_alpha, name=f"{self.name}.alpha")

    def set_beta(self, value: float) -> None:
        self.beta = nm.Tensor(float(value), trainable=self.train_beta, name=f"{self.name}.beta")

    def calibrate(self, x: np.ndarray) -> None:
        """Set alpha from data (beta keeps its value, default 0)."""
        self.set_alpha(init_step_size(x))
        if self.beta is None:
            self.set_beta(0.0)

    def parameters(self) -> list[nm.Tensor]:
        ps = []
        if self.alpha is not None and self.train_alpha:
            ps.append(self.alpha)
        if self.beta is not None and self.train_beta:
            ps.append(self.beta)
        return ps

    def state(self) -> dict:
        if not self.initialized:
            raise RuntimeError(f"quantizer {self.name} has no calibrated step size")
        return {
            "bits": self.bits,
            "alpha": float(self.alpha.data),
            "beta": float(self.beta.data),
            "symmetric": self.symmetric,
            "rounding": self.rounding,
            "train_alpha": self.train_alpha,
            "train_beta": self.train_beta,
            "name": self.name,
        }

    @classmethod
    def from_state(cls, s: dict) -> "Quantizer":
        return cls(
            bits=int(s["bits"]),
            alpha=float(s["alpha"]),
            beta=float(s["beta"]),
            symmetric=bool(s["symmetric"]),
            rounding=str(s["rounding"]),
            train_alpha=bool(s["train_alpha"]),
            train_beta=bool(s["train_beta"]),
            name=str(s["name"]),
        )


@dataclass
class QuantizeContext:
    """Saved forward state needed by ``ste_backward``."""

    v: np.ndarray
    codes: np.ndarray
    mask_lo: np.ndarray
    mask_hi: np.ndarray
    alpha: float


def _check_usable(q: Quantizer) -> tuple[float, float]:
    if not q.initialized:
        raise RuntimeError(f"quantizer {q.name} used before calibration")
    a = float(q.alpha.data)
    b = float(q.beta.data)
    if a <= 0:
        raise ValueError(f"quantizer {q.name}: step size must be positive, got {a}")
    return a, b


def codes_of(x: np.ndarray, q: Quantizer) -> np.ndarray:
    """Integer codes for raw values (no tape)."""
    a, b = _check_usable(q)
    v = (np.asarray(x, dtype=np.float64) - b) / a
    r = round_half_away(v) if q.rounding == "nearest" else floor_with_snap(v)
    return np.clip(r, q.code_min, q.code_max)


def dequantize_codes(codes: np.ndarray, q: Quantizer) -> np.ndarray:
    a, b = _check_usable(q)
    return b + a * np.asarray(codes, dtype=np.float64)


def quantize_with_context(x: np.ndarray, q: Quantizer, smooth: bool = False) -> tuple[np.ndarray, QuantizeContext]:
    """Forward pass of the quantizer on raw values.

    ``smooth`` replaces rounding by identity inside the clip range (the
    straight-through surrogate used by finite-difference gradient checks).
    """
    a, b = _check_usable(q)
    x = np.asarray(x, dtype=np.float64)
    v = (x - b) / a
    if smooth:
        r = v
    elif q.rounding == "nearest":
        r = round_half_away(v)
    else:
        r = floor_with_snap(v)
    codes = np.clip(r, q.code_min, q.code_max)
    mask_lo = v < q.code_min
    mask_hi = v > q.code_max
    return a * codes + b, QuantizeContext(v=v, codes=codes, mask_lo=mask_lo, mask_hi=mask_hi, alpha=a)


def ste_backward(grad_out: np.ndarray, ctx: QuantizeContext) -> tuple[np.ndarray, float, float]:
    """Straight-through backward: returns (grad_x, grad_alpha, grad_beta)."""
    if ctx is None:
        raise ValueError("ste_backward called without a saved forward context")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != ctx.v.shape:
        raise ValueError(
            f"ste_backward: grad shape {grad_out.shape} does not match forward shape {ctx.v.shape}"
        )
    clipped = ctx.mask_lo | ctx.mask_hi
    grad_x = np.where(clipped, 0.0, grad_out)
    # Learned-step-size rule: clipped entries pull alpha toward the clip code,
    # in-range entries see the rounding residual (code - v).
    per_entry = np.where(clipped, ctx.codes, ctx.codes - ctx.v)
    grad_alpha = float(np.sum(grad_out * per_entry))
    grad_beta = float(np.sum(grad_out * clipped))
    return grad_x, grad_alpha, grad_beta


def quantize(x: nm.Tensor, q: Quantizer, smooth: bool = False) -> nm.Tensor:
    """Taped quantization of a Tensor through ``q``."""
    xq, ctx = quantize_with_context(x.data, q, smooth=smooth)
    out = nm.Tensor(xq)
    alpha, beta = q.alpha, q.beta

    def vjp(g, accumulate):
        gx, ga, gb = ste_backward(g, ctx)
        accumulate(x, gx)
        if alpha.trainable:
            accumulate(alpha, np.asarray(ga))
        if beta.trainable:
            accumulate(beta, np.asarray(gb))

    nm.record_op(out, vjp)
    return out
