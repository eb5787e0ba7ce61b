"""Spike-train codecs built on the average integrate-and-fire neuron.

The encoder follows the averaged-drive recurrence: the total synaptic drive a
neuron would collect over a window of ``T`` steps is averaged to ``A``, then

    V(0) = 0;  for t = 1..T:  V += A;  if V >= theta: spike, V -= theta.

A drive of ``m * theta`` (integer m in [0, T]) therefore emits exactly m
spikes, which is what makes quantized activations and spike trains
interchangeable: the spike count IS the quantizer code, the threshold is the
quantizer step, and decoding is ``offset + scale * count``.

The firing comparison uses ``V >= theta * (1 - 1e-9)``.  Exact grid points
land on V == theta in real arithmetic but one ulp short of it in floating
point (e.g. accumulating 2/3 three times), so a strict >= would drop the
final spike of on-grid drives; the relative tolerance restores the tie rule
without affecting off-grid drives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .quantize import GRID_SNAP, Quantizer, codes_of, round_half_away

__all__ = [
    "SpikeTrain",
    "IFState",
    "SpikeSite",
    "average_if_encode",
    "if_spike_count",
    "encode_quantized",
    "decode",
    "spiking_matvec",
    "pow2_shift",
    "threshold_scale",
]


@dataclass
class SpikeTrain:
    """Binary events over a T-step window plus the decode transform."""

    bits: np.ndarray  # [T, ...] of {0, 1}
    theta: float
    scale: float
    offset: float

    @property
    def T(self) -> int:
        return self.bits.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.bits.sum(axis=0, dtype=np.float64)

    @property
    def total_spikes(self) -> int:
        return int(self.bits.sum())


@dataclass
class IFState:
    """Membrane state of a bank of integrate-and-fire neurons."""

    potential: np.ndarray
    theta: float

    def step(self, avg_drive: np.ndarray) -> np.ndarray:
        """Advance one timestep; returns the fired mask (uint8)."""
        self.potential = self.potential + avg_drive
        fired = self.potential >= self.theta * (1.0 - GRID_SNAP)
        self.potential = np.where(fired, self.potential - self.theta, self.potential)
        return fired.astype(np.uint8)


def average_if_encode(drive: np.ndarray, T: int, theta: float) -> SpikeTrain:
    """Encode a total drive into a T-step spike train (see module docstring)."""
    if T < 1:
        raise ValueError(f"average_if_encode: window length must be >= 1, got {T}")
    if theta <= 0:
        raise ValueError(f"average_if_encode: threshold must be positive, got {theta}")
    drive = np.asarray(drive, dtype=np.float64)
    state = IFState(potential=np.zeros_like(drive), theta=float(theta))
    avg = drive / T
    bits = np.stack([state.step(avg) for _ in range(T)], axis=0)
    return SpikeTrain(bits=bits, theta=float(theta), scale=float(theta), offset=0.0)


def if_spike_count(drive: np.ndarray, T: int, theta: float) -> np.ndarray:
    """Spike counts only (same recurrence, no per-step record kept)."""
    if T < 1:
        raise ValueError(f"if_spike_count: window length must be >= 1, got {T}")
    if theta <= 0:
        raise ValueError(f"if_spike_count: threshold must be positive, got {theta}")
    drive = np.asarray(drive, dtype=np.float64)
    state = IFState(potential=np.zeros_like(drive), theta=float(theta))
    avg = drive / T
    counts = np.zeros(drive.shape, dtype=np.float64)
    for _ in range(T):
        counts += state.step(avg)
    return counts


def encode_quantized(x_q: np.ndarray, q: Quantizer) -> SpikeTrain:
    """Turn already-quantized values into an exact spike train.

    The spike count of every neuron equals its quantizer code; conversion
    must be exact, so off-grid inputs are rejected.
    """
    if q.symmetric or q.code_min != 0:
        raise ValueError(f"encode_quantized: site {q.name} has negative codes; spike counts cannot be negative")
    alpha = float(q.alpha.data)
    beta = float(q.beta.data)
    x_q = np.asarray(x_q, dtype=np.float64)
    codes = round_half_away((x_q - beta) / alpha)
    rebuilt = beta + alpha * codes
    tol = 1e-9 * max(alpha, float(np.max(np.abs(x_q))) if x_q.size else alpha)
    off = np.abs(rebuilt - x_q) > tol
    if np.any(off):
        idx = tuple(int(i) for i in np.argwhere(off)[0])
        raise ValueError(
            f"encode_quantized: value {x_q[idx]!r} at index {idx} is not on the grid of {q.name}"
        )
    if np.any(codes < 0) or np.any(codes > q.code_max):
        bad = codes[(codes < 0) | (codes > q.code_max)][0]
        raise ValueError(f"encode_quantized: code {int(bad)} outside [0, {q.code_max}] for {q.name}")
    T = q.code_max
    train = average_if_encode(x_q - beta, T=T, theta=alpha)
    if not np.array_equal(train.counts, codes):
        raise ValueError(f"encode_quantized: spike counts diverged from codes on {q.name}")
    train.offset = beta
    return train


def decode(s: SpikeTrain) -> np.ndarray:
    return s.offset + s.scale * s.counts


def spiking_matvec(
    w: np.ndarray, b: np.ndarray | None, s: SpikeTrain
) -> tuple[np.ndarray, int]:
    """Spike-driven affine map: accumulate W rows once per input spike.

    Returns ``(out, acc_count)`` where out equals ``linear(decode(s), w, b)``
    up to float reassociation and acc_count is the exact number of
    accumulate operations, ``total_spikes * d_out``.
    """
    w = np.asarray(w, dtype=np.float64)
    counts = s.counts
    if w.ndim != 2 or counts.shape[-1] != w.shape[0]:
        raise ValueError(
            f"spiking_matvec: spike shape {counts.shape} does not match weight shape {w.shape}"
        )
    out = s.scale * (counts @ w) + s.offset * w.sum(axis=0)
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)
    return out, s.total_spikes * w.shape[1]


def pow2_shift(v: np.ndarray, e: np.ndarray) -> np.ndarray:
    """v * 2**e via exponent manipulation (exact, no multiply)."""
    e = np.asarray(e)
    if not np.issubdtype(e.dtype, np.integer):
        as_int = e.astype(np.int64)
        if not np.array_equal(as_int, e):
            raise ValueError("pow2_shift: exponents must be integers")
        e = as_int
    return np.ldexp(np.asarray(v, dtype=np.float64), e)


@dataclass
class SpikeSite:
    """Spiking configuration of one encode site in a converted network."""

    name: str
    theta: float
    scale: float
    offset: float
    T: int

    def encode_counts(self, pre: np.ndarray) -> np.ndarray:
        return if_spike_count(pre - self.offset, self.T, self.theta)

    def decode_counts(self, counts: np.ndarray) -> np.ndarray:
        return self.offset + self.scale * counts

    def state(self) -> dict:
        return {"name": self.name, "theta": self.theta, "scale": self.scale, "offset": self.offset, "T": self.T}

    @classmethod
    def from_state(cls, s: dict) -> "SpikeSite":
        return cls(name=str(s["name"]), theta=float(s["theta"]), scale=float(s["scale"]), offset=float(s["offset"]), T=int(s["T"]))


def threshold_scale(site: SpikeSite, factor: int) -> SpikeSite:
    """Scale a site's threshold by ``factor``, collapsing its window.

    theta and the decode scale grow by ``factor`` (scaling the decode scale
    is what "scale the downstream weights" means when weights fold in the
    decode at accumulation time) and the window shrinks to T / factor, so a
    train of ``factor`` saturated spikes collapses to a single spike.  Exact
    for sites whose codes only ever hit 0 or T; factor 1 is the identity.
    """
    if factor < 1:
        raise ValueError(f"threshold_scale: factor must be >= 1, got {factor}")
    if site.T % factor != 0:
        raise ValueError(f"threshold_scale: factor {factor} does not divide window {site.T}")
    return replace(
        site,
        theta=site.theta * factor,
        scale=site.scale * factor,
        T=site.T // factor,
    )
