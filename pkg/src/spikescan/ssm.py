"""Spiking selective state-space block and forecaster.

One block is a gated selective scan over quantized activations:

    x_norm            = rmsnorm(x)
    x_in, x_res       = split(W_in @ x_norm)
    s_in              = SN(x_in)
    s                 = SN(causal_depthwise_conv(s_in))
    d_raw, B, C       = split(W @ s + b)
    step_int          = Q_int(W_d @ SN(d_raw) + b_d)        # integer codes
    step              = SN(pow2_softplus(step_int))          # > 0
    A                 = -exp(A_log)
    for t:  Abar_t    = 2 ** clip(rint(step_t * A), lo, hi)  # exact powers of two
            h_t       = SN(Abar_t * h_{t-1} + (step_t * B_t) * s_t)
            y_t       = SN(sum_n C_t * h_t + D * s_t)
    out               = x + W_out @ (y * pow2_silu(Q(x_res))) + b_out

``SN`` is a spike-encode site.  During training and real-arithmetic
inference it quantizes onto the site grid with integrate-and-fire floor
semantics; after conversion the same site emits actual spike trains whose
counts are the codes, so both modes agree to float precision.  The model
ends in a real-arithmetic head mapping the L history positions to the
forecast horizon per variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .activations import LN2, pow2_silu, pow2_silu_t, pow2_softplus, pow2_softplus_t
from .quantize import Quantizer, quantize, quantize_with_context
from .spike import SpikeSite, pow2_shift

EXP_LO = -32
EXP_HI = 0

SPIKE_SITES = ("x_in", "conv", "delta_raw", "delta", "h", "y")
QUANT_SITES = SPIKE_SITES + ("delta_int", "x_res")


@dataclass
class ModelConfig:
    d_value: int
    history: int
    horizon: int
    d_hidden: int = 16
    state_size: int = 4
    conv_kernel: int = 4
    delta_rank: int | None = None
    blocks: int = 1
    bits: int = 2
    rmsnorm_eps: float = 1e-6

    def __post_init__(self):
        if self.delta_rank is None:
            self.delta_rank = max(1, math.ceil(self.d_hidden / 8))

    def to_dict(self) -> dict:
        return {
            "d_value": self.d_value,
            "history": self.history,
            "horizon": self.horizon,
            "d_hidden": self.d_hidden,
            "state_size": self.state_size,
            "conv_kernel": self.conv_kernel,
            "delta_rank": self.delta_rank,
            "blocks": self.blocks,
            "bits": self.bits,
            "rmsnorm_eps": self.rmsnorm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _log_spaced_decay(d_hidden: int, n: int) -> np.ndarray:
    """A_log rows so -exp(A_log) spans [-1, -1/n] log-uniformly."""
    if n == 1:
        mags = np.array([1.0])
    else:
        mags = (1.0 / n) * (float(n) ** (np.arange(n) / (n - 1)))
    return np.tile(np.log(mags), (d_hidden, 1))


def _make_quantizers(bits: int, prefix: str) -> dict[str, Quantizer]:
    qs: dict[str, Quantizer] = {}
    for s in SPIKE_SITES:
        qs[s] = Quantizer(bits=bits, rounding="floor", name=f"{prefix}.{s}")
    # Inputs of the pow2 softplus must be integers: frozen unit step.
    qs["delta_int"] = Quantizer(
        bits=bits, alpha=1.0, beta=0.0, rounding="nearest",
        train_alpha=False, train_beta=False, name=f"{prefix}.delta_int",
    )
    qs["x_res"] = Quantizer(bits=bits, rounding="nearest", name=f"{prefix}.x_res")
    # The step site can never reach zero: its grid floor is pow2_softplus(0).
    qs["delta"].set_beta(pow2_softplus(0.0))
    qs["delta"].train_beta = False
    qs["delta"].beta.trainable = False
    return qs


@dataclass
class BlockParams:
    """Weights and per-site quantizers of one selective-scan block."""

    W_in: nm.Tensor
    conv_k: nm.Tensor
    W: nm.Tensor
    b: nm.Tensor
    W_delta: nm.Tensor
    b_delta: nm.Tensor
    A_log: nm.Tensor
    D: nm.Tensor
    g_norm: nm.Tensor
    W_out: nm.Tensor
    b_out: nm.Tensor
    quantizers: dict[str, Quantizer]
    sites: dict[str, SpikeSite] | None = None  # populated by conversion

    WEIGHT_FIELDS = ("W_in", "conv_k", "W", "b", "W_delta", "b_delta", "A_log", "D", "g_norm", "W_out", "b_out")

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator, index: int) -> "BlockParams":
        dv, dh, n, r, K = cfg.d_value, cfg.d_hidden, cfg.state_size, cfg.delta_rank, cfg.conv_kernel
        name = f"block{index}"
        p = cls(
            W_in=nm.tensor(_uniform(rng, (dv, 2 * dh), dv), trainable=True, name=f"{name}.W_in"),
            conv_k=nm.tensor(_uniform(rng, (dh, K), K), trainable=True, name=f"{name}.conv_k"),
            W=nm.tensor(_uniform(rng, (dh, r + 2 * n), dh), trainable=True, name=f"{name}.W"),
            b=nm.tensor(np.zeros(r + 2 * n), trainable=True, name=f"{name}.b"),
            W_delta=nm.tensor(_uniform(rng, (r, dh), r), trainable=True, name=f"{name}.W_delta"),
            b_delta=nm.tensor(np.zeros(dh), trainable=True, name=f"{name}.b_delta"),
            A_log=nm.tensor(_log_spaced_decay(dh, n), trainable=True, name=f"{name}.A_log"),
            D=nm.tensor(np.ones(dh), trainable=True, name=f"{name}.D"),
            g_norm=nm.tensor(np.ones(dv), trainable=True, name=f"{name}.g_norm"),
            W_out=nm.tensor(_uniform(rng, (dh, dv), dh), trainable=True, name=f"{name}.W_out"),
            b_out=nm.tensor(np.zeros(dv), trainable=True, name=f"{name}.b_out"),
            quantizers=_make_quantizers(cfg.bits, name),
        )
        return p

    def weight_tensors(self) -> list[nm.Tensor]:
        return [getattr(self, f) for f in self.WEIGHT_FIELDS]

    def parameters(self) -> list[nm.Tensor]:
        ps = self.weight_tensors()
        for s in QUANT_SITES:
            ps.extend(self.quantizers[s].parameters())
        return ps


def pow2_round_ste(x: nm.Tensor, lo: int = EXP_LO, hi: int = EXP_HI, smooth: bool = False) -> nm.Tensor:
    """2**clip(rint(x), lo, hi) with a straight-through rounding gradient.

    Forward snaps the exponent to an integer (round half to even) so the
    result is an exact power of two; backward treats the rounding as
    identity, passing ln(2) * out inside the clamp and zero outside.
    """
    if smooth:
        e = np.clip(x.data, lo, hi)
    else:
        e = np.clip(np.rint(x.data), lo, hi)
    val = np.exp2(e)
    out = nm.Tensor(val)
    mask = (x.data >= lo) & (x.data <= hi)

    def vjp(g, accumulate):
        accumulate(x, g * val * LN2 * mask)

    nm.record_op(out, vjp)
    return out


# --- real-arithmetic (taped) forward -----------------------------------------


def _sn(x: nm.Tensor, q: Quantizer, smooth: bool, collect: dict | None) -> nm.Tensor:
    """One spike-encode site in the real-arithmetic forward.

    During calibration (``collect`` given) a site that has no step size yet
    acts as identity and records the arriving values; already-calibrated
    sites quantize as usual, so each site is initialized against the value
    distribution it will actually see.
    """
    if collect is not None and not q.initialized:
        collect.setdefault(q.name, []).append(x.data)
        return x
    return quantize(x, q, smooth=smooth)


def block_forward_ann(x: nm.Tensor, p: BlockParams, cfg: ModelConfig,
                      smooth: bool = False, collect: dict | None = None) -> nm.Tensor:
    B, L, dv = x.data.shape
    dh, n, r = cfg.d_hidden, cfg.state_size, cfg.delta_rank
    q = p.quantizers

    xn = nm.rmsnorm(x, p.g_norm, cfg.rmsnorm_eps)
    x_in, x_res = nm.split_last(nm.linear(xn, p.W_in), [dh, dh])
    s_in = _sn(x_in, q["x_in"], smooth, collect)
    s = _sn(nm.depthwise_conv1d(s_in, p.conv_k), q["conv"], smooth, collect)

    d_raw, B_seq, C_seq = nm.split_last(nm.linear(s, p.W, p.b), [r, n, n])
    d_spikes = _sn(d_raw, q["delta_raw"], smooth, collect)
    step_int = _sn(nm.linear(d_spikes, p.W_delta, p.b_delta), q["delta_int"], smooth, collect)
    step = _sn(pow2_softplus_t(step_int), q["delta"], smooth, collect)

    A = nm.neg(nm.exp(p.A_log))  # [dh, n]
    h = nm.tensor(np.zeros((B, dh, n)))
    ys = []
    for t in range(L):
        step_t = nm.reshape(nm.take_axis1(step, t), (B, dh, 1))
        B_t = nm.reshape(nm.take_axis1(B_seq, t), (B, 1, n))
        C_t = nm.reshape(nm.take_axis1(C_seq, t), (B, 1, n))
        u_t = nm.take_axis1(s, t)  # [B, dh]
        Abar = pow2_round_ste(nm.mul(step_t, A), smooth=smooth)
        Bbar = nm.mul(step_t, B_t)  # [B, dh, n]
        h_pre = nm.add(nm.mul(Abar, h), nm.mul(Bbar, nm.reshape(u_t, (B, dh, 1))))
        h = _sn(h_pre, q["h"], smooth, collect)
        y_pre = nm.add(nm.sum_axis(nm.mul(h, C_t), axis=2), nm.mul(p.D, u_t))
        ys.append(_sn(y_pre, q["y"], smooth, collect))
    y = nm.stack_axis1(ys)  # [B, L, dh]

    gate_in = _sn(x_res, q["x_res"], smooth, collect)
    gated = nm.mul(y, pow2_silu_t(gate_in))
    z = nm.linear(gated, p.W_out, p.b_out)
    return nm.add(x, z)


# --- spiking forward ----------------------------------------------------------


def _np_causal_depthwise(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    K = k.shape[1]
    xpad = np.pad(x, ((0, 0), (K - 1, 0), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xpad, K, axis=1)
    return np.einsum("bldk,dk->bld", win, k)


class _CounterHooks:
    """No-op counter sink used when profiling is off."""

    def add(self, layer: str, **kinds) -> None:
        pass

    def record_site(self, site: str, counts: np.ndarray, T: int) -> None:
        pass


def block_forward_snn(x: np.ndarray, p: BlockParams, cfg: ModelConfig, counters=None, tag: str = "block") -> np.ndarray:
    """Spike-driven forward of one converted block (numpy, no tape)."""
    if p.sites is None:
        raise RuntimeError("block has no spike sites; convert the model first")
    ct = counters if counters is not None else _CounterHooks()
    B, L, dv = x.shape
    dh, n, r = cfg.d_hidden, cfg.state_size, cfg.delta_rank
    sites = p.sites

    T_pass = 2 ** cfg.bits - 1

    def encode(name: str, pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        site = sites[name]
        counts = site.encode_counts(pre)
        ct.add(f"{tag}.{name}", cmp=pre.size * site.T)
        # rate is spikes per (neuron, timestep) slot of the pass window, so a
        # threshold-scaled site with a collapsed T reports a lower rate
        ct.record_site(f"{tag}.{name}", counts, T_pass)
        return counts, site.decode_counts(counts)

    rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + cfg.rmsnorm_eps)
    xn = x * p.g_norm.data * rms
    ct.add(f"{tag}.rmsnorm", mac=2 * xn.size)
    proj = xn @ p.W_in.data
    ct.add(f"{tag}.in_proj", mac=xn.size * 2 * dh)
    x_in, x_res = proj[..., :dh], proj[..., dh:]

    c_in, v_in = encode("x_in", x_in)
    site_in = sites["x_in"]
    conv_pre = site_in.scale * _np_causal_depthwise(c_in, p.conv_k.data) \
        + site_in.offset * p.conv_k.data.sum(axis=1)
    ct.add(f"{tag}.conv", acc=int(c_in.sum()) * cfg.conv_kernel, acc_bias=conv_pre.size)
    c_s, v_s = encode("conv", conv_pre)

    site_s = sites["conv"]
    pbc = site_s.scale * (c_s @ p.W.data) + site_s.offset * p.W.data.sum(axis=0) + p.b.data
    ct.add(f"{tag}.proj", acc=int(c_s.sum()) * (r + 2 * n), acc_bias=2 * pbc.size)
    d_raw, B_seq, C_seq = pbc[..., :r], pbc[..., r:r + n], pbc[..., r + n:]

    c_dr, v_dr = encode("delta_raw", d_raw)
    site_dr = sites["delta_raw"]
    dproj = site_dr.scale * (c_dr @ p.W_delta.data) + site_dr.offset * p.W_delta.data.sum(axis=0) + p.b_delta.data
    ct.add(f"{tag}.delta_proj", acc=int(c_dr.sum()) * dh, acc_bias=2 * dproj.size)
    step_int, _ = quantize_with_context(dproj, p.quantizers["delta_int"])
    step_pt = pow2_softplus(step_int)
    ct.add(f"{tag}.delta_proj", shift=step_pt.size, acc_bias=step_pt.size)
    c_step, v_step = encode("delta", step_pt)

    A = -np.exp(p.A_log.data)
    h_counts = np.zeros((B, dh, n))
    h_dec = np.zeros((B, dh, n))  # state starts at 0, not at the grid offset
    ys = []
    for t in range(L):
        step_t = v_step[:, t][:, :, None]
        e = np.clip(np.rint(step_t * A), EXP_LO, EXP_HI).astype(np.int64)
        ct.add(f"{tag}.scan", mac=e.size)  # step * A products
        Ah = pow2_shift(h_dec, e)
        ct.add(f"{tag}.scan", shift=int(h_counts.sum()))
        u_c = c_s[:, t]
        u_v = v_s[:, t]
        Bbar = step_t * B_seq[:, t][:, None, :]
        ct.add(f"{tag}.scan", mac=Bbar.size)
        h_pre = Ah + Bbar * u_v[:, :, None]
        ct.add(f"{tag}.scan", acc=int(u_c.sum()) * n)
        h_counts, h_dec = encode("h", h_pre)
        y_pre = (h_dec * C_seq[:, t][:, None, :]).sum(axis=2) + p.D.data * u_v
        ct.add(f"{tag}.scan", acc=int(h_counts.sum()) + int(u_c.sum()))
        y_c, y_v = encode("y", y_pre)
        ys.append((y_c, y_v))
    y_counts = np.stack([c for c, _ in ys], axis=1)
    y_dec = np.stack([v for _, v in ys], axis=1)  # [B, L, dh]

    gate_vals, _ = quantize_with_context(x_res, p.quantizers["x_res"])
    gate = pow2_silu(gate_vals)
    ct.add(f"{tag}.gate", shift=gate.size, acc_bias=gate.size)
    gated = y_dec * gate
    ct.add(f"{tag}.gate", acc=int(y_counts.sum()))
    z = gated @ p.W_out.data + p.b_out.data
    ct.add(f"{tag}.out_proj", mac=gated.size * dv, acc_bias=z.size)
    return x + z


# --- reference dense state space ---------------------------------------------


def dense_ssm_reference(A_d: np.ndarray, B_d: np.ndarray, C: np.ndarray,
                        D: np.ndarray | None, u: np.ndarray) -> np.ndarray:
    """Literal dense recurrence: h_t = A_d h_{t-1} + B_d u_t, y_t = C h_t (+ D u_t).

    u: [L, m] -> y: [L, p].  The state updates before readout, so the impulse
    response is C B_d, C A_d B_d, C A_d^2 B_d, ...
    """
    A_d, B_d, C = (np.asarray(m, dtype=np.float64) for m in (A_d, B_d, C))
    u = np.asarray(u, dtype=np.float64)
    if A_d.shape[0] != A_d.shape[1] or B_d.shape[0] != A_d.shape[0] or C.shape[1] != A_d.shape[0]:
        raise ValueError(
            f"dense_ssm_reference: inconsistent shapes A{A_d.shape} B{B_d.shape} C{C.shape}"
        )
    L = u.shape[0]
    h = np.zeros(A_d.shape[0])
    y = np.zeros((L, C.shape[0]))
    for t in range(L):
        h = A_d @ h + B_d @ u[t]
        y[t] = C @ h
        if D is not None:
            y[t] += np.asarray(D) @ u[t]
    return y


def ssm_kernel(A_d: np.ndarray, B_d: np.ndarray, C: np.ndarray, L: int) -> np.ndarray:
    """Convolution kernel K[k] = C A_d^k B_d for k = 0..L-1; shape [L, p, m]."""
    A_d, B_d, C = (np.asarray(m, dtype=np.float64) for m in (A_d, B_d, C))
    K = np.empty((L, C.shape[0], B_d.shape[1]))
    M = B_d.copy()
    for k in range(L):
        K[k] = C @ M
        M = A_d @ M
    return K


def apply_kernel(u: np.ndarray, K: np.ndarray, D: np.ndarray | None = None) -> np.ndarray:
    """Causal convolution y_t = sum_k K[k] u_{t-k} (+ D u_t)."""
    u = np.asarray(u, dtype=np.float64)
    L = u.shape[0]
    y = np.zeros((L, K.shape[1]))
    for t in range(L):
        for k in range(min(t + 1, K.shape[0])):
            y[t] += K[k] @ u[t - k]
        if D is not None:
            y[t] += np.asarray(D) @ u[t]
    return y


def selective_scan(step: np.ndarray, A: np.ndarray, B_seq: np.ndarray, C_seq: np.ndarray,
                   D: np.ndarray, u: np.ndarray,
                   h_site: SpikeSite | None = None, y_site: SpikeSite | None = None,
                   exp_lo: int = EXP_LO, exp_hi: int = EXP_HI) -> np.ndarray:
    """Standalone scan: inputs [B, L, ...] arrays, returns y [B, L, dh].

    With ``h_site``/``y_site`` given, the state and output re-encode through
    those spike sites each step; with both None the scan is the bare
    time-varying recurrence (the linear limit used to cross-check against
    ``ssm_kernel``).
    """
    B, L, dh = u.shape
    n = A.shape[1]
    h = np.zeros((B, dh, n))
    ys = np.zeros((B, L, dh))
    for t in range(L):
        st = step[:, t][:, :, None]
        e = np.clip(np.rint(st * A), exp_lo, exp_hi)
        Abar = np.exp2(e)
        h = Abar * h + (st * B_seq[:, t][:, None, :]) * u[:, t][:, :, None]
        if h_site is not None:
            h = h_site.decode_counts(h_site.encode_counts(h))
        y = (h * C_seq[:, t][:, None, :]).sum(axis=2) + D * u[:, t]
        if y_site is not None:
            y = y_site.decode_counts(y_site.encode_counts(y))
        ys[:, t] = y
    return ys


# --- forecaster ---------------------------------------------------------------


def forecast_head(z: nm.Tensor, W_head: nm.Tensor, b_head: nm.Tensor) -> nm.Tensor:
    """Map [B, L, d_v] -> [B, horizon, d_v] with a shared linear over time."""
    zp = nm.permute(z, (0, 2, 1))
    out = nm.linear(zp, W_head, b_head)
    return nm.permute(out, (0, 2, 1))


@dataclass
class ForecastModel:
    cfg: ModelConfig
    blocks: list[BlockParams]
    W_head: nm.Tensor
    b_head: nm.Tensor
    mode: str = "ann"

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "ForecastModel":
        rng = np.random.default_rng(seed)
        blocks = [BlockParams.build(cfg, rng, i) for i in range(cfg.blocks)]
        W_head = nm.tensor(_uniform(rng, (cfg.history, cfg.horizon), cfg.history),
                           trainable=True, name="head.W")
        b_head = nm.tensor(np.zeros(cfg.horizon), trainable=True, name="head.b")
        return cls(cfg=cfg, blocks=blocks, W_head=W_head, b_head=b_head)

    def parameters(self) -> list[nm.Tensor]:
        ps: list[nm.Tensor] = []
        for b in self.blocks:
            ps.extend(b.parameters())
        ps.extend([self.W_head, self.b_head])
        return ps

    def calibrated(self) -> bool:
        return all(b.quantizers[s].initialized for b in self.blocks for s in QUANT_SITES)

    def calibrate(self, x: np.ndarray) -> None:
        """Initialize quantizer step sizes one site at a time, in forward order.

        Each pass runs the model with every already-calibrated site quantizing
        for real while the next uncalibrated site records its inputs and acts
        as identity; that site's alpha is then set from the recorded values
        (shifted by the site's offset) and the pass repeats.  This way every
        step size is fit to the activations it will actually see, which a
        single all-identity pass badly misestimates for downstream sites.
        """
        data = np.asarray(x, dtype=np.float64)
        pending = [blk.quantizers[s] for blk in self.blocks for s in QUANT_SITES
                   if not blk.quantizers[s].initialized]
        for q in pending:
            collect: dict[str, list[np.ndarray]] = {}
            h = nm.tensor(data)
            for blk in self.blocks:
                h = block_forward_ann(h, blk, self.cfg, collect=collect)
            vals = np.concatenate([v.ravel() for v in collect.get(q.name, [np.zeros(1)])])
            beta = float(q.beta.data) if q.beta is not None else 0.0
            q.calibrate(vals - beta)

    def clamp_steps(self) -> None:
        """Keep every quantizer step size positive after an optimizer update."""
        from .quantize import ALPHA_FLOOR
        for blk in self.blocks:
            for s in QUANT_SITES:
                q = blk.quantizers[s]
                if q.initialized and q.train_alpha:
                    np.maximum(q.alpha.data, ALPHA_FLOOR, out=q.alpha.data)

    def forward(self, x, smooth: bool = False, counters=None) -> nm.Tensor:
        """x: [B, history, d_value] -> predictions [B, horizon, d_value]."""
        arr = x.data if isinstance(x, nm.Tensor) else np.asarray(x, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != self.cfg.history or arr.shape[2] != self.cfg.d_value:
            raise ValueError(
                f"forward: expected [B, {self.cfg.history}, {self.cfg.d_value}] input, got {arr.shape}"
            )
        if self.mode == "snn":
            h = arr
            for i, blk in enumerate(self.blocks):
                h = block_forward_snn(h, blk, self.cfg, counters=counters, tag=f"block{i}")
            out = forecast_head(nm.tensor(h), self.W_head, self.b_head)
            if counters is not None:
                counters.add("head", mac=h.shape[0] * self.cfg.d_value * self.cfg.history * self.cfg.horizon,
                             acc_bias=out.data.size)
            return out
        t = x if isinstance(x, nm.Tensor) else nm.tensor(arr)
        for blk in self.blocks:
            t = block_forward_ann(t, blk, self.cfg, smooth=smooth)
        return forecast_head(t, self.W_head, self.b_head)
