"""Synaptic-operation accounting and energy estimation.

Counting conventions, chosen so the spike-count identity is exact:

* ``acc``       spike-driven accumulates; on every spiking linear this equals
                (total input spikes) x fan-out, by construction.
* ``acc_bias``  bias and decode-offset additions, one per output neuron per
                pass.  Priced as accumulates but tallied apart so the acc
                identity above is checkable.
* ``mac``       multiply-accumulates on paths that stay in real arithmetic
                (rmsnorm, input/output projections, scan coefficient
                products, the head).
* ``shift``     bit shifts: one per surviving state spike when the power-of
                -two decay applies, one per power-of-two activation eval.
* ``cmp``       threshold comparisons, T per neuron per encode.

No absolute energy constants ship with the package; an EnergyTable must be
supplied explicitly (typically from a config file), and reported totals are
exactly linear in it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .ssm import ForecastModel, ModelConfig

KINDS = ("acc", "acc_bias", "mac", "shift", "cmp")


class OpCounters:
    """Per-layer op tallies, filled in by the spiking forward pass."""

    def __init__(self):
        self.layers: dict[str, dict[str, int]] = {}
        self.sites: dict[str, dict[str, int]] = {}

    def add(self, layer: str, **kinds: int) -> None:
        row = self.layers.setdefault(layer, {k: 0 for k in KINDS})
        for kind, v in kinds.items():
            if kind not in KINDS:
                raise ValueError(f"unknown op kind {kind!r} (expected one of {KINDS})")
            if v < 0:
                raise ValueError(f"op count must be nonnegative, got {kind}={v}")
            row[kind] += int(v)

    def record_site(self, site: str, counts: np.ndarray, T: int) -> None:
        rec = self.sites.setdefault(site, {"spikes": 0, "neurons": 0, "T": int(T)})
        rec["spikes"] += int(counts.sum())
        rec["neurons"] += int(counts.size)
        rec["T"] = int(T)

    def total(self, kind: str) -> int:
        return sum(row[kind] for row in self.layers.values())

    def totals(self) -> dict[str, int]:
        return {k: self.total(k) for k in KINDS}

    def spike_rate(self, site: str) -> float:
        rec = self.sites[site]
        slots = rec["neurons"] * rec["T"]
        return rec["spikes"] / slots if slots else 0.0

    def spike_rates(self) -> dict[str, float]:
        return {s: self.spike_rate(s) for s in self.sites}

    def total_spikes(self) -> int:
        return sum(rec["spikes"] for rec in self.sites.values())

    def merge(self, other: "OpCounters") -> "OpCounters":
        """Fold another pass's tallies into this one (explicit reduction)."""
        for layer, row in other.layers.items():
            self.add(layer, **row)
        for site, rec in other.sites.items():
            mine = self.sites.setdefault(site, {"spikes": 0, "neurons": 0, "T": rec["T"]})
            if mine["T"] != rec["T"]:
                raise ValueError(f"site {site}: merging windows T={mine['T']} and T={rec['T']}")
            mine["spikes"] += rec["spikes"]
            mine["neurons"] += rec["neurons"]
        return self


@dataclass(frozen=True)
class EnergyTable:
    """Per-op energy in joules. All entries are user-supplied; none default."""

    e_acc: float
    e_mac: float
    e_shift: float
    e_cmp: float

    def __post_init__(self):
        for k in ("e_acc", "e_mac", "e_shift", "e_cmp"):
            if getattr(self, k) < 0:
                raise ValueError(f"energy table entry {k} must be >= 0")

    @classmethod
    def from_config(cls, cfg: Mapping[str, object]) -> "EnergyTable":
        missing = [k for k in ("e_acc", "e_mac", "e_shift", "e_cmp") if k not in cfg]
        if missing:
            raise ValueError("energy table is missing entries: " + ", ".join(missing)
                             + " (per-op joules must be supplied, none are built in)")
        return cls(e_acc=float(cfg["e_acc"]), e_mac=float(cfg["e_mac"]),
                   e_shift=float(cfg["e_shift"]), e_cmp=float(cfg["e_cmp"]))

    def cost(self, row: Mapping[str, int]) -> float:
        return ((row["acc"] + row["acc_bias"]) * self.e_acc
                + row["mac"] * self.e_mac
                + row["shift"] * self.e_shift
                + row["cmp"] * self.e_cmp)


@dataclass
class EnergyReport:
    total_joules: float
    per_layer: dict[str, float]
    spike_rates: dict[str, float]
    T: int
    op_totals: dict[str, int]

    def to_text(self) -> str:
        lines = [f"total energy: {self.total_joules:.6e} J   (T = {self.T})",
                 "", "per-layer energy (J):"]
        width = max((len(n) for n in self.per_layer), default=0)
        for name in sorted(self.per_layer):
            lines.append(f"  {name:<{width}}  {self.per_layer[name]:.6e}")
        lines.append("")
        lines.append("op totals: " + "  ".join(f"{k}={self.op_totals[k]}" for k in KINDS))
        lines.append("")
        lines.append("spike rates (spikes / neuron-slot):")
        swidth = max((len(n) for n in self.spike_rates), default=0)
        for name in sorted(self.spike_rates):
            lines.append(f"  {name:<{swidth}}  {self.spike_rates[name]:.4f}")
        return "\n".join(lines)

    def to_kv(self) -> dict[str, float]:
        kv: dict[str, float] = {"total_joules": self.total_joules, "T": float(self.T)}
        for k in KINDS:
            kv[f"ops.{k}"] = float(self.op_totals[k])
        for name, e in self.per_layer.items():
            kv[f"layer.{name}"] = e
        for name, r in self.spike_rates.items():
            kv[f"rate.{name}"] = r
        return kv


def profile(model: ForecastModel, x: np.ndarray, table: EnergyTable,
            counters: OpCounters | None = None) -> EnergyReport:
    """Run spiking inference with op counting and price it with ``table``.

    Pass ``counters`` to keep the raw tallies; they are also usable to merge
    several batches before building a combined report.
    """
    if model.mode != "snn":
        raise RuntimeError("energy profiling requires a converted (snn-mode) model")
    ct = counters if counters is not None else OpCounters()
    model.forward(x, counters=ct)
    per_layer = {layer: table.cost(row) for layer, row in ct.layers.items()}
    return EnergyReport(
        total_joules=sum(per_layer.values()),
        per_layer=per_layer,
        spike_rates=ct.spike_rates(),
        T=2 ** model.cfg.bits - 1,
        op_totals=ct.totals(),
    )


def ann_op_counts(cfg: ModelConfig, batch: int) -> OpCounters:
    """Analytic op counts of the real-arithmetic forward on a [batch, L, d] input.

    Mirrors the spiking pass layer by layer: every spike-driven accumulate
    becomes a multiply-accumulate, the power-of-two decay becomes one
    multiply per state element, and encodes vanish.  Bias additions stay
    bias additions.  Counts depend only on shapes.
    """
    B, L = batch, cfg.history
    dv, dh, n, r, K = cfg.d_value, cfg.d_hidden, cfg.state_size, cfg.delta_rank, cfg.conv_kernel
    ct = OpCounters()
    for i in range(cfg.blocks):
        tag = f"block{i}"
        ct.add(f"{tag}.rmsnorm", mac=2 * B * L * dv)
        ct.add(f"{tag}.in_proj", mac=B * L * dv * 2 * dh)
        ct.add(f"{tag}.conv", mac=B * L * dh * K)
        ct.add(f"{tag}.proj", mac=B * L * dh * (r + 2 * n), acc_bias=B * L * (r + 2 * n))
        ct.add(f"{tag}.delta_proj", mac=B * L * r * dh, acc_bias=2 * B * L * dh,
               shift=B * L * dh)
        # per step: step*A, decay*h, step*B, B*u, h*C each dh*n products, D*u dh
        ct.add(f"{tag}.scan", mac=B * L * (5 * dh * n + dh))
        ct.add(f"{tag}.gate", shift=B * L * dh, acc_bias=B * L * dh, mac=B * L * dh)
        ct.add(f"{tag}.out_proj", mac=B * L * dh * dv, acc_bias=B * L * dv)
    ct.add("head", mac=B * dv * cfg.history * cfg.horizon, acc_bias=B * cfg.horizon * dv)
    return ct


@dataclass
class EnergyComparison:
    ann_joules: float
    snn_joules: float
    ratio: float
    reduction_pct: float
    ann_ops: dict[str, int]
    snn_ops: dict[str, int]

    def to_text(self) -> str:
        return "\n".join([
            f"dense-path energy:   {self.ann_joules:.6e} J",
            f"spiking-path energy: {self.snn_joules:.6e} J",
            f"ratio (snn/ann):     {self.ratio:.6f}",
            f"reduction:           {self.reduction_pct:.2f}%",
        ])

    def to_kv(self) -> dict[str, float]:
        kv = {"ann_joules": self.ann_joules, "snn_joules": self.snn_joules,
              "ratio": self.ratio, "reduction_pct": self.reduction_pct}
        for k in KINDS:
            kv[f"ann_ops.{k}"] = float(self.ann_ops[k])
            kv[f"snn_ops.{k}"] = float(self.snn_ops[k])
        return kv


def compare_ann_energy(model: ForecastModel, x: np.ndarray,
                       table: EnergyTable) -> EnergyComparison:
    """Weigh spiking inference against the dense forward under one table.

    The dense side is the analytic MAC count of the same architecture on the
    same input shape; the spiking side is the instrumented counter tally.
    """
    snn_ct = OpCounters()
    profile(model, x, table, counters=snn_ct)
    ann_ct = ann_op_counts(model.cfg, batch=np.asarray(x).shape[0])
    ann_j = sum(table.cost(row) for row in ann_ct.layers.values())
    snn_j = sum(table.cost(row) for row in snn_ct.layers.values())
    ratio = snn_j / ann_j if ann_j > 0 else float("inf")
    return EnergyComparison(
        ann_joules=ann_j,
        snn_joules=snn_j,
        ratio=ratio,
        reduction_pct=(1.0 - ratio) * 100.0,
        ann_ops=ann_ct.totals(),
        snn_ops=snn_ct.totals(),
    )
