"""Training loop, spiking conversion, threshold scaling, and checkpoints.

The training pieces are deliberately generic: anything exposing
``parameters() -> list[Tensor]`` and ``forward(x) -> Tensor`` trains, with
optional ``calibrate``/``calibrated``/``clamp_steps`` hooks picked up when
present.  Conversion and checkpoints are specific to ``ForecastModel``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .quantize import Quantizer
from .spike import SpikeSite, threshold_scale
from .ssm import QUANT_SITES, SPIKE_SITES, ForecastModel, ModelConfig

CHECKPOINT_MAGIC = b"SPKY"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


class Adam:
    """Adam with bias correction, state kept per parameter tensor."""

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    epochs_run: int = 0


def _eval_loss(model, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    total, n = 0.0, x.shape[0]
    for i in range(0, n, batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        pred = model.forward(xb)
        total += float(np.sum((pred.data - yb) ** 2))
    return total / max(1, y.size)


def train(model, x_train: np.ndarray, y_train: np.ndarray,
          x_val: np.ndarray, y_val: np.ndarray,
          cfg: TrainConfig | None = None) -> TrainResult:
    """Minimize MSE with Adam; early-stops on validation loss.

    An epoch with validation loss strictly below the best seen resets the
    patience counter and snapshots the parameters; after ``patience``
    consecutive epochs without such an improvement training stops and the
    snapshot is restored.  With an empty validation set the training loss
    is monitored instead.  Fully deterministic for a given seed.
    """
    cfg = cfg or TrainConfig()
    if hasattr(model, "calibrated") and not model.calibrated():
        model.calibrate(x_train)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    res = TrainResult()
    best = [p.data.copy() for p in params]
    wait = 0
    n = x_train.shape[0]

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            with nm.GradTape() as tape:
                pred = model.forward(xb)
                loss = nm.mse(pred, nm.tensor(yb))
            grads = nm.backward(tape, output=loss)
            opt.step(grads)
            if hasattr(model, "clamp_steps"):
                model.clamp_steps()
            sq_sum += float(loss.data) * yb.size
        train_loss = sq_sum / max(1, y_train.size)
        res.train_losses.append(train_loss)

        if x_val.shape[0] > 0:
            val_loss = _eval_loss(model, x_val, y_val, cfg.batch_size)
        else:
            val_loss = train_loss
        res.val_losses.append(val_loss)
        res.epochs_run = epoch + 1

        if val_loss < res.best_val:
            res.best_val = val_loss
            res.best_epoch = epoch
            best = [p.data.copy() for p in params]
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break

    for p, saved in zip(params, best):
        p.data = saved
    return res


# --- conversion ----------------------------------------------------------------


def convert_to_snn(model: ForecastModel) -> ForecastModel:
    """Turn every spike-encode site into an integrate-and-fire site in place.

    Each site's threshold and decode scale are the learned quantizer step,
    the decode offset is the quantizer offset, and the spike window is the
    largest code, T = 2**bits - 1, so spike counts and codes coincide.
    """
    if model.mode == "snn":
        raise RuntimeError("model is already converted (would discard scaled thresholds)")
    missing = [blk.quantizers[s].name for blk in model.blocks for s in QUANT_SITES
               if not blk.quantizers[s].initialized]
    if missing:
        raise RuntimeError("cannot convert, uncalibrated sites: " + ", ".join(missing))
    T = 2 ** model.cfg.bits - 1
    for blk in model.blocks:
        blk.sites = {}
        for s in SPIKE_SITES:
            q = blk.quantizers[s]
            blk.sites[s] = SpikeSite(name=q.name, theta=float(q.alpha.data),
                                     scale=float(q.alpha.data),
                                     offset=float(q.beta.data), T=T)
    model.mode = "snn"
    return model


class _SaturationProbe:
    """Counter hook that notices sites emitting intermediate spike counts."""

    def __init__(self):
        self.mid_codes: dict[str, bool] = {}

    def add(self, layer: str, **kinds) -> None:
        pass

    def record_site(self, site: str, counts: np.ndarray, T: int) -> None:
        hit = bool(np.any((counts > 0) & (counts < T)))
        self.mid_codes[site] = self.mid_codes.get(site, False) or hit


def apply_threshold_scaling(model: ForecastModel, x: np.ndarray,
                            verify_x: np.ndarray | None = None,
                            tol: float = 1e-9) -> list[str]:
    """Collapse saturated spike sites to single-spike windows.

    A site whose observed counts on ``x`` are only ever 0 or T can emit one
    spike against a threshold scaled by T instead of T spikes against the
    original, cutting its comparisons and downstream accumulations by T.
    The rewrite is applied to every such site, then checked end to end on
    ``verify_x`` (``x`` when omitted); any output drift beyond ``tol``
    rolls all sites back.  Returns the names of the sites left scaled.
    """
    if model.mode != "snn":
        raise RuntimeError("threshold scaling applies to converted models only")
    probe = _SaturationProbe()
    model.forward(x, counters=probe)
    check = x if verify_x is None else verify_x
    baseline = model.forward(check).data.copy()

    saved = [(blk, dict(blk.sites)) for blk in model.blocks]
    scaled: list[str] = []
    for i, blk in enumerate(model.blocks):
        for s in SPIKE_SITES:
            site = blk.sites[s]
            key = f"block{i}.{s}"
            if site.T > 1 and not probe.mid_codes.get(key, True):
                blk.sites[s] = threshold_scale(site, site.T)
                scaled.append(key)
    if not scaled:
        return []
    drift = float(np.max(np.abs(model.forward(check).data - baseline)))
    if drift > tol:
        for blk, sites in saved:
            blk.sites = sites
        return []
    return scaled


# --- checkpoints -----------------------------------------------------------------


def _metadata(model: ForecastModel, norm: dict | None, extra: dict | None) -> dict:
    return {
        "config": model.cfg.to_dict(),
        "mode": model.mode,
        "quantizers": [{s: blk.quantizers[s].state() for s in QUANT_SITES}
                       for blk in model.blocks],
        "sites": [None if blk.sites is None
                  else {s: blk.sites[s].state() for s in blk.sites}
                  for blk in model.blocks],
        "norm": norm,
        "extra": extra or {},
    }


def save_checkpoint(path: str, model: ForecastModel,
                    norm: dict | None = None, extra: dict | None = None) -> None:
    """Write magic, version, JSON metadata, then float32 weight payloads.

    Payload order is each block's weight fields in declaration order,
    followed by the head weights; all little-endian.
    """
    meta = json.dumps(_metadata(model, norm, extra)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for blk in model.blocks:
            for w in blk.weight_tensors():
                f.write(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
        for w in (model.W_head, model.b_head):
            f.write(np.ascontiguousarray(w.data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[ForecastModel, dict]:
    """Rebuild a model from ``save_checkpoint`` output.

    Returns (model, metadata); metadata keeps the ``norm`` and ``extra``
    entries the checkpoint was saved with.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    meta = json.loads(raw[12:12 + mlen].decode("utf-8"))

    cfg = ModelConfig.from_dict(meta["config"])
    model = ForecastModel.build(cfg, seed=0)
    off = 12 + mlen
    targets = [w for blk in model.blocks for w in blk.weight_tensors()]
    targets += [model.W_head, model.b_head]
    for w in targets:
        nbytes = w.data.size * 4
        arr = np.frombuffer(raw, dtype="<f4", count=w.data.size, offset=off)
        w.data = arr.astype(np.float64).reshape(w.data.shape)
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after weight payload")

    for blk, qstates, sstates in zip(model.blocks, meta["quantizers"], meta["sites"]):
        blk.quantizers = {s: Quantizer.from_state(qstates[s]) for s in QUANT_SITES}
        blk.sites = None if sstates is None else {
            s: SpikeSite.from_state(v) for s, v in sstates.items()}
    model.mode = meta["mode"]
    return model, meta
