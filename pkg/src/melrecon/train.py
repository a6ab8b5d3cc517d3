"""Training loop, metrics and baselines.

Per-pixel l1 loss on the 2-channel real view, Adam with bias correction
followed by the contraction projection, pSNR/SSIM on magnitude images,
zero-filled and l2-regularized CG-SENSE baselines, and directory-based
checkpoints (manifest + MELT tensors).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .autodiff import Tape, apply_op
from .mel import backprop_mel, backprop_standard
from .mri import Dataset, EncodingOperator, load_dataset
from .tensor import ComplexTensor, RealTensor, melt_read, melt_write
from .unrolled import (
    RegularizerParams,
    UnrolledNetParams,
    cg_solve_normal,
    modl_forward,
    project_weights,
)

__all__ = [
    "AdamState",
    "TrainConfig",
    "MetricsReport",
    "l1_loss",
    "adam_step",
    "psnr",
    "ssim",
    "zero_filled",
    "cg_sense",
    "train_loop",
    "train_steps",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_CSV_HEADER = ["epoch", "step", "engine", "train_loss", "val_psnr", "val_ssim", "peak_bytes", "epoch_seconds"]


def l1_loss(x: ComplexTensor, target: ComplexTensor, tape: Tape | None = None) -> RealTensor:
    """Mean over pixels of |re(x-t)| + |im(x-t)|; subgradient 0 at zeros."""
    if tape is None:
        return apply_op("l1", x, target=target.data)
    return tape.record("l1", x, target=target.data)


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: UnrolledNetParams, lr: float = 1e-3) -> "AdamState":
        st = cls(lr=lr)
        for name, tns in params.named_leaves():
            st.m[name] = np.zeros(tns.shape)
            st.v[name] = np.zeros(tns.shape)
        return st


def adam_step(state: AdamState, net: UnrolledNetParams, grads: dict[str, RealTensor]):
    """Bias-corrected Adam update followed by the contraction projection.

    Functional: returns (state', net') with fresh tensors.
    """
    t = state.t + 1
    new = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, {}, {})
    updated: dict[str, np.ndarray] = {}
    for name, tns in net.named_leaves():
        g = grads[name].data
        if g.shape != tns.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {tns.shape} for {name}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new.m[name], new.v[name] = m, v
        updated[name] = tns.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)

    def rebuild(reg: RegularizerParams, prefix: str) -> RegularizerParams:
        ws = [RealTensor(updated[f"{prefix}w{i}"]) for i in range(reg.layers)]
        bs = [RealTensor(updated[f"{prefix}b{i}"]) for i in range(reg.layers)]
        return project_weights(RegularizerParams(ws, bs, reg.contraction))

    if net.shares_weights:
        net2 = UnrolledNetParams(rebuild(net.reg, ""), net.mu, net.n_unrolls, net.n_cg, net.cg_exit)
    else:
        regs = [rebuild(r, f"u{n}.") for n, r in enumerate(net.per_unroll)]
        net2 = UnrolledNetParams(regs[0], net.mu, net.n_unrolls, net.n_cg, net.cg_exit, per_unroll=regs)
    return new, net2


# --- metrics --------------------------------------------------------------------


def psnr(x: ComplexTensor, ref: ComplexTensor) -> float:
    """20*log10(max|ref| / rmse(|x|, |ref|)) on magnitude images; +inf when
    the magnitudes agree exactly."""
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mref = np.abs(ref.data)
    peak = mref.max()
    if peak == 0:
        raise ValueError("reference image is identically zero")
    rmse = np.sqrt(np.mean((np.abs(x.data) - mref) ** 2))
    if rmse == 0:
        return math.inf
    return float(20 * np.log10(peak / rmse))


def _ssim_2d(x: np.ndarray, ref: np.ndarray, drange: float, win: int, k1: float, k2: float) -> float:
    c1, c2 = (k1 * drange) ** 2, (k2 * drange) ** 2
    mx = uniform_filter(x, win)
    mr = uniform_filter(ref, win)
    # sample (unbiased) second moments over each window
    np_pix = win * win
    cov_norm = np_pix / (np_pix - 1)
    vx = (uniform_filter(x * x, win) - mx * mx) * cov_norm
    vr = (uniform_filter(ref * ref, win) - mr * mr) * cov_norm
    cxr = (uniform_filter(x * ref, win) - mx * mr) * cov_norm
    num = (2 * mx * mr + c1) * (2 * cxr + c2)
    den = (mx * mx + mr * mr + c1) * (vx + vr + c2)
    s = num / den
    pad = win // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(x: ComplexTensor, ref: ComplexTensor, win: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM on magnitude images (uniform window, dynamic range
    max|ref|); frames of a cine image are averaged."""
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mx, mr = np.abs(x.data), np.abs(ref.data)
    drange = mr.max()
    if drange == 0:
        raise ValueError("reference image is identically zero")
    if mx.ndim == 2:
        return _ssim_2d(mx, mr, drange, win, k1, k2)
    return float(np.mean([_ssim_2d(mx[t], mr[t], drange, win, k1, k2) for t in range(mx.shape[0])]))


@dataclass
class MetricsReport:
    method: str
    case_ids: list[str]
    psnr_db: list[float]
    ssim_val: list[float]

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr_db if math.isfinite(p)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_val))

    def rows(self):
        for cid, p, s in zip(self.case_ids, self.psnr_db, self.ssim_val):
            yield [self.method, cid, "inf" if math.isinf(p) else f"{p:.4f}", f"{s:.6f}"]


# --- baselines -------------------------------------------------------------------


def zero_filled(op: EncodingOperator, y: ComplexTensor) -> ComplexTensor:
    """A^H y."""
    return op.adjoint(y)


def cg_sense(op: EncodingOperator, y: ComplexTensor, lam: float = 1e-3, iters: int = 30) -> ComplexTensor:
    """l2-regularized SENSE: CG on (A^H A + lam I) x = A^H y from zero."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    rhs = op._adjoint(y.data)
    return ComplexTensor(cg_solve_normal(op, rhs, np.zeros_like(rhs), lam, iters))


# --- checkpoints --------------------------------------------------------------------


def save_checkpoint(out_dir, net: UnrolledNetParams, seed: int = 0, step: int = 0, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reg = net.reg
    meta = {
        "format": "melrecon-checkpoint",
        "version": 1,
        "mu": net.mu,
        "n_unrolls": net.n_unrolls,
        "n_cg": net.n_cg,
        "cg_exit": net.cg_exit,
        "contraction": reg.contraction,
        "channels": reg.channels,
        "layers": reg.layers,
        "share_weights": net.shares_weights,
        "seed": seed,
        "step": step,
    }
    if extra:
        meta.update(extra)
    for name, t in net.named_leaves():
        melt_write(out / f"{name.replace('.', '_')}.melt", t)
    (out / "manifest.json").write_text(json.dumps(meta, indent=2))
    return out


def load_checkpoint(path) -> tuple[UnrolledNetParams, dict]:
    root = Path(path)
    meta = json.loads((root / "manifest.json").read_text())
    if meta.get("format") != "melrecon-checkpoint":
        raise ValueError(f"{path}: not a checkpoint directory")

    def load_reg(prefix: str) -> RegularizerParams:
        ws = [melt_read(root / f"{prefix}w{i}.melt") for i in range(meta["layers"])]
        bs = [melt_read(root / f"{prefix}b{i}.melt") for i in range(meta["layers"])]
        return RegularizerParams(ws, bs, meta["contraction"])

    if meta["share_weights"]:
        net = UnrolledNetParams(load_reg(""), meta["mu"], meta["n_unrolls"], meta["n_cg"], meta["cg_exit"])
    else:
        regs = [load_reg(f"u{n}_") for n in range(meta["n_unrolls"])]
        net = UnrolledNetParams(regs[0], meta["mu"], meta["n_unrolls"], meta["n_cg"], meta["cg_exit"], per_unroll=regs)
    return net, meta


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainConfig:
    dataset_dir: str
    out_dir: str
    epochs: int = 30
    batch_size: int = 2
    seed: int = 0
    lr: float = 1e-3
    n_unrolls: int = 5
    n_cg: int = 10
    mu: float = 0.3
    contraction: float = 0.9
    channels: int = 16
    layers: int = 5
    engine: str = "standard"  # standard | mel
    invert_tol: float = 1e-10
    val_every: int = 5

    def __post_init__(self):
        if self.engine not in ("standard", "mel"):
            raise ValueError(f"engine must be standard|mel, got {self.engine!r}")
        for k in ("epochs", "batch_size", "lr", "n_unrolls", "n_cg", "mu", "channels", "layers", "val_every"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")


def _grad_eval(engine: str, net, op, y, target, invert_tol):
    if engine == "standard":
        return backprop_standard(net, op, y, target)
    return backprop_mel(net, op, y, target, invert_tol=invert_tol)


def train_steps(net: UnrolledNetParams, adam: AdamState, batch, engine: str, invert_tol: float = 1e-10):
    """One optimizer step on a batch of (op, y, target) triples; gradients
    are averaged over the batch. Returns (net', adam', mean loss, peak bytes)."""
    acc: dict[str, np.ndarray] = {}
    losses = []
    peak = 0
    for op, y, target in batch:
        r = _grad_eval(engine, net, op, y, target, invert_tol)
        losses.append(r.loss_value)
        peak = max(peak, r.peak_tape_bytes)
        for k, g in r.grads.items():
            acc[k] = acc[k] + g.data if k in acc else g.data.copy()
    grads = {k: RealTensor(v / len(batch)) for k, v in acc.items()}
    adam, net = adam_step(adam, net, grads)
    return net, adam, float(np.mean(losses)), peak


def _validate(net: UnrolledNetParams, cases) -> tuple[float, float]:
    ps, ss = [], []
    for c in cases:
        op = c.operator()
        rec = modl_forward(net, op, c.y)
        ps.append(psnr(rec, c.x))
        ss.append(ssim(rec, c.x))
    finite = [p for p in ps if math.isfinite(p)]
    return float(np.mean(finite if finite else ps)), float(np.mean(ss))


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    log_rows: list[list]
    best_val_psnr: float
    net: UnrolledNetParams


def train_loop(cfg: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Deterministic training run: fixed shuffling stream from the seed,
    best-validation checkpoint retention, CSV log. The gradient engine is
    selectable with no other code-path change."""
    ds = dataset if dataset is not None else load_dataset(cfg.dataset_dir)
    train_cases = ds.split("train")
    val_cases = ds.split("val")
    if not train_cases or not val_cases:
        raise ValueError("dataset needs non-empty train and val splits")
    spatial_rank = len(train_cases[0].x.shape)

    reg = project_weights(
        RegularizerParams.init(
            channels=cfg.channels, layers=cfg.layers, spatial_rank=spatial_rank,
            contraction=cfg.contraction, seed=cfg.seed,
        )
    )
    net = UnrolledNetParams(reg, cfg.mu, cfg.n_unrolls, cfg.n_cg)
    adam = AdamState.init(net, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint_best"
    rows: list[list] = []
    best = -math.inf
    step = 0
    prepared = {c.case_id: (c.operator(), c.y, c.x) for c in train_cases}

    for epoch in range(1, cfg.epochs + 1):
        t_epoch = time.perf_counter()
        order = rng.permutation(len(train_cases))
        losses = []
        peak = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[train_cases[i].case_id] for i in order[start : start + cfg.batch_size]]
            net, adam, loss, pk = train_steps(net, adam, batch, cfg.engine, cfg.invert_tol)
            losses.append(loss)
            peak = max(peak, pk)
            step += 1
        val_p, val_s = (math.nan, math.nan)
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            val_p, val_s = _validate(net, val_cases)
            if val_p > best:
                best = val_p
                save_checkpoint(ckpt_dir, net, seed=cfg.seed, step=step, extra={"val_psnr": val_p, "val_ssim": val_s})
        rows.append(
            [epoch, step, cfg.engine, f"{np.mean(losses):.8g}",
             "" if math.isnan(val_p) else f"{val_p:.4f}",
             "" if math.isnan(val_s) else f"{val_s:.6f}",
             peak, f"{time.perf_counter() - t_epoch:.3f}"]
        )

    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_CSV_HEADER)
        w.writerows(rows)
    return TrainResult(ckpt_dir, log_path, rows, best, net)
