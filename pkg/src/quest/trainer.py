"""Two-stage optimization: stage 1 trains the full backbone on the
perception objective over sliding windows; stage 2 freezes it and trains
the flow head on ground-truth scene flow.

Training is deterministic given the seed: shuffling, query noise for the
no-queries ablation, and the validation split (by sequence seed hash) all
derive from it. Divergence (non-finite forward values or gradients)
aborts the run and keeps the last good parameters.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .model import PER_FRAME, ModelConfig, QueSTModel
from .objectives import LossReport, LossWeights
from .simgen import Sequence

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "stage", "aff", "vel", "acc", "conf", "bound", "feat",
              "manifold", "flow", "total", "val_total")

ABLATIONS = ("full", "no_queries", "no_3d", "no_smoothness")


class TrainerError(Exception):
    pass


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam state; moment buffers mirror the
    parameter shapes and are allocated on first use."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState) -> None:
    """One bias-corrected AdamW update, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise TrainerError(f"gradient shape mismatch for {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params[name] *= 1.0 - state.lr * state.weight_decay
        params[name] -= state.lr * update


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainConfig:
    max_epochs: int = 50
    patience: int = 15
    window: int = 4
    window_stride: int = 1
    batch_size: int = 4
    seed: int = 0
    stage: int = 1
    grad_clip: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    ablation: str = "full"

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise TrainerError("patience must be <= max_epochs")
        if self.stage not in (1, 2):
            raise TrainerError("stage must be 1 or 2")
        if self.ablation not in ABLATIONS:
            raise TrainerError(f"unknown ablation {self.ablation!r}")


@dataclass
class Window:
    frames: np.ndarray
    depth: np.ndarray
    cam: object
    gt2d: np.ndarray
    gt3d: np.ndarray
    vis: np.ndarray
    flow3d: np.ndarray


def sliding_windows(seq: Sequence, window: int, stride: int = 1) -> list[Window]:
    """Stride-`stride` windows of `window` frames with ground truth sliced
    consistently (flow has window-1 rows)."""
    if seq.n_frames < window:
        raise TrainerError(f"sequence of {seq.n_frames} frames < window {window}")
    out = []
    for start in range(0, seq.n_frames - window + 1, stride):
        s = slice(start, start + window)
        f = slice(start, start + window - 1)
        out.append(Window(frames=seq.frames[s], depth=seq.depth[s], cam=seq.camera,
                          gt2d=seq.gt2d[s], gt3d=seq.gt3d[s], vis=seq.vis[s],
                          flow3d=seq.flow3d[f]))
    return out


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def split_by_seed_hash(seqs: list[Sequence], val_fraction: float = 0.1):
    """Deterministic validation split keyed on (seed, view) hash."""
    buckets = max(2, int(round(1.0 / max(val_fraction, 1e-9))))
    train, val = [], []
    for seq in seqs:
        h = zlib.crc32(f"{seq.seed}:{seq.view}".encode())
        (val if h % buckets == 0 else train).append(seq)
    if not val and train:
        val.append(train.pop())
    if not train:
        raise TrainerError("no training sequences after split")
    return train, val


def window_losses(model: QueSTModel, win: Window, weights: LossWeights,
                  stage: int, tape: ad.Tape | None, *, ablation: str = "full",
                  query_noise: np.ndarray | None = None):
    """Forward one window and assemble the loss graph.

    Returns (total Tensor, components dict). For no_3d the smoothness
    terms run on raw 2D predictions (no lifting) and the manifold term is
    dropped; no_smoothness zeroes vel/acc.
    """
    lift = ablation != "no_3d"
    out = model.forward(win.frames, win.depth if lift else None,
                        win.cam if lift else None, tape=tape, stage=stage,
                        query_noise=query_noise)
    if stage == 2:
        pair_vis = win.vis[:-1] & win.vis[1:]
        flow = obj.l_flow(out.flow, win.flow3d, pair_vis, weights.lam_flow)
        return flow, {"flow": flow}, out.params

    w = weights
    if ablation == "no_smoothness":
        w = LossWeights(**{**vars(weights), "lam_vel": 0.0, "lam_acc": 0.0})
    if ablation == "no_3d":
        w = LossWeights(**{**vars(weights), "lam_geo": 0.0})

    comps = {
        "aff": obj.l_aff(out.points2d, win.gt2d, win.vis),
        "conf": obj.l_conf(out.conf, out.points2d.data, win.gt2d, win.vis),
        "bound": obj.l_bound(out.logits, mode="saturation"
                             if model.cfg.head_mode == "sigmoid" else "oob",
                             points2d=out.points2d),
        "feat": obj.l_feat(out.refined),
    }
    if lift:
        smooth_pts, smooth_valid = out.points3d, out.valid3d
    else:
        smooth_pts, smooth_valid = out.points2d, np.ones(win.vis.shape, bool)
    if w.lam_smooth * w.lam_vel != 0:
        comps["vel"] = obj.l_vel(smooth_pts, smooth_valid)
    if w.lam_smooth * w.lam_acc != 0:
        comps["acc"] = obj.l_acc(smooth_pts, smooth_valid)
    if w.lam_geo != 0 and lift:
        comps["manifold"] = obj.l_manifold(out.points3d, out.valid3d)
    return obj.stage1_total(comps, w), comps, out.params


@dataclass
class TrainResult:
    model: QueSTModel
    log_rows: list
    best_epoch: int
    best_val: float
    aborted: bool = False


def _query_noise(rng, cfg: ModelConfig):
    return rng.normal(0.0, 0.02, (cfg.window, cfg.n_queries, cfg.embed_dim))


def train(seqs: list[Sequence], model_cfg: ModelConfig, cfg: TrainConfig,
          weights: LossWeights | None = None, *, init_model: QueSTModel | None = None,
          log_path=None, step_callback=None) -> TrainResult:
    """Optimize on sliding windows with early stopping on validation loss.

    stage 2 requires init_model (the stage-1 result); its backbone stays
    bitwise untouched. Emits one log row per epoch; writes them as CSV to
    log_path when given.
    """
    weights = weights or LossWeights()
    weights.validate()
    if cfg.ablation == "no_queries":
        model_cfg = ModelConfig(**{**vars(model_cfg), "query_mode": PER_FRAME})
    if cfg.stage == 2:
        if init_model is None:
            raise TrainerError("stage 2 requires a stage-1 model")
        model = QueSTModel(model_cfg, params={k: v.copy() for k, v
                                              in init_model.params.items()})
    elif init_model is not None:
        model = QueSTModel(model_cfg, params={k: v.copy() for k, v
                                              in init_model.params.items()})
    else:
        model = QueSTModel(model_cfg, seed=cfg.seed)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.stage, 0x7A]))
    train_seqs, val_seqs = split_by_seed_hash(seqs, cfg.val_fraction)
    train_windows = [w for s in train_seqs
                     for w in sliding_windows(s, cfg.window, cfg.window_stride)]
    val_windows = [w for s in val_seqs
                   for w in sliding_windows(s, cfg.window, cfg.window_stride)]

    optim = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    trainable = ((lambda n: not n.startswith("flow.")) if cfg.stage == 1
                 else (lambda n: n.startswith("flow.")))
    param_names = [n for n in model.params if trainable(n)]
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch, best_val = 0, np.inf
    log_rows: list[dict] = []
    aborted = False
    step_index = 0

    def noise_for(win_count):
        if model_cfg.query_mode != PER_FRAME:
            return [None] * win_count
        return [_query_noise(rng, model_cfg) for _ in range(win_count)]

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        epoch_components: dict[str, list] = {}
        epoch_totals = []
        try:
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_windows[i] for i in order[lo:lo + cfg.batch_size]]
                grad_sum = {n: np.zeros_like(model.params[n]) for n in param_names}
                qnoise = noise_for(len(batch))
                for win, qn in zip(batch, qnoise):
                    tape = ad.Tape()
                    total, comps, staged = window_losses(model, win, weights,
                                                         cfg.stage, tape,
                                                         ablation=cfg.ablation,
                                                         query_noise=qn)
                    if total.tape is None:
                        continue  # fully masked window contributes nothing
                    tape.backward(total)
                    for n in param_names:
                        if staged[n].tape is tape:
                            grad_sum[n] += tape.grad(staged[n])
                    epoch_totals.append(total.item())
                    for name, c in comps.items():
                        epoch_components.setdefault(name, []).append(c.item())
                grads = {n: g / max(len(batch), 1) for n, g in grad_sum.items()}
                clip_gradients(grads, cfg.grad_clip)
                adamw_step(model.params, grads, optim)
                step_index += 1
                if step_callback is not None:
                    step_callback(step_index, float(np.mean(epoch_totals[-len(batch):])))
            val_total = evaluate_loss(model, val_windows, weights, cfg, rng)
        except (ad.NonFiniteError, TrainerError) as err:
            log.warning("training aborted at epoch %d: %s", epoch, err)
            aborted = True
            model.params = best_params
            break

        report = LossReport(**{k: float(np.mean(v))
                               for k, v in epoch_components.items()})
        report.total = float(np.mean(epoch_totals)) if epoch_totals else 0.0
        row = {"epoch": epoch, "stage": cfg.stage, "val_total": val_total}
        row.update({k: getattr(report, k) for k in LossReport.FIELDS})
        row["total"] = report.total
        log_rows.append(row)

        if val_total < best_val:
            best_val, best_epoch = val_total, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stopper.update(val_total):
            break

    model.params = best_params
    if log_path is not None:
        write_log(log_rows, log_path)
    return TrainResult(model=model, log_rows=log_rows, best_epoch=best_epoch,
                       best_val=best_val, aborted=aborted)


def evaluate_loss(model: QueSTModel, windows: list[Window], weights: LossWeights,
                  cfg: TrainConfig, rng) -> float:
    """Mean total loss over windows, forward-only (no tape)."""
    if not windows:
        return 0.0
    totals = []
    for win in windows:
        qn = (_query_noise(rng, model.cfg)
              if model.cfg.query_mode == PER_FRAME else None)
        total, _, _ = window_losses(model, win, weights, cfg.stage, None,
                                    ablation=cfg.ablation, query_noise=qn)
        totals.append(total.item())
    return float(np.mean(totals))


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in LOG_HEADER])
