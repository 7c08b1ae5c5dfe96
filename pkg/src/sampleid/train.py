"""Joint classification + triplet training of the two-tower encoder over lazily rendered pairs."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cqt import clip_features
from .dataset import DatasetManifest, PairRenderer
from .model import DESK_CONFIG, EncoderConfig, Towers, save_checkpoint

log = logging.getLogger(__name__)

PAPER_EPOCHS = 100
PAPER_DROPS = (40, 80)
VAL_STREAM = 1 << 20


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.7
    batch_size: int = 64
    epochs: int = 30
    lr: float = 1e-4
    lr_drops: tuple | None = None  # None: the 40/80-of-100 schedule scaled to ``epochs``
    seed: int = 0
    shared: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0 or self.gamma < 0 or self.beta + self.gamma <= 0:
            raise ValueError("beta and gamma must be non-negative with a positive sum")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr_drops is not None:
            object.__setattr__(self, "lr_drops", tuple(int(e) for e in self.lr_drops))

    @property
    def drops(self) -> tuple:
        if self.lr_drops is not None:
            return self.lr_drops
        return tuple(int(round(e * self.epochs / PAPER_EPOCHS)) for e in PAPER_DROPS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.drops)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: divided by five at each drop epoch."""
    return cfg.lr / 5.0 ** sum(epoch >= e for e in cfg.drops)


# ----------------------------------------------------------------------------
# losses


def _same_track(track_ids) -> torch.Tensor:
    ids = np.asarray(track_ids)
    return torch.from_numpy(ids[:, None] == ids[None, :])


def classification_loss(A: torch.Tensor, P: torch.Tensor, track_ids) -> torch.Tensor:
    """Softmax cross-entropy of each anchor against the batch's positives.

    Positives from the anchor's own track (other than its own) are excluded from
    the normaliser.  Rows with no cross-track positive left are skipped.
    """
    logits = A @ P.T
    same = _same_track(track_ids)
    eye = torch.eye(len(A), dtype=torch.bool)
    masked = logits.masked_fill(same & ~eye, float("-inf"))
    valid = (~same).any(dim=1)
    if not bool(valid.all()):
        log.debug("classification loss: %d row(s) without cross-track negatives skipped", int((~valid).sum()))
    if not bool(valid.any()):
        return logits.sum() * 0.0
    rows = torch.nonzero(valid).squeeze(1)
    per_row = torch.logsumexp(masked[rows], dim=1) - logits[rows, rows]
    return per_row.mean()


def mine_semi_hard(cos, track_ids, alpha: float) -> np.ndarray:
    """Per anchor row, the most similar cross-track positive inside (s_p - alpha, s_p).

    Falls back to the most similar cross-track positive when the band is empty;
    ``-1`` marks rows with no cross-track entry at all.
    """
    c = cos.detach().cpu().numpy() if torch.is_tensor(cos) else np.asarray(cos, dtype=float)
    ids = np.asarray(track_ids)
    out = np.full(len(c), -1, dtype=np.int64)
    for a in range(len(c)):
        cross = ids != ids[a]
        if not cross.any():
            continue
        s_p = c[a, a]
        row = np.where(cross, c[a], -np.inf)
        band = cross & (row > s_p - alpha) & (row < s_p)
        pick = np.where(band, row, -np.inf) if band.any() else row
        out[a] = int(np.argmax(pick))
    return out


def triplet_loss(A: torch.Tensor, P: torch.Tensor, negatives, alpha: float) -> torch.Tensor:
    """Mean hinge max(0, cos(a, n) - cos(a, p) + alpha) over rows that have a negative."""
    a = F.normalize(A, dim=1)
    p = F.normalize(P, dim=1)
    neg = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    rows = torch.nonzero(neg >= 0).squeeze(1)
    if len(rows) == 0:
        return (a * p).sum() * 0.0
    s_p = (a[rows] * p[rows]).sum(dim=1)
    s_n = (a[rows] * p[neg[rows]]).sum(dim=1)
    return torch.clamp(s_n - s_p + alpha, min=0.0).mean()


def combined_loss(A: torch.Tensor, P: torch.Tensor, track_ids, cfg: TrainConfig):
    """Returns ``(beta * L_cls + gamma * L_trip, L_cls, L_trip)``."""
    if cfg.beta == 0 and cfg.gamma == 0:
        raise ValueError("beta and gamma cannot both be zero")
    l_cls = classification_loss(A, P, track_ids)
    with torch.no_grad():
        cos = F.normalize(A, dim=1) @ F.normalize(P, dim=1).T
    negatives = mine_semi_hard(cos, track_ids, cfg.alpha)
    l_trip = triplet_loss(A, P, negatives, cfg.alpha)
    return cfg.beta * l_cls + cfg.gamma * l_trip, l_cls, l_trip


# ----------------------------------------------------------------------------
# optimiser


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place.  Non-finite gradients abort before any change."""
    params = list(params)
    grads = list(grads)
    for i, g in enumerate(grads):
        if g is not None and not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient in parameter #{i} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            m = state.m.setdefault(i, torch.zeros_like(p))
            v = state.v.setdefault(i, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    towers: Towers
    history: list
    best_epoch: int
    best_val: float


def _features(pairs):
    anchors = np.stack([clip_features(p.anchor.samples, p.anchor.sample_rate) for p in pairs])
    positives = np.stack([clip_features(p.positive.samples, p.positive.sample_rate) for p in pairs])
    return torch.from_numpy(anchors), torch.from_numpy(positives)


def _unique_params(towers: Towers):
    seen, out = set(), []
    for p in towers.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _batches(items, size):
    for i in range(0, len(items), size):
        chunk = items[i : i + size]
        if len(chunk) >= 2:
            yield chunk


def _write_checkpoints(out_dir, towers, tag, meta):
    for role in ("query", "candidate"):
        save_checkpoint(os.path.join(out_dir, f"{role}_{tag}.ckpt"), getattr(towers, role), dict(meta, tower=role))


def train(
    manifest: DatasetManifest,
    renderer: PairRenderer,
    cfg: TrainConfig = TrainConfig(),
    encoder_config: EncoderConfig = DESK_CONFIG,
    out_dir: str | None = None,
    progress=None,
) -> TrainResult:
    """Train both towers.  Writes ``metrics.jsonl`` and best/final checkpoints when ``out_dir`` is set.

    The metrics log carries no timing so that reruns compare byte for byte;
    wall-clock times go to ``timing.jsonl`` next to it.
    """
    train_slots = manifest.slots("train")
    if not train_slots:
        raise ValueError("training split is empty")
    val_slots = manifest.slots("val")

    torch.manual_seed(cfg.seed)
    towers = Towers(encoder_config, shared=cfg.shared)
    params = _unique_params(towers)
    state = AdamState()

    metrics_fh = timing_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        timing_fh = open(os.path.join(out_dir, "timing.jsonl"), "w")
        with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
            json.dump({"train": cfg.to_dict(), "encoder": encoder_config.to_dict()}, fh, indent=1, sort_keys=True)

    def emit(record, wall):
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
            timing_fh.write(json.dumps({"epoch": record["epoch"], "step": record["step"], "wall_time": round(wall, 3)}) + "\n")
            timing_fh.flush()

    # validation pairs are rendered once with epoch 0 so the curve is comparable across epochs;
    # a fixed shuffle mixes tracks within each batch as in training
    val_batches = []
    val_order = np.random.default_rng([cfg.seed, VAL_STREAM]).permutation(len(val_slots))
    for chunk in _batches([val_slots[i] for i in val_order], cfg.batch_size):
        pairs = [renderer.render(s, 0) for s in chunk]
        val_batches.append((*_features(pairs), [p.track_id for p in pairs]))

    t0 = time.time()
    history = []
    best_val, best_epoch, step = float("inf"), -1, 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_slots))
            towers.train()
            sums = np.zeros(3)
            n_batches = 0
            for chunk in _batches([train_slots[i] for i in order], cfg.batch_size):
                pairs = [renderer.render(s, epoch) for s in chunk]
                xa, xp = _features(pairs)
                ids = [p.track_id for p in pairs]
                try:
                    A = towers.query(xa)
                    P = towers.candidate(xp)
                except FloatingPointError as e:
                    raise DivergenceError(f"{e} at epoch {epoch}, step {step}") from e
                loss, l_cls, l_trip = combined_loss(A, P, ids, cfg)
                if not bool(torch.isfinite(loss)):
                    raise DivergenceError(f"loss is {float(loss)} at epoch {epoch}, step {step}")
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                adam_step(params, grads, state, lr)
                step += 1
                n_batches += 1
                vals = np.array([float(l_cls.detach()), float(l_trip.detach()), float(loss.detach())])
                sums += vals
                emit(
                    {"kind": "step", "epoch": epoch, "step": step, "l_cls": vals[0], "l_trip": vals[1], "loss": vals[2], "lr": lr},
                    time.time() - t0,
                )
            train_mean = sums / max(n_batches, 1)
            val = validate(towers, val_batches, cfg) if val_batches else (np.nan, np.nan, np.nan)
            rec = {
                "kind": "epoch",
                "epoch": epoch,
                "step": step,
                "l_cls": train_mean[0],
                "l_trip": train_mean[1],
                "loss": train_mean[2],
                "val_l_cls": val[0],
                "val_l_trip": val[1],
                "val_loss": val[2],
                "lr": lr,
            }
            history.append(rec)
            emit(rec, time.time() - t0)
            if progress is not None:
                progress(rec, time.time() - t0)
            meta = {"epoch": epoch, "step": step, "seed": cfg.seed, "val_loss": val[2]}
            score = val[2] if val_batches else train_mean[2]
            if out_dir is not None and score < best_val:
                _write_checkpoints(out_dir, towers, "best", meta)
            if score < best_val:
                best_val, best_epoch = score, epoch
        if out_dir is not None:
            _write_checkpoints(out_dir, towers, "final", {"epoch": cfg.epochs - 1, "step": step, "seed": cfg.seed})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    towers.eval()
    return TrainResult(towers, history, best_epoch, best_val)


def validate(towers: Towers, val_batches, cfg: TrainConfig):
    towers.eval()
    sums = np.zeros(3)
    with torch.no_grad():
        for xa, xp, ids in val_batches:
            loss, l_cls, l_trip = combined_loss(towers.query(xa), towers.candidate(xp), ids, cfg)
            sums += [float(l_cls), float(l_trip), float(loss)]
    towers.train()
    return sums / len(val_batches)
