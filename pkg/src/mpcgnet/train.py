"""Loss, AdamW, step schedule, the deep-supervision training loop and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from . import tensor as T
from .metrics import DEFAULT as METRICS_DEFAULT
from .metrics import MetricsConfig, MetricsReport, dice_iou, evaluate_dataset
from .network import MPCGNet, save_checkpoint
from .synthdata import Dataset, SegSample, augment, sample_seed
from .tensor import NonFiniteError, Tape, Tensor

DICE_SMOOTH = 1.0
HEAD_NAMES = ("cgmfe_4", "dfa_1", "dfa_2", "dfa_3")


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_step: int = 50
    lr_gamma: float = 0.5
    size: int = 64
    seed: int = 0
    val_fraction: float = 0.2
    augment: bool = True
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, head: str, detail: str = ""):
        self.step, self.head = step, head
        msg = f"non-finite loss at step {step}, head {head}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_gamma ** (epoch // cfg.lr_step)


# ---------------------------------------------------------------- loss


def seg_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """BCE-with-logits (pixel mean) plus soft Dice over the whole batch."""
    mask = np.asarray(mask)
    if mask.shape != logits.shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (values 0 or 1)")
    bce = T.bce_with_logits(logits, mask)
    p = T.sigmoid(logits)
    target = Tensor(mask, dtype=logits.dtype)
    inter = T.sum_all(T.mul(p, target))
    denom = T.add_scalar(T.add(T.sum_all(p), Tensor(np.asarray(mask.sum()), dtype=logits.dtype)), DICE_SMOOTH)
    dice = T.div(T.add_scalar(T.scale(inter, 2.0), DICE_SMOOTH), denom)
    return T.add(bce, T.add_scalar(T.scale(dice, -1.0), 1.0))


@dataclass
class LossReport:
    heads: list[float]

    @property
    def total(self) -> float:
        return float(sum(self.heads))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    wd: float | Sequence[float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled and applied before the Adam delta; ``wd`` may
    be a per-parameter sequence.  Moments are kept in float64.
    """
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state holds {len(state.m)} slots for {len(params)} parameters")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    wds = [wd] * len(params) if np.isscalar(wd) else list(wd)
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.shape:
            raise ValueError(f"optimizer state shape {state.m[i].shape} != parameter shape {p.shape}")
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        w = p.astype(np.float64)
        w -= lr * wds[i] * w
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        w -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p[...] = w.astype(p.dtype)
    return state


def decays(name: str) -> bool:
    """Gate logits and normalisation parameters are exempt from weight decay."""
    return "gates" not in name and "norm" not in name


class AdamW:
    def __init__(self, net, cfg: TrainConfig):
        self.named = list(net.named_parameters())
        self.cfg = cfg
        self.wd = [cfg.weight_decay if decays(n) else 0.0 for n, _ in self.named]
        self.state = AdamState.like([p.data for _, p in self.named])

    def step(self, lr: float) -> None:
        adamw_step(
            [p.data for _, p in self.named],
            [p.grad for _, p in self.named],
            self.state,
            lr,
            self.wd,
            (self.cfg.beta1, self.cfg.beta2),
            self.cfg.adam_eps,
        )


# ---------------------------------------------------------------- loop


LOG_COLUMNS = (
    ["epoch", "lr", "train_loss", "val_mdice"]
    + [f"gates_cgmfe_s{s}" for s in range(1, 5)]
    + [f"gates_dfa_{i}" for i in range(1, 4)]
)


def gate_bits(mat: np.ndarray) -> str:
    return "".join(str(int(v)) for v in np.asarray(mat).reshape(-1))


def split_dataset(ds: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """Hold out the last ``val_fraction`` of the samples; with 0 both halves are the full set."""
    n = len(ds)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val >= n:
        return ds, ds
    return ds.subset(range(n - n_val)), ds.subset(range(n - n_val, n))


def _batch(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    if not cfg.augment:
        return ds.images[idx], ds.masks[idx]
    imgs, masks = [], []
    for i in idx:
        s = augment(SegSample(ds.images[i], ds.masks[i]), sample_seed(cfg.seed, epoch * len(ds) + int(i)))
        imgs.append(s.image)
        masks.append(s.mask)
    return np.stack(imgs), np.stack(masks)


def predict(net: MPCGNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities ``(N, H, W)`` from the inference head."""
    out = []
    for b in range(0, len(images), batch_size):
        logits = net(Tensor(images[b:b + batch_size]), "infer")[0].data
        out.append(expit(logits.astype(np.float64))[:, 0])
    return np.concatenate(out)


def mean_dice(net: MPCGNet, ds: Dataset, cfg: MetricsConfig = METRICS_DEFAULT) -> float:
    probs = predict(net, ds.images)
    scores = [dice_iou(p, m[0], cfg)[0] for p, m in zip(probs, ds.masks)]
    return float(sum(scores) / len(scores))


@dataclass
class TrainResult:
    rows: list[dict[str, str]]
    losses: list[float]
    val_mdice: list[float]


def train_step(net: MPCGNet, opt: AdamW, images: np.ndarray, masks: np.ndarray, lr: float, step: int) -> LossReport:
    net.zero_grad()
    head = "encoder/decoder"
    try:
        with Tape() as tape:
            feats = net.features(Tensor(images))
            losses = []
            for i, head in enumerate(HEAD_NAMES):
                losses.append(seg_loss(net.head_logits(feats, i, images.shape[2]), masks))
            head = "total"
            total = losses[0]
            for l in losses[1:]:
                total = T.add(total, l)
    except NonFiniteError as exc:
        raise NonFiniteLossError(step, head, str(exc)) from exc
    tape.backward(total)
    for name, p in opt.named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteLossError(step, "backward", f"gradient of {name} is not finite")
    opt.step(lr)
    return LossReport([float(l.item()) for l in losses])


def train(
    net: MPCGNet,
    dataset: Dataset,
    cfg: TrainConfig,
    val_set: Dataset | None = None,
    log_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    on_epoch: Callable[[dict[str, str]], None] | None = None,
) -> TrainResult:
    """Train with equal-weight deep supervision on all four heads.

    Without an explicit ``val_set`` the last ``cfg.val_fraction`` of
    ``dataset`` is held out.  One TSV row is logged per epoch; the
    checkpoint is written every ``cfg.checkpoint_every`` epochs (if set)
    and at the end.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if val_set is None:
        train_set, val_set = split_dataset(dataset, cfg.val_fraction)
    else:
        train_set = dataset
    opt = AdamW(net, cfg)
    n = len(train_set)
    rows, losses, vals = [], [], []
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, delimiter="\t", lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    step = 0
    try:
        with threadpool_limits(limits=cfg.threads):
            for epoch in range(cfg.epochs):
                lr = lr_at(cfg, epoch)
                order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
                total, seen = 0.0, 0
                for b in range(0, n, cfg.batch_size):
                    idx = order[b:b + cfg.batch_size]
                    imgs, msks = _batch(train_set, idx, cfg, epoch)
                    rep = train_step(net, opt, imgs, msks, lr, step)
                    total += rep.total * len(idx)
                    seen += len(idx)
                    step += 1
                epoch_loss = total / seen
                vd = mean_dice(net, val_set)
                mats = net.gate_matrices()
                row = {
                    "epoch": str(epoch),
                    "lr": f"{lr:.6g}",
                    "train_loss": f"{epoch_loss:.6f}",
                    "val_mdice": f"{vd:.6f}",
                }
                for key, mat in mats.items():
                    row[f"gates_{key}"] = gate_bits(mat)
                rows.append(row)
                losses.append(epoch_loss)
                vals.append(vd)
                if writer:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                    log_fh.flush()
                if on_epoch:
                    on_epoch(row)
                if ckpt_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(ckpt_path, net)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, net)
    return TrainResult(rows, losses, vals)


def evaluate(net: MPCGNet, dataset: Dataset, cfg: MetricsConfig = METRICS_DEFAULT, batch_size: int = 8) -> MetricsReport:
    probs = predict(net, dataset.images, batch_size)
    return evaluate_dataset(list(probs), [m[0] > 0.5 for m in dataset.masks], cfg, names=dataset.ids)
