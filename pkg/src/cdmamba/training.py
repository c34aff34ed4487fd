"""Losses, Adam, the training loop, and the evaluation metric suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward


@dataclass
class LossConfig:
    lambda1: float = 0.5      # cross-entropy weight
    lambda2: float = 0.5      # dice weight
    dice_smoothing: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError("at least one loss coefficient must be positive")


def _check_mask(y: np.ndarray, what: str = "mask") -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{what} must be binary {{0,1}}, found values outside")
    return y.astype(np.float64)


def ce_loss(logits: Tensor, y) -> Tensor:
    """Two-class cross-entropy, mean over pixels, log clamped at 1e-12."""
    y = _check_mask(y)
    if logits.data.shape[0] != 2 or logits.data.shape[1:] != y.shape:
        raise ValueError(f"ce_loss: logits {logits.data.shape} vs mask {y.shape}")
    onehot = np.stack([1.0 - y, y])
    logp = ad.log(ad.softmax(logits, axis=0), floor=1e-12)
    picked = ad.reduce_sum(ad.mul(logp, Tensor(onehot)))
    return ad.scale(picked, -1.0 / y.size)


def class1_probability(logits: Tensor) -> Tensor:
    """Softmax probability of the changed class, shape [H,W]."""
    probs = ad.softmax(logits, axis=0)
    _, p1 = ad.split(probs, [1, 1], axis=0)
    return p1.reshape(logits.data.shape[1:])


def dice_loss(prob: Tensor, y, eps: float = 1.0) -> Tensor:
    """Soft dice on the changed-class probability: 1 - (2*overlap+eps)/(sums+eps)."""
    y = _check_mask(y)
    if prob.data.shape != y.shape:
        raise ValueError(f"dice_loss: prob {prob.data.shape} vs mask {y.shape}")
    if prob.data.min() < -1e-9 or prob.data.max() > 1 + 1e-9:
        raise ValueError("dice_loss: probabilities must lie in [0, 1]")
    yt = Tensor(y)
    inter = ad.reduce_sum(prob * yt)
    total = ad.reduce_sum(prob) + float(y.sum())
    return 1.0 - (ad.scale(inter, 2.0) + eps) / (total + eps)


def total_loss(logits: Tensor, y, cfg: LossConfig | None = None):
    """Weighted sum lambda1*CE + lambda2*Dice; returns (total, ce, dice)."""
    cfg = cfg or LossConfig()
    ce = ce_loss(logits, y)
    dice = dice_loss(class1_probability(logits), y, cfg.dice_smoothing)
    total = ad.scale(ce, cfg.lambda1) + ad.scale(dice, cfg.lambda2)
    return total, ce, dice


# ---------------------------------------------------------------------------
# confusion counts and the metric suite

@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred, gt) -> ConfusionCounts:
    """Exact per-pixel counts; pred and gt are same-shape binary masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: shape mismatch {pred.shape} vs {gt.shape}")
    _check_mask(pred, "pred")
    _check_mask(gt, "gt")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: bool  # some denominator was 0/0 and got defined as 0


def metrics(c: ConfusionCounts) -> MetricReport:
    degenerate = False

    def ratio(num: int, den: int) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp)
    recall = ratio(c.tp, c.tp + c.fn)
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou = ratio(c.tp, c.tp + c.fp + c.fn)
    oa = ratio(c.tp + c.tn, c.total)
    return MetricReport(precision, recall, f1, iou, oa, degenerate)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over named parameters, updates in place."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient for parameter '{name}'")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# training and evaluation loops

@dataclass
class TrainResult:
    log_lines: list
    epoch_total_losses: list
    best_f1: float
    best_epoch: int
    best_state: dict
    final_metrics: MetricReport = None


LOG_HEADER = "epoch,loss_total,loss_ce,loss_dice,precision,recall,f1,iou,oa"


def train_loop(model, samples, epochs: int, batch_size: int, seed: int,
               loss_cfg: LossConfig | None = None, lr: float = 1e-4,
               beta1: float = 0.9, beta2: float = 0.999, adam_eps: float = 1e-8,
               progress=None) -> TrainResult:
    """Deterministic training: seeded shuffling, best-train-F1 state retained.

    Per-epoch log line (comma separated): epoch, total/CE/Dice losses and the
    train-set metrics accumulated from the training batches' own predictions.
    Dice is batch-global (one overlap sum over all pixels in the batch).
    """
    if not samples:
        raise ValueError("train_loop: empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ValueError(f"bad schedule: epochs={epochs}, batch_size={batch_size}")
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    named = list(model.named_parameters())
    opt = Adam(named, lr=lr, beta1=beta1, beta2=beta2, eps=adam_eps)

    lines = []
    epoch_totals = []
    best_f1, best_epoch, best_state = -1.0, 0, {}
    report = None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        conf = ConfusionCounts()
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(samples), batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            ce_terms = []
            inter_terms = []
            total_terms = []
            for s in batch:
                logits = model(Tensor(s.t1), Tensor(s.t2))
                ce_terms.append(ce_loss(logits, s.gt))
                p1 = class1_probability(logits)
                inter_terms.append(ad.reduce_sum(p1 * Tensor(s.gt.astype(np.float64))))
                total_terms.append(ad.reduce_sum(p1) + float(s.gt.sum()))
                conf = conf + confusion(np.argmax(logits.data, axis=0), s.gt)
            ce_batch = ad.scale(_sum_tensors(ce_terms), 1.0 / len(batch))
            eps = loss_cfg.dice_smoothing
            dice_batch = 1.0 - (ad.scale(_sum_tensors(inter_terms), 2.0) + eps) \
                / (_sum_tensors(total_terms) + eps)
            total = ad.scale(ce_batch, loss_cfg.lambda1) + ad.scale(dice_batch, loss_cfg.lambda2)
            backward(total)
            opt.step()
            sums += (total.item(), ce_batch.item(), dice_batch.item())
            n_batches += 1
        mean_total, mean_ce, mean_dice = (float(v) for v in sums / n_batches)
        report = metrics(conf)
        lines.append(
            f"{epoch},{mean_total!r},{mean_ce!r},{mean_dice!r},"
            f"{report.precision!r},{report.recall!r},{report.f1!r},{report.iou!r},{report.oa!r}")
        epoch_totals.append(mean_total)
        if report.f1 > best_f1:
            best_f1, best_epoch = report.f1, epoch
            best_state = {name: p.data.copy() for name, p in named}
        if progress is not None:
            progress(epoch, lines[-1])
    return TrainResult(lines, epoch_totals, best_f1, best_epoch, best_state, report)


def _sum_tensors(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


@dataclass
class EvalReport:
    counts: ConfusionCounts
    metrics: MetricReport
    n_samples: int
    degenerate_masks: int  # ground-truth masks with no positive pixel


def evaluate(model, samples) -> EvalReport:
    """Aggregate confusion counts over a dataset (order-independent sums)."""
    conf = ConfusionCounts()
    degenerate_masks = 0
    for s in samples:
        pred = model.predict(s.t1, s.t2)
        conf = conf + confusion(pred, s.gt)
        if int(s.gt.sum()) == 0:
            degenerate_masks += 1
    return EvalReport(conf, metrics(conf), len(samples), degenerate_masks)


def load_state(model, state: dict) -> None:
    """Copy a saved {name: array} mapping back into the model parameters."""
    lookup = dict(model.named_parameters())
    for name, value in state.items():
        lookup[name].data = value.copy()
