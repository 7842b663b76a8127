"""Loss, SGD with momentum, training/evaluation loops, and the
finite-difference gradient verification harness.

Training protocol: one clip per video per epoch via segment sampling,
channel-mean input normalization, cross entropy on the consensus logits,
step learning-rate decay. Everything is seeded; two runs with the same
configuration produce identical metrics and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasynth import LoadedDataset, tsn_sample
from .errors import ArgumentError, ShapeError
from .layers import Parameter
from .network import Network, consensus
from .tensor import Rng


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    lr_steps: tuple[int, ...] = ()
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ArgumentError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ArgumentError("batch_size must be >= 1 and epochs >= 0")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: base lr decayed by lr_decay at each configured epoch."""
    lr = cfg.lr
    for step in cfg.lr_steps:
        if epoch >= step:
            lr *= cfg.lr_decay
    return lr


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the labels; exact gradient.

    Stabilized by max subtraction. Returns (loss, grad wrt logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected (N,K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ArgumentError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(exp.sum(axis=1))
    loss = float(-picked.mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


class OptimizerState:
    """Per-parameter velocity buffers; masked positions stay zero."""

    def __init__(self, params: list[Parameter]):
        self.velocity = {p.name: np.zeros_like(p.value) for p in params}

    def for_param(self, p: Parameter) -> np.ndarray:
        return self.velocity[p.name]


def sgd_step(params: list[Parameter], state: OptimizerState, lr: float, cfg: TrainConfig):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; masks re-applied."""
    for p in params:
        v = state.for_param(p)
        if v.shape != p.value.shape:
            raise ShapeError(f"velocity shape {v.shape} != parameter {p.name} {p.value.shape}")
        g = p.grad
        if cfg.weight_decay > 0 and p.decay:
            g = g + cfg.weight_decay * p.value
        v *= cfg.momentum
        v += g
        p.value -= lr * v
        if p.mask is not None:
            p.value[~p.mask] = 0.0
            v[~p.mask] = 0.0


def _assemble_batch(dataset: LoadedDataset, indices, frames: int, mode: str, rng: Rng):
    clips = []
    labels = []
    for vid_idx in indices:
        video = dataset.videos[int(vid_idx)]
        seed = rng.derive("tsn", int(vid_idx)).seed_value()
        clip = tsn_sample(video, frames, mode, seed)
        clips.append(clip)
        labels.append(dataset.labels[int(vid_idx)])
    batch = np.stack(clips).astype(np.float64)
    batch -= dataset.channel_means[None, :, None, None, None]
    return batch, np.asarray(labels, dtype=np.int64)


def _topk_hits(video_logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    order = np.argsort(-video_logits, axis=1, kind="stable")[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


def train_epoch(net: Network, dataset: LoadedDataset, cfg: TrainConfig,
                state: OptimizerState, epoch: int, frames: int):
    """One pass over the dataset. Returns (mean loss, top-1, top-k).

    With an effective learning rate of zero the epoch degenerates to a pure
    evaluation pass: no parameter or statistics updates happen, so the
    network function is unchanged and the reported loss is the evaluation
    loss of the current model.
    """
    if len(dataset) == 0:
        raise ArgumentError("dataset is empty")
    lr = lr_at(cfg, epoch)
    if lr == 0.0:
        return evaluate_loss(net, dataset, frames=frames, batch_size=cfg.batch_size)
    rng = Rng(cfg.seed).derive("epoch", epoch)
    order = rng.derive("shuffle").permutation(len(dataset))
    params = net.parameters()
    k = min(5, net.cfg.num_class)
    total_loss = 0.0
    hits = 0
    hits_k = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch, labels = _assemble_batch(dataset, idx, frames, "train", rng)
        net.zero_grads()
        frame_logits = net.forward(batch, train=True)
        video_logits = consensus(frame_logits)
        loss, g_video = cross_entropy(video_logits, labels)
        g_frames = np.repeat(g_video[:, None, :], frames, axis=1) / frames
        net.backward(g_frames)
        sgd_step(params, state, lr, cfg)
        total_loss += loss * len(idx)
        hits += _topk_hits(video_logits, labels, 1)
        hits_k += _topk_hits(video_logits, labels, k)
    return total_loss / len(order), hits / len(order), hits_k / len(order)


def _eval_video_logits(net: Network, dataset: LoadedDataset, frames: int,
                       clips_per_video: int, batch_size: int, seed: int):
    """Deterministic evaluation logits per video.

    Clip 0 is the segment-midpoint clip; further clips (if requested) draw
    seeded random positions within each segment. Video logits average over
    clips of consensus-over-frames logits.
    """
    n = len(dataset)
    num_class = net.cfg.num_class
    logits = np.zeros((n, num_class))
    rng = Rng(seed)
    for clip_idx in range(clips_per_video):
        mode = "test" if clip_idx == 0 else "train"
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            crng = rng.derive("clip", clip_idx)
            batch, _ = _assemble_batch(dataset, idx, frames, mode, crng)
            frame_logits = net.forward(batch, train=False)
            logits[idx] += consensus(frame_logits)
    return logits / clips_per_video


def evaluate(net: Network, dataset: LoadedDataset, clips_per_video: int = 1,
             frames: int | None = None, batch_size: int = 16, seed: int = 0):
    """Top-1 and top-k (k = min(5, num_class)) accuracy over the dataset."""
    if len(dataset) == 0:
        raise ArgumentError("dataset is empty")
    frames = frames if frames is not None else net.cfg.frames
    logits = _eval_video_logits(net, dataset, frames, clips_per_video, batch_size, seed)
    labels = dataset.labels
    top1 = _topk_hits(logits, labels, 1) / len(dataset)
    k = min(5, net.cfg.num_class)
    topk = _topk_hits(logits, labels, k) / len(dataset)
    return top1, topk


def evaluate_loss(net: Network, dataset: LoadedDataset, frames: int, batch_size: int = 16):
    """(loss, top1, top5) under the deterministic single-clip protocol."""
    logits = _eval_video_logits(net, dataset, frames, 1, batch_size, seed=0)
    loss, _ = cross_entropy(logits, dataset.labels)
    top1 = _topk_hits(logits, dataset.labels, 1) / len(dataset)
    topk = _topk_hits(logits, dataset.labels, min(5, net.cfg.num_class)) / len(dataset)
    return loss, top1, topk


METRICS_HEADER = "epoch,split,loss,top1,top5,lr"


def fit(net: Network, train_set: LoadedDataset, val_set: LoadedDataset | None,
        cfg: TrainConfig, frames: int | None = None, metrics_path=None, log=None):
    """Full training run; returns the list of metric rows (dicts).

    Metric rows are also appended to ``metrics_path`` as CSV when given.
    """
    frames = frames if frames is not None else net.cfg.frames
    state = OptimizerState(net.parameters())
    rows = []
    lines = [METRICS_HEADER]

    def record(epoch, split, loss, top1, top5, lr):
        row = dict(epoch=epoch, split=split, loss=loss, top1=top1, top5=top5, lr=lr)
        rows.append(row)
        lines.append(f"{epoch},{split},{loss:.6f},{top1:.6f},{top5:.6f},{lr:.8f}")
        if log is not None:
            log(f"epoch {epoch:3d} {split:5s} loss {loss:.4f} top1 {top1:.4f} top5 {top5:.4f} lr {lr:.5f}")

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        loss, top1, topk = train_epoch(net, train_set, cfg, state, epoch, frames)
        record(epoch, "train", loss, top1, topk, lr)
        if val_set is not None:
            vloss, vtop1, vtopk = evaluate_loss(net, val_set, frames=frames, batch_size=cfg.batch_size)
            record(epoch, "val", vloss, vtop1, vtopk, lr)
        if metrics_path is not None:
            with open(metrics_path, "w") as fh:
                fh.write("\n".join(lines) + "\n")
    return rows


def finite_difference_check(params: list[Parameter], loss_fn, compute_grads,
                            n_params_sampled: int = 30, eps: float = 1e-5, seed: int = 0) -> float:
    """Central-difference check of analytic gradients on sampled parameters.

    ``loss_fn()`` evaluates the scalar loss without touching gradients;
    ``compute_grads()`` zeroes and refills every parameter's ``grad``.
    Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    Structurally-zero positions are pinned by their masks, so both sides are
    zero there and score a relative error of 0.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ArgumentError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    compute_grads()
    rng = Rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_params_sampled:
        p = params[rng.randint(0, len(params))]
        flat = rng.randint(0, p.value.size)
        idx = np.unravel_index(flat, p.value.shape)
        checked += 1
        if p.mask is not None and not p.mask[idx]:
            # Pinned position: perturbation is undone by the mask; both
            # gradients are zero by construction.
            continue
        orig = p.value[idx]
        p.value[idx] = orig + eps
        fp = loss_fn()
        p.value[idx] = orig - eps
        fm = loss_fn()
        p.value[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        analytic = p.grad[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


def layer_gradient_check(layer, input_shape, n_params_sampled: int = 50,
                         eps: float = 1e-5, seed: int = 0) -> float:
    """FD check of one layer under a fixed random linear functional."""
    rng = Rng(seed)
    x = rng.derive("x").uniform(input_shape, -1.0, 1.0)
    y0, _ = layer.forward(x, train=True, update_stats=False)
    probe = rng.derive("probe").uniform(y0.shape, -1.0, 1.0)

    def loss_fn():
        y, _ = layer.forward(x, train=True, update_stats=False)
        return float((y * probe).sum())

    def compute_grads():
        for p in layer.parameters():
            p.zero_grad()
        y, cache = layer.forward(x, train=True, update_stats=False)
        layer.backward(cache, probe)

    return finite_difference_check(layer.parameters(), loss_fn, compute_grads,
                                   n_params_sampled, eps, seed)


def network_gradient_check(net: Network, batch: int = 2, n_params_sampled: int = 30,
                           eps: float = 1e-6, seed: int = 0) -> float:
    """FD check of the full network under the cross-entropy training loss.

    The default step is smaller than the layer check's: shifting a deep
    parameter moves every downstream pre-activation, so a larger step makes
    some unit cross its rectifier kink and pollutes the quotient.
    """
    cfg = net.cfg
    rng = Rng(seed)
    clip = rng.derive("clip").uniform((batch, cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw), -1.0, 1.0)
    labels = rng.derive("labels").integers(batch, 0, cfg.num_class)

    def loss_fn():
        logits = net.forward(clip, train=True, update_stats=False)
        net._caches = None
        loss, _ = cross_entropy(consensus(logits), labels)
        return loss

    def compute_grads():
        net.zero_grads()
        logits = net.forward(clip, train=True, update_stats=False)
        _, g_video = cross_entropy(consensus(logits), labels)
        g_frames = np.repeat(g_video[:, None, :], cfg.frames, axis=1) / cfg.frames
        net.backward(g_frames)

    return finite_difference_check(net.parameters(), loss_fn, compute_grads,
                                   n_params_sampled, eps, seed)
