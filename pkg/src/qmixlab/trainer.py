"""Desk-scale optimization harness: synthetic data, AdamW, loss probe, audits.

The probe replaces a detection loss with softmax cross-entropy over class
logits read from the global average of the deepest (stride-32) neck feature
map, which is enough to drive gradients through every recalibration block.
The whole pipeline is a pure function of (config, seeds) at fixed precision:
batches are a fixed partition of the task order, so a zero learning rate
yields a bit-constant loss curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .arch import ModelGraph, SurgeryPlan, apply_surgery, build_model, forward_model, load_bundled, resolve_scaling
from .errors import QmixError, TrainError
from .tensor import ParamBlock, Tape, Tensor, resolve_dtype


@dataclass
class TrainConfig:
    lr0: float = 0.001
    lr1: float = 0.00001
    beta1: float = 0.937
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    precision: object = 64


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear decay from lr0 at epoch 0 to lr1 at the final epoch."""
    if config.epochs <= 1:
        return config.lr0
    t = epoch / (config.epochs - 1)
    return config.lr0 + (config.lr1 - config.lr0) * t


class AdamW:
    """Adam with decoupled (multiplicative) weight decay.

    The paper-style momentum setting maps onto beta1; beta2/eps are standard
    defaults.  Decay is applied to the parameter before the adaptive step.
    """

    def __init__(self, params: list[ParamBlock], config: TrainConfig):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2 = config.beta1, config.beta2
        self.eps = config.eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticTask:
    seed: int
    images: np.ndarray   # (n, 3, size, size)
    labels: np.ndarray   # (n,) int64
    classes: int
    size: int
    class_means: np.ndarray  # (classes, 3)


def class_mean_codes(classes: int, channels: int = 3, amplitude: float = 1.5) -> np.ndarray:
    """Distinct per-channel mean signatures: binary codes scaled by the amplitude."""
    if classes > 2 ** channels:
        raise QmixError(f"at most {2 ** channels} classes encodable over {channels} channels")
    codes = np.zeros((classes, channels))
    for k in range(classes):
        for c in range(channels):
            codes[k, c] = amplitude * ((k >> c) & 1)
    return codes


def gen_synthetic(seed: int, n: int, classes: int = 4, size: int = 64, noise: float = 0.25,
                  precision=64) -> SyntheticTask:
    """Images whose class is carried by global per-channel mean offsets.

    Labels are balanced (exactly n/classes each when divisible) and the whole
    task regenerates bit-identically from the seed.
    """
    if n < classes:
        raise QmixError(f"need at least one sample per class: n={n} < classes={classes}")
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5359)))
    counts = [n // classes + (1 if k < n % classes else 0) for k in range(classes)]
    labels = np.repeat(np.arange(classes), counts)
    rng.shuffle(labels)
    means = class_mean_codes(classes)
    images = means[labels][:, :, None, None] + noise * rng.standard_normal((n, 3, size, size))
    return SyntheticTask(seed=seed, images=images.astype(dtype), labels=labels.astype(np.int64),
                         classes=classes, size=size, class_means=means)


# ---------------------------------------------------------------------------
# probe and training loop


class LossProbe:
    """Linear map from the pooled stride-32 feature map to class logits."""

    def __init__(self, feat_channels: int, classes: int, seed: int, dtype):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5042)))
        bound = 1.0 / np.sqrt(feat_channels)
        self.w = ParamBlock("probe.w", rng.uniform(-bound, bound, (classes, feat_channels)).astype(dtype))
        self.b = ParamBlock("probe.b", np.zeros(classes, dtype=dtype))

    def params(self) -> list[ParamBlock]:
        return [self.w, self.b]

    def loss(self, feat: Tensor, labels: np.ndarray, tape: Tape | None) -> Tensor:
        pooled = ops.global_avg_pool(feat, tape=tape)
        logits = ops.linear(pooled, self.w, self.b, tape=tape)
        return ops.softmax_cross_entropy(logits, labels, tape=tape)


@dataclass
class EpochStat:
    epoch: int
    lr: float
    mean_loss: float


def _tap_index(graph: ModelGraph) -> int:
    """Deepest stride-32 feed into the Detect head (or the last node if headless)."""
    if graph.detect_feeds:
        return graph.detect_feeds[-1]
    return len(graph.nodes) - 1


def train(graph: ModelGraph, task: SyntheticTask, config: TrainConfig) -> list[EpochStat]:
    """Optimize the graph plus probe in place; returns the per-epoch loss curve."""
    dtype = resolve_dtype(config.precision)
    tap = _tap_index(graph)
    feat_channels = graph.nodes[tap].c_out
    probe = LossProbe(feat_channels, task.classes, config.seed, dtype)
    params = graph.parameters(trainable_only=True) + probe.params()
    opt = AdamW(params, config)
    n = task.images.shape[0]
    order = np.arange(n)
    batches = [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
    curve: list[EpochStat] = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        losses = []
        for batch in batches:
            x = Tensor(task.images[batch].astype(dtype, copy=False))
            y = task.labels[batch]
            opt.zero_grad()
            tape = Tape()
            feat = forward_model(graph, x, tape=tape, training=True, upto=tap)
            loss = probe.loss(feat, y, tape)
            val = float(loss.data.reshape(()))
            if not np.isfinite(val):
                raise TrainError(f"non-finite loss {val}", epoch=epoch)
            tape.backward()
            opt.step(lr)
            losses.append(val)
        curve.append(EpochStat(epoch=epoch, lr=lr, mean_loss=float(np.mean(losses))))
    return curve


def loss_curve_csv(curve: list[EpochStat]) -> str:
    lines = ["epoch,lr,mean_loss"]
    for s in curve:
        lines.append(f"{s.epoch},{s.lr!r},{s.mean_loss!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared-gradient audit


def shared_grad_audit(graph: ModelGraph, batch: Tensor) -> dict:
    """Check that mixer gradients under sharing equal the sum of per-instance gradients.

    The oracle clones the model, gives every recalibration block a private
    value-identical copy of its mixer, backpropagates the same scalar loss, and
    sums the private gradients.  The record reports the max discrepancy overall
    and per prefix range (between consecutive attached latent sizes).
    """
    from .layers import QMixBlock, SharedMixer  # local import to avoid cycles

    shared = graph.clone()
    qnodes = [n for n in shared.nodes if isinstance(n.impl, QMixBlock)]
    mixer_users: dict[int, list] = {}
    for n in qnodes:
        mixer_users.setdefault(id(n.impl.mixer), []).append(n)
    audited = [nodes for nodes in mixer_users.values() if len(nodes) >= 2]
    if not audited:
        raise QmixError("shared-gradient audit needs at least two QMix nodes on one shared mixer")
    nodes = max(audited, key=len)
    mixer = nodes[0].impl.mixer

    def run(g: ModelGraph) -> None:
        tape = Tape()
        outs = forward_model(g, batch, tape=tape, training=True)
        outs = outs if isinstance(outs, list) else [outs]
        total = ops.reduce_sum(outs[0], tape=tape)
        for o in outs[1:]:
            total = ops.add(total, ops.reduce_sum(o, tape=tape), tape=tape)
        tape.backward()

    for p in shared.parameters():
        p.zero_grad()
    run(shared)
    shared_w = mixer.w.grad.copy()
    shared_theta = mixer.theta.grad.copy() if mixer.theta is not None else None

    private = graph.clone()
    pnodes = [n for n in private.nodes if isinstance(n.impl, QMixBlock)]
    target_ids = {n.index for n in nodes}
    clones: list[SharedMixer] = []
    for n in pnodes:
        if n.index not in target_ids:
            continue
        src = n.impl.mixer
        copy_mixer = SharedMixer(f"{src.name}.private{n.index}", np.random.default_rng(0),
                                 graph.dtype, capacity=src.capacity,
                                 with_theta=src.theta is not None, with_alpha=src.alpha is not None)
        copy_mixer.w.data[...] = src.w.data
        if src.theta is not None:
            copy_mixer.theta.data[...] = src.theta.data
        if src.alpha is not None:
            copy_mixer.alpha.data[...] = src.alpha.data
        copy_mixer.attach(n.impl.r)
        n.impl.mixer = copy_mixer
        clones.append(copy_mixer)
    for p in private.parameters():
        p.zero_grad()
    for m in clones:
        for p in m.params():
            p.zero_grad()
    run(private)

    summed_w = np.zeros_like(shared_w)
    summed_theta = np.zeros_like(shared_theta) if shared_theta is not None else None
    for m in clones:
        summed_w += m.w.grad
        if summed_theta is not None:
            summed_theta += m.theta.grad

    diff_w = np.abs(shared_w - summed_w)
    diff_t = np.abs(shared_theta - summed_theta) if shared_theta is not None else None
    prefixes = sorted({n.impl.r for n in nodes})
    ranges = []
    lo = 0
    for hi in prefixes:
        seg = diff_w[lo:hi]
        seg_t = diff_t[lo:hi] if diff_t is not None else None
        ranges.append({
            "lo": lo, "hi": hi,
            "contributing": sum(1 for n in nodes if n.impl.r >= hi),
            "max_abs_w": float(seg.max()) if seg.size else 0.0,
            "max_abs_theta": float(seg_t.max()) if seg_t is not None and seg_t.size else 0.0,
        })
        lo = hi
    return {
        "schema_version": 1,
        "mixer": mixer.name,
        "instances": [{"layer": n.index, "latent": n.impl.r} for n in nodes],
        "max_abs_w": float(diff_w.max()),
        "max_abs_theta": float(diff_t.max()) if diff_t is not None else None,
        "ranges": ranges,
    }


# ---------------------------------------------------------------------------
# ablation runner


def build_variant_model(variant: str, preset: str = "n", targets=(6, 8), reduction: int = 4,
                        nc: int | None = None, seed: int = 0, precision=64) -> ModelGraph:
    spec = resolve_scaling(load_bundled(), preset)
    dtype = resolve_dtype(precision)
    base = build_model(spec, nc=nc, seed=seed, dtype=dtype)
    return apply_surgery(base, SurgeryPlan(targets=tuple(targets), reduction=reduction, variant=variant))


def run_ablation(variants: list[str], task: SyntheticTask, config: TrainConfig,
                 preset: str = "n", targets=(6, 8), reduction: int = 4) -> list[dict]:
    """Train each design variant under identical conditions; loss ordering is
    reported, never asserted."""
    results = []
    for variant in variants:
        graph = build_variant_model(variant, preset=preset, targets=targets,
                                    reduction=reduction, seed=config.seed,
                                    precision=config.precision)
        curve = train(graph, task, config)
        results.append({
            "variant": variant,
            "params": graph.param_total(),
            "params_m": round(graph.param_total() / 1e6, 4),
            "epochs": config.epochs,
            "initial_loss": curve[0].mean_loss,
            "final_loss": curve[-1].mean_loss,
        })
    return results
