"""Constructible layer kinds with exact parameter counts, FLOP counts, and forwards.

The zoo covers the YOLOv8 building blocks (Conv+BN+SiLU, C2f, SPPF, Detect,
Upsample, Concat) plus the QMixBlock channel-recalibration module and its
design variants.  Parameter counts follow the standard convention: BN scale
and shift are parameters, BN running statistics are buffers, and the Detect
head's frozen distribution-projection weights are stored (counted) but never
trained.

FLOP counts are multiply-accumulate based: convolutions and linear maps cost
2 FLOPs per MAC, elementwise ops cost 1 FLOP per output element (BN costs 2:
scale and shift), max pooling costs k*k comparisons per output element, and
pure data movement (concat, nearest upsample, split) costs 0.  All counts are
per image (batch 1).
"""

from __future__ import annotations

import numpy as np

from .errors import BuildError, ShapeError
from . import ops
from .tensor import DEFAULT_DTYPE, ParamBlock, Tape, Tensor

MIXER_CAPACITY = 1024
VARIANT_KINDS = ("QMixBlock", "QMixSin", "QMixScaled", "QMixFull")


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform fan-in-scaled init, bound 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_flops(cin: int, cout: int, k: int, ho: int, wo: int, groups: int = 1, bias: bool = False) -> int:
    """2*MAC convention for a conv producing a (cout, ho, wo) map."""
    f = 2 * (k * k * (cin // groups) * cout) * ho * wo
    if bias:
        f += cout * ho * wo
    return f


def conv_out_hw(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class Layer:
    """Shared interface: owned params, exact counts, forward, and per-image FLOPs."""

    kind: str = "?"
    out_channels: int | None = None

    def params(self) -> list[ParamBlock]:
        return []

    def prunable_weights(self) -> list[ParamBlock]:
        """Conv/linear weight blocks eligible for magnitude sparsification."""
        return []

    def param_count(self) -> int:
        return sum(p.count for p in self.params())

    def forward(self, xs: list[Tensor], tape: Tape | None = None, training: bool = False):
        raise NotImplementedError

    def flops(self, in_hw: list[tuple[int, int]]) -> tuple[int, tuple[int, int] | None]:
        raise NotImplementedError


class ConvBlock(Layer):
    """Conv2d (no bias) + BatchNorm + SiLU, the standard YOLOv8 'Conv' unit.

    Parameter count: cin*cout*k^2 + 2*cout.
    """

    kind = "Conv"

    def __init__(self, prefix: str, cin: int, cout: int, k: int = 1, s: int = 1,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE, act: bool = True):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.s = cin, cout, k, s
        self.p = k // 2
        self.act = act
        self.out_channels = cout
        self.w = ParamBlock(f"{prefix}.conv_w", he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bn_gamma = ParamBlock(f"{prefix}.bn_g", np.ones(cout, dtype=dtype))
        self.bn_beta = ParamBlock(f"{prefix}.bn_b", np.zeros(cout, dtype=dtype))
        self.run_mean = np.zeros(cout, dtype=dtype)
        self.run_var = np.ones(cout, dtype=dtype)

    def params(self):
        return [self.w, self.bn_gamma, self.bn_beta]

    def prunable_weights(self):
        return [self.w]

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        y = ops.conv2d(x, self.w, stride=self.s, padding=self.p, tape=tape)
        y = ops.batch_norm(y, self.bn_gamma, self.bn_beta, self.run_mean, self.run_var,
                           training=training, tape=tape)
        return ops.silu(y, tape=tape) if self.act else y

    def flops(self, in_hw):
        ((h, w),) = in_hw
        ho, wo = conv_out_hw(h, w, self.k, self.s, self.p)
        n_out = self.cout * ho * wo
        f = conv_flops(self.cin, self.cout, self.k, ho, wo) + 2 * n_out + (n_out if self.act else 0)
        return f, (ho, wo)


class PlainConv(Layer):
    """Bare conv2d with bias, no norm, no activation (Detect head finals)."""

    kind = "Conv2d"

    def __init__(self, prefix: str, cin: int, cout: int, k: int = 1,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.p = k // 2
        self.out_channels = cout
        self.w = ParamBlock(f"{prefix}.w", he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = ParamBlock(f"{prefix}.b", np.zeros(cout, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def prunable_weights(self):
        return [self.w]

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        return ops.conv2d(x, self.w, self.b, stride=1, padding=self.p, tape=tape)

    def flops(self, in_hw):
        ((h, w),) = in_hw
        ho, wo = conv_out_hw(h, w, self.k, 1, self.p)
        return conv_flops(self.cin, self.cout, self.k, ho, wo, bias=True), (ho, wo)


class Bottleneck(Layer):
    """Two 3x3 ConvBlocks with an optional residual add (requires cin == cout)."""

    kind = "Bottleneck"

    def __init__(self, prefix: str, c: int, shortcut: bool,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.c = c
        self.shortcut = shortcut
        self.out_channels = c
        self.cv1 = ConvBlock(f"{prefix}.cv1", c, c, 3, 1, rng, dtype)
        self.cv2 = ConvBlock(f"{prefix}.cv2", c, c, 3, 1, rng, dtype)

    def params(self):
        return self.cv1.params() + self.cv2.params()

    def prunable_weights(self):
        return self.cv1.prunable_weights() + self.cv2.prunable_weights()

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        y = self.cv2.forward([self.cv1.forward([x], tape, training)], tape, training)
        return ops.add(x, y, tape=tape) if self.shortcut else y

    def flops(self, in_hw):
        ((h, w),) = in_hw
        f1, hw = self.cv1.flops([(h, w)])
        f2, hw = self.cv2.flops([hw])
        f = f1 + f2 + (self.c * h * w if self.shortcut else 0)
        return f, hw


class C2fBlock(Layer):
    """Split/concat bottleneck block: cv1 -> chunk(2) -> n chained bottlenecks -> cv2.

    Hidden width c = c2/2; cv2 fans in (2+n)*c channels.
    """

    kind = "C2f"

    def __init__(self, prefix: str, c1: int, c2: int, n: int = 1, shortcut: bool = False,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        if c2 % 2 != 0:
            raise BuildError(f"C2f output channels must be even, got {c2}")
        self.c1, self.c2, self.n, self.shortcut = c1, c2, n, shortcut
        self.c = c2 // 2
        self.out_channels = c2
        self.cv1 = ConvBlock(f"{prefix}.cv1", c1, 2 * self.c, 1, 1, rng, dtype)
        self.m = [Bottleneck(f"{prefix}.m{i}", self.c, shortcut, rng, dtype) for i in range(n)]
        self.cv2 = ConvBlock(f"{prefix}.cv2", (2 + n) * self.c, c2, 1, 1, rng, dtype)

    def params(self):
        out = self.cv1.params()
        for b in self.m:
            out += b.params()
        return out + self.cv2.params()

    def prunable_weights(self):
        out = self.cv1.prunable_weights()
        for b in self.m:
            out += b.prunable_weights()
        return out + self.cv2.prunable_weights()

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        y = self.cv1.forward([x], tape, training)
        pieces = ops.split_channels(y, [self.c, self.c], tape=tape)
        cur = pieces[-1]
        for b in self.m:
            cur = b.forward([cur], tape, training)
            pieces.append(cur)
        return self.cv2.forward([ops.concat_channels(pieces, tape=tape)], tape, training)

    def flops(self, in_hw):
        ((h, w),) = in_hw
        f, hw = self.cv1.flops([(h, w)])
        for b in self.m:
            fb, hw = b.flops([hw])
            f += fb
        f2, hw = self.cv2.flops([hw])
        return f + f2, hw


class SppfBlock(Layer):
    """Spatial pyramid pooling (fast): cv1 -> three chained maxpools -> concat -> cv2."""

    kind = "SPPF"

    def __init__(self, prefix: str, c1: int, c2: int, k: int = 5,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.c1, self.c2, self.k = c1, c2, k
        self.c_ = c1 // 2
        self.out_channels = c2
        self.cv1 = ConvBlock(f"{prefix}.cv1", c1, self.c_, 1, 1, rng, dtype)
        self.cv2 = ConvBlock(f"{prefix}.cv2", 4 * self.c_, c2, 1, 1, rng, dtype)

    def params(self):
        return self.cv1.params() + self.cv2.params()

    def prunable_weights(self):
        return self.cv1.prunable_weights() + self.cv2.prunable_weights()

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        y = [self.cv1.forward([x], tape, training)]
        for _ in range(3):
            y.append(ops.maxpool2d(y[-1], self.k, 1, self.k // 2, tape=tape))
        return self.cv2.forward([ops.concat_channels(y, tape=tape)], tape, training)

    def flops(self, in_hw):
        ((h, w),) = in_hw
        f, hw = self.cv1.flops([(h, w)])
        f += 3 * (self.k * self.k * self.c_ * hw[0] * hw[1])
        f2, hw = self.cv2.flops([hw])
        return f + f2, hw


class Upsample(Layer):
    """Nearest-neighbour 2x upsampling; parameter- and FLOP-free data movement."""

    kind = "Upsample"

    def __init__(self, cin: int, scale: int = 2, mode: str = "nearest"):
        if scale != 2 or mode != "nearest":
            raise BuildError(f"only 2x nearest upsampling is supported, got scale={scale}, mode={mode!r}")
        self.out_channels = cin

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        return ops.upsample_nearest_2x(x, tape=tape)

    def flops(self, in_hw):
        ((h, w),) = in_hw
        return 0, (2 * h, 2 * w)


class Concat(Layer):
    """Channel concatenation of the from-inputs; FLOP-free."""

    kind = "Concat"

    def __init__(self, cins: list[int]):
        self.out_channels = sum(cins)

    def forward(self, xs, tape=None, training=False):
        return ops.concat_channels(xs, tape=tape)

    def flops(self, in_hw):
        hw = in_hw[0]
        for other in in_hw[1:]:
            if other != hw:
                raise ShapeError(f"concat inputs disagree on spatial dims: {in_hw}")
        return 0, hw


class DetectHead(Layer):
    """Per-scale box and class branches producing raw (4*reg_max + nc)-channel maps.

    Matches the standard stored-parameter formula for the published head,
    including the frozen 16-entry distribution-projection weight (counted,
    never trained, unused when emitting raw maps).
    """

    kind = "Detect"

    def __init__(self, prefix: str, nc: int, chs: list[int], reg_max: int = 16,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.nc = nc
        self.chs = list(chs)
        self.reg_max = reg_max
        self.out_channels = None
        c2 = max(16, chs[0] // 4, 4 * reg_max)
        c3 = max(chs[0], min(nc, 100))
        self.c2, self.c3 = c2, c3
        self.cv2 = []
        self.cv3 = []
        for i, ch in enumerate(chs):
            self.cv2.append([
                ConvBlock(f"{prefix}.cv2.{i}.0", ch, c2, 3, 1, rng, dtype),
                ConvBlock(f"{prefix}.cv2.{i}.1", c2, c2, 3, 1, rng, dtype),
                PlainConv(f"{prefix}.cv2.{i}.2", c2, 4 * reg_max, 1, rng, dtype),
            ])
            self.cv3.append([
                ConvBlock(f"{prefix}.cv3.{i}.0", ch, c3, 3, 1, rng, dtype),
                ConvBlock(f"{prefix}.cv3.{i}.1", c3, c3, 3, 1, rng, dtype),
                PlainConv(f"{prefix}.cv3.{i}.2", c3, nc, 1, rng, dtype),
            ])
        self.dfl_w = ParamBlock(f"{prefix}.dfl_w", np.arange(reg_max, dtype=dtype), trainable=False)

    def _branches(self):
        for chain in self.cv2 + self.cv3:
            yield from chain

    def params(self):
        out = []
        for layer in self._branches():
            out += layer.params()
        out.append(self.dfl_w)
        return out

    def prunable_weights(self):
        out = []
        for layer in self._branches():
            out += layer.prunable_weights()
        return out

    def forward(self, xs, tape=None, training=False):
        if len(xs) != len(self.chs):
            raise ShapeError(f"Detect expects {len(self.chs)} inputs, got {len(xs)}")
        outs = []
        for i, x in enumerate(xs):
            box = x
            for layer in self.cv2[i]:
                box = layer.forward([box], tape, training)
            cls = x
            for layer in self.cv3[i]:
                cls = layer.forward([cls], tape, training)
            outs.append(ops.concat_channels([box, cls], tape=tape))
        return outs

    def flops(self, in_hw):
        f = 0
        for i, hw in enumerate(in_hw):
            for layer in self.cv2[i] + self.cv3[i]:
                fl, _ = layer.flops([hw])
                f += fl
        return f, None


class SharedMixer:
    """A single {w, theta} parameter pair at fixed capacity, prefix-sliced per call site.

    ``w`` is drawn once from N(0, 1) and ``theta`` starts at zero; every block
    that references the mixer reads and writes only the leading ``r`` entries,
    so gradients from all attached blocks accumulate into the same storage.
    The Sin variant drops theta entirely; the Scaled variant adds one shared
    learnable frequency scalar, initialized to 1.
    """

    def __init__(self, name: str, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE,
                 capacity: int = MIXER_CAPACITY, with_theta: bool = True, with_alpha: bool = False):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.capacity = capacity
        self.w = ParamBlock(f"{name}.w", rng.standard_normal(capacity).astype(dtype))
        self.theta = ParamBlock(f"{name}.theta", np.zeros(capacity, dtype=dtype)) if with_theta else None
        self.alpha = ParamBlock(f"{name}.alpha", np.ones(1, dtype=dtype)) if with_alpha else None
        self.max_prefix = 0
        self.attached = 0

    def attach(self, r: int) -> None:
        if r > self.capacity:
            raise BuildError(f"latent size {r} exceeds mixer capacity {self.capacity}")
        self.max_prefix = max(self.max_prefix, r)
        self.attached += 1

    def params(self) -> list[ParamBlock]:
        out = [self.w]
        if self.theta is not None:
            out.append(self.theta)
        if self.alpha is not None:
            out.append(self.alpha)
        return out

    def param_count(self) -> int:
        return sum(p.count for p in self.params())


class QMixBlock(Layer):
    """Five-stage channel recalibration: pool, compress, sinusoidal mix, excite, rescale.

    Own parameters are the compression (r x C) and expansion (C x r) projections,
    2*C*r in total; the mixer's w/theta are shared model-wide and counted at the
    model level.  When the replaced slot changes width (c1 != c2) a 1x1 ConvBlock
    adapter is prepended so the recalibrated map keeps the slot's output width.

    Variants alter stage 3 or add a spatial branch:
      QMixSin     H = sin(z * w)             (no phase term)
      QMixScaled  H = sin(alpha * z * w + theta)
      QMixFull    base QMixBlock gating applied to x + ConvBlock3x3(x)
    """

    def __init__(self, prefix: str, c1: int, c2: int, reduction: int, mixer: SharedMixer,
                 variant: str = "QMixBlock", rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        if variant not in VARIANT_KINDS:
            raise BuildError(f"unknown QMix variant {variant!r}")
        if mixer is None:
            raise BuildError("QMix layers require a shared mixer reference")
        if c2 % reduction != 0:
            raise BuildError(f"channel width {c2} is not divisible by reduction ratio {reduction}")
        if variant == "QMixSin" and mixer.theta is not None:
            raise BuildError("QMixSin requires a mixer without a phase vector")
        if variant == "QMixScaled" and mixer.alpha is None:
            raise BuildError("QMixScaled requires a mixer with a frequency scalar")
        self.kind = variant
        self.variant = variant
        self.c1, self.c2, self.reduction = c1, c2, reduction
        self.r = c2 // reduction
        self.out_channels = c2
        self.mixer = mixer
        mixer.attach(self.r)
        self.adapter = ConvBlock(f"{prefix}.adapter", c1, c2, 1, 1, rng, dtype) if c1 != c2 else None
        self.w_compress = ParamBlock(f"{prefix}.w_compress", he_uniform(rng, (self.r, c2), c2, dtype))
        self.w_expand = ParamBlock(f"{prefix}.w_expand", he_uniform(rng, (c2, self.r), self.r, dtype))
        self.branch = ConvBlock(f"{prefix}.branch", c2, c2, 3, 1, rng, dtype) if variant == "QMixFull" else None

    def params(self):
        out = []
        if self.adapter is not None:
            out += self.adapter.params()
        out += [self.w_compress, self.w_expand]
        if self.branch is not None:
            out += self.branch.params()
        return out

    def prunable_weights(self):
        out = []
        if self.adapter is not None:
            out += self.adapter.prunable_weights()
        out += [self.w_compress, self.w_expand]
        if self.branch is not None:
            out += self.branch.prunable_weights()
        return out

    def forward(self, xs, tape=None, training=False):
        (x,) = xs
        if x.shape[1] != self.c1:
            raise ShapeError(f"QMix block expects {self.c1} input channels, got {x.shape[1]}")
        if self.adapter is not None:
            x = self.adapter.forward([x], tape, training)
        g = ops.global_avg_pool(x, tape=tape)
        z = ops.linear(g, self.w_compress, tape=tape)
        if self.variant == "QMixScaled":
            z = ops.scale(z, self.mixer.alpha, tape=tape)
        wp = ops.slice_prefix(self.mixer.w, self.r, tape=tape)
        tp = None
        if self.mixer.theta is not None:
            tp = ops.slice_prefix(self.mixer.theta, self.r, tape=tape)
        h = ops.sin_affine(z, wp, tp, tape=tape)
        s = ops.sigmoid(ops.linear(h, self.w_expand, tape=tape), tape=tape)
        base = x
        if self.branch is not None:
            base = ops.add(x, self.branch.forward([x], tape, training), tape=tape)
        return ops.channel_gate(base, s, tape=tape)

    def flops(self, in_hw):
        ((h, w),) = in_hw
        f = 0
        if self.adapter is not None:
            fa, (h, w) = self.adapter.flops([(h, w)])
            f += fa
        c, r = self.c2, self.r
        f += c * h * w                # global average pool, 1 per input element
        f += 2 * c * r                # compression projection
        if self.variant == "QMixScaled":
            f += r
        f += (2 if self.variant == "QMixSin" else 3) * r  # mix: multiply (+ phase add) + sine
        f += 2 * c * r                # expansion projection
        f += c                        # sigmoid gate
        if self.branch is not None:
            fb, _ = self.branch.flops([(h, w)])
            f += fb + c * h * w       # spatial branch and residual add
        f += c * h * w                # recalibration multiply
        return f, (h, w)


def build_layer(kind: str, hyper: dict, rng_seed: int, shared: SharedMixer | None = None,
                dtype=DEFAULT_DTYPE, prefix: str | None = None) -> Layer:
    """Construct one zoo layer from hyperparameters with deterministic init."""
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    prefix = prefix or kind
    if kind == "Conv":
        return ConvBlock(prefix, hyper["cin"], hyper["cout"], hyper.get("k", 1),
                         hyper.get("s", 1), rng, dtype)
    if kind == "C2f":
        return C2fBlock(prefix, hyper["c1"], hyper["c2"], hyper.get("n", 1),
                        hyper.get("shortcut", False), rng, dtype)
    if kind == "SPPF":
        return SppfBlock(prefix, hyper["c1"], hyper["c2"], hyper.get("k", 5), rng, dtype)
    if kind == "Upsample":
        return Upsample(hyper["cin"], hyper.get("scale", 2), hyper.get("mode", "nearest"))
    if kind == "Concat":
        return Concat(hyper["cins"])
    if kind == "Detect":
        return DetectHead(prefix, hyper["nc"], hyper["channels"], hyper.get("reg_max", 16), rng, dtype)
    if kind in VARIANT_KINDS:
        if shared is None:
            raise BuildError(f"{kind} requires a shared mixer")
        c = hyper.get("c")
        c1 = hyper.get("c1", c)
        c2 = hyper.get("c2", c)
        return QMixBlock(prefix, c1, c2, hyper.get("reduction", 4), shared, kind, rng, dtype)
    raise BuildError(f"unknown layer kind {kind!r}")


def layer_param_count(layer: Layer) -> int:
    """Exact count of the layer's owned parameters (shared mixer excluded)."""
    return layer.param_count()


def layer_flop_count(layer: Layer, in_h: int, in_w: int) -> int:
    """Per-image FLOPs for the layer at the given input spatial size."""
    if in_h < 1 or in_w < 1:
        raise ShapeError(f"spatial dims must be positive, got {in_h}x{in_w}")
    return layer.flops([(in_h, in_w)])[0]
