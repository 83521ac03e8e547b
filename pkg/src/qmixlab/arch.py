"""Architecture config parsing, scaling, model building, and block surgery.

Config grammar (line oriented, UTF-8, ``#`` starts a comment):

  nc: <int>                      optional class count, default 10
  scales:                        section of preset rows
    <name>: [depth, width, max_channels]
  backbone: / head:              sections of layer rows
    - [FROM, REPEATS, KIND, [ARGS...]]

``FROM`` is ``-1`` (previous row) or an absolute earlier row index; multi-input
kinds take a bracket list of those.  ``ARGS`` values are ints, floats,
``True``/``False``, or bare words (``nearest``, ``nc``); the ``nc`` token
resolves to the class count at build time.  Indentation is not significant.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import BuildError, ParseError, ShapeError, SurgeryError
from .layers import (
    C2fBlock,
    Concat,
    ConvBlock,
    DetectHead,
    Layer,
    MIXER_CAPACITY,
    QMixBlock,
    SharedMixer,
    SppfBlock,
    Upsample,
    VARIANT_KINDS,
)
from .tensor import DEFAULT_DTYPE, ParamBlock, Tape, Tensor

KNOWN_KINDS = ("Conv", "C2f", "SPPF", "Upsample", "Concat", "Detect") + VARIANT_KINDS
CHANNEL_ARG_KINDS = ("Conv", "C2f", "SPPF")

PLAN_PRESETS = {
    "final": (6, 8),
    "v0": (6, 8, 12, 18, 21),
}


@dataclass(frozen=True)
class Row:
    frm: tuple[int, ...]
    repeats: int
    kind: str
    args: tuple
    line: int = 0

    def single_from(self) -> int:
        return self.frm[0]


@dataclass
class ArchSpec:
    nc: int
    scales: dict[str, tuple[float, float, int]]
    rows: list[Row]
    head_start: int | None = None  # row index where the head: section begins
    preset: str | None = None      # set once scaling has been resolved

    def __eq__(self, other):
        if not isinstance(other, ArchSpec):
            return NotImplemented
        return (self.nc == other.nc and self.scales == other.scales
                and [(r.frm, r.repeats, r.kind, r.args) for r in self.rows]
                == [(r.frm, r.repeats, r.kind, r.args) for r in other.rows]
                and self.head_start == other.head_start
                and self.preset == other.preset)


@dataclass(frozen=True)
class SurgeryPlan:
    targets: tuple[int, ...]
    reduction: int = 4
    variant: str = "QMixBlock"


@dataclass
class LayerNode:
    index: int
    kind: str
    frm: tuple[int, ...]
    args: tuple
    c_in: int
    c_out: int | None
    section: str
    impl: Layer


@dataclass
class ModelGraph:
    nodes: list[LayerNode]
    nc: int
    seed: int
    dtype: object
    mixers: list[SharedMixer] = field(default_factory=list)
    detect_feeds: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def parameters(self, trainable_only: bool = False) -> list[ParamBlock]:
        out: list[ParamBlock] = []
        for node in self.nodes:
            out += node.impl.params()
        for mixer in self.mixers:
            out += mixer.params()
        if trainable_only:
            out = [p for p in out if p.trainable]
        return out

    def param_total(self) -> int:
        return sum(p.count for p in self.parameters())

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# parsing


def _strip(line: str) -> str:
    if "#" in line:
        line = line[: line.index("#")]
    return line.strip()


def _parse_value(tok: str, line: int):
    low = tok.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    if tok and all(ch.isalnum() or ch == "_" for ch in tok):
        return tok
    raise ParseError(line, f"cannot parse value {tok!r}")


def _parse_bracketed(text: str, line: int):
    """Parse one [...] expression with nesting into python values."""
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ParseError(line, f"expected a bracketed list, got {text!r}")
    pos = 0

    def parse_list(i: int):
        assert text[i] == "["
        i += 1
        items = []
        buf = ""
        while i < len(text):
            ch = text[i]
            if ch == "[":
                sub, i = parse_list(i)
                items.append(sub)
            elif ch == "]":
                if buf.strip():
                    items.append(_parse_value(buf.strip(), line))
                return items, i + 1
            elif ch == ",":
                if buf.strip():
                    items.append(_parse_value(buf.strip(), line))
                buf = ""
                i += 1
            else:
                buf += ch
                i += 1
        raise ParseError(line, "unbalanced brackets")

    items, end = parse_list(pos)
    if text[end:].strip():
        raise ParseError(line, f"trailing characters after list: {text[end:]!r}")
    return items


def parse_arch(text: str) -> ArchSpec:
    """Parse architecture text; the first malformed line raises ParseError."""
    nc = 10
    scales: dict[str, tuple[float, float, int]] = {}
    rows: list[Row] = []
    head_start: int | None = None
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line == "scales:":
            section = "scales"
            continue
        if line == "backbone:":
            section = "backbone"
            continue
        if line == "head:":
            section = "head"
            continue
        if line.startswith("- "):
            if section not in ("backbone", "head"):
                raise ParseError(lineno, "layer row outside a backbone:/head: section")
            if section == "head" and head_start is None:
                head_start = len(rows)
            items = _parse_bracketed(line[2:], lineno)
            if len(items) != 4:
                raise ParseError(lineno, f"row must be [from, repeats, kind, [args]], got {len(items)} fields")
            frm_raw, repeats, kind, args = items
            frm = tuple(frm_raw) if isinstance(frm_raw, list) else (frm_raw,)
            for f in frm:
                if not isinstance(f, int):
                    raise ParseError(lineno, f"from entries must be integers, got {f!r}")
                if f == -1:
                    continue
                if f < 0 or f >= len(rows):
                    raise ParseError(lineno, f"row references layer {f}, which is not an earlier row")
            if not isinstance(repeats, int) or repeats < 1:
                raise ParseError(lineno, f"repeats must be a positive integer, got {repeats!r}")
            if not isinstance(kind, str) or kind not in KNOWN_KINDS:
                raise ParseError(lineno, f"unknown module kind {kind!r}")
            if not isinstance(args, list):
                raise ParseError(lineno, "args must be a bracketed list")
            rows.append(Row(frm, repeats, kind, tuple(args), lineno))
            continue
        if ":" in line:
            key, _, val = line.partition(":")
            key, val = key.strip(), val.strip()
            if section == "scales":
                vals = _parse_bracketed(val, lineno)
                if len(vals) != 3:
                    raise ParseError(lineno, f"scale preset needs [depth, width, max_channels], got {vals!r}")
                scales[key] = (float(vals[0]), float(vals[1]), int(vals[2]))
            elif key == "nc":
                parsed = _parse_value(val, lineno)
                if not isinstance(parsed, int) or parsed < 1:
                    raise ParseError(lineno, f"nc must be a positive integer, got {val!r}")
                nc = parsed
            else:
                raise ParseError(lineno, f"unexpected key {key!r}")
            continue
        raise ParseError(lineno, f"cannot parse line {raw!r}")
    if not rows:
        raise ParseError(len(text.splitlines()) or 1, "no layer rows found")
    return ArchSpec(nc=nc, scales=scales, rows=rows, head_start=head_start)


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    if v is None:
        return "None"
    return str(v)


def serialize_arch(spec: ArchSpec) -> str:
    """Canonical text form; parse(serialize(spec)) == spec."""
    lines = [f"nc: {spec.nc}", ""]
    if spec.scales:
        lines.append("scales:")
        for name, (d, w, mc) in spec.scales.items():
            lines.append(f"  {name}: [{d}, {w}, {mc}]")
        lines.append("")
    backbone, head = [], []
    for i, row in enumerate(spec.rows):
        target = head if (spec.head_start is not None and i >= spec.head_start) else backbone
        frm = row.single_from() if len(row.frm) == 1 else list(row.frm)
        args = ", ".join(_render_value(a) for a in row.args)
        target.append(f"  - [{frm}, {row.repeats}, {row.kind}, [{args}]]")
    lines.append("backbone:")
    lines += backbone or []
    if head:
        lines.append("")
        lines.append("head:")
        lines += head
    lines.append("")
    return "\n".join(lines)


def load_bundled_arch_text() -> str:
    return resources.files("qmixlab.data").joinpath("yolov8.arch").read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# scaling and building


def _round_channels(c: int, width: float, max_channels: int) -> int:
    scaled = min(c, max_channels) * width
    return int(math.ceil(scaled / 8.0) * 8)


def resolve_scaling(spec: ArchSpec, preset: str) -> ArchSpec:
    """Apply a preset's depth/width multiples; channels round up to multiples of 8."""
    if preset not in spec.scales:
        raise BuildError(f"unknown preset {preset!r}; available: {sorted(spec.scales)}")
    depth, width, max_channels = spec.scales[preset]
    rows = []
    for row in spec.rows:
        repeats = max(round(row.repeats * depth), 1)
        args = list(row.args)
        if row.kind in CHANNEL_ARG_KINDS and args and isinstance(args[0], int):
            args[0] = _round_channels(args[0], width, max_channels)
        rows.append(replace(row, repeats=repeats, args=tuple(args)))
    return ArchSpec(nc=spec.nc, scales=dict(spec.scales), rows=rows,
                    head_start=spec.head_start, preset=preset)


def _node_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x4C41, index)))


def build_model(spec: ArchSpec, nc: int | None = None, seed: int = 0, dtype=DEFAULT_DTYPE) -> ModelGraph:
    """Build an executable graph from a resolved spec, propagating channel widths."""
    if spec.scales and spec.preset is None:
        raise BuildError("spec declares scale presets; call resolve_scaling before build_model")
    nc = spec.nc if nc is None else nc
    nodes: list[LayerNode] = []
    channels: list[int] = []
    detect_feeds: tuple[int, ...] = ()
    head_start = spec.head_start
    for i, row in enumerate(spec.rows):
        frm = tuple(i - 1 if f == -1 else f for f in row.frm)
        for f in frm:
            if f < -1 or f >= i:
                raise BuildError(f"row {i} references layer {f}, which is not built yet")
        in_ch = [3 if f < 0 else channels[f] for f in frm]
        rng = _node_seed(seed, i)
        section = "head" if (head_start is not None and i >= head_start) else "backbone"
        args = tuple(nc if a == "nc" else a for a in row.args)
        kind = row.kind
        prefix = f"L{i}.{kind}"
        if kind == "Conv":
            c2, k, s = int(args[0]), int(args[1]) if len(args) > 1 else 1, int(args[2]) if len(args) > 2 else 1
            impl: Layer = ConvBlock(prefix, in_ch[0], c2, k, s, rng, dtype)
        elif kind == "C2f":
            shortcut = bool(args[1]) if len(args) > 1 else False
            impl = C2fBlock(prefix, in_ch[0], int(args[0]), row.repeats, shortcut, rng, dtype)
        elif kind == "SPPF":
            impl = SppfBlock(prefix, in_ch[0], int(args[0]), int(args[1]) if len(args) > 1 else 5, rng, dtype)
        elif kind == "Upsample":
            impl = Upsample(in_ch[0], int(args[0]) if args else 2, str(args[1]) if len(args) > 1 else "nearest")
        elif kind == "Concat":
            impl = Concat(in_ch)
        elif kind == "Detect":
            if len(frm) < 1:
                raise BuildError("Detect row needs input rows")
            impl = DetectHead(prefix, int(args[0]) if args else nc, in_ch, rng=rng, dtype=dtype)
            detect_feeds = frm
        else:
            raise BuildError(f"kind {kind!r} cannot appear in a config row; apply it via surgery")
        if kind != "C2f" and row.repeats != 1:
            raise BuildError(f"row {i}: repeats > 1 is only supported for C2f rows")
        c_out = impl.out_channels if impl.out_channels is not None else 0
        nodes.append(LayerNode(i, kind, frm, args, in_ch[0] if len(in_ch) == 1 else sum(in_ch),
                               impl.out_channels, section, impl))
        channels.append(c_out)
    graph = ModelGraph(nodes=nodes, nc=nc, seed=seed, dtype=np.dtype(dtype),
                       detect_feeds=detect_feeds,
                       provenance={"preset": spec.preset, "nc": nc, "seed": seed, "surgery": None})
    return graph


def load_arch(text: str) -> ArchSpec:
    """Parse config text (alias of parse_arch, kept for symmetry with load_bundled)."""
    return parse_arch(text)


def load_bundled() -> ArchSpec:
    """Parse the packaged reference architecture (23 rows, presets n and s)."""
    return parse_arch(load_bundled_arch_text())


# ---------------------------------------------------------------------------
# surgery


def apply_surgery(graph: ModelGraph, plan: SurgeryPlan) -> ModelGraph:
    """Replace C2f nodes at the plan's indices with QMix recalibration blocks.

    Non-target nodes are value-identical copies, so parameter blocks and
    from-links outside the targets are untouched.  Backbone targets share one
    mixer; each head (neck) target carries its own private mixer, since the
    neck does not participate in the backbone sharing mechanism.  Width-changing
    slots (c1 != c2) receive a 1x1 ConvBlock adapter ahead of the gate so the
    slot's output width is preserved.
    """
    if plan.variant not in VARIANT_KINDS:
        raise SurgeryError(f"unknown variant {plan.variant!r}")
    out = graph.clone()
    targets = tuple(sorted(set(plan.targets)))
    if not targets:
        out.provenance = dict(out.provenance, surgery={"targets": [], "reduction": plan.reduction,
                                                       "variant": plan.variant, "mixers": [], "notes": []})
        return out
    for t in targets:
        if t < 0 or t >= len(out.nodes):
            raise SurgeryError(f"target index {t} out of range for a {len(out.nodes)}-node graph")
        node = out.nodes[t]
        if node.kind != "C2f":
            raise SurgeryError(f"target layer {t} holds {node.kind}, not C2f")
        if node.impl.c2 % plan.reduction != 0:
            raise SurgeryError(f"layer {t}: width {node.impl.c2} not divisible by reduction {plan.reduction}")
        if node.impl.c2 // plan.reduction > MIXER_CAPACITY:
            raise SurgeryError(f"layer {t}: latent size {node.impl.c2 // plan.reduction} exceeds shared capacity {MIXER_CAPACITY}")

    with_theta = plan.variant != "QMixSin"
    with_alpha = plan.variant == "QMixScaled"
    notes = []
    mixers: list[SharedMixer] = []
    backbone_targets = [t for t in targets if out.nodes[t].section == "backbone"]
    head_targets = [t for t in targets if out.nodes[t].section == "head"]
    mixer_of: dict[int, SharedMixer] = {}
    if backbone_targets:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(graph.seed, 0x4D58, 0)))
        shared = SharedMixer("mixer0", rng, graph.dtype, with_theta=with_theta, with_alpha=with_alpha)
        mixers.append(shared)
        for t in backbone_targets:
            mixer_of[t] = shared
    for j, t in enumerate(head_targets, 1):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(graph.seed, 0x4D58, j)))
        private = SharedMixer(f"mixer{j}", rng, graph.dtype, with_theta=with_theta, with_alpha=with_alpha)
        mixers.append(private)
        mixer_of[t] = private
    if head_targets:
        notes.append("neck targets use private mixers; only backbone targets share one mixer")

    for t in targets:
        node = out.nodes[t]
        c1, c2 = node.impl.c1, node.impl.c2
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(graph.seed, 0x514D, t)))
        impl = QMixBlock(f"L{t}.{plan.variant}", c1, c2, plan.reduction, mixer_of[t],
                         plan.variant, rng, graph.dtype)
        if impl.adapter is not None:
            notes.append(f"layer {t}: 1x1 adapter {c1}->{c2} inserted (slot changes width)")
        node.kind = plan.variant
        node.args = (c2, plan.reduction)
        node.impl = impl
    out.mixers = mixers
    out.provenance = dict(out.provenance, surgery={
        "targets": list(targets),
        "reduction": plan.reduction,
        "variant": plan.variant,
        "mixers": [m.name for m in mixers],
        "notes": notes,
    })
    return out


def parse_plan(text: str) -> tuple[int, ...]:
    """Plan spec: a named preset ('final', 'v0') or comma-separated indices."""
    text = text.strip()
    if text in PLAN_PRESETS:
        return PLAN_PRESETS[text]
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise SurgeryError(f"cannot parse plan {text!r}; use 'final', 'v0', or comma-separated indices")


# ---------------------------------------------------------------------------
# execution


def forward_model(graph: ModelGraph, image: Tensor, tape: Tape | None = None,
                  training: bool = False, upto: int | None = None):
    """Run the graph on a (B, 3, H, W) image.

    Returns the Detect head's list of raw per-scale maps (or the final node's
    output for headless graphs).  With ``upto`` set, execution stops after that
    node index and its output is returned.
    """
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"model input must be (B, 3, H, W), got {image.shape}")
    has_detect = any(n.kind == "Detect" for n in graph.nodes)
    if has_detect and upto is None:
        h, w = image.shape[2], image.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")
    if image.dtype != graph.dtype:
        image = Tensor(image.data.astype(graph.dtype))
    outputs: list = []
    last = len(graph.nodes) - 1 if upto is None else upto
    if last < 0 or last >= len(graph.nodes):
        raise ShapeError(f"upto index {last} out of range")
    for node in graph.nodes[: last + 1]:
        ins = [image if f < 0 else outputs[f] for f in node.frm]
        outputs.append(node.impl.forward(ins, tape, training))
    result = outputs[last]
    return result


def propagate_hw(graph: ModelGraph, img_size: int) -> list[tuple[int, int] | None]:
    """Static spatial-size propagation used by the FLOP accounting."""
    if img_size % 32 != 0 and any(n.kind == "Detect" for n in graph.nodes):
        raise ShapeError(f"image size must be divisible by 32, got {img_size}")
    hw: list[tuple[int, int] | None] = []
    for node in graph.nodes:
        in_hw = [(img_size, img_size) if f < 0 else hw[f] for f in node.frm]
        _, out = node.impl.flops(in_hw)
        hw.append(out)
    return hw


def graph_dump(graph: ModelGraph) -> dict:
    """JSON-ready structural dump of a built graph."""
    nodes = []
    for node in graph.nodes:
        nodes.append({
            "index": node.index,
            "kind": node.kind,
            "from": list(node.frm),
            "args_resolved": list(node.args),
            "channels_out": node.c_out,
            "param_count": node.impl.param_count(),
        })
    return {
        "schema_version": 1,
        "nc": graph.nc,
        "seed": graph.seed,
        "provenance": graph.provenance,
        "mixers": [{"name": m.name, "capacity": m.capacity, "max_prefix": m.max_prefix,
                    "attached": m.attached, "param_count": m.param_count()} for m in graph.mixers],
        "nodes": nodes,
    }
