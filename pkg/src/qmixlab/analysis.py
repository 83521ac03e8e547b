"""Static accounting: parameter/FLOP reports, complexity-model checks, sparsifier.

All totals are exact integer sums over enumerated parameter blocks; percentages
are recomputed from those integers at render time, never stored and re-derived
from floats.  Reports serialize to JSON (schema_version 1), CSV (RFC-4180
quoting via the stdlib writer), and Markdown.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import QmixError
from .arch import ModelGraph, propagate_hw
from .layers import MIXER_CAPACITY, QMixBlock, SharedMixer
from .tensor import ParamBlock


@dataclass
class ReportRow:
    index: int | None   # None for model-level rows (shared mixers)
    kind: str
    params: int
    flops: int | None = None


@dataclass
class AnalysisReport:
    model: str
    rows: list[ReportRow]
    total_params: int
    total_flops: int | None = None
    img_size: int | None = None
    comparison: dict | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def gflops(self) -> float | None:
        return None if self.total_flops is None else self.total_flops / 1e9

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            row = {"index": r.index, "kind": r.kind, "params": r.params,
                   "share_pct": round(100.0 * r.params / self.total_params, 4) if self.total_params else 0.0}
            if self.total_flops is not None:
                row["flops"] = r.flops
            rows.append(row)
        totals: dict = {"params": self.total_params}
        if self.total_flops is not None:
            totals["flops"] = self.total_flops
            totals["gflops"] = round(self.total_flops / 1e9, 6)
            totals["resolution"] = self.img_size
        out = {"schema_version": 1, "model": self.model, "rows": rows, "totals": totals}
        if self.comparison is not None:
            out["comparison"] = self.comparison
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def _model_label(graph: ModelGraph) -> str:
    preset = graph.provenance.get("preset") or "custom"
    surgery = graph.provenance.get("surgery")
    label = f"yolov8-{preset}"
    if surgery and surgery.get("targets"):
        plan = ",".join(str(t) for t in surgery["targets"])
        label += f"+{surgery['variant']}@{plan} R={surgery['reduction']}"
    return label


def _graph_rows(graph: ModelGraph, flops: list[int] | None = None) -> list[ReportRow]:
    rows = []
    for i, node in enumerate(graph.nodes):
        rows.append(ReportRow(node.index, node.kind, node.impl.param_count(),
                              None if flops is None else flops[i]))
    for mixer in graph.mixers:
        rows.append(ReportRow(None, f"SharedMixer[{mixer.name}]", mixer.param_count(),
                              None if flops is None else 0))
    return rows


def _surgery_notes(graph: ModelGraph) -> list[str]:
    surgery = graph.provenance.get("surgery")
    return list(surgery.get("notes", [])) if surgery else []


def param_report(graph: ModelGraph, baseline: ModelGraph | None = None) -> AnalysisReport:
    """Exact per-layer and total parameter accounting; mixers are one row each."""
    rows = _graph_rows(graph)
    total = sum(r.params for r in rows)
    report = AnalysisReport(model=_model_label(graph), rows=rows, total_params=total,
                            notes=_surgery_notes(graph))
    if baseline is not None:
        base_total = param_report(baseline).total_params
        report.comparison = {
            "baseline_model": _model_label(baseline),
            "baseline_params": base_total,
            "delta_params": total - base_total,
            "reduction_pct": round(100.0 * (base_total - total) / base_total, 4) if base_total else 0.0,
        }
    return report


def flop_report(graph: ModelGraph, img_size: int = 640, baseline: ModelGraph | None = None) -> AnalysisReport:
    """Per-layer FLOPs at the given input resolution (2*MAC convention, batch 1)."""
    hw = propagate_hw(graph, img_size)
    flops = []
    for node in graph.nodes:
        in_hw = [(img_size, img_size) if f < 0 else hw[f] for f in node.frm]
        f, _ = node.impl.flops(in_hw)
        flops.append(f)
    rows = _graph_rows(graph, flops)
    total_p = sum(r.params for r in rows)
    total_f = sum(r.flops or 0 for r in rows)
    report = AnalysisReport(model=_model_label(graph), rows=rows, total_params=total_p,
                            total_flops=total_f, img_size=img_size, notes=_surgery_notes(graph))
    if baseline is not None:
        base = flop_report(baseline, img_size)
        report.comparison = {
            "baseline_model": base.model,
            "baseline_flops": base.total_flops,
            "baseline_gflops": round(base.total_flops / 1e9, 6),
            "delta_flops": total_f - base.total_flops,
            "reduction_pct": round(100.0 * (base.total_flops - total_f) / base.total_flops, 4),
        }
    return report


# ---------------------------------------------------------------------------
# complexity model


@dataclass
class ComplexityCheck:
    c: int
    reduction: int
    predicted_baseline: int       # bare 3x3 conv C->C, 9*C^2
    predicted_qmix: int           # 2*C^2/R + 2*C/R (projections + mixer prefix)
    enumerated_qmix: int
    enumerated_own: int           # projections only
    ratio: float                  # predicted_baseline / enumerated_own
    dominant_gap: float           # (2C/R) / (2C^2/R) = 1/C

    def to_dict(self) -> dict:
        return {
            "C": self.c, "R": self.reduction,
            "predicted_baseline": self.predicted_baseline,
            "predicted_qmix": self.predicted_qmix,
            "enumerated_qmix": self.enumerated_qmix,
            "enumerated_own": self.enumerated_own,
            "ratio_baseline_over_own": self.ratio,
            "dominant_term_gap": self.dominant_gap,
        }


def verify_complexity_model(c_list: list[int], reduction: int) -> list[ComplexityCheck]:
    """Enumerate real blocks and compare against the closed-form counts.

    The enumerated count is the block's own projections plus the 2r mixer
    prefix it actually reads; the efficiency ratio compares a bare 3x3 conv
    (9*C^2 weights, no norm) against the block's own projections.
    """
    out = []
    for c in c_list:
        if c % reduction != 0:
            raise QmixError(f"C={c} is not divisible by R={reduction}")
        r = c // reduction
        rng = np.random.default_rng(0)
        mixer = SharedMixer("check", rng, capacity=MIXER_CAPACITY)
        block = QMixBlock("check", c, c, reduction, mixer, rng=rng)
        own = block.param_count()
        enumerated = own + 2 * r
        predicted = 2 * c * c // reduction + 2 * c // reduction
        baseline = 9 * c * c
        out.append(ComplexityCheck(
            c=c, reduction=reduction,
            predicted_baseline=baseline,
            predicted_qmix=predicted,
            enumerated_qmix=enumerated,
            enumerated_own=own,
            ratio=baseline / own,
            dominant_gap=1.0 / c,
        ))
    return out


# ---------------------------------------------------------------------------
# unstructured sparsifier


def sparsify_unstructured(graph: ModelGraph, fraction: float) -> tuple[ModelGraph, dict]:
    """Zero the lowest-magnitude fraction of all conv/linear weights, globally.

    The graph's stored parameter count is unchanged by construction; the report
    records how many weights were zeroed out of the prunable population.
    """
    if not 0.0 <= fraction < 1.0:
        raise QmixError(f"sparsity fraction must be in [0, 1), got {fraction}")
    out = graph.clone()
    blocks: list[ParamBlock] = []
    for node in out.nodes:
        blocks += node.impl.prunable_weights()
    population = sum(b.count for b in blocks)
    k = int(round(fraction * population))
    if k > 0:
        mags = np.concatenate([np.abs(b.data).reshape(-1) for b in blocks])
        order = np.argpartition(mags, k - 1)[:k]
        mask = np.zeros(population, dtype=bool)
        mask[order] = True
        off = 0
        for b in blocks:
            m = mask[off : off + b.count].reshape(b.shape)
            b.data[m] = 0.0
            off += b.count
    nonzero = population - k
    report = {
        "schema_version": 1,
        "fraction": fraction,
        "prunable_population": population,
        "zeroed": k,
        "nonzero": nonzero,
        "nonzero_fraction": nonzero / population if population else 1.0,
        "stored_params_before": graph.param_total(),
        "stored_params_after": out.param_total(),
    }
    return out, report


# ---------------------------------------------------------------------------
# comparison tables and rendering


@dataclass
class ComparisonTable:
    """Rows of model totals, rendered with columns Model/Params/Reduction/GFLOPs."""

    rows: list[dict]

    def to_dict(self) -> dict:
        return {"schema_version": 1, "rows": self.rows}


def comparison_row(model: str, params: int, baseline_params: int | None, gflops: float | None) -> dict:
    red = None
    if baseline_params:
        red = round(100.0 * (baseline_params - params) / baseline_params, 4)
    return {"model": model, "params": params, "params_m": round(params / 1e6, 2),
            "reduction_pct": red, "gflops": None if gflops is None else round(gflops, 4)}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def render_json(obj) -> str:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(payload, indent=2) + "\n"


def render_csv(obj) -> str:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if "rows" in payload and payload["rows"] and "model" in payload["rows"][0]:
        writer.writerow(["model", "params", "reduction_pct", "gflops"])
        for r in payload["rows"]:
            writer.writerow([r["model"], r["params"], _fmt(r.get("reduction_pct")), _fmt(r.get("gflops"))])
    elif "rows" in payload:
        has_flops = any("flops" in r for r in payload["rows"])
        header = ["index", "kind", "params"] + (["flops"] if has_flops else []) + ["share_pct"]
        writer.writerow(header)
        for r in payload["rows"]:
            row = [_fmt(r["index"]), r["kind"], r["params"]]
            if has_flops:
                row.append(_fmt(r.get("flops")))
            row.append(_fmt(r.get("share_pct")))
            writer.writerow(row)
        totals = payload.get("totals", {})
        trow = ["TOTAL", "", totals.get("params", "")]
        if has_flops:
            trow.append(totals.get("flops", ""))
        trow.append("")
        writer.writerow(trow)
    else:
        writer.writerow(sorted(payload))
        writer.writerow([_fmt(payload[k]) for k in sorted(payload)])
    return buf.getvalue()


def render_markdown(obj) -> str:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    lines = []
    if "rows" in payload and payload["rows"] and "model" in payload["rows"][0]:
        lines.append("| Model | Params | Reduction | GFLOPs |")
        lines.append("| --- | --- | --- | --- |")
        for r in payload["rows"]:
            red = "-" if r.get("reduction_pct") is None else f"{r['reduction_pct']:.1f}%"
            gf = "-" if r.get("gflops") is None else f"{r['gflops']:.1f}"
            lines.append(f"| {r['model']} | {r['params_m']:.2f}M | {red} | {gf} |")
    elif "rows" in payload:
        has_flops = any("flops" in r for r in payload["rows"])
        if payload.get("model"):
            lines.append(f"### {payload['model']}")
            lines.append("")
        head = "| Index | Kind | Params |" + (" FLOPs |" if has_flops else "") + " Share % |"
        sep = "| --- | --- | --- |" + (" --- |" if has_flops else "") + " --- |"
        lines.append(head)
        lines.append(sep)
        for r in payload["rows"]:
            row = f"| {_fmt(r['index'])} | {r['kind']} | {r['params']} |"
            if has_flops:
                row += f" {_fmt(r.get('flops'))} |"
            row += f" {_fmt(r.get('share_pct'))} |"
            lines.append(row)
        totals = payload.get("totals", {})
        lines.append("")
        lines.append(f"Total params: {totals.get('params')}")
        if "gflops" in totals:
            lines.append(f"GFLOPs @ {totals.get('resolution')}: {totals['gflops']}")
        comp = payload.get("comparison")
        if comp:
            for key in sorted(comp):
                lines.append(f"- {key}: {_fmt(comp[key])}")
    else:
        for key in sorted(payload):
            lines.append(f"- {key}: {_fmt(payload[key])}")
    return "\n".join(lines) + "\n"


RENDERERS = {"json": render_json, "csv": render_csv, "md": render_markdown, "markdown": render_markdown}


def emit_report(obj, fmt: str, path) -> None:
    """Render and write a report; the file appears only after a full render."""
    if fmt not in RENDERERS:
        raise QmixError(f"unknown report format {fmt!r}; use json, csv, or md")
    text = RENDERERS[fmt](obj)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
