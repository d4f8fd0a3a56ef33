"""Capture, serialise and render the deductive outputs of a trained translator.

For every attention stage (SLM, TLM, XLM) and head a :class:`DeductiveRecord`
holds the attention weights ``E_LM`` plus, for PLGA models, the metric tensor
``A_LM``, the energy-curvature tensor ``G_LM`` and the dataset-level
parameters ``P``, ``a`` and ``b_a``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import model as M
from . import ndgrad as nd
from .attention import STAGES, DeductiveRecord
from .config import ModelConfig
from .decoding import greedy_decode
from .exceptions import ContractError, DataError, ShapeError
from .textpipe import START, Vocabulary

DEFAULT_BINS = 80
GRAY = ((255, 255, 255), (0, 0, 0))


# ---------------------------------------------------------------------------
# capture
# ---------------------------------------------------------------------------

def _stage_labels(stage: str, src_tokens: list[str], tgt_tokens: list[str]) -> tuple[list[str], list[str]]:
    if stage == "SLM":
        return src_tokens, src_tokens
    if stage == "TLM":
        return tgt_tokens, tgt_tokens
    return tgt_tokens, src_tokens


def capture(params, cfg: ModelConfig, vocab_src: Vocabulary, vocab_tgt: Vocabulary,
            src_ids: Sequence[int], tgt_ids: Sequence[int] | None = None,
            layer: int = -1, max_extra: int = 50) -> list[DeductiveRecord]:
    """Inference-mode records for one sentence pair, ordered by stage then head.

    Without ``tgt_ids`` the target side is the model's own greedy translation.
    Decoder stages accumulate density over the prefix, so their ``A_LM`` and
    ``G_LM`` are taken at the last target position, where the whole prefix is
    visible.
    """
    src_ids = [int(i) for i in src_ids]
    if not src_ids:
        raise DataError("capture needs a non-empty source sentence")
    if tgt_ids is None:
        tgt_ids = greedy_decode(params, cfg, src_ids, max_extra)
    tgt_in = [START] + [int(i) for i in tgt_ids]
    layer = range(cfg.num_layers)[layer]
    with nd.no_grad():
        _, traces = M.forward(params, cfg, np.array([src_ids]), np.array([tgt_in]))
    src_tok = vocab_src.tokens(src_ids)
    tgt_tok = vocab_tgt.tokens(tgt_in)
    prefix_of = {"SLM": f"enc{layer}.slm", "TLM": f"dec{layer}.tlm", "XLM": f"dec{layer}.xlm"}

    records = []
    for stage in STAGES:
        trace = traces[stage][layer]
        rows, cols = _stage_labels(stage, src_tok, tgt_tok)
        prefix = prefix_of[stage]
        for head in range(cfg.num_heads):
            rec = DeductiveRecord(stage=stage, head=head, layer=layer,
                                  E_LM=np.array(trace["E_LM"][0, head]),
                                  row_tokens=list(rows), col_tokens=list(cols))
            if cfg.attention == "plga":
                rec.A_LM = np.array(trace["A_LM"][0, head, -1])
                rec.G_LM = np.array(trace["G_LM"][0, head, -1])
                rec.P = params[f"{prefix}.P"].data[head].copy()
                rec.a = params[f"{prefix}.a"].data[head].copy()
                rec.b_a = params[f"{prefix}.b_a"].data[head].copy()
            records.append(rec)
    return records


def check_record(rec: DeductiveRecord, eps: float = 1e-9, tol: float = 1e-6) -> None:
    """Re-assert the attention invariants before anything leaves the process."""
    sums = rec.E_LM.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= tol):
        raise ContractError(f"{rec.stage} head {rec.head}: E_LM rows do not sum to 1 (worst {sums.min()!r})")
    if rec.A_LM is not None and not np.all(rec.A_LM >= eps):
        raise ContractError(f"{rec.stage} head {rec.head}: A_LM has entries below {eps}")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

@dataclass
class TensorTable:
    """One exported 2-D tensor with its identifying metadata."""

    stage: str
    head: int
    tensor: str
    values: np.ndarray
    scope: str = "instance"
    layer: int = 0
    row_tokens: list[str] | None = None
    col_tokens: list[str] | None = None


def _as_matrix(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return values[None, :]
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {values.shape}")
    return values


def record_tables(rec: DeductiveRecord) -> list[TensorTable]:
    out = []
    for name, values in rec.tensors().items():
        labelled = name == "E_LM"
        out.append(TensorTable(rec.stage, rec.head, name, _as_matrix(values), rec.scope(name), rec.layer,
                               rec.row_tokens if labelled else None, rec.col_tokens if labelled else None))
    return out


def export_csv(table: TensorTable, path: str | Path) -> None:
    """Header row of ``key=value`` cells, then one line per tensor row.

    Values use the shortest repr that parses back to the same double.
    """
    m = _as_matrix(table.values)
    header = [f"stage={table.stage}", f"head={table.head}", f"layer={table.layer}",
              f"tensor={table.tensor}", f"shape={m.shape[0]}x{m.shape[1]}", f"scope={table.scope}"]
    if table.row_tokens is not None:
        header.append("rows=" + json.dumps(table.row_tokens, ensure_ascii=False))
    if table.col_tokens is not None:
        header.append("cols=" + json.dumps(table.col_tokens, ensure_ascii=False))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def import_csv(path: str | Path) -> TensorTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty tensor file")
    meta = dict(cell.split("=", 1) for cell in rows[0])
    try:
        n, m = (int(x) for x in meta["shape"].split("x"))
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(n, m)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed tensor file ({exc})") from None
    return TensorTable(meta["stage"], int(meta["head"]), meta["tensor"], values,
                       meta.get("scope", "instance"), int(meta.get("layer", 0)),
                       json.loads(meta["rows"]) if "rows" in meta else None,
                       json.loads(meta["cols"]) if "cols" in meta else None)


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

@dataclass
class HistogramSpec:
    counts: list[int]
    edges: list[float]
    lo: float
    hi: float
    bins: int = DEFAULT_BINS
    zero_bin: int | None = None  # bin holding 0.0, None when 0 is out of range

    def to_dict(self) -> dict:
        return asdict(self)


def histogram(values, bins: int = DEFAULT_BINS) -> HistogramSpec:
    """Equal-width histogram over ``[min, max]`` of the finite values."""
    x = np.asarray(values, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise DataError("histogram needs at least one finite value")
    if bins < 1:
        raise DataError(f"bin count must be positive, got {bins}")
    lo, hi = float(x.min()), float(x.max())
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi) if hi > lo else None)
    zero_bin = None
    if edges[0] <= 0.0 <= edges[-1]:
        zero_bin = min(int(np.searchsorted(edges, 0.0, side="right")) - 1, bins - 1)
        zero_bin = max(zero_bin, 0)
    return HistogramSpec([int(c) for c in counts], [float(e) for e in edges], lo, hi, bins, zero_bin)


# ---------------------------------------------------------------------------
# SVG heatmaps
# ---------------------------------------------------------------------------

def _color(t: float, cmap) -> str:
    lo, hi = cmap
    rgb = [round(a + (b - a) * t) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap_svg(values, path: str | Path | None = None, row_labels: Sequence[str] | None = None,
                       col_labels: Sequence[str] | None = None, cell: int = 24,
                       cmap=GRAY, title: str | None = None) -> str:
    """Standalone SVG with one ``<rect>`` per cell; colour is linear in value over [min, max].

    Without labels or a title the cells fill the whole canvas.
    """
    m = _as_matrix(values)
    n_rows, n_cols = m.shape
    finite = m[np.isfinite(m)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 0.0
    span = hi - lo
    left = 8 * max((len(s) for s in row_labels), default=0) + 8 if row_labels else 0
    top = (8 * max((len(s) for s in col_labels), default=0) + 8 if col_labels else 0) + (20 if title else 0)
    width, height = left + n_cols * cell, top + n_rows * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if title:
        parts.append(f'<text x="2" y="14" font-family="monospace" font-size="12">{escape(title)}</text>')
    for i in range(n_rows):
        for j in range(n_cols):
            v = m[i, j]
            t = 0.0 if not np.isfinite(v) or span == 0 else min(max((v - lo) / span, 0.0), 1.0)
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_color(t, cmap)}"><title>{float(v)!r}</title></rect>')
    if row_labels:
        for i, label in enumerate(row_labels):
            parts.append(f'<text x="{left - 4}" y="{top + i * cell + cell * 0.65:g}" text-anchor="end" '
                         f'font-family="monospace" font-size="11">{escape(label)}</text>')
    if col_labels:
        for j, label in enumerate(col_labels):
            x, y = left + j * cell + cell * 0.65, top - 4
            parts.append(f'<text x="{x:g}" y="{y}" transform="rotate(-90 {x:g} {y})" '
                         f'font-family="monospace" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(svg, encoding="utf-8")
    return svg


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

def bundle_stem(table: TensorTable) -> str:
    return f"{table.stage}_{table.tensor}_{table.head}"


def export_bundle(records: Sequence[DeductiveRecord], outdir: str | Path, bins: int = DEFAULT_BINS) -> list[Path]:
    """Write ``{stage}_{tensor}_{head}.csv``/``.svg`` per tensor plus ``histograms.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written, hists = [], {}
    for rec in records:
        check_record(rec)
        for table in record_tables(rec):
            stem = bundle_stem(table)
            export_csv(table, outdir / f"{stem}.csv")
            render_heatmap_svg(table.values, outdir / f"{stem}.svg", table.row_tokens, table.col_tokens,
                               title=f"{table.stage} {table.tensor} head {table.head} ({table.scope})")
            hists[stem] = {"scope": table.scope, **histogram(table.values, bins).to_dict()}
            written += [outdir / f"{stem}.csv", outdir / f"{stem}.svg"]
    hist_path = outdir / "histograms.json"
    hist_path.write_text(json.dumps(hists, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(hist_path)
    return written
