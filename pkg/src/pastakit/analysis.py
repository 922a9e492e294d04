"""Diagnostics: vertical attention heads, adaptation norm maps, parameter budgets."""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .adaptation import AblationMode, AdaptationBank, adaptation_param_count, enabled_slots
from .transformer import LayerTrace, ModelConfig

VERTICAL_THRESHOLD = 0.9
# BitFit tunes, per layer, the q/k/v/output projection biases, the FFN output
# bias and both layer-norm shifts (seven d-sized vectors) plus the m-sized FFN
# intermediate bias.
BITFIT_BIAS_VECTORS = 7


class Target(str, enum.Enum):
    CLS = "CLS"
    SEP = "SEP"
    MIXED = "Mixed"


def special_targets(token_ids: Sequence[int], cls_id: int, sep_id: int) -> dict[int, Target]:
    """Map each special position in a sequence to its kind."""
    out = {}
    for pos, tok in enumerate(token_ids):
        if tok == cls_id:
            out[pos] = Target.CLS
        elif tok == sep_id:
            out[pos] = Target.SEP
    return out


def _as_targets(special_positions: Mapping[int, Target | str] | Iterable[int]) -> dict[int, Target]:
    if isinstance(special_positions, Mapping):
        return {int(p): Target(t) for p, t in special_positions.items()}
    # A bare position set: the first special token is CLS, the rest are SEP.
    ordered = sorted(int(p) for p in special_positions)
    return {p: Target.CLS if i == 0 else Target.SEP for i, p in enumerate(ordered)}


@dataclass(frozen=True)
class HeadVerdict:
    layer: int
    head: int
    fraction_to_special: float
    dominant_target: Target
    is_vertical: bool


@dataclass
class VerticalHeadReport:
    heads: list[HeadVerdict]
    batch_averaged: bool = False
    num_sequences: int = 1

    @property
    def num_vertical(self) -> int:
        return sum(h.is_vertical for h in self.heads)

    def verdict(self, layer: int, head: int) -> HeadVerdict:
        for h in self.heads:
            if h.layer == layer and h.head == head:
                return h
        raise KeyError((layer, head))

    def count_line(self) -> str:
        line = f"{self.num_vertical} vertical of {len(self.heads)} total"
        if self.batch_averaged:
            line += f" (fractions averaged over {self.num_sequences} sequences)"
        return line

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,head,fraction,dominant,is_vertical\n")
        for h in self.heads:
            buf.write(f"{h.layer},{h.head},{h.fraction_to_special:.10f},{h.dominant_target.value},"
                      f"{str(h.is_vertical).lower()}\n")
        return buf.getvalue()


def _dominant(cls_hits: int, sep_hits: int) -> Target:
    if cls_hits > sep_hits:
        return Target.CLS
    if sep_hits > cls_hits:
        return Target.SEP
    return Target.MIXED


def _head_counts(probs: np.ndarray, targets: dict[int, Target]) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-head counts of rows whose argmax is a CLS / SEP position, for one [H, N, N] map."""
    H, N, _ = probs.shape
    kind = np.zeros(N, dtype=np.int8)  # 0 content, 1 CLS, 2 SEP
    for pos, t in targets.items():
        if 0 <= pos < N:
            kind[pos] = 1 if t is Target.CLS else 2
    hit = kind[np.argmax(probs, axis=-1)]  # [H, N]
    return (hit == 1).sum(axis=1), (hit == 2).sum(axis=1), N


def _layer_maps(trace: LayerTrace) -> list[np.ndarray]:
    maps = []
    for p in trace.attention_probs:
        a = np.asarray(p.data)
        if a.ndim == 4 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 3:
            raise ValueError(f"expected single-sequence [H, N, N] attention, got shape {a.shape}")
        maps.append(a)
    return maps


def detect_vertical_heads(trace: LayerTrace, special_positions: Mapping[int, Target | str] | Iterable[int]
                          ) -> VerticalHeadReport:
    """Flag heads where at least 90% of query rows put their largest weight on
    a special token. Row ties go to the lowest key position."""
    targets = _as_targets(special_positions)
    heads = []
    for l, probs in enumerate(_layer_maps(trace)):
        cls_hits, sep_hits, n_rows = _head_counts(probs, targets)
        for h in range(probs.shape[0]):
            frac = float(cls_hits[h] + sep_hits[h]) / n_rows if targets and n_rows else 0.0
            heads.append(HeadVerdict(l, h, frac, _dominant(int(cls_hits[h]), int(sep_hits[h])),
                                     frac >= VERTICAL_THRESHOLD))
    return VerticalHeadReport(heads)


def detect_vertical_heads_batch(traces: Sequence[LayerTrace],
                                special_positions: Sequence[Mapping[int, Target | str] | Iterable[int]]
                                ) -> VerticalHeadReport:
    """Average each head's fraction over sequences, then apply the threshold.

    The dominant target uses argmax hits pooled over all sequences.
    """
    if len(traces) != len(special_positions):
        raise ValueError("need one position set per trace")
    if not traces:
        raise ValueError("no sequences to analyze")
    fractions = None
    cls_total = sep_total = None
    for trace, positions in zip(traces, special_positions):
        targets = _as_targets(positions)
        per_layer = [_head_counts(p, targets) for p in _layer_maps(trace)]
        frac = np.array([(c + s) / n if targets else np.zeros_like(c, dtype=float) for c, s, n in per_layer],
                        dtype=float)
        cls = np.array([c for c, _, _ in per_layer])
        sep = np.array([s for _, s, _ in per_layer])
        if fractions is None:
            fractions, cls_total, sep_total = frac, cls, sep
        else:
            fractions, cls_total, sep_total = fractions + frac, cls_total + cls, sep_total + sep
    fractions = fractions / len(traces)
    heads = []
    for l in range(fractions.shape[0]):
        for h in range(fractions.shape[1]):
            f = float(fractions[l, h])
            heads.append(HeadVerdict(l, h, f, _dominant(int(cls_total[l, h]), int(sep_total[l, h])),
                                     f >= VERTICAL_THRESHOLD))
    return VerticalHeadReport(heads, batch_averaged=True, num_sequences=len(traces))


@dataclass(frozen=True)
class NormMap:
    matrix: np.ndarray  # [L, P]

    def to_csv(self) -> str:
        L, P = self.matrix.shape
        lines = ["layer," + ",".join(f"slot{p}" for p in range(P))]
        for l in range(L):
            lines.append(f"{l}," + ",".join(f"{v:.10f}" for v in self.matrix[l]))
        return "\n".join(lines) + "\n"


def norm_map(bank: AdaptationBank) -> NormMap:
    return NormMap(bank.norms())


def heatmap_svg(matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str], title: str,
                cell: int = 28) -> str:
    """A plain grayscale heatmap; darker means larger."""
    m = np.asarray(matrix, dtype=float)
    rows, cols = m.shape
    left, top = 70, 40
    width, height = left + cols * cell + 10, top + rows * cell + 10
    hi = float(m.max()) if m.size and m.max() > 0 else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="4" y="16" font-size="12">{escape(title)}</text>']
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{left + j * cell + 4}" y="{top - 6}" font-size="9">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        out.append(f'<text x="4" y="{top + i * cell + cell // 2 + 4}" font-size="9">{escape(str(lab))}</text>')
        for j in range(cols):
            shade = int(round(255 * (1.0 - m[i, j] / hi)))
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},{shade})"><title>{m[i, j]:.4f}</title></rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def vertical_heads_svg(report: VerticalHeadReport) -> str:
    L = max(h.layer for h in report.heads) + 1
    H = max(h.head for h in report.heads) + 1
    m = np.zeros((L, H))
    for h in report.heads:
        m[h.layer, h.head] = h.fraction_to_special
    return heatmap_svg(m, [f"layer {l}" for l in range(L)], [f"h{h}" for h in range(H)],
                       "fraction of rows attending mostly to special tokens")


def norm_map_svg(nm: NormMap) -> str:
    L, P = nm.matrix.shape
    return heatmap_svg(nm.matrix, [f"layer {l}" for l in range(L)], [f"slot{p}" for p in range(P)],
                       "adaptation vector norms")


@dataclass(frozen=True)
class ParamBudget:
    method: str
    formula: str
    count: int | None
    parameter_consistency: bool
    note: str = ""

    def fraction_of(self, backbone_total: int) -> float | None:
        return None if self.count is None else self.count / backbone_total


def param_budget(config: ModelConfig, r: int, T: int, P: int, mode: AblationMode = AblationMode.FULL
                 ) -> list[ParamBudget]:
    """Leading-term trainable counts for PASTA and the usual baselines."""
    for name, v in (("r", r), ("T", T), ("P", P)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    L, d, m = config.num_layers, config.hidden_size, config.ffn_size
    mode = AblationMode(mode)
    if mode is AblationMode.FULL:
        pasta = ParamBudget("PASTA", "L*P*d", L * P * d, True)
    else:
        slots = 1 if mode is AblationMode.SHARED else len(enabled_slots(mode, P))
        pasta = ParamBudget(f"PASTA ({mode.value})", f"L*{slots}*d", adaptation_param_count(config, P, mode), True)
    return [
        ParamBudget("Adapter", "2*L*(2*d*r)", 2 * L * (2 * d * r), True, "two adapters per layer, biases omitted"),
        ParamBudget("P-tuning v2", "L*T*d", L * T * d, True),
        ParamBudget("BitFit", f"L*(d*{BITFIT_BIAS_VECTORS}+m)", L * (d * BITFIT_BIAS_VECTORS + m), True,
                    f"{BITFIT_BIAS_VECTORS} d-sized bias vectors per layer"),
        ParamBudget("Diff-Prune", "data-dependent", None, False, "sparsity pattern learned per task"),
        pasta,
    ]


def budget_table(budgets: Sequence[ParamBudget], backbone_total: int | None = None) -> str:
    header = ["method", "formula", "count", "consistent"]
    if backbone_total:
        header.append("fraction")
    rows = [header]
    for b in budgets:
        row = [b.method, b.formula, "-" if b.count is None else f"{b.count:,}",
               "yes" if b.parameter_consistency else "no"]
        if backbone_total:
            row.append("-" if b.count is None else f"{100 * b.count / backbone_total:.4f}%")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
