"""Cosine scoring, equal error rate, and comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TABLE_COLUMNS = ("Adaptation", "EER(%)", "Para. BP(%)", "Para. Add(%)", "Black-box training allow")
YES, NO = "✓", "✗"


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR for "accept if score >= t" over every distinct threshold,
    bracketed by -inf (accept all) and +inf (reject all)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    tar = np.sort(s[y == 1])
    non = np.sort(s[y == 0])
    thr = np.concatenate([[-np.inf], np.unique(s), [np.inf]])
    far = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    return thr, far, frr


def compute_eer(scores: Sequence[float], labels: Sequence[int]) -> EERResult:
    """EER in percent, linearly interpolated between the two operating points
    that bracket the FAR = FRR crossing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_t, n_n = int((y == 1).sum()), int((y == 0).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("EER needs both target and nontarget trials")
    thr, far, frr = operating_points(s, y)
    d = far - frr  # non-increasing in the threshold
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return EERResult(100.0 * far[i], float(thr[i]), n_t, n_n)
    d1, d2 = d[i - 1], d[i]
    a = d1 / (d1 - d2)
    eer = far[i - 1] + a * (far[i] - far[i - 1])
    t1, t2 = thr[i - 1], thr[i]
    if math.isinf(t1):
        t = t2
    elif math.isinf(t2):
        t = t1
    else:
        t = t1 + a * (t2 - t1)
    return EERResult(100.0 * eer, float(t), n_t, n_n)


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodRecord:
    kind: str
    label: str
    eer: float
    bp_pct: float
    add_pct: float
    blackbox_compatible: bool


def _row(r: MethodRecord) -> list[str]:
    return [r.label, f"{r.eer:.2f}", f"{r.bp_pct:.3f}", f"{r.add_pct:.3f}", YES if r.blackbox_compatible else NO]


def sort_records(records: Sequence[MethodRecord]) -> list[MethodRecord]:
    from .blackbox import METHODS

    return sorted(records, key=lambda r: (METHODS.index(r.kind), r.label))


def report_table(records: Sequence[MethodRecord]) -> tuple[str, str]:
    """Markdown and CSV renderings with the fixed column order."""
    rows = [_row(r) for r in sort_records(records)]
    md = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|"]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(rows)
    return "\n".join(md) + "\n", buf.getvalue()


def parse_table_csv(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


def sweep_table(axis: str, values: Sequence, rows: dict[str, Sequence[float]]) -> tuple[str, str]:
    """One row per model configuration, one EER column per swept value."""
    header = ["Model"] + [_axis_label(axis, v) for v in values]
    body = [[name] + [f"{e:.2f}" for e in eers] for name, eers in rows.items()]
    md = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    md += ["| " + " | ".join(r) + " |" for r in body]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return "\n".join(md) + "\n", buf.getvalue()


def _axis_label(axis: str, v) -> str:
    if axis == "reprog.seconds":
        return f"{float(v):g}s"
    return f"{v:g}" if isinstance(v, float) else str(v)
