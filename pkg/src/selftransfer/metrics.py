"""Classification and localization metrics.

Average precision is the non-interpolated form computed over a sweep of
every distinct score taken as a threshold (predicted positive means
``score >= threshold``)::

    AP = (1 / n_pos) * sum_t  (tp_t - tp_{t-1}) * tp_t / n_t

where ``tp_t`` and ``n_t`` count true positives and predicted positives at
threshold ``t``.  With distinct scores this is the mean of precision at the
rank of each positive.  The sum is accumulated in exact rationals and
rounded once, so the value does not depend on accumulation order.

For localization AP a prediction is a true positive only if the sample is
of the positive class *and* the peak of its upsampled positive-class score
map falls inside a ground-truth box grown by the tolerance.  Every other
predicted positive is a false positive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError

POSITIVE = 1
REPORT_FIELDS = ("accuracy", "auc", "ap_pos", "ap_neg", "loc_ap")


@dataclass
class ScoredSample:
    id: str
    true_label: int
    prob_positive: float
    peak_location: tuple | None = None   # (x, y) in image pixels
    boxes: list = field(default_factory=list)


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    ap_pos: float
    ap_neg: float
    loc_ap: float | None
    pr_cls: list
    pr_loc: list | None
    samples: list = field(default_factory=list, repr=False)
    tolerance: int | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


# ---------------------------------------------------------------------------
# score maps

def bilinear_upsample(score_map: np.ndarray, size) -> np.ndarray:
    """Align-corners bilinear resize of a 2-d map to ``size = (H, W)``.

    Output pixel ``i`` samples source coordinate ``i * (h - 1) / (H - 1)``;
    a length-1 axis on either side is replicated.
    """
    m = np.asarray(score_map, dtype=np.float64)
    h, w = m.shape
    oh, ow = size

    def coords(n_in, n_out):
        if n_in == 1 or n_out == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, oh)
    x0, x1, fx = coords(w, ow)
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    # interpolation weights can overshoot by an ulp; keep the hull exact
    return np.clip(out, m.min(), m.max())


def peak_location(upsampled: np.ndarray) -> tuple:
    """(x, y) of the maximum; ties go to the first pixel in row-major order."""
    flat = int(np.argmax(upsampled))
    y, x = divmod(flat, upsampled.shape[1])
    return (x, y)


def peak_hit(peak, boxes, tolerance: float, metric: str = "chebyshev") -> bool:
    """True if ``peak`` lies in any box grown by ``tolerance``.

    ``chebyshev`` grows each side independently; ``euclidean`` accepts
    points within ``tolerance`` of the box.
    """
    if not boxes:
        return False
    x, y = peak
    for x0, y0, x1, y1 in boxes:
        if metric == "chebyshev":
            if x0 - tolerance <= x <= x1 + tolerance and y0 - tolerance <= y <= y1 + tolerance:
                return True
        elif metric == "euclidean":
            dx = max(x0 - x, 0.0, x - x1)
            dy = max(y0 - y, 0.0, y - y1)
            if math.hypot(dx, dy) <= tolerance:
                return True
        else:
            raise ConfigError(f"unknown tolerance metric {metric!r}")
    return False


# ---------------------------------------------------------------------------
# ranking metrics

def _sweep(scores, relevant, hits=None):
    """Threshold sweep over distinct scores, highest first.

    ``relevant`` marks members of the class being retrieved (the recall
    denominator); ``hits`` marks predictions that count as true positives
    (defaults to ``relevant``).  Returns (thresholds, tp, n_pred).
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(relevant if hits is None else hits, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    cum_tp = np.cumsum(hits[order])
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return s[last], cum_tp[last], last + 1


def average_precision(scores, relevant, hits=None):
    """Returns (ap, pr_points); ap is nan when nothing is relevant."""
    relevant = np.asarray(relevant, dtype=bool)
    n_rel = int(relevant.sum())
    if len(relevant) == 0:
        return float("nan"), []
    thr, tp, npred = _sweep(scores, relevant, hits)
    prev = np.concatenate(([0], tp[:-1]))
    total = sum((Fraction(int(d) * int(t), int(n)) for d, t, n in zip(tp - prev, tp, npred) if d),
                Fraction(0))
    points = [(float(t), int(p) / int(n), (int(p) / n_rel) if n_rel else 0.0)
              for t, p, n in zip(thr, tp, npred)]
    if n_rel == 0:
        return float("nan"), points
    return float(total / n_rel), points


def auc_score(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count 1/2)."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    u = float(ranks[labels].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def classification_metrics(samples):
    """Returns (accuracy, auc, ap_pos, ap_neg, pr_points for the positive class).

    Accuracy thresholds the positive probability at 0.5 (a tie predicts
    the negative class, matching argmax with first-index ties).
    """
    p = np.array([s.prob_positive for s in samples], dtype=np.float64)
    y = np.array([s.true_label for s in samples]) == POSITIVE
    accuracy = float(np.mean((p > 0.5) == y)) if len(p) else float("nan")
    auc = auc_score(p, y)
    ap_pos, points = average_precision(p, y)
    # ranking by -p is ranking by 1 - p without rounding
    ap_neg, _ = average_precision(-p, ~y)
    return accuracy, auc, ap_pos, ap_neg, points


def localization_ap(samples, tolerance: float, metric: str = "chebyshev"):
    """Returns (loc_ap, pr_points); 0.0 when the set has no positive samples."""
    p = np.array([s.prob_positive for s in samples], dtype=np.float64)
    y = np.array([s.true_label == POSITIVE for s in samples], dtype=bool)
    hits = np.array([s.true_label == POSITIVE and s.peak_location is not None
                     and peak_hit(s.peak_location, s.boxes, tolerance, metric)
                     for s in samples], dtype=bool)
    ap, points = average_precision(p, y, hits)
    if not y.any():
        return 0.0, points
    return ap, points


# ---------------------------------------------------------------------------
# model evaluation

def score_samples(y_pos, maps_pos, labels, ids, boxes, image_size):
    """Build ScoredSamples from positive-class probabilities and score maps."""
    samples = []
    for i, sid in enumerate(ids):
        peak = None
        if maps_pos is not None:
            peak = peak_location(bilinear_upsample(maps_pos[i], image_size))
        samples.append(ScoredSample(sid, int(labels[i]), float(y_pos[i]), peak,
                                    list(boxes[i]) if boxes is not None else []))
    return samples


def evaluate(net, dataset, tolerance: float | None = None, metric: str = "chebyshev",
             batch_size: int = 256) -> EvalReport:
    """Run inference on an eval-mode dataset and compute every metric.

    Class probabilities come from the localizer head when the network has
    one.  Localization AP is omitted (``None``) when the network has no
    localizer or the dataset carries no boxes.
    """
    from .network import geometry
    from .trainer import predict

    cfg = net.config
    if dataset.images.shape[1:] != (cfg.in_channels,) + cfg.input_size:
        raise ConfigError(f"dataset images {dataset.images.shape[1:]} do not match network "
                          f"input {(cfg.in_channels,) + cfg.input_size}")
    y_cls, y_loc, maps = predict(net, dataset.images, batch_size)
    probs = y_loc if y_loc is not None else y_cls
    if tolerance is None:
        tolerance = geometry(cfg).stride // 2 if cfg.localizer_head else 0
    has_boxes = dataset.boxes is not None and any(dataset.boxes)
    maps_pos = maps[:, POSITIVE] if maps is not None else None
    samples = score_samples(probs[:, POSITIVE], maps_pos, dataset.labels, dataset.ids,
                            dataset.boxes, cfg.input_size)
    acc, auc, ap_pos, ap_neg, pr_cls = classification_metrics(samples)
    loc_ap = pr_loc = None
    if maps is not None and has_boxes:
        loc_ap, pr_loc = localization_ap(samples, tolerance, metric)
    return EvalReport(acc, auc, ap_pos, ap_neg, loc_ap, pr_cls, pr_loc, samples, tolerance)


def fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "undefined" if math.isnan(value) else repr(value)


def write_pr_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "precision", "recall"))
        for t, p, r in points:
            w.writerow((repr(t), repr(p), repr(r)))


def write_report(report: EvalReport, out_dir, prefix: str = ""):
    """Write report.csv, pr_cls.csv, pr_loc.csv (if any) and scores.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = REPORT_FIELDS if report.loc_ap is not None else REPORT_FIELDS[:-1]
    with open(out / f"{prefix}report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        w.writerow([fmt(getattr(report, f)) for f in fields])
    write_pr_csv(report.pr_cls, out / f"{prefix}pr_cls.csv")
    if report.pr_loc is not None:
        write_pr_csv(report.pr_loc, out / f"{prefix}pr_loc.csv")
    with open(out / f"{prefix}scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "prob_positive", "peak_x", "peak_y", "hit"))
        for s in report.samples:
            px, py = s.peak_location if s.peak_location is not None else ("", "")
            hit = ""
            if report.loc_ap is not None and s.peak_location is not None:
                hit = int(s.true_label == POSITIVE
                          and peak_hit(s.peak_location, s.boxes, report.tolerance))
            w.writerow((s.id, s.true_label, repr(s.prob_positive), px, py, hit))
