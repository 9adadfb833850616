"""Evaluation metrics, per-pair reports and their CSV / image emission.

Metrics are computed in float64.  A metric that is undefined for a pair (an
empty valid set, an empty target mask) is ``None`` and written as an empty
CSV value, never as 0.
"""

import csv
from dataclasses import dataclass, field
import math
from pathlib import Path
from typing import NamedTuple, Optional

import cv2
import numpy as np
import torch

from .errors import ContractViolation
from .warp import sample_bilinear, warp_tensor

SCHEMA_VERSION = 1
PER_PAIR_FIELDS = ("schema_version", "pair_id", "metric", "category", "value", "count")
AGGREGATE_FIELDS = ("schema_version", "metric", "category", "value", "n_pairs")
PER_PAIR_CSV = "metrics_per_pair.csv"
AGGREGATE_CSV = "metrics_aggregate.csv"
ERROR_PIXEL_THRESHOLD = 3.0
ERROR_RELATIVE_THRESHOLD = 0.05


def _flow64(flow):
    if isinstance(flow, np.ndarray):
        flow = torch.from_numpy(flow)
    flow = flow.detach().to(torch.float64)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ContractViolation(f"flow must be (2,H,W) or (N,2,H,W), got {tuple(flow.shape)}")
    return flow


def _map64(x, like):
    """Bring a mask / valid map to ``(N, 1, H, W)`` float64 matching ``like``."""
    if x is None:
        return torch.ones_like(like[:, :1])
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    x = x.detach().to(torch.float64)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    if x.shape[-2:] != like.shape[-2:]:
        raise ContractViolation(f"map dims {tuple(x.shape[-2:])} do not match flow dims {tuple(like.shape[-2:])}")
    return x.expand(like.shape[0], 1, *like.shape[-2:])


def endpoint_error(flow_est, flow_gt):
    est, gt = _flow64(flow_est), _flow64(flow_gt)
    if est.shape != gt.shape:
        raise ContractViolation(f"flow dims differ: {tuple(est.shape)} vs {tuple(gt.shape)}")
    return torch.linalg.vector_norm(est - gt, dim=1, keepdim=True)


def aee(flow_est, flow_gt, valid=None):
    """Mean end-point error over valid pixels; ``None`` when none are valid."""
    err = endpoint_error(flow_est, flow_gt)
    sel = _map64(valid, err) > 0
    if not sel.any():
        return None
    return float(err[sel].mean())


def error_rate(flow_est, flow_gt, valid=None):
    """Fraction of valid pixels with error >= 3 px and >= 5% of the GT magnitude."""
    err = endpoint_error(flow_est, flow_gt)
    mag = torch.linalg.vector_norm(_flow64(flow_gt), dim=1, keepdim=True)
    sel = _map64(valid, err) > 0
    if not sel.any():
        return None
    bad = (err >= ERROR_PIXEL_THRESHOLD) & (err >= ERROR_RELATIVE_THRESHOLD * mag)
    return float(bad[sel].to(torch.float64).mean())


class PRF(NamedTuple):
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


def prf_from_counts(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRF(precision, recall, f1)


def mask_transfer_counts(mask_src, flow, mask_tgt, threshold=0.5):
    """``(tp, fp, fn)`` of the warped, binarised source mask against the target."""
    f = _flow64(flow)
    src = _map64(mask_src, f)
    tgt = _map64(mask_tgt, f) > 0
    warped, _ = warp_tensor((src > 0).to(torch.float64), f)
    pred = warped >= threshold
    tp = int((pred & tgt).sum())
    fp = int((pred & ~tgt).sum())
    fn = int((~pred & tgt).sum())
    return tp, fp, fn


def mask_transfer_prf(mask_src, flow, mask_tgt, threshold=0.5):
    """Precision, recall and F1 of a mask carried across by ``flow``."""
    return prf_from_counts(*mask_transfer_counts(mask_src, flow, mask_tgt, threshold))


@dataclass
class PointRMSE:
    """Per-category RMSE; ``rmse`` follows the selected mode (u only or 2D)."""

    rmse: dict
    rmse_u: dict
    rmse_v: dict
    counts: dict
    skipped: int = 0

    @property
    def mean(self):
        vals = list(self.rmse.values())
        return float(np.mean(vals)) if vals else None


def point_rmse(flow_est, points, u_only=False):
    """RMSE of the flow sampled at ``(x_a, y_a)`` against ``(x_b - x_a, y_b - y_a)``.

    ``flow_est`` must live on image A's grid.  Points whose ``(x_a, y_a)`` is
    outside the frame are skipped and counted.
    """
    f = _flow64(flow_est)[:1]
    h, w = f.shape[-2:]
    by_cat = {}
    skipped = 0
    for xa, ya, xb, yb, cat in points:
        if not (0 <= xa <= w - 1 and 0 <= ya <= h - 1):
            skipped += 1
            continue
        by_cat.setdefault(str(cat), []).append((xa, ya, xb - xa, yb - ya))
    rmse, rmse_u, rmse_v, counts = {}, {}, {}, {}
    for cat, rows in sorted(by_cat.items()):
        arr = torch.tensor(rows, dtype=torch.float64)
        sampled, _ = sample_bilinear(f, arr[:, 0].view(1, 1, -1), arr[:, 1].view(1, 1, -1))
        du = sampled[0, 0, 0] - arr[:, 2]
        dv = sampled[0, 1, 0] - arr[:, 3]
        ru = float(torch.sqrt((du * du).mean()))
        rv = float(torch.sqrt((dv * dv).mean()))
        rmse_u[cat], rmse_v[cat] = ru, rv
        rmse[cat] = ru if u_only else float(torch.sqrt((du * du + dv * dv).mean()))
        counts[cat] = len(rows)
    return PointRMSE(rmse, rmse_u, rmse_v, counts, skipped)


@dataclass
class PairMetrics:
    pair_id: str
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    aee: Optional[float] = None
    error_rate: Optional[float] = None
    points: Optional[PointRMSE] = None
    n_valid_pixels: int = 0
    n_mask_pixels: int = 0
    has_flow_gt: bool = False
    has_masks: bool = False
    # Visualisation sources, not written to CSV.
    flow: object = field(default=None, repr=False)
    error_map: object = field(default=None, repr=False)

    def rows(self):
        """``(metric, category, value, count)`` tuples for the per-pair CSV."""
        out = []
        if self.has_masks:
            for name in ("precision", "recall", "f1"):
                out.append((name, "", getattr(self, name), self.n_mask_pixels))
        if self.has_flow_gt:
            out.append(("aee", "", self.aee, self.n_valid_pixels))
            out.append(("error_rate", "", self.error_rate, self.n_valid_pixels))
        if self.points is not None:
            p = self.points
            for cat in p.rmse:
                out.append(("rmse", cat, p.rmse[cat], p.counts[cat]))
                out.append(("rmse_u", cat, p.rmse_u[cat], p.counts[cat]))
                out.append(("rmse_v", cat, p.rmse_v[cat], p.counts[cat]))
            out.append(("rmse", "mean", p.mean, sum(p.counts.values())))
            out.append(("points_skipped", "", float(p.skipped), p.skipped))
        return out


def evaluate_pair(pair_id, f_AB, f_BA=None, gt_flow=None, valid=None, mask_a=None, mask_b=None,
                  points=None, threshold=0.5, u_only=False):
    """Run every metric whose annotation is present.

    ``f_AB`` (on B's grid) is scored against ``gt_flow`` and carries ``mask_a``
    onto ``mask_b``; ``f_BA`` (on A's grid) is scored on ``points``.
    """
    m = PairMetrics(pair_id, flow=f_AB)
    if gt_flow is not None:
        m.has_flow_gt = True
        m.aee = aee(f_AB, gt_flow, valid)
        m.error_rate = error_rate(f_AB, gt_flow, valid)
        err = endpoint_error(f_AB, gt_flow)
        sel = _map64(valid, err) > 0
        m.n_valid_pixels = int(sel.sum())
        m.error_map = (err * sel)[0, 0].numpy()
    if mask_a is not None and mask_b is not None:
        m.has_masks = True
        m.precision, m.recall, m.f1 = mask_transfer_prf(mask_a, f_AB, mask_b, threshold)
        m.n_mask_pixels = int((_map64(mask_b, _flow64(f_AB)) > 0).sum())
    if points is not None:
        if f_BA is None:
            raise ContractViolation("point evaluation needs the flow on image A's grid")
        m.points = point_rmse(f_BA, points, u_only)
    return m


@dataclass
class MetricReport:
    pairs: list

    def aggregate(self):
        """Unweighted means over pairs, skipping pairs where a metric is absent."""
        acc = {}
        for p in self.pairs:
            for metric, cat, value, _ in p.rows():
                if metric == "points_skipped" or value is None:
                    continue
                acc.setdefault((metric, cat), []).append(value)
        return {key: (float(np.mean(vals)), len(vals)) for key, vals in acc.items()}


def _fmt(value):
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))


def make_colorwheel():
    """Hue wheel with the customary RY/YG/GC/CB/BM/MR segment lengths."""
    segments = (15, 6, 4, 11, 13, 6)
    wheel = np.zeros((sum(segments), 3))
    col = 0
    for i, n in enumerate(segments):
        ramp = np.floor(255 * np.arange(n) / n)
        main, nxt = i // 2 % 3, (i // 2 + 1) % 3
        if i % 2 == 0:
            # Rising ramp on the next colour while the current one is full.
            wheel[col:col + n, main] = 255
            wheel[col:col + n, nxt] = ramp
        else:
            wheel[col:col + n, main] = 255 - ramp
            wheel[col:col + n, nxt] = 255
        col += n
    return wheel


def flow_to_color(flow, max_radius=None):
    """RGB uint8 ``(H, W, 3)`` rendering; zero flow is white."""
    f = _flow64(flow)[0].numpy()
    u, v = f[0], f[1]
    rad = np.sqrt(u * u + v * v)
    if max_radius is None:
        max_radius = rad.max()
    scale = max_radius if max_radius > 0 else 1.0
    u, v, rad = u / scale, v / scale, rad / scale
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = fk - k0
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for c in range(3):
        col = (1 - frac) * wheel[k0, c] / 255.0 + frac * wheel[k1, c] / 255.0
        inner = rad <= 1
        col = np.where(inner, 1 - rad * (1 - col), col * 0.75)
        img[..., c] = np.floor(255 * col).astype(np.uint8)
    return img


def error_heatmap(error_map, max_error=None):
    """BGR uint8 heatmap (``hot`` colormap): larger error is brighter."""
    e = np.asarray(error_map, dtype=np.float64)
    top = e.max() if max_error is None else max_error
    norm = np.clip(e / top, 0.0, 1.0) if top > 0 else np.zeros_like(e)
    return cv2.applyColorMap(np.round(norm * 255).astype(np.uint8), cv2.COLORMAP_HOT)


def emit_report(report, out_dir):
    """Write per-pair and aggregate CSVs plus flow and error images.

    Returns the list of written paths.
    """
    if not isinstance(report, MetricReport):
        report = MetricReport(list(report))
    if not report.pairs:
        raise ContractViolation("emit_report needs at least one pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / PER_PAIR_CSV
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PER_PAIR_FIELDS)
        for p in report.pairs:
            for metric, cat, value, count in p.rows():
                writer.writerow((SCHEMA_VERSION, p.pair_id, metric, cat, _fmt(value), count))
    written.append(path)
    path = out_dir / AGGREGATE_CSV
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(AGGREGATE_FIELDS)
        for (metric, cat), (value, n) in report.aggregate().items():
            writer.writerow((SCHEMA_VERSION, metric, cat, _fmt(value), n))
    written.append(path)
    for p in report.pairs:
        if p.flow is not None:
            path = out_dir / f"{p.pair_id}_flow.png"
            if not cv2.imwrite(str(path), cv2.cvtColor(flow_to_color(p.flow), cv2.COLOR_RGB2BGR)):
                raise OSError(f"could not write {path}")
            written.append(path)
        if p.error_map is not None:
            path = out_dir / f"{p.pair_id}_error.png"
            if not cv2.imwrite(str(path), error_heatmap(p.error_map)):
                raise OSError(f"could not write {path}")
            written.append(path)
    return written
