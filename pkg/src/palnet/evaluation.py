"""Surface re-projection of predictions and the evaluation metrics."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .atlas import LandmarkSchemaError, LandmarkSet
from .geometry import PointCloud, SpatialIndex
from .schema import MeasurementSpec, region_of

AXES = ("x", "y", "z")


class DegenerateAngleError(ValueError):
    pass


def _index(cloud):
    if isinstance(cloud, SpatialIndex):
        return cloud
    return SpatialIndex(cloud.points if isinstance(cloud, PointCloud) else cloud)


def _coords(x):
    return np.asarray(getattr(x, "coords", x), dtype=np.float64)


def _rewrap(like, coords):
    return like.with_coords(coords) if isinstance(like, LandmarkSet) else coords


def project_nearest(pred, cloud):
    """Snap every predicted landmark to its nearest surface vertex."""
    index = _index(cloud)
    c = _coords(pred).reshape(-1, 3)
    return _rewrap(pred, index.points[index.nearest(c)].reshape(_coords(pred).shape))


def project_centroid(pred, cloud, k: int = 10):
    """Replace every prediction by the centroid of its ``k`` nearest vertices."""
    index = _index(cloud)
    if k < 1 or k > len(index):
        raise ValueError(f"k={k} must be in [1, {len(index)}]")
    c = _coords(pred).reshape(-1, 3)
    idx, _ = index.knn_batch(c, k)
    out = index.points[idx].sum(axis=1) / k
    return _rewrap(pred, out.reshape(_coords(pred).shape))


def postprocess(pred, cloud, method: str = "nearest"):
    """``nearest``, ``centroid:K`` or ``none``."""
    if method == "none":
        return pred
    if method == "nearest":
        return project_nearest(pred, cloud)
    if method.startswith("centroid"):
        _, _, k = method.partition(":")
        return project_centroid(pred, cloud, int(k) if k else 10)
    raise ValueError(f"unknown post-processing {method!r}; use nearest, centroid:K or none")


def _stack(pred, gt):
    """(m, n, 3) float64 arrays plus names from LandmarkSets, lists of them or arrays."""
    def conv(x):
        if isinstance(x, LandmarkSet):
            return x.coords[None], x.names
        if isinstance(x, (list, tuple)) and x and isinstance(x[0], LandmarkSet):
            names = x[0].names
            for s in x:
                if s.names != names:
                    raise LandmarkSchemaError("landmark sets disagree on names or order")
            return np.stack([s.coords for s in x]), names
        a = np.asarray(x, dtype=np.float64)
        return (a[None] if a.ndim == 2 else a), None

    p, pn = conv(pred)
    g, gn = conv(gt)
    if pn is not None and gn is not None and pn != gn:
        raise LandmarkSchemaError("prediction and ground-truth schemas differ")
    if p.shape != g.shape or p.ndim != 3 or p.shape[2] != 3:
        raise LandmarkSchemaError(f"prediction {p.shape} and ground truth {g.shape} do not match")
    return p, g, pn or gn


def pointwise_errors(pred, gt):
    """Per-(subject, landmark) Euclidean error and its summary.

    Returns a dict with ``errors`` (m, n), per-landmark ``mean``/``std`` over
    subjects and ``overall_mean``/``overall_std`` over all errors (ddof 0).
    """
    p, g, _ = _stack(pred, gt)
    err = np.linalg.norm(p - g, axis=2)
    return {"errors": err, "mean": err.mean(axis=0), "std": err.std(axis=0),
            "overall_mean": float(err.mean()), "overall_std": float(err.std())}


def _pairwise(x):
    return np.linalg.norm(x[:, :, None, :] - x[:, None, :, :], axis=3)


def distance_error_matrix(pred, gt):
    """Mean over subjects of | |p_i - p_j| - |g_i - g_j| |; returns (matrix, off-diagonal mean)."""
    p, g, _ = _stack(pred, gt)
    mat = np.abs(_pairwise(p) - _pairwise(g)).mean(axis=0)
    mat = 0.5 * (mat + mat.T)
    np.fill_diagonal(mat, 0.0)
    n = mat.shape[0]
    off = float(mat.sum() / (n * (n - 1))) if n > 1 else 0.0
    return mat, off


def _name_index(names, n):
    if names is None:
        raise LandmarkSchemaError("landmark names are required for named measurements")
    names = tuple(names)
    if len(names) != n:
        raise LandmarkSchemaError(f"{len(names)} names for {n} landmarks")
    return {nm: i for i, nm in enumerate(names)}


def linear_distance_report(pred, gt, spec: MeasurementSpec | None = None, names=None):
    """Per named pair: mean |d_pred - d_gt| and that error as % of the mean ground-truth distance."""
    p, g, nm = _stack(pred, gt)
    spec = spec or MeasurementSpec()
    pos = _name_index(names if names is not None else nm, p.shape[1])
    rows = []
    for a, b in spec.distances:
        if a not in pos or b not in pos:
            raise KeyError(f"distance {a}-{b} references an unknown landmark")
        i, j = pos[a], pos[b]
        dp = np.linalg.norm(p[:, i] - p[:, j], axis=1)
        dg = np.linalg.norm(g[:, i] - g[:, j], axis=1)
        err = np.abs(dp - dg)
        gmean = float(dg.mean())
        rows.append({"measurement": f"{a}-{b}", "gt_mean": gmean, "pred_mean": float(dp.mean()),
                     "error": float(err.mean()), "error_std": float(err.std()),
                     "ratio_pct": 100.0 * float(err.mean()) / gmean if gmean > 0 else float("nan")})
    return rows


def angle_at(a, v, b):
    """Angle in degrees at vertex ``v``; arrays broadcast over leading axes."""
    u = np.asarray(a, dtype=np.float64) - v
    w = np.asarray(b, dtype=np.float64) - v
    nu = np.linalg.norm(u, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    if np.any(nu == 0) or np.any(nw == 0):
        raise DegenerateAngleError("coincident landmarks make the angle undefined")
    cos = np.sum(u * w, axis=-1) / (nu * nw)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def angle_report(pred, gt, spec: MeasurementSpec | None = None, names=None, on_degenerate="raise"):
    """Per named triple (vertex in the middle): mean |angle_pred - angle_gt| in degrees and as %.

    A triple with coincident landmarks raises ``DegenerateAngleError``; with
    ``on_degenerate="skip"`` the affected subjects are left out of that row and
    counted in ``n_degenerate``.
    """
    if on_degenerate not in ("raise", "skip"):
        raise ValueError("on_degenerate must be 'raise' or 'skip'")
    p, g, nm = _stack(pred, gt)
    spec = spec or MeasurementSpec()
    pos = _name_index(names if names is not None else nm, p.shape[1])
    rows = []
    for a, v, b in spec.angles:
        missing = [x for x in (a, v, b) if x not in pos]
        if missing:
            raise KeyError(f"angle {a}-{v}-{b} references unknown landmark(s) {missing}")
        i, k, j = pos[a], pos[v], pos[b]
        label = f"{a}-{v}-{b}"
        ok = np.ones(len(p), dtype=bool)
        for x in (p, g):
            ok &= (np.linalg.norm(x[:, i] - x[:, k], axis=1) > 0) & (np.linalg.norm(x[:, j] - x[:, k], axis=1) > 0)
        if not ok.all() and on_degenerate == "raise":
            raise DegenerateAngleError(f"angle {label}: coincident landmarks make the angle undefined")
        row = {"measurement": label, "gt_mean": float("nan"), "pred_mean": float("nan"),
               "error": float("nan"), "error_std": float("nan"), "ratio_pct": float("nan"),
               "n_degenerate": int((~ok).sum())}
        if ok.any():
            tp = angle_at(p[ok, i], p[ok, k], p[ok, j])
            tg = angle_at(g[ok, i], g[ok, k], g[ok, j])
            err = np.abs(tp - tg)
            gmean = float(tg.mean())
            row.update(gt_mean=gmean, pred_mean=float(tp.mean()), error=float(err.mean()),
                       error_std=float(err.std()),
                       ratio_pct=100.0 * float(err.mean()) / gmean if gmean > 0 else float("nan"))
        rows.append(row)
    return rows


def _agreement(diff):
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1)) if diff.size > 1 else 0.0
    return {"mean_diff": mean, "sd": sd, "lower": mean - 1.96 * sd, "upper": mean + 1.96 * sd,
            "n": int(diff.size)}


def bland_altman(pred, gt, groups=None, names=None, return_scatter=False):
    """Agreement of predicted vs ground-truth coordinates per region group.

    Differences are pred - gt, pooled over all coordinate axes of the group's
    landmarks; a per-axis breakdown is included. ``groups`` maps landmark name
    to group label (default: midline/right/left by name suffix).
    """
    p, g, nm = _stack(pred, gt)
    names = tuple(names if names is not None else (nm or range(p.shape[1])))
    if groups is None:
        groups = {n: region_of(str(n)) for n in names}
    missing = [n for n in names if n not in groups]
    if missing:
        raise KeyError(f"group map does not cover landmarks {missing}")
    labels = sorted({groups[n] for n in names})
    stats = {}
    scatter = []
    for lab in labels:
        cols = [i for i, n in enumerate(names) if groups[n] == lab]
        if not cols:
            raise ValueError(f"group {lab!r} is empty")
        d = p[:, cols] - g[:, cols]
        avg = 0.5 * (p[:, cols] + g[:, cols])
        entry = _agreement(d.ravel())
        entry["axes"] = {ax: _agreement(d[..., a].ravel()) for a, ax in enumerate(AXES)}
        stats[lab] = entry
        if return_scatter:
            for s in range(p.shape[0]):
                for ci, c in enumerate(cols):
                    for a, ax in enumerate(AXES):
                        scatter.append((s, names[c], lab, ax, float(avg[s, ci, a]), float(d[s, ci, a])))
    if return_scatter:
        return stats, scatter
    return stats


@dataclass
class EvalReport:
    names: tuple
    landmark_mean: np.ndarray
    landmark_std: np.ndarray
    overall_mean: float
    overall_std: float
    distance_matrix: np.ndarray
    distance_matrix_mean: float
    linear: list
    angles: list
    bland_altman: dict
    meta: dict = field(default_factory=dict)
    scatter: list | None = None

    @property
    def n_landmarks(self):
        return len(self.names)

    def to_dict(self):
        return {
            "names": list(self.names),
            "landmark_mean": self.landmark_mean.tolist(),
            "landmark_std": self.landmark_std.tolist(),
            "overall_mean": self.overall_mean,
            "overall_std": self.overall_std,
            "distance_matrix": self.distance_matrix.tolist(),
            "distance_matrix_mean": self.distance_matrix_mean,
            "linear": self.linear,
            "angles": self.angles,
            "bland_altman": self.bland_altman,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), np.asarray(d["landmark_mean"]), np.asarray(d["landmark_std"]),
                   d["overall_mean"], d["overall_std"], np.asarray(d["distance_matrix"]),
                   d["distance_matrix_mean"], d["linear"], d["angles"], d["bland_altman"],
                   d.get("meta", {}))

    def write(self, out_dir, svg=False):
        """JSON report plus one CSV per table; optional SVG renders."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        _write_csv(os.path.join(out_dir, "pointwise.csv"), ["landmark", "mean", "std"],
                   [[n, m, s] for n, m, s in zip(self.names, self.landmark_mean, self.landmark_std)]
                   + [["overall", self.overall_mean, self.overall_std]])
        _write_csv(os.path.join(out_dir, "distance_matrix.csv"), [""] + list(self.names),
                   [[n] + list(row) for n, row in zip(self.names, self.distance_matrix)])
        cols = ["measurement", "gt_mean", "pred_mean", "error", "error_std", "ratio_pct"]
        _write_csv(os.path.join(out_dir, "linear_distances.csv"), cols,
                   [[r[c] for c in cols] for r in self.linear])
        acols = cols + ["n_degenerate"]
        _write_csv(os.path.join(out_dir, "angles.csv"), acols,
                   [[r.get(c, 0) for c in acols] for r in self.angles])
        rows = []
        for lab, e in self.bland_altman.items():
            rows.append([lab, "all", e["mean_diff"], e["sd"], e["lower"], e["upper"], e["n"]])
            for ax, a in e["axes"].items():
                rows.append([lab, ax, a["mean_diff"], a["sd"], a["lower"], a["upper"], a["n"]])
        _write_csv(os.path.join(out_dir, "bland_altman.csv"),
                   ["group", "axis", "mean_diff", "sd", "lower", "upper", "n"], rows)
        if self.scatter:
            _write_csv(os.path.join(out_dir, "bland_altman_scatter.csv"),
                       ["subject", "landmark", "group", "axis", "mean", "diff"], self.scatter)
        if svg:
            with open(os.path.join(out_dir, "distance_matrix.svg"), "w", encoding="utf-8") as fh:
                fh.write(matrix_svg(self.distance_matrix, self.names))
            if self.scatter:
                with open(os.path.join(out_dir, "bland_altman.svg"), "w", encoding="utf-8") as fh:
                    fh.write(bland_altman_svg(self.scatter, self.bland_altman))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def evaluate(pred, gt, names=None, spec: MeasurementSpec | None = None, groups=None,
             meta=None, scatter=True, on_degenerate="raise") -> EvalReport:
    """All metrics for one set of predictions (typically one fold's validation subjects)."""
    p, g, nm = _stack(pred, gt)
    names = tuple(names if names is not None else nm)
    pos = _name_index(names, p.shape[1])
    spec = (spec or MeasurementSpec()).restricted_to(pos)
    pw = pointwise_errors(p, g)
    mat, off = distance_error_matrix(p, g)
    ba = bland_altman(p, g, groups or spec.regions or None, names, return_scatter=scatter)
    ba, sc = ba if scatter else (ba, None)
    return EvalReport(names, pw["mean"], pw["std"], pw["overall_mean"], pw["overall_std"], mat, off,
                      linear_distance_report(p, g, spec, names),
                      angle_report(p, g, spec, names, on_degenerate),
                      ba, dict(meta or {}, n_subjects=int(p.shape[0])), sc)


def exclude_landmarks(pred, gt, names, drop):
    """Drop named landmarks from predictions and ground truth: (pred, gt, remaining names)."""
    p, g, nm = _stack(pred, gt)
    names = tuple(names if names is not None else nm)
    unknown = [d for d in drop if d not in names]
    if unknown:
        raise KeyError(f"cannot exclude unknown landmark(s) {unknown}")
    keep = [i for i, n in enumerate(names) if n not in set(drop)]
    if not keep:
        raise ValueError("excluding every landmark leaves nothing to evaluate")
    return p[:, keep], g[:, keep], tuple(names[i] for i in keep)


def _mean_rows(tables):
    out = []
    for rows in zip(*tables):
        labels = {r["measurement"] for r in rows}
        if len(labels) != 1:
            raise LandmarkSchemaError("fold reports list different measurements")
        agg = {"measurement": rows[0]["measurement"]}
        for key in ("gt_mean", "pred_mean", "error", "error_std"):
            vals = [r[key] for r in rows if np.isfinite(r[key])]
            agg[key] = float(np.mean(vals)) if vals else float("nan")
        if "n_degenerate" in rows[0]:
            agg["n_degenerate"] = int(sum(r["n_degenerate"] for r in rows))
        agg["ratio_pct"] = 100.0 * agg["error"] / agg["gt_mean"] if agg["gt_mean"] > 0 else float("nan")
        out.append(agg)
    return out


def aggregate_folds(reports) -> EvalReport:
    """Cross-fold summary: means of fold means and means of fold standard deviations."""
    reports = list(reports)
    if not reports:
        raise ValueError("no fold reports to aggregate")
    names = reports[0].names
    for r in reports[1:]:
        if r.names != names or len(r.linear) != len(reports[0].linear) \
                or len(r.angles) != len(reports[0].angles):
            raise LandmarkSchemaError("fold reports do not share a schema")
    mat = np.mean([r.distance_matrix for r in reports], axis=0)
    n = len(names)
    ba = {}
    for lab in reports[0].bland_altman:
        def agg(getter):
            mean = float(np.mean([getter(r)["mean_diff"] for r in reports]))
            sd = float(np.mean([getter(r)["sd"] for r in reports]))
            return {"mean_diff": mean, "sd": sd, "lower": mean - 1.96 * sd, "upper": mean + 1.96 * sd,
                    "n": int(sum(getter(r)["n"] for r in reports))}
        entry = agg(lambda r: r.bland_altman[lab])
        entry["axes"] = {ax: agg(lambda r, ax=ax: r.bland_altman[lab]["axes"][ax]) for ax in AXES}
        ba[lab] = entry
    return EvalReport(
        names,
        np.mean([r.landmark_mean for r in reports], axis=0),
        np.mean([r.landmark_std for r in reports], axis=0),
        float(np.mean([r.overall_mean for r in reports])),
        float(np.mean([r.overall_std for r in reports])),
        mat,
        float(mat.sum() / (n * (n - 1))) if n > 1 else 0.0,
        _mean_rows([r.linear for r in reports]),
        _mean_rows([r.angles for r in reports]),
        ba,
        {"folds": len(reports), "n_subjects": int(sum(r.meta.get("n_subjects", 0) for r in reports))},
    )


# -- SVG renders ----------------------------------------------------------------

def _color(t):
    t = float(np.clip(t, 0.0, 1.0))
    r = int(255 * min(1.0, 2 * t))
    b = int(255 * min(1.0, 2 * (1 - t)))
    g = int(255 * (1 - abs(2 * t - 1)))
    return f"#{r:02x}{g:02x}{b:02x}"


def matrix_svg(mat, names, cell=12):
    n = len(names)
    pad = 60
    size = pad + n * cell
    vmax = float(mat.max()) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 10}" height="{size + 10}" '
             f'font-family="sans-serif" font-size="8">']
    for i in range(n):
        y = pad + i * cell
        parts.append(f'<text x="{pad - 2}" y="{y + cell - 3}" text-anchor="end">{names[i]}</text>')
        parts.append(f'<text x="{pad + i * cell + cell - 3}" y="{pad - 2}" '
                     f'transform="rotate(-90 {pad + i * cell + cell - 3} {pad - 2})">{names[i]}</text>')
        for j in range(n):
            parts.append(f'<rect x="{pad + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_color(mat[i, j] / vmax)}"><title>{names[i]}-{names[j]}: '
                         f'{mat[i, j]:.3f} mm</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts)


def bland_altman_svg(scatter, stats, width=360, height=240):
    groups = sorted(stats)
    panel_w = width
    total_h = height * len(groups)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{panel_w}" height="{total_h}" '
             f'font-family="sans-serif" font-size="10">']
    for gi, lab in enumerate(groups):
        pts = np.array([(s[4], s[5]) for s in scatter if s[2] == lab])
        y0 = gi * height
        st = stats[lab]
        lo = min(pts[:, 1].min(), st["lower"]) if len(pts) else st["lower"]
        hi = max(pts[:, 1].max(), st["upper"]) if len(pts) else st["upper"]
        if hi - lo < 1e-9:
            lo, hi = lo - 1, hi + 1
        xlo, xhi = (pts[:, 0].min(), pts[:, 0].max()) if len(pts) else (0.0, 1.0)
        if xhi - xlo < 1e-9:
            xlo, xhi = xlo - 1, xhi + 1

        def sx(v):
            return 30 + (v - xlo) / (xhi - xlo) * (panel_w - 40)

        def sy(v):
            return y0 + height - 20 - (v - lo) / (hi - lo) * (height - 40)

        parts.append(f'<text x="30" y="{y0 + 12}">{lab}</text>')
        for x, d in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(d):.1f}" r="1.2" fill="#3060a0"/>')
        for key, col in (("mean_diff", "#808080"), ("lower", "#c03030"), ("upper", "#c03030")):
            parts.append(f'<line x1="30" x2="{panel_w - 10}" y1="{sy(st[key]):.1f}" '
                         f'y2="{sy(st[key]):.1f}" stroke="{col}" stroke-dasharray="4 2"/>')
    parts.append("</svg>")
    return "\n".join(parts)
