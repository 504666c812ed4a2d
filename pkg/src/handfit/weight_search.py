"""Greedy per-group loss weight selection on a small overfit set.

Groups are fixed one at a time in a given order.  Each new weight starts at
the power of ten that brings its weighted loss to the magnitude of the
weighted sum of the groups already fixed, then moves by a constant factor
in each direction while that sum keeps decreasing.  The candidate with the
lowest sum of already-fixed weighted losses is kept.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L

log = logging.getLogger(__name__)

GROUP_ORDER = ("loc", "ori", "beta", "C", "s", "J", "2d", "cons", "pixel", "ssim", "quat", "ts")
# groups whose weight is relative to another group's
PARENT = {"ori": "loc", "ssim": "pixel", "C": "beta", "s": "beta", "J": "beta"}


def magnitude_init(determined_sum: float, raw: float) -> float:
    """Power of ten closest (in log scale) to ``determined_sum / raw``."""
    if not (np.isfinite(determined_sum) and np.isfinite(raw)) or determined_sum <= 0 or raw <= 0:
        raise ValueError(f"magnitude matching needs positive finite losses, got {determined_sum}, {raw}")
    return 10.0 ** math.floor(math.log10(determined_sum / raw) + 0.5)


@dataclass
class Probe:
    group: str
    phi: dict
    raw: dict
    metrics: dict
    determined_sum: float
    failed: bool = False
    selected: bool = False

    def weighted(self, group: str) -> float:
        return self.phi.get(group, 0.0) * self.raw.get(group, np.nan)


@dataclass
class SearchResult:
    phi: dict
    probes: list = field(default_factory=list)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights.from_effective(self.phi)

    def group_probes(self, group: str) -> list:
        return [p for p in self.probes if p.group == group]


def determined_sum(phi: dict, raw: dict, groups) -> float:
    return float(sum(phi[g] * raw[g] for g in groups))


def _probe(trainer, phi, group, determined):
    try:
        raw, metrics = trainer(L.LossWeights.from_effective(phi))
        s = determined_sum(phi, raw, determined)
        if not np.isfinite(s) or not all(np.isfinite(raw.get(g, 0.0)) for g in determined + [group]):
            raise FloatingPointError("non-finite loss")
    except (FloatingPointError, ArithmeticError, RuntimeError, ValueError) as err:
        log.warning("probe %s = %g failed: %s", group, phi[group], err)
        return Probe(group, dict(phi), {}, {}, np.inf, failed=True)
    return Probe(group, dict(phi), dict(raw), dict(metrics), s)


def grid_search_weights(trainer, groups=GROUP_ORDER, factor: float = 10.0, max_steps: int = 4,
                        first_weight: float = 1.0, callback=None) -> SearchResult:
    """Select one weight per loss group in ``groups`` order.

    ``trainer(weights)`` overfits the small set with the given ``LossWeights``
    and returns ``(raw, metrics)``: the unweighted value of every sub-loss
    (including switched-off ones) and a dict of evaluation metrics.  The first
    group is fixed at ``first_weight``.  A trainer exception or a non-finite
    loss marks that candidate failed and the scan goes on.
    """
    groups = list(groups)
    if not groups:
        raise ValueError("no loss groups to search")
    unknown = set(groups) - set(L.SUB_LOSSES)
    if unknown:
        raise ValueError(f"unknown loss groups: {sorted(unknown)}")
    for k, g in enumerate(groups):
        if g in PARENT and PARENT[g] not in groups[:k]:
            raise ValueError(f"group {g!r} must come after {PARENT[g]!r}")
    if factor <= 1:
        raise ValueError("scan factor must exceed 1")
    phi = {g: 0.0 for g in L.SUB_LOSSES}
    phi[groups[0]] = first_weight
    base = _probe(trainer, phi, groups[0], [])
    if base.failed:
        raise RuntimeError(f"overfit run with only {groups[0]!r} enabled failed")
    base.determined_sum = determined_sum(phi, base.raw, [groups[0]])
    base.selected = True
    result = SearchResult(dict(phi), [base])
    if callback:
        callback(base)
    current = base
    for k, group in enumerate(groups[1:], start=1):
        determined = groups[:k]
        try:
            w0 = magnitude_init(current.determined_sum, current.raw[group])
        except ValueError as err:
            log.warning("group %s: %s; starting from 1", group, err)
            w0 = 1.0
        tried = {}

        def run(w):
            trial = dict(phi)
            trial[group] = w
            p = _probe(trainer, trial, group, determined)
            tried[w] = p
            result.probes.append(p)
            if callback:
                callback(p)
            return p

        start = run(w0)
        for step in (factor, 1.0 / factor):
            best, w = start.determined_sum, w0
            for _ in range(max_steps):
                w = w * step
                p = run(w)
                if p.failed:
                    continue
                if not p.determined_sum < best:
                    break
                best = p.determined_sum
        ok = [p for p in tried.values() if not p.failed]
        if not ok:
            log.warning("every candidate for %s failed; leaving it off", group)
            continue
        chosen = min(ok, key=lambda p: (p.determined_sum, -p.phi[group]))
        chosen.selected = True
        phi[group] = chosen.phi[group]
        # the next group's magnitude uses the sum including this group
        current = Probe(group, dict(phi), chosen.raw, chosen.metrics,
                        determined_sum(phi, chosen.raw, groups[:k + 1]))
        result.phi = dict(phi)
    return result


def _fmt(x):
    if isinstance(x, str):
        return x
    if x is None or not np.isfinite(x):
        return "-"
    return f"{x:.6g}"


def search_table(result: SearchResult, metric_names=("mpjpe_cm", "auc_j")) -> list:
    """One table per searched group, as lists of rows (header first).

    Columns: the weights fixed so far and the probed one, each of their
    weighted losses, the sum of the already-fixed weighted losses, the
    metrics, and a status flag (``selected`` / ``failed``).
    """
    order = []
    for p in result.probes:
        if p.group not in order:
            order.append(p.group)
    tables = []
    for k, group in enumerate(order[1:], start=1):
        shown = order[:k + 1]
        header = ([f"phi_{g}" for g in shown] + [f"phi_{g}*E_{g}" for g in shown]
                  + ["sum(" + " + ".join(f"phi_{g}*E_{g}" for g in order[:k]) + ")"]
                  + list(metric_names) + ["status"])
        rows = [header]
        for p in sorted(result.group_probes(group), key=lambda p: p.phi[group]):
            status = "failed" if p.failed else ("selected" if p.selected else "")
            rows.append([_fmt(p.phi[g]) for g in shown]
                        + [_fmt(p.weighted(g)) if not p.failed else "-" for g in shown]
                        + [_fmt(p.determined_sum)]
                        + [_fmt(p.metrics.get(m)) for m in metric_names] + [status])
        tables.append((group, rows))
    return tables


def format_tables(tables) -> str:
    out = []
    for group, rows in tables:
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        out.append(f"weight selection for {group}")
        for i, r in enumerate(rows):
            out.append("  ".join(s.rjust(w) for s, w in zip(r, widths)))
            if i == 0:
                out.append("  ".join("-" * w for w in widths))
        out.append("")
    return "\n".join(out)


def write_tables_csv(path, tables) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for group, rows in tables:
            w.writerow(["group", group])
            w.writerows(rows)
            w.writerow([])


def overfit_trainer(frames, gt_joints, config, model=None):
    """Trainer that fits ``frames`` and reports final raw sub-losses and joint metrics.

    Video mode is used as soon as a video term carries weight.  The keypoint
    initialisation does not depend on the weights, so it runs once.
    """
    from .fitter import camera_joints, fit_sequence, initial_params
    from .hand_model import default_model
    from .metrics import pck_auc, point_distances_mm

    model = model or default_model()
    gt_joints = np.asarray(gt_joints, dtype=float)
    init = []

    def train(weights: L.LossWeights):
        if not init:
            init.extend(initial_params(f, model) for f in frames)
        mode = "video" if (weights.w_quat > 0 or weights.w_ts > 0) else "image"
        res = fit_sequence(frames, weights, config, init=init, mode=mode, model=model)
        raw = {k: float(res.final[k]) for k in L.SUB_LOSSES}
        pred = np.stack([camera_joints(p, model) for p in res.params])
        d = point_distances_mm(pred, gt_joints, align=True)
        return raw, {"mpjpe_cm": float(d.mean() / 10.0), "auc_j": pck_auc(d)}

    return train
