"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def numeric_gradient(fn, x, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * step)
    return out.reshape(x.shape)


def relative_errors(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=float).ravel()
    f = np.asarray(numeric, dtype=float).ravel()
    # floor keeps coordinates that are zero in both from dividing by zero
    floor = max(1e-6 * float(np.max(np.abs(a), initial=0.0)), 1e-10)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def gradient_check(fn, grad_fn, x, step: float = 1e-5) -> GradCheckReport:
    """Compare ``grad_fn(x)`` with central differences of scalar ``fn`` coordinate by coordinate."""
    analytic = np.asarray(grad_fn(x), dtype=float)
    numeric = numeric_gradient(fn, x, step)
    rel = relative_errors(analytic, numeric)
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(float(rel.max(initial=0.0)), worst, analytic, numeric)


# ------------------------------------------------------------------ standard suite


def _away_from_kink(rng, pred, target, margin=1e-2):
    """Nudge ``pred`` so no SmoothL1 residual sits near the |d| = 1 switch."""
    d = pred - target
    bad = np.abs(np.abs(d) - 1.0) < margin
    d[bad] += np.sign(d[bad]) * 2 * margin
    return target + d


def _suite_cases(rng, model):
    from . import losses as L
    from . import quat
    from .hand_model import N_JOINTS

    def kp():
        return L.Keypoints2D(rng.uniform(0, 1, (N_JOINTS, 2)), rng.uniform(0.2, 1.0, N_JOINTS))

    det = kp()
    proj = _away_from_kink(rng, det.points + rng.normal(0, 0.8, (N_JOINTS, 2)), det.points)
    yield "loss_loc", (lambda x: L.loss_loc(det, x)), (lambda x: L.loss_loc(det, x, grad=True)[1]), proj
    yield "loss_2d", (lambda x: L.loss_2d(det, x)), (lambda x: L.loss_2d(det, x, grad=True)[1]), proj
    est = _away_from_kink(rng, proj + rng.normal(0, 0.8, proj.shape), proj)
    yield ("loss_cons", (lambda x: L.loss_cons(x, proj)), (lambda x: L.loss_cons(x, proj, grad=True)[1]), est)
    proj = det.points + rng.normal(0, 0.05, (N_JOINTS, 2))
    yield "loss_ori", (lambda x: L.loss_ori(det, x)), (lambda x: L.loss_ori(det, x, grad=True)[1]), proj

    theta = rng.normal(0, 0.4, 30)
    beta = rng.normal(0, 1, 10)
    scale = rng.uniform(0.7, 1.3)
    tex = rng.uniform(-0.2, 1.2, (model.n_faces, 3))
    # keep clear of the hinge corners at 0 and 1
    tex[np.abs(tex) < 0.01] += 0.02
    tex[np.abs(tex - 1.0) < 0.01] += 0.02
    w = L.LossWeights()
    x0 = np.concatenate([theta, beta, [scale], tex.ravel()])

    def regu(x, grad=False):
        out = L.loss_regu(x[:30], x[30:40], x[40], x[41:].reshape(-1, 3), model.limits, model, w, grad=grad)
        if not grad:
            return out[0]
        g = out[2]
        return np.concatenate([g["theta"], g["beta"], [g["scale"]], g["texture"].ravel()])

    # texture has ~2300 coordinates; check the pose, shape, scale and a texture sample
    idx = np.concatenate([np.arange(41), 41 + rng.choice(tex.size, 40, replace=False)])

    def sub(fn):
        def f(y):
            x = x0.copy()
            x[idx] = y
            return fn(x)
        return f

    yield "loss_regu", sub(regu), (lambda y: sub(lambda x: regu(x, True))(y)[idx]), x0[idx]

    n = int(rng.integers(3, 6))
    vecs = rng.normal(0, 0.8, (n, 4, 3))

    def qloss(v, grad=False):
        h, jac = quat.quat_from_rotvec_jac(v)
        if not grad:
            return L.loss_quat(h)
        _, g = L.loss_quat(h, grad=True)
        return np.einsum("nja,njac->njc", g, jac)

    yield "loss_quat", qloss, (lambda v: qloss(v, True)), vecs

    lit = rng.uniform(0, 1, (n, 6, 3))
    betas = rng.normal(0, 1, (n, 10))
    xs = np.concatenate([lit.reshape(n, -1), betas], axis=1)

    def ts(x, grad=False):
        c, b = x[:, :18].reshape(n, 6, 3), x[:, 18:]
        if not grad:
            return L.loss_ts(c, b)
        _, gc, gb = L.loss_ts(c, b, grad=True)
        return np.concatenate([gc.reshape(n, -1), gb], axis=1)

    yield "loss_ts", ts, (lambda x: ts(x, True)), xs

    tb = np.concatenate([rng.normal(0, 0.4, 30), rng.normal(0, 1, 10)])
    wj = rng.normal(size=(21, 3))
    yield ("decode_joints", (lambda x: float(np.sum(wj * model.decode(x[:30], x[30:], vertices=False).joints))),
           (lambda x: np.einsum("jc,jcp->p", wj, model.decode(x[:30], x[30:], True, vertices=False).d_joints)),
           tb)
    wv = rng.normal(size=(model.n_verts, 3))
    yield ("decode_vertices", (lambda x: float(np.sum(wv * model.decode(x[:30], x[30:]).vertices))),
           (lambda x: np.einsum("vc,vcp->p", wv, model.decode(x[:30], x[30:], True).d_vertices)), tb)


def standard_suite(points: int = 100, seed: int = 0, step: float = 1e-5, model=None) -> dict:
    """Worst gradient-check report per checked function over ``points`` random smooth points."""
    from .hand_model import default_model

    model = model or default_model()
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(points):
        for name, fn, grad_fn, x in _suite_cases(rng, model):
            rep = gradient_check(fn, grad_fn, x, step)
            if name not in worst or rep.max_rel_error > worst[name].max_rel_error:
                worst[name] = rep
    return worst
