"""Training objectives with per-term breakdown and analytic gradients.

Keypoint-type losses take points in normalized image coordinates (u / width,
v / height).  Functions with a ``grad`` flag return ``(value, gradient)``
when it is set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import quat
from .hand_model import BONE_PAIRS, N_JOINTS, HandModel, JointAngleLimits

SCALE_RANGE = (0.8, 1.2)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class LossError(ValueError):
    pass


@dataclass
class Keypoints2D:
    points: np.ndarray   # (21, 2) normalized
    conf: np.ndarray     # (21,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=float).ravel()
        if self.points.shape[0] != N_JOINTS or self.conf.shape[0] != N_JOINTS:
            raise LossError(f"keypoints need {N_JOINTS} entries")
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise LossError("confidences must lie in [0, 1]")


# ---------------------------------------------------------------- weights


@dataclass
class LossWeights:
    w_3d: float = 1.0
    w_2d: float = 0.001
    w_cons: float = 0.0002
    w_geo: float = 0.001
    w_photo: float = 0.005
    w_quat: float = 0.05
    w_ts: float = 0.01
    w_regu: float = 0.01
    w_ori: float = 100.0
    w_SSIM: float = 0.2
    w_C: float = 0.5
    w_s: float = 10.0
    w_J: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"{f.name} must be a finite nonnegative number, got {v}")
            setattr(self, f.name, v)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise LossError(f"unknown weight fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "LossWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "LossWeights":
        d = self.to_dict()
        d.update(kw)
        return LossWeights(**d)

    def effective(self) -> dict:
        """Flat multiplier of every sub-loss inside the video-mode total."""
        w3 = self.w_3d
        geo = w3 * self.w_geo
        photo = w3 * self.w_photo
        regu = w3 * self.w_regu
        return {
            "loc": geo,
            "ori": geo * self.w_ori,
            "pixel": photo,
            "ssim": photo * self.w_SSIM,
            "beta": regu,
            "C": regu * self.w_C,
            "s": regu * self.w_s,
            "J": regu * self.w_J,
            "2d": self.w_2d,
            "cons": self.w_cons,
            "quat": self.w_quat,
            "ts": self.w_ts,
        }

    @classmethod
    def from_effective(cls, phi: dict) -> "LossWeights":
        """Inverse of ``effective``; missing groups are switched off.

        A nested group (ori, ssim, C, s, J) can only be nonzero when its
        parent (loc, pixel, beta) is nonzero.
        """
        unknown = set(phi) - set(SUB_LOSSES)
        if unknown:
            raise LossError(f"unknown loss groups: {sorted(unknown)}")
        p = {k: float(phi.get(k, 0.0)) for k in SUB_LOSSES}

        def ratio(child, parent):
            if p[child] == 0.0:
                return 0.0
            if p[parent] == 0.0:
                raise LossError(f"group {child!r} needs a nonzero {parent!r} weight")
            return p[child] / p[parent]

        return cls(w_3d=1.0, w_geo=p["loc"], w_ori=ratio("ori", "loc"), w_photo=p["pixel"],
                   w_SSIM=ratio("ssim", "pixel"), w_regu=p["beta"], w_C=ratio("C", "beta"),
                   w_s=ratio("s", "beta"), w_J=ratio("J", "beta"), w_2d=p["2d"],
                   w_cons=p["cons"], w_quat=p["quat"], w_ts=p["ts"])


SUB_LOSSES = ("loc", "ori", "pixel", "ssim", "beta", "C", "s", "J", "2d", "cons", "quat", "ts")
IMAGE_TERMS = SUB_LOSSES[:10]


@dataclass
class LossBreakdown:
    values: dict

    def get(self, name: str) -> float:
        return float(self.values.get(name, 0.0))

    def totals(self, weights: LossWeights, mode: str = "video") -> dict:
        v = self.values
        e_geo = loss_geo(v["loc"], v["ori"], weights.w_ori)
        e_photo = loss_photo(v["pixel"], v["ssim"], weights.w_SSIM)
        e_regu = v["beta"] + weights.w_C * v["C"] + weights.w_s * v["s"] + weights.w_J * v["J"]
        e_3d = weights.w_geo * e_geo + weights.w_photo * e_photo + weights.w_regu * e_regu
        e_img = weights.w_3d * e_3d + weights.w_2d * v["2d"] + weights.w_cons * v["cons"]
        out = {"E_geo": e_geo, "E_photo": e_photo, "E_regu": e_regu, "E_3d": e_3d, "E_image": e_img}
        if mode == "video":
            out["E_video"] = e_img + weights.w_quat * v["quat"] + weights.w_ts * v["ts"]
        return out


def total_objective(breakdown: LossBreakdown | dict, weights: LossWeights, mode: str = "video") -> float:
    """Image mode: E_image; video mode (E_video) additionally adds the quaternion and T&S terms."""
    if mode not in ("image", "video"):
        raise LossError(f"mode must be 'image' or 'video', got {mode!r}")
    values = breakdown.values if isinstance(breakdown, LossBreakdown) else breakdown
    need = IMAGE_TERMS if mode == "image" else SUB_LOSSES
    missing = [k for k in need if k not in values]
    if missing:
        raise LossError(f"missing sub-losses for {mode} mode: {missing}")
    totals = LossBreakdown(dict(values)).totals(weights, mode)
    return float(totals["E_video" if mode == "video" else "E_image"])


# ---------------------------------------------------------------- keypoints


def smooth_l1(pred, target):
    """Huber loss with unit threshold, summed over all coordinates."""
    d = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return float(np.sum(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def _smooth_l1_terms(pred, target):
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    d = np.abs(diff)
    val = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    grad = np.where(d < 1.0, diff, np.sign(diff))
    return val, grad


def loss_loc(det: Keypoints2D, proj, grad: bool = False):
    proj = np.asarray(proj, dtype=float).reshape(N_JOINTS, 2)
    val, g = _smooth_l1_terms(proj, det.points)
    e = float(np.sum(det.conf * val.sum(axis=1)) / N_JOINTS)
    if not grad:
        return e
    return e, det.conf[:, None] * g / N_JOINTS


def loss_2d(det: Keypoints2D, est, grad: bool = False):
    return loss_loc(det, est, grad)


def loss_cons(proj, est, grad: bool = False):
    """Unweighted SmoothL1 link between projected and estimated joints.

    Gradient is returned w.r.t. ``proj``; the one w.r.t. ``est`` is its negative.
    """
    proj = np.asarray(proj, dtype=float).reshape(N_JOINTS, 2)
    est = np.asarray(est, dtype=float).reshape(N_JOINTS, 2)
    val, g = _smooth_l1_terms(proj, est)
    e = float(val.sum() / N_JOINTS)
    return (e, g / N_JOINTS) if grad else e


def loss_ori(det: Keypoints2D, proj, bones=BONE_PAIRS, grad: bool = False):
    proj = np.asarray(proj, dtype=float).reshape(N_JOINTS, 2)
    bones = np.asarray(bones)
    m = len(bones)
    a, b = bones[:, 0], bones[:, 1]
    vd = det.points[b] - det.points[a]
    vp = proj[b] - proj[a]
    ld = np.linalg.norm(vd, axis=1)
    lp = np.linalg.norm(vp, axis=1)
    ok = (ld >= 1e-8) & (lp >= 1e-8)
    nd = np.where(ok[:, None], vd / np.where(ok, ld, 1.0)[:, None], 0.0)
    npj = np.where(ok[:, None], vp / np.where(ok, lp, 1.0)[:, None], 0.0)
    cb = det.conf[a] * det.conf[b] * ok
    diff = npj - nd
    e = float(np.sum(cb * np.sum(diff * diff, axis=1)) / m)
    if not grad:
        return e
    # d |n_p - n_d|^2 / d v_p = 2 (I - n_p n_p^T) (n_p - n_d) / |v_p|
    gn = 2.0 * diff
    gv = (gn - np.sum(gn * npj, axis=1, keepdims=True) * npj) / np.where(ok, lp, 1.0)[:, None]
    gv *= (cb / m)[:, None]
    g = np.zeros_like(proj)
    np.add.at(g, b, gv)
    np.add.at(g, a, -gv)
    return e, g


def loss_geo(loc, ori, w_ori):
    return loc + w_ori * ori


# ---------------------------------------------------------------- photometric


def loss_pixel(image, render, conf_sum: float, normalize: bool = False, grad: bool = False):
    """Confidence-scaled mean L1 colour error over the rendered silhouette.

    ``normalize`` divides ``conf_sum`` by the keypoint count.  The gradient is
    w.r.t. the rendered colour image.
    """
    image = np.asarray(image, dtype=float)
    if image.shape != render.color.shape:
        raise LossError(f"image shape {image.shape} does not match render {render.color.shape}")
    scale = conf_sum / N_JOINTS if normalize else conf_sum
    mask = render.silhouette
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(image)) if grad else 0.0
    diff = render.color - image
    e = float(scale / n * np.sum(np.abs(diff)[mask]) / 3.0)
    if not grad:
        return e
    g = np.where(mask[..., None], np.sign(diff), 0.0) * (scale / (3.0 * n))
    return e, g


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    """Separable 'valid' correlation over the first two axes."""
    r = len(k) // 2
    out = correlate1d(img, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def _filter_adjoint(g, k):
    """Adjoint of :func:`_filter_valid` (zero-padded 'full' correlation with the flipped kernel)."""
    r = len(k) // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (g.ndim - 2)
    full = np.pad(g, pad)
    kf = k[::-1]
    full = correlate1d(full, kf, axis=0, mode="constant")
    return correlate1d(full, kf, axis=1, mode="constant")


def ssim(x, y, grad: bool = False):
    """Mean Gaussian-windowed SSIM over valid window positions and channels.

    Optionally returns the gradient w.r.t. ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LossError("SSIM inputs must have the same shape")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise LossError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    k = gaussian_window()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    exx, eyy, exy = _filter_valid(x * x, k), _filter_valid(y * y, k), _filter_valid(x * y, k)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    val = float(smap.mean())
    if not grad:
        return val
    n = smap.size
    d_my = (2 * mx * a2 - 2 * mx * a1) / (b1 * b2) - smap * (2 * my / b1 - 2 * my / b2)
    d_exy = 2 * a1 / (b1 * b2)
    d_eyy = -smap / b2
    g = (_filter_adjoint(d_my, k) + 2 * y * _filter_adjoint(d_eyy, k) + x * _filter_adjoint(d_exy, k)) / n
    return val, g


def loss_ssim(image, render, grad: bool = False):
    """1 - SSIM between the silhouette-masked input and the rendered colour."""
    image = np.asarray(image, dtype=float)
    if image.shape != render.color.shape:
        raise LossError(f"image shape {image.shape} does not match render {render.color.shape}")
    masked = image * render.silhouette[..., None]
    if not grad:
        return 1.0 - ssim(masked, render.color)
    s, g = ssim(masked, render.color, grad=True)
    return 1.0 - s, -g


def loss_photo(pixel, ssim_loss, w_ssim):
    return pixel + w_ssim * ssim_loss


# ---------------------------------------------------------------- regularizers


def _sq_hinge(x, lo, hi):
    below = np.minimum(x - lo, 0.0)
    above = np.maximum(x - hi, 0.0)
    return below * below + above * above, 2.0 * (below + above)


def loss_regu(theta, beta, scale, texture, limits: JointAngleLimits, model: HandModel,
              weights: LossWeights | None = None, scale_range=SCALE_RANGE, grad: bool = False):
    """Shape prior, texture range, scale range and joint-angle feasibility.

    Returns ``(total, parts)`` or, with ``grad``, ``(total, parts, grads)``
    where ``grads`` has keys theta, beta, scale, texture (of the weighted total).
    """
    weights = weights or LossWeights()
    beta = np.asarray(beta, dtype=float)
    texture = np.asarray(texture, dtype=float)
    nb = np.linalg.norm(beta)
    e_beta = float(nb)
    hc, dhc = _sq_hinge(texture, 0.0, 1.0)
    e_c = float(hc.mean())
    hs, dhs = _sq_hinge(float(scale), *scale_range)
    e_s = float(hs)
    if grad:
        ang, jac = model.joint_angles(theta, jacobian=True)
    else:
        ang = model.joint_angles(theta)
    hj, dhj = _sq_hinge(ang, limits.lower, limits.upper)
    e_j = float(hj.mean())
    parts = {"beta": e_beta, "C": e_c, "s": e_s, "J": e_j}
    total = e_beta + weights.w_C * e_c + weights.w_s * e_s + weights.w_J * e_j
    if not grad:
        return total, parts
    grads = {
        "beta": beta / nb if nb > 0 else np.zeros_like(beta),
        "texture": weights.w_C * dhc / hc.size,
        "scale": float(weights.w_s * dhs),
        "theta": weights.w_J * np.einsum("ja,jap->p", dhj / hj.size, jac),
    }
    return total, parts, grads


# ---------------------------------------------------------------- video terms


def loss_quat(sequence, grad: bool = False):
    """Geodesic-deviation loss of a window of per-frame joint quaternions.

    ``sequence`` has shape ``(n, J, 4)``.  Per joint, the summed consecutive
    rotation angles minus the end-to-end angle; the L2 norm over joints.
    """
    h = np.asarray(sequence, dtype=float)
    if h.ndim != 3 or h.shape[-1] != 4:
        raise LossError("sequence must have shape (frames, joints, 4)")
    n = h.shape[0]
    if n < 2:
        raise LossError("the quaternion loss needs at least 2 frames")
    quat._check_unit(h, "H")
    if not grad:
        steps = quat.rotation_angle_between(h[:-1], h[1:])
        ends = quat.rotation_angle_between(h[0], h[-1])
        resid = np.sum(np.atleast_2d(steps), axis=0) - ends
        return float(np.linalg.norm(resid))
    gs, ga, gb = quat.rotation_angle_grad(h[:-1], h[1:])
    ge, gea, geb = quat.rotation_angle_grad(h[0], h[-1])
    resid = gs.sum(axis=0) - ge
    e = float(np.linalg.norm(resid))
    g = np.zeros_like(h)
    if e == 0.0:
        return e, g
    u = resid / e                                # (J,)
    g[:-1] += u[None, :, None] * ga
    g[1:] += u[None, :, None] * gb
    g[0] -= u[:, None] * gea
    g[-1] -= u[:, None] * geb
    return e, g


def loss_ts(lighted, betas, grad: bool = False):
    """Distance of per-frame lighted texture and shape to their sequence means."""
    c = np.asarray(lighted, dtype=float)
    b = np.asarray(betas, dtype=float)
    n = c.shape[0]
    if n < 1 or b.shape[0] != n:
        raise LossError("texture and shape sequences need the same nonzero length")
    c = c.reshape(n, -1)
    b = b.reshape(n, -1)
    total = 0.0
    grads = []
    for x in (c, b):
        dev = x - x.mean(axis=0)
        norms = np.linalg.norm(dev, axis=1)
        total += float(norms.sum())
        if grad:
            u = np.where(norms[:, None] > 0, dev / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
            # the mean's own dependence cancels: sum_i u_i is subtracted
            grads.append(u - u.mean(axis=0))
    if not grad:
        return total
    return total, grads[0].reshape(np.shape(lighted)), grads[1].reshape(np.shape(betas))
