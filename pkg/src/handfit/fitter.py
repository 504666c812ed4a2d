"""Direct per-sequence optimisation of hand parameters against the full objective.

Every frame owns its parameter blocks (theta, beta, scale, rot, trans,
texture, light) plus ``est2d``, the free 2D joint estimate tied to the
detections and to the projected joints.  Keypoint, consistency,
regularisation and video terms have analytic gradients.  The photometric
terms have analytic gradients for the appearance blocks and central
differences for the geometry blocks.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import quat
from .hand_model import (BONE_PAIRS, N_JOINTS, HandModel, HandParams, camera_points,
                         default_light, default_model, rodrigues)
from .optim import AdamConfig, AdamState, adam_step
from .render import CameraModel, lighted_texture, lighted_texture_vjp, project, rasterize

log = logging.getLogger(__name__)

BLOCKS = ("theta", "beta", "scale", "rot", "trans", "texture", "light", "est2d")
GEOM_BLOCKS = ("theta", "beta", "scale", "rot", "trans")
_GEOM_SLICES = {"theta": slice(0, 30), "beta": slice(30, 40), "scale": slice(40, 41),
                "rot": slice(41, 44), "trans": slice(44, 47)}
TRACE_FIELDS = ("iteration", "stage") + L.SUB_LOSSES + ("total", "best")


class DivergenceError(RuntimeError):
    def __init__(self, message, last_valid: list):
        super().__init__(message)
        self.last_valid = last_valid


@dataclass
class FitConfig:
    iterations: int = 300
    warmup: int = 100
    lr: float = 0.01
    decay_factor: float = 3.0
    decay_every: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    block_lr: dict = field(default_factory=lambda: {"trans": 0.1, "scale": 0.0, "est2d": 0.1})
    seed: int = 0
    quat_interval: int = 3
    quat_frames: int = 3
    photo_every: int = 5
    photo_blocks: tuple = ("scale", "rot", "trans")
    reuse_photo_grad: bool = True
    photo_steps: dict = field(default_factory=lambda: {
        "theta": 0.02, "beta": 0.2, "scale": 0.01, "rot": 0.01, "trans": 0.002})
    normalize_conf_sum: bool = False
    keypoint_scale: float = 1.0
    divergence: float = 1e6
    workers: int = 1

    def __post_init__(self):
        if self.quat_frames < 2:
            raise ValueError("quaternion window needs at least 2 frames")
        if self.quat_interval < 1:
            raise ValueError("quaternion frame interval must be >= 1")
        if self.iterations < 0 or self.warmup < 0:
            raise ValueError("iteration counts must be nonnegative")
        for b in self.photo_blocks:
            if b not in GEOM_BLOCKS:
                raise ValueError(f"unknown photometric gradient block {b!r}")
        self.photo_blocks = tuple(self.photo_blocks)
        self.adam()

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.decay_factor,
                          self.decay_every, dict(self.block_lr))

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class FrameData:
    """What the objective needs from one frame."""

    image: np.ndarray
    keypoints: L.Keypoints2D
    camera: CameraModel


@dataclass
class FitResult:
    params: list
    trace: list
    warmup_trace: list
    initial_video: dict | None = None
    final: dict | None = None


# ------------------------------------------------------------------ packing


def stack_params(params: list) -> dict:
    return {
        "theta": np.stack([p.theta for p in params]),
        "beta": np.stack([p.beta for p in params]),
        "scale": np.array([[p.scale] for p in params]),
        "rot": np.stack([p.rot for p in params]),
        "trans": np.stack([p.trans for p in params]),
        "texture": np.stack([p.texture for p in params]),
        "light": np.stack([p.light for p in params]),
    }


def unstack_params(P: dict) -> list:
    return [HandParams(P["theta"][i], P["beta"][i], float(P["scale"][i, 0]), P["rot"][i], P["trans"][i],
                       P["texture"][i].copy(), P["light"][i].copy()) for i in range(len(P["theta"]))]


def _geometry(P: dict, i: int) -> np.ndarray:
    return np.concatenate([P["theta"][i], P["beta"][i], P["scale"][i], P["rot"][i], P["trans"][i]])


def quat_windows(n_frames: int, interval: int, count: int) -> list:
    """Frame-index windows ``(i, i + interval, ..., i + (count - 1) * interval)``."""
    span = (count - 1) * interval
    return [tuple(range(i, i + span + 1, interval)) for i in range(n_frames - span)]


# ------------------------------------------------------------------ initialisation


def initial_params(frame: FrameData, model: HandModel | None = None, base_rot=(np.pi, 0.0, 0.0),
                   solve_pose: bool = True) -> HandParams:
    """Mean shape and unit scale; translation and depth from the keypoint spread.

    With ``solve_pose`` (perspective cameras) pose and global pose then come
    from a least-squares fit to the keypoints; otherwise the rest pose with
    rotation ``base_rot`` is used.  Texture is sampled from the image under
    the initial projection.
    """
    model = model or default_model()
    cam = frame.camera
    kp = frame.keypoints
    w = np.maximum(kp.conf, 1e-6)
    pts = kp.points * cam.size
    c2 = (w[:, None] * pts).sum(axis=0) / w.sum()
    r = rodrigues(base_rot)
    rest = model.rest_joints @ r.T
    c3 = rest.mean(axis=0)
    spread3 = np.sqrt(np.mean(np.sum((rest - c3)[:, :2] ** 2, axis=1)))
    spread2 = np.sqrt((w * np.sum((pts - c2) ** 2, axis=1)).sum() / w.sum())
    if cam.mode == "perspective":
        f = 0.5 * (cam.fx + cam.fy)
        z = f * spread3 / max(spread2, 1e-6)
        center = np.array([(c2[0] - cam.cx) * z / cam.fx, (c2[1] - cam.cy) * z / cam.fy, z])
        scale = 1.0
    else:
        scale = float(np.clip(spread2 / (cam.scale * spread3), *L.SCALE_RANGE))
        center = np.array([(c2[0] - cam.cx) / cam.scale, (c2[1] - cam.cy) / cam.scale, 0.5])
    trans = center - scale * c3
    theta, rot = np.zeros(30), np.asarray(base_rot, float)
    if solve_pose and cam.mode == "perspective":
        theta, rot, trans = keypoint_pose_init(frame, model, rot, trans)
    params = HandParams(theta, np.zeros(10), scale, rot, trans,
                        np.full((model.n_faces, 3), 0.5), default_light())
    params.texture = sample_texture(frame, params, model)
    return params


PALM_JOINTS = (0, 1, 5, 9, 13, 17)     # positions fixed by the global pose alone
_INIT_TURNS = ((0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _keypoint_residuals(frame, model, x, beta, joints, limit_weight=0.0, prior=0.0, jacobian=False):
    """Confidence-weighted 2D residuals of ``joints`` for x = (theta, rot, trans), scale 1."""
    geom = np.concatenate([x[:30], beta, [1.0], x[30:36]])
    dec = model.decode(geom[:30], beta, jacobian=jacobian, vertices=False)
    cj, jc = camera_points(dec.joints, geom, dec.d_joints)
    cam = frame.camera
    if cam.mode == "perspective" and np.any(cj[joints, 2] <= 1e-3):
        return (np.full(2 * len(joints), 1e3), None) if jacobian else np.full(2 * len(joints), 1e3)
    w = np.sqrt(frame.keypoints.conf[list(joints)])[:, None]
    if jacobian:
        uv, duv = project(cj[list(joints)], cam, jacobian=True)
    else:
        uv = project(cj[list(joints)], cam)
    res = [(w * (uv / cam.size - frame.keypoints.points[list(joints)])).ravel()]
    if jacobian:
        d = np.einsum("jab,jbp->jap", duv / cam.size[None, :, None], jc[list(joints)])
        cols = np.r_[0:30, 41:47]
        jac = [(w[:, :, None] * d[:, :, cols]).reshape(-1, 36)]
    if limit_weight > 0:
        ang, dang = model.joint_angles(x[:30], jacobian=True) if jacobian else (model.joint_angles(x[:30]), None)
        lo, hi = model.limits.lower, model.limits.upper
        over = np.maximum(ang - hi, 0) - np.maximum(lo - ang, 0)
        res.append(limit_weight * over.ravel())
        if jacobian:
            active = ((ang > hi) | (ang < lo)).ravel()[:, None]
            jl = np.zeros((30, 36))
            jl[:, :30] = limit_weight * active * dang.reshape(30, 30)
            jac.append(jl)
    if prior > 0:
        res.append(prior * x[:30])
        if jacobian:
            jp = np.zeros((30, 36))
            jp[:, :30] = prior * np.eye(30)
            jac.append(jp)
    r = np.concatenate(res)
    return (r, np.vstack(jac)) if jacobian else r


def keypoint_pose_init(frame: FrameData, model: HandModel, base_rot, trans0) -> tuple:
    """Global pose from the palm keypoints, then pose and global pose from all of them.

    The palm solve starts from several turns of ``base_rot``; each distinct
    palm solution (best two) seeds a full keypoint solve (joint limits as a hinge, a weak
    pull towards the rest pose) and the lowest cost wins.  Returns
    ``(theta, rot, trans)``.
    """
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    beta = np.zeros(10)
    base = Rotation.from_rotvec(base_rot)
    palm = []
    for turn in _INIT_TURNS:
        rot = (Rotation.from_rotvec(0.8 * np.asarray(turn, float)) * base).as_rotvec()
        x0 = np.concatenate([np.zeros(30), rot, trans0])
        fun = lambda y: _keypoint_residuals(frame, model, np.r_[np.zeros(30), y], beta, PALM_JOINTS)  # noqa: E731
        sol = least_squares(fun, x0[30:], method="lm", xtol=1e-10)
        palm.append((sol.cost, sol.x))
    palm.sort(key=lambda c: c[0])
    seeds = []
    for cost, y in palm:
        r = Rotation.from_rotvec(y[:3])
        if all((r * Rotation.from_rotvec(z[:3]).inv()).magnitude() > 0.2 for z in seeds):
            seeds.append(y)
    best = None
    joints = tuple(range(N_JOINTS))
    last = {}

    def both(x):
        if last.get("x") is None or not np.array_equal(last["x"], x):
            last["x"] = x.copy()
            last["rj"] = _keypoint_residuals(frame, model, x, beta, joints, 1.0, 0.01, jacobian=True)
        return last["rj"]

    for y in seeds[:2]:
        sol = least_squares(lambda x: both(x)[0], np.concatenate([np.zeros(30), y]), jac=lambda x: both(x)[1],
                            method="trf", max_nfev=100)
        if best is None or sol.cost < best.cost:
            best = sol
    return best.x[:30].copy(), best.x[30:33].copy(), best.x[33:36].copy()


def sample_texture(frame: FrameData, params: HandParams, model: HandModel) -> np.ndarray:
    dec = model.decode(params.theta, params.beta)
    verts, _ = camera_points(dec.vertices, params.geometry)
    cent = verts[model.faces].mean(axis=1)
    if frame.camera.mode == "perspective":
        cent[:, 2] = np.maximum(cent[:, 2], 1e-3)
    uv = project(cent, frame.camera)
    h, w = frame.image.shape[:2]
    px = np.clip(np.floor(uv[:, 0]).astype(int), 0, w - 1)
    py = np.clip(np.floor(uv[:, 1]).astype(int), 0, h - 1)
    return frame.image[py, px].astype(float)


# ------------------------------------------------------------------ objective


class SequenceObjective:
    """Loss values and gradients for all frames of one sequence."""

    def __init__(self, frames: list, weights: L.LossWeights, config: FitConfig,
                 model: HandModel | None = None):
        self.model = model or default_model()
        self.frames = frames
        self.weights = weights
        self.config = config
        self.eff = weights.effective()
        k = config.keypoint_scale
        self._det = [L.Keypoints2D(f.keypoints.points * k, f.keypoints.conf) for f in frames]
        self.windows = quat_windows(len(frames), config.quat_interval, config.quat_frames)
        if not self.windows and len(frames) >= config.quat_frames:
            self.windows = quat_windows(len(frames), 1, config.quat_frames)
            log.warning("sequence too short for frame interval %d; using consecutive frames",
                        config.quat_interval)
        # last finite-difference photometric geometry gradient per frame
        self._photo_cache = np.zeros((len(frames), 47))

    # per-frame ------------------------------------------------------------

    def _photo_value(self, i, geometry, texture, light, grad=False):
        fr = self.frames[i]
        m = self.model
        dec = m.decode(geometry[:30], geometry[30:40])
        verts, _ = camera_points(dec.vertices, geometry)
        lit, raw = lighted_texture(texture, light, m.canonical_normals)
        out = rasterize(verts, m.faces, lit, fr.camera)
        conf_sum = float(fr.keypoints.conf.sum())
        if not grad:
            pix = L.loss_pixel(fr.image, out, conf_sum, self.config.normalize_conf_sum)
            ss = L.loss_ssim(fr.image, out)
            return pix, ss
        pix, g_pix = L.loss_pixel(fr.image, out, conf_sum, self.config.normalize_conf_sum, grad=True)
        ss, g_ss = L.loss_ssim(fr.image, out, grad=True)
        g_color = self.eff["pixel"] * g_pix + self.eff["ssim"] * g_ss
        # colour = clip(max(raw, 0), 0, 1) of the visible face
        mask = out.silhouette
        fidx = out.face_index[mask]
        g_face = np.zeros_like(raw)
        for c in range(3):
            g_face[:, c] = np.bincount(fidx, weights=g_color[..., c][mask], minlength=m.n_faces)
        g_face *= (raw > 0.0) & (raw < 1.0)
        g_tex, g_light = lighted_texture_vjp(texture, light, m.canonical_normals, g_face)
        return pix, ss, g_tex, g_light

    def frame_terms(self, P: dict, i: int, grad: bool = True, photo_geometry: bool = False):
        m = self.model
        cfg = self.config
        fr = self.frames[i]
        k = cfg.keypoint_scale
        geom = _geometry(P, i)
        dec = m.decode(geom[:30], geom[30:40], jacobian=grad, vertices=False)
        cj, jc = camera_points(dec.joints, geom, dec.d_joints)
        size = fr.camera.size
        if grad:
            uv, duv = project(cj, fr.camera, jacobian=True)
            dproj = k * np.einsum("jab,jbp->jap", duv / size[None, :, None], jc)
        else:
            uv = project(cj, fr.camera)
        proj = k * uv / size
        est = k * P["est2d"][i]
        det = self._det[i]
        vals = {}
        texture, light = P["texture"][i], P["light"][i]
        if not grad:
            vals["loc"] = L.loss_loc(det, proj)
            vals["ori"] = L.loss_ori(det, proj)
            vals["2d"] = L.loss_2d(det, est)
            vals["cons"] = L.loss_cons(proj, est)
            _, parts = L.loss_regu(geom[:30], geom[30:40], geom[40], texture, m.limits, m, self.weights)
            vals.update(parts)
            vals["pixel"], vals["ssim"] = self._photo_value(i, geom, texture, light)
            return vals, None
        e = self.eff
        vals["loc"], g_loc = L.loss_loc(det, proj, grad=True)
        vals["ori"], g_ori = L.loss_ori(det, proj, BONE_PAIRS, grad=True)
        vals["2d"], g_2d = L.loss_2d(det, est, grad=True)
        vals["cons"], g_cons = L.loss_cons(proj, est, grad=True)
        g_proj = e["loc"] * g_loc + e["ori"] * g_ori + e["cons"] * g_cons
        g_geom = np.einsum("ja,jap->p", g_proj, dproj)
        g_est = k * (e["2d"] * g_2d - e["cons"] * g_cons)
        _, parts, rg = L.loss_regu(geom[:30], geom[30:40], geom[40], texture, m.limits, m,
                                   self.weights, grad=True)
        vals.update(parts)
        # loss_regu returns gradients of E_regu; scale by its outer weight
        wr = self.weights.w_3d * self.weights.w_regu
        g_geom[:30] += wr * rg["theta"]
        g_geom[30:40] += wr * rg["beta"]
        g_geom[40] += wr * rg["scale"]
        g_tex = wr * rg["texture"]
        pix, ss, gt_photo, gl_photo = self._photo_value(i, geom, texture, light, grad=True)
        vals["pixel"], vals["ssim"] = pix, ss
        g_tex = g_tex + gt_photo
        g_light = gl_photo
        if photo_geometry and (e["pixel"] > 0 or e["ssim"] > 0):
            self._photo_cache[i] = self._photo_geometry_grad(i, geom, texture, light)
        if photo_geometry or cfg.reuse_photo_grad:
            g_geom += self._photo_cache[i]
        grads = {"geom": g_geom, "texture": g_tex, "light": g_light, "est2d": g_est}
        return vals, grads

    def _photo_geometry_grad(self, i, geom, texture, light):
        g = np.zeros_like(geom)
        e = self.eff
        for block in self.config.photo_blocks:
            h = self.config.photo_steps.get(block, 1e-3)
            sl = _GEOM_SLICES[block]
            for j in range(sl.start, sl.stop):
                xp, xm = geom.copy(), geom.copy()
                xp[j] += h
                xm[j] -= h
                if j == 40:
                    xm[j] = max(xm[j], 1e-6)
                pp, sp = self._photo_value(i, xp, texture, light)
                pm, sm = self._photo_value(i, xm, texture, light)
                g[j] = (e["pixel"] * (pp - pm) + e["ssim"] * (sp - sm)) / (xp[j] - xm[j])
        return g

    # sequence -------------------------------------------------------------

    def video_terms(self, P: dict, grad: bool = True):
        """Mean quaternion and T&S losses over the windows and their block gradients."""
        n = len(self.frames)
        m = self.model
        if not self.windows:
            z = {b: np.zeros_like(P[b]) for b in ("theta", "rot", "texture", "light", "beta")}
            return 0.0, 0.0, z
        vecs = np.concatenate([P["rot"][:, None, :], P["theta"].reshape(n, 10, 3)], axis=1)
        if grad:
            H, dH = quat.quat_from_rotvec_jac(vecs)        # (n, 11, 4), (n, 11, 4, 3)
        else:
            H = quat.quat_from_rotvec(vecs)
        lit = [lighted_texture(P["texture"][i], P["light"][i], m.canonical_normals)[1] for i in range(n)]
        lit = np.stack(lit)
        nw = len(self.windows)
        e_q = e_ts = 0.0
        g_H = np.zeros_like(H)
        g_lit = np.zeros_like(lit)
        g_beta = np.zeros_like(P["beta"])
        for w in self.windows:
            idx = list(w)
            if grad:
                q, gq = L.loss_quat(H[idx], grad=True)
                t, gl, gb = L.loss_ts(lit[idx], P["beta"][idx], grad=True)
                g_H[idx] += gq / nw
                g_lit[idx] += gl / nw
                g_beta[idx] += gb / nw
            else:
                q = L.loss_quat(H[idx])
                t = L.loss_ts(lit[idx], P["beta"][idx])
            e_q += q / nw
            e_ts += t / nw
        if not grad:
            return e_q, e_ts, None
        g_vec = np.einsum("nja,njac->njc", g_H, dH)
        g_tex = np.zeros_like(P["texture"])
        g_light = np.zeros_like(P["light"])
        for i in range(n):
            if np.any(g_lit[i]):
                g_tex[i], g_light[i] = lighted_texture_vjp(P["texture"][i], P["light"][i],
                                                           m.canonical_normals, g_lit[i])
        return e_q, e_ts, {"rot": g_vec[:, 0], "theta": g_vec[:, 1:].reshape(n, 30),
                           "texture": g_tex, "light": g_light, "beta": g_beta}

    def evaluate(self, P: dict, mode: str = "video", grad: bool = True, photo_geometry: bool = False):
        """Sub-loss means, total objective, and block gradients of the total."""
        n = len(self.frames)
        run = lambda i: self.frame_terms(P, i, grad, photo_geometry)  # noqa: E731
        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as ex:
                results = list(ex.map(run, range(n)))
        else:
            results = [run(i) for i in range(n)]
        vals = {k: 0.0 for k in L.SUB_LOSSES}
        for fv, _ in results:   # fixed reduction order
            for k2, v in fv.items():
                vals[k2] += v / n
        e_q, e_ts, vg = self.video_terms(P, grad)
        vals["quat"], vals["ts"] = e_q, e_ts
        total = L.total_objective(vals, self.weights, mode)
        if not grad:
            return vals, total, None
        G = {b: np.zeros_like(P[b]) for b in BLOCKS}
        for i, (_, g) in enumerate(results):
            for b in GEOM_BLOCKS:
                G[b][i] += g["geom"][_GEOM_SLICES[b]] / n
            G["texture"][i] += g["texture"] / n
            G["light"][i] += g["light"] / n
            G["est2d"][i] += g["est2d"] / n
        if mode == "video":
            wq, wt = self.weights.w_quat, self.weights.w_ts
            G["rot"] += wq * vg["rot"]
            G["theta"] += wq * vg["theta"]
            G["texture"] += wt * vg["texture"]
            G["light"] += wt * vg["light"]
            G["beta"] += wt * vg["beta"]
        return vals, total, G


# ------------------------------------------------------------------ driver


def _copy(P):
    return {k: v.copy() for k, v in P.items()}


def _run_stage(obj: SequenceObjective, P: dict, mode: str, iters: int, cfg: FitConfig, stage: str,
               start_iter: int = 0, callback=None):
    state = AdamState()
    adam = cfg.adam()
    trace = []
    best_total, best_P = np.inf, _copy(P)
    last_valid = _copy(P)
    for it in range(iters + 1):
        photo_geo = cfg.photo_every > 0 and it % cfg.photo_every == 0 and bool(cfg.photo_blocks)
        final = it == iters
        vals, total, G = obj.evaluate(P, mode, grad=not final, photo_geometry=photo_geo and not final)
        if not np.isfinite(total) or total > cfg.divergence:
            raise DivergenceError(f"{stage} stage diverged at iteration {it} (total = {total:.4g})",
                                  unstack_params(last_valid))
        last_valid = _copy(P)
        if total < best_total:
            best_total, best_P = total, _copy(P)
        row = {"iteration": start_iter + it, "stage": stage, **vals, "total": total, "best": best_total}
        trace.append(row)
        if callback:
            callback(row)
        if final:
            break
        P, state = adam_step(P, G, state, adam)
        P["scale"] = np.maximum(P["scale"], 1e-3)
    return best_P, trace


def fit_sequence(frames: list, weights: L.LossWeights | None = None, config: FitConfig | None = None,
                 init: list | None = None, mode: str = "video", model: HandModel | None = None,
                 callback=None) -> FitResult:
    """Fit every frame of a sequence.

    A warm-up stage optimises the image-mode objective; in video mode a second
    stage then adds the quaternion and T&S terms.  Each stage returns its
    best-so-far parameters.
    """
    weights = weights or L.LossWeights()
    config = config or FitConfig()
    model = model or default_model()
    if mode not in ("image", "video"):
        raise ValueError(f"mode must be 'image' or 'video', got {mode!r}")
    if init is None:
        init = [initial_params(f, model) for f in frames]
    if len(init) != len(frames):
        raise ValueError("need one initial parameter set per frame")
    obj = SequenceObjective(frames, weights, config, model)
    P = stack_params(init)
    P["est2d"] = np.stack([f.keypoints.points for f in frames])
    if mode == "image":
        P, trace = _run_stage(obj, P, "image", config.warmup + config.iterations, config, "image",
                              callback=callback)
        return FitResult(_unpack(P), trace, [], None, trace[-1] if trace else None)
    P, warm = _run_stage(obj, P, "image", config.warmup, config, "warmup", callback=callback)
    P, trace = _run_stage(obj, P, "video", config.iterations, config, "video",
                          start_iter=config.warmup + 1, callback=callback)
    return FitResult(_unpack(P), trace, warm, trace[0], trace[-1])


def _unpack(P):
    params = unstack_params(P)
    for p, e in zip(params, P["est2d"]):
        p.est2d = e
    return params


def write_trace(path, trace: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def camera_joints(params: HandParams, model: HandModel | None = None, vertices: bool = False):
    model = model or default_model()
    dec = model.decode(params.theta, params.beta, vertices=vertices)
    j, _ = camera_points(dec.joints, params.geometry)
    if not vertices:
        return j
    v, _ = camera_points(dec.vertices, params.geometry)
    return j, v


def sequence_quat_loss(params: list, interval: int = 3, count: int = 3) -> float:
    """Mean quaternion loss over the frame windows of fitted parameters."""
    wins = quat_windows(len(params), interval, count)
    if not wins:
        return 0.0
    H = np.stack([quat.pose_to_quaternions(p.theta, p.rot) for p in params])
    return float(np.mean([L.loss_quat(H[list(w)]) for w in wins]))
