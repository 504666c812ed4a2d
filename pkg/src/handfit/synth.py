"""Synthetic hand sequences: smooth ground-truth motion rendered to images and keypoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import io
from .hand_model import (HandModel, HandParams, apply_global_transform, compose_zyx,
                         default_light, default_model)
from .losses import Keypoints2D
from .render import CameraModel, project, render_hand

BASE_ROT = np.array([np.pi, 0.0, 0.0])   # fingers up, palm towards the camera
VIEW = np.array([0.0, 1.0, 0.0])         # extra turn about the camera y axis; oblique views limit depth ambiguity
BACKGROUND = np.array([0.12, 0.22, 0.32])
SKIN = np.array([0.80, 0.58, 0.47])


@dataclass
class SyntheticFrame:
    params: HandParams
    image: np.ndarray
    keypoints: Keypoints2D
    joints: np.ndarray       # camera space, metres
    vertices: np.ndarray     # camera space, metres


def _angles_to_theta(model: HandModel, angles) -> np.ndarray:
    mats = [model.bone_frames[a] @ compose_zyx(angles[a]) @ model.bone_frames[a].T for a in range(10)]
    return Rotation.from_matrix(np.array(mats)).as_rotvec().ravel()


def trajectory(n_frames: int, rng, fps: float = 30.0, model: HandModel | None = None, view=VIEW):
    """Smooth sinusoidal pose, rotation and translation per frame (rotation is axis-angle)."""
    model = model or default_model()
    t = np.arange(n_frames) / fps
    lim_lo, lim_hi = model.limits.lower, model.limits.upper
    freq = rng.uniform(0.4, 0.9, size=(10, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(10, 3))
    center = np.zeros((10, 3))
    amp = np.zeros((10, 3))
    center[:, 2] = rng.uniform(0.3, 0.7, 10)        # flexion
    amp[:, 2] = rng.uniform(0.25, 0.45, 10)
    amp[:, 0] = rng.uniform(0.05, 0.15, 10)         # abduction
    amp[:, 1] = rng.uniform(0.02, 0.06, 10)         # twist
    thetas, rots, trans = [], [], []
    base = Rotation.from_rotvec(view) * Rotation.from_rotvec(BASE_ROT)
    wob_f = rng.uniform(0.3, 0.6, 3)
    wob_p = rng.uniform(0, 2 * np.pi, 3)
    for ti in t:
        ang = center + amp * np.sin(2 * np.pi * freq * ti + phase)
        ang = np.clip(ang, lim_lo + 1e-3, lim_hi - 1e-3)
        thetas.append(_angles_to_theta(model, ang))
        wob = 0.25 * np.sin(2 * np.pi * wob_f * ti + wob_p)
        rots.append((Rotation.from_rotvec(wob) * base).as_rotvec())
        trans.append([0.012 * np.sin(2 * np.pi * 0.5 * ti), 0.085 + 0.01 * np.cos(2 * np.pi * 0.4 * ti),
                      0.5 + 0.03 * np.sin(2 * np.pi * 0.3 * ti)])
    return np.array(thetas), np.array(rots), np.array(trans)


def make_sequence(n_frames: int = 30, seed: int = 0, cam: CameraModel | None = None,
                  noise: float = 0.005, fps: float = 30.0, model: HandModel | None = None,
                  view=VIEW, beta_sd: float = 0.1, quantize: bool = True):
    """Ground-truth sequence with rendered images and noisy normalized keypoints (conf 1).

    Shape is drawn once per sequence with per-coordinate S.D. ``beta_sd``.
    Images are quantised to 8 bits unless ``quantize`` is off.
    """
    model = model or default_model()
    cam = cam or CameraModel()
    rng = np.random.default_rng(seed)
    thetas, rots, trans = trajectory(n_frames, rng, fps, model, view)
    beta = rng.normal(0.0, beta_sd, 10)
    texture = np.clip(SKIN + rng.normal(0.0, 0.04, (model.n_faces, 3)), 0.0, 1.0)
    light = default_light()
    light[8:11] = [0.2, -0.3, -1.0]
    light[8:11] /= np.linalg.norm(light[8:11])
    frames = []
    for i in range(n_frames):
        params = HandParams(thetas[i], beta, 1.0, rots[i], trans[i], texture, light)
        dec = model.decode(params.theta, params.beta)
        mesh, joints = apply_global_transform(model.mesh(dec.vertices), dec.joints, 1.0, rots[i], trans[i])
        out = render_hand(mesh.vertices, model.faces, texture, light, model.canonical_normals, cam)
        image = np.where(out.silhouette[..., None], out.color, BACKGROUND)
        if quantize:
            image = io.to_uint8(image).astype(float) / 255.0
        uv = project(joints, cam) / cam.size
        uv = uv + rng.normal(0.0, noise, uv.shape)
        frames.append(SyntheticFrame(params, image, Keypoints2D(uv, np.ones(21)), joints, mesh.vertices))
    return frames


def write_sequence(out_dir, frames, cam: CameraModel, seq_id: str = "synth000") -> Path:
    """Write images, keypoints, ground truth and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / seq_id).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(frames):
        stem = f"{seq_id}/{i:05d}"
        io.write_image(out / f"{stem}.ppm", fr.image)
        (out / f"{stem}_kp.json").write_text(json.dumps(io.keypoints_to_json(fr.keypoints, cam.width, cam.height)))
        gt = {"params": fr.params.to_dict(), "joints": fr.joints.tolist(), "vertices": fr.vertices.tolist()}
        (out / f"{stem}_gt.json").write_text(json.dumps(gt))
        entries.append({"index": i, "image": f"{stem}.ppm", "keypoints": f"{stem}_kp.json",
                        "camera": cam.to_dict(), "ground_truth": f"{stem}_gt.json"})
    manifest = out / "manifest.json"
    io.write_manifest(manifest, {seq_id: entries}, description="synthetic hand sequence")
    return manifest


def load_ground_truth(path):
    d = json.loads(Path(path).read_text())
    return HandParams.from_dict(d["params"]), np.array(d["joints"]), np.array(d["vertices"])
