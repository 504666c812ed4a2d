"""Camera projection and a z-buffered flat-shading triangle rasterizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_NEAR = 1e-6


class BehindCameraError(ValueError):
    def __init__(self, index: int, z: float):
        super().__init__(f"point {index} is behind the camera (z = {z:.3g})")
        self.index = index


@dataclass(frozen=True)
class CameraModel:
    """Pinhole (``perspective``) or scaled orthographic (``orthogonal``) camera.

    Pixel coordinates: u to the right, v down, pixel (0, 0) covers [0, 1)^2.
    """

    width: int = 64
    height: int = 64
    fx: float = 110.0
    fy: float = 110.0
    cx: float = 32.0
    cy: float = 32.0
    mode: str = "perspective"
    scale: float = 220.0  # orthogonal: pixels per metre

    def __post_init__(self):
        if self.mode not in ("perspective", "orthogonal"):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.mode == "orthogonal" and not self.scale > 0:
            raise ValueError("orthogonal scale must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")

    @property
    def size(self) -> np.ndarray:
        return np.array([self.width, self.height], dtype=float)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("width", "height", "fx", "fy", "cx", "cy", "mode", "scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**{k: d[k] for k in ("width", "height", "fx", "fy", "cx", "cy", "mode", "scale") if k in d})


def project(points, cam: CameraModel, jacobian: bool = False):
    """Camera-space points ``(n, 3)`` to pixels ``(n, 2)``; optionally ``d uv / d xyz`` ``(n, 2, 3)``."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if cam.mode == "orthogonal":
        uv = cam.scale * p[:, :2] + np.array([cam.cx, cam.cy])
        if not jacobian:
            return uv
        jac = np.zeros((len(p), 2, 3))
        jac[:, 0, 0] = jac[:, 1, 1] = cam.scale
        return uv, jac
    z = p[:, 2]
    bad = np.flatnonzero(~(z > Z_NEAR))
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z[bad[0]]))
    inv = 1.0 / z
    uv = np.stack([cam.fx * p[:, 0] * inv + cam.cx, cam.fy * p[:, 1] * inv + cam.cy], axis=1)
    if not jacobian:
        return uv
    jac = np.zeros((len(p), 2, 3))
    jac[:, 0, 0] = cam.fx * inv
    jac[:, 0, 2] = -cam.fx * p[:, 0] * inv**2
    jac[:, 1, 1] = cam.fy * inv
    jac[:, 1, 2] = -cam.fy * p[:, 1] * inv**2
    return uv, jac


def split_light(light):
    """Unpack the 11 lighting scalars; the direction is renormalised."""
    light = np.asarray(light, dtype=float)
    amb, amb_c, dif, dif_c, direction = light[0], light[1:4], light[4], light[5:8], light[8:11]
    n = np.linalg.norm(direction)
    unit = direction / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    return amb, amb_c, dif, dif_c, unit, n


def shading(light, normals):
    """Per-face RGB light factor ``(F, 3)`` and the clamped cosine ``(F,)``."""
    amb, amb_c, dif, dif_c, unit, _ = split_light(light)
    cos = np.maximum(np.asarray(normals) @ unit, 0.0)
    return amb * amb_c + cos[:, None] * (dif * dif_c), cos


def lighted_texture(texture, light, normals):
    """Ambient plus directional lighting of per-face colours.

    Returns ``(clamped, raw)``: ``raw`` is the plain product used by the
    losses, ``clamped`` is limited below at 0 for display.
    """
    shade, _ = shading(light, normals)
    raw = shade * np.asarray(texture, dtype=float)
    return np.maximum(raw, 0.0), raw


def lighted_texture_vjp(texture, light, normals, grad_out):
    """Pull a gradient on the raw lighted texture back to (texture, light)."""
    texture = np.asarray(texture, dtype=float)
    amb, amb_c, dif, dif_c, unit, dn = split_light(light)
    raw_cos = np.asarray(normals) @ unit
    cos = np.maximum(raw_cos, 0.0)
    shade = amb * amb_c + cos[:, None] * (dif * dif_c)
    g_tex = grad_out * shade
    gc = grad_out * texture                      # d/d shade
    g_light = np.zeros(11)
    g_light[0] = np.sum(gc * amb_c)
    g_light[1:4] = amb * gc.sum(axis=0)
    g_light[4] = np.sum(gc * cos[:, None] * dif_c)
    g_light[5:8] = dif * (gc * cos[:, None]).sum(axis=0)
    g_cos = (gc @ (dif * dif_c)) * (raw_cos > 0.0)
    if dn > 1e-12:
        g_unit = g_cos @ np.asarray(normals)
        g_light[8:11] = (g_unit - (g_unit @ unit) * unit) / dn
    return g_tex, g_light


@dataclass
class RenderOutput:
    silhouette: np.ndarray   # (H, W) bool
    color: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray        # (H, W), +inf on background
    face_index: np.ndarray   # (H, W) int, -1 on background


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_edge(ax, ay, bx, by):
    """Tie rule for pixels exactly on an edge of a positively wound triangle.

    Two triangles sharing an edge walk it in opposite directions, so exactly
    one of them claims it.
    """
    dy = by - ay
    return (dy > 0) | ((dy == 0) & (bx - ax < 0))


def coverage_candidates(uv, faces, width, height):
    """Covered (face, pixel) pairs with screen-space barycentrics.

    Returns ``face, px, py, bary (k, 3)`` for every pixel centre inside a
    non-degenerate triangle.
    """
    faces = np.asarray(faces, dtype=np.int64)
    empty = (np.zeros(0, dtype=np.int64),) * 3 + (np.zeros((0, 3)),)
    if faces.size == 0:
        return empty
    tri = uv[faces]                                 # (F, 3, 2)
    x0, y0 = tri[:, 0, 0], tri[:, 0, 1]
    x1, y1 = tri[:, 1, 0], tri[:, 1, 1]
    x2, y2 = tri[:, 2, 0], tri[:, 2, 1]
    area = _edge(x0, y0, x1, y1, x2, y2)
    # flip negatively wound faces so all edge tests read ">= 0 inside"
    flip = area < 0
    x1, x2 = np.where(flip, x2, x1), np.where(flip, x1, x2)
    y1, y2 = np.where(flip, y2, y1), np.where(flip, y1, y2)
    area = np.abs(area)
    lo_x = np.clip(np.ceil(np.min(tri[:, :, 0], axis=1) - 0.5), 0, width).astype(np.int64)
    hi_x = np.clip(np.floor(np.max(tri[:, :, 0], axis=1) - 0.5), -1, width - 1).astype(np.int64)
    lo_y = np.clip(np.ceil(np.min(tri[:, :, 1], axis=1) - 0.5), 0, height).astype(np.int64)
    hi_y = np.clip(np.floor(np.max(tri[:, :, 1], axis=1) - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(hi_x - lo_x + 1, 0)
    ny = np.maximum(hi_y - lo_y + 1, 0)
    count = np.where(area > 0, nx * ny, 0)
    total = int(count.sum())
    if total == 0:
        return empty
    face = np.repeat(np.arange(len(faces)), count)
    start = np.cumsum(count) - count
    local = np.arange(total) - start[face]
    px = lo_x[face] + local % nx[face]
    py = lo_y[face] + local // nx[face]
    cx, cy = px + 0.5, py + 0.5
    ax, ay = x0[face], y0[face]
    bx, by = x1[face], y1[face]
    qx, qy = x2[face], y2[face]
    e0 = _edge(bx, by, qx, qy, cx, cy)   # opposite vertex 0
    e1 = _edge(qx, qy, ax, ay, cx, cy)   # opposite vertex 1
    e2 = _edge(ax, ay, bx, by, cx, cy)   # opposite vertex 2
    inside = (
        ((e0 > 0) | ((e0 == 0) & _owns_edge(bx, by, qx, qy)))
        & ((e1 > 0) | ((e1 == 0) & _owns_edge(qx, qy, ax, ay)))
        & ((e2 > 0) | ((e2 == 0) & _owns_edge(ax, ay, bx, by)))
    )
    face, px, py = face[inside], px[inside], py[inside]
    a = area[face]
    bary = np.stack([e0[inside], e1[inside], e2[inside]], axis=1) / a[:, None]
    # undo the flip so barycentrics refer to the original vertex order
    fl = flip[face]
    bary[fl] = bary[fl][:, [0, 2, 1]]
    return face, px, py, bary


def rasterize(vertices, faces, face_colors, cam: CameraModel) -> RenderOutput:
    """Render camera-space triangles with one colour per face.

    Visibility is resolved per pixel centre by the smallest interpolated depth
    (perspective-correct); equal depths go to the lower face index.  No
    back-face culling.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    h, w = cam.height, cam.width
    sil = np.zeros((h, w), dtype=bool)
    color = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    fidx = np.full((h, w), -1, dtype=np.int64)
    if faces.size == 0:
        return RenderOutput(sil, color, depth, fidx)
    used = np.unique(faces)
    uv = np.zeros((len(v), 2))
    uv[used] = project(v[used], cam)
    face, px, py, bary = coverage_candidates(uv, faces, w, h)
    if face.size == 0:
        return RenderOutput(sil, color, depth, fidx)
    z = v[faces[face], 2]                        # (k, 3)
    # interpolate relative to the first vertex so flat faces get their depth exactly
    if cam.mode == "perspective":
        iz = 1.0 / z
        zc = 1.0 / (iz[:, 0] + bary[:, 1] * (iz[:, 1] - iz[:, 0]) + bary[:, 2] * (iz[:, 2] - iz[:, 0]))
    else:
        zc = z[:, 0] + bary[:, 1] * (z[:, 1] - z[:, 0]) + bary[:, 2] * (z[:, 2] - z[:, 0])
    pix = py * w + px
    order = np.lexsort((face, zc, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    flat = pix[win]
    sil.flat[flat] = True
    depth.flat[flat] = zc[win]
    fidx.flat[flat] = face[win]
    cols = np.clip(np.asarray(face_colors, dtype=float)[face[win]], 0.0, 1.0)
    color.reshape(-1, 3)[flat] = cols
    return RenderOutput(sil, color, depth, fidx)


def render_hand(mesh_vertices, faces, texture, light, normals, cam: CameraModel) -> RenderOutput:
    """Rasterize a camera-space hand with its lighted per-face texture."""
    lit, _ = lighted_texture(texture, light, normals)
    return rasterize(mesh_vertices, faces, lit, cam)
