"""Silhouette rendering of triangle meshes, D-mask sets and mask retrieval.

Pixels have their centres at integer coordinates: column ``u`` and row ``v``
cover the point ``(u, v)`` of the pinhole image plane.  A pixel is
foreground when that centre lies inside (or on the edge of) any projected
triangle.  The default camera for an ``S x S`` render has ``fx = fy = S`` and
the principal point at the image centre ``((S - 1) / 2, (S - 1) / 2)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import formats
from .binning import azimuth_spec, elevation_spec
from .errors import ConfigurationError, MidposeError, RenderError
from .geometry import CameraIntrinsics, ViewAngles, view_camera

DMASK_SIZE = 128
FRAME_FILL = 0.8
DEFAULT_SCALES = (0.8, 1.0, 1.25)


@dataclass
class MeshModel:
    id: str
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ConfigurationError(f"mesh {self.id}: face index out of range")

    def center(self):
        """Centre of the vertex bounding box."""
        return (self.vertices.min(axis=0) + self.vertices.max(axis=0)) / 2.0

    def radius(self):
        return float(np.linalg.norm(self.vertices - self.center(), axis=1).max())

    def is_solid(self):
        if len(self.vertices) < 4:
            return False
        sv = np.linalg.svd(self.vertices - self.vertices.mean(axis=0), compute_uv=False)
        return bool(sv[2] > 1e-9 * sv[0])


@dataclass
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ConfigurationError("mask must be a 2-D array")

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def area(self):
        return int(self.bits.sum())

    def mirror(self):
        """Left-right flip."""
        return Mask(self.bits[:, ::-1])

    def __eq__(self, other):
        return isinstance(other, Mask) and self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits))


@dataclass
class DmaskSet:
    mesh_id: str
    masks: list  # masks[az_bin][el_bin]
    az_spec: object = field(default_factory=azimuth_spec)
    el_spec: object = field(default_factory=elevation_spec)

    def __post_init__(self):
        if len(self.masks) != self.az_spec.n_bins or any(len(r) != self.el_spec.n_bins for r in self.masks):
            raise ConfigurationError(f"D-mask grid for {self.mesh_id} is not "
                                     f"{self.az_spec.n_bins}x{self.el_spec.n_bins}")

    def __len__(self):
        return sum(len(r) for r in self.masks)

    def get(self, az_bin, el_bin):
        return self.masks[az_bin][el_bin]

    def save(self, root):
        d = Path(root) / self.mesh_id
        d.mkdir(parents=True, exist_ok=True)
        for i, row in enumerate(self.masks):
            for j, m in enumerate(row):
                formats.save_mask(d / f"az{i}_el{j}.pgm", m.bits)

    @classmethod
    def load(cls, root, mesh_id, az_spec=None, el_spec=None):
        az_spec = az_spec or azimuth_spec()
        el_spec = el_spec or elevation_spec()
        d = Path(root) / mesh_id
        masks = [[Mask(formats.load_mask_bits(d / f"az{i}_el{j}.pgm")) for j in range(el_spec.n_bins)]
                 for i in range(az_spec.n_bins)]
        return cls(mesh_id, masks, az_spec, el_spec)


def default_intrinsics(size=DMASK_SIZE):
    c = (size - 1) / 2.0
    return CameraIntrinsics(float(size), float(size), c, c, size, size)


def fit_distance(mesh, K):
    """Camera distance at which the bounding sphere spans 80% of the image height."""
    half = math.atan(FRAME_FILL * K.height / 2.0 / K.fy)
    return mesh.radius() / math.sin(half)


def _project(mesh, view, K, distance):
    cam = view_camera(view, distance, mesh.center())
    pc = cam.apply(mesh.vertices)
    if np.any(pc[:, 2] <= 0):
        raise RenderError(f"mesh {mesh.id}: vertices behind the camera")
    uv = np.stack([K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy], axis=1)
    return pc, uv


def _triangles(mesh, uv, width, height):
    """Yield (face index, pixel rows, pixel cols, barycentrics) of covered pixel centres."""
    for fi, (a, b, c) in enumerate(mesh.faces):
        p0, p1, p2 = uv[a], uv[b], uv[c]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        lo = np.floor(np.minimum(np.minimum(p0, p1), p2)).astype(int)
        hi = np.ceil(np.maximum(np.maximum(p0, p1), p2)).astype(int)
        u0, v0 = max(lo[0], 0), max(lo[1], 0)
        u1, v1 = min(hi[0], width - 1), min(hi[1], height - 1)
        if u0 > u1 or v0 > v1:
            continue
        vs, us = np.mgrid[v0:v1 + 1, u0:u1 + 1]
        # edge functions, normalised by the signed area -> barycentrics
        w0 = ((p2[0] - p1[0]) * (vs - p1[1]) - (p2[1] - p1[1]) * (us - p1[0])) / area
        w1 = ((p0[0] - p2[0]) * (vs - p2[1]) - (p0[1] - p2[1]) * (us - p2[0])) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if inside.any():
            yield fi, vs[inside], us[inside], np.stack([w0[inside], w1[inside], w2[inside]], axis=1)


def render_silhouette(mesh, view, K=None, out_size=DMASK_SIZE, distance=None):
    """Binary silhouette of ``mesh`` seen from ``view`` (no depth buffer needed)."""
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise RenderError(f"mesh {mesh.id} is empty")
    K = K or default_intrinsics(out_size)
    if distance is None:
        distance = fit_distance(mesh, K)
    _, uv = _project(mesh, view, K, distance)
    bits = np.zeros((K.height, K.width), dtype=bool)
    for _, vs, us, _ in _triangles(mesh, uv, K.width, K.height):
        bits[vs, us] = True
    return Mask(bits)


LIGHT_DIR = np.array([0.3, -0.6, -0.74])  # camera frame, towards the light


def render_surface(mesh, view, K=None, out_size=DMASK_SIZE, distance=None):
    """Depth-buffered render returning (mask, camera-frame normals HxWx3, shading HxW).

    Normals are flat per face and oriented towards the camera; shading is
    Lambertian under a fixed directional light.  Background pixels are zero.
    """
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise RenderError(f"mesh {mesh.id} is empty")
    K = K or default_intrinsics(out_size)
    if distance is None:
        distance = fit_distance(mesh, K)
    pc, uv = _project(mesh, view, K, distance)
    zbuf = np.full((K.height, K.width), np.inf)
    normals = np.zeros((K.height, K.width, 3))
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    for fi, vs, us, bary in _triangles(mesh, uv, K.width, K.height):
        a, b, c = mesh.faces[fi]
        n = np.cross(pc[b] - pc[a], pc[c] - pc[a])
        norm = np.linalg.norm(n)
        if norm == 0:
            continue
        n = n / norm
        if n @ pc[a] > 0:
            n = -n
        # perspective-correct depth: 1/z is affine in screen space
        inv_z = bary @ (1.0 / pc[[a, b, c], 2])
        z = 1.0 / inv_z
        closer = z < zbuf[vs, us]
        vs, us, z = vs[closer], us[closer], z[closer]
        zbuf[vs, us] = z
        normals[vs, us] = n
    fg = np.isfinite(zbuf)
    shading = np.where(fg, np.clip(normals @ light, 0.0, None) * 0.8 + 0.2, 0.0)
    return Mask(fg), normals, shading


def generate_dmasks(mesh, az_spec=None, el_spec=None, K=None, out_size=DMASK_SIZE, workers=1):
    """The 9 x 5 grid of silhouettes at every (azimuth, elevation) bin centre."""
    az_spec = az_spec or azimuth_spec()
    el_spec = el_spec or elevation_spec()
    K = K or default_intrinsics(out_size)
    distance = fit_distance(mesh, K)
    views = [(i, j, ViewAngles(a, e)) for i, a in enumerate(az_spec.centers)
             for j, e in enumerate(el_spec.centers)]

    def one(item):
        i, j, view = item
        try:
            return render_silhouette(mesh, view, K, out_size, distance)
        except MidposeError as exc:
            raise RenderError(f"mesh {mesh.id} at az={view.azimuth:g} el={view.elevation:g}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rendered = list(pool.map(one, views))
    else:
        rendered = [one(v) for v in views]
    grid = [[None] * el_spec.n_bins for _ in range(az_spec.n_bins)]
    for (i, j, _), m in zip(views, rendered):
        grid[i][j] = m
    return DmaskSet(mesh.id, grid, az_spec, el_spec)


def resize_mask(mask, scale):
    """Nearest-neighbour resize of the whole image by ``scale``."""
    h, w = mask.bits.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    rows = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(int), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(int), w - 1)
    return Mask(mask.bits[np.ix_(rows, cols)])


def scale_mask_content(mask, scale):
    """Scale the silhouette about the image centre, keeping the frame size."""
    h, w = mask.bits.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    vs, us = np.mgrid[0:h, 0:w]
    sv = np.rint(cy + (vs - cy) / scale).astype(int)
    su = np.rint(cx + (us - cx) / scale).astype(int)
    ok = (sv >= 0) & (sv < h) & (su >= 0) & (su < w)
    out = np.zeros_like(mask.bits)
    out[ok] = mask.bits[sv[ok], su[ok]]
    return Mask(out)


def ncc_map(image, template):
    """Zero-mean normalised cross-correlation at every position where
    ``template`` fits inside ``image`` (both binary).  Flat windows score 0."""
    img = image.astype(np.float64)
    tpl = template.astype(np.float64)
    h, w = tpl.shape
    n = float(h * w)
    # Sum of products via FFT; inputs are 0/1 so the exact result is integral.
    prod = np.rint(fftconvolve(img, tpl[::-1, ::-1], mode="valid"))
    ii = np.pad(img.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    win = ii[h:, w:] - ii[:-h, w:] - ii[h:, :-w] + ii[:-h, :-w]
    st = tpl.sum()
    num = n * prod - st * win
    var_t = n * st - st * st
    var_i = n * win - win * win  # binary: sum of squares == sum
    den = np.sqrt(var_t) * np.sqrt(var_i)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(den > 0, num / den, 0.0)
    return np.clip(score, -1.0, 1.0)


def match_score(query, target, scales=DEFAULT_SCALES):
    """Best NCC over query scales and all valid integer alignments."""
    best = -np.inf
    for s in scales:
        q = query if s == 1.0 else resize_mask(query, s)
        a, b = target.bits, q.bits
        if b.shape[0] > a.shape[0] or b.shape[1] > a.shape[1]:
            a, b = b, a
        if b.shape[0] > a.shape[0] or b.shape[1] > a.shape[1]:
            raise ConfigurationError("masks cannot be aligned: neither contains the other")
        best = max(best, float(ncc_map(a, b).max()))
    return best


def template_match(query, gallery, scales=DEFAULT_SCALES, tie_tol=1e-9):
    """Index and score of the gallery mask most similar to ``query``.

    Ties (within ``tie_tol``) go to the lower index.
    """
    if not gallery:
        raise ConfigurationError("empty gallery")
    if not query.bits.any():
        raise ConfigurationError("query mask has no foreground")
    scores = np.array([match_score(query, g, scales) for g in gallery])
    best = scores.max()
    k = int(np.flatnonzero(scores >= best - tie_tol)[0])
    return k, float(scores[k])


def mask_iou(a, b):
    if a.bits.shape != b.bits.shape:
        raise ConfigurationError(f"mask sizes differ: {a.bits.shape} vs {b.bits.shape}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)
