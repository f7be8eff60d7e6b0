"""Annotations, loaders, splits, low-data subsampling and the synthetic scene generator.

Annotations are JSON lines; file paths inside them are relative to the
annotation file's directory.  A synthetic dataset directory looks like::

    annotations.jsonl
    manifest.json
    meshes/<mesh_id>.obj
    masks/<sample_id>.pgm
    features/<sample_id>_normal.mlt
    features/<sample_id>_reshading.mlt

The generated feature maps are proxies for mid-level network activations:
the rendered camera-frame surface normals and a Lambertian shading image,
average-pooled to 16 x 16 and lifted to 8 channels by fixed linear maps,
then standardised per channel over the whole dataset.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .errors import ConfigurationError, FormatError, MissingFileError
from .geometry import ViewAngles
from .silhouette import Mask, MeshModel, render_surface

log = logging.getLogger(__name__)

FEATURE_SHAPE = (16, 16, 8)
CATEGORIES = ("chair", "table", "sofa", "bed", "desk")
_REQUIRED = {"sample_id": str, "category": str, "mesh_id": str,
             "azimuth_deg": (int, float), "elevation_deg": (int, float)}
_PATH_KEYS = ("normal_path", "reshading_path", "mask_path", "gt_mask_path")
_OPTIONAL = set(_PATH_KEYS) | {"extra"}


@dataclass
class Annotation:
    sample_id: str
    category: str
    mesh_id: str
    azimuth_deg: float
    elevation_deg: float
    normal_path: Path | None = None
    reshading_path: Path | None = None
    mask_path: Path | None = None
    gt_mask_path: Path | None = None
    extra: dict = field(default_factory=dict)

    def has_features(self):
        return self.normal_path is not None and self.reshading_path is not None and self.mask_path is not None

    def to_json(self, base_dir):
        d = {"sample_id": self.sample_id, "category": self.category, "mesh_id": self.mesh_id,
             "azimuth_deg": self.azimuth_deg, "elevation_deg": self.elevation_deg}
        for k in _PATH_KEYS:
            p = getattr(self, k)
            d[k] = None if p is None else Path(os.path.relpath(p, base_dir)).as_posix()
        if self.extra:
            d["extra"] = self.extra
        return json.dumps(d, sort_keys=True)


@dataclass
class Sample:
    sample_id: str
    category: str
    mesh_id: str
    azimuth: float
    elevation: float
    normal: np.ndarray
    reshading: np.ndarray
    mask: Mask


@dataclass(frozen=True)
class Split:
    train: tuple
    test: tuple
    seed: int


def load_feature_map(path):
    t = formats.load_tensor(path)
    if t.shape != FEATURE_SHAPE:
        raise FormatError(f"{path}: feature map shape {t.shape}, expected {FEATURE_SHAPE}")
    return t


def save_feature_map(path, array):
    formats.save_tensor(path, array)


def load_mesh(path, mesh_id=None):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such mesh: {path}")
    verts, faces = formats.parse_obj(path.read_text(), str(path))
    mesh = MeshModel(mesh_id or path.stem, verts, faces)
    if not mesh.is_solid():
        raise FormatError(f"{path}: mesh needs at least 4 non-coplanar vertices")
    return mesh


def save_mesh(path, mesh):
    formats.atomic_write_bytes(path, formats.format_obj(mesh.vertices, mesh.faces).encode())


def load_mask(path):
    return Mask(formats.load_mask_bits(path))


def _parse_annotation(obj, base, where):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise FormatError(f"{where}: missing keys {missing}")
    unknown = set(obj) - set(_REQUIRED) - _OPTIONAL
    if unknown:
        raise FormatError(f"{where}: unknown keys {sorted(unknown)}")
    for k, typ in _REQUIRED.items():
        if not isinstance(obj[k], typ) or isinstance(obj[k], bool):
            raise FormatError(f"{where}: {k} has the wrong type")
    az, el = float(obj["azimuth_deg"]), float(obj["elevation_deg"])
    if not (0.0 <= az < 360.0) or not (-90.0 <= el <= 90.0):
        raise FormatError(f"{where}: angles out of range (az={az}, el={el})")
    paths = {}
    for k in _PATH_KEYS:
        v = obj.get(k)
        if v is None:
            paths[k] = None
            continue
        if not isinstance(v, str):
            raise FormatError(f"{where}: {k} must be a string or null")
        p = (base / v).resolve()
        if not p.is_file():
            raise MissingFileError(f"{where}: referenced file does not exist: {p}")
        paths[k] = p
    extra = obj.get("extra", {})
    if not isinstance(extra, dict):
        raise FormatError(f"{where}: extra must be an object")
    return Annotation(obj["sample_id"], obj["category"], obj["mesh_id"], az, el, extra=extra, **paths)


def load_annotations(path):
    """Validated annotations from a JSON-lines file; blank lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such annotation file: {path}")
    base = path.parent
    out, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{where}: {exc.msg}") from None
        ann = _parse_annotation(obj, base, where)
        if ann.sample_id in seen:
            raise FormatError(f"{where}: duplicate sample_id {ann.sample_id}")
        seen.add(ann.sample_id)
        out.append(ann)
    return out


def write_annotations(path, annotations):
    path = Path(path)
    base = path.parent.resolve()
    text = "".join(a.to_json(base) + "\n" for a in annotations)
    formats.atomic_write_bytes(path, text.encode())


def load_samples(annotations):
    """Materialise feature maps and masks for annotations that reference them."""
    out = []
    for a in annotations:
        if not a.has_features():
            raise FormatError(f"sample {a.sample_id} has no feature/mask files")
        out.append(Sample(a.sample_id, a.category, a.mesh_id, a.azimuth_deg, a.elevation_deg,
                          load_feature_map(a.normal_path), load_feature_map(a.reshading_path),
                          load_mask(a.mask_path)))
    return out


def make_split(ids, train_fraction, seed):
    """Seeded random train/test partition with ``round(fraction * N)`` training ids."""
    ids = sorted(set(ids))
    n = len(ids)
    if n < 2:
        raise ConfigurationError("need at least two ids to split")
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must be in (0, 1)")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(ids[i] for i in order[:n_train]))
    test = tuple(sorted(ids[i] for i in order[n_train:]))
    return Split(train, test, seed)


def _stratum_seed(seed, category):
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(category.encode())]


def subsample_fraction(split, fraction, seed, categories=None):
    """Keep ``floor(fraction * |train|)`` training ids, stratified by category.

    Every training id gets a key equal to its within-category quantile under
    a seeded permutation; the ids with the smallest keys are kept.  The
    ordering only depends on the seed, so smaller fractions are always
    subsets of larger ones, and each category's share stays within one item
    of proportional.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError("fraction must be in (0, 1]")
    train = list(split.train)
    n_keep = int(math.floor(fraction * len(train) + 1e-9))
    if n_keep == len(train):
        return split
    cats = categories or {}
    by_cat = {}
    for i in sorted(train):
        by_cat.setdefault(cats.get(i, ""), []).append(i)
    tie = np.random.default_rng(seed)
    keyed = []
    for cat in sorted(by_cat):
        members = by_cat[cat]
        perm = np.random.default_rng(_stratum_seed(seed, cat)).permutation(len(members))
        for rank, idx in enumerate(perm):
            keyed.append(((rank + 0.5) / len(members), members[idx]))
    ties = tie.random(len(keyed))
    order = sorted(range(len(keyed)), key=lambda j: (keyed[j][0], ties[j]))
    kept = sorted(keyed[j][1] for j in order[:n_keep])
    kept_cats = {cats.get(i, "") for i in kept}
    for cat in by_cat:
        if cat not in kept_cats:
            log.warning("subsample at fraction %g leaves no training samples for category %r", fraction, cat)
    return Split(tuple(kept), split.test, split.seed)


# ---------------------------------------------------------------------------
# synthetic data

def cuboid(lo, hi):
    """Vertices and outward-wound faces of an axis-aligned box."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)], dtype=float)
    # vertex index = 4*ix + 2*iy + iz
    quads = [(4, 6, 7, 5), (0, 1, 3, 2), (2, 3, 7, 6), (0, 4, 5, 1), (1, 5, 7, 3), (0, 2, 6, 4)]
    f = []
    for a, b, c, d in quads:
        f += [[a, b, c], [a, c, d]]
    return v, np.array(f)


def compose_cuboids(mesh_id, boxes):
    verts, faces = [], []
    for lo, hi in boxes:
        v, f = cuboid(lo, hi)
        faces.append(f + sum(len(x) for x in verts))
        verts.append(v)
    return MeshModel(mesh_id, np.vstack(verts), np.vstack(faces))


def _legs(x0, x1, y0, y1, height, t):
    return [((x, y, 0.0), (x + t, y + t, height))
            for x in (x0, x1 - t) for y in (y0, y1 - t)]


def parametric_mesh(category, mesh_id, rng):
    """Furniture-like composition of cuboids; +x is the front, z is up."""
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    if category == "chair":
        w, d, h, t = j(0.4, 0.55), j(0.4, 0.55), j(0.4, 0.5), 0.05
        boxes = _legs(-d / 2, d / 2, -w / 2, w / 2, h, t)
        boxes.append(((-d / 2, -w / 2, h), (d / 2, w / 2, h + 0.06)))
        boxes.append(((-d / 2, -w / 2, h + 0.06), (-d / 2 + 0.06, w / 2, h + j(0.4, 0.6))))
    elif category == "table":
        w, d, h, t = j(0.8, 1.4), j(0.6, 0.9), j(0.65, 0.8), 0.06
        boxes = _legs(-d / 2, d / 2, -w / 2, w / 2, h, t)
        boxes.append(((-d / 2, -w / 2, h), (d / 2, w / 2, h + 0.05)))
        boxes.append(((0.0, 0.0, h - 0.15), (d / 2 - 0.02, w / 2 - t, h)))  # drawer, front right
    elif category == "sofa":
        w, d, h = j(1.4, 2.0), j(0.7, 0.9), j(0.35, 0.45)
        arm = j(0.12, 0.2)
        boxes = [((-d / 2, -w / 2, 0.0), (d / 2, w / 2, h)),
                 ((-d / 2, -w / 2, h), (-d / 2 + 0.2, w / 2, h + j(0.35, 0.5))),
                 ((-d / 2, -w / 2, h), (d / 2, -w / 2 + arm, h + 0.2)),
                 ((-d / 2, w / 2 - arm, h), (d / 2, w / 2, h + 0.2))]
    elif category == "bed":
        w, d, h = j(1.0, 1.6), j(1.9, 2.2), j(0.4, 0.55)
        boxes = [((-d / 2, -w / 2, 0.0), (d / 2, w / 2, h)),
                 ((-d / 2, -w / 2, 0.0), (-d / 2 + 0.08, w / 2, h + j(0.4, 0.7))),
                 ((-d / 2 + 0.1, -w / 2 + 0.1, h), (-d / 2 + 0.45, w / 2 - 0.1, h + 0.12))]
    elif category == "desk":
        w, d, h = j(1.0, 1.5), j(0.55, 0.75), j(0.7, 0.78)
        boxes = [((-d / 2, -w / 2, h - 0.04), (d / 2, w / 2, h)),
                 ((-d / 2, w / 2 - 0.04, 0.0), (d / 2, w / 2, h - 0.04)),
                 ((-d / 2, -w / 2, 0.0), (d / 2, -w / 2 + 0.4, h - 0.04)),
                 ((-d / 2, -w / 2 + 0.4, h * 0.4), (-d / 2 + 0.03, w / 2 - 0.04, h - 0.04))]
    else:
        raise ConfigurationError(f"unknown synthetic category {category!r}")
    return compose_cuboids(mesh_id, boxes)


def _projections():
    # fixed across datasets so that features mean the same thing everywhere
    rng = np.random.default_rng(20230101)
    return rng.standard_normal((3, 8)), rng.standard_normal((1, 8))


def _pool(img, size=16):
    h, w = img.shape[:2]
    f = h // size
    return img.reshape(size, f, size, f, -1).mean(axis=(1, 3))


def proxy_features(mesh, view, out_size=128):
    """(mask, raw normal features 16x16x8, raw shading features 16x16x8)."""
    mask, normals, shading = render_surface(mesh, view, out_size=out_size)
    pn, ps = _projections()
    fn = _pool(normals) @ pn
    fs = _pool(shading[..., None]) @ ps
    return mask, fn, fs


@dataclass
class SynthConfig:
    n_samples: int = 200
    categories: tuple = CATEGORIES
    meshes_per_category: int = 2
    seed: int = 0
    elevation_max: float = 90.0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.n_samples < 1 or self.meshes_per_category < 1 or not self.categories:
            raise ConfigurationError("synthetic config needs samples, meshes and categories")
        if not 0 < self.elevation_max <= 90:
            raise ConfigurationError("elevation_max must be in (0, 90]")


def synth_generate(config, out_dir):
    """Write a deterministic synthetic dataset to ``out_dir``; returns the annotations path.

    The dataset is assembled in a private sibling directory and moved into
    place at the end, replacing a previous synthetic dataset at the same path.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not (out_dir / "manifest.json").is_file():
        raise ConfigurationError(f"{out_dir} exists and is not a synthetic dataset")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        _generate_into(config, tmp)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir / "annotations.jsonl"


def _generate_into(config, root):
    rng = np.random.default_rng(config.seed)
    for sub in ("meshes", "masks", "features"):
        (root / sub).mkdir()
    meshes = {}
    for cat in config.categories:
        for k in range(config.meshes_per_category):
            mid = f"{cat}_{k:02d}"
            meshes[mid] = parametric_mesh(cat, mid, rng)
            save_mesh(root / "meshes" / f"{mid}.obj", meshes[mid])
    mesh_ids = {c: [m for m in meshes if m.startswith(c + "_")] for c in config.categories}

    records = []
    for i in range(config.n_samples):
        cat = config.categories[int(rng.integers(len(config.categories)))]
        mid = mesh_ids[cat][int(rng.integers(len(mesh_ids[cat])))]
        az = float(rng.uniform(0.0, 360.0))
        el = float(rng.uniform(0.0, config.elevation_max))
        mask, fn, fs = proxy_features(meshes[mid], ViewAngles(az, el))
        records.append((f"s{i:05d}", cat, mid, az, el, mask, fn, fs))

    fn_all = np.stack([r[6] for r in records])
    fs_all = np.stack([r[7] for r in records])
    stats = [(a.mean(axis=(0, 1, 2)), a.std(axis=(0, 1, 2)) + 1e-8) for a in (fn_all, fs_all)]
    anns = []
    for sid, cat, mid, az, el, mask, fn, fs in records:
        npath = root / "features" / f"{sid}_normal.mlt"
        rpath = root / "features" / f"{sid}_reshading.mlt"
        mpath = root / "masks" / f"{sid}.pgm"
        save_feature_map(npath, ((fn - stats[0][0]) / stats[0][1]).astype(np.float32))
        save_feature_map(rpath, ((fs - stats[1][0]) / stats[1][1]).astype(np.float32))
        formats.save_mask(mpath, mask.bits)
        anns.append(Annotation(sid, cat, mid, az, el, npath, rpath, mpath))
    write_annotations(root / "annotations.jsonl", anns)
    manifest = {"generator": "midpose-synth/1", "n_samples": config.n_samples,
                "categories": list(config.categories), "meshes_per_category": config.meshes_per_category,
                "seed": config.seed, "elevation_max": config.elevation_max,
                "meshes": sorted(meshes)}
    formats.atomic_write_bytes(root / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_dataset(root):
    """Annotations and meshes of a dataset directory."""
    root = Path(root)
    anns = load_annotations(root / "annotations.jsonl")
    meshes = {}
    mesh_dir = root / "meshes"
    if mesh_dir.is_dir():
        for p in sorted(mesh_dir.glob("*.obj")):
            meshes[p.stem] = load_mesh(p)
    return anns, meshes
