"""Procedural multimodal datasets.

Three generators are provided:

* glyphs: M styled renderings of one of ten stroke glyphs (a PolyMNIST stand-in),
* linear-Gaussian: x_i = A_i z + s_i eps with a closed-form posterior over z,
* polygon views: V rotated renderings of one polygon instance (multi-view data).

Every generator is a pure function of its spec (seed included). Datasets persist
to a directory of raw little-endian arrays plus a ``manifest.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class MultimodalSample:
    modalities: list
    label: int
    presence: np.ndarray

    def __post_init__(self):
        self.presence = np.asarray(self.presence, dtype=bool)
        if len(self.modalities) != len(self.presence):
            raise DatasetError("modalities and presence mask differ in length")
        if not self.presence.any():
            raise DatasetError("a sample needs at least one present modality")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)


@dataclass
class Dataset:
    """Column-oriented multimodal dataset.

    ``modalities[i]`` has shape ``(N, *shape_i)``; images are ``(N, H, W, C)``
    float32 in [0, 1], vectors ``(N, D)``.
    """

    modalities: list
    labels: np.ndarray
    presence: np.ndarray
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.presence = np.asarray(self.presence, dtype=bool)
        n = len(self.labels)
        if self.presence.shape != (n, len(self.modalities)):
            raise DatasetError(
                f"presence shape {self.presence.shape} != ({n}, {len(self.modalities)})"
            )
        for i, arr in enumerate(self.modalities):
            if arr.shape[0] != n:
                raise DatasetError(f"modality {i} has {arr.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> MultimodalSample:
        return MultimodalSample(
            [m[idx] for m in self.modalities], int(self.labels[idx]), self.presence[idx].copy()
        )

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def modality_shapes(self) -> list:
        return [tuple(m.shape[1:]) for m in self.modalities]

    @property
    def n_classes(self) -> int:
        return int(self.spec.get("params", {}).get("n_classes", int(self.labels.max()) + 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([m[idx] for m in self.modalities], self.labels[idx], self.presence[idx], dict(self.spec))

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        n = len(self)
        return self.subset(np.arange(0, n_first)), self.subset(np.arange(n_first, n))

    def with_modalities(self, modalities, presence=None) -> "Dataset":
        return Dataset(list(modalities), self.labels.copy(),
                       self.presence.copy() if presence is None else presence, dict(self.spec))

    @classmethod
    def from_samples(cls, samples: Sequence[MultimodalSample], spec: dict | None = None) -> "Dataset":
        if not samples:
            raise DatasetError("cannot build a dataset from zero samples")
        m = samples[0].n_modalities
        mods = [np.stack([s.modalities[i] for s in samples]).astype(np.float32) for i in range(m)]
        return cls(mods, [s.label for s in samples], np.stack([s.presence for s in samples]), spec or {})


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.n_modalities != b.n_modalities or len(a) != len(b):
        return False
    if not (np.array_equal(a.labels, b.labels) and np.array_equal(a.presence, b.presence)):
        return False
    return all(
        x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
        for x, y in zip(a.modalities, b.modalities)
    )


# ---------------------------------------------------------------------------
# glyphs

# Ten stroke glyphs on the [-1, 1]^2 canvas, each a list of segments (x0, y0, x1, y1).
_SQ = [(-1, -1, 1, -1), (1, -1, 1, 1), (1, 1, -1, 1), (-1, 1, -1, -1)]
_OCT = [
    (math.cos(a), math.sin(a), math.cos(a + math.pi / 4), math.sin(a + math.pi / 4))
    for a in np.arange(8) * math.pi / 4
]
GLYPHS = [
    _SQ,                                                        # square
    [(0, -1, 0, 1)],                                            # bar
    [(-1, -1, 1, 1), (-1, 1, 1, -1)],                           # cross
    [(0, -1, 0, 1), (-1, 0, 1, 0)],                             # plus
    [(-1, -1, 1, -1), (1, -1, 0, 1), (0, 1, -1, -1)],           # triangle
    _OCT,                                                       # ring
    [(-1, 1, -1, -1), (-1, -1, 1, -1)],                         # L
    [(-1, 1, 1, 1), (0, 1, 0, -1)],                             # T
    [(-1, 1, 1, 1), (1, 1, -1, -1), (-1, -1, 1, -1)],           # Z
    [(-1, -1, -1, 1), (1, -1, 1, 1), (-1, 0, 1, 0)],            # H
]

_PALETTE = [
    (1.0, 0.25, 0.25), (0.3, 1.0, 0.3), (0.35, 0.5, 1.0), (1.0, 0.9, 0.2),
    (1.0, 0.4, 1.0), (0.2, 1.0, 1.0), (1.0, 0.6, 0.1), (0.9, 0.9, 0.9),
]


@dataclass(frozen=True)
class GlyphStyle:
    rotation: float = 0.0          # degrees
    color: tuple = (1.0, 1.0, 1.0)
    texture: int = 0               # 0 flat, 1 stripes, 2 checker, 3 noise


@dataclass
class GlyphDatasetSpec:
    n_samples: int
    modalities: list
    n_classes: int = 10
    image_side: int = 16
    seed: int = 0

    @classmethod
    def default(cls, n_modalities: int = 3, n_samples: int = 1000, seed: int = 0, **kw) -> "GlyphDatasetSpec":
        styles = [
            GlyphStyle(rotation=35.0 * i, color=_PALETTE[i % len(_PALETTE)], texture=i % 4)
            for i in range(n_modalities)
        ]
        return cls(n_samples=n_samples, modalities=styles, seed=seed, **kw)

    def validate(self):
        if not self.modalities:
            raise DatasetError("glyph spec needs at least one modality")
        if self.n_samples <= 0 or self.image_side <= 0:
            raise DatasetError("n_samples and image_side must be positive")
        if not 1 <= self.n_classes <= len(GLYPHS):
            raise DatasetError(f"n_classes must lie in [1, {len(GLYPHS)}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [asdict(s) for s in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GlyphDatasetSpec":
        d = dict(d)
        d["modalities"] = [GlyphStyle(s["rotation"], tuple(s["color"]), s["texture"]) for s in d["modalities"]]
        return cls(**d)


def _pixel_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel centres on [-1, 1], x to the right, y up; symmetric under 90 degree turns
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    x = np.broadcast_to(c[None, :], (side, side))
    y = np.broadcast_to(-c[:, None], (side, side))
    return x, y


def _segment_distance(px, py, segs: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = (segs[:, k][:, None] for k in range(4))
    dx, dy = x1 - x0, y1 - y0
    p = np.stack([px.ravel(), py.ravel()])
    t = ((p[0] - x0) * dx + (p[1] - y0) * dy) / np.maximum(dx * dx + dy * dy, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    d2 = (p[0] - x0 - t * dx) ** 2 + (p[1] - y0 - t * dy) ** 2
    return np.sqrt(d2.min(axis=0)).reshape(px.shape)


def _texture(tex: int, side: int, rng: np.random.Generator) -> np.ndarray:
    phase = int(rng.integers(0, 4))
    r, c = np.indices((side, side))
    if tex == 0:
        g = np.full((side, side), 0.1)
    elif tex == 1:
        g = np.where(((r + phase) // 2) % 2 == 0, 0.3, 0.05)
    elif tex == 2:
        g = np.where(((r + phase) // 2 + (c + phase) // 2) % 2 == 0, 0.3, 0.05)
    else:
        g = rng.uniform(0.0, 0.35, (side, side))
    return g


def render_glyph(label: int, style: GlyphStyle, side: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one glyph with per-sample jitter; no anti-aliasing."""
    scale = rng.uniform(0.55, 0.75)
    ang = math.radians(style.rotation + rng.uniform(-10.0, 10.0))
    tx, ty = rng.uniform(-0.12, 0.12, 2)
    segs = np.asarray(GLYPHS[label], dtype=np.float64) * scale
    ca, sa = math.cos(ang), math.sin(ang)
    pts = segs.reshape(-1, 2) @ np.array([[ca, sa], [-sa, ca]])
    segs = (pts + [tx, ty]).reshape(-1, 4)
    px, py = _pixel_grid(side)
    ink = _segment_distance(px, py, segs) < 1.6 / side + 0.06
    bg = _texture(style.texture, side, rng)
    img = np.where(ink[..., None], np.asarray(style.color)[None, None, :], bg[..., None])
    return img.astype(np.float32)


def make_glyph_dataset(spec: GlyphDatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    mods = []
    for style in spec.modalities:
        mods.append(np.stack([render_glyph(int(y), style, spec.image_side, rng) for y in labels]))
    presence = np.ones((spec.n_samples, len(spec.modalities)), dtype=bool)
    return Dataset(mods, labels, presence, {"generator": "glyphs", "params": spec.to_dict()})


# ---------------------------------------------------------------------------
# linear-Gaussian


@dataclass
class LinearGaussianSpec:
    latent_dim: int
    matrices: list
    noise_scales: list
    n_samples: int
    seed: int = 0

    @classmethod
    def random(cls, latent_dim: int = 2, obs_dims: Sequence[int] = (4, 4), n_samples: int = 1000,
               seed: int = 0, noise_scales: Sequence[float] | None = None) -> "LinearGaussianSpec":
        rng = np.random.default_rng(seed + 7919)
        mats = [rng.normal(size=(D, latent_dim)) / math.sqrt(latent_dim) for D in obs_dims]
        scales = list(noise_scales) if noise_scales is not None else [0.5] * len(obs_dims)
        return cls(latent_dim, mats, scales, n_samples, seed)

    @classmethod
    def orthogonal(cls, latent_dim: int = 2, obs_dims: Sequence[int] = (4, 4), n_samples: int = 1000,
                   seed: int = 0, noise_scale: float = 0.5, gains=(0.7, 1.5)) -> "LinearGaussianSpec":
        """Matrices with orthogonal columns, so the exact posterior covariance is diagonal."""
        rng = np.random.default_rng(seed + 7919)
        mats = []
        for D in obs_dims:
            Q, _ = np.linalg.qr(rng.normal(size=(D, latent_dim)))
            mats.append(Q * rng.uniform(gains[0], gains[1], latent_dim))
        return cls(latent_dim, mats, [noise_scale] * len(obs_dims), n_samples, seed)

    def validate(self):
        if self.latent_dim < 1 or self.n_samples <= 0:
            raise DatasetError("latent_dim and n_samples must be positive")
        if not self.matrices or len(self.matrices) != len(self.noise_scales):
            raise DatasetError("need one noise scale per observation matrix")
        for i, A in enumerate(self.matrices):
            A = np.asarray(A, dtype=np.float64)
            if A.ndim != 2 or A.shape[1] != self.latent_dim:
                raise DatasetError(f"A_{i} must have shape (dim_i, {self.latent_dim})")
            if np.linalg.matrix_rank(A) < self.latent_dim:
                raise DatasetError(f"A_{i} is rank deficient")
        if any(s <= 0 for s in self.noise_scales):
            raise DatasetError("noise scales must be positive")

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "matrices": [np.asarray(A, dtype=np.float64).tolist() for A in self.matrices],
            "noise_scales": [float(s) for s in self.noise_scales],
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearGaussianSpec":
        return cls(d["latent_dim"], [np.asarray(A) for A in d["matrices"]], list(d["noise_scales"]),
                   d["n_samples"], d["seed"])


@dataclass
class AnalyticPosterior:
    """Exact Gaussian posterior p(z|X) under a N(0, I) prior; covariance is shared."""

    means: np.ndarray        # (N, d)
    covariance: np.ndarray   # (d, d)

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


def linear_gaussian_posterior(spec: LinearGaussianSpec, xs: Sequence[np.ndarray]) -> AnalyticPosterior:
    d = spec.latent_dim
    prec = np.eye(d)
    rhs = np.zeros((len(xs[0]), d))
    for A, s, x in zip(spec.matrices, spec.noise_scales, xs):
        A = np.asarray(A, dtype=np.float64)
        prec = prec + A.T @ A / s**2
        rhs = rhs + np.asarray(x, dtype=np.float64) @ A / s**2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return AnalyticPosterior(rhs @ cov, cov)


def make_linear_gaussian_dataset(spec: LinearGaussianSpec) -> tuple[Dataset, AnalyticPosterior]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal((spec.n_samples, spec.latent_dim))
    xs = []
    for A, s in zip(spec.matrices, spec.noise_scales):
        A = np.asarray(A, dtype=np.float64)
        xs.append(z @ A.T + s * rng.standard_normal((spec.n_samples, A.shape[0])))
    post = linear_gaussian_posterior(spec, xs)
    ds = Dataset(
        [x.astype(np.float64) for x in xs],
        np.zeros(spec.n_samples, dtype=np.int64),
        np.ones((spec.n_samples, len(xs)), dtype=bool),
        {"generator": "linear_gaussian", "params": spec.to_dict()},
    )
    return ds, post


def ring_mixture(n: int, seed: int = 0, n_components: int = 8, radius: float = 2.0,
                 std: float = 0.15) -> np.ndarray:
    """Equal-weight Gaussian mixture on a circle: a 2-D stand-in for an aggregated posterior."""
    rng = np.random.default_rng(seed)
    k = rng.integers(n_components, size=n)
    ang = 2.0 * math.pi * k / n_components
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], 1)
    return centers + std * rng.standard_normal((n, 2))


# ---------------------------------------------------------------------------
# polygon views


@dataclass
class PolygonViewsSpec:
    n_samples: int
    n_views: int = 16
    n_shape_classes: int = 4
    image_side: int = 16
    seed: int = 0

    def validate(self):
        if self.n_views < 2:
            raise DatasetError("need at least two views")
        if self.n_samples <= 0 or self.image_side <= 0 or self.n_shape_classes < 1:
            raise DatasetError("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def render_polygon(n_sides: int, radius: float, phase: float, color, side: int) -> np.ndarray:
    """Filled regular polygon with a white marker near vertex 0 (breaks rotational symmetry)."""
    px, py = _pixel_grid(side)
    ang = phase + 2.0 * math.pi * np.arange(n_sides) / n_sides
    vx, vy = radius * np.cos(ang), radius * np.sin(ang)
    inside = np.ones(px.shape, dtype=bool)
    for k in range(n_sides):
        ex, ey = vx[(k + 1) % n_sides] - vx[k], vy[(k + 1) % n_sides] - vy[k]
        inside &= ex * (py - vy[k]) - ey * (px - vx[k]) >= 0.0
    mx, my = 0.62 * vx[0], 0.62 * vy[0]
    marker = (px - mx) ** 2 + (py - my) ** 2 < (0.22 * radius) ** 2
    img = np.zeros(px.shape + (3,))
    img[inside] = color
    img[inside & marker] = 1.0
    return img.astype(np.float32)


def make_polygon_views_dataset(spec: PolygonViewsSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_shape_classes)
    views = np.zeros((spec.n_views, spec.n_samples, spec.image_side, spec.image_side, 3), np.float32)
    for n, y in enumerate(labels):
        radius = rng.uniform(0.6, 0.9)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        color = _hsv_to_rgb(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.8))
        for v in range(spec.n_views):
            views[v, n] = render_polygon(3 + int(y), radius, phase + 2.0 * math.pi * v / spec.n_views,
                                         color, spec.image_side)
    presence = np.ones((spec.n_samples, spec.n_views), dtype=bool)
    return Dataset(list(views), labels, presence, {"generator": "polygon_views", "params": spec.to_dict()})


# ---------------------------------------------------------------------------
# corruption

CORRUPTION_MODES = ("noise", "blank", "swap")


def corrupt_modalities(sample: MultimodalSample, mask, mode: str, rng: np.random.Generator | None = None,
                       pool: Dataset | None = None) -> MultimodalSample:
    """Replace the masked modalities of ``sample``; the presence mask is left untouched.

    ``swap`` draws the replacement from a sample of ``pool`` with a different label.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (sample.n_modalities,):
        raise DatasetError(f"mask must have length {sample.n_modalities}")
    if mask.all():
        raise DatasetError("at least one modality must stay uncorrupted")
    if mode not in CORRUPTION_MODES:
        raise DatasetError(f"unknown corruption mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    mods = [np.array(m, copy=True) for m in sample.modalities]
    if mode == "swap":
        if pool is None:
            raise DatasetError("swap corruption needs a donor pool")
        candidates = np.flatnonzero(pool.labels != sample.label)
        if len(candidates) == 0:
            raise DatasetError("donor pool has no sample with a different label")
    for i in np.flatnonzero(mask):
        if mode == "blank":
            mods[i] = np.zeros_like(mods[i])
        elif mode == "noise":
            mods[i] = rng.uniform(0.0, 1.0, mods[i].shape).astype(mods[i].dtype)
        else:
            donor = int(candidates[rng.integers(len(candidates))])
            mods[i] = np.array(pool.modalities[i][donor], copy=True)
    return replace(sample, modalities=mods, presence=sample.presence.copy())


def corrupt_dataset(dataset: Dataset, mask, mode: str, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    out = [corrupt_modalities(dataset[n], mask, mode, rng, pool=dataset) for n in range(len(dataset))]
    return Dataset.from_samples(out, dict(dataset.spec))


# ---------------------------------------------------------------------------
# persistence


def _write_array(path: Path, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    path.write_bytes(le.tobytes())
    return {"file": path.name, "dtype": le.dtype.str, "shape": list(arr.shape)}


def _read_array(root: Path, entry: dict) -> np.ndarray:
    path = root / entry["file"]
    if not path.exists():
        raise DatasetError(f"missing array file {path}")
    dtype = np.dtype(entry["dtype"])
    shape = tuple(entry["shape"])
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise DatasetError(f"{path.name}: {len(raw)} bytes on disk, manifest shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def persist_dataset(dataset: Dataset, path, extra: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": len(dataset),
        "n_modalities": dataset.n_modalities,
        "modalities": [_write_array(root / f"modality_{i}.bin", m) for i, m in enumerate(dataset.modalities)],
        "labels": _write_array(root / "labels.bin", dataset.labels.astype(np.int64)),
        "presence": _write_array(root / "presence.bin", dataset.presence.astype(np.uint8)),
        "spec": dataset.spec,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"no manifest.json in {path}")
    return json.loads(mf.read_text())


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.get('format_version')}")
    mods = [_read_array(root, e) for e in manifest["modalities"]]
    labels = _read_array(root, manifest["labels"])
    presence = _read_array(root, manifest["presence"]).astype(bool)
    if len(mods) != manifest["n_modalities"]:
        raise DatasetError("manifest modality count does not match array files")
    return Dataset(mods, labels, presence, manifest.get("spec", {}))


def regenerate(spec: dict) -> Dataset:
    """Rebuild a dataset from the ``spec`` block recorded in its manifest."""
    kind, params = spec.get("generator"), spec.get("params", {})
    if kind == "glyphs":
        return make_glyph_dataset(GlyphDatasetSpec.from_dict(params))
    if kind == "linear_gaussian":
        return make_linear_gaussian_dataset(LinearGaussianSpec.from_dict(params))[0]
    if kind == "polygon_views":
        return make_polygon_views_dataset(PolygonViewsSpec(**params))
    raise DatasetError(f"cannot regenerate dataset of kind {kind!r}")
