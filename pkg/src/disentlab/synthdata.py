"""Procedural glyph-over-texture dataset with three factors of variation.

Each image is a 28x28 stroke glyph (10 classes) laid over a 64x64 textured
background (10 classes) at one of 8 grid locations, combined by a per-pixel
maximum. A view pair shares two factors and redraws the third; glyph and
texture *instances* are always drawn fresh per view.
"""

import colorsys
import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import Rng

N_GLYPH = 10
N_TEXTURE = 10
N_LOCATION = 8
IMAGE_SIZE = 64
GLYPH_SIZE = 28

FACTOR_NAMES = ("DC", "BC", "DL")
FACTOR_RANGES = (N_GLYPH, N_TEXTURE, N_LOCATION)

# variant -> (fixed factor indices, varied factor index)
VARIANTS = {
    "dc-bc": ((0, 1), 2),
    "dc-dl": ((0, 2), 1),
    "bc-dl": ((1, 2), 0),
}
_VARIANT_CODES = {"dc-bc": 1, "dc-dl": 2, "bc-dl": 3}


class DatasetFormatError(ValueError):
    pass


def check_variant(kind):
    key = kind.lower()
    if key not in VARIANTS:
        raise ValueError(f"unknown dataset variant {kind!r}; expected one of {sorted(VARIANTS)}")
    return key


@dataclass(frozen=True)
class FactorTuple:
    glyph_class: int
    texture_class: int
    location: int

    def __post_init__(self):
        for name, value, hi in zip(("glyph_class", "texture_class", "location"), self, FACTOR_RANGES):
            if not 0 <= value < hi:
                raise ValueError(f"{name} must be in [0, {hi}), got {value}")

    def __iter__(self):
        return iter((self.glyph_class, self.texture_class, self.location))

    def as_array(self):
        return np.array(tuple(self), dtype=np.int64)


@dataclass
class ViewPair:
    view0: np.ndarray
    view1: np.ndarray
    factors0: FactorTuple
    factors1: FactorTuple
    joint_label: int


@dataclass(frozen=True)
class DatasetVariant:
    kind: str
    train_size: int = 20_000
    test_size: int = 2_000

    def __post_init__(self):
        object.__setattr__(self, "kind", check_variant(self.kind))
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("train and test sizes must be positive")

    @property
    def fixed(self):
        return VARIANTS[self.kind][0]

    @property
    def varied(self):
        return VARIANTS[self.kind][1]

    @property
    def tasks(self):
        """Downstream task names: the two fixed factors, e.g. ('DC', 'BC')."""
        return tuple(FACTOR_NAMES[i] for i in self.fixed)


def joint_label(factors):
    """Glyph/texture joint class, 10 * glyph + texture (location ignored)."""
    g, t, _ = factors
    return 10 * int(g) + int(t)


def pair_label(kind, factors):
    """Joint class of a variant's two fixed factors.

    For dc-bc this is ``joint_label``; for the location variants the location
    takes the place of the varied class (8 values), so labels stay below 100.
    """
    (a, b), _ = VARIANTS[check_variant(kind)]
    factors = tuple(factors)
    return FACTOR_RANGES[b] * int(factors[a]) + int(factors[b])


# ---------------------------------------------------------------------------
# geometry


def location_grid(image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE):
    """Centers (x, y) of the 2 x 4 glyph grid, index = 4 * row + column.

    One-based location labels are index + 1. Every glyph box
    ``[c - glyph//2, c - glyph//2 + glyph)`` lies inside the image.
    """
    if glyph_size > image_size or glyph_size < 1:
        raise ValueError(f"glyph of {glyph_size}px does not fit a {image_size}px image")
    m = math.ceil(glyph_size / 2)
    span = image_size - 2 * m
    cols = [m + (k * span) // 3 for k in range(4)]
    rows = [m, image_size - m]
    return [(cols[i % 4], rows[i // 4]) for i in range(N_LOCATION)]


def glyph_box(location, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE):
    """Top-left (x0, y0) of the glyph box for ``location``."""
    cx, cy = location_grid(image_size, glyph_size)[location]
    return cx - glyph_size // 2, cy - glyph_size // 2


# ---------------------------------------------------------------------------
# glyphs


def _arc(cx, cy, rx, ry, start, stop, n):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


# unit-box polylines, x to the right and y downward
_SKELETONS = {
    0: [_arc(0.5, 0.5, 0.3, 0.45, 0.0, 2 * math.pi, 13)],
    1: [np.array([[0.32, 0.22], [0.52, 0.05], [0.52, 0.95]])],
    2: [np.array([[0.18, 0.25], [0.32, 0.08], [0.62, 0.06], [0.8, 0.24], [0.74, 0.46], [0.2, 0.95], [0.86, 0.95]])],
    3: [np.array([[0.2, 0.08], [0.78, 0.08], [0.45, 0.44], [0.74, 0.56], [0.78, 0.82], [0.55, 0.96], [0.2, 0.9]])],
    4: [np.array([[0.66, 0.96], [0.66, 0.04], [0.14, 0.66], [0.88, 0.66]])],
    5: [np.array([[0.8, 0.05], [0.26, 0.05], [0.2, 0.46], [0.58, 0.38], [0.8, 0.58], [0.76, 0.86], [0.5, 0.96], [0.18, 0.88]])],
    6: [np.array([[0.72, 0.04], [0.36, 0.34], [0.2, 0.68], [0.34, 0.95], [0.66, 0.95], [0.8, 0.75], [0.64, 0.54], [0.28, 0.6]])],
    7: [np.array([[0.14, 0.05], [0.86, 0.05], [0.38, 0.96]])],
    8: [_arc(0.5, 0.27, 0.22, 0.22, 0.0, 2 * math.pi, 11), _arc(0.5, 0.71, 0.27, 0.25, 0.0, 2 * math.pi, 11)],
    9: [_arc(0.48, 0.3, 0.24, 0.25, 0.0, 2 * math.pi, 11), np.array([[0.72, 0.3], [0.62, 0.96]])],
}


def _segments(polylines):
    segs = [np.hstack([p[:-1], p[1:]]) for p in polylines]
    return np.vstack(segs)


def render_glyph(glyph_class, rng, size=GLYPH_SIZE):
    """Stroke mask in [0, 1] for ``glyph_class`` with a random instance style.

    Instance variation: control-point jitter, affine (scale, aspect,
    rotation, shear), sub-pixel shift and stroke width.
    """
    if not 0 <= glyph_class < N_GLYPH:
        raise ValueError(f"glyph class must be in [0, {N_GLYPH}), got {glyph_class}")
    g = rng.generator
    polylines = [p + g.normal(0.0, 0.025, size=p.shape) for p in _SKELETONS[glyph_class]]
    scale = g.uniform(0.85, 1.05) * size / 28.0
    aspect = g.uniform(0.9, 1.1)
    angle = g.uniform(-0.2, 0.2)
    shear = g.uniform(-0.15, 0.15)
    shift = g.uniform(-1.5, 1.5, size=2) * size / 28.0
    radius = g.uniform(1.0, 1.8) * size / 28.0
    c, s = math.cos(angle), math.sin(angle)
    affine = np.array([[c, -s], [s, c]]) @ np.array([[14.0 * aspect, shear * 18.0], [0.0, 18.0]]) * scale
    center = np.array([size / 2.0, size / 2.0]) + shift
    pixel_lines = [(p - 0.5) @ affine.T + center for p in polylines]
    return kernels.rasterize(np.ascontiguousarray(_segments(pixel_lines)), radius, size)


# ---------------------------------------------------------------------------
# textures

def _texture_family(texture_class):
    hue = texture_class / N_TEXTURE
    dark = np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.22))
    light = np.array(colorsys.hsv_to_rgb((hue + 0.04) % 1.0, 0.55, 0.66))
    freqs = np.array([2.0 + (texture_class % 5) * 1.5, 3.0 + (texture_class * 3 % 7)])
    angles = np.array([texture_class * math.pi / 10.0, texture_class * math.pi / 10.0 + math.pi / 3.0])
    return dark, light, freqs, angles


def render_texture(texture_class, rng, size=IMAGE_SIZE):
    """Background in [0, 1]^3: two interfering gratings blended between a
    class palette, with per-instance phase/orientation/frequency/palette
    jitter and pixel noise."""
    if not 0 <= texture_class < N_TEXTURE:
        raise ValueError(f"texture class must be in [0, {N_TEXTURE}), got {texture_class}")
    g = rng.generator
    dark, light, freqs, angles = _texture_family(texture_class)
    freqs = freqs * g.uniform(0.85, 1.15, size=2)
    angles = angles + g.normal(0.0, 0.12, size=2)
    phases = g.uniform(0.0, 2 * math.pi, size=2)
    weights = np.array([1.0, g.uniform(0.3, 1.0)])
    dark = np.clip(dark + g.normal(0.0, 0.05, size=3), 0.0, 1.0)
    light = np.clip(light + g.normal(0.0, 0.05, size=3), 0.0, 1.0)
    field = kernels.texture(size, freqs, angles, phases, weights, dark, light)
    field = field + g.normal(0.0, 0.03, size=field.shape)
    return np.clip(field, 0.0, 1.0)


def composite(glyph_mask, texture, location):
    """Per-pixel max of the glyph (broadcast over channels) and the texture."""
    if not 0 <= location < N_LOCATION:
        raise ValueError(f"location must be in [0, {N_LOCATION}), got {location}")
    size, gsize = texture.shape[0], glyph_mask.shape[0]
    x0, y0 = glyph_box(location, size, gsize)
    out = np.array(texture, dtype=np.float64, copy=True)
    region = out[y0:y0 + gsize, x0:x0 + gsize]
    np.maximum(region, glyph_mask[:, :, None], out=region)
    return out


# ---------------------------------------------------------------------------
# external image banks


class ImageBank:
    """Externally supplied glyph/texture instances used instead of the
    procedural renderers, e.g. real 28x28 digits and 64x64 photos.

    ``glyphs`` is (n, g, g) in [0, 1] with ``glyph_labels`` (n,);
    ``textures`` is (m, s, s, 3) in [0, 1] with ``texture_labels`` (m,).
    """

    def __init__(self, glyphs=None, glyph_labels=None, textures=None, texture_labels=None):
        self.glyphs = self._index(glyphs, glyph_labels, N_GLYPH, 3)
        self.textures = self._index(textures, texture_labels, N_TEXTURE, 4)

    @staticmethod
    def _index(images, labels, n_classes, ndim):
        if images is None:
            return None
        images = np.asarray(images, dtype=np.float64)
        if images.max(initial=0) > 1.0:
            images = images / 255.0
        labels = np.asarray(labels)
        if images.ndim != ndim or labels.shape != images.shape[:1]:
            raise ValueError(f"image bank arrays have shapes {images.shape} / {labels.shape}")
        by_class = {c: images[labels == c] for c in range(n_classes)}
        missing = [c for c, v in by_class.items() if len(v) == 0]
        if missing:
            raise ValueError(f"image bank has no instances for classes {missing}")
        return by_class

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            get = lambda k: f[k] if k in f else None
            return cls(get("glyphs"), get("glyph_labels"), get("textures"), get("texture_labels"))

    def glyph(self, cls_, rng):
        pool = self.glyphs[cls_]
        return pool[rng.integers(0, len(pool))]

    def texture(self, cls_, rng):
        pool = self.textures[cls_]
        return pool[rng.integers(0, len(pool))]


# ---------------------------------------------------------------------------
# sampling


def sample_factor_pair(kind, rng):
    """Factor tuples for one view pair: fixed factors shared, varied factor
    drawn independently per view (the two draws may coincide)."""
    fixed, varied = VARIANTS[check_variant(kind)]
    g = rng.generator
    shared = [0, 0, 0]
    for i in fixed:
        shared[i] = int(g.integers(0, FACTOR_RANGES[i]))
    views = []
    for _ in range(2):
        f = list(shared)
        f[varied] = int(g.integers(0, FACTOR_RANGES[varied]))
        views.append(FactorTuple(*f))
    return views[0], views[1]


def render_view(factors, rng, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE, bank=None):
    g_rng, t_rng = rng.stream("glyph"), rng.stream("texture")
    if bank is not None and bank.glyphs is not None:
        glyph = bank.glyph(factors.glyph_class, g_rng)
    else:
        glyph = render_glyph(factors.glyph_class, g_rng, glyph_size)
    if bank is not None and bank.textures is not None:
        texture = bank.texture(factors.texture_class, t_rng)
    else:
        texture = render_texture(factors.texture_class, t_rng, image_size)
    return composite(glyph, texture, factors.location)


def quantize(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def sample_view_pair(kind, rng, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE, bank=None):
    kind = check_variant(kind)
    f0, f1 = sample_factor_pair(kind, rng.stream("factors"))
    v0 = render_view(f0, rng.stream("view0"), image_size, glyph_size, bank)
    v1 = render_view(f1, rng.stream("view1"), image_size, glyph_size, bank)
    return ViewPair(v0, v1, f0, f1, pair_label(kind, f0))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Split:
    factors: np.ndarray  # (n, 2, 3) int64
    images: np.ndarray  # (n, 2, H, W, 3) uint8

    def __len__(self):
        return len(self.factors)

    def view_images(self, view=0, index=None):
        imgs = self.images[:, view] if index is None else self.images[index, view]
        return imgs.astype(np.float64) / 255.0


@dataclass
class Dataset:
    variant: DatasetVariant
    seed: int
    train: Split
    test: Split
    image_size: int = IMAGE_SIZE
    glyph_size: int = GLYPH_SIZE

    @property
    def kind(self):
        return self.variant.kind

    def split(self, name):
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def task_labels(self, split="train", view=0):
        """{task name: labels} for the variant's two downstream tasks."""
        f = self.split(split).factors[:, view]
        return {FACTOR_NAMES[i]: f[:, i].copy() for i in self.variant.fixed}

    def pair_labels(self, split="train"):
        f = self.split(split).factors[:, 0]
        (a, b), _ = VARIANTS[self.kind]
        return FACTOR_RANGES[b] * f[:, a] + f[:, b]

    def num_classes(self, task):
        return FACTOR_RANGES[FACTOR_NAMES.index(task)]


def generate_split(kind, seed, split, n, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE, bank=None):
    root = Rng(seed, f"data/{check_variant(kind)}/{split}")
    factors = np.empty((n, 2, 3), dtype=np.int64)
    images = np.empty((n, 2, image_size, image_size, 3), dtype=np.uint8)
    for i in range(n):
        pair = sample_view_pair(kind, root.child(i), image_size, glyph_size, bank)
        factors[i, 0] = pair.factors0.as_array()
        factors[i, 1] = pair.factors1.as_array()
        images[i, 0] = quantize(pair.view0)
        images[i, 1] = quantize(pair.view1)
    return Split(factors, images)


def generate_dataset(variant, seed, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE, bank=None):
    if isinstance(variant, str):
        variant = DatasetVariant(variant)
    train = generate_split(variant.kind, seed, "train", variant.train_size, image_size, glyph_size, bank)
    test = generate_split(variant.kind, seed, "test", variant.test_size, image_size, glyph_size, bank)
    return Dataset(variant, seed, train, test, image_size, glyph_size)


# file layout: header, then factors (int8) and images (uint8) for train, test
_MAGIC = b"DLVP"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBHHQII32s")


def _payload(ds):
    return [
        ds.train.factors.astype(np.int8).tobytes(),
        ds.test.factors.astype(np.int8).tobytes(),
        np.ascontiguousarray(ds.train.images).tobytes(),
        np.ascontiguousarray(ds.test.images).tobytes(),
    ]


def save_dataset(ds, path):
    """Write ``ds``; returns the hex sha256 of the payload."""
    chunks = _payload(ds)
    digest = hashlib.sha256()
    for c in chunks:
        digest.update(c)
    header = _HEADER.pack(
        _MAGIC, _VERSION, _VARIANT_CODES[ds.kind], 0, ds.image_size, ds.glyph_size,
        ds.seed, len(ds.train), len(ds.test), digest.digest(),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return digest.hexdigest()


def build_dataset(variant, seed, path, image_size=IMAGE_SIZE, glyph_size=GLYPH_SIZE, bank=None):
    ds = generate_dataset(variant, seed, image_size, glyph_size, bank)
    return ds, save_dataset(ds, path)


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for a dataset header")
    magic, version, code, _, size, gsize, seed, n_train, n_test, checksum = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    kinds = {v: k for k, v in _VARIANT_CODES.items()}
    if code not in kinds:
        raise DatasetFormatError(f"{path}: unknown variant code {code}")
    img = size * size * 3
    sizes = [n_train * 6, n_test * 6, n_train * 2 * img, n_test * 2 * img]
    body = memoryview(raw)[_HEADER.size:]
    if len(body) != sum(sizes):
        raise DatasetFormatError(f"{path}: payload is {len(body)} bytes, header implies {sum(sizes)}")
    if hashlib.sha256(body).digest() != checksum:
        raise DatasetFormatError(f"{path}: checksum mismatch")
    offsets = np.cumsum([0] + sizes)
    part = lambda i: body[offsets[i]:offsets[i + 1]]
    tr_f = np.frombuffer(part(0), dtype=np.int8).reshape(n_train, 2, 3).astype(np.int64)
    te_f = np.frombuffer(part(1), dtype=np.int8).reshape(n_test, 2, 3).astype(np.int64)
    tr_i = np.frombuffer(part(2), dtype=np.uint8).reshape(n_train, 2, size, size, 3).copy()
    te_i = np.frombuffer(part(3), dtype=np.uint8).reshape(n_test, 2, size, size, 3).copy()
    variant = DatasetVariant(kinds[code], n_train, n_test)
    return Dataset(variant, seed, Split(tr_f, tr_i), Split(te_f, te_i), size, gsize)


def file_checksum(path):
    with open(path, "rb") as fh:
        return _HEADER.unpack_from(fh.read(_HEADER.size))[-1].hex()
