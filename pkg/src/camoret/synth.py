"""Procedural camouflage image-caption corpus and its binary shard format.

A sample is a background texture with one smooth object composited on top.
The object's texture interpolates between a fresh draw of the background's own
texture (camouflage level 1) and a conspicuous colour texture (level 0). The
caption is rendered from a closed grammar using the generation parameters, so
it is exact by construction.

Derived seeds: ``derive_seed(seed, name)`` is CRC32 of ``"{seed}:{name}"``.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cod import SoftMask, mask_iou
from .errors import (BadMagicError, ChecksumError, ConfigError, DataError, TruncatedError,
                     VersionMismatchError)
from .noise import fractal_noise
from .numerics import Stream
from .text import Vocabulary, tokenize

IMAGE_SIZE = 64
MIN_AREA, MAX_AREA = 0.04, 0.40
MAX_ATTEMPTS = 10
TEXTURE_KINDS = ("value_noise", "weave", "speckle")

SIZE_BUCKETS = {"small": (0.04, 0.10), "medium": (0.10, 0.20), "large": (0.20, 0.40)}

OBJECT_PALETTES = {
    "red": ((0.88, 0.16, 0.14), (0.66, 0.06, 0.10)),
    "orange": ((0.96, 0.58, 0.12), (0.82, 0.40, 0.04)),
    "yellow": ((0.96, 0.90, 0.22), (0.80, 0.74, 0.08)),
    "green": ((0.20, 0.82, 0.22), (0.08, 0.60, 0.14)),
    "blue": ((0.16, 0.32, 0.92), (0.08, 0.18, 0.70)),
    "purple": ((0.62, 0.22, 0.82), (0.44, 0.10, 0.60)),
    "pink": ((0.96, 0.52, 0.78), (0.86, 0.36, 0.62)),
    "cyan": ((0.20, 0.88, 0.92), (0.08, 0.68, 0.74)),
}

BACKGROUNDS = {
    "mossy": ("value_noise", ((0.36, 0.46, 0.26), (0.24, 0.32, 0.17))),
    "sandy": ("speckle", ((0.76, 0.68, 0.50), (0.64, 0.56, 0.40))),
    "rocky": ("value_noise", ((0.52, 0.52, 0.52), (0.36, 0.36, 0.38))),
    "leafy": ("weave", ((0.28, 0.46, 0.20), (0.42, 0.56, 0.28))),
    "muddy": ("value_noise", ((0.42, 0.31, 0.21), (0.29, 0.21, 0.14))),
    "snowy": ("speckle", ((0.90, 0.92, 0.96), (0.78, 0.80, 0.88))),
}

SHAPES = ("blob", "ellipse", "star", "diamond", "crescent")

POSITIONS = {
    "center": (0.5, 0.5),
    "top": (0.33, 0.5),
    "bottom": (0.67, 0.5),
    "left": (0.5, 0.33),
    "right": (0.5, 0.67),
}

TEMPLATE = "a {size} {texture} {shape} concealed on a {bg} background near the {position}"


@dataclass(frozen=True)
class GrammarSpec:
    sizes: tuple = tuple(SIZE_BUCKETS)
    textures: tuple = tuple(OBJECT_PALETTES)
    shapes: tuple = SHAPES
    backgrounds: tuple = tuple(BACKGROUNDS)
    positions: tuple = tuple(POSITIONS)
    template: str = TEMPLATE

    def render(self, size, texture, shape, bg, position):
        return self.template.format(size=size, texture=texture, shape=shape, bg=bg,
                                    position=position)

    def template_words(self):
        words = []
        for w in self.template.split():
            if not w.startswith("{") and w not in words:
                words.append(w)
        return words

    def vocabulary(self):
        words = self.template_words()
        for group in (self.sizes, self.textures, self.shapes, self.backgrounds, self.positions):
            words.extend(w for w in group if w not in words)
        return Vocabulary(words)

    def all_captions(self):
        for s in self.sizes:
            for t in self.textures:
                for sh in self.shapes:
                    for b in self.backgrounds:
                        for p in self.positions:
                            yield (s, t, sh, b, p), self.render(s, t, sh, b, p)


DEFAULT_GRAMMAR = GrammarSpec()


def derive_seed(seed, name):
    return zlib.crc32(f"{seed}:{name}".encode("utf-8"))


# ---------------------------------------------------------------- textures


def _pattern(kind, h, w, seed, scale):
    if kind == "value_noise":
        p = fractal_noise(h, w, seed, base_cell=scale, octaves=3, stream="texture")
        return np.clip((p - 0.5) * 2.2 + 0.5, 0.0, 1.0)
    if kind == "weave":
        st = Stream(seed, "weave")
        theta = st.uniform(low=0.0, high=math.pi)
        period = scale * st.uniform(low=0.5, high=0.9)
        ph1, ph2 = st.uniform(low=0, high=2 * math.pi), st.uniform(low=0, high=2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        u = xx * math.cos(theta) + yy * math.sin(theta)
        v = -xx * math.sin(theta) + yy * math.cos(theta)
        return (0.5 + 0.25 * np.sin(2 * math.pi * u / period + ph1)
                + 0.25 * np.sin(2 * math.pi * v / period + ph2))
    if kind == "speckle":
        st = Stream(seed, "speckle")
        raw = st.uniform((h, w))
        return np.clip(ndimage.uniform_filter(raw, size=2, mode="wrap") * 1.6 - 0.3, 0.0, 1.0)
    raise ConfigError(f"unknown texture kind {kind!r}; choose from {TEXTURE_KINDS}")


def gen_texture(kind, params, seed, size=IMAGE_SIZE):
    """(size, size, 3) texture in [0, 1] for ``kind`` with ``params['palette']``."""
    palette = params.get("palette", ((0.2, 0.2, 0.2), (0.8, 0.8, 0.8)))
    scale = params.get("scale", 8.0)
    p = _pattern(kind, size, size, seed, scale)[..., None]
    c0 = np.asarray(palette[0], dtype=np.float64)
    c1 = np.asarray(palette[1], dtype=np.float64)
    return np.clip(c0 + (c1 - c0) * p, 0.0, 1.0)


# ---------------------------------------------------------------- shapes


def _inside(shape, u, v, st_params):
    """Membership in normalised coordinates (unit-scale shape)."""
    if shape == "blob":
        r = np.hypot(u, v)
        th = np.arctan2(v, u)
        rad = 1.0 + sum(a * np.cos(k * th + ph) for k, a, ph in st_params["harmonics"])
        return r <= rad
    if shape == "ellipse":
        return u * u + (v / st_params["ratio"]) ** 2 <= 1.0
    if shape == "star":
        r = np.hypot(u, v)
        th = np.arctan2(v, u)
        return r <= 1.0 + 0.38 * np.cos(5 * th)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) * 1.3 <= 1.0
    if shape == "crescent":
        return (u * u + v * v <= 1.0) & ((u - 0.55) ** 2 + v * v > 0.75 ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _shape_params(shape, st):
    alpha = st.uniform(low=0.0, high=2 * math.pi)
    params = {"alpha": alpha}
    if shape == "blob":
        params["harmonics"] = [(k, st.uniform(low=0.05, high=0.18),
                                st.uniform(low=0.0, high=2 * math.pi)) for k in (2, 3, 4)]
    elif shape == "ellipse":
        params["ratio"] = st.uniform(low=0.45, high=0.75)
    return params


def _unit_area(shape, params, n=200):
    g = (np.arange(n) + 0.5) / n * 4.0 - 2.0
    u, v = np.meshgrid(g, g, indexing="ij")
    return _inside(shape, u, v, params).mean() * 16.0


def rasterize(shape, params, center, radius, size=IMAGE_SIZE, supersample=4):
    """Soft (size, size) coverage mask by supersampled point-in-shape tests."""
    n = size * supersample
    c = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(c, c, indexing="ij")
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = math.cos(params["alpha"]), math.sin(params["alpha"])
    u = (dx * ca + dy * sa) / radius
    v = (-dx * sa + dy * ca) / radius
    hit = _inside(shape, u, v, params).astype(np.float64)
    return hit.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def size_word(area_fraction):
    for word, (lo, hi) in SIZE_BUCKETS.items():
        if lo <= area_fraction < hi:
            return word
    return "large" if area_fraction >= MAX_AREA else "small"


# ---------------------------------------------------------------- samples


@dataclass
class CamoSample:
    image: np.ndarray
    gt_mask: SoftMask
    caption: str
    caption_tokens: list
    camo_level: float
    seed: int
    attributes: dict = field(default_factory=dict, compare=False)

    def __eq__(self, other):
        return (isinstance(other, CamoSample) and self.seed == other.seed
                and self.camo_level == other.camo_level and self.caption == other.caption
                and self.caption_tokens == other.caption_tokens
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt_mask.values, other.gt_mask.values))


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def gen_sample(camo_level, seed, grammar=DEFAULT_GRAMMAR, vocab=None, size=IMAGE_SIZE):
    """Render one camouflage sample; deterministic in ``(camo_level, seed)``."""
    if not 0.0 <= camo_level <= 1.0:
        raise ConfigError(f"camouflage level must lie in [0, 1], got {camo_level}")
    lam = float(np.float32(camo_level))
    vocab = vocab or grammar.vocabulary()
    for attempt in range(MAX_ATTEMPTS):
        st = Stream(seed, f"sample/{attempt}")
        bg_word = grammar.backgrounds[st.choice(len(grammar.backgrounds))]
        tex_word = grammar.textures[st.choice(len(grammar.textures))]
        shape = grammar.shapes[st.choice(len(grammar.shapes))]
        pos_word = grammar.positions[st.choice(len(grammar.positions))]
        target_bucket = grammar.sizes[st.choice(len(grammar.sizes))]
        lo, hi = SIZE_BUCKETS[target_bucket]
        target_area = st.uniform(low=lo + 0.1 * (hi - lo), high=hi - 0.1 * (hi - lo))
        obj_kind = TEXTURE_KINDS[st.choice(len(TEXTURE_KINDS))]
        obj_scale = st.uniform(low=5.0, high=10.0)
        bg_scale = st.uniform(low=5.0, high=10.0)
        jitter = st.uniform((2,), low=-3.0, high=3.0)
        params = _shape_params(shape, st)

        anchor = POSITIONS[pos_word]
        center = (anchor[0] * size + jitter[0], anchor[1] * size + jitter[1])
        radius = math.sqrt(target_area * size * size / _unit_area(shape, params))
        soft = rasterize(shape, params, center, radius, size)
        area = float((soft > 0.5).mean())
        if not MIN_AREA <= area <= MAX_AREA:
            continue

        bg_kind, bg_palette = BACKGROUNDS[bg_word]
        tag = f"{attempt}"
        background = gen_texture(bg_kind, {"palette": bg_palette, "scale": bg_scale},
                                 derive_seed(seed, "bg" + tag), size)
        mimic = gen_texture(bg_kind, {"palette": bg_palette, "scale": bg_scale},
                            derive_seed(seed, "mimic" + tag), size)
        distinct = gen_texture(obj_kind, {"palette": OBJECT_PALETTES[tex_word], "scale": obj_scale},
                               derive_seed(seed, "obj" + tag), size)
        obj = lam * mimic + (1.0 - lam) * distinct
        m = soft[..., None]
        image = _f32(m * obj + (1.0 - m) * background)
        mask = SoftMask(_f32(soft), "ground_truth")
        caption = grammar.render(size_word(area), tex_word, shape, bg_word, pos_word)
        attrs = {"size": size_word(area), "texture": tex_word, "shape": shape, "bg": bg_word,
                 "position": pos_word, "area": area, "object_kind": obj_kind, "attempt": attempt}
        return CamoSample(image, mask, caption, tokenize(caption, vocab), lam, int(seed), attrs)
    raise DataError(f"seed {seed}: no valid object after {MAX_ATTEMPTS} attempts")


def split_seeds(n, base_seed, split):
    """Seed ranges: train uses offsets [0, 500000), test [500000, 1000000)."""
    offset = {"train": 0, "test": 500_000}[split]
    if n > 500_000:
        raise ConfigError("split size exceeds its seed range")
    start = base_seed * 1_000_000 + offset
    return list(range(start, start + n))


def gen_corpus(n, base_seed, split, camo_range=(0.6, 1.0), grammar=DEFAULT_GRAMMAR):
    lo, hi = camo_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"invalid camouflage range {camo_range}")
    vocab = grammar.vocabulary()
    out = []
    for s in split_seeds(n, base_seed, split):
        lam = Stream(s, "camo-level").uniform(low=lo, high=hi)
        out.append(gen_sample(lam, s, grammar, vocab))
    return out


# ---------------------------------------------------------------- camouflage certificate


def contrast_energy(image, window=5):
    """Squared distance of the local mean colour from the image's median colour."""
    img = np.asarray(image, dtype=np.float64)
    local = ndimage.uniform_filter(img, size=(window, window, 1), mode="reflect")
    ref = np.median(img.reshape(-1, img.shape[-1]), axis=0)
    return ((local - ref) ** 2).sum(axis=-1)


def otsu_threshold(values, bins=256):
    v = np.asarray(values, dtype=np.float64).ravel()
    hist, edges = np.histogram(v, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(centers[int(np.argmax(between))])


def contrast_detector(image, window=5):
    """Training-free foreground guess: Otsu split of the contrast energy map."""
    e = contrast_energy(image, window)
    return (e > otsu_threshold(e)).astype(np.float64)


def detector_iou(sample, window=5):
    return mask_iou(contrast_detector(sample.image, window), sample.gt_mask)


def region_stats(sample, ring=4):
    """Mean colour and mean per-channel std inside the object and in a ring around it."""
    fg = sample.gt_mask.values > 0.5
    grown = ndimage.binary_dilation(fg, iterations=ring)
    shell = grown & ~ndimage.binary_dilation(fg, iterations=1)
    img = sample.image
    return {
        "mean_in": img[fg].mean(axis=0), "mean_ring": img[shell].mean(axis=0),
        "std_in": img[fg].std(axis=0).mean(), "std_ring": img[shell].std(axis=0).mean(),
        "mean_bg": img[~fg].mean(axis=0),
    }


# ---------------------------------------------------------------- shard format

MAGIC = b"CAMO"
VERSION = 1


def _encode_record(s):
    img = np.asarray(s.image, dtype="<f4")
    H, W = img.shape[:2]
    cap = s.caption.encode("utf-8")
    toks = list(s.caption_tokens)
    return b"".join([
        struct.pack("<IfII", s.seed, s.camo_level, H, W),
        img.tobytes(),
        np.asarray(s.gt_mask.values, dtype="<f4").tobytes(),
        struct.pack("<I", len(toks)),
        np.asarray(toks, dtype="<u4").tobytes(),
        struct.pack("<I", len(cap)),
        cap,
    ])


def write_shard(samples, path):
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty shard")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(samples)))
        for s in samples:
            payload = _encode_record(s)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_shard(path, vocab=None):
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a CAMO shard")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: shard version {version}, expected {VERSION}")
    samples = []
    for i in range(count):
        start = r.pos
        seed, lam, H, W = r.unpack("<IfII", f"record {i} header")
        img = np.frombuffer(r.take(H * W * 3 * 4, f"record {i} image"), dtype="<f4")
        mask = np.frombuffer(r.take(H * W * 4, f"record {i} mask"), dtype="<f4")
        (nt,) = r.unpack("<I", f"record {i} token count")
        toks = np.frombuffer(r.take(4 * nt, f"record {i} tokens"), dtype="<u4")
        (nc,) = r.unpack("<I", f"record {i} caption length")
        cap = r.take(nc, f"record {i} caption")
        payload = buf[start:r.pos]
        (crc,) = r.unpack("<I", f"record {i} checksum")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in record {i}", record=i)
        caption = cap.decode("utf-8")
        samples.append(CamoSample(
            img.astype(np.float64).reshape(H, W, 3),
            SoftMask(mask.astype(np.float64).reshape(H, W)),
            caption, [int(t) for t in toks], float(lam), int(seed)))
    if r.pos != len(buf):
        raise DataError(f"{path}: {len(buf) - r.pos} trailing bytes after {count} records")
    return samples


def corpus_arrays(samples):
    """Stack samples into (images, gt masks, token lists, captions)."""
    return (np.stack([s.image for s in samples]), np.stack([s.gt_mask.values for s in samples]),
            [list(s.caption_tokens) for s in samples], [s.caption for s in samples])
