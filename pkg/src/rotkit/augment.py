"""Image augmentation: the 16-op pool, mosaic composition, and the weak view.

Images are ``(H, W, 3)`` uint8 arrays (row-major RGB). Every operation
preserves the image dimensions; geometric ops fill exposed pixels with
mid-gray ``(128, 128, 128)`` and pixel ops clamp to ``[0, 255]``.

Magnitude mapping (``magnitude`` is a real in [0, 1]; "signed" means the
direction is drawn from the supplied generator):

    op           parameter                       range
    -----------  ------------------------------  --------------------
    invert       none (magnitude ignored)
    rotate       angle, signed                   0..30 degrees
    brightness   enhancement factor 0.1+1.8*m    0.1..1.9
    shearX       shear, signed                   0..0.3
    shearY       shear, signed                   0..0.3
    translateX   pixels, signed                  0..round(0.3*W)
    translateY   pixels, signed                  0..round(0.3*H)
    contrast     enhancement factor 0.1+1.8*m    0.1..1.9
    color        enhancement factor 0.1+1.8*m    0.1..1.9
    cutout       square side round(m*0.25*min)   0..0.25*min(W,H)
    equalize     none (magnitude ignored)
    flip         none (magnitude ignored)        horizontal mirror
    posterize    bits kept = 8 - round(4*m)      8..4 bits
    sharpness    enhancement factor 0.1+1.8*m    0.1..1.9
    solarize     threshold round(255*(1-m))      255..0
    solarizeAdd  add round(110*m) below 128      0..110

Enhancement factors of exactly 1.0 (magnitude 0.5) shortcut to a copy,
so they are bit-exact identities. The mapping is frozen by golden-image
hashes in the tests.

The default pool is the seven ops that survive pool selection
("selected7"): invert, rotate, brightness, shearX, shearY, translateX,
translateY. The full pool is available as "all16".

All functions are pure given an explicit ``numpy.random.Generator``;
batch callers parallelize by deriving one generator per sample (see
:mod:`rotkit.seeding`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

__all__ = [
    "OP_KINDS",
    "SELECTED7",
    "ALL16",
    "GRAY_FILL",
    "AugOp",
    "AugPool",
    "check_image",
    "apply_aug",
    "split_pairs",
    "PatchTrace",
    "MosaicTrace",
    "pose_mosaic",
    "pose_mosaic_traced",
    "weak_augment",
]

OP_KINDS = (
    "invert",
    "rotate",
    "brightness",
    "shearX",
    "shearY",
    "translateX",
    "translateY",
    "contrast",
    "color",
    "cutout",
    "equalize",
    "flip",
    "posterize",
    "sharpness",
    "solarize",
    "solarizeAdd",
)

SELECTED7 = OP_KINDS[:7]
ALL16 = OP_KINDS

GRAY_FILL = (128, 128, 128)


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 3) uint8 image and return it."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {a.dtype}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {a.shape}")
    if a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got {a.shape[:2]}")
    return a


@dataclass(frozen=True)
class AugOp:
    """One augmentation: a kind from :data:`OP_KINDS` plus a magnitude in [0, 1]."""

    kind: str
    magnitude: float

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not (0.0 <= self.magnitude <= 1.0):
            raise ValueError(f"magnitude must be in [0, 1], got {self.magnitude}")


@dataclass(frozen=True)
class AugPool:
    """The set of op kinds a mosaic may sample from."""

    ops: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.ops) == 0:
            raise ValueError("augmentation pool must be non-empty")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("augmentation pool has duplicate kinds")
        for kind in self.ops:
            if kind not in OP_KINDS:
                raise ValueError(f"unknown augmentation kind {kind!r}")

    @classmethod
    def from_config(cls, text: str) -> "AugPool":
        """Parse a pool spec: ``selected7``, ``all16``, or a comma list of kinds."""
        text = text.strip()
        if text == "selected7":
            return cls(ops=SELECTED7)
        if text == "all16":
            return cls(ops=ALL16)
        return cls(ops=tuple(part.strip() for part in text.split(",") if part.strip()))


DEFAULT_POOL = AugPool(ops=SELECTED7)


def _to_pil(img: np.ndarray) -> Image.Image:
    return Image.fromarray(img, mode="RGB")


def _from_pil(im: Image.Image) -> np.ndarray:
    return np.asarray(im, dtype=np.uint8)


def _sign(rng: np.random.Generator) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


def _translate(img: np.ndarray, dx: int, dy: int, fill: int = 128) -> np.ndarray:
    """Shift by whole pixels; exposed area gets ``fill``. Positive dx moves right."""
    h, w = img.shape[:2]
    out = np.full_like(img, fill)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def _enhance(img: np.ndarray, magnitude: float, enhancer) -> np.ndarray:
    factor = 0.1 + 1.8 * magnitude
    if factor == 1.0:
        return img.copy()
    return _from_pil(enhancer(_to_pil(img)).enhance(factor))


def apply_aug(op: AugOp, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one augmentation, returning a new image of the same shape.

    The generator supplies only the op's stochastic choices (direction
    signs, the cutout center); the magnitude-to-parameter mapping itself
    is deterministic per the table in the module docstring.
    """
    a = check_image(img)
    h, w = a.shape[:2]
    mag = op.magnitude
    kind = op.kind

    if kind == "invert":
        return 255 - a
    if kind == "rotate":
        angle = _sign(rng) * mag * 30.0
        return _from_pil(
            _to_pil(a).rotate(
                angle, resample=Image.Resampling.NEAREST, fillcolor=GRAY_FILL
            )
        )
    if kind == "brightness":
        return _enhance(a, mag, ImageEnhance.Brightness)
    if kind in ("shearX", "shearY"):
        s = _sign(rng) * mag * 0.3
        if kind == "shearX":
            coeffs = (1.0, s, 0.0, 0.0, 1.0, 0.0)
        else:
            coeffs = (1.0, 0.0, 0.0, s, 1.0, 0.0)
        return _from_pil(
            _to_pil(a).transform(
                (w, h),
                Image.Transform.AFFINE,
                coeffs,
                resample=Image.Resampling.NEAREST,
                fillcolor=GRAY_FILL,
            )
        )
    if kind == "translateX":
        return _translate(a, int(_sign(rng) * round(mag * 0.3 * w)), 0)
    if kind == "translateY":
        return _translate(a, 0, int(_sign(rng) * round(mag * 0.3 * h)))
    if kind == "contrast":
        return _enhance(a, mag, ImageEnhance.Contrast)
    if kind == "color":
        return _enhance(a, mag, ImageEnhance.Color)
    if kind == "cutout":
        side = int(round(mag * 0.25 * min(w, h)))
        if side == 0:
            return a.copy()
        cx = int(rng.integers(0, w))
        cy = int(rng.integers(0, h))
        x0 = max(0, cx - side // 2)
        y0 = max(0, cy - side // 2)
        x1 = min(w, x0 + side)
        y1 = min(h, y0 + side)
        out = a.copy()
        out[y0:y1, x0:x1] = 128
        return out
    if kind == "equalize":
        return _from_pil(ImageOps.equalize(_to_pil(a)))
    if kind == "flip":
        return a[:, ::-1].copy()
    if kind == "posterize":
        bits = 8 - int(round(4 * mag))
        mask = np.uint8(0xFF << (8 - bits) & 0xFF)
        return a & mask
    if kind == "sharpness":
        if min(w, h) < 3:
            # PIL's sharpness kernel needs a 3x3 neighborhood.
            return a.copy()
        return _enhance(a, mag, ImageEnhance.Sharpness)
    if kind == "solarize":
        threshold = int(round(255 * (1.0 - mag)))
        return np.where(a < threshold, a, 255 - a).astype(np.uint8)
    if kind == "solarizeAdd":
        add = int(round(110 * mag))
        bumped = np.clip(a.astype(np.int16) + add, 0, 255).astype(np.uint8)
        return np.where(a < 128, bumped, a)
    raise ValueError(f"unknown augmentation kind {kind!r}")  # pragma: no cover


def split_pairs(n: int) -> list[tuple[int, int]]:
    """All ordered factorizations ``(a, b)`` with ``a * b = n``, ascending in ``a``.

    These are the candidate mosaic grids: ``a`` rows by ``b`` columns.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [(a, n // a) for a in range(1, n + 1) if n % a == 0]


@dataclass(frozen=True)
class PatchTrace:
    """Provenance of one mosaic patch: what was applied and where it landed."""

    index: int
    kind: str
    magnitude: float
    seed: int
    x0: int
    x1: int
    y0: int
    y1: int


@dataclass(frozen=True)
class MosaicTrace:
    """Full provenance of one mosaic draw."""

    n: int
    a: int
    b: int
    patches: tuple[PatchTrace, ...]


def pose_mosaic_traced(
    img: np.ndarray, n: int, pool: AugPool, rng: np.random.Generator
) -> tuple[np.ndarray, MosaicTrace]:
    """Mosaic of ``n`` independently augmented copies of ``img``, with provenance.

    A grid ``(a, b)`` is chosen uniformly from ``split_pairs(n)``; patch
    ``i`` covers columns ``[floor(p*W/b), floor((p+1)*W/b))`` and rows
    ``[floor(q*H/a), floor((q+1)*H/a))`` with ``p = i mod b`` and
    ``q = i div b``, so the patches tile the image exactly and trailing
    patches absorb any remainder. Each patch is cut from a full-image
    augmentation with an independently sampled op, magnitude, and seed;
    the returned trace lets callers regenerate any patch bit-exactly.

    Draw order from ``rng``: grid index, then per patch kind index,
    magnitude, child seed.
    """
    a_img = check_image(img)
    pairs = split_pairs(n)
    a, b = pairs[int(rng.integers(len(pairs)))]
    h, w = a_img.shape[:2]
    out = np.empty_like(a_img)
    patches = []
    for i in range(n):
        p = i % b
        q = i // b
        x0, x1 = (p * w) // b, ((p + 1) * w) // b
        y0, y1 = (q * h) // a, ((q + 1) * h) // a
        kind = pool.ops[int(rng.integers(len(pool.ops)))]
        magnitude = float(rng.random())
        seed = int(rng.integers(0, 2**63))
        aug = apply_aug(
            AugOp(kind=kind, magnitude=magnitude), a_img, np.random.default_rng(seed)
        )
        out[y0:y1, x0:x1] = aug[y0:y1, x0:x1]
        patches.append(
            PatchTrace(
                index=i, kind=kind, magnitude=magnitude, seed=seed,
                x0=x0, x1=x1, y0=y0, y1=y1,
            )
        )
    return out, MosaicTrace(n=n, a=a, b=b, patches=tuple(patches))


def pose_mosaic(
    img: np.ndarray, n: int, pool: AugPool, rng: np.random.Generator
) -> np.ndarray:
    """Mosaic of ``n`` independently augmented copies of ``img``."""
    out, _ = pose_mosaic_traced(img, n, pool, rng)
    return out


def weak_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """The teacher's weak view: small translate plus mild brightness scale.

    Translation is by whole pixels up to 4 percent of each dimension
    (mid-gray fill); brightness multiplies by a factor in [0.9, 1.1]
    with round-half-even rounding, clamped to [0, 255]. Draw order:
    dx, dy, factor. A draw of zero translation and factor exactly 1.0
    returns the image unchanged.
    """
    a = check_image(img)
    h, w = a.shape[:2]
    max_dx = math.floor(0.04 * w)
    max_dy = math.floor(0.04 * h)
    dx = int(rng.integers(-max_dx, max_dx + 1))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    factor = float(rng.uniform(0.9, 1.1))
    out = _translate(a, dx, dy) if (dx or dy) else a.copy()
    if factor != 1.0:
        out = np.clip(np.rint(out.astype(np.float64) * factor), 0.0, 255.0).astype(
            np.uint8
        )
    return out
