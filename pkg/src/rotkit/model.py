"""A small regressor from (image, category) to an orientation-distribution parameter.

Architecture: two stride-2 valid 3x3 convolutions with ReLU, flatten,
concatenate a learned per-category embedding, then one affine head
producing 9 reals reshaped row-major to a 3x3 parameter matrix. All math
is float64 numpy so finite-difference gradient checks are tight, and a
hand-written backward keeps the whole training step free of framework
dependencies.

Images enter as (H, W, 3) uint8 and are normalized to ``x/255 - 0.5``
before the first layer.

The same :class:`RegressorParams` container is used for parameters,
gradients, and optimizer velocities; :func:`map_params` applies an
elementwise function across such containers. Checkpoints serialize the
config as JSON plus the tensors as raw little-endian float64 in
declaration order (see :func:`save_checkpoint`).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

__all__ = [
    "ModelConfig",
    "RegressorParams",
    "TENSOR_FIELDS",
    "NonFiniteGradient",
    "init_params",
    "map_params",
    "zeros_like_params",
    "forward",
    "forward_many",
    "backward",
    "SgdState",
    "sgd_step",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
]

_KERNEL = 3
_STRIDE = 2

CHECKPOINT_MAGIC = b"RKMC"
CHECKPOINT_VERSION = 1


class NonFiniteGradient(ValueError):
    """Raised when a gradient or update contains NaN or infinity."""


def _conv_out(size: int) -> int:
    return (size - _KERNEL) // _STRIDE + 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape-defining hyperparameters of the regressor."""

    width: int
    height: int
    n_categories: int
    conv_channels: tuple[int, int] = (8, 16)
    embedding_dim: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_categories < 1:
            raise ValueError("n_categories must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if len(self.conv_channels) != 2 or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be two positive ints")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if min(self.feature_hw(2)) < 1:
            raise ValueError(
                f"input {self.width}x{self.height} too small for two stride-2 convolutions"
            )

    def feature_hw(self, layer: int) -> tuple[int, int]:
        """Spatial size after ``layer`` (1 or 2) convolutions."""
        h, w = self.height, self.width
        for _ in range(layer):
            h, w = _conv_out(h), _conv_out(w)
        return h, w

    @property
    def flat_dim(self) -> int:
        h2, w2 = self.feature_hw(2)
        return h2 * w2 * self.conv_channels[1]

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_categories": self.n_categories,
            "conv_channels": list(self.conv_channels),
            "embedding_dim": self.embedding_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class RegressorParams:
    """Named bundle of the model's tensors (also reused for grads/velocities)."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    embed: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray


TENSOR_FIELDS = tuple(f.name for f in fields(RegressorParams))


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.conv_channels
    return {
        "conv1_w": (c1, 3, _KERNEL, _KERNEL),
        "conv1_b": (c1,),
        "conv2_w": (c2, c1, _KERNEL, _KERNEL),
        "conv2_b": (c2,),
        "embed": (cfg.n_categories, cfg.embedding_dim),
        "head_w": (cfg.flat_dim + cfg.embedding_dim, 9),
        "head_b": (9,),
    }


def map_params(fn, *param_sets: RegressorParams) -> RegressorParams:
    """Apply ``fn`` tensorwise across one or more parameter bundles."""
    return RegressorParams(
        **{
            name: fn(*(getattr(p, name) for p in param_sets))
            for name in TENSOR_FIELDS
        }
    )


def zeros_like_params(params: RegressorParams) -> RegressorParams:
    return map_params(np.zeros_like, params)


def init_params(cfg: ModelConfig) -> RegressorParams:
    """He-style init for the convolutions, a small random head, zero biases.

    The head scale keeps the initial output near the zero matrix, i.e.
    near-uniform initial orientation predictions.
    """
    rng = np.random.default_rng(cfg.seed)
    c1, c2 = cfg.conv_channels
    conv1_w = rng.normal(size=(c1, 3, 3, 3)) * np.sqrt(2.0 / (3 * 9))
    conv2_w = rng.normal(size=(c2, c1, 3, 3)) * np.sqrt(2.0 / (c1 * 9))
    embed = rng.normal(size=(cfg.n_categories, cfg.embedding_dim)) / np.sqrt(
        cfg.embedding_dim
    )
    d = cfg.flat_dim + cfg.embedding_dim
    head_w = rng.normal(size=(d, 9)) * (0.1 / np.sqrt(d))
    return RegressorParams(
        conv1_w=conv1_w,
        conv1_b=np.zeros(c1),
        conv2_w=conv2_w,
        conv2_b=np.zeros(c2),
        embed=embed,
        head_w=head_w,
        head_b=np.zeros(9),
    )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, C*9) patches for a stride-2 valid 3x3 conv."""
    win = np.lib.stride_tricks.sliding_window_view(x, (_KERNEL, _KERNEL), axis=(1, 2))
    win = win[:, ::_STRIDE, ::_STRIDE]
    b, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, ho, wo, -1)


@dataclass
class ForwardCache:
    """Intermediates retained for backward, tied to the producing params."""

    params: RegressorParams
    cols1: np.ndarray
    mask1: np.ndarray
    cols2: np.ndarray
    mask2: np.ndarray
    feat: np.ndarray
    cats: np.ndarray
    h1_shape: tuple[int, ...]


def _check_batch(cfg: ModelConfig, imgs: np.ndarray, cats: np.ndarray):
    if imgs.dtype != np.uint8 or imgs.ndim != 4 or imgs.shape[3] != 3:
        raise ValueError(f"expected (B, H, W, 3) uint8 images, got {imgs.shape} {imgs.dtype}")
    if imgs.shape[1] != cfg.height or imgs.shape[2] != cfg.width:
        raise ValueError(
            f"image size {imgs.shape[2]}x{imgs.shape[1]} does not match the "
            f"configured {cfg.width}x{cfg.height}"
        )
    if cats.ndim != 1 or cats.shape[0] != imgs.shape[0]:
        raise ValueError("category array must be 1-D and match the batch size")
    if np.any(cats < 0) or np.any(cats >= cfg.n_categories):
        raise ValueError(f"category id outside [0, {cfg.n_categories})")


def forward_many(
    cfg: ModelConfig, params: RegressorParams, imgs: np.ndarray, cats: np.ndarray
) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass: (B, H, W, 3) uint8 + (B,) ids -> (B, 3, 3) params.

    Deterministic and pure; the cache holds what backward needs and is
    bound to this exact ``params`` object.
    """
    imgs = np.asarray(imgs)
    cats = np.asarray(cats, dtype=np.int64)
    _check_batch(cfg, imgs, cats)
    x = imgs.astype(np.float64) / 255.0 - 0.5

    c1 = params.conv1_w.shape[0]
    cols1 = _im2col(x)
    a1 = cols1 @ params.conv1_w.reshape(c1, -1).T + params.conv1_b
    mask1 = a1 > 0.0
    h1 = np.where(mask1, a1, 0.0)

    c2 = params.conv2_w.shape[0]
    cols2 = _im2col(h1)
    a2 = cols2 @ params.conv2_w.reshape(c2, -1).T + params.conv2_b
    mask2 = a2 > 0.0
    h2 = np.where(mask2, a2, 0.0)

    b = imgs.shape[0]
    flat = h2.reshape(b, -1)
    feat = np.concatenate([flat, params.embed[cats]], axis=1)
    f9 = feat @ params.head_w + params.head_b
    fs = f9.reshape(b, 3, 3)
    cache = ForwardCache(
        params=params,
        cols1=cols1,
        mask1=mask1,
        cols2=cols2,
        mask2=mask2,
        feat=feat,
        cats=cats,
        h1_shape=h1.shape,
    )
    return fs, cache


def forward(
    cfg: ModelConfig, params: RegressorParams, img: np.ndarray, category: int
) -> tuple[np.ndarray, ForwardCache]:
    """Single-sample convenience wrapper around :func:`forward_many`."""
    fs, cache = forward_many(
        cfg, params, np.asarray(img)[None], np.array([category], dtype=np.int64)
    )
    return fs[0], cache


def backward(
    params: RegressorParams, cache: ForwardCache, upstream: np.ndarray
) -> RegressorParams:
    """Gradients of ``sum_i <upstream_i, F_i>`` w.r.t. every parameter.

    ``upstream`` is dloss/dF, shape (3, 3) for a single-sample cache or
    (B, 3, 3) for a batch. Scaling (e.g. 1/B for a mean loss) is the
    caller's responsibility. The cache must come from a forward pass
    with this exact ``params`` object.
    """
    if cache.params is not params:
        raise ValueError("stale cache: backward params differ from forward params")
    up = np.asarray(upstream, dtype=np.float64)
    b = cache.feat.shape[0]
    if up.shape == (3, 3):
        up = up[None]
    if up.shape != (b, 3, 3):
        raise ValueError(f"upstream shape {up.shape} does not match batch size {b}")

    df9 = up.reshape(b, 9)
    d_head_w = cache.feat.T @ df9
    d_head_b = df9.sum(axis=0)
    dfeat = df9 @ params.head_w.T

    flat_dim = cache.feat.shape[1] - params.embed.shape[1]
    d_embed = np.zeros_like(params.embed)
    np.add.at(d_embed, cache.cats, dfeat[:, flat_dim:])

    c2 = params.conv2_w.shape[0]
    dh2 = dfeat[:, :flat_dim].reshape(cache.mask2.shape)
    da2 = np.where(cache.mask2, dh2, 0.0)
    d_conv2_w = np.tensordot(da2, cache.cols2, axes=([0, 1, 2], [0, 1, 2])).reshape(
        params.conv2_w.shape
    )
    d_conv2_b = da2.sum(axis=(0, 1, 2))

    dh1 = np.zeros(cache.h1_shape)
    ho2, wo2 = da2.shape[1:3]
    for kh in range(_KERNEL):
        for kw in range(_KERNEL):
            contrib = da2 @ params.conv2_w[:, :, kh, kw]
            dh1[
                :,
                kh : kh + _STRIDE * ho2 : _STRIDE,
                kw : kw + _STRIDE * wo2 : _STRIDE,
                :,
            ] += contrib

    da1 = np.where(cache.mask1, dh1, 0.0)
    d_conv1_w = np.tensordot(da1, cache.cols1, axes=([0, 1, 2], [0, 1, 2])).reshape(
        params.conv1_w.shape
    )
    d_conv1_b = da1.sum(axis=(0, 1, 2))

    return RegressorParams(
        conv1_w=d_conv1_w,
        conv1_b=d_conv1_b,
        conv2_w=d_conv2_w,
        conv2_b=d_conv2_b,
        embed=d_embed,
        head_w=d_head_w,
        head_b=d_head_b,
    )


@dataclass
class SgdState:
    """Momentum velocities, one tensor per parameter tensor."""

    velocity: RegressorParams

    @classmethod
    def zeros(cls, params: RegressorParams) -> "SgdState":
        return cls(velocity=zeros_like_params(params))


def sgd_step(
    params: RegressorParams,
    grads: RegressorParams,
    state: SgdState,
    lr: float,
    momentum: float = 0.9,
) -> tuple[RegressorParams, SgdState]:
    """One SGD-with-momentum step: v <- m*v + g, p <- p - lr*v.

    Returns fresh (params, state); inputs are not mutated. Non-finite
    gradients raise :class:`NonFiniteGradient` so the trainer can abort
    with context instead of silently corrupting the parameters.
    """
    for name in TENSOR_FIELDS:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    new_v = map_params(lambda v, g: momentum * v + g, state.velocity, grads)
    new_p = map_params(lambda p, v: p - lr * v, params, new_v)
    return new_p, SgdState(velocity=new_v)


def ema_update(
    teacher: RegressorParams, student: RegressorParams, m: float
) -> RegressorParams:
    """Exponential moving average: every tensor t' <- m*t' + (1-m)*s."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1), got {m}")
    for name in TENSOR_FIELDS:
        if getattr(teacher, name).shape != getattr(student, name).shape:
            raise ValueError(f"shape mismatch in {name}")
    return map_params(lambda t, s: m * t + (1.0 - m) * s, teacher, student)


def save_checkpoint(path, cfg: ModelConfig, params: RegressorParams) -> None:
    """Write magic + version + config JSON + tensors (LE float64, declaration order)."""
    cfg_bytes = json.dumps(cfg.to_json_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    shapes = _tensor_shapes(cfg)
    for name in TENSOR_FIELDS:
        t = np.asarray(getattr(params, name), dtype=np.float64)
        if t.shape != shapes[name]:
            raise ValueError(f"{name} has shape {t.shape}, config implies {shapes[name]}")
        buf.write(t.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, RegressorParams]:
    """Read a checkpoint written by :func:`save_checkpoint`, validating layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    cfg = ModelConfig.from_json_dict(json.loads(blob[12 : 12 + cfg_len].decode("utf-8")))
    offset = 12 + cfg_len
    tensors = {}
    for name, shape in _tensor_shapes(cfg).items():
        n = int(np.prod(shape))
        raw = blob[offset : offset + 8 * n]
        if len(raw) != 8 * n:
            raise ValueError(f"checkpoint truncated in {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return cfg, RegressorParams(**tensors)
