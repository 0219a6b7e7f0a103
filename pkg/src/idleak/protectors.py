"""Reference template protectors.

Three deterministic, stateless transforms that keep high-frequency structure
while suppressing low frequencies:

* ``PARTIAL``  block-wise 8x8 DCT per colour channel; the lowest zig-zag
  sub-bands are always dropped and a seeded random subset of the rest is kept.
  Each kept sub-band contributes one 8x8 plane per colour channel, so the
  template has ``3 * n_selected`` channels.
* ``MINUS``    image minus its Gaussian blur (3 channels).
* ``HIGHPASS`` the same residual under its own tag; it is also the proxy task
  of the zero-knowledge attack.

All functions accept either an :class:`~idleak.corpus.ImageSample` or a raw
``H x W x 3`` array, and ``protect_batch`` maps ``N x H x W x 3`` arrays to
``N x C' x H' x W'`` templates.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.fft import dct
from scipy.ndimage import gaussian_filter

from .corpus import IMAGE_SIZE, ImageSample
from .util import rng_for, sha256_obj


class Method(str, enum.Enum):
    PARTIAL = "PARTIAL"
    MINUS = "MINUS"
    HIGHPASS = "HIGHPASS"


class InvalidConfigError(ValueError):
    pass


class InvalidImageError(ValueError):
    pass


DEFAULT_PARAMS = {
    Method.PARTIAL: {"block_size": 8, "n_selected": 24, "n_lowest_dropped": 8},
    Method.MINUS: {"sigma": 2.0},
    Method.HIGHPASS: {"sigma": 1.5},
}


@dataclass(frozen=True)
class ProtectorConfig:
    method: Method
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        method = Method(self.method.upper() if isinstance(self.method, str) else self.method)
        object.__setattr__(self, "method", method)
        merged = {**DEFAULT_PARAMS[method], **(self.params or {})}
        unknown = set(merged) - set(DEFAULT_PARAMS[method])
        if unknown:
            raise InvalidConfigError(f"unknown {method.value} parameters: {sorted(unknown)}")
        object.__setattr__(self, "params", merged)
        if method is Method.PARTIAL:
            bs, n_sel, n_drop = merged["block_size"], merged["n_selected"], merged["n_lowest_dropped"]
            if bs != 8:
                raise InvalidConfigError("block_size must be 8 for 64x64 images")
            if not 1 <= n_sel <= bs * bs:
                raise InvalidConfigError(f"n_selected must lie in [1, {bs * bs}]")
            if not 0 <= n_drop < bs * bs:
                raise InvalidConfigError(f"n_lowest_dropped must lie in [0, {bs * bs - 1}]")
            if n_sel > bs * bs - n_drop:
                raise InvalidConfigError(
                    f"n_selected={n_sel} exceeds the {bs * bs - n_drop} sub-bands left after dropping {n_drop}"
                )
        elif not merged["sigma"] > 0:
            raise InvalidConfigError("sigma must be > 0")

    @property
    def channels(self) -> int:
        if self.method is Method.PARTIAL:
            return 3 * self.params["n_selected"]
        return 3

    @property
    def spatial(self) -> int:
        if self.method is Method.PARTIAL:
            return IMAGE_SIZE // self.params["block_size"]
        return IMAGE_SIZE

    def to_dict(self) -> dict:
        return {"method": self.method.value, "seed": int(self.seed), "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> ProtectorConfig:
        return cls(Method(d["method"].upper()), int(d.get("seed", 0)), dict(d.get("params", {})))

    @property
    def config_hash(self) -> str:
        return sha256_obj(self.to_dict())[:16]

    def selected_subbands(self) -> tuple[int, ...]:
        """Zig-zag indices kept by a PARTIAL protector, ascending."""
        if self.method is not Method.PARTIAL:
            raise InvalidConfigError("only PARTIAL selects sub-bands")
        bs2 = self.params["block_size"] ** 2
        available = np.arange(self.params["n_lowest_dropped"], bs2)
        chosen = rng_for(self.seed, 5).permutation(available)[: self.params["n_selected"]]
        return tuple(sorted(int(k) for k in chosen))


@dataclass(frozen=True)
class ProtectedTemplate:
    tensor: np.ndarray
    method: Method
    config_hash: str
    # sub-band layout of PARTIAL channels; None for image-domain templates
    layout: tuple[int, ...] | None = None
    # evaluation bookkeeping only; attack code never reads it
    source_id: str | None = None


# -- transforms ---------------------------------------------------------------

@lru_cache(maxsize=None)
def zigzag_order(n: int = 8) -> tuple[tuple[int, int], ...]:
    """(row, col) of each zig-zag index, lowest frequency first."""
    cells = [(i, j) for i in range(n) for j in range(n)]
    cells.sort(key=lambda ij: (ij[0] + ij[1], ij[1] if (ij[0] + ij[1]) % 2 == 0 else ij[0]))
    return tuple(cells)


@lru_cache(maxsize=None)
def _dct_matrix(n: int) -> np.ndarray:
    return dct(np.eye(n), norm="ortho", axis=0)


def _as_batch(images) -> np.ndarray:
    if isinstance(images, ImageSample):
        images = images.pixels
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise InvalidImageError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE}x3 images, got shape {x.shape[-3:]}")
    return x


def block_dct(images: np.ndarray, block: int = 8) -> np.ndarray:
    """``N x H x W x C`` -> ``N x 64 x C x H/8 x W/8`` coefficients in zig-zag order."""
    n, h, w, c = images.shape
    d = _dct_matrix(block)
    blocks = images.reshape(n, h // block, block, w // block, block, c)
    # coef[n, by, bx, u, v, c] = sum_ij D[u,i] D[v,j] x[n, by, i, bx, j, c]
    coef = np.einsum("ui,vj,naibjc->nabuvc", d, d, blocks, optimize=True)
    zz = zigzag_order(block)
    rows = np.array([ij[0] for ij in zz])
    cols = np.array([ij[1] for ij in zz])
    out = coef[:, :, :, rows, cols, :]  # n, by, bx, k, c
    return out.transpose(0, 3, 4, 1, 2)


def inverse_block_dct(coef: np.ndarray, block: int = 8) -> np.ndarray:
    """Inverse of :func:`block_dct`."""
    n, k, c, gh, gw = coef.shape
    d = _dct_matrix(block)
    zz = zigzag_order(block)
    full = np.zeros((n, gh, gw, block, block, c))
    for idx, (u, v) in enumerate(zz[:k]):
        full[:, :, :, u, v, :] = coef[:, idx].transpose(0, 2, 3, 1)
    pix = np.einsum("ui,vj,nabuvc->naibjc", d, d, full, optimize=True)
    return pix.reshape(n, gh * block, gw * block, c)


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    """Channel-wise Gaussian blur of ``N x H x W x C`` images (reflect padding)."""
    return gaussian_filter(np.asarray(images, dtype=np.float64), sigma=(0, sigma, sigma, 0), mode="reflect")


def highpass_residual(images: np.ndarray, sigma: float) -> np.ndarray:
    """``images - blur(images)`` for ``N x H x W x C`` arrays, returned as ``N x C x H x W``."""
    x = np.asarray(images, dtype=np.float64)
    return (x - gaussian_blur(x, sigma)).transpose(0, 3, 1, 2)


def protect_batch(images, config: ProtectorConfig) -> np.ndarray:
    """Batch oracle: ``N x 64 x 64 x 3`` images to ``N x C' x H' x W'`` float32 templates."""
    if not isinstance(config, ProtectorConfig):
        raise InvalidConfigError("config must be a ProtectorConfig")
    x = _as_batch(images)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InvalidImageError("pixel values must lie in [0, 1]")
    if config.method is Method.PARTIAL:
        coef = block_dct(x, config.params["block_size"])
        keep = np.array(config.selected_subbands())
        sel = coef[:, keep]  # n, k, c, 8, 8
        out = sel.reshape(x.shape[0], -1, *sel.shape[-2:])
    else:
        out = highpass_residual(x, config.params["sigma"])
    return out.astype(np.float32)


def _wrap(tensor: np.ndarray, config: ProtectorConfig, image) -> ProtectedTemplate:
    layout = config.selected_subbands() if config.method is Method.PARTIAL else None
    sid = image.sample_id if isinstance(image, ImageSample) else None
    return ProtectedTemplate(tensor, config.method, config.config_hash, layout, sid or None)


def protect(image, config: ProtectorConfig) -> ProtectedTemplate:
    return _wrap(protect_batch(image, config)[0], config, image)


def _require(config: ProtectorConfig, method: Method) -> None:
    if config.method is not method:
        raise InvalidConfigError(f"expected a {method.value} config, got {config.method.value}")


def protect_partial(image, config: ProtectorConfig) -> ProtectedTemplate:
    _require(config, Method.PARTIAL)
    return protect(image, config)


def protect_minus(image, config: ProtectorConfig) -> ProtectedTemplate:
    _require(config, Method.MINUS)
    return protect(image, config)


def protect_highpass(image, config: ProtectorConfig) -> ProtectedTemplate:
    _require(config, Method.HIGHPASS)
    return protect(image, config)


def make_oracle(config: ProtectorConfig):
    """Batch-queryable conversion function with no hidden state."""

    def oracle(images: np.ndarray) -> np.ndarray:
        return protect_batch(images, config)

    oracle.channels = config.channels
    oracle.spatial = config.spatial
    oracle.config_hash = config.config_hash
    return oracle


def render_partial(tensor: np.ndarray, layout: tuple[int, ...], block: int = 8) -> np.ndarray:
    """Inverse DCT of PARTIAL template planes with missing sub-bands zero-filled.

    ``tensor`` is ``C' x 8 x 8`` or ``N x C' x 8 x 8``; returns ``(N x) 64 x 64 x 3``.
    """
    t = np.asarray(tensor, dtype=np.float64)
    single = t.ndim == 3
    if single:
        t = t[None]
    n = t.shape[0]
    if t.shape[1] != 3 * len(layout):
        raise InvalidConfigError(f"template has {t.shape[1]} channels, layout implies {3 * len(layout)}")
    planes = t.reshape(n, len(layout), 3, *t.shape[-2:])
    coef = np.zeros((n, block * block, 3, *t.shape[-2:]))
    coef[:, list(layout)] = planes
    img = inverse_block_dct(coef, block)
    return img[0] if single else img


def invert_full_partial(template: ProtectedTemplate) -> np.ndarray:
    """Exact inverse of a PARTIAL template that retains every sub-band."""
    if template.method is not Method.PARTIAL or template.layout is None:
        raise InvalidConfigError("not a PARTIAL template")
    if sorted(template.layout) != list(range(64)):
        raise InvalidConfigError("template does not retain all 64 sub-bands")
    return render_partial(template.tensor, template.layout)
