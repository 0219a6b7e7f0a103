"""Minimal-assumption attack: one proxy student trained on a Gaussian high-pass task.

Nothing here imports or queries a protector oracle during training; the only
transform used to build training inputs is :func:`highpass_residual`. Thirty
known image/template pairs per target method are used for validation only.
"""
from __future__ import annotations

import time
from functools import lru_cache
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedder import (
    DistillConfig,
    EmbedderModel,
    Source,
    align_to_teacher,
    build_student,
    dataset_hash,
    embed_images,
)
from .protectors import Method, ProtectedTemplate, highpass_residual, render_partial

ZK_PAIR_COUNT = 30


class PairBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ProxyAugmentation:
    sigma_range: tuple[float, float] = (0.8, 3.0)
    strength_range: tuple[float, float] = (0.5, 1.5)
    # "per-sample" draws fresh (sigma, strength) for every image; "fixed" uses the range midpoints
    seed_policy: str = "per-sample"

    def __post_init__(self):
        for lo, hi in (self.sigma_range, self.strength_range):
            if not (0 < lo <= hi):
                raise ValueError("augmentation ranges must be non-empty and positive")
        if self.seed_policy not in ("per-sample", "fixed"):
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def proxy_inputs(images: np.ndarray, aug: ProxyAugmentation, rng: np.random.Generator) -> np.ndarray:
    """Augmented high-pass residuals ``N x 3 x 64 x 64`` for a batch of images."""
    n = len(images)
    if aug.seed_policy == "fixed":
        sigmas = np.full(n, float(np.mean(aug.sigma_range)))
        strengths = np.full(n, float(np.mean(aug.strength_range)))
    else:
        sigmas = rng.uniform(*aug.sigma_range, n)
        strengths = rng.uniform(*aug.strength_range, n)
    out = [s * highpass_residual(img[None], sig)[0] for img, sig, s in zip(images, sigmas, strengths)]
    return np.stack(out).astype(np.float32)


@dataclass
class ZkConfig(DistillConfig):
    input_norm: str = "rms"
    minus_sigma: float = 6.0
    partial_deblock_sigma: float | None = 2.0


def zk_train(teacher: EmbedderModel, train_images: np.ndarray, augmentation: ProxyAugmentation | None = None,
             config: ZkConfig | None = None) -> EmbedderModel:
    """Train the single proxy student; no protector is consulted."""
    augmentation = augmentation or ProxyAugmentation()
    config = config or ZkConfig()
    student = build_student(teacher, 3, train_images.shape[1], config.init, config.input_norm, config.seed,
                            config.adapter_hidden)
    t0 = time.time()
    losses = align_to_teacher(teacher, student, lambda b, rng: proxy_inputs(b, augmentation, rng),
                              train_images, config, where="zk_train")
    manifest = {
        "kind": "proxy_student",
        "provenance": "oracle-free: trained on Gaussian high-pass residuals only",
        "protector_config_hashes": [],
        "seed": config.seed,
        "config": asdict(config),
        "augmentation": augmentation.to_dict(),
        "loss_curve": losses,
        "teacher_param_hash": teacher.param_hash,
        "data_hash": dataset_hash(train_images),
        "wall_clock_s": time.time() - t0,
    }
    return EmbedderModel(student, Source.PROXY_STUDENT, manifest)


PREPROCESS_TABLE = {
    Method.MINUS.value: "Gaussian high-pass filter (image minus blur) at the configured sigma",
    Method.HIGHPASS.value: "passthrough",
    Method.PARTIAL.value: ("inverse block DCT of the available sub-bands (missing ones zero-filled); if the DC band "
                           "is missing, per-block offsets are re-estimated from boundary continuity and the result "
                           "is high-pass filtered at the deblock sigma; otherwise passthrough"),
}


@lru_cache(maxsize=8)
def _offset_solver(gh: int, gw: int) -> tuple[np.ndarray, tuple, tuple]:
    """Least-squares map from neighbouring-block boundary steps to per-block offsets (mean fixed at zero)."""
    h_pairs = [(i * gw + j, i * gw + j + 1) for i in range(gh) for j in range(gw - 1)]
    v_pairs = [(i * gw + j, (i + 1) * gw + j) for i in range(gh - 1) for j in range(gw)]
    a = np.zeros((len(h_pairs) + len(v_pairs) + 1, gh * gw))
    for row, (p, q) in enumerate(h_pairs + v_pairs):
        a[row, p], a[row, q] = -1.0, 1.0
    a[-1] = 1.0
    return np.linalg.pinv(a), tuple(h_pairs), tuple(v_pairs)


def restore_block_offsets(images: np.ndarray, block: int = 8) -> np.ndarray:
    """Re-estimate the per-block means lost with the DC band, for ``N x C x H x W`` renderings.

    Each block is shifted so that pixel steps across block borders are zero on
    average, in the least-squares sense. The global mean stays undetermined and is
    set to zero.
    """
    x = np.asarray(images, dtype=np.float64)
    n, c, h, w = x.shape
    gh, gw = h // block, w // block
    solver, h_pairs, v_pairs = _offset_solver(gh, gw)
    blocks = x.reshape(n, c, gh, block, gw, block)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, gh * gw, block, block)
    steps = [(flat[:, :, p, :, -1] - flat[:, :, q, :, 0]).mean(-1) for p, q in h_pairs]
    steps += [(flat[:, :, p, -1, :] - flat[:, :, q, 0, :]).mean(-1) for p, q in v_pairs]
    rhs = np.stack(steps + [np.zeros((n, c))], axis=-1)
    offsets = (rhs @ solver.T).reshape(n, c, gh, 1, gw, 1)
    return (blocks + offsets).reshape(n, c, h, w)


def zk_preprocess_tensor(tensor: np.ndarray, method: Method | str, layout=None, minus_sigma: float = 6.0,
                         partial_deblock_sigma: float | None = 2.0) -> np.ndarray:
    """Batch form of :func:`zk_preprocess`: ``N x C' x H' x W'`` -> ``N x 3 x 64 x 64``."""
    method = Method(method)
    t = np.asarray(tensor)
    if method is Method.HIGHPASS:
        return t
    if method is Method.MINUS:
        return highpass_residual(t.transpose(0, 2, 3, 1), minus_sigma).astype(np.float32)
    if method is Method.PARTIAL:
        if layout is None:
            raise ValueError("PARTIAL templates need their sub-band layout")
        img = render_partial(t, tuple(layout)).transpose(0, 3, 1, 2)
        if 0 not in tuple(layout) and partial_deblock_sigma:
            img = highpass_residual(restore_block_offsets(img).transpose(0, 2, 3, 1), partial_deblock_sigma)
        return img.astype(np.float32)
    raise ValueError(f"unknown method {method!r}")


def zk_preprocess(template: ProtectedTemplate, minus_sigma: float = 6.0,
                  partial_deblock_sigma: float | None = 2.0) -> np.ndarray:
    """Map any supported template to the proxy's 3-channel image-domain input."""
    try:
        method = Method(template.method)
    except ValueError:
        raise ValueError(f"unknown method tag {template.method!r}") from None
    return zk_preprocess_tensor(template.tensor[None], method, template.layout, minus_sigma,
                                partial_deblock_sigma)[0]


@dataclass
class ZkValidationSet:
    method: Method
    images: np.ndarray
    templates: list[ProtectedTemplate]
    provenance: str = "known image/template pairs; validation only"

    def __post_init__(self):
        if len(self.templates) != ZK_PAIR_COUNT or len(self.images) != ZK_PAIR_COUNT:
            raise PairBudgetError(f"exactly {ZK_PAIR_COUNT} pairs are required, got "
                                  f"{len(self.images)} images and {len(self.templates)} templates")


@dataclass
class ZkValidationReport:
    method: str
    mean_cosine: float
    floor: float
    go: bool
    per_pair: list[float] = field(default_factory=list)
    note: str = "the 30 pairs gate go/no-go and seed selection only; they never enter training"

    def to_dict(self) -> dict:
        return asdict(self)


def zk_validate(proxy: EmbedderModel, validation: ZkValidationSet, teacher: EmbedderModel, floor: float = 0.3,
                minus_sigma: float = 6.0, partial_deblock_sigma: float | None = 2.0) -> ZkValidationReport:
    if len(validation.templates) != ZK_PAIR_COUNT:
        raise PairBudgetError(f"exactly {ZK_PAIR_COUNT} pairs are required")
    if proxy.source is Source.PROXY_STUDENT:
        inputs = np.stack([zk_preprocess(t, minus_sigma, partial_deblock_sigma) for t in validation.templates])
    else:
        inputs = np.stack([t.tensor for t in validation.templates])
    s = proxy.embed_array(inputs)
    t = embed_images(teacher, validation.images)
    per = np.sum(s * t, axis=1)
    mean = float(per.mean())
    return ZkValidationReport(validation.method.value, mean, floor, mean >= floor, [float(x) for x in per])
