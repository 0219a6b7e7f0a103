"""Regeneration attack: embedding-conditioned decoder plus FAR-calibrated verification.

The decoder stands in for a diffusion backend behind the same plug-in contract,
``(embedding, noise) -> image``. Verification emulates a commercial verifier
that publishes thresholds at fixed false-accept rates.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_model, write_model
from .corpus import IMAGE_SIZE, Dataset
from .embedder import EMBED_DIM, Embedding, EmbedderModel, embed_images
from .training import (
    BatchSampler,
    check_finite,
    cosine_lr,
    load_state_arrays,
    seed_everything,
    state_arrays,
    to_nchw,
)
from .util import dump_json, load_json, sha256_array, sha256_obj

log = logging.getLogger(__name__)

FAR_LEVELS = (1e-3, 1e-4, 1e-5)
BASELINE_LEVEL = 1e-3


class UntrainedModelError(RuntimeError):
    pass


class InsufficientImpostorsError(ValueError):
    pass


class ImageGenerator(Protocol):
    """Plug-in contract for regeneration backends."""

    embed_dim: int
    noise_dim: int

    def generate(self, embeddings: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """``N x d`` embeddings and ``N x k`` noise -> ``N x 64 x 64 x 3`` images in [0, 1]."""


class DecoderNet(nn.Module):
    """Linear stem to 4x4, four nearest-upsample + conv stages, sigmoid output."""

    def __init__(self, embed_dim: int = EMBED_DIM, noise_dim: int = 32, widths: tuple[int, ...] = (64, 32, 16, 8)):
        super().__init__()
        self.embed_dim, self.noise_dim, self.widths = embed_dim, noise_dim, tuple(widths)
        self.stem = nn.Linear(embed_dim + noise_dim, self.widths[0] * 16)
        layers: list[nn.Module] = [nn.BatchNorm2d(self.widths[0]), nn.ReLU(inplace=True)]
        prev = self.widths[0]
        for w in self.widths:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(prev, w, 3, padding=1, bias=False),
                       nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            prev = w
        layers.append(nn.Conv2d(prev, 3, 3, padding=1))
        self.body = nn.Sequential(*layers)
        if IMAGE_SIZE != 4 * 2 ** len(self.widths):
            raise ValueError("decoder depth does not reach 64x64")

    def descriptor(self) -> dict:
        return {"kind": "decoder", "embed_dim": self.embed_dim, "noise_dim": self.noise_dim, "widths": list(self.widths)}

    def forward(self, emb: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        h = self.stem(torch.cat([emb, noise], dim=1)).view(-1, self.widths[0], 4, 4)
        return torch.sigmoid(self.body(h))


@dataclass
class DecoderConfig:
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 2e-3
    identity_weight: float = 1.0
    pixel_weight: float = 1.0
    noise_dim: int = 32
    widths: tuple[int, ...] = (64, 32, 16, 8)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size and learning_rate must be positive")
        if self.identity_weight < 0 or self.pixel_weight < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DecoderModel:
    net: DecoderNet | None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net is not None:
            self.net.eval()

    @property
    def embed_dim(self) -> int:
        return self._require().embed_dim

    @property
    def noise_dim(self) -> int:
        return self._require().noise_dim

    def _require(self) -> DecoderNet:
        if self.net is None:
            raise UntrainedModelError("decoder has not been trained")
        return self.net

    @property
    def param_hash(self) -> str:
        return sha256_obj({k: sha256_array(v) for k, v in state_arrays(self._require()).items()})

    @torch.no_grad()
    def generate(self, embeddings: np.ndarray, noise: np.ndarray, batch_size: int = 256) -> np.ndarray:
        net = self._require()
        e = np.asarray(embeddings, dtype=np.float32)
        z = np.asarray(noise, dtype=np.float32)
        if e.ndim != 2 or e.shape[1] != net.embed_dim:
            raise ValueError(f"decoder expects {net.embed_dim}-d embeddings, got shape {e.shape}")
        if z.shape != (len(e), net.noise_dim):
            raise ValueError(f"noise must have shape ({len(e)}, {net.noise_dim}), got {z.shape}")
        net.eval()
        out = [net(torch.from_numpy(e[i:i + batch_size]), torch.from_numpy(z[i:i + batch_size])).numpy()
               for i in range(0, len(e), batch_size)]
        imgs = np.concatenate(out).transpose(0, 2, 3, 1) if out else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3))
        return np.clip(imgs, 0.0, 1.0).astype(np.float32)

    def save(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        net = self._require()
        write_model(out / "model.flgm", {"architecture": net.descriptor()}, state_arrays(net))
        dump_json(out / "manifest.json", {**self.manifest, "param_hash": self.param_hash})
        return out

    @classmethod
    def load(cls, root: str | Path) -> DecoderModel:
        root = Path(root)
        header, tensors = read_model(root / "model.flgm")
        arch = header["architecture"]
        net = DecoderNet(arch["embed_dim"], arch["noise_dim"], tuple(arch["widths"]))
        load_state_arrays(net, tensors)
        return cls(net, load_json(root / "manifest.json"))


def train_decoder(teacher: EmbedderModel, train: Dataset | np.ndarray, config: DecoderConfig | None = None) -> DecoderModel:
    """Fit ``(teacher embedding, noise) -> image``.

    Loss = identity_weight * (1 - cos(teacher(output), embedding))
         + pixel_weight * mean squared error to the source image.
    """
    config = config or DecoderConfig()
    pixels = train.pixels if isinstance(train, Dataset) else np.asarray(train, dtype=np.float32)
    seed_everything(config.seed)
    net = DecoderNet(teacher.net.embed_dim, config.noise_dim, config.widths)
    targets = torch.from_numpy(embed_images(teacher, pixels).astype(np.float32))
    teacher.net.eval()
    for p in teacher.net.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sampler = BatchSampler(len(pixels), config.batch_size, config.seed)
    gen = torch.Generator().manual_seed(config.seed + 11)
    curve = {"total": [], "identity": [], "pixel": []}
    t0 = time.time()
    net.train()
    try:
        for step in range(config.steps):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, config.steps, config.learning_rate)
            idx = sampler.next()
            e = targets[idx]
            noise = torch.randn(len(idx), config.noise_dim, generator=gen)
            out = net(e, noise)
            id_loss = 1.0 - F.cosine_similarity(teacher.net(out), e, dim=1).mean()
            pix_loss = F.mse_loss(out, to_nchw(pixels[idx]))
            loss = config.identity_weight * id_loss + config.pixel_weight * pix_loss
            check_finite(loss, step, "train_decoder")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            curve["total"].append(float(loss.item()))
            curve["identity"].append(float(id_loss.item()))
            curve["pixel"].append(float(pix_loss.item()))
    finally:
        for p in teacher.net.parameters():
            p.requires_grad_(True)
    net.eval()
    manifest = {
        "kind": "decoder",
        "seed": config.seed,
        "config": asdict(config),
        "loss_curve": curve,
        "teacher_param_hash": teacher.param_hash,
        "wall_clock_s": time.time() - t0,
    }
    return DecoderModel(net, manifest)


def draw_noise(seed: int, k: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((k, dim)).astype(np.float32)


def regenerate(decoder: ImageGenerator, embedding: Embedding | np.ndarray, k: int = 5, seed: int = 0) -> np.ndarray:
    """``k`` images from independent seeded noise draws, ``k x 64 x 64 x 3``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vec = embedding.vector if isinstance(embedding, Embedding) else np.asarray(embedding)
    if vec.shape != (decoder.embed_dim,):
        raise ValueError(f"decoder expects {decoder.embed_dim}-d embeddings, got {vec.shape}")
    noise = draw_noise(seed, k, decoder.noise_dim)
    return decoder.generate(np.repeat(vec[None], k, axis=0), noise)


def regenerate_batch(decoder: ImageGenerator, embeddings: np.ndarray, k: int = 5, seed: int = 0) -> np.ndarray:
    """``N x d`` embeddings -> ``N x k x 64 x 64 x 3``; item i uses noise seed ``(seed, i)``."""
    embeddings = np.asarray(embeddings)
    noise = np.concatenate([draw_noise(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), k,
                                       decoder.noise_dim) for i in range(len(embeddings))]) \
        if len(embeddings) else np.zeros((0, decoder.noise_dim), np.float32)
    imgs = decoder.generate(np.repeat(embeddings, k, axis=0), noise)
    return imgs.reshape(len(embeddings), k, *imgs.shape[1:])


# -- calibration and verification --------------------------------------------

@dataclass
class CalibratedThresholds:
    thresholds: dict[float, float]
    impostor_count: int
    seed: int

    def __post_init__(self):
        self.thresholds = {float(k): float(v) for k, v in self.thresholds.items()}
        levels = sorted(self.thresholds)
        for lo, hi in zip(levels, levels[1:]):
            if self.thresholds[lo] < self.thresholds[hi]:
                raise ValueError("thresholds must be non-increasing in FAR level")

    @property
    def levels(self) -> list[float]:
        """Levels from loosest to strictest."""
        return sorted(self.thresholds, reverse=True)

    def to_dict(self) -> dict:
        return {
            "thresholds": {f"{k:g}": v for k, v in sorted(self.thresholds.items())},
            "impostor_count": self.impostor_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibratedThresholds:
        return cls({float(k): v for k, v in d["thresholds"].items()}, int(d["impostor_count"]), int(d["seed"]))

    def save(self, path: str | Path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> CalibratedThresholds:
        return cls.from_dict(load_json(path))


def threshold_from_scores(impostor_scores: np.ndarray, far: float) -> float:
    """The ceil(far * M)-th largest impostor score."""
    scores = np.asarray(impostor_scores, dtype=np.float64)
    m = len(scores)
    if not 0 < far <= 1:
        raise ValueError("FAR level must lie in (0, 1]")
    if m < 10 / far - 1e-9:
        raise InsufficientImpostorsError(f"FAR {far:g} needs at least {math.ceil(10 / far)} impostor scores, got {m}")
    rank = max(1, math.ceil(far * m - 1e-9))
    # k-th largest is the (m - k)-th smallest (0-based)
    return float(np.partition(scores, m - rank)[m - rank])


def impostor_scores(embeddings: np.ndarray, labels: np.ndarray, max_pairs: int | None = None,
                    seed: int = 0) -> np.ndarray:
    """Cosine scores of all cross-identity pairs (i < j), optionally subsampled."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    scores = []
    for i in range(len(e) - 1):
        row = e[i + 1:] @ e[i]
        scores.append(row[labels[i + 1:] != labels[i]])
    out = np.concatenate(scores) if scores else np.zeros(0)
    if max_pairs is not None and len(out) > max_pairs:
        out = out[np.sort(np.random.default_rng(seed).choice(len(out), max_pairs, replace=False))]
    return out


def calibrate_from_scores(scores: np.ndarray, levels: Sequence[float] = FAR_LEVELS, seed: int = 0) -> CalibratedThresholds:
    return CalibratedThresholds({f: threshold_from_scores(scores, f) for f in levels}, len(scores), seed)


def calibrate_thresholds(teacher: EmbedderModel, calibration: Dataset, levels: Sequence[float] = FAR_LEVELS,
                         seed: int = 0, max_pairs: int | None = None) -> CalibratedThresholds:
    emb = embed_images(teacher, calibration.pixels)
    scores = impostor_scores(emb, calibration.labels, max_pairs, seed)
    return calibrate_from_scores(scores, levels, seed)


def empirical_far(scores: np.ndarray, threshold: float) -> float:
    return float(np.mean(np.asarray(scores) >= threshold))


def pass_level(score: float, thresholds: CalibratedThresholds) -> float | None:
    """Strictest FAR level whose threshold the score reaches, else None."""
    best = None
    for level in thresholds.levels:
        if score >= thresholds.thresholds[level]:
            best = level
    return best


def verify_local(teacher: EmbedderModel, image_a: np.ndarray, image_b: np.ndarray,
                 thresholds: CalibratedThresholds) -> float | None:
    emb = embed_images(teacher, np.stack([np.asarray(image_a), np.asarray(image_b)]))
    return pass_level(float(np.dot(emb[0], emb[1])), thresholds)


# -- success metrics ----------------------------------------------------------

@dataclass
class RegenReport:
    attempts: dict[str, list[float | None]]
    k: int
    success_at_k: float
    success_curve: list[float]
    pass_at: dict[float, float]
    baseline_level: float = BASELINE_LEVEL
    definitions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "definitions": self.definitions,
            "k": self.k,
            "baseline_level": self.baseline_level,
            f"success_at_{self.k}": self.success_at_k,
            "success_curve": self.success_curve,
            "pass_at": {f"{lvl:g}": v for lvl, v in sorted(self.pass_at.items(), reverse=True)},
            "attempts": {key: [None if a is None else float(a) for a in v] for key, v in sorted(self.attempts.items())},
        }


def _passes(level: float | None, required: float) -> bool:
    return level is not None and level <= required


def success_metrics(attempts: dict[str, Sequence[float | None]], thresholds: CalibratedThresholds | None = None,
                    baseline_level: float = BASELINE_LEVEL) -> RegenReport:
    """Pass@f from first attempts and Success@k (any attempt at ``baseline_level`` or stricter)."""
    if not attempts:
        raise ValueError("no attempts to score")
    lengths = {len(v) for v in attempts.values()}
    if len(lengths) != 1:
        raise ValueError(f"ragged attempt counts: {sorted(lengths)}")
    k = lengths.pop()
    if k < 1:
        raise ValueError("each identity needs at least one attempt")
    levels = thresholds.levels if thresholds is not None else list(reversed(FAR_LEVELS))
    n = len(attempts)
    pass_at = {lvl: sum(_passes(v[0], lvl) for v in attempts.values()) / n for lvl in levels}
    curve = [sum(any(_passes(a, baseline_level) for a in v[:j]) for v in attempts.values()) / n for j in range(1, k + 1)]
    definitions = {
        "pass_at": "fraction of items whose first attempt passes at the FAR level or stricter",
        "success_at_k": f"fraction of items with any of k attempts passing at FAR {baseline_level:g} or stricter",
        "generated_side_failure": "counts as a failed attempt (level none)",
    }
    return RegenReport({k_: list(v) for k_, v in attempts.items()}, k, curve[-1], curve, pass_at, baseline_level,
                       definitions)
