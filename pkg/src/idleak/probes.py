"""Soft-attribute probes on embeddings, and pixel vs identity metric analysis.

SSIM constants (fixed): 8x8 uniform window over valid positions, computed per
channel on the 0..255 scale with C1 = (0.01 * 255)^2 and C2 = (0.03 * 255)^2,
then averaged over windows and channels.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import spearmanr
from torch import nn

from .corpus import (
    N_GROUPS,
    CorpusManifest,
    render_face,
    sample_attributes,
    sample_identity,
    sample_nuisance,
)
from .embedder import EmbedderModel, embed_images
from .training import seed_everything

MAX_PIXEL = 255.0
PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * MAX_PIXEL) ** 2
SSIM_C2 = (0.03 * MAX_PIXEL) ** 2
SCALAR_RANGE = (0.0, 100.0)
MIN_DISCONNECT_PAIRS = 20


class IdentityOverlapError(ValueError):
    pass


class ProbeNet(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 128, n_groups: int = N_GROUPS):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.group = nn.Linear(hidden, n_groups)
        self.binary = nn.Linear(hidden, 2)
        self.scalar = nn.Linear(hidden, 1)

    def forward(self, x):
        h = self.trunk(x)
        # scalar head works in units of the attribute range / 100
        return self.group(h), self.binary(h), self.scalar(h).squeeze(-1)


@dataclass
class ProbeConfig:
    steps: int = 400
    learning_rate: float = 3e-3
    weight_decay: float = 1e-3
    hidden: int = 128
    seed: int = 0


@dataclass
class AttributeSet:
    embeddings: np.ndarray
    identities: np.ndarray
    group: np.ndarray
    binary: np.ndarray
    scalar: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        n = len(self.embeddings)
        for name in ("identities", "group", "binary", "scalar"):
            arr = np.asarray(getattr(self, name))
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} embeddings")
            setattr(self, name, arr)

    def select(self, mask) -> AttributeSet:
        return AttributeSet(self.embeddings[mask], self.identities[mask], self.group[mask], self.binary[mask],
                            self.scalar[mask])


def identity_disjoint_split(data: AttributeSet, test_fraction: float = 0.2, seed: int = 0) -> tuple[AttributeSet, AttributeSet]:
    ids = np.unique(data.identities)
    if len(ids) < 2:
        raise ValueError("need at least two identities to split")
    perm = np.random.default_rng(seed).permutation(ids)
    n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
    test_ids = set(perm[:n_test].tolist())
    mask = np.array([i in test_ids for i in data.identities.tolist()])
    return data.select(~mask), data.select(mask)


@dataclass
class ProbeModel:
    net: ProbeNet
    heads: dict
    manifest: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.net.trunk[0].in_features

    @torch.no_grad()
    def predict(self, embeddings: np.ndarray) -> dict:
        x = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"probe expects {self.input_dim}-d embeddings, got {x.shape[1]}")
        self.net.eval()
        g, b, s = self.net(x)
        return {
            "group": g.argmax(1).numpy() if self.heads["group"] else None,
            "binary": b.argmax(1).numpy() if self.heads["binary"] else None,
            "scalar": np.clip(s.numpy().astype(np.float64) * 100.0, *SCALAR_RANGE),
        }


def train_probe(data: AttributeSet, config: ProbeConfig | None = None) -> ProbeModel:
    """Joint training: cross-entropy on both categorical heads plus L1 on the scalar, equal weights."""
    config = config or ProbeConfig()
    if len(data.embeddings) == 0:
        raise ValueError("empty probe training set")
    heads = {}
    for name in ("group", "binary"):
        heads[name] = len(np.unique(getattr(data, name))) >= 2
        if not heads[name]:
            warnings.warn(f"attribute {name!r} has a single class in training data; head skipped", stacklevel=2)
    seed_everything(config.seed)
    net = ProbeNet(data.embeddings.shape[1], config.hidden)
    opt = torch.optim.AdamW(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    x = torch.from_numpy(data.embeddings)
    yg = torch.from_numpy(data.group.astype(np.int64))
    yb = torch.from_numpy(data.binary.astype(np.int64))
    ys = torch.from_numpy((data.scalar / 100.0).astype(np.float32))
    losses = []
    t0 = time.time()
    net.train()
    for _ in range(config.steps):
        g, b, s = net(x)
        loss = F.l1_loss(s, ys)
        if heads["group"]:
            loss = loss + F.cross_entropy(g, yg)
        if heads["binary"]:
            loss = loss + F.cross_entropy(b, yb)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    manifest = {
        "kind": "probe", "config": asdict(config), "loss_curve": losses, "wall_clock_s": time.time() - t0,
        "train_identities": sorted(int(i) for i in np.unique(data.identities)),
        "majority": {"group": int(np.bincount(data.group.astype(int)).argmax()),
                     "binary": int(np.bincount(data.binary.astype(int)).argmax())},
        "scalar_median": float(np.median(data.scalar)),
    }
    return ProbeModel(net, heads, manifest)


@dataclass
class ProbeReport:
    group_accuracy: float | None
    binary_accuracy: float | None
    scalar_mae: float
    chance: dict
    n_test: int

    def __post_init__(self):
        for a in (self.group_accuracy, self.binary_accuracy):
            if a is not None and not 0.0 <= a <= 1.0:
                raise ValueError("accuracy out of range")
        if self.scalar_mae < 0:
            raise ValueError("MAE must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def probe_eval(model: ProbeModel, test: AttributeSet) -> ProbeReport:
    if len(test.embeddings) == 0:
        raise ValueError("empty probe test set")
    overlap = set(model.manifest.get("train_identities", [])) & set(int(i) for i in np.unique(test.identities))
    if overlap:
        raise IdentityOverlapError(f"{len(overlap)} test identities were used to train the probe")
    pred = model.predict(test.embeddings)
    maj = model.manifest["majority"]
    chance = {
        "group_majority": float(np.mean(test.group == maj["group"])),
        "binary_majority": float(np.mean(test.binary == maj["binary"])),
        "scalar_median_mae": float(np.mean(np.abs(test.scalar - model.manifest["scalar_median"]))),
    }
    return ProbeReport(
        float(np.mean(pred["group"] == test.group)) if pred["group"] is not None else None,
        float(np.mean(pred["binary"] == test.binary)) if pred["binary"] is not None else None,
        float(np.mean(np.abs(pred["scalar"] - test.scalar))),
        chance,
        len(test.embeddings),
    )


# -- pixel metrics ------------------------------------------------------------

def mse_8bit(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64) * MAX_PIXEL, np.asarray(b, dtype=np.float64) * MAX_PIXEL
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse: float) -> float:
    return PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(MAX_PIXEL ** 2 / mse))


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 windows of ``H x W [x C]`` images given in [0, 1]."""
    x = np.asarray(a, dtype=np.float64) * MAX_PIXEL
    y = np.asarray(b, dtype=np.float64) * MAX_PIXEL
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    w = (SSIM_WINDOW, SSIM_WINDOW)
    wx = sliding_window_view(x, w, axis=(0, 1))
    wy = sliding_window_view(y, w, axis=(0, 1))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(np.clip(s.mean(), -1.0, 1.0))


def pixel_metrics(image_a, image_b) -> tuple[float, float, float]:
    """(PSNR dB, SSIM, MSE) for images in [0, 1], measured on the 0..255 scale."""
    mse = mse_8bit(image_a, image_b)
    return psnr_from_mse(mse), ssim(image_a, image_b), mse


def mean_psnr(images_a: np.ndarray, images_b: np.ndarray) -> float:
    return float(np.mean([psnr_from_mse(mse_8bit(a, b)) for a, b in zip(images_a, images_b)]))


# -- metric disconnect --------------------------------------------------------

@dataclass
class PairSet:
    name: str
    images_a: np.ndarray
    images_b: np.ndarray

    def __len__(self) -> int:
        return len(self.images_a)


@dataclass
class MetricDisconnectReport:
    sets: dict
    spearman_psnr_identity: float
    pattern_holds: bool
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metric_disconnect(teacher: EmbedderModel, same_identity: PairSet, cross_identity: PairSet) -> MetricDisconnectReport:
    """Per-pair PSNR/SSIM/MSE against teacher cosine for two contrasting pair sets."""
    for s in (same_identity, cross_identity):
        if len(s) < MIN_DISCONNECT_PAIRS:
            raise ValueError(f"pair set {s.name!r} has {len(s)} pairs; at least {MIN_DISCONNECT_PAIRS} required")
    out, all_psnr, all_id = {}, [], []
    for s in (same_identity, cross_identity):
        metrics = np.array([pixel_metrics(a, b) for a, b in zip(s.images_a, s.images_b)])
        ident = np.sum(embed_images(teacher, s.images_a) * embed_images(teacher, s.images_b), axis=1)
        out[s.name] = {
            "pairs": [{"psnr": float(m[0]), "ssim": float(m[1]), "mse": float(m[2]), "identity_similarity": float(c)}
                      for m, c in zip(metrics, ident)],
            "mean_psnr": float(metrics[:, 0].mean()), "mean_ssim": float(metrics[:, 1].mean()),
            "mean_mse": float(metrics[:, 2].mean()), "mean_identity_similarity": float(ident.mean()),
        }
        all_psnr.extend(metrics[:, 0])
        all_id.extend(ident)
    a, b = out[same_identity.name], out[cross_identity.name]
    holds = b["mean_psnr"] > a["mean_psnr"] and b["mean_identity_similarity"] < a["mean_identity_similarity"]
    rho = float(spearmanr(all_psnr, all_id).statistic)
    flags = [] if holds else ["insufficient contrast: the constructed sets do not separate pixel and identity similarity"]
    return MetricDisconnectReport(out, rho, bool(holds), flags)


def disconnect_pairs(manifest: CorpusManifest, n_pairs: int = 50, seed: int = 0) -> tuple[PairSet, PairSet]:
    """Construct the two contrast sets from the corpus generator.

    Same identity: two renders of one identity under independent nuisance.
    Cross identity: two identities rendered under one shared nuisance (and the
    first identity's attributes), which maximizes pixel overlap.
    """
    rng = np.random.default_rng(seed)
    ids = manifest.validation_ids or manifest.train_ids
    ids = [manifest.id_offset + i for i in range(manifest.n_identities)] if not ids else list(ids)
    if len(ids) < 2:
        raise ValueError("need at least two identities")
    k = manifest.images_per_identity
    same_a, same_b, cross_a, cross_b = [], [], [], []
    for _ in range(n_pairs):
        i, j = rng.choice(ids, 2, replace=False)
        p, q = rng.choice(max(k, 2), 2, replace=False)
        ident_i, ident_j = sample_identity(manifest.seed, int(i)), sample_identity(manifest.seed, int(j))
        attr_i = sample_attributes(manifest.seed, int(i))
        nu_p, nu_q = sample_nuisance(manifest.seed, int(i), int(p)), sample_nuisance(manifest.seed, int(i), int(q))
        same_a.append(render_face(ident_i, nu_p, attr_i, noise_std=manifest.noise_std).pixels)
        same_b.append(render_face(ident_i, nu_q, attr_i, noise_std=manifest.noise_std).pixels)
        cross_a.append(same_a[-1])
        cross_b.append(render_face(ident_j, nu_p, attr_i, noise_std=manifest.noise_std).pixels)
    return (PairSet("same_identity_different_nuisance", np.stack(same_a), np.stack(same_b)),
            PairSet("cross_identity_shared_nuisance", np.stack(cross_a), np.stack(cross_b)))
