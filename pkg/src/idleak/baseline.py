"""Pixel-loss template inversion, the conventional attack used as a contrast.

A convolutional encoder reads the template into a vector and the same
decoder architecture the regenerator uses maps it back to an image. The only
training signal is per-pixel squared error against the source image.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_model, write_model
from .embedder import EmbedderNet
from .protectors import ProtectedTemplate
from .regenerator import DecoderNet, UntrainedModelError
from .training import (
    BatchSampler,
    augment_images,
    check_finite,
    cosine_lr,
    load_state_arrays,
    seed_everything,
    state_arrays,
    to_nchw,
)
from .util import dump_json, load_json


class PixelInverter(nn.Module):
    def __init__(self, in_channels: int, input_size: int, code_dim: int = 128,
                 enc_widths: tuple[int, ...] = (16, 32, 64, 128), dec_widths: tuple[int, ...] = (64, 32, 16, 8)):
        super().__init__()
        self.encoder = EmbedderNet(in_channels, input_size, code_dim, enc_widths)
        self.decoder = DecoderNet(code_dim, 0, dec_widths)
        self.arch = {"in_channels": in_channels, "input_size": input_size, "code_dim": code_dim,
                     "enc_widths": list(enc_widths), "dec_widths": list(dec_widths)}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        code = self.encoder.features(x)
        return self.decoder(code, code.new_zeros(len(code), 0))


@dataclass
class BaselineConfig:
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size and learning_rate must be positive")


@dataclass
class PixelBaseline:
    net: PixelInverter | None
    manifest: dict = field(default_factory=dict)

    def _require(self) -> PixelInverter:
        if self.net is None:
            raise UntrainedModelError("pixel reconstruction decoder has not been trained")
        return self.net

    @torch.no_grad()
    def reconstruct_array(self, tensors: np.ndarray, batch_size: int = 256) -> np.ndarray:
        net = self._require()
        net.eval()
        x = np.asarray(tensors, dtype=np.float32)
        out = [net(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size]))).numpy()
               for i in range(0, len(x), batch_size)]
        return np.clip(np.concatenate(out).transpose(0, 2, 3, 1), 0.0, 1.0).astype(np.float32)

    def save(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        net = self._require()
        write_model(out / "model.flgm", {"architecture": {"kind": "pixel_inverter", **net.arch}}, state_arrays(net))
        dump_json(out / "manifest.json", self.manifest)
        return out

    @classmethod
    def load(cls, root: str | Path) -> PixelBaseline:
        root = Path(root)
        header, tensors = read_model(root / "model.flgm")
        a = header["architecture"]
        net = PixelInverter(a["in_channels"], a["input_size"], a["code_dim"], tuple(a["enc_widths"]),
                            tuple(a["dec_widths"]))
        load_state_arrays(net, tensors)
        return cls(net, load_json(root / "manifest.json"))


def train_pixel_baseline(oracle, train_images: np.ndarray, config: BaselineConfig | None = None) -> PixelBaseline:
    """Train template -> image regression with per-pixel squared error only."""
    config = config or BaselineConfig()
    images = np.asarray(train_images, dtype=np.float32)
    probe = np.asarray(oracle(images[:1]))
    seed_everything(config.seed)
    net = PixelInverter(probe.shape[1], probe.shape[-1])
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sampler = BatchSampler(len(images), config.batch_size, config.seed)
    rng = np.random.default_rng(config.seed + 7)
    losses = []
    t0 = time.time()
    net.train()
    for step in range(config.steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, config.steps, config.learning_rate)
        # shift/flip only: the target must stay the exact source of the template
        batch = augment_images(images[sampler.next()], rng, 2, True, 0.0) if len(images) > 1 else images
        loss = F.mse_loss(net(torch.from_numpy(np.asarray(oracle(batch), dtype=np.float32))), to_nchw(batch))
        check_finite(loss, step, "train_pixel_baseline")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    net.eval()
    manifest = {"kind": "pixel_baseline", "seed": config.seed, "config": asdict(config), "loss_curve": losses,
                "oracle_config_hash": getattr(oracle, "config_hash", None), "wall_clock_s": time.time() - t0}
    return PixelBaseline(net, manifest)


def pixel_reconstruction_baseline(template: ProtectedTemplate | np.ndarray, model: PixelBaseline) -> np.ndarray:
    """Reconstruct one image (64 x 64 x 3) from a template."""
    tensor = template.tensor if isinstance(template, ProtectedTemplate) else np.asarray(template)
    return model.reconstruct_array(tensor[None])[0]
