"""Shared pieces of the deterministic single-threaded training loops."""
from __future__ import annotations

import math
import random

import numpy as np
import torch


class TrainingError(RuntimeError):
    """Training diverged (NaN loss) or failed its convergence guard."""


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    t = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, t)))


class BatchSampler:
    """Epoch-wise shuffled index batches from a seeded generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("empty training set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        batch, self._order = self._order[: self.batch_size], self._order[self.batch_size:]
        return batch


def check_finite(loss: torch.Tensor, step: int, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{where}: non-finite loss {loss.item()} at step {step}")


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for k, v in module.state_dict().items():
        a = v.detach().cpu().numpy().copy()
        # integer buffers (BatchNorm step counters) are stored as float64
        out[k] = a.astype(np.float64) if a.dtype.kind in "iub" else a
    return out


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for k, v in module.state_dict().items():
        state[k] = torch.from_numpy(np.asarray(arrays[k])).to(v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def random_shift(images: np.ndarray, rng: np.random.Generator, max_shift: int) -> np.ndarray:
    """Per-image integer translation with edge replication, ``N x H x W x C``."""
    if max_shift <= 0:
        return images
    n, h, w, _ = images.shape
    pad = np.pad(images, ((0, 0), (max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="edge")
    dy = rng.integers(0, 2 * max_shift + 1, n)
    dx = rng.integers(0, 2 * max_shift + 1, n)
    return np.stack([pad[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def augment_images(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2, flip: bool = True,
                   gain: float = 0.0) -> np.ndarray:
    """Random shift, horizontal flip and global gain jitter, clipped to [0, 1]."""
    out = random_shift(images, rng, max_shift)
    if flip:
        mask = rng.random(len(out)) < 0.5
        out = np.where(mask[:, None, None, None], out[:, :, ::-1], out)
    if gain > 0:
        g = rng.uniform(1.0 - gain, 1.0 + gain, (len(out), 1, 1, 1))
        out = np.clip(out * g, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)
