"""Teacher identity embedder, template students, and cosine distillation."""
from __future__ import annotations

import copy
import enum
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_model, write_model
from .corpus import IMAGE_SIZE, Dataset, ImageSample
from .protectors import ProtectedTemplate
from .training import (
    BatchSampler,
    TrainingError,
    check_finite,
    cosine_lr,
    load_state_arrays,
    augment_images,
    random_shift,
    seed_everything,
    state_arrays,
    to_nchw,
)
from .util import dump_json, load_json, sha256_array, sha256_obj

log = logging.getLogger(__name__)

EMBED_DIM = 128


class Source(str, enum.Enum):
    TEACHER = "TEACHER"
    STUDENT = "STUDENT"
    PROXY_STUDENT = "PROXY_STUDENT"


class ChannelMismatchError(ValueError):
    pass


class NotUnitNormError(ValueError):
    pass


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source: Source
    subject_hint: str | None = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-5:
            raise NotUnitNormError(f"embedding norm {n} is not 1")
        object.__setattr__(self, "vector", v)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.vector.shape != b.vector.shape:
        raise ValueError(f"dimension mismatch: {a.vector.shape[0]} vs {b.vector.shape[0]}")
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NotUnitNormError("cannot normalize a zero vector")
    return x / norms


# -- network ------------------------------------------------------------------

class EmbedderNet(nn.Module):
    """Adapter convolution, fixed conv trunk, global average pooling, linear head.

    The adapter is a single 3x3 convolution from the template's channel count
    to an image-like 3-channel map. Templates with a coarser grid than 64x64
    (block-DCT planes) get ``3 * s**2`` adapter outputs followed by a pixel
    shuffle of factor ``s``, which can express an exact block inverse.
    """

    def __init__(
        self,
        in_channels: int = 3,
        input_size: int = IMAGE_SIZE,
        embed_dim: int = EMBED_DIM,
        widths: tuple[int, ...] = (16, 32, 64, 128),
        input_norm: str = "none",
        adapter_hidden: int = 0,
    ):
        super().__init__()
        if IMAGE_SIZE % input_size:
            raise ValueError(f"input size {input_size} must divide {IMAGE_SIZE}")
        if input_norm not in ("none", "rms"):
            raise ValueError(f"unknown input_norm {input_norm!r}")
        self.in_channels = in_channels
        self.input_size = input_size
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.input_norm = input_norm
        self.adapter_hidden = adapter_hidden
        scale = IMAGE_SIZE // input_size
        if adapter_hidden:
            adapter: list[nn.Module] = [nn.Conv2d(in_channels, adapter_hidden, 3, padding=1), nn.ReLU(inplace=True),
                                        nn.Conv2d(adapter_hidden, 3 * scale * scale, 3, padding=1)]
        else:
            adapter = [nn.Conv2d(in_channels, 3 * scale * scale, 3, padding=1)]
        if scale > 1:
            adapter.append(nn.PixelShuffle(scale))
        self.adapter = nn.Sequential(*adapter)
        layers: list[nn.Module] = []
        prev = 3
        for w in self.widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            prev = w
        layers += [nn.Conv2d(prev, prev, 3, padding=1, bias=False), nn.BatchNorm2d(prev), nn.ReLU(inplace=True)]
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(prev, embed_dim)

    def descriptor(self) -> dict:
        return {
            "kind": "embedder",
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "embed_dim": self.embed_dim,
            "widths": list(self.widths),
            "input_norm": self.input_norm,
            "adapter_hidden": self.adapter_hidden,
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> EmbedderNet:
        return cls(d["in_channels"], d["input_size"], d["embed_dim"], tuple(d["widths"]), d.get("input_norm", "none"),
                   d.get("adapter_hidden", 0))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(
                f"adapter expects {self.in_channels} input channels, template has {x.shape[1]}"
            )
        if self.input_norm == "rms":
            x = x - x.mean(dim=(1, 2, 3), keepdim=True)
            x = x / (x.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt() + 1e-6)
        h = self.trunk(self.adapter(x))
        return self.head(h.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(x), dim=1)


def param_hash(net: nn.Module) -> str:
    return sha256_obj({k: sha256_array(v) for k, v in state_arrays(net).items()})


@dataclass
class EmbedderModel:
    net: EmbedderNet
    source: Source
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()

    @property
    def in_channels(self) -> int:
        return self.net.in_channels

    @property
    def param_hash(self) -> str:
        return param_hash(self.net)

    @torch.no_grad()
    def embed_array(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """``N x C x H x W`` inputs -> ``N x d`` float64 unit vectors."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4:
            raise ValueError(f"expected a 4-d batch, got shape {x.shape}")
        if x.shape[1] != self.net.in_channels:
            raise ChannelMismatchError(
                f"model expects {self.net.in_channels} input channels, got {x.shape[1]}"
            )
        self.net.eval()
        out = [self.net(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size]))).double().numpy()
               for i in range(0, len(x), batch_size)]
        return l2_normalize(np.concatenate(out)) if out else np.zeros((0, self.net.embed_dim))

    def save(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        header = {"architecture": self.net.descriptor(), "source": self.source.value}
        write_model(out / "model.flgm", header, state_arrays(self.net))
        dump_json(out / "manifest.json", {**self.manifest, "source": self.source.value, "param_hash": self.param_hash})
        return out

    @classmethod
    def load(cls, root: str | Path) -> EmbedderModel:
        root = Path(root)
        header, tensors = read_model(root / "model.flgm")
        net = EmbedderNet.from_descriptor(header["architecture"])
        load_state_arrays(net, tensors)
        manifest = load_json(root / "manifest.json") if (root / "manifest.json").exists() else {}
        return cls(net, Source(header["source"]), manifest)


def embed_images(model: EmbedderModel, pixels: np.ndarray) -> np.ndarray:
    """Teacher embeddings of ``N x 64 x 64 x 3`` images as an ``N x d`` array."""
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 4 or pixels.shape[-1] != model.in_channels:
        raise ChannelMismatchError(f"model expects {model.in_channels}-channel images, got shape {pixels.shape}")
    return model.embed_array(pixels.transpose(0, 3, 1, 2))


def embed_teacher(model: EmbedderModel, image: ImageSample | np.ndarray) -> Embedding:
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, model.in_channels):
        raise ChannelMismatchError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x{model.in_channels} image, got {pixels.shape}")
    hint = image.sample_id if isinstance(image, ImageSample) else None
    return Embedding(embed_images(model, pixels[None])[0], Source.TEACHER, hint)


def embed_templates(model: EmbedderModel, tensors: np.ndarray) -> np.ndarray:
    return model.embed_array(tensors)


def embed_student(model: EmbedderModel, template: ProtectedTemplate | np.ndarray) -> Embedding:
    """Embed one template; only the tensor is consulted."""
    tensor = template.tensor if isinstance(template, ProtectedTemplate) else np.asarray(template)
    if tensor.shape[0] != model.in_channels:
        raise ChannelMismatchError(
            f"student adapter expects {model.in_channels} channels, template has {tensor.shape[0]}"
        )
    return Embedding(model.embed_array(tensor[None])[0], model.source)


# -- teacher ------------------------------------------------------------------

@dataclass
class TeacherConfig:
    steps: int = 1500
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 5e-4
    margin: float = 0.2
    scale: float = 16.0
    seed: int = 0
    max_shift: int = 2
    embed_dim: int = EMBED_DIM
    widths: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size and learning_rate must be positive")


class AdditiveMarginHead(nn.Module):
    """Cosine classifier with an additive margin on the target logit."""

    def __init__(self, embed_dim: int, n_classes: int, margin: float, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin, self.scale = margin, scale

    def cosines(self, emb: torch.Tensor) -> torch.Tensor:
        return emb @ F.normalize(self.weight, dim=1).t()

    def forward(self, emb: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        cos = self.cosines(emb)
        onehot = F.one_hot(target, cos.shape[1]).to(cos.dtype)
        return self.scale * (cos - self.margin * onehot)


def dataset_hash(pixels: np.ndarray, labels: np.ndarray | None = None) -> str:
    parts = {"pixels": sha256_array(np.asarray(pixels))}
    if labels is not None:
        parts["labels"] = sha256_array(np.asarray(labels))
    return sha256_obj(parts)


def train_teacher(train: Dataset, config: TeacherConfig | None = None) -> EmbedderModel:
    """Additive-margin softmax training over the training identities."""
    config = config or TeacherConfig()
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 training identities")
    seed_everything(config.seed)
    target = np.searchsorted(classes, train.labels)
    net = EmbedderNet(3, IMAGE_SIZE, config.embed_dim, config.widths)
    head = AdditiveMarginHead(config.embed_dim, len(classes), config.margin, config.scale)
    params = list(net.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    sampler = BatchSampler(len(train), config.batch_size, config.seed)
    aug_rng = np.random.default_rng(config.seed + 1)
    losses = []
    t0 = time.time()
    net.train()
    for step in range(config.steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, config.steps, config.learning_rate, warmup=min(100, config.steps // 10))
        idx = sampler.next()
        x = to_nchw(random_shift(train.pixels[idx], aug_rng, config.max_shift))
        y = torch.from_numpy(target[idx])
        loss = F.cross_entropy(head(net(x), y), y)
        check_finite(loss, step, "train_teacher")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    net.eval()
    with torch.no_grad():
        emb = torch.from_numpy(embed_images(EmbedderModel(net, Source.TEACHER), train.pixels).astype(np.float32))
        pred = head.cosines(emb).argmax(1).numpy()
    accuracy = float(np.mean(pred == target))
    chance = 1.0 / len(classes)
    if accuracy < 2 * chance:
        raise TrainingError(
            f"teacher failed to converge: train accuracy {accuracy:.4f} < 2x chance {2 * chance:.4f}; "
            f"loss {losses[0]:.3f} -> {losses[-1]:.3f} over {config.steps} steps"
        )
    manifest = {
        "kind": "teacher",
        "seed": config.seed,
        "config": asdict(config),
        "loss_curve": losses,
        "train_accuracy": accuracy,
        "n_classes": len(classes),
        "data_hash": dataset_hash(train.pixels, train.labels),
        "wall_clock_s": time.time() - t0,
    }
    return EmbedderModel(net, Source.TEACHER, manifest)


# -- distillation -------------------------------------------------------------

@dataclass
class DistillConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    init: str = "teacher"
    max_shift: int = 2
    flip: bool = True
    gain_jitter: float = 0.15
    adapter_hidden: int = 0
    trunk_lr_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps, batch_size and learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("teacher", "random"):
            raise ValueError(f"unknown init {self.init!r}")


def distillation_loss(student_emb: torch.Tensor, teacher_emb: torch.Tensor) -> torch.Tensor:
    """``1 - mean_k cos(student_k, teacher_k)``; bounded in [0, 2]."""
    return 1.0 - F.cosine_similarity(student_emb, teacher_emb, dim=1, eps=1e-12).mean()


def build_student(teacher: EmbedderModel, in_channels: int, input_size: int, init: str = "teacher",
                  input_norm: str = "none", seed: int = 0, adapter_hidden: int = 0) -> EmbedderNet:
    """Student with a fresh adapter; the trunk and head start from the teacher when ``init='teacher'``."""
    torch.manual_seed(seed)
    t = teacher.net
    net = EmbedderNet(in_channels, input_size, t.embed_dim, t.widths, input_norm, adapter_hidden)
    if init == "teacher":
        net.trunk.load_state_dict(copy.deepcopy(t.trunk.state_dict()))
        net.head.load_state_dict(copy.deepcopy(t.head.state_dict()))
    return net


def _make_optimizer(net: EmbedderNet, config: DistillConfig):
    # the pretrained trunk and head may move slower than the fresh adapter
    groups = [
        {"params": list(net.adapter.parameters()), "lr_scale": 1.0},
        {"params": list(net.trunk.parameters()) + list(net.head.parameters()), "lr_scale": config.trunk_lr_scale},
    ]
    if config.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum,
                               weight_decay=config.weight_decay)
    return torch.optim.Adam(groups, lr=config.learning_rate, weight_decay=config.weight_decay)


def align_to_teacher(
    teacher: EmbedderModel,
    student: EmbedderNet,
    to_input: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    images: np.ndarray,
    config: DistillConfig,
    where: str = "distill",
) -> list[float]:
    """Minimise the cosine distillation loss; returns the per-step loss curve.

    ``to_input`` turns a batch of ``N x 64 x 64 x 3`` images into the student's
    ``N x C x H x W`` input; it is called once per step (on-the-fly queries).
    """
    seed_everything(config.seed)
    before = teacher.param_hash
    sampler = BatchSampler(len(images), config.batch_size, config.seed)
    rng = np.random.default_rng(config.seed + 7)
    opt = _make_optimizer(student, config)
    teacher.net.eval()
    losses = []
    student.train()
    for step in range(config.steps):
        lr = cosine_lr(step, config.steps, config.learning_rate)
        for g in opt.param_groups:
            g["lr"] = lr * g["lr_scale"]
        batch = augment_images(images[sampler.next()], rng, config.max_shift, config.flip, config.gain_jitter)
        inp = np.asarray(to_input(batch, rng), dtype=np.float32)
        if inp.shape[1] != student.in_channels:
            raise ChannelMismatchError(
                f"student adapter expects {student.in_channels} channels, oracle returned {inp.shape[1]}"
            )
        with torch.no_grad():
            target = teacher.net(to_nchw(batch))
        loss = distillation_loss(student(torch.from_numpy(inp)), target)
        check_finite(loss, step, where)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    student.eval()
    if teacher.param_hash != before:
        raise TrainingError("teacher parameters changed during distillation")
    return losses


def mean_alignment(student: EmbedderModel, teacher: EmbedderModel, inputs: np.ndarray, images: np.ndarray) -> float:
    s = student.embed_array(inputs)
    t = embed_images(teacher, images)
    return float(np.mean(np.sum(s * t, axis=1)))


def distill_student(
    teacher: EmbedderModel,
    oracle,
    train_images: np.ndarray,
    config: DistillConfig | None = None,
    validation_images: np.ndarray | None = None,
) -> EmbedderModel:
    """Train a student that maps oracle templates into the teacher's embedding space."""
    config = config or DistillConfig()
    probe = np.asarray(oracle(train_images[:1]))
    channels = getattr(oracle, "channels", probe.shape[1])
    if probe.shape[1] != channels:
        raise ChannelMismatchError(f"oracle declares {channels} channels but returned {probe.shape[1]}")
    student = build_student(teacher, channels, probe.shape[-1], config.init, seed=config.seed,
                            adapter_hidden=config.adapter_hidden)
    t0 = time.time()
    losses = align_to_teacher(teacher, student, lambda b, _rng: oracle(b), train_images, config)
    model = EmbedderModel(student, Source.STUDENT)
    manifest = {
        "kind": "student",
        "seed": config.seed,
        "config": asdict(config),
        "loss_curve": losses,
        "teacher_param_hash": teacher.param_hash,
        "oracle_config_hash": getattr(oracle, "config_hash", None),
        "data_hash": dataset_hash(train_images),
        "wall_clock_s": time.time() - t0,
    }
    if validation_images is not None and len(validation_images):
        manifest["validation_mean_cosine"] = mean_alignment(model, teacher, oracle(validation_images), validation_images)
    model.manifest = manifest
    return model
