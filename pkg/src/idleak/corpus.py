"""Deterministic synthetic face corpus with explicit identity and nuisance latents.

The procedural renderer is the ground-truth image model: an image is a pure
function of ``(identity, nuisance, attributes)``. Identity latents drive the
face geometry and base skin chroma, soft attributes drive designated visual
effects, and nuisance latents only apply a rigid motion, a global lighting
gain and seeded sensor noise.

Identity latent coordinates (each in [-1, 1]) map to geometry as follows:

====  ==========================  ===================
dim   parameter                   range (pixels/rad)
====  ==========================  ===================
0     face half-width             17 +/- 3
1     face half-height            22 +/- 3
2     eye row (from centre)       -5 +/- 2
3     eye half-spacing            8 +/- 2
4     eye radius                  2.8 +/- 0.9
5     eye aspect (height/width)   0.65 +/- 0.25
6     nose length                 6 +/- 2.5
7     nose half-width             2 +/- 0.8
8     mouth row                   10 +/- 2.5
9     mouth half-width            6 +/- 2.5
10    mouth half-thickness        1.5 +/- 0.7
11    brow tilt                   +/- 0.3 rad
12    brow half-thickness         1.2 +/- 0.5
13    skin brightness             +/- 0.12
14    skin red/blue balance       +/- 0.06
15    skin green shift            +/- 0.05
====  ==========================  ===================

Soft attributes: ``group`` sets the hue of the hair band (hue = group / 7),
``binary_attr`` switches the lower face contour from elliptic to squared, and
``scalar_attr`` sets the spatial frequency of the skin texture (monotone).
"""
from __future__ import annotations

import colorsys
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor
from .util import dump_json, load_json, rng_for

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
LATENT_DIM = 16
N_GROUPS = 7
RENDERER_VERSION = "procedural-face-1"
DEFAULT_NOISE_STD = 0.02

POSE_RANGE = (-20.0, 20.0)
TRANSLATION_RANGE = (-3.0, 3.0)
GAIN_RANGE = (0.6, 1.4)

_EDGE = 0.6
_BACKGROUND = 0.25


class InvalidInputError(ValueError):
    """A latent, attribute or manifest value lies outside its declared range."""


class OutputExistsError(FileExistsError):
    pass


@dataclass(frozen=True)
class IdentityLatent:
    id: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (LATENT_DIM,) or not np.all(np.isfinite(v)) or np.any(np.abs(v) > 1.0):
            raise InvalidInputError(f"identity vector must have {LATENT_DIM} coordinates in [-1, 1]")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class NuisanceLatent:
    pose: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    lighting_gain: float = 1.0
    noise_seed: int = 0

    def __post_init__(self):
        tx, ty = self.translation
        ok = (
            POSE_RANGE[0] <= self.pose <= POSE_RANGE[1]
            and all(TRANSLATION_RANGE[0] <= t <= TRANSLATION_RANGE[1] for t in (tx, ty))
            and GAIN_RANGE[0] <= self.lighting_gain <= GAIN_RANGE[1]
            and self.noise_seed >= 0
        )
        if not ok:
            raise InvalidInputError(f"nuisance latent out of range: {self}")


@dataclass(frozen=True)
class SoftAttributes:
    group: int
    binary_attr: int
    scalar_attr: float

    def __post_init__(self):
        if not (0 <= self.group < N_GROUPS and self.binary_attr in (0, 1) and 0.0 <= self.scalar_attr <= 100.0):
            raise InvalidInputError(f"attributes out of range: {self}")

    def to_dict(self) -> dict:
        return {"group": int(self.group), "binary_attr": int(self.binary_attr), "scalar_attr": float(self.scalar_attr)}


@dataclass(frozen=True)
class ImageSample:
    sample_id: str
    identity: IdentityLatent
    nuisance: NuisanceLatent
    attributes: SoftAttributes
    pixels: np.ndarray


@dataclass
class CorpusManifest:
    seed: int
    n_identities: int
    images_per_identity: int
    train_fraction: float = 0.8
    id_offset: int = 0
    noise_std: float = DEFAULT_NOISE_STD
    train_ids: list[int] = field(default_factory=list)
    validation_ids: list[int] = field(default_factory=list)
    renderer_version: str = RENDERER_VERSION

    def __post_init__(self):
        if self.seed < 0:
            raise InvalidInputError("seed must be >= 0")
        if self.n_identities < 2 or self.images_per_identity < 2:
            raise InvalidInputError("need at least 2 identities and 2 images per identity")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidInputError("train_fraction must lie in (0, 1)")
        if not self.train_ids and not self.validation_ids:
            ids = np.arange(self.id_offset, self.id_offset + self.n_identities)
            order = rng_for(self.seed, 3).permutation(ids)
            n_train = min(max(int(round(self.train_fraction * self.n_identities)), 1), self.n_identities - 1)
            self.train_ids = sorted(int(i) for i in order[:n_train])
            self.validation_ids = sorted(int(i) for i in order[n_train:])
        if set(self.train_ids) & set(self.validation_ids):
            raise InvalidInputError("train and validation identities overlap")

    def to_dict(self) -> dict:
        return asdict(self)


# -- sampling -----------------------------------------------------------------

def sample_identity(seed: int, id: int) -> IdentityLatent:
    if seed < 0:
        raise InvalidInputError("seed must be >= 0")
    vec = rng_for(seed, id, 0).uniform(-1.0, 1.0, LATENT_DIM)
    return IdentityLatent(id=int(id), vector=vec)


def sample_attributes(seed: int, id: int) -> SoftAttributes:
    rng = rng_for(seed, id, 1)
    return SoftAttributes(
        group=int(rng.integers(N_GROUPS)),
        binary_attr=int(rng.integers(2)),
        scalar_attr=float(rng.uniform(0.0, 100.0)),
    )


def sample_nuisance(seed: int, id: int, index: int) -> NuisanceLatent:
    rng = rng_for(seed, id, 2, index)
    return NuisanceLatent(
        pose=float(rng.uniform(*POSE_RANGE)),
        translation=(float(rng.uniform(*TRANSLATION_RANGE)), float(rng.uniform(*TRANSLATION_RANGE))),
        lighting_gain=float(rng.uniform(*GAIN_RANGE)),
        noise_seed=int(rng.integers(2**31)),
    )


# -- renderer -----------------------------------------------------------------

def face_geometry(identity: IdentityLatent, attributes: SoftAttributes) -> dict:
    """Renderer parameters implied by the identity latent and attributes."""
    v = identity.vector
    hair = colorsys.hsv_to_rgb(attributes.group / N_GROUPS, 0.65, 0.6)
    skin = np.array([0.78, 0.62, 0.52]) + 0.12 * v[13] + np.array([0.06, 0.0, -0.06]) * v[14]
    skin = skin + np.array([0.0, 0.05, 0.0]) * v[15]
    return {
        "face_a": 17.0 + 3.0 * v[0],
        "face_b": 22.0 + 3.0 * v[1],
        "eye_y": -5.0 + 2.0 * v[2],
        "eye_x": 8.0 + 2.0 * v[3],
        "eye_r": 2.8 + 0.9 * v[4],
        "eye_aspect": 0.65 + 0.25 * v[5],
        "nose_len": 6.0 + 2.5 * v[6],
        "nose_w": 2.0 + 0.8 * v[7],
        "mouth_y": 10.0 + 2.5 * v[8],
        "mouth_w": 6.0 + 2.5 * v[9],
        "mouth_t": 1.5 + 0.7 * v[10],
        "brow_tilt": 0.3 * v[11],
        "brow_t": 1.2 + 0.5 * v[12],
        "skin": tuple(float(c) for c in np.clip(skin, 0.05, 1.0)),
        "hair": tuple(float(c) for c in hair),
        "square_jaw": bool(attributes.binary_attr),
        "texture_freq": 0.06 + 0.20 * attributes.scalar_attr / 100.0,
    }


def _soft(d: np.ndarray) -> np.ndarray:
    # coverage of a shape whose signed distance (positive outside) is d
    return 0.5 * (1.0 - np.tanh(d / (2.0 * _EDGE)))


def _ellipse(u, w, cx, cy, a, b, angle=0.0):
    du, dw = u - cx, w - cy
    if angle:
        c, s = np.cos(angle), np.sin(angle)
        du, dw = c * du + s * dw, -s * du + c * dw
    r = np.sqrt((du / a) ** 2 + (dw / b) ** 2)
    return _soft((r - 1.0) * min(a, b))


def _blend(img, color, mask):
    return img + (np.asarray(color, dtype=np.float64) - img) * mask[..., None]


def _canvas(identity: IdentityLatent, nuisance: NuisanceLatent, attributes: SoftAttributes) -> np.ndarray:
    """Noise-free, unclamped image at unit lighting gain."""
    g = face_geometry(identity, attributes)
    coords = np.arange(IMAGE_SIZE, dtype=np.float64)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    cx = (IMAGE_SIZE - 1) / 2.0 + nuisance.translation[0]
    cy = (IMAGE_SIZE - 1) / 2.0 + nuisance.translation[1]
    th = np.deg2rad(nuisance.pose)
    # inverse rigid motion: image coords -> face frame
    u = np.cos(th) * (x - cx) + np.sin(th) * (y - cy)
    w = -np.sin(th) * (x - cx) + np.cos(th) * (y - cy)

    a, b = g["face_a"], g["face_b"]
    if g["square_jaw"]:
        p = np.where(w > 0, 3.5, 2.0)
        r = (np.abs(u / a) ** p + np.abs(w / b) ** p) ** (1.0 / p)
    else:
        r = np.sqrt((u / a) ** 2 + (w / b) ** 2)
    face = _soft((r - 1.0) * min(a, b))

    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), _BACKGROUND)
    phase = 2.0 * np.pi * g["texture_freq"] * (u + w) / np.sqrt(2.0)
    skin = np.asarray(g["skin"])[None, None, :] * (1.0 + 0.15 * np.sin(phase))[..., None]
    img = img + (skin - img) * face[..., None]

    hairline = _ellipse(u, w, 0.0, 0.0, a + 2.0, b + 2.0) * _soft((w + 0.55 * b) / 1.0)
    img = _blend(img, g["hair"], hairline)

    brow_y = g["eye_y"] - 1.6 * g["eye_r"] - 1.5
    brow_color = 0.6 * np.asarray(g["hair"])
    for side in (-1.0, 1.0):
        img = _blend(img, brow_color, _ellipse(u, w, side * g["eye_x"], brow_y, 4.5, g["brow_t"], side * g["brow_tilt"]))
        ex, er, asp = side * g["eye_x"], g["eye_r"], g["eye_aspect"]
        img = _blend(img, (0.95, 0.95, 0.95), _ellipse(u, w, ex, g["eye_y"], 1.5 * er, 1.5 * er * asp))
        img = _blend(img, (0.08, 0.06, 0.05), _ellipse(u, w, ex, g["eye_y"], 0.7 * er, 0.7 * er))

    nose_cy = g["eye_y"] + 1.0 + g["nose_len"] / 2.0
    img = _blend(img, 0.78 * np.asarray(g["skin"]), _ellipse(u, w, 0.0, nose_cy, g["nose_w"], g["nose_len"] / 2.0))
    img = _blend(img, (0.62, 0.2, 0.25), _ellipse(u, w, 0.0, g["mouth_y"], g["mouth_w"], g["mouth_t"]))
    return img


def render_face(
    identity: IdentityLatent,
    nuisance: NuisanceLatent,
    attributes: SoftAttributes,
    sample_id: str = "",
    noise_std: float = DEFAULT_NOISE_STD,
) -> ImageSample:
    """Render one 64x64x3 image in [0, 1].

    Lighting is a pure multiplicative gain applied before noise and clamping.
    """
    for obj, kind in ((identity, IdentityLatent), (nuisance, NuisanceLatent), (attributes, SoftAttributes)):
        if not isinstance(obj, kind):
            raise InvalidInputError(f"expected {kind.__name__}, got {type(obj).__name__}")
    if noise_std < 0:
        raise InvalidInputError("noise_std must be >= 0")
    img = _canvas(identity, nuisance, attributes) * nuisance.lighting_gain
    if noise_std > 0:
        img = img + noise_std * rng_for(nuisance.noise_seed, 4).standard_normal(img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(sample_id, identity, nuisance, attributes, pixels)


def sample_id_for(identity_id: int, index: int) -> str:
    return f"id{identity_id:05d}_{index:03d}"


# -- dataset handle -----------------------------------------------------------

@dataclass
class Dataset:
    """Read-only collection of labelled images, optionally backed by a directory."""

    pixels: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    attributes: list[SoftAttributes | None]
    manifest: CorpusManifest | None = None
    root: Path | None = None
    label_names: dict[int, str] | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixels.setflags(write=False)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def select(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            pixels=self.pixels[idx],
            labels=self.labels[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            attributes=[self.attributes[i] for i in idx],
            manifest=self.manifest,
            root=self.root,
            label_names=self.label_names,
        )

    def identities(self, ids) -> Dataset:
        keep = set(int(i) for i in ids)
        return self.select([i for i, lab in enumerate(self.labels) if int(lab) in keep])

    def split(self, name: str) -> Dataset:
        if self.manifest is None:
            raise ValueError("dataset has no split manifest")
        if name == "train":
            return self.identities(self.manifest.train_ids)
        if name == "validation":
            return self.identities(self.manifest.validation_ids)
        raise ValueError(f"unknown split {name!r}")

    def attribute_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if any(a is None for a in self.attributes):
            raise ValueError("dataset lacks attributes")
        return (
            np.array([a.group for a in self.attributes], dtype=np.int64),
            np.array([a.binary_attr for a in self.attributes], dtype=np.int64),
            np.array([a.scalar_attr for a in self.attributes], dtype=np.float64),
        )


def render_corpus(manifest: CorpusManifest) -> Dataset:
    """Render every sample of a manifest in memory (no disk I/O)."""
    pixels, labels, ids, attrs = [], [], [], []
    for ident in range(manifest.id_offset, manifest.id_offset + manifest.n_identities):
        latent = sample_identity(manifest.seed, ident)
        attributes = sample_attributes(manifest.seed, ident)
        for k in range(manifest.images_per_identity):
            sid = sample_id_for(ident, k)
            s = render_face(latent, sample_nuisance(manifest.seed, ident, k), attributes, sid, manifest.noise_std)
            pixels.append(s.pixels)
            labels.append(ident)
            ids.append(sid)
            attrs.append(attributes)
    return Dataset(np.stack(pixels), np.array(labels), ids, attrs, manifest)


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists():
        if not overwrite:
            raise OutputExistsError(f"{out} exists; pass overwrite=True to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True)


def export_corpus(dataset: Dataset, out: str | Path, overwrite: bool = False) -> Dataset:
    """Write a dataset in the corpus container format and return the on-disk handle."""
    out = Path(out)
    _prepare_out(out, overwrite)
    for sid, px in zip(dataset.sample_ids, dataset.pixels):
        write_tensor(out / f"{sid}.flgt", np.ascontiguousarray(px, dtype=np.float32))
    meta = {
        "format": "idleak-corpus",
        "renderer_version": RENDERER_VERSION if dataset.manifest else None,
        "manifest": dataset.manifest.to_dict() if dataset.manifest else None,
        "samples": [{"sample_id": s, "label": int(l)} for s, l in zip(dataset.sample_ids, dataset.labels)],
        "label_names": {str(k): v for k, v in (dataset.label_names or {}).items()},
    }
    dump_json(out / "manifest.json", meta)
    dump_json(
        out / "attributes.json",
        {s: (a.to_dict() if a is not None else None) for s, a in zip(dataset.sample_ids, dataset.attributes)},
    )
    return load_corpus(out)


def generate_corpus(manifest: CorpusManifest, out: str | Path, overwrite: bool = False) -> Dataset:
    out = Path(out)
    if out.exists() and not overwrite:
        raise OutputExistsError(f"{out} exists; pass overwrite=True to replace it")
    return export_corpus(render_corpus(manifest), out, overwrite=overwrite)


def load_corpus(root: str | Path) -> Dataset:
    root = Path(root)
    meta = load_json(root / "manifest.json")
    attrs_raw = load_json(root / "attributes.json")
    ids = [s["sample_id"] for s in meta["samples"]]
    labels = np.array([s["label"] for s in meta["samples"]], dtype=np.int64)
    pixels = np.stack([read_tensor(root / f"{sid}.flgt", np.float32) for sid in ids])
    attrs = [SoftAttributes(**attrs_raw[s]) if attrs_raw.get(s) else None for s in ids]
    manifest = CorpusManifest(**meta["manifest"]) if meta.get("manifest") else None
    names = {int(k): v for k, v in meta.get("label_names", {}).items()} or None
    return Dataset(pixels, labels, ids, attrs, manifest, root, names)


# -- external ingestion -------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp"}


def _load_external_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left, top = (im.width - side) // 2, (im.height - side) // 2
        im = im.crop((left, top, left + side, top + side)).resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def ingest_external(directory: str | Path, layout: str = "folder-per-identity") -> Dataset:
    """Load a folder-per-identity image tree, centre-cropped and resized to 64x64.

    Unreadable files are skipped with a warning; loading fails only if nothing loads.
    """
    if layout != "folder-per-identity":
        raise InvalidInputError(f"unsupported layout {layout!r}")
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    folders = sorted(p for p in directory.iterdir() if p.is_dir())
    if not folders:
        raise InvalidInputError(f"{directory} contains no identity folders")
    pixels, labels, ids, names, warnings = [], [], [], {}, []
    for label, folder in enumerate(folders):
        names[label] = folder.name
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            try:
                px = _load_external_image(path)
            except Exception as exc:  # PIL raises a zoo of types for corrupt files
                warnings.append(f"{path}: {exc}")
                log.warning("skipping unreadable image %s: %s", path, exc)
                continue
            pixels.append(px)
            labels.append(label)
            ids.append(f"{folder.name}__{path.stem}")
    if not pixels:
        raise InvalidInputError(f"no readable images under {directory}")
    return Dataset(np.stack(pixels), np.array(labels), ids, [None] * len(ids), None, None, names, warnings)
