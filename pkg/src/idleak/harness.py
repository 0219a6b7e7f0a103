"""End-to-end pipeline with content-addressed stage caching.

Every stage writes into ``<cache>/<stage>/<key>/`` where the key hashes the
stage's config sections, the content hashes of its inputs and the package
source. A finished stage directory carries ``_artifact.json`` listing the hash
of every file it produced; inputs are re-hashed before use, so a modified
cached file is reported by name instead of being silently consumed.
"""
from __future__ import annotations

import copy
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .baseline import BaselineConfig, PixelBaseline, train_pixel_baseline
from .container import read_tensor, write_tensor
from .corpus import CorpusManifest, Dataset, generate_corpus, load_corpus
from .embedder import (
    DistillConfig,
    EmbedderModel,
    TeacherConfig,
    distill_student,
    embed_images,
    train_teacher,
)
from .linkage import (
    EmbeddingSet,
    linkage_matrix,
    similarity_from_embeddings,
    verification_eval,
    verification_pairs,
)
from .probes import AttributeSet, ProbeConfig, disconnect_pairs, mean_psnr, metric_disconnect, probe_eval, train_probe
from .protectors import Method, ProtectorConfig, make_oracle, protect_batch
from .regenerator import (
    CalibratedThresholds,
    DecoderConfig,
    DecoderModel,
    calibrate_from_scores,
    empirical_far,
    impostor_scores,
    pass_level,
    regenerate_batch,
    success_metrics,
    train_decoder,
)
from .util import dump_json, hash_tree, load_json, sha256_obj
from .zeroknowledge import (
    PREPROCESS_TABLE,
    ZK_PAIR_COUNT,
    ProxyAugmentation,
    ZkConfig,
    zk_preprocess_tensor,
    zk_train,
)

log = logging.getLogger("idleak")

ARTIFACT_FILE = "_artifact.json"
METHODS = ("PARTIAL", "MINUS", "HIGHPASS")
ORIGINAL = "ORIGINAL"


class HashMismatchError(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 1,
    "output_root": "runs/default",
    "corpus": {"seed": 1, "n_identities": 250, "images_per_identity": 10, "train_fraction": 0.8, "path": None},
    "protect": {"seed": 0, "methods": [
        {"method": "PARTIAL", "seed": 0, "params": {"n_lowest_dropped": 1}},
        {"method": "MINUS", "seed": 0, "params": {}},
        {"method": "HIGHPASS", "seed": 0, "params": {}},
    ]},
    "teacher": {"seed": 0, "steps": 600, "learning_rate": 2e-3},
    "distill": {"seed": 0, "default": {"steps": 1500, "learning_rate": 2e-3, "trunk_lr_scale": 0.1},
                "per_method": {"PARTIAL": {"steps": 2000}}},
    "decoder": {"seed": 0, "steps": 1200},
    "baseline": {"seed": 0, "steps": 800},
    "calibrate": {"seed": 0, "n_identities": 150, "id_offset": 10000, "check_id_offset": 20000,
                  "levels": [1e-3, 1e-4, 1e-5]},
    "linkage": {"seed": 0, "max_impostors": 100000},
    "regen": {"seed": 0, "k": 5, "baseline_level": 1e-3},
    "probes": {"seed": 0, "steps": 400},
    "disconnect": {"seed": 0, "n_pairs": 50},
    "zk": {"seed": 0, "steps": 1500, "learning_rate": 2e-3, "trunk_lr_scale": 1.0, "sigma_range": [0.8, 3.0],
           "strength_range": [0.5, 1.5], "minus_sigma": 6.0, "partial_deblock_sigma": 2.0, "floor": 0.3},
}

SECTIONS = ("corpus", "protect", "teacher", "distill", "decoder", "baseline", "calibrate", "linkage", "regen",
            "probes", "disconnect", "zk")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


_CREDENTIAL_KEYS = {"token", "api_key", "apikey", "password", "secret", "authorization"}


def _credential_keys(obj, prefix: str = "") -> list[str]:
    found = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            if str(k).lower() in _CREDENTIAL_KEYS:
                found.append(prefix + str(k))
            found.extend(_credential_keys(v, f"{prefix}{k}."))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            found.extend(_credential_keys(v, f"{prefix}{i}."))
    return found


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> RunConfig:
        cfg = cls(_merge(DEFAULT_CONFIG, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(load_json(path))

    def validate(self) -> None:
        unknown = set(self.data) - set(SECTIONS) - {"seed", "output_root"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for s in SECTIONS:
            if not isinstance(self.data[s].get("seed"), int):
                raise ConfigError(f"section {s!r} needs an explicit integer seed")
        path = self.data["corpus"].get("path")
        if path and not Path(path).exists():
            raise ConfigError(f"corpus path {path} does not exist")
        for m in self.data["protect"]["methods"]:
            ProtectorConfig.from_dict(m)
        bad = _credential_keys(self.data)
        if bad:
            raise ConfigError(f"config key {bad[0]!r} looks like a credential; use a named environment variable")

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def hash(self) -> str:
        return sha256_obj(self.data)

    @property
    def output_root(self) -> Path:
        return Path(self.data["output_root"])

    def protector(self, method: str) -> ProtectorConfig:
        for m in self.data["protect"]["methods"]:
            if m["method"].upper() == method:
                return ProtectorConfig.from_dict(m)
        raise ConfigError(f"no protector configured for {method}")

    @property
    def methods(self) -> list[str]:
        return [m["method"].upper() for m in self.data["protect"]["methods"]]


def cache_root() -> Path:
    env = os.environ.get("IDLEAK_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "idleak"


def code_hash() -> str:
    src = Path(__file__).parent
    return sha256_obj({p.name: p.read_bytes().hex() for p in sorted(src.glob("*.py"))})[:16]


@dataclass
class StageRecord:
    name: str
    key: str
    path: Path
    files: dict[str, str]
    wall_clock_s: float
    cached: bool

    @property
    def digest(self) -> str:
        return sha256_obj(self.files)


def verify_artifact(path: Path) -> dict[str, str]:
    """Re-hash a finished stage directory against its recorded file hashes."""
    meta = load_json(path / ARTIFACT_FILE)
    actual = hash_tree(path, exclude=(ARTIFACT_FILE,))
    for rel, digest in meta["files"].items():
        if rel not in actual:
            raise HashMismatchError(f"cached artifact file missing: {path / rel}")
        if actual[rel] != digest:
            raise HashMismatchError(f"hash mismatch for cached artifact file {path / rel}")
    extra = set(actual) - set(meta["files"])
    if extra:
        raise HashMismatchError(f"unexpected file in cached artifact: {path / sorted(extra)[0]}")
    return meta["files"]


# -- stage context --------------------------------------------------------------

class Context:
    def __init__(self, config: RunConfig, cache: Path):
        self.config = config
        self.cache = cache
        self.records: dict[str, StageRecord] = {}
        self._memo: dict = {}

    def path(self, stage: str) -> Path:
        if stage not in self.records:
            raise StageError(f"stage {stage!r} has not been run")
        return self.records[stage].path

    def memo(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def corpus(self, which: str = "main") -> Dataset:
        return self.memo(("corpus", which), lambda: load_corpus(self.path("corpus") / which))

    def teacher(self) -> EmbedderModel:
        return self.memo("teacher", lambda: EmbedderModel.load(self.path("teacher")))

    def student(self, method: str) -> EmbedderModel:
        return self.memo(("student", method), lambda: EmbedderModel.load(self.path("distill") / method))

    def embeddings(self, domain: str) -> EmbeddingSet:
        return self.memo(("emb", domain), lambda: load_embeddings(self.path("embed") / domain))

    def thresholds(self) -> CalibratedThresholds:
        return self.memo("thr", lambda: CalibratedThresholds.load(self.path("calibrate") / "thresholds.json"))


# -- template and embedding directories -----------------------------------------

def save_templates(out: Path, tensors: np.ndarray, dataset: Dataset, config: ProtectorConfig,
                   source_corpus: str | Path | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "templates.flgt", np.asarray(tensors, dtype=np.float32))
    index = {"method": config.method.value, "protector": config.to_dict(), "config_hash": config.config_hash,
             "sample_ids": list(dataset.sample_ids), "labels": [int(x) for x in dataset.labels]}
    if config.method is Method.PARTIAL:
        index["layout"] = list(config.selected_subbands())
    if source_corpus is not None:
        index["source_corpus"] = str(Path(source_corpus).resolve())
    dump_json(out / "index.json", index)


def load_templates(root: Path) -> tuple[np.ndarray, dict]:
    return read_tensor(root / "templates.flgt", np.float32), load_json(root / "index.json")


def save_embeddings(out: Path, s: EmbeddingSet, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "embeddings.flgt", np.asarray(s.vectors, dtype=np.float64))
    dump_json(out / "index.json", {"source": s.source, "sample_ids": s.sample_ids.tolist(),
                                   "labels": [int(x) for x in s.labels], **(extra or {})})


def load_embeddings(root: str | Path) -> EmbeddingSet:
    root = Path(root)
    idx = load_json(root / "index.json")
    return EmbeddingSet(read_tensor(root / "embeddings.flgt", np.float64), np.asarray(idx["labels"]),
                        np.asarray(idx["sample_ids"]), idx.get("source", root.name))


def validation_mask(ds: Dataset) -> np.ndarray:
    val = set(ds.manifest.validation_ids)
    return np.array([int(x) in val for x in ds.labels])


# -- stages ---------------------------------------------------------------------

def stage_corpus(ctx: Context, out: Path) -> dict:
    c = ctx.config.section("corpus")
    cal = ctx.config.section("calibrate")
    if c.get("path"):
        shutil.copytree(c["path"], out / "main")
    else:
        generate_corpus(CorpusManifest(seed=c["seed"], n_identities=c["n_identities"],
                                       images_per_identity=c["images_per_identity"],
                                       train_fraction=c["train_fraction"]), out / "main")
    for name, offset in (("calibration", cal["id_offset"]), ("impostor_check", cal["check_id_offset"])):
        generate_corpus(CorpusManifest(seed=c["seed"], n_identities=cal["n_identities"],
                                       images_per_identity=c["images_per_identity"], id_offset=offset), out / name)
    return {}


def stage_teacher(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("teacher")
    model = train_teacher(ctx.corpus().split("train"), TeacherConfig(**cfg))
    model.save(out)
    return {"wall_clock_s": model.manifest["wall_clock_s"]}


def stage_protect(ctx: Context, out: Path) -> dict:
    ds = ctx.corpus()
    for m in ctx.config.methods:
        pc = ctx.config.protector(m)
        save_templates(out / m, protect_batch(ds.pixels, pc), ds, pc)
    return {}


def stage_distill(ctx: Context, out: Path) -> dict:
    d = ctx.config.section("distill")
    ds = ctx.corpus()
    train, val = ds.split("train"), ds.split("validation")
    info = {}
    for m in ctx.config.methods:
        params = {**d["default"], **d.get("per_method", {}).get(m, {}), "seed": d["seed"]}
        model = distill_student(ctx.teacher(), make_oracle(ctx.config.protector(m)), train.pixels,
                                DistillConfig(**params), val.pixels)
        model.save(out / m)
        info[m] = {"validation_mean_cosine": model.manifest["validation_mean_cosine"],
                   "wall_clock_s": model.manifest["wall_clock_s"]}
    return info


def stage_decoder(ctx: Context, out: Path) -> dict:
    model = train_decoder(ctx.teacher(), ctx.corpus().split("train"), DecoderConfig(**ctx.config.section("decoder")))
    model.save(out)
    return {"wall_clock_s": model.manifest["wall_clock_s"]}


def stage_baseline(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("baseline")
    train = ctx.corpus().split("train")
    for m in ctx.config.methods:
        model = train_pixel_baseline(make_oracle(ctx.config.protector(m)), train.pixels,
                                     BaselineConfig(steps=cfg["steps"], seed=cfg["seed"]))
        model.save(out / m)
    return {}


def stage_calibrate(ctx: Context, out: Path) -> dict:
    c = ctx.config.section("calibrate")
    teacher = ctx.teacher()
    cal = ctx.corpus("calibration")
    scores = impostor_scores(embed_images(teacher, cal.pixels), cal.labels, seed=c["seed"])
    th = calibrate_from_scores(scores, c["levels"], c["seed"])
    th.save(out / "thresholds.json")
    check = ctx.corpus("impostor_check")
    fresh = impostor_scores(embed_images(teacher, check.pixels), check.labels, seed=c["seed"] + 1)
    far = {f"{lvl:g}": {"nominal": lvl, "empirical": empirical_far(fresh, th.thresholds[lvl]),
                        "expected_false_accepts": lvl * len(fresh)} for lvl in th.levels}
    report = {"thresholds": th.to_dict(), "fresh_impostor_pairs": int(len(fresh)), "empirical_far": far}
    dump_json(out / "report.json", report)
    return report


def stage_zk_train(ctx: Context, out: Path) -> dict:
    z = ctx.config.section("zk")
    aug = ProxyAugmentation(tuple(z["sigma_range"]), tuple(z["strength_range"]))
    cfg = ZkConfig(steps=z["steps"], learning_rate=z["learning_rate"], trunk_lr_scale=z["trunk_lr_scale"],
                   seed=z["seed"], minus_sigma=z["minus_sigma"], partial_deblock_sigma=z["partial_deblock_sigma"])
    proxy = zk_train(ctx.teacher(), ctx.corpus().split("train").pixels, aug, cfg)
    proxy.save(out)
    return {"wall_clock_s": proxy.manifest["wall_clock_s"]}


def _zk_inputs(ctx: Context, method: str, tensors: np.ndarray, layout) -> np.ndarray:
    z = ctx.config.section("zk")
    return zk_preprocess_tensor(tensors, method, layout, z["minus_sigma"], z["partial_deblock_sigma"])


def stage_embed(ctx: Context, out: Path) -> dict:
    """Embeddings of every corpus image per domain (teacher, white-box students, proxy)."""
    ds = ctx.corpus()
    teacher = ctx.teacher()
    ids = np.asarray(ds.sample_ids)
    save_embeddings(out / ORIGINAL, EmbeddingSet(embed_images(teacher, ds.pixels), ds.labels, ids, "teacher"))
    proxy = EmbedderModel.load(ctx.path("zk_train"))
    for m in ctx.config.methods:
        tensors, idx = load_templates(ctx.path("protect") / m)
        s = ctx.student(m)
        save_embeddings(out / m, EmbeddingSet(s.embed_array(tensors), ds.labels, ids, f"student:{m}"),
                        {"param_hash": s.param_hash})
        zin = _zk_inputs(ctx, m, tensors, idx.get("layout"))
        save_embeddings(out / f"ZK_{m}", EmbeddingSet(proxy.embed_array(zin), ds.labels, ids, f"proxy:{m}"),
                        {"param_hash": proxy.param_hash})
    return {}


def _val(s: EmbeddingSet, mask: np.ndarray) -> EmbeddingSet:
    return EmbeddingSet(s.vectors[mask], s.labels[mask], s.sample_ids[mask], s.source)


def stage_linkage(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("linkage")
    mask = validation_mask(ctx.corpus())
    domains = list(ctx.config.methods) + [ORIGINAL]
    sets = {d: _val(ctx.embeddings(d), mask) for d in domains}
    grid = linkage_matrix(sets, query_domains=list(ctx.config.methods) + [ORIGINAL], key_domains=domains)
    verification = {}
    for d in domains:
        g, i = verification_pairs(sets[d], sets[ORIGINAL], cfg["max_impostors"], cfg["seed"])
        verification[d] = verification_eval(g, i).to_dict()
    similarity = {}
    orig = sets[ORIGINAL]
    for m in ctx.config.methods:
        similarity[m] = similarity_from_embeddings(sets[m].vectors, orig.vectors, orig.labels).to_dict()
    report = {
        "linkage": grid.to_dict(),
        "verification": {"template_to_face": {m: verification[m] for m in ctx.config.methods},
                         "face_to_face": verification[ORIGINAL]},
        "similarity": similarity,
        "n_validation_images": int(mask.sum()),
        "n_validation_identities": int(len(np.unique(orig.labels))),
    }
    dump_json(out / "report.json", report)
    return report


def _regen_scores(ctx: Context, emb: np.ndarray, source_emb: np.ndarray, k: int, seed: int,
                  source_pixels: np.ndarray) -> tuple[np.ndarray, float]:
    decoder = ctx.memo("decoder", lambda: DecoderModel.load(ctx.path("decoder")))
    imgs = regenerate_batch(decoder, emb, k, seed)
    gen = embed_images(ctx.teacher(), imgs.reshape(-1, *imgs.shape[2:])).reshape(len(emb), k, -1)
    scores = np.clip(np.einsum("nkd,nd->nk", gen, source_emb), -1.0, 1.0)
    psnr = mean_psnr(imgs[:, 0], source_pixels)
    return scores, psnr


def _attempts(keys, scores: np.ndarray, th: CalibratedThresholds) -> dict:
    return {str(key): [pass_level(float(s), th) for s in row] for key, row in zip(keys, scores)}


def stage_regen(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("regen")
    ds = ctx.corpus()
    mask = validation_mask(ds)
    pixels = ds.pixels[mask]
    orig = _val(ctx.embeddings(ORIGINAL), mask)
    th = ctx.thresholds()
    teacher = ctx.teacher()
    report = {"thresholds": th.to_dict(), "k": cfg["k"], "attack_unit": "one template per validation image",
              "regeneration": {}, "pixel_baseline": {}}
    for m in ctx.config.methods:
        e = _val(ctx.embeddings(m), mask)
        scores, psnr = _regen_scores(ctx, e.vectors, orig.vectors, cfg["k"], cfg["seed"], pixels)
        r = success_metrics(_attempts(e.sample_ids, scores, th), th, cfg["baseline_level"]).to_dict()
        r.update(mean_identity_similarity=float(scores.mean()), mean_psnr_to_source=psnr)
        report["regeneration"][m] = r
        # the pixel baseline is deterministic: its k attempts are one image repeated
        tensors, _ = load_templates(ctx.path("protect") / m)
        base = PixelBaseline.load(ctx.path("baseline") / m)
        rec = base.reconstruct_array(tensors[mask])
        bs = np.clip(np.sum(embed_images(teacher, rec) * orig.vectors, axis=1), -1.0, 1.0)
        b = success_metrics(_attempts(e.sample_ids, np.repeat(bs[:, None], cfg["k"], 1), th), th,
                            cfg["baseline_level"]).to_dict()
        b.update(mean_identity_similarity=float(bs.mean()), mean_psnr_to_source=mean_psnr(rec, pixels))
        report["pixel_baseline"][m] = b
    dump_json(out / "report.json", report)
    return report


def stage_probes(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("probes")
    ds = ctx.corpus()
    mask = validation_mask(ds)
    g, b, s = ds.attribute_arrays()
    pc = ProbeConfig(steps=cfg["steps"], seed=cfg["seed"])
    report = {}
    rng = np.random.default_rng(cfg["seed"])
    random_emb = rng.standard_normal((len(ds), ctx.embeddings(ORIGINAL).vectors.shape[1]))
    random_emb /= np.linalg.norm(random_emb, axis=1, keepdims=True)
    for name in list(ctx.config.methods) + ["random_control"]:
        vec = random_emb if name == "random_control" else ctx.embeddings(name).vectors
        data = AttributeSet(vec, ds.labels, g, b, s)
        model = train_probe(data.select(~mask), pc)
        report[name] = probe_eval(model, data.select(mask)).to_dict()
    dump_json(out / "report.json", report)
    return report


def stage_disconnect(ctx: Context, out: Path) -> dict:
    cfg = ctx.config.section("disconnect")
    a, b = disconnect_pairs(ctx.corpus().manifest, cfg["n_pairs"], cfg["seed"])
    r = metric_disconnect(ctx.teacher(), a, b).to_dict()
    dump_json(out / "report.json", r)
    return r


def stage_zk_eval(ctx: Context, out: Path) -> dict:
    z = ctx.config.section("zk")
    cfg = ctx.config.section("regen")
    ds = ctx.corpus()
    mask = validation_mask(ds)
    teacher = ctx.teacher()
    proxy = EmbedderModel.load(ctx.path("zk_train"))
    th = ctx.thresholds()
    # the 30 known pairs come from the calibration identities: disjoint from training and evaluation
    cal = ctx.corpus("calibration")
    pick = np.random.default_rng(z["seed"]).choice(len(cal), ZK_PAIR_COUNT, replace=False)
    pair_imgs = cal.pixels[np.sort(pick)]
    orig_all = ctx.embeddings(ORIGINAL)
    orig = _val(orig_all, mask)
    report = {"proxy_param_hash": proxy.param_hash, "preprocessing": PREPROCESS_TABLE,
              "minus_sigma": z["minus_sigma"],
              "partial_deblock_sigma": z["partial_deblock_sigma"], "validation_pairs": ZK_PAIR_COUNT, "methods": {},
              "note": "the 30 known pairs gate go/no-go only; they never enter training"}
    for m in ctx.config.methods:
        pc = ctx.config.protector(m)
        layout = list(pc.selected_subbands()) if pc.method is Method.PARTIAL else None
        vin = _zk_inputs(ctx, m, protect_batch(pair_imgs, pc), layout)
        vmean = float(np.mean(np.sum(proxy.embed_array(vin) * embed_images(teacher, pair_imgs), axis=1)))
        e = _val(ctx.embeddings(f"ZK_{m}"), mask)
        grid = linkage_matrix({"proxy": e, ORIGINAL: orig}, ["proxy"], [ORIGINAL])
        g, i = verification_pairs(e, orig, ctx.config.section("linkage")["max_impostors"],
                                  ctx.config.section("linkage")["seed"])
        scores, psnr = _regen_scores(ctx, e.vectors, orig.vectors, cfg["k"], cfg["seed"], ds.pixels[mask])
        r = success_metrics(_attempts(e.sample_ids, scores, th), th, cfg["baseline_level"])
        wb = linkage_matrix({"student": _val(ctx.embeddings(m), mask), ORIGINAL: orig}, ["student"], [ORIGINAL])
        report["methods"][m] = {
            "proxy_param_hash": proxy.param_hash,
            "validation_mean_cosine": vmean,
            "go": vmean >= z["floor"],
            "top1_recall": grid.cell("proxy", ORIGINAL),
            "whitebox_top1_recall": wb.cell("student", ORIGINAL),
            "verification_auroc": verification_eval(g, i).auroc,
            f"success_at_{cfg['k']}": r.success_at_k,
            "pass_at": {f"{lvl:g}": v for lvl, v in sorted(r.pass_at.items(), reverse=True)},
            "mean_psnr_to_source": psnr,
        }
    dump_json(out / "report.json", report)
    return report


@dataclass(frozen=True)
class Stage:
    name: str
    fn: Callable[[Context, Path], dict]
    deps: tuple[str, ...]
    sections: tuple[str, ...]


STAGES = (
    Stage("corpus", stage_corpus, (), ("corpus", "calibrate")),
    Stage("teacher", stage_teacher, ("corpus",), ("teacher",)),
    Stage("protect", stage_protect, ("corpus",), ("protect",)),
    Stage("distill", stage_distill, ("corpus", "teacher"), ("distill", "protect")),
    Stage("decoder", stage_decoder, ("corpus", "teacher"), ("decoder",)),
    Stage("calibrate", stage_calibrate, ("corpus", "teacher"), ("calibrate",)),
    Stage("baseline", stage_baseline, ("corpus",), ("baseline", "protect")),
    Stage("zk_train", stage_zk_train, ("corpus", "teacher"), ("zk",)),
    Stage("embed", stage_embed, ("corpus", "teacher", "protect", "distill", "zk_train"), ("zk",)),
    Stage("linkage", stage_linkage, ("corpus", "embed"), ("linkage",)),
    Stage("regen", stage_regen, ("corpus", "teacher", "protect", "embed", "decoder", "calibrate", "baseline"),
          ("regen",)),
    Stage("probes", stage_probes, ("corpus", "embed"), ("probes",)),
    Stage("disconnect", stage_disconnect, ("corpus", "teacher"), ("disconnect",)),
    Stage("zk_eval", stage_zk_eval,
          ("corpus", "teacher", "zk_train", "embed", "decoder", "calibrate"), ("zk", "regen", "linkage", "protect")),
)
STAGE_NAMES = tuple(s.name for s in STAGES)
REPORT_STAGES = ("calibrate", "linkage", "regen", "probes", "disconnect", "zk_eval")


def _closure(names) -> list[Stage]:
    by_name = {s.name: s for s in STAGES}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise StageError(f"unknown stages: {unknown}; available: {list(STAGE_NAMES)}")
    need: set[str] = set()

    def visit(n):
        if n not in need:
            need.add(n)
            for d in by_name[n].deps:
                visit(d)

    for n in names:
        visit(n)
    return [s for s in STAGES if s.name in need]


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    code_hash: str
    stages: dict = field(default_factory=dict)

    def append(self, rec: StageRecord) -> None:
        if rec.name in self.stages:
            raise StageError(f"stage {rec.name} already recorded in this run")
        self.stages[rec.name] = {"key": rec.key, "path": str(rec.path), "files": rec.files,
                                 "wall_clock_s": rec.wall_clock_s, "cached": rec.cached}

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "tool_version": self.tool_version, "code_hash": self.code_hash,
                "stages": self.stages}

    @property
    def total_wall_clock_s(self) -> float:
        return float(sum(s["wall_clock_s"] for s in self.stages.values()))


def run_pipeline(config: RunConfig, stages=None, cache: Path | None = None,
                 output_root: Path | None = None) -> RunManifest:
    """Run the requested stages and their dependencies in dependency order."""
    cache = Path(cache) if cache is not None else cache_root()
    out_root = Path(output_root) if output_root is not None else config.output_root
    out_root.mkdir(parents=True, exist_ok=True)
    dump_json(out_root / "config.json", config.data)
    plan = _closure(list(stages) if stages else STAGE_NAMES)
    ctx = Context(config, cache)
    chash = code_hash()
    manifest = RunManifest(config.hash, __version__, chash)
    for stage in plan:
        dep_digests = {}
        for d in stage.deps:
            verify_artifact(ctx.path(d))
            dep_digests[d] = ctx.records[d].digest
        key = sha256_obj({"stage": stage.name, "sections": {s: config.section(s) for s in stage.sections},
                          "deps": dep_digests, "code": chash, "version": __version__})[:24]
        final = cache / stage.name / key
        if (final / ARTIFACT_FILE).exists():
            files = verify_artifact(final)
            meta = load_json(final / ARTIFACT_FILE)
            rec = StageRecord(stage.name, key, final, files, meta["wall_clock_s"], True)
            log.info("stage %s: cached (%s)", stage.name, key)
        else:
            tmp = cache / stage.name / f"{key}.partial"
            if tmp.exists():
                shutil.rmtree(tmp)
            tmp.mkdir(parents=True)
            log.info("stage %s: running", stage.name)
            t0 = time.time()
            try:
                stage.fn(ctx, tmp)
            except Exception as e:
                dump_json(out_root / "run_manifest.json", manifest.to_dict())
                raise StageError(f"stage {stage.name} failed: {e}") from e
            wall = time.time() - t0
            files = hash_tree(tmp)
            dump_json(tmp / ARTIFACT_FILE, {"stage": stage.name, "key": key, "files": files, "wall_clock_s": wall})
            if final.exists():
                shutil.rmtree(final)
            tmp.rename(final)
            rec = StageRecord(stage.name, key, final, files, wall, False)
        ctx.records[stage.name] = rec
        manifest.append(rec)
        if stage.name in REPORT_STAGES:
            shutil.copyfile(final / "report.json", out_root / f"{stage.name}.json")
        dump_json(out_root / "run_manifest.json", manifest.to_dict())
    return manifest


def collect_reports(run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    return {name: load_json(run_dir / f"{name}.json") for name in REPORT_STAGES if (run_dir / f"{name}.json").exists()}
