"""Command-line entry point: ``idleak <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .util import dump_json, load_json


def _json_or_empty(path: str | None) -> dict:
    return load_json(path) if path else {}


def _write_report(path: str, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dump_json(path, obj)
    print(f"wrote {path}")


def cmd_corpus(a) -> None:
    from .corpus import CorpusManifest, generate_corpus

    m = CorpusManifest(seed=a.seed, n_identities=a.ids, images_per_identity=a.per_id,
                       train_fraction=a.train_fraction, id_offset=a.id_offset)
    ds = generate_corpus(m, a.out, overwrite=a.overwrite)
    print(f"wrote {len(ds)} images for {a.ids} identities to {a.out}")


def cmd_protect(a) -> None:
    from .corpus import load_corpus
    from .harness import save_templates
    from .protectors import ProtectorConfig, protect_batch

    raw = _json_or_empty(a.config)
    cfg = ProtectorConfig.from_dict({"seed": raw.get("seed", 0), "params": raw.get("params", {}), "method": a.method})
    ds = load_corpus(a.inp)
    save_templates(Path(a.out), protect_batch(ds.pixels, cfg), ds, cfg, source_corpus=a.inp)
    print(f"wrote {len(ds)} {cfg.method.value} templates ({cfg.channels}x{cfg.spatial}x{cfg.spatial}) to {a.out}")


def cmd_train_teacher(a) -> None:
    from .corpus import load_corpus
    from .embedder import TeacherConfig, train_teacher

    ds = load_corpus(a.corpus)
    model = train_teacher(ds.split("train"), TeacherConfig(**_json_or_empty(a.config)))
    model.save(a.out)
    print(f"teacher saved to {a.out} (train accuracy {model.manifest['train_accuracy']:.3f})")


def cmd_distill(a) -> None:
    from .corpus import load_corpus
    from .embedder import DistillConfig, EmbedderModel, distill_student
    from .protectors import ProtectorConfig, make_oracle

    raw = _json_or_empty(a.protect_config)
    pc = ProtectorConfig.from_dict({"seed": raw.get("seed", 0), "params": raw.get("params", {}), "method": a.method})
    ds = load_corpus(a.corpus)
    val = ds.split("validation")
    model = distill_student(EmbedderModel.load(a.teacher), make_oracle(pc), ds.split("train").pixels,
                            DistillConfig(**_json_or_empty(a.config)), val.pixels if len(val) else None)
    model.save(a.out)
    print(f"student saved to {a.out} (validation cosine {model.manifest.get('validation_mean_cosine', float('nan')):.3f})")


def cmd_train_decoder(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel
    from .regenerator import DecoderConfig, train_decoder

    model = train_decoder(EmbedderModel.load(a.teacher), load_corpus(a.corpus).split("train"),
                          DecoderConfig(**_json_or_empty(a.config)))
    model.save(a.out)
    print(f"decoder saved to {a.out}")


def cmd_embed(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel, Source, embed_images
    from .harness import load_templates, save_embeddings
    from .linkage import EmbeddingSet
    from .zeroknowledge import zk_preprocess_tensor

    model = EmbedderModel.load(a.model)
    if a.templates:
        tensors, idx = load_templates(Path(a.templates))
        if model.source is Source.PROXY_STUDENT:
            tensors = zk_preprocess_tensor(tensors, idx["method"], idx.get("layout"), a.minus_sigma,
                                           a.deblock_sigma)
        vec, labels, ids, src = model.embed_array(tensors), idx["labels"], idx["sample_ids"], idx["method"]
    else:
        ds = load_corpus(a.corpus)
        vec, labels, ids, src = embed_images(model, ds.pixels), ds.labels, ds.sample_ids, "ORIGINAL"
    save_embeddings(Path(a.out), EmbeddingSet(vec, labels, ids, src), {"param_hash": model.param_hash})
    print(f"wrote {len(vec)} embeddings to {a.out}")


def cmd_link(a) -> None:
    from .harness import load_embeddings
    from .linkage import linkage_matrix, verification_eval, verification_pairs

    sets = {}
    for d in a.embeddings:
        s = load_embeddings(d)
        name = s.source or Path(d).name
        sets[name if name not in sets else f"{name}:{Path(d).name}"] = s
    grid = linkage_matrix(sets)
    names = list(sets)
    ver = {f"{q}->{k}": verification_eval(*verification_pairs(sets[q], sets[k])).to_dict()
           for q in names for k in names}
    _write_report(a.out, {"linkage": grid.to_dict(), "verification": ver})


def _verifier(a, teacher):
    from .embedder import embed_images
    from .verifier import HttpVerifierClient, MockVerifierClient

    if a.verifier == "mock":
        def score(x, y):
            e = embed_images(teacher, np.stack([x, y]))
            return float(np.clip(e[0] @ e[1], -1.0, 1.0))
        return MockVerifierClient(score, timeout_rate=a.inject_timeouts)
    if a.verifier == "http":
        if not a.endpoint:
            raise SystemExit("--endpoint is required with --verifier http")
        return HttpVerifierClient(a.endpoint, a.token_env, a.timeout)
    return None


def cmd_regen(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel, embed_images
    from .harness import load_templates
    from .probes import mean_psnr
    from .regenerator import CalibratedThresholds, DecoderModel, pass_level, regenerate_batch, success_metrics
    from .verifier import verify_many

    tensors, idx = load_templates(Path(a.templates))
    corpus_dir = a.corpus or idx.get("source_corpus")
    if not corpus_dir:
        raise SystemExit("source images unknown: pass --corpus")
    ds = load_corpus(corpus_dir)
    pos = {sid: i for i, sid in enumerate(ds.sample_ids)}
    src = ds.pixels[[pos[s] for s in idx["sample_ids"]]]
    teacher = EmbedderModel.load(a.teacher)
    th = CalibratedThresholds.load(a.thresholds)
    emb = EmbedderModel.load(a.student).embed_array(tensors)
    imgs = regenerate_batch(DecoderModel.load(a.decoder), emb, a.k, a.seed)
    client = _verifier(a, teacher)
    errors = {}
    if client is None:
        gen = embed_images(teacher, imgs.reshape(-1, *imgs.shape[2:])).reshape(len(emb), a.k, -1)
        scores = np.einsum("nkd,nd->nk", gen, embed_images(teacher, src))
        attempts = {sid: [pass_level(float(s), th) for s in row] for sid, row in zip(idx["sample_ids"], scores)}
    else:
        pairs = {f"{sid}#{j}": (imgs[i, j], src[i]) for i, sid in enumerate(idx["sample_ids"]) for j in range(a.k)}
        outcomes = verify_many(client, pairs, th, retries=a.retries, concurrency=a.concurrency)
        attempts = {sid: [] for sid in idx["sample_ids"]}
        for key in sorted(outcomes, key=lambda s: (s.rsplit("#", 1)[0], int(s.rsplit("#", 1)[1]))):
            o = outcomes[key]
            attempts[key.rsplit("#", 1)[0]].append(None if o.result is None else o.result.level)
            if o.error:
                errors[key] = o.error
    report = success_metrics(attempts, th).to_dict()
    report.update(verifier=a.verifier, errors=errors, mean_psnr_to_source=mean_psnr(imgs[:, 0], src))
    _write_report(a.out, report)


def cmd_calibrate(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel
    from .regenerator import calibrate_thresholds

    levels = [float(x) for x in a.levels.split(",")]
    th = calibrate_thresholds(EmbedderModel.load(a.teacher), load_corpus(a.corpus), levels, a.seed)
    th.save(a.out)
    print(f"wrote {a.out}: " + ", ".join(f"{lvl:g}->{t:.4f}" for lvl, t in th.thresholds.items()))


def cmd_probe(a) -> None:
    from .harness import load_embeddings
    from .probes import AttributeSet, ProbeConfig, identity_disjoint_split, probe_eval, train_probe

    s = load_embeddings(a.embeddings)
    attrs = load_json(a.attributes)
    rows = [attrs[sid] for sid in s.sample_ids]
    data = AttributeSet(s.vectors, s.labels, [r["group"] for r in rows], [r["binary_attr"] for r in rows],
                        [r["scalar_attr"] for r in rows])
    train, test = identity_disjoint_split(data, a.test_fraction, a.seed)
    model = train_probe(train, ProbeConfig(seed=a.seed))
    _write_report(a.out, probe_eval(model, test).to_dict())


def cmd_disconnect(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel
    from .probes import disconnect_pairs, metric_disconnect

    ds = load_corpus(a.corpus)
    same, cross = disconnect_pairs(ds.manifest, a.pairs, a.seed)
    _write_report(a.out, metric_disconnect(EmbedderModel.load(a.teacher), same, cross).to_dict())


def cmd_zk_train(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel
    from .zeroknowledge import ProxyAugmentation, ZkConfig, zk_train

    raw = _json_or_empty(a.config)
    aug = ProxyAugmentation(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.pop("augmentation", {}).items()})
    proxy = zk_train(EmbedderModel.load(a.teacher), load_corpus(a.corpus).split("train").pixels, aug, ZkConfig(**raw))
    proxy.save(a.out)
    print(f"proxy saved to {a.out}")


def cmd_zk_eval(a) -> None:
    from .corpus import load_corpus
    from .embedder import EmbedderModel, embed_images
    from .harness import load_templates
    from .linkage import EmbeddingSet, linkage_matrix, verification_eval, verification_pairs
    from .protectors import Method, ProtectedTemplate
    from .regenerator import CalibratedThresholds, DecoderModel, pass_level, regenerate_batch, success_metrics
    from .zeroknowledge import PREPROCESS_TABLE, ZkValidationSet, zk_preprocess_tensor, zk_validate

    proxy = EmbedderModel.load(a.proxy)
    teacher = EmbedderModel.load(a.teacher)
    report = {"proxy_param_hash": proxy.param_hash, "preprocessing": PREPROCESS_TABLE, "methods": {}}
    for tdir in a.templates:
        tensors, idx = load_templates(Path(tdir))
        method = idx["method"]
        ptens, pidx = load_templates(Path(a.pairs) / method)
        pimgs = load_corpus(pidx["source_corpus"])
        ppos = {sid: i for i, sid in enumerate(pimgs.sample_ids)}
        pair_images = pimgs.pixels[[ppos[s] for s in pidx["sample_ids"]]]
        vset = ZkValidationSet(Method(method), pair_images,
                               [ProtectedTemplate(t, method, pidx["config_hash"], tuple(pidx["layout"]) if pidx.get("layout") else None)
                                for t in ptens])
        val = zk_validate(proxy, vset, teacher, a.floor, a.minus_sigma, a.deblock_sigma)
        ds = load_corpus(a.corpus or idx["source_corpus"])
        pos = {sid: i for i, sid in enumerate(ds.sample_ids)}
        src = ds.pixels[[pos[s] for s in idx["sample_ids"]]]
        labels, ids = np.asarray(idx["labels"]), np.asarray(idx["sample_ids"])
        e = proxy.embed_array(zk_preprocess_tensor(tensors, method, idx.get("layout"), a.minus_sigma,
                                                    a.deblock_sigma))
        o = embed_images(teacher, src)
        q, k = EmbeddingSet(e, labels, ids, "proxy"), EmbeddingSet(o, labels, ids, "ORIGINAL")
        entry = {"validation": val.to_dict(), "top1_recall": linkage_matrix({"proxy": q, "ORIGINAL": k},
                                                                            ["proxy"], ["ORIGINAL"]).cell("proxy", "ORIGINAL"),
                 "verification_auroc": verification_eval(*verification_pairs(q, k)).auroc}
        if a.decoder and a.thresholds:
            th = CalibratedThresholds.load(a.thresholds)
            imgs = regenerate_batch(DecoderModel.load(a.decoder), e, a.k, a.seed)
            gen = embed_images(teacher, imgs.reshape(-1, *imgs.shape[2:])).reshape(len(e), a.k, -1)
            scores = np.einsum("nkd,nd->nk", gen, o)
            att = {sid: [pass_level(float(s), th) for s in row] for sid, row in zip(ids, scores)}
            entry[f"success_at_{a.k}"] = success_metrics(att, th).success_at_k
        report["methods"][method] = entry
    _write_report(a.out, report)


def cmd_run(a) -> None:
    from .harness import RunConfig, run_pipeline

    cfg = RunConfig.load(a.config)
    out = Path(a.out) if a.out else None
    manifest = run_pipeline(cfg, a.stages or None, output_root=out)
    root = out or cfg.output_root
    done = ", ".join(f"{k}{' (cached)' if v['cached'] else ''}" for k, v in manifest.stages.items())
    print(f"run complete in {root}: {done}")


def cmd_report(a) -> None:
    from .harness import collect_reports
    from .reports import emit_report, render

    reports = collect_reports(a.run)
    if a.out:
        emit_report(reports, a.format, a.out)
        print(f"wrote {a.out}")
    else:
        sys.stdout.write(render(reports, a.format))


def cmd_serve(a) -> None:
    import uvicorn

    from .service import app_from_dirs

    uvicorn.run(app_from_dirs(a.teacher, a.thresholds, a.token_env), host=a.host, port=a.port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idleak", description="Identity leakage evaluation for protected face templates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("corpus", help="render a synthetic face corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--ids", type=int, required=True)
    s.add_argument("--per-id", type=int, required=True)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--id-offset", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(fn=cmd_corpus)

    s = sub.add_parser("protect", help="protect every image of a corpus")
    s.add_argument("--method", type=str.upper, choices=["PARTIAL", "MINUS", "HIGHPASS"], required=True)
    s.add_argument("--config", help="JSON with seed and params")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_protect)

    s = sub.add_parser("train-teacher", help="train the margin-softmax teacher on a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("distill", help="train a white-box student against a protector oracle")
    s.add_argument("--teacher", required=True)
    s.add_argument("--method", type=str.upper, choices=["PARTIAL", "MINUS", "HIGHPASS"], required=True)
    s.add_argument("--protect-config")
    s.add_argument("--config", help="JSON distillation settings")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("train-decoder", help="train the conditional face decoder on teacher embeddings")
    s.add_argument("--teacher", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_decoder)

    s = sub.add_parser("embed", help="embed templates (student/proxy) or corpus images (teacher)")
    s.add_argument("--model", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--templates")
    g.add_argument("--corpus")
    s.add_argument("--minus-sigma", type=float, default=6.0)
    s.add_argument("--deblock-sigma", type=float, default=2.0, help="PARTIAL without DC: high-pass after offset recovery (0 disables)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("link", help="closed-set linkage grid over embedding directories")
    s.add_argument("--embeddings", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_link)

    def verifier_opts(s):
        s.add_argument("--verifier", choices=["local", "mock", "http"], default="local")
        s.add_argument("--endpoint")
        s.add_argument("--token-env", help="name of the environment variable holding the bearer token")
        s.add_argument("--timeout", type=float, default=10.0)
        s.add_argument("--retries", type=int, default=2)
        s.add_argument("--concurrency", type=int, default=1)
        s.add_argument("--inject-timeouts", type=float, default=0.0, help="mock only: injected timeout rate")

    s = sub.add_parser("regen", help="regenerate faces from student embeddings and verify them")
    s.add_argument("--decoder", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--corpus")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--out", required=True)
    verifier_opts(s)
    s.set_defaults(fn=cmd_regen)

    s = sub.add_parser("calibrate", help="FAR thresholds from impostor pairs")
    s.add_argument("--teacher", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--levels", default="1e-3,1e-4,1e-5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("probe", help="soft-attribute probes on embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--attributes", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("disconnect", help="pixel metrics vs identity similarity on contrast pairs")
    s.add_argument("--corpus", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--pairs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_disconnect)

    zk = sub.add_parser("zk", help="zero-knowledge proxy attack").add_subparsers(dest="zk_command", required=True)
    s = zk.add_parser("train")
    s.add_argument("--teacher", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_zk_train)
    s = zk.add_parser("eval")
    s.add_argument("--proxy", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--templates", nargs="+", required=True)
    s.add_argument("--pairs", required=True, help="directory with one 30-pair template directory per method")
    s.add_argument("--corpus")
    s.add_argument("--decoder")
    s.add_argument("--thresholds")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--floor", type=float, default=0.3)
    s.add_argument("--minus-sigma", type=float, default=6.0)
    s.add_argument("--deblock-sigma", type=float, default=2.0, help="PARTIAL without DC: high-pass after offset recovery (0 disables)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_zk_eval)

    s = sub.add_parser("run", help="run the cached end-to-end pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--stages", nargs="+")
    s.add_argument("--out", help="run directory (defaults to output_root in the config)")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("report", help="render the reports of a run")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=["json", "csv", "markdown"], default="markdown")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("serve", help="serve the local verifier over HTTP")
    s.add_argument("--teacher", required=True)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--token-env")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        if args.verbose:
            raise
        print(f"idleak {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
