"""End-to-end acceptance on the default configuration.

Two complete pipeline runs go into separate caches under ``cache_root()/acceptance``.
The first session builds them (well over an hour on one CPU core); later sessions
reuse the verified artifacts, whose recorded wall clocks still reflect the original
computation. Select with ``-m acceptance``; skip with ``-m "not acceptance"``.
"""
from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest
import torch

from idleak.embedder import distillation_loss
from idleak.harness import METHODS, ORIGINAL, RunConfig, cache_root, collect_reports, run_pipeline
from idleak.linkage import auroc
from idleak.probes import pixel_metrics
from idleak.protectors import Method, ProtectorConfig, invert_full_partial, protect
from idleak.corpus import CorpusManifest, render_corpus

from .conftest import ACCEPTANCE

pytestmark = pytest.mark.acceptance

LEVELS = ("1e-05", "0.0001", "0.001")


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def runs():
    base = cache_root() / "acceptance"
    out = {}
    for tag in ("a", "b"):
        t0 = time.time()
        manifest = run_pipeline(RunConfig.from_dict({}), cache=base / tag / "cache", output_root=base / tag / "run")
        out[tag] = {"manifest": manifest, "reports": collect_reports(base / tag / "run"),
                    "session_s": time.time() - t0}
    return out


@pytest.fixture(scope="module")
def rep(runs):
    return runs["a"]["reports"]


def test_c01_teacher_quality(runs, rep):
    a = rep["linkage"]["verification"]["face_to_face"]["auroc"]
    wall = runs["a"]["manifest"].stages["teacher"]["wall_clock_s"]
    record(1, a >= 0.97 and wall <= 1200, f"face-to-face AUROC {a:.4f} (>= 0.97), teacher wall {wall:.0f}s (<= 1200)")


def test_c02_full_band_round_trip():
    imgs = render_corpus(CorpusManifest(seed=1, n_identities=5, images_per_identity=4)).pixels
    cfg = ProtectorConfig(Method.PARTIAL, 0, {"n_selected": 64, "n_lowest_dropped": 0})
    err = max(float(np.max(np.abs(invert_full_partial(protect(x, cfg)) - x))) for x in imgs)
    record(2, err <= 1e-4, f"max abs round-trip error {err:.2e} (<= 1e-4)")


def test_c03_loss_gradient():
    torch.manual_seed(7)
    net = torch.nn.Sequential(torch.nn.Linear(10, 20), torch.nn.Tanh(), torch.nn.Linear(20, 16)).double()
    n_params = sum(p.numel() for p in net.parameters())
    x = torch.randn(8, 10, dtype=torch.float64)
    target = torch.nn.functional.normalize(torch.randn(8, 16, dtype=torch.float64), dim=1)
    analytic = torch.cat([g.reshape(-1) for g in
                          torch.autograd.grad(distillation_loss(net(x), target), list(net.parameters()))])
    numeric, h = [], 1e-6
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(distillation_loss(net(x), target))
                flat[i] = old - h
                down = float(distillation_loss(net(x), target))
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = float(torch.linalg.norm(analytic - numeric) / torch.linalg.norm(numeric))
    record(3, n_params <= 1000 and rel <= 1e-3, f"relative error {rel:.2e} (<= 1e-3) on {n_params} params")


def test_c04_linkage(rep):
    grid = rep["linkage"]["linkage"]
    q, k, r = grid["query_domains"], grid["key_domains"], np.array(grid["top1_recall"])
    cell = lambda a, b: float(r[q.index(a), k.index(b)])  # noqa: E731
    ceiling = cell(ORIGINAL, ORIGINAL)
    shape_ok = set(METHODS) <= set(q) and k == [*METHODS, ORIGINAL]
    got = {m: cell(m, ORIGINAL) for m in METHODS}
    ok = shape_ok and all(v >= 0.85 and v >= 0.95 * ceiling for v in got.values())
    detail = ", ".join(f"{m} {v:.3f}" for m, v in got.items())
    record(4, ok, f"{detail}; original->original {ceiling:.3f}; need >= max(0.85, {0.95 * ceiling:.3f})")


def test_c05_verification(rep):
    v = rep["linkage"]["verification"]
    got = {m: v["template_to_face"][m]["auroc"] for m in METHODS}
    ok = all(a >= 0.95 for a in got.values()) and "auroc" in v["face_to_face"]
    record(5, ok, ", ".join(f"{m} {a:.4f}" for m, a in got.items())
           + f" (>= 0.95); face-to-face ceiling {v['face_to_face']['auroc']:.4f}")


def test_c06_similarity_ordering(rep):
    sim = rep["linkage"]["similarity"]
    got = {m: sim[m]["mean_difference"] for m in METHODS}
    hists = all(sim[m]["template_to_source"]["histogram"] and sim[m]["same_identity_images"]["histogram"]
                for m in METHODS)
    record(6, hists and all(d > 0 for d in got.values()),
           ", ".join(f"{m} {d:+.4f}" for m, d in got.items()) + " (> 0), histograms emitted")


def test_c07_regeneration(rep):
    regen, cal = rep["regen"]["regeneration"], rep["calibrate"]
    succ = {m: regen[m]["success_at_5"] for m in METHODS}
    mono = all(regen[m]["pass_at"][LEVELS[0]] <= regen[m]["pass_at"][LEVELS[1]] <= regen[m]["pass_at"][LEVELS[2]]
               for m in METHODS)
    n_imp = cal["thresholds"]["impostor_count"]
    far = cal["empirical_far"]["0.001"]["empirical"]
    ok = all(s >= 0.80 for s in succ.values()) and mono and n_imp >= 1e5 and 1e-3 / 3 <= far <= 3e-3
    record(7, ok, ", ".join(f"{m} {s:.3f}" for m, s in succ.items())
           + f" (>= 0.80); monotone {mono}; {n_imp} impostors; empirical FAR@1e-3 {far:.2e}")


def test_c08_baseline_contrast(rep):
    regen, base = rep["regen"]["regeneration"], rep["regen"]["pixel_baseline"]
    parts, ok = [], True
    for m in METHODS:
        s, bs = regen[m]["success_at_5"], base[m]["success_at_5"]
        p, bp = regen[m]["mean_psnr_to_source"], base[m]["mean_psnr_to_source"]
        ok &= s > bs and bp > p
        parts.append(f"{m} success {s:.3f}>{bs:.3f} psnr {bp:.2f}>{p:.2f}")
    record(8, ok, "; ".join(parts))


def test_c09_soft_leakage(rep):
    pr = rep["probes"]
    parts, ok = [], True
    for m in METHODS:
        r = pr[m]
        ok &= (r["group_accuracy"] >= 2 / 7 and r["binary_accuracy"] >= 0.75
               and r["scalar_mae"] <= 0.6 * r["chance"]["scalar_median_mae"])
        parts.append(f"{m} group {r['group_accuracy']:.3f} binary {r['binary_accuracy']:.3f} "
                     f"mae ratio {r['scalar_mae'] / r['chance']['scalar_median_mae']:.3f}")
    c = pr["random_control"]
    ctrl = (abs(c["group_accuracy"] - c["chance"]["group_majority"]) <= 0.1
            and abs(c["binary_accuracy"] - c["chance"]["binary_majority"]) <= 0.1)
    parts.append(f"control group {c['group_accuracy']:.3f}/{c['chance']['group_majority']:.3f} "
                 f"binary {c['binary_accuracy']:.3f}/{c['chance']['binary_majority']:.3f}")
    record(9, ok and ctrl, "; ".join(parts))


def test_c10_zero_knowledge(rep):
    zk = rep["zk_eval"]
    parts, ok = [], zk["validation_pairs"] == 30
    for m in METHODS:
        r = zk["methods"][m]
        ok &= r["top1_recall"] >= 0.70 and r["success_at_5"] >= 0.70 and r["top1_recall"] <= r["whitebox_top1_recall"] + 0.05
        parts.append(f"{m} top1 {r['top1_recall']:.3f} (white-box {r['whitebox_top1_recall']:.3f}) "
                     f"success {r['success_at_5']:.3f}")
    record(10, ok, "; ".join(parts) + f"; {zk['validation_pairs']} validation pairs")


def test_c11_metric_consistency():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        psnr, _, mse = pixel_metrics(a, b)
        worst = max(worst, abs(psnr - 10 * math.log10(255 ** 2 / mse)))
    scores = np.round(rng.random(100), 2)
    g, i = scores[:50], scores[50:]
    brute = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x, y in itertools.product(g, i)) / (len(g) * len(i))
    exact = auroc(g, i) == brute
    record(11, worst <= 0.01 and exact, f"worst PSNR gap {worst:.2e} dB (<= 0.01); AUROC exact {exact}")


def _numeric_leaves(obj, path=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _numeric_leaves(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _numeric_leaves(v, f"{path}[{i}]")
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        yield path, float(obj)
    elif obj is None or isinstance(obj, bool):
        yield path, obj


def test_c12_reproducibility(runs):
    a = dict(_numeric_leaves(runs["a"]["reports"]))
    b = dict(_numeric_leaves(runs["b"]["reports"]))
    worst, bad = 0.0, []
    for key in sorted(set(a) | set(b)):
        x, y = a.get(key, "missing"), b.get(key, "missing")
        if isinstance(x, float) and isinstance(y, float):
            gap = abs(x - y) if not (math.isnan(x) and math.isnan(y)) else 0.0
            worst = max(worst, gap)
            if gap > 1e-6:
                bad.append(key)
        elif x != y:
            bad.append(key)
    walls = [runs[t]["manifest"].total_wall_clock_s for t in ("a", "b")]
    ok = not bad and max(walls) <= 3 * 3600
    record(12, ok, f"{len(a)} numeric leaves, worst gap {worst:.1e} (<= 1e-6), {len(bad)} mismatched; "
                   f"pipeline wall {walls[0] / 60:.1f} / {walls[1] / 60:.1f} min (<= 180)")
