"""Report rendering: JSON, flat CSV and markdown tables."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

FORMATS = ("json", "csv", "markdown")


class UnknownFormatError(ValueError):
    pass


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj, key=str):
            out.extend(_flatten(obj[k], f"{prefix}.{k}" if prefix else str(k)))
        return out
    if isinstance(obj, list):
        if all(not isinstance(x, (dict, list)) for x in obj):
            return [(prefix, json.dumps(obj))]
        out = []
        for i, v in enumerate(obj):
            out.extend(_flatten(v, f"{prefix}.{i}"))
        return out
    return [(prefix, obj)]


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(header: list[str], rows: list[list]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(_fmt(c) for c in r) + " |" for r in rows]
    return lines


def linkage_table(linkage: dict, query_domains: list[str] | None = None) -> list[str]:
    qd = linkage["query_domains"]
    kd = linkage["key_domains"]
    rows = [[q] + linkage["top1_recall"][qd.index(q)] for q in (query_domains or qd)]
    return _table(["query \\ key"] + kd, rows)


def render_markdown(reports: dict) -> str:
    lines = ["# idleak report", ""]
    link = reports.get("linkage")
    if link:
        grid = link["linkage"]
        protectors = [q for q in grid["query_domains"] if q != "ORIGINAL"]
        lines += ["## Linkage: closed-set top-1 recall", ""] + linkage_table(grid, protectors)
        lines.append("")
        if "ORIGINAL" in grid["query_domains"] and "ORIGINAL" in grid["key_domains"]:
            oo = grid["top1_recall"][grid["query_domains"].index("ORIGINAL")][grid["key_domains"].index("ORIGINAL")]
            lines += [f"Original to original: {_fmt(oo)}", ""]
        ver = link["verification"]
        rows = [[m, v["auroc"], v["accuracy"]] for m, v in ver["template_to_face"].items()]
        rows.append(["face to face", ver["face_to_face"]["auroc"], ver["face_to_face"]["accuracy"]])
        lines += ["## 1:1 verification", ""] + _table(["pair type", "AUROC", "balanced accuracy"], rows) + [""]
        rows = [[m, s["template_to_source"]["mean"], s["same_identity_images"]["mean"], s["mean_difference"]]
                for m, s in link["similarity"].items()]
        lines += ["## Similarity: template vs own source, against same-identity images", ""]
        lines += _table(["protector", "mean A", "mean B", "A - B"], rows) + [""]
    regen = reports.get("regen")
    if regen:
        k = regen["k"]
        levels = list(next(iter(regen["regeneration"].values()))["pass_at"]) if regen["regeneration"] else []
        header = ["attack", f"Success@{k}"] + [f"Pass@{lvl}" for lvl in levels] + ["identity sim", "PSNR"]
        rows = []
        for kind, label in (("regeneration", "regen"), ("pixel_baseline", "pixel baseline")):
            for m, r in regen[kind].items():
                rows.append([f"{label} {m}", r[f"success_at_{k}"]] + [r["pass_at"][lvl] for lvl in levels]
                            + [r["mean_identity_similarity"], r["mean_psnr_to_source"]])
        lines += ["## Regeneration vs pixel reconstruction", ""] + _table(header, rows) + [""]
    cal = reports.get("calibrate")
    if cal:
        rows = [[lvl, cal["thresholds"]["thresholds"][lvl], v["empirical"]] for lvl, v in cal["empirical_far"].items()]
        lines += ["## FAR calibration", ""] + _table(["FAR", "threshold", "empirical FAR (fresh pairs)"], rows) + [""]
    probes = reports.get("probes")
    if probes:
        rows = [[name, r["group_accuracy"], r["chance"]["group_majority"], r["binary_accuracy"],
                 r["chance"]["binary_majority"], r["scalar_mae"], r["chance"]["scalar_median_mae"]]
                for name, r in probes.items()]
        lines += ["## Soft-attribute leakage", ""]
        lines += _table(["embeddings", "group acc", "chance", "binary acc", "chance", "scalar MAE", "median MAE"],
                        rows) + [""]
    dis = reports.get("disconnect")
    if dis:
        rows = [[name, s["mean_psnr"], s["mean_ssim"], s["mean_mse"], s["mean_identity_similarity"]]
                for name, s in dis["sets"].items()]
        lines += ["## Pixel metrics vs identity similarity", ""]
        lines += _table(["pair set", "PSNR", "SSIM", "MSE", "identity sim"], rows)
        lines += ["", f"Spearman(PSNR, identity): {_fmt(dis['spearman_psnr_identity'])}", ""]
    zk = reports.get("zk_eval")
    if zk:
        k = regen["k"] if regen else 5
        rows = [[m, r["validation_mean_cosine"], r["top1_recall"], r["whitebox_top1_recall"],
                 r["verification_auroc"], r[f"success_at_{k}"]] for m, r in zk["methods"].items()]
        lines += ["## Zero-knowledge proxy", ""]
        lines += _table(["protector", "30-pair val cos", "top-1", "white-box top-1", "AUROC", f"Success@{k}"], rows)
        lines += [""]
    return "\n".join(lines).rstrip() + "\n"


def render_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["report", "field", "value"])
    for name in sorted(reports):
        for key, value in _flatten(reports[name]):
            w.writerow([name, key, value])
    return buf.getvalue()


def render(reports: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(reports, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        return render_csv(reports)
    if fmt == "markdown":
        return render_markdown(reports)
    raise UnknownFormatError(f"unknown format {fmt!r}; choose from {FORMATS}")


def emit_report(reports: dict, fmt: str, out: str | Path) -> Path:
    text = render(reports, fmt)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    return out
