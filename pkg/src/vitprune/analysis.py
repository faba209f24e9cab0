"""Attention diversity, dimension trends and latency-fit reports from a run's event log."""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from . import nvit
from . import tensor as T
from .arch import ArchSpec, BlockSpec
from .latency import LatencyLUT, direct_cost, model_latency, r_squared
from .model import ViT


def cosine_distances(vecs: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cos over rows; pairs involving a zero row get distance 0."""
    v = np.asarray(vecs, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = v / safe[:, None]
    d = 1.0 - u @ u.T
    zero = norms == 0
    d[zero, :] = 0.0
    d[:, zero] = 0.0
    np.fill_diagonal(d, 0.0)
    d = 0.5 * (d + d.T)
    return np.clip(d, 0.0, 2.0)


def attention_diversity(model: ViT, images: np.ndarray) -> list[np.ndarray]:
    """Per block ``[h, h]`` cosine distances of batch-averaged attention maps."""
    with T.no_grad():
        out = model(images, return_attn=True)
    return [cosine_distances(a.reshape(a.shape[0], int(np.prod(a.shape[1:])))) for a in out["attn"]]


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------

def read_events(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def spec_from_dims(spec: ArchSpec, dims: list[list[int]]) -> ArchSpec:
    blocks = [BlockSpec(h=int(h), qk=max(int(qk), 1), v=max(int(v), 1), mlp=int(m))
              for _, h, qk, v, m in dims]
    return spec.with_blocks(blocks, emb=int(dims[0][0]) if dims else spec.emb)


def avg_dims(dims: list[list[int]]) -> dict[str, float]:
    a = np.asarray(dims, dtype=np.float64)
    return {k: float(a[:, j].mean()) for j, k in enumerate(("emb", "h", "qk", "v", "mlp"))}


def _write(path, header, rows, delim="\t"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter=delim, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def report(history: list[dict], out_dir, lut: LatencyLUT | None = None,
           generated: ArchSpec | None = None) -> dict:
    """Write plot-ready tables for a pruning run and return a summary.

    Files (tab separated, one header row):
      dims.tsv          event, step, block, emb, h, qk, v, mlp
      avg_dims.tsv      event, step, emb, h, qk, v, mlp (mean over blocks)
      ledger.tsv        index, step, group, taylor, saving, score, eta, speedup
      latency_fit.tsv   event, lut_latency, direct_cost
      trend.tsv         block, h, qk, v, mlp for the final (and generated) spec
      summary.json
    """
    os.makedirs(out_dir, exist_ok=True)
    start = next(e for e in history if e["event"] == "start")
    spec = ArchSpec.from_dict(start["spec"])
    snaps = [("start", 0, start["dims"])]
    snaps += [(f"removal{e['index']}", e["step"], e["dims"]) for e in history if e["event"] == "removal"]

    dims_rows, avg_rows = [], []
    for tag, step, dims in snaps:
        for b, d in enumerate(dims):
            dims_rows.append([tag, step, b, *d])
        a = avg_dims(dims)
        avg_rows.append([tag, step, *(_fmt(a[k]) for k in ("emb", "h", "qk", "v", "mlp"))])
    _write(os.path.join(out_dir, "dims.tsv"), ["event", "step", "block", "emb", "h", "qk", "v", "mlp"], dims_rows)
    _write(os.path.join(out_dir, "avg_dims.tsv"), ["event", "step", "emb", "h", "qk", "v", "mlp"], avg_rows)

    ledger_rows = [[e["index"], e["step"], e["group"], _fmt(e["taylor"]), _fmt(e["saving"]),
                    _fmt(e["score"]), _fmt(e["eta"] or 0.0), _fmt(e["speedup"])]
                   for e in history if e["event"] == "removal"]
    _write(os.path.join(out_dir, "ledger.tsv"),
           ["index", "step", "group", "taylor", "saving", "score", "eta", "speedup"], ledger_rows)

    summary = {"removals": len(ledger_rows), "avg_dims_start": avg_dims(snaps[0][2]),
               "avg_dims_final": avg_dims(snaps[-1][2])}
    end = [e for e in history if e["event"] == "end"]
    if end:
        summary.update(status=end[-1]["status"], steps=end[-1]["steps"], speedup=end[-1]["speedup"],
                       eta=end[-1]["eta"])

    if lut is not None:
        est, direct = [], []
        for tag, _, dims in snaps:
            s = spec_from_dims(spec, dims)
            est.append(model_latency(lut, s))
            direct.append(direct_cost(s, lut.tokens, lut.batch_size))
        _write(os.path.join(out_dir, "latency_fit.tsv"), ["event", "lut_latency", "direct_cost"],
               [[t, _fmt(a), _fmt(b)] for (t, _, _), a, b in zip(snaps, est, direct)])
        summary["latency_r2"] = r_squared(direct, est)

    final = spec_from_dims(spec, snaps[-1][2])
    summary["trend"] = nvit.trend_checks(final)
    trend_rows = [["final", b, blk.h, blk.qk, blk.v, blk.mlp] for b, blk in enumerate(final.blocks)]
    if generated is not None:
        summary["trend_generated"] = nvit.trend_checks(generated)
        trend_rows += [["generated", b, blk.h, blk.qk, blk.v, blk.mlp]
                       for b, blk in enumerate(generated.blocks)]
    _write(os.path.join(out_dir, "trend.tsv"), ["model", "block", "h", "qk", "v", "mlp"], trend_rows)

    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def diversity_table(maps: list[np.ndarray], path) -> None:
    rows = []
    for b, m in enumerate(maps):
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                rows.append([b, i, j, _fmt(m[i, j])])
    _write(path, ["block", "head_i", "head_j", "cosine_distance"], rows)
