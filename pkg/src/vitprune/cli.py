"""Command line entry point: ``vitprune <command> --config run.ini``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import analysis, arch, checkpoint, data, latency, nvit, pruner, sparsity
from . import train as tr
from .config import COMMANDS, ConfigError, RunConfig
from .config import load as load_config
from .losses import LossConfig
from .model import ViT

logger = logging.getLogger("vitprune")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_spec(cfg: RunConfig) -> arch.ArchSpec:
    m = cfg["model"]
    kw = {}
    if cfg["data"]["num_classes"] is not None:
        kw["num_classes"] = cfg["data"]["num_classes"]
    if m["num_classes"] is not None:
        kw["num_classes"] = m["num_classes"]
    if m["spec_file"]:
        try:
            with open(m["spec_file"]) as f:
                d = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError("model.spec_file", str(e)) from None
        return arch.ArchSpec.from_dict({**d.get("spec", d), **kw})
    if m["preset"] not in arch.PRESETS:
        raise ConfigError("model.preset", f"{m['preset']!r} not in {sorted(arch.PRESETS)}")
    return arch.PRESETS[m["preset"]](**kw)


def build_data(cfg: RunConfig, spec: arch.ArchSpec) -> tuple[data.Dataset, data.Dataset]:
    d = cfg["data"]
    if d["source"] == "synthetic":
        return data.synthetic_split(d["num_classes"], d["train_size"], d["test_size"], spec.image_size,
                                    spec.in_chans, d["noise"], seed=d["seed"])
    sets = []
    for split in ("train", "test"):
        imgs, labels = cfg.require("data", f"{split}_images"), cfg.require("data", f"{split}_labels")
        ds = data.load_idx(imgs, labels, spec.image_size, d["num_classes"])
        if ds.images.shape[1] != spec.in_chans:
            if ds.images.shape[1] != 1:
                raise ConfigError(f"data.{split}_images", "channel count does not match the model")
            ds = data.Dataset(np.repeat(ds.images, spec.in_chans, axis=1), ds.labels, ds.num_classes)
        sets.append(ds)
    return sets[0], sets[1]


def build_loss(cfg: RunConfig) -> LossConfig:
    l = cfg["loss"]
    try:
        return LossConfig(mode=l["mode"], alpha=l["alpha"], tau=l["tau"])
    except ValueError as e:
        raise ConfigError("loss", str(e)) from None


def build_cnn_teacher(cfg: RunConfig):
    if cfg["loss"]["teacher"] == "checkpoint":
        return tr.model_teacher(checkpoint.load_model(cfg.require("loss", "teacher_checkpoint")))
    return tr.labels_teacher


def build_lut(cfg: RunConfig, spec: arch.ArchSpec) -> latency.LatencyLUT:
    l = cfg["lut"]
    if l["source"] == "file":
        return latency.LatencyLUT.load(cfg.require("lut", "path"))
    grid = latency.GRIDS[l["grid"]]
    if l["source"] == "analytic":
        return latency.analytic_lut(grid, tokens=spec.num_tokens, batch_size=l["batch_size"])
    runner = latency.WallClockRunner(spec.num_tokens, l["batch_size"], seed=cfg["run"]["seed"])
    return latency.profile(grid, runner, repeats=l["repeats"])


def train_config(cfg: RunConfig, epochs: int | None = None) -> tr.TrainConfig:
    o = cfg["optim"]
    return tr.TrainConfig(epochs=o["epochs"] if epochs is None else epochs, batch_size=o["batch_size"],
                          lr_base=o["lr_base"], lr=o["lr"], warmup_epochs=o["warmup_epochs"],
                          weight_decay=o["weight_decay"], schedule=o["schedule"],
                          augment=cfg["data"]["augment"], seed=cfg["run"]["seed"])


def prune_schedule(cfg: RunConfig) -> pruner.PruneSchedule:
    p = cfg["prune"]
    kw = dict(interval=p["interval"], groups_per_removal=p["groups_per_removal"],
              target_speedup=p["target_speedup"], component_filter=p["component_filter"],
              alignment=p["alignment"], max_steps=p["max_steps"], selector=p["selector"],
              decay=p["decay"], eta=p["eta"], eta_fraction=p["eta_fraction"], h_div=p["h_div"],
              emb_div=p["emb_div"], min_emb=p["min_emb"], allow_empty_h=p["allow_empty_h"],
              allow_empty_mlp=p["allow_empty_mlp"],
              group_sizes={k.upper(): p[f"group_size_{k}"] for k in ("emb", "h", "qk", "v", "mlp")},
              batch_size=cfg["optim"]["batch_size"], lr_base=cfg["optim"]["lr_base"],
              lr=cfg["optim"]["lr"], weight_decay=cfg["optim"]["weight_decay"], seed=cfg["run"]["seed"])
    try:
        if p["preset"]:
            kind = p["preset"].upper()
            kw.pop("component_filter")
            kw.pop("group_sizes")
            kw["interval"] = pruner.SINGLE_COMPONENT_INTERVALS.get(kind, kw["interval"])
            return pruner.single_component(kind, **kw)
        return pruner.PruneSchedule(**kw)
    except ValueError as e:
        raise ConfigError("prune", str(e)) from None


def input_model(cfg: RunConfig) -> tuple[ViT, checkpoint.Checkpoint]:
    ck = checkpoint.load(cfg.require("run", "checkpoint"))
    return ck.to_model(), ck


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class RunDir:
    def __init__(self, cfg: RunConfig, argv: list[str]):
        self.path = cfg["run"]["out"]
        os.makedirs(self.path, exist_ok=True)
        self.cfg = cfg
        with open(self.file("config.ini"), "w") as f:
            f.write(cfg.to_ini())
        env = {"command": cfg.command, "argv": argv, "seed": cfg["run"]["seed"],
               "threads": cfg["run"]["threads"], "python": platform.python_version(),
               "numpy": np.__version__, "platform": platform.platform(), "config_hash": cfg.digest()}
        with open(self.file("env.json"), "w") as f:
            json.dump(env, f, indent=2)
        self._logs = {}

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def logger(self, name: str):
        fh = open(self.file(name), "w")
        self._logs[name] = fh

        def write(rec: dict):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        return write

    def close(self):
        for fh in self._logs.values():
            fh.close()

    def save(self, name: str, model: ViT, **kw) -> str:
        path = self.file(name)
        checkpoint.save_model(path, model, config_hash=self.cfg.digest(), **kw)
        return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, run: RunDir) -> dict:
    spec = build_spec(cfg)
    train_set, test_set = build_data(cfg, spec)
    seed = cfg["model"]["init_seed"] if cfg["model"]["init_seed"] is not None else cfg["run"]["seed"]
    model = ViT.create(spec, seed=seed)
    loss = build_loss(cfg)
    full = None
    if loss.needs_full_teacher:
        full = checkpoint.load_model(cfg.require("loss", "full_teacher_checkpoint"))
    tc = train_config(cfg)
    hist = tr.train(model, train_set, tc, loss, full, build_cnn_teacher(cfg), log=run.logger("metrics.jsonl"))
    metrics = {"train_acc": hist[-1]["train_acc"] if hist else tr.evaluate(model, train_set),
               "test_acc": tr.evaluate(model, test_set)}
    run.save("model.ckpt", model, counters={"epochs": tc.epochs}, metrics=metrics)
    return metrics


def _finetune(cfg: RunConfig, run: RunDir, model: ViT, epochs: int, teacher_default: ViT) -> dict:
    spec = model.spec
    train_set, test_set = build_data(cfg, spec)
    loss = build_loss(cfg)
    full = None
    if loss.needs_full_teacher:
        path = cfg["loss"]["full_teacher_checkpoint"]
        full = checkpoint.load_model(path) if path else teacher_default
    tr.train(model, train_set, train_config(cfg, epochs), loss, full, build_cnn_teacher(cfg),
             log=run.logger("metrics.jsonl"))
    return {"train_acc": tr.evaluate(model, train_set), "test_acc": tr.evaluate(model, test_set)}


def cmd_finetune(cfg: RunConfig, run: RunDir) -> dict:
    model, ck = input_model(cfg)
    metrics = _finetune(cfg, run, model, cfg["optim"]["epochs"], model.copy())
    run.save("model.ckpt", model, counters={**ck.counters, "finetune_epochs": cfg["optim"]["epochs"]},
             metrics=metrics)
    return metrics


def cmd_prune(cfg: RunConfig, run: RunDir) -> dict:
    model, ck = input_model(cfg)
    train_set, test_set = build_data(cfg, model.spec)
    lut = build_lut(cfg, model.spec)
    lut.save(run.file("lut.txt"))
    sched = prune_schedule(cfg)
    full = None
    if cfg["loss"]["full_teacher_checkpoint"]:
        full = checkpoint.load_model(cfg["loss"]["full_teacher_checkpoint"])
    res = pruner.run(model, train_set, sched, build_loss(cfg), lut, full, build_cnn_teacher(cfg),
                     log=run.logger("events.jsonl"))
    out = res.pruned if res.pruned is not None else res.model
    metrics = {"status": res.status, "removals": res.removals, "speedup": res.speedup,
               "eta": res.eta, "test_acc": tr.evaluate(out, test_set)}
    counters = {**ck.counters, "prune_steps": res.removals}
    run.save("masked.ckpt", res.model, counters=counters, metrics=metrics)
    run.save("model.ckpt", out, counters=counters, metrics=metrics)
    if res.status == "floor":
        logger.warning("target speedup not reached; stopped at the structural floor")
    return metrics


def cmd_generate(cfg: RunConfig, run: RunDir) -> dict:
    g = cfg["generate"]
    rule = nvit.NvitRule(emb=g["emb"], num_blocks=g["num_blocks"])
    spec = nvit.generate(rule, image_size=g["image_size"], patch_size=g["patch_size"],
                         num_classes=g["num_classes"])
    doc = {"spec": spec.to_dict(), "params": arch.count_params(spec), "flops": arch.count_flops(spec),
           "rounding": "dims computed from the rule, then rounded; H to even, QK to multiple of 8, halves up"}
    checkpoint.atomic_write(run.file("spec.json"), json.dumps(doc, indent=2).encode())
    print(json.dumps(doc, indent=2))
    return {"params": doc["params"], "flops": doc["flops"]}


def cmd_profile(cfg: RunConfig, run: RunDir) -> dict:
    spec = build_spec(cfg)
    lut = build_lut(cfg, spec)
    lut.save(run.file("lut.txt"))
    return {"measured": lut.measured_count, "runner": lut.runner}


def cmd_sparsify(cfg: RunConfig, run: RunDir) -> dict:
    model, ck = input_model(cfg)
    teacher = model.copy()
    sparsity.sparsify(model)
    epochs = cfg["sparsify"]["finetune_epochs"]
    metrics = {}
    if epochs:
        metrics = _finetune(cfg, run, model, epochs, teacher)
    else:
        _, test_set = build_data(cfg, model.spec)
        metrics["test_acc"] = tr.evaluate(model, test_set)
    reports = sparsity.verify_model(model)
    metrics["pattern_ok"] = all(r.ok for r in reports.values())
    metrics["violations"] = {k: r.reason for k, r in reports.items() if not r.ok}
    run.save("model.ckpt", model, counters=ck.counters, metrics=metrics)
    return metrics


def cmd_eval(cfg: RunConfig, run: RunDir) -> dict:
    model, _ = input_model(cfg)
    _, test_set = build_data(cfg, model.spec)
    metrics = {"top1": tr.evaluate(model, test_set, cfg["optim"]["batch_size"]), "n": len(test_set),
               "params": arch.count_params(model.spec), "flops": arch.count_flops(model.spec),
               "augmentation": "flip/crop only" if cfg["data"]["augment"] else "none"}
    with open(run.file("eval.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    return metrics


def cmd_analyze(cfg: RunConfig, run: RunDir) -> dict:
    events = cfg["analyze"]["events"]
    if events is None:
        ckpt = cfg.require("run", "checkpoint")
        events = os.path.join(os.path.dirname(ckpt), "events.jsonl")
    try:
        history = analysis.read_events(events)
    except OSError as e:
        raise ConfigError("analyze.events", str(e)) from None
    start = next(e for e in history if e["event"] == "start")
    spec = arch.ArchSpec.from_dict(start["spec"])
    lut = build_lut(cfg, spec)
    generated = None
    if cfg["model"]["spec_file"]:
        generated = build_spec(cfg)
    summary = analysis.report(history, run.path, lut, generated)
    problems = pruner.replay_removals(history)
    summary["replay_mismatches"] = problems
    if cfg["run"]["checkpoint"]:
        model = checkpoint.load_model(cfg["run"]["checkpoint"])
        _, test_set = build_data(cfg, model.spec)
        maps = analysis.attention_diversity(model, test_set.images[:cfg["analyze"]["diversity_batch"]])
        analysis.diversity_table(maps, run.file("diversity.tsv"))
    with open(run.file("summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if problems:
        raise RuntimeError(f"replay mismatch: {problems[0]}")
    return summary


HANDLERS = {"train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune, "generate": cmd_generate,
            "profile": cmd_profile, "sparsify": cmd_sparsify, "analyze": cmd_analyze, "eval": cmd_eval}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vitprune", description="Latency-aware ViT pruning toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory (overrides [run] out)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads(n: int):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command,
                          {("run", "seed"): args.seed, ("run", "threads"): args.threads,
                           ("run", "out"): args.out})
        with _threads(cfg["run"]["threads"]):
            run = RunDir(cfg, argv)
            try:
                result = HANDLERS[args.command](cfg, run)
            finally:
                run.close()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001  any failure past validation is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
