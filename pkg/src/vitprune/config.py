"""INI run configuration with typed, fully materialised defaults.

Grammar: standard INI (``[section]`` headers, ``key = value`` lines, ``#`` or
``;`` comments).  Booleans accept true/false/yes/no/1/0.  An empty value means
"use the default", which for some keys depends on the subcommand (see
``COMMAND_DEFAULTS``).  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# section -> key -> (type, default); None default = unset / command-dependent
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {"seed": (int, 0), "threads": (int, 0), "out": (str, "runs/out"),
            "checkpoint": (str, None)},
    "model": {"preset": (str, "desk"), "spec_file": (str, None), "num_classes": (int, None),
              "init_seed": (int, None)},
    "data": {"source": (str, "synthetic"), "num_classes": (int, 8), "train_size": (int, 1024),
             "test_size": (int, 512), "noise": (float, 0.8), "seed": (int, 0),
             "train_images": (str, None), "train_labels": (str, None),
             "test_images": (str, None), "test_labels": (str, None), "augment": (bool, False)},
    "loss": {"mode": (str, None), "alpha": (float, 1e5), "tau": (float, 20.0),
             "teacher": (str, "labels"), "teacher_checkpoint": (str, None),
             "full_teacher_checkpoint": (str, None)},
    "optim": {"epochs": (int, 10), "batch_size": (int, 64), "lr_base": (float, None),
              "lr": (float, None), "warmup_epochs": (int, None), "weight_decay": (float, 0.05),
              "schedule": (str, "cosine")},
    "prune": {"interval": (int, 100), "groups_per_removal": (int, 1), "target_speedup": (float, 2.0),
              "component_filter": (str, "ALL"), "alignment": (str, "head_aligned"),
              "max_steps": (int, 100000), "selector": (str, "taylor"), "decay": (float, 0.9),
              "eta": (float, None), "eta_fraction": (float, 0.1), "h_div": (float, 6.0),
              "emb_div": (float, None), "min_emb": (int, 16), "allow_empty_h": (bool, True),
              "allow_empty_mlp": (bool, True), "preset": (str, None),
              "group_size_emb": (int, 16), "group_size_h": (int, 2), "group_size_qk": (int, 8),
              "group_size_v": (int, 8), "group_size_mlp": (int, 16)},
    "lut": {"source": (str, "analytic"), "path": (str, None), "grid": (str, "desk"),
            "batch_size": (int, 1), "repeats": (int, 100)},
    "sparsify": {"finetune_epochs": (int, 0)},
    "generate": {"emb": (int, 192), "num_blocks": (int, 12), "image_size": (int, 224),
                 "patch_size": (int, 16), "num_classes": (int, 1000)},
    "analyze": {"events": (str, None), "diversity_batch": (int, 32)},
}

COMMANDS = ("train", "prune", "finetune", "generate", "profile", "sparsify", "analyze", "eval")

# (section, key) -> value per command when the file leaves it empty
COMMAND_DEFAULTS = {
    "train": {("loss", "mode"): "cnn_only", ("optim", "lr_base"): 0.0005, ("optim", "warmup_epochs"): 5},
    "prune": {("loss", "mode"): "proposed", ("optim", "lr_base"): 0.0002, ("optim", "warmup_epochs"): 0},
    "finetune": {("loss", "mode"): "proposed", ("optim", "lr_base"): 0.0002, ("optim", "warmup_epochs"): 0},
    "sparsify": {("loss", "mode"): "proposed", ("optim", "lr_base"): 0.0002, ("optim", "warmup_epochs"): 0},
}

CHOICES = {
    ("data", "source"): ("synthetic", "idx"),
    ("loss", "mode"): ("proposed", "cnn_only", "full_plus_ce", "ce_only"),
    ("loss", "teacher"): ("labels", "checkpoint"),
    ("optim", "schedule"): ("cosine", "constant"),
    ("prune", "component_filter"): ("ALL", "EMB", "H", "QK", "V", "MLP"),
    ("prune", "alignment"): ("head_aligned", "concatenated"),
    ("prune", "selector"): ("taylor", "random"),
    ("lut", "source"): ("analytic", "wallclock", "file"),
    ("lut", "grid"): ("desk", "paper"),
}


def _convert(field: str, typ: type, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if typ is bool:
            return _BOOL[raw.lower()]
        return typ(raw)
    except (KeyError, ValueError):
        raise ConfigError(field, f"cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class RunConfig:
    command: str
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def require(self, section: str, key: str):
        v = self.values[section][key]
        if v is None:
            raise ConfigError(f"{section}.{key}", f"required by '{self.command}'")
        return v

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec, kv in self.values.items():
            cp[sec] = {k: ("" if v is None else str(v)) for k, v in kv.items()}
        buf = io.StringIO()
        buf.write(f"# effective configuration for '{self.command}'\n")
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def parse(text: str, command: str, overrides: dict[tuple[str, str], object] | None = None) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("file", str(e).splitlines()[0]) from None
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(sec, "unknown section")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            v = _convert(f"{sec}.{key}", SCHEMA[sec][key][0], raw)
            if v is not None:
                values[sec][key] = v
    for (sec, key), v in (overrides or {}).items():
        if v is not None:
            values[sec][key] = v
    for (sec, key), v in COMMAND_DEFAULTS.get(command, {}).items():
        if values[sec][key] is None:
            values[sec][key] = v
    for (sec, key), allowed in CHOICES.items():
        v = values[sec][key]
        if v is not None and v not in allowed:
            raise ConfigError(f"{sec}.{key}", f"{v!r} not in {allowed}")
    _check_ranges(values)
    return RunConfig(command, values)


def _check_ranges(v) -> None:
    positive = [("optim", "batch_size"), ("prune", "interval"), ("prune", "groups_per_removal"),
                ("data", "num_classes"), ("lut", "batch_size"), ("lut", "repeats"),
                ("generate", "emb"), ("generate", "num_blocks")]
    for sec, key in positive:
        if v[sec][key] is not None and v[sec][key] < 1:
            raise ConfigError(f"{sec}.{key}", "must be >= 1")
    for sec, key in [("optim", "epochs"), ("data", "train_size"), ("data", "test_size"),
                     ("sparsify", "finetune_epochs"), ("run", "threads")]:
        if v[sec][key] is not None and v[sec][key] < 0:
            raise ConfigError(f"{sec}.{key}", "must be >= 0")
    if v["prune"]["target_speedup"] < 1.0:
        raise ConfigError("prune.target_speedup", "must be >= 1")
    if not 0.0 <= v["prune"]["decay"] < 1.0:
        raise ConfigError("prune.decay", "must lie in [0, 1)")


def load(path, command: str, overrides=None) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("--config", str(e)) from None
    return parse(text, command, overrides)
