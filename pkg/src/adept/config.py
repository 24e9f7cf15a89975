"""Experiment configuration: TOML or JSON files, defaults per task, strict validation.

Layout::

    task = "pca"                  # pca | ae | dgm-train | dgm-gaussian
    methods = ["adept", "global", "local"]
    seeds = [0, 1, 2]
    out = "runs/pca"

    [data]                        # generator fields of the task
    sigma_star = 0.1

    [hyper]                       # optimisation and prior fields
    T = 1000

    [sweep]                       # optional grid over one data field
    param = "sigma_star"
    values = [0.01, 0.1, 1.0]

Unknown keys are rejected. Errors carry the dotted key path and, when the
source is a file, the line of the offending key.
"""

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

TASKS = ("pca", "ae", "dgm-train", "dgm-gaussian")
METHODS = ("adept", "local", "global", "fedavg_finetune")

_COMMON_HYPER = {
    "eta1": 0.01, "eta2": 0.01, "eta3": 0.001, "momentum": 0.9, "tau": 20, "T": 150,
    "xi": 1e-6, "sigma0": 0.4, "omega": 0.5, "clip_model": 1.0, "clip_sigma": 10.0,
    "per_weight_sigma": True, "sigma_first": True, "global_in_local": True,
    "freeze_rounds": 2, "lazy_start_round": None, "lr_decay_round": None, "lr_decay": 0.1,
    "finetune_rounds": 20, "monitor_theory": False,
}

_TASK_HYPER = {
    "pca": {"eta1": 6e-6, "eta2": 2e-5, "eta3": 5e-9, "T": 1000, "tau": 1, "xi": 0.05,
            "sigma0": 0.05, "freeze_rounds": 0, "init": "spectral"},
    "ae": {"latent_dim": 5},
    "dgm-train": {"T": 2000, "sigma0": 0.8, "lr_decay_round": 75, "gamma": 10, "hidden": 32},
    "dgm-gaussian": {},
}

_TASK_DATA = {
    "pca": {"d": 100, "r": 20, "m": 10, "n": 20, "sigma_star": 0.1, "sigma_eps": 0.05,
            "n_eval": 500},
    "ae": {"latent_dim": 5, "out_dim": 64, "sigma_mu": 0.1, "sigma_star": 0.01, "snr_db": None,
           "m": 50, "n": 10, "noise_std": 0.01, "n_eval": 100},
    "dgm-train": {"mu_star": [1.0, -1.0], "sigma_star_sq": 0.0025, "sigma0_sq": 0.09, "n": 4,
                  "m": 20, "n_eval": 200},
    "dgm-gaussian": {"sigma0_sq": 1.0, "n": 10, "d": 2, "m_sim": 10_000,
                     "grid": [0.0, 0.1, 0.5, 1.0, 5.0]},
}

_DEFAULT_METHODS = {"pca": ["adept", "global", "local"], "ae": ["adept", "global", "local"],
                    "dgm-train": ["adept", "local"], "dgm-gaussian": ["adept"]}

_TOP_KEYS = {"task", "methods", "seeds", "out", "data", "hyper", "sweep"}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key, ``line`` 1-based or None."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None,
                 source: Optional[str] = None):
        self.path, self.line, self.source = path, line, source
        where = source or "<config>"
        if line is not None:
            where += f":{line}"
        key = f" [{path}]" if path else ""
        super().__init__(f"{where}{key}: {message}")


def default_hyper(task: str) -> Dict[str, Any]:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}", "task")
    return {**_COMMON_HYPER, **_TASK_HYPER[task]}


def default_data(task: str) -> Dict[str, Any]:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}", "task")
    return json.loads(json.dumps(_TASK_DATA[task]))


@dataclass
class ExperimentConfig:
    task: str
    methods: List[str]
    seeds: List[int]
    out: str
    data: Dict[str, Any]
    hyper: Dict[str, Any]
    sweep: Optional[Dict[str, Any]] = None
    source: Optional[str] = field(default=None, compare=False)

    def resolved(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("source")
        return d

    def config_hash(self) -> str:
        """SHA-256 of the resolved settings that influence results (output path excluded)."""
        d = self.resolved()
        d.pop("out")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"), default=_json_default)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def points(self) -> List[Tuple[Optional[float], Dict[str, Any]]]:
        """``(sweep value, data dict)`` per grid point; a single point without a sweep."""
        if not self.sweep:
            return [(None, dict(self.data))]
        return [(v, {**self.data, self.sweep["param"]: v}) for v in self.sweep["values"]]


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    raise TypeError(f"not serialisable: {o!r}")


# --- locating keys in the source text ----------------------------------------

_SECTION = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\"]+)\s*\]\s*(#.*)?$")


def _find_line(text: Optional[str], path: str) -> Optional[int]:
    if not text:
        return None
    parts = path.split(".")
    section, key = (".".join(parts[:-1]), parts[-1]) if len(parts) > 1 else ("", parts[0])
    current = ""
    pat = re.compile(r'^\s*"?' + re.escape(key) + r'"?\s*[=:]')
    for i, line in enumerate(text.splitlines(), 1):
        m = _SECTION.match(line)
        if m:
            current = m.group(1).strip('"')
            continue
        if current == section and pat.match(line):
            return i
    for i, line in enumerate(text.splitlines(), 1):
        if re.search(r'"?' + re.escape(key) + r'"?\s*[=:]', line):
            return i
    return None


# --- validation --------------------------------------------------------------

def _err(msg, path, text, source):
    return ConfigError(msg, path, _find_line(text, path), source)


def _check_type(value, expected, path, text, source):
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is str:
        ok = isinstance(value, str)
    elif expected is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise _err(f"expected {expected.__name__}, got {type(value).__name__} {value!r}",
                   path, text, source)
    return float(value) if expected is float else value


def _merge_section(defaults, given, name, text, source):
    if not isinstance(given, dict):
        raise _err("expected a table", name, text, source)
    out = dict(defaults)
    for key, value in given.items():
        path = f"{name}.{key}"
        if key not in defaults:
            raise _err(f"unknown key {key!r}", path, text, source)
        default = defaults[key]
        if default is None:
            if value is not None and (not isinstance(value, (int, float)) or isinstance(value, bool)):
                raise _err(f"expected a number, got {value!r}", path, text, source)
            out[key] = value
        else:
            kind = type(default) if not isinstance(default, float) else float
            out[key] = _check_type(value, kind, path, text, source)
    return out


def _validate_hyper(h, task, text, source):
    def bad(key, msg):
        return _err(msg, f"hyper.{key}", text, source)
    for key in ("eta1", "eta2", "eta3", "xi", "lr_decay", "momentum"):
        if not h[key] >= 0:
            raise bad(key, "must be >= 0")
    if not h["sigma0"] > 0:
        raise bad("sigma0", "must be > 0")
    if not 0 < h["omega"] < 1:
        raise bad("omega", f"must lie in (0, 1), got {h['omega']}")
    for key in ("T", "finetune_rounds", "freeze_rounds"):
        if h[key] < 0:
            raise bad(key, "must be >= 0")
    if h["tau"] < 1:
        raise bad("tau", "must be >= 1")
    for key in ("clip_model", "clip_sigma"):
        if not h[key] > 0:
            raise bad(key, "must be > 0")
    if h["lazy_start_round"] is not None and h["lazy_start_round"] < h["freeze_rounds"]:
        raise bad("lazy_start_round", "must be >= freeze_rounds")
    if task == "pca" and h["init"] not in ("spectral", "common", "independent"):
        raise bad("init", "must be one of spectral, common, independent")
    for key in ("latent_dim", "gamma", "hidden"):
        if key in h and h[key] < 1:
            raise bad(key, "must be >= 1")


def _validate_data(d, task, text, source):
    def bad(key, msg):
        return _err(msg, f"data.{key}", text, source)
    for key in ("m", "n", "d", "r", "out_dim", "latent_dim", "m_sim"):
        if key in d and d[key] < 1:
            raise bad(key, "must be >= 1")
    for key in ("sigma_star", "sigma_eps", "sigma_mu", "noise_std", "sigma_star_sq"):
        if key in d and d[key] < 0:
            raise bad(key, "must be >= 0")
    if "sigma0_sq" in d and not d["sigma0_sq"] > 0:
        raise bad("sigma0_sq", "must be > 0")
    if task == "pca" and not d["d"] >= d["r"]:
        raise bad("r", "must not exceed d")
    if task == "dgm-gaussian" and any(not isinstance(g, (int, float)) or g < 0 for g in d["grid"]):
        raise bad("grid", "entries must be non-negative numbers")
    if task == "dgm-train" and (not d["mu_star"] or
                                any(not isinstance(v, (int, float)) for v in d["mu_star"])):
        raise bad("mu_star", "must be a non-empty list of numbers")


def build_config(raw: Dict[str, Any], task: Optional[str] = None, text: Optional[str] = None,
                 source: Optional[str] = None) -> ExperimentConfig:
    """Apply defaults and validate a parsed mapping. ``task`` fills in a missing ``task`` key."""
    for key in raw:
        if key not in _TOP_KEYS:
            raise _err(f"unknown key {key!r}", key, text, source)
    task_name = raw.get("task", task)
    if task_name is None:
        raise ConfigError("missing 'task'", "task", None, source)
    if task_name not in TASKS:
        raise _err(f"unknown task {task_name!r}; expected one of {TASKS}", "task", text, source)
    if task is not None and task_name != task:
        raise _err(f"config is for task {task_name!r}, not {task!r}", "task", text, source)
    methods = raw.get("methods", _DEFAULT_METHODS[task_name])
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise _err(f"methods must be a non-empty subset of {METHODS}", "methods", text, source)
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or any(
            not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
        raise _err("seeds must be a non-empty list of non-negative integers", "seeds", text, source)
    out = raw.get("out", "results")
    if not isinstance(out, str):
        raise _err("out must be a string", "out", text, source)
    hyper = _merge_section(default_hyper(task_name), raw.get("hyper", {}), "hyper", text, source)
    data = _merge_section(default_data(task_name), raw.get("data", {}), "data", text, source)
    _validate_hyper(hyper, task_name, text, source)
    _validate_data(data, task_name, text, source)
    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) != {"param", "values"}:
            raise _err("sweep needs exactly 'param' and 'values'", "sweep", text, source)
        if sweep["param"] not in data:
            raise _err(f"cannot sweep unknown data field {sweep['param']!r}", "sweep.param",
                       text, source)
        vals = sweep["values"]
        if not isinstance(vals, list) or not vals or any(
                not isinstance(v, (int, float)) or isinstance(v, bool) for v in vals):
            raise _err("values must be a non-empty list of numbers", "sweep.values", text, source)
        for v in vals:
            _validate_data({**data, sweep["param"]: v}, task_name, text, source)
        sweep = {"param": sweep["param"], "values": [float(v) for v in vals]}
    return ExperimentConfig(task_name, list(methods), list(seeds), out, data, hyper, sweep, source)


def parse_text(text: str, fmt: str = "toml", source: Optional[str] = None) -> Dict[str, Any]:
    if fmt == "json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, "", exc.lineno, source) from exc
    else:
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(str(exc), "", int(m.group(1)) if m else None, source) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a table", "", 1, source)
    return raw


def load_config(path, task: Optional[str] = None) -> ExperimentConfig:
    """Read, default and validate a ``.toml`` or ``.json`` experiment file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file not found", "", None, str(path))
    text = path.read_text(encoding="utf-8")
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    raw = parse_text(text, fmt, str(path))
    return build_config(raw, task, text, str(path))
