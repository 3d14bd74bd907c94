"""Run configuration files (YAML).

Every section and key is checked against a fixed schema before any work
starts; unknown keys are errors so typos never silently fall back to
defaults.  See ``README.md`` for the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import yaml

from .data import SplitSpec, fit_standardizer, load_csv, split, standardize, synth_tabular
from .io import config_hash
from .model import FP_BITS, QuantMode
from .training import ArchSpec, TrainConfig

SCHEMA = {
    "data": {"synthetic": dict, "csv": dict, "split": dict, "standardize": bool},
    "model": {"hidden_sizes": list, "nonlinearity": str},
    "train": {"lr": float, "epochs": int, "patience": int, "batch_size": int, "seeds": list},
    "quant": {"mode": (str, list), "tau": float, "weight_thresholds": list,
              "weight_candidates": list, "act_thresholds": list, "act_candidates": list,
              "act_init_bits": int},
    "output": {"dir": str},
    "theory": {"ridge_trials": int, "seed": int, "smoothness": float, "tolerances": list,
               "mc_samples": int, "gradcheck_hidden": int, "gradcheck_batch": int},
}
SUBSCHEMA = {
    "data.synthetic": {"kind": str, "n": int, "d": int, "noise": float, "seed": int, "n_classes": int},
    "data.csv": {"path": str, "target": (str, int), "task": str, "header": bool, "delimiter": str},
    "data.split": {"train": float, "val": float, "test": float, "seed": int},
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


def _check_keys(section: dict, schema: dict, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    for key, value in section.items():
        if key not in schema:
            raise ConfigError(f"{where}.{key}: unknown key (allowed: {', '.join(sorted(schema))})")
        want = schema[key]
        want = want if isinstance(want, tuple) else (want,)
        if float in want and isinstance(value, int) and not isinstance(value, bool):
            continue
        if isinstance(value, bool) and bool not in want:
            raise ConfigError(f"{where}.{key}: expected {'/'.join(w.__name__ for w in want)}, got bool")
        if not isinstance(value, want):
            raise ConfigError(f"{where}.{key}: expected {'/'.join(w.__name__ for w in want)}, "
                              f"got {type(value).__name__}")


@dataclass
class RunConfig:
    raw: dict
    data: dict
    split: SplitSpec
    standardize: bool
    archs: list
    modes: list
    train: TrainConfig
    output_dir: str
    theory: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        # where results go does not change what is computed
        return config_hash({k: v for k, v in self.raw.items() if k != "output"})

    @classmethod
    def from_dict(cls, raw: dict, seed: Optional[int] = None, mode: Optional[str] = None,
                  out: Optional[str] = None) -> "RunConfig":
        raw = {} if raw is None else raw
        _check_keys(raw, {k: dict for k in SCHEMA}, "config")
        for name, schema in SCHEMA.items():
            _check_keys(raw.get(name, {}), schema, name)
        data = raw.get("data", {})
        for name, schema in SUBSCHEMA.items():
            _check_keys(data.get(name.split(".")[1], {}), schema, name)
        # apply command-line overrides on a copy so the hash reflects them
        raw = {k: dict(v) for k, v in raw.items()}
        if seed is not None:
            raw.setdefault("train", {})["seeds"] = [int(seed)]
        if mode is not None:
            raw.setdefault("quant", {})["mode"] = mode
        if out is not None:
            raw.setdefault("output", {})["dir"] = out
        data = raw.get("data", {})
        if ("synthetic" in data) == ("csv" in data):
            raise ConfigError("data: exactly one of data.synthetic or data.csv is required")
        if "csv" in data and "path" not in data["csv"]:
            raise ConfigError("data.csv.path: required")
        if "csv" in data and "target" not in data["csv"]:
            raise ConfigError("data.csv.target: required")
        if "synthetic" in data:
            syn = data["synthetic"]
            if syn.get("kind") not in ("regression_nonlinear", "classification_blobs",
                                       "classification_moons"):
                raise ConfigError(f"data.synthetic.kind: unknown kind {syn.get('kind')!r}")
        if "csv" in data and data["csv"].get("task", "regression") not in ("regression", "classification"):
            raise ConfigError(f"data.csv.task: unknown task {data['csv']['task']!r}")
        try:
            split_spec = SplitSpec(**data.get("split", {}))
        except ValueError as exc:
            raise ConfigError(f"data.split: {exc}") from None

        model = raw.get("model", {})
        if model.get("nonlinearity", "relu") != "relu":
            raise ConfigError("model.nonlinearity: only 'relu' hidden layers are supported")
        hs = model.get("hidden_sizes", [64, 64])
        sweeps = hs if hs and all(isinstance(h, list) for h in hs) else [hs]
        for h in sweeps:
            if not h or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in h):
                raise ConfigError(f"model.hidden_sizes: expected positive integers, got {h!r}")

        q = raw.get("quant", {})
        mode_names = q.get("mode", "nmp_weights_only")
        mode_names = [mode_names] if isinstance(mode_names, str) else mode_names
        ladder_kw = {k: tuple(q[k]) for k in ("weight_thresholds", "weight_candidates",
                                              "act_thresholds", "act_candidates") if k in q}
        if "tau" in q:
            if not q["tau"] > 0:
                raise ConfigError("quant.tau: must be positive")
            ladder_kw["tau"] = float(q["tau"])
        if "act_init_bits" in q:
            ladder_kw["act_init_bits"] = q["act_init_bits"]
        modes = []
        for name in mode_names:
            try:
                modes.append(QuantMode.parse(str(name), **ladder_kw))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"quant.mode: {exc}") from None

        t = raw.get("train", {})
        try:
            train = TrainConfig(**{k: (tuple(v) if k == "seeds" else v) for k, v in t.items()})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"train: {exc}") from None
        theory = raw.get("theory", {})
        for k in ("ridge_trials", "mc_samples", "gradcheck_hidden", "gradcheck_batch"):
            if k in theory and theory[k] < 1:
                raise ConfigError(f"theory.{k}: must be >= 1")
        return cls(raw=raw, data=data, split=split_spec,
                   standardize=data.get("standardize", True),
                   archs=[ArchSpec(tuple(h), m) for m in modes for h in sweeps],
                   modes=modes, train=train,
                   output_dir=raw.get("output", {}).get("dir", "runs"), theory=theory)

    def load_dataset(self):
        if "synthetic" in self.data:
            syn = dict(self.data["synthetic"])
            kind = syn.pop("kind")
            return synth_tabular(kind, n=syn.pop("n", 5000), d=syn.pop("d", 16), **syn)
        c = self.data["csv"]
        return load_csv(c["path"], c["target"], c.get("task", "regression"),
                        c.get("header", True), c.get("delimiter", ","))

    def prepare(self):
        """Load, split and standardize; returns ``(train, val, test, raw_test, stats)``."""
        ds = self.load_dataset()
        tr, val, te = split(ds, self.split)
        stats = None
        raw_test = te
        if self.standardize:
            stats = fit_standardizer(tr)
            tr, val, te = (standardize(p, stats) for p in (tr, val, te))
        return tr, (val if val.n_rows else None), te, raw_test, stats


def load_config(path, **overrides) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return RunConfig.from_dict(raw, **overrides)


def ladder_candidates(mode: QuantMode):
    wl, al = mode.weight_ladder(), mode.act_ladder()
    return ((FP_BITS,) if wl is None else wl.candidates,
            None if al is None else al.candidates)
