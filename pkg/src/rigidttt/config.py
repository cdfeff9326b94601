"""Declarative run configuration for the command-line pipeline.

A configuration is a JSON object with the sections ``data``, ``mask``,
``trajectory``, ``motion``, ``reconstructor``, ``ttt``, ``solver``,
``output``, ``theory`` and ``sweep``. Every field has a default; unknown
sections or keys are rejected, as are values of the wrong type.
``RunConfig.to_dict`` returns the effective (fully defaulted) document and
``RunConfig.from_dict(cfg.to_dict()) == cfg``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from . import kspace, simharness, solvers, ttt


class ConfigError(ValueError):
    """Invalid configuration document."""


def _ttt_defaults() -> dict:
    doc = ttt.TTTConfig.for_field_of_view(64).to_dict()
    del doc["seed"], doc["intra"]  # taken from data.seed and motion.intra
    return doc


def _dataclass_defaults(cls) -> dict:
    from dataclasses import asdict

    return asdict(cls())


DEFAULTS = {
    "data": {"shape": [64, 64], "d": 16, "bandwidth": 24.0, "coils": 4, "seed": 0},
    "mask": {"kind": "uniform-random", "acceleration": 4.0},
    "trajectory": {"shots": 8, "order": "interleaved"},
    "motion": {"n_events": 1, "m_max": 2.0, "intra": False},
    "reconstructor": {"kind": "projector", "tau": 0.01, "levels": 3},
    "ttt": _ttt_defaults(),
    "solver": {
        "final": "l1",
        "threshold": False,
        "l1": _dataclass_defaults(solvers.L1Config),
        "altopt": _dataclass_defaults(solvers.AltOptConfig),
        "dc_layer": {"lam": 0.1, "steps": 50, "rel_step": 0.01},
    },
    "output": {"write_images": True},
    "theory": {
        "landscape": {"n": 2800, "k": 1400, "d": 100, "b": 4, "draws": 20, "half_width": 40},
        "verify": {"n": 256, "k": 128, "d": 16, "b": 4, "draws": 50, "n_random": 20},
    },
    "sweep": {
        "kind": "methods",
        "levels": [[0, 0], [1, 2]],
        "methods": list(simharness.METHODS),
        "seeds": 2,
        "n_splits": [5, 10, 20],
    },
}

_CHOICES = {
    ("mask", "kind"): kspace.MASK_KINDS,
    ("trajectory", "order"): kspace.ORDER_KINDS,
    ("reconstructor", "kind"): ("projector", "wavelet", "identity"),
    ("solver", "final"): ("l1", "dclayer"),
    ("sweep", "kind"): ("methods", "nsplits"),
}


def _check_type(path, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{'.'.join(path)}: expected {type(default).__name__}, got {type(value).__name__}")


def _merge(path, default, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object")
    unknown = sorted(set(doc) - set(default))
    if unknown:
        where = ".".join(path) or "config"
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = {}
    for key, dv in default.items():
        p = path + (key,)
        if key not in doc:
            out[key] = copy.deepcopy(dv)
        elif isinstance(dv, dict):
            out[key] = _merge(p, dv, doc[key])
        else:
            v = doc[key]
            _check_type(p, dv, v)
            if isinstance(dv, float) and v is not None:
                v = float(v)
            out[key] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        merged = _merge((), DEFAULTS, doc)
        for (sec, key), choices in _CHOICES.items():
            if merged[sec][key] not in choices:
                raise ConfigError(f"{sec}.{key}: {merged[sec][key]!r} is not one of {list(choices)}")
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    def __getitem__(self, section):
        return self.doc[section]

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["data"]["seed"] = int(seed)
        return RunConfig.from_dict(doc)

    # -------------------------------------------------------------- typed views

    def validate(self) -> None:
        try:
            self.experiment_spec()
            self.severity()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        shape = self.doc["data"]["shape"]
        if len(shape) not in (2, 3) or not all(isinstance(s, int) and s > 0 for s in shape):
            raise ConfigError("data.shape must list 2 or 3 positive integers")
        for lvl in self.doc["sweep"]["levels"]:
            if not (isinstance(lvl, list) and len(lvl) == 2):
                raise ConfigError("sweep.levels entries must be [n_events, m_max] pairs")

    def ttt_config(self) -> ttt.TTTConfig:
        doc = dict(self.doc["ttt"])
        doc["seed"] = self.doc["data"]["seed"]
        doc["intra"] = self.doc["motion"]["intra"]
        return ttt.TTTConfig.from_dict(doc)

    def l1_config(self) -> solvers.L1Config:
        return solvers.L1Config(**self.doc["solver"]["l1"])

    def altopt_config(self) -> solvers.AltOptConfig:
        return solvers.AltOptConfig(**self.doc["solver"]["altopt"])

    def severity(self) -> simharness.SeverityLevel:
        m = self.doc["motion"]
        return simharness.SeverityLevel(m["n_events"], m["m_max"])

    def experiment_spec(self) -> simharness.ExperimentSpec:
        d, mk, tr, mo = (self.doc[k] for k in ("data", "mask", "trajectory", "motion"))
        return simharness.ExperimentSpec(
            shape=tuple(d["shape"]), d=d["d"], bandwidth=d["bandwidth"], coils=d["coils"],
            shots=tr["shots"], acceleration=mk["acceleration"], mask_kind=mk["kind"], order=tr["order"],
            intra=mo["intra"], recon=self.doc["solver"]["final"], ttt=ttt.TTTConfig.from_dict(self.doc["ttt"]),
            l1=self.l1_config(), altopt=self.altopt_config(),
        )


def default_config() -> RunConfig:
    return RunConfig.from_dict({})


def _schema_node(path, default):
    if isinstance(default, dict):
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _schema_node(path + (k,), v) for k, v in default.items()},
        }
    if isinstance(default, bool):
        node = {"type": "boolean"}
    elif isinstance(default, int):
        node = {"type": "integer"}
    elif isinstance(default, float):
        node = {"type": "number"}
    elif isinstance(default, str):
        node = {"type": "string"}
    elif isinstance(default, list):
        node = {"type": "array"}
    else:
        node = {"type": ["number", "null"]}
    if path in _CHOICES:
        node["enum"] = list(_CHOICES[path])
    node["default"] = copy.deepcopy(default)
    return node


def json_schema() -> dict:
    """JSON Schema (draft 2020-12) of the configuration document."""
    doc = _schema_node((), DEFAULTS)
    doc["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    doc["title"] = "rigidttt run configuration"
    return doc
