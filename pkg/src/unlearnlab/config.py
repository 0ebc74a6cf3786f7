"""Experiment configuration: schema, defaults, validation and stage hashes.

A config is one JSON document.  Missing fields take the defaults below;
unknown fields are rejected.  Every validation failure raises
:class:`ConfigError` whose ``pointer`` is the JSON pointer of the offending
field.  Artifacts are named after a hash of exactly the config blocks they
depend on, so runs that share a corpus or an original model reuse it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

import jsonschema

from .engine import TrainConfig
from .errors import ConfigError
from .objectives import KINDS, ObjectiveConfig

IDENTIFIERS = ("oracle", "discriminative", "stopword", "external", "none")

_TRAIN_DEFAULTS = {"lr": 3e-3, "weight_decay": 0.01, "batch_size": 32, "epochs": 30, "warmup": True, "checkpoint_every": 1}

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "corpus": {"n_authors": 200, "forget_fraction": 0.05, "n_general": 60, "n_perturbed": 3, "entity_reuse": 2.0},
    "model": {"d_model": 64, "n_layers": 2, "n_heads": 4, "max_len": 64, "d_ff": 256},
    "train": {
        "original": dict(_TRAIN_DEFAULTS),
        "retained": dict(_TRAIN_DEFAULTS),
        "encoder": dict(_TRAIN_DEFAULTS),
        "unlearn": {**_TRAIN_DEFAULTS, "lr": 1e-3, "batch_size": 8, "epochs": 10},
        "reinforce": {"target_nll": 0.05, "max_epochs": 25},
    },
    "objective": {
        "kind": "TPO", "beta": None, "lambda": 1.0, "gdr_weight": 0.0,
        "targeted": False, "add_pl": False, "safe_answer": "I don't know",
    },
    "identifier": {
        "kind": "oracle", "stoplist": None, "annotations": None, "top_k": 1,
        "encoder_seed": 0, "encoder_corpus": "retain+general",
    },
    "eval": {"k_percent": 20.0, "aggregation": "harmonic", "n_probe": 60},
}

_bool = {"type": "boolean"}


def _obj(props, **extra):
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


_train_schema = _obj({
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 0},
    "warmup": _bool,
    "checkpoint_every": {"type": "integer", "minimum": 1},
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "eps": {"type": "number", "exclusiveMinimum": 0},
})

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string", "minLength": 1},
    "corpus": _obj({
        "n_authors": {"type": "integer", "minimum": 20},
        "forget_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "n_general": {"type": "integer", "minimum": 2},
        "n_perturbed": {"type": "integer", "minimum": 2},
        "entity_reuse": {"type": "number", "minimum": 1},
    }),
    "model": _obj({
        "d_model": {"type": "integer", "minimum": 1},
        "n_layers": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "max_len": {"type": "integer", "minimum": 8},
        "d_ff": {"type": "integer", "minimum": 1},
    }),
    "train": _obj({
        "original": _train_schema,
        "retained": _train_schema,
        "encoder": _train_schema,
        "unlearn": _train_schema,
        "reinforce": _obj({
            "target_nll": {"type": "number", "exclusiveMinimum": 0},
            "max_epochs": {"type": "integer", "minimum": 1},
        }),
    }),
    "objective": _obj({
        "kind": {"type": "string", "enum": list(KINDS)},
        "beta": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "lambda": {"type": "number", "minimum": 0},
        "gdr_weight": {"type": "number", "minimum": 0},
        "targeted": _bool,
        "add_pl": _bool,
        "safe_answer": {"type": "string", "minLength": 1},
    }),
    "identifier": _obj({
        "kind": {"type": "string", "enum": list(IDENTIFIERS)},
        "stoplist": {"type": ["string", "null"]},
        "annotations": {"type": ["string", "null"]},
        "top_k": {"type": "integer", "minimum": 1},
        "encoder_seed": {"type": "integer", "minimum": 0},
        "encoder_corpus": {"type": "string", "enum": ["retain+general", "all"]},
    }),
    "eval": _obj({
        "k_percent": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
        "aggregation": {"type": "string", "enum": ["harmonic", "arithmetic"]},
        "n_probe": {"type": "integer", "minimum": 2},
    }),
})


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pointer(path):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else "/"


class ExperimentConfig:
    """Validated, defaults-filled experiment configuration."""

    def __init__(self, raw=None, base_dir="."):
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object", "/")
        # the schema check runs on the user document so that pointers match it
        validator = jsonschema.Draft7Validator(SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
        if errors:
            e = errors[0]
            path = list(e.absolute_path)
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                path = path + extra[:1]
                raise ConfigError(f"unknown field {extra[0]!r}", _pointer(path))
            raise ConfigError(e.message, _pointer(path))
        self.data = _merge(DEFAULTS, raw)
        self.base_dir = base_dir
        self._check_semantics()

    # -- construction helpers
    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found", "/") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", "/") from None
        if overrides:
            raw = _merge(raw, overrides)
        return cls(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    def replace(self, **blocks):
        """A new config with some blocks merged in (``objective={...}`` etc.)."""
        raw = _merge(self.data, blocks)
        return ExperimentConfig(raw, self.base_dir)

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    # -- validation beyond the schema
    def _check_semantics(self):
        d = self.data
        c = d["corpus"]
        n_forget = int(round(c["n_authors"] * c["forget_fraction"]))
        if n_forget < 1:
            raise ConfigError("forget_fraction leaves no forget author", "/corpus/forget_fraction")
        if c["n_general"] % 2:
            raise ConfigError("n_general must be even", "/corpus/n_general")
        m = d["model"]
        if m["d_model"] % m["n_heads"]:
            raise ConfigError("d_model must be divisible by n_heads", "/model/n_heads")
        try:
            obj = self.objective()
        except ConfigError as exc:
            raise ConfigError(exc.message, exc.pointer) from None
        ident = d["identifier"]
        if obj.reads_masks and ident["kind"] == "none":
            raise ConfigError(f"objective {obj.label} reads UW masks; choose an identifier", "/identifier/kind")
        if ident["kind"] == "external" and not ident["annotations"]:
            raise ConfigError("external identifier needs an annotations path", "/identifier/annotations")
        for key in ("stoplist", "annotations"):
            if ident[key] is not None and not os.path.exists(self.resolve(ident[key])):
                raise ConfigError(f"file {ident[key]} does not exist", f"/identifier/{key}")
        for role in ("original", "retained", "encoder", "unlearn"):
            try:
                self.train_config(role)
            except ConfigError as exc:
                raise ConfigError(exc.message, f"/train/{role}" + (exc.pointer or "").replace("/train", "")) from None

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    # -- typed views
    @property
    def seed(self):
        return self.data["seed"]

    def train_config(self, role):
        t = dict(self.data["train"][role])
        return TrainConfig(seed=self.seed, **t)

    def objective(self):
        return ObjectiveConfig.from_dict(self.data["objective"])

    # -- hashing
    def stage_blocks(self, stage):
        d = self.data
        corpus = {"seed": d["seed"], "corpus": d["corpus"]}
        if stage == "corpus":
            return corpus
        if stage in ("original", "retained"):
            return {**corpus, "model": d["model"], "train": d["train"][stage], "role": stage}
        if stage == "encoder":
            ident = d["identifier"]
            return {**corpus, "model": d["model"], "train": d["train"]["encoder"],
                    "encoder_seed": ident["encoder_seed"], "encoder_corpus": ident["encoder_corpus"]}
        if stage == "annotations":
            ident = dict(d["identifier"])
            blocks = {**corpus, "identifier": ident}
            for key in ("stoplist", "annotations"):
                if ident[key] is not None:
                    blocks[key + "_sha"] = _file_sha(self.resolve(ident[key]))
            if ident["kind"] == "discriminative":
                blocks["encoder"] = self.stage_blocks("encoder")
            return blocks
        if stage == "reinforce":
            return {"original": self.stage_blocks("original"), "train": d["train"]["unlearn"],
                    "reinforce": d["train"]["reinforce"]}
        if stage == "unlearn":
            blocks = {"original": self.stage_blocks("original"), "train": d["train"]["unlearn"],
                      "objective": self.objective().to_dict()}
            if self.objective().reads_masks:
                blocks["annotations"] = self.stage_blocks("annotations")
            if self.objective().kind == "TaskVector":
                blocks["reinforce"] = self.stage_blocks("reinforce")
            return blocks
        if stage == "eval":
            return {"unlearn": self.stage_blocks("unlearn"), "retained": self.stage_blocks("retained"),
                    "eval": d["eval"]}
        raise KeyError(stage)

    def stage_hash(self, stage):
        return digest(self.stage_blocks(stage))

    @property
    def config_hash(self):
        return digest({k: v for k, v in self.data.items() if k != "out"})


def digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:10]


def _file_sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
