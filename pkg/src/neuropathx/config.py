"""Flat ``key = value`` run configuration shared by every subcommand.

Keys are the fields of :class:`ModelConfig`, :class:`TrainConfig` and
:class:`SynthSpec` plus input/output paths and interpretation options.
``seed``, ``d``, ``n_pathways`` and ``n_rois`` appear in more than one of
those classes: ``seed`` drives both training and synthesis, while the three
shape keys only describe synthetic cohorts (the model takes its shapes from
the data it is trained on).

Precedence, highest first: command-line flag, ``NPX_SEED`` (seed only),
config file, built-in default.
"""

import os
from dataclasses import MISSING, fields

from .errors import ConfigError
from .model import ModelConfig
from .synthgen import SynthSpec
from .trainer import TrainConfig

PATH_KEYS = (
    "genotypes", "gwas", "genes", "gmt", "exclude", "imaging", "labels",
    "pathway_matrix", "attn_dir", "truth", "out",
)
# key -> (type, default); str-typed keys default to "" meaning unset
EXTRA_KEYS = {
    "window_kb": (float, 50.0),
    "jobs": (int, 1),
    "k_path": (int, 7),
    "k_roi": (int, 4),
    "svg": (bool, False),
}
_DATA_SHAPED = {"n_pathways", "n_rois", "d"}


def _schema():
    schema = {}
    for cls in (ModelConfig, TrainConfig, SynthSpec):
        for f in fields(cls):
            if f.name in schema:
                continue
            default = None if f.default is MISSING else f.default
            kind = f.type if isinstance(f.type, type) else type(default)
            if f.name == "delta":
                kind = float
            schema[f.name] = (kind, default)
    for key in PATH_KEYS:
        schema[key] = (str, "")
    schema.update(EXTRA_KEYS)
    # a synthetic cohort is the only consumer of these three
    for key in _DATA_SHAPED:
        schema[key] = (int, getattr(SynthSpec, key))
    return schema


SCHEMA = _schema()


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    kind, _ = SCHEMA[key]
    text = text.strip()
    if key == "delta" and text.lower() in ("", "none", "auto"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {text!r} as {kind.__name__}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys fail."""
    values = {}
    try:
        with open(path, encoding="utf-8-sig") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for line_no, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in text.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{line_no}: duplicate key '{key}'")
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{line_no}: {exc}") from None
    return values


class RunConfig:
    """Resolved configuration: every schema key has a value."""

    def __init__(self, values):
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        self.values.update(values)

    @classmethod
    def resolve(cls, path=None, overrides=None, env=None):
        env = os.environ if env is None else env
        values = read_config_file(path) if path else {}
        if env.get("NPX_SEED", "").strip():
            values["seed"] = parse_value("seed", env["NPX_SEED"])
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def get_path(self, key, required=True):
        value = self.values[key]
        if not value and required:
            raise ConfigError(f"missing required setting '{key}'")
        return value or None

    def _build(self, cls, **fixed):
        kwargs = {f.name: self.values[f.name] for f in fields(cls) if f.name in self.values}
        kwargs.update(fixed)
        return cls(**kwargs)

    def model_config(self, n_pathways=1, n_rois=1, d=1):
        return self._build(ModelConfig, n_pathways=n_pathways, n_rois=n_rois, d=d)

    def train_config(self):
        return self._build(TrainConfig)

    def synth_spec(self):
        spec = self._build(SynthSpec)
        spec.validate()
        return spec

    def dumps(self):
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, name="resolved_config.conf"):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())
        return path
