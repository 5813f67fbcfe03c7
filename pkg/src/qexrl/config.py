"""Run configuration: one INI file, environment overrides, then CLI flags.

Sections and keys::

    [paths]   workdir, catalog, train, heldout, index, sft_checkpoint, checkpoint
    [data]    seed, workload_seed, n_items, n_categories, attrs_per_category,
              vocab_size, n_queries, n_train, n_constraints
    [model]   d_model, n_layers, n_heads, d_ff, context_length, init_seed
    [train]   every TrainConfig field
    [eval]    runs, temperature, k_eval, seed, lexical_expansions, formats

Path values may use ``${workdir}`` (extended interpolation).  An environment
variable ``QEXRL_<SECTION>_<KEY>`` (upper case) overrides the file value.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .trainer import KLReference, TrainConfig

ENV_PREFIX = "QEXRL_"


@dataclass
class PathsConfig:
    workdir: str = "run"
    catalog: str = "${workdir}/catalog.jsonl"
    train: str = "${workdir}/train.jsonl"
    heldout: str = "${workdir}/heldout.jsonl"
    index: str = "${workdir}/index.jsonl"
    sft_checkpoint: str = "${workdir}/policy-sft.ckpt"
    checkpoint: str = "${workdir}/policy.ckpt"


@dataclass
class DataConfig:
    seed: int = 7
    workload_seed: int = 1
    n_items: int = 500
    n_categories: int = 10
    attrs_per_category: int = 4
    vocab_size: int = 200
    n_queries: int = 300
    n_train: int = 200
    n_constraints: int = 2


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    context_length: int = 256
    init_seed: int = 0


@dataclass
class EvalConfig:
    runs: int = 5
    temperature: float = 0.5
    k_eval: int = 100
    seed: int = 0
    lexical_expansions: int = 3
    formats: str = "table-text,json,csv"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("paths", "data", "model", "train", "eval")

    def path(self, key) -> Path:
        return Path(getattr(self.paths, key))

    def to_dict(self) -> dict:
        out = {}
        for s in self.SECTIONS:
            part = getattr(self, s)
            out[s] = part.to_dict() if hasattr(part, "to_dict") else dataclasses.asdict(part)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self):
        d, e = self.data, self.eval
        if not 0 < d.n_train < d.n_queries:
            raise ConfigError(f"data.n_train must be in (0, n_queries), got {d.n_train}")
        if e.runs < 1:
            raise ConfigError("eval.runs must be >= 1")
        if e.temperature <= 0:
            raise ConfigError("eval.temperature must be > 0")
        if e.k_eval < 1:
            raise ConfigError("eval.k_eval must be >= 1")
        bad = set(self.formats()) - {"table-text", "json", "csv"}
        if bad:
            raise ConfigError(f"eval.formats: unknown format(s) {sorted(bad)}")
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        self.train.validate()

    def formats(self) -> list[str]:
        return [f.strip() for f in self.eval.formats.split(",") if f.strip()]


def _coerce(section, key, raw, proto):
    kind = type(proto)
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, KLReference):
            return KLReference(str(raw).strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _section_values(cfg, section):
    part = getattr(cfg, section)
    return {f.name: getattr(part, f.name) for f in dataclasses.fields(part)}


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Build a RunConfig from defaults, ``path``, the environment, then ``overrides``.

    ``overrides`` maps ``"section.key"`` to a value (already typed or a string).
    """
    environ = os.environ if environ is None else environ
    base = RunConfig()
    values = {s: {k: v for k, v in _section_values(base, s).items()} for s in RunConfig.SECTIONS}
    raw = {s: {} for s in RunConfig.SECTIONS}

    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc.message.splitlines()[0]}") from None
        for s in parser.sections():
            if s not in values:
                raise ConfigError(f"{path}: unknown section [{s}]")
            for k, v in parser.items(s):
                if k not in values[s]:
                    raise ConfigError(f"{path}: unknown key {s}.{k}")
                raw[s][k] = v

    for name, v in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        s, _, k = rest.partition("_")
        if s in values and k in values[s]:
            raw[s][k] = v

    for dotted, v in (overrides or {}).items():
        s, _, k = dotted.partition(".")
        if s not in values or k not in values[s]:
            raise ConfigError(f"unknown setting {dotted}")
        raw[s][k] = v

    for s, kv in raw.items():
        for k, v in kv.items():
            proto = values[s][k]
            values[s][k] = v if type(v) is type(proto) else _coerce(s, k, v, proto)

    # ${workdir} expansion for path values
    wd = values["paths"]["workdir"]
    for k, v in values["paths"].items():
        if k != "workdir":
            values["paths"][k] = v.replace("${workdir}", wd)

    try:
        cfg = RunConfig(
            paths=PathsConfig(**values["paths"]),
            data=DataConfig(**values["data"]),
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            eval=EvalConfig(**values["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    lines = []
    for s, d in cfg.to_dict().items():
        lines.append(f"[{s}]")
        for k, v in d.items():
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
