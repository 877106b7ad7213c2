"""Experiment configuration and reproducibility manifests.

Config files and manifests share one flat ``key = value`` format.  Values
resolve with precedence command-line flag > file > default.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import seeding
from .errors import ConfigError
from .pml import PmlConfig

SCHEMA_VERSION = 1
# keys that describe where/how fast a run happens, not what it computes
VOLATILE_KEYS = ("out", "threads")


@dataclass
class ExperimentConfig:
    dataset: str = "fashion-mnist"   # "fashion-mnist", "synthetic" or an IDX path
    data_dir: str = ""
    train_size: int = 10000
    val_size: int = 64
    test_size: int = 64
    k: int = 784
    s: int = 200
    m: int = 10
    sensing: str = "network"
    hidden: str = "500,500"
    sensor_hidden: str = ""
    output: str = "linear"
    T: int = 5
    alpha: float = 0.01
    beta: float = 0.01
    beta_decay: float = 1.0
    momentum: float = 0.0
    gamma: float = 1.0
    delta: float = 0.001
    srec_form: str = "hinge"
    batch_size: int = 64
    epochs: int = 10
    tol: float = 1e-3
    t_eval: int = 10
    restarts: int = 3
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"

    def validate(self):
        if self.sensing not in ("linear", "network"):
            raise ConfigError(f"sensing must be 'linear' or 'network', got {self.sensing!r}")
        if self.output not in ("linear", "sigmoid"):
            raise ConfigError(f"output must be 'linear' or 'sigmoid', got {self.output!r}")
        if min(self.k, self.m, self.epochs, self.threads) < 1:
            raise ConfigError("k, m, epochs and threads must be >= 1")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ConfigError("dataset sizes must be >= 0")
        parse_dims(self.hidden)
        parse_dims(self.sensor_hidden)
        self.pml().validate(self.k)
        return self

    def pml(self) -> PmlConfig:
        return PmlConfig(
            s=self.s, T=self.T, beta=self.beta, alpha=self.alpha, srec_gamma=self.gamma,
            srec_delta=self.delta, srec_form=self.srec_form, batch_size=self.batch_size,
            beta_decay=self.beta_decay, momentum=self.momentum, max_epochs=self.epochs,
            tol=self.tol, t_eval=self.t_eval, restarts=self.restarts,
        )

    def hidden_dims(self):
        return parse_dims(self.hidden)

    def sensor_dims(self):
        dims = parse_dims(self.sensor_hidden)
        return dims or None


def parse_dims(text):
    """'500,500' -> (500, 500); '' -> ()."""
    text = str(text).strip()
    if not text:
        return ()
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad layer list {text!r}") from exc
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer widths must be >= 1: {text!r}")
    return dims


def _coerce(name, raw, typ):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


FIELD_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(ExperimentConfig)}


def read_kv(path):
    """Parse a ``key = value`` file; '#' starts a comment line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items):
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve(file_values=None, overrides=None) -> ExperimentConfig:
    """Defaults, then file values, then explicit overrides (None = unset).

    Keys the config does not know (manifest bookkeeping) are ignored.
    """
    values = asdict(ExperimentConfig())
    for src in (file_values or {}, overrides or {}):
        for key, raw in src.items():
            if raw is None or key not in FIELD_TYPES:
                continue
            values[key] = _coerce(key, raw, FIELD_TYPES[key])
    return ExperimentConfig(**values)


def config_hash(cfg: ExperimentConfig, command=""):
    """sha256 over the sorted non-volatile settings and the command name."""
    items = {k: v for k, v in asdict(cfg).items() if k not in VOLATILE_KEYS}
    text = f"command={command}\n" + "".join(f"{k}={items[k]!r}\n" for k in sorted(items))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, cfg: ExperimentConfig, command, extra=None, artifacts=()):
    """Resolved config, seed streams, schema version and artifact digests."""
    items = {"command": command, "schema_version": SCHEMA_VERSION,
             "config_hash": config_hash(cfg, command)}
    items.update(asdict(cfg))
    items.update(seeding.describe(cfg.seed))
    items.update(extra or {})
    for art in artifacts:
        items[f"artifact.{Path(art).name}"] = file_digest(art)
    write_kv(path, items)
    return items["config_hash"]
