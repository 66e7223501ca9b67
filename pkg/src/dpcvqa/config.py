"""Run configuration: built-in defaults < config file < command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .calibnet import VariantMode
from .errors import InvalidInputError
from .evaluation import FOLD_COUNT
from .perception import VerbalizerSet
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    d: int = 2048
    queries: int = 8
    alpha: float = 0.2
    heads: int = 1
    mode: str = "residual"
    anchors: Optional[str] = None  # comma-separated; None = equally spaced
    # optimisation
    lambda_res: float = 0.05
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch: int = 8
    epochs: int = 30
    smooth_l1_beta: float = 1.0
    # data and protocol
    seed: int = 0
    fold: int = 0
    records: int = 500
    noise: float = 0.01
    protocol: bool = False
    corrupt: bool = False
    # paths
    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    log_file: Optional[str] = None

    @property
    def variant(self) -> VariantMode:
        return VariantMode.parse(self.mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr, weight_decay=self.weight_decay, beta1=self.beta1,
            beta2=self.beta2, epsilon=self.epsilon, batch_size=self.batch,
            epochs=self.epochs, lambda_res=self.lambda_res, seed=self.seed,
            smooth_l1_beta=self.smooth_l1_beta,
        )

    def verbalizers(self, k: int) -> VerbalizerSet:
        if self.anchors is None:
            return VerbalizerSet.for_size(k)
        values = tuple(float(x) for x in self.anchors.split(","))
        if len(values) != k:
            raise InvalidInputError(f"{len(values)} anchors configured for K = {k}")
        return VerbalizerSet(VerbalizerSet.for_size(k).labels, values)

    def validate(self) -> None:
        self.variant
        self.train_config().validate()
        if self.d < 1 or self.queries < 1:
            raise InvalidInputError("d and queries must be positive")
        if self.heads < 1 or self.d % self.heads:
            raise InvalidInputError(f"heads={self.heads} must divide d={self.d}")
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be > 0")
        if not 0 <= self.fold < FOLD_COUNT:
            raise InvalidInputError(f"fold must be in 0..{FOLD_COUNT - 1}, got {self.fold}")
        if self.records < 1:
            raise InvalidInputError("records must be >= 1")
        if not self.noise >= 0:
            raise InvalidInputError("noise must be >= 0")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        if self.anchors is not None:
            values = tuple(float(x) for x in self.anchors.split(","))
            VerbalizerSet(tuple(f"v{i}" for i in range(len(values))), values)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: Any) -> Any:
    f = _FIELDS[name]
    if raw is None or not isinstance(raw, str):
        return raw
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind.startswith("bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidInputError(f"{name}: not a boolean: {raw!r}")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise InvalidInputError(f"{name}: cannot parse {raw!r}") from exc
    return raw.strip()


def parse_config_text(text: str) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise InvalidInputError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text())


def merge(file_values: Optional[Mapping[str, Any]] = None, cli_values: Optional[Mapping[str, Any]] = None,
          base: Optional[RunConfig] = None) -> RunConfig:
    """CLI values override file values, which override ``base`` (default RunConfig())."""
    values = dataclasses.asdict(base or RunConfig())
    for layer in (file_values or {}, cli_values or {}):
        for key, value in layer.items():
            if value is not None:
                values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
