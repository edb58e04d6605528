"""Run configuration: plain-text `key = value` files, overrides, hashing.

A single flat RunConfig drives every command; its canonical text is embedded
in checkpoints and its hash in every artifact file so runs stay traceable.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    # backbone architecture (desk-scale defaults)
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    max_positions: int = 128
    vocab_size: int = 0  # filled in from the built vocabulary at pretrain time

    # prefix system
    shared_prefix_len: int = 10
    style_prefix_len: int = 20
    extraction_prefix_len: int = 20
    num_styles: int = 2
    dis_token_count: int = 10
    proj_hidden: int = 128
    tie_projections: bool = False

    # losses and optimizer
    lambda_self: float = 0.25
    lambda_cycle: float = 0.5
    lambda_style: float = 1.0
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0

    # adversarial schedule
    dis_steps_per_cycle: int = 10
    gen_steps_per_cycle: int = 5
    cycles: int = 150
    batch_size: int = 8
    checkpoint_interval: int = 500

    # backbone pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3

    # generation
    soft_temperature: float = 1.0
    max_len_extra: int = 8
    max_sentence_len: int = 48

    # evaluation
    classifier_buckets: int = 2048
    classifier_dim: int = 16
    classifier_epochs: int = 60
    ngram_order: int = 3
    kn_discount: float = 0.75
    bleu_max_n: int = 4

    # ablations
    disable_shared_prefix: bool = False
    disable_style_prefix: bool = False
    use_style_embedding: bool = False
    disable_content_prefix: bool = False
    full_finetune: bool = False

    seed: int = 0

    def validate(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_self", "lambda_cycle", "lambda_style"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dis_steps_per_cycle < 1 or self.gen_steps_per_cycle < 1:
            raise ValueError("schedule step counts must be >= 1")
        if self.use_style_embedding and not self.disable_style_prefix:
            # the style-embedding variant replaces the style prefix
            self.disable_style_prefix = True

    def canonical_text(self) -> str:
        """Stable `key = value` rendering, one line per field in declared order."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    typ = _FIELD_TYPES.get(name)
    if typ is None:
        raise KeyError(f"unknown config key: {name}")
    raw = raw.strip()
    if typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment, blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        values = parse_config_text(Path(path).read_text())
        cfg = dataclasses.replace(cfg, **values)
    if overrides:
        coerced = {}
        for k, v in overrides.items():
            coerced[k] = _coerce(k, str(v)) if isinstance(v, str) else v
        cfg = dataclasses.replace(cfg, **coerced)
    cfg.validate()
    return cfg


def config_from_text(text: str) -> RunConfig:
    cfg = dataclasses.replace(RunConfig(), **parse_config_text(text))
    cfg.validate()
    return cfg
