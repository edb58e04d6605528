"""Prefix-tuned style discriminator on the shared frozen backbone.

A classifier over {style 0, style 1, fake}: the backbone runs on
(discriminator prefix, X), the final-layer hidden states of the sentence
positions are mean-pooled and mapped by a linear head to three logits. The
fake class marks machine-generated sentences. Only the prefix parameters and
the head train; the backbone stays frozen.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MASK_NEG, LanguageModel
from .prefixes import _mlp_params

FAKE_CLASS = 2  # after the two real styles


class Discriminator:
    def __init__(self, run_cfg, backbone: LanguageModel, rng: np.random.Generator):
        self.cfg = run_cfg
        self.backbone = backbone
        mc = backbone.cfg
        d, L = mc.model_dim, mc.num_layers
        self.num_classes = run_cfg.num_styles + 1
        self.params: dict[str, Tensor] = {}

        def param(name, data):
            t = Tensor(data, requires_grad=True, name=f"discriminator.{name}")
            self.params[t.name] = t
            return t

        self.tokens = param("tokens", rng.normal(0, 1.0, (run_cfg.dis_token_count, d)))
        self.proj = _mlp_params(rng, "proj", d, run_cfg.proj_hidden, L * 2 * d, param)
        self.head_w = param("head.w", rng.normal(0, 0.02, (d, self.num_classes)))
        self.head_b = param("head.b", np.zeros(self.num_classes))

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float32) for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = tensors.get(name)
            if arr is None:
                raise KeyError(f"checkpoint is missing tensor {name}")
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def build_prefix(self):
        from .backbone import PrefixBlock

        h = ad.tanh(ad.add(ad.matmul(self.tokens, self.proj["w1"]), self.proj["b1"]))
        flat = ad.add(ad.matmul(h, self.proj["w2"]), self.proj["b2"])
        mc = self.backbone.cfg
        kv = ad.reshape(flat, (1, self.cfg.dis_token_count, mc.num_layers, 2, mc.model_dim))
        return PrefixBlock(source="discriminator", kv=kv)

    def class_logits(self, tokens, lengths: np.ndarray | None = None) -> Tensor:
        """Backbone forward on (prefix, X), masked mean pool, linear head.

        `tokens`: ids (B, n) or soft rows (B, n, V); `lengths` masks padding.
        """
        B, n = tokens.shape[0], tokens.shape[1]
        if n < 1:
            raise ValueError("discriminator input must be non-empty")
        prefix = self.build_prefix()
        P = prefix.length
        mask = self.backbone.default_mask(P, n)
        if lengths is not None:
            lengths = np.asarray(lengths)
            mask = np.repeat(mask, B, axis=0)
            invalid = np.arange(n)[None, :] >= lengths[:, None]
            mask[:, :, P:][np.broadcast_to(invalid[:, None, :], (B, n, n))] = MASK_NEG
        hs = self.backbone.forward(tokens, prefixes=[prefix], attn_mask=mask)
        if lengths is None:
            pooled = ad.mean_(hs.hidden, axis=1)
        else:
            w = (np.arange(n)[None, :] < lengths[:, None]).astype(hs.hidden.data.dtype)
            w = w / w.sum(axis=1, keepdims=True)
            pooled = ad.sum_(ad.mul(hs.hidden, Tensor(w[:, :, None])), axis=1)
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)

    def classify(self, tokens, lengths: np.ndarray | None = None) -> Tensor:
        """Probability rows over (style 0, style 1, fake)."""
        return ad.softmax(self.class_logits(tokens, lengths), axis=-1)

    def loss(self, tokens, targets: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        """Mean negative log-likelihood of `targets` (class ids per row)."""
        logits = self.class_logits(tokens, lengths)
        targets = np.asarray(targets)
        weights = np.full(targets.shape, 1.0 / targets.size, dtype=logits.data.dtype)
        return ad.cross_entropy_logits(logits, targets, weights)


def discriminator_parameter_count(run_cfg) -> int:
    d, L, hidden = run_cfg.model_dim, run_cfg.num_layers, run_cfg.proj_hidden
    kv_dim = L * 2 * d
    mlp = d * hidden + hidden + hidden * kv_dim + kv_dim
    head = d * (run_cfg.num_styles + 1) + (run_cfg.num_styles + 1)
    return run_cfg.dis_token_count * d + mlp + head
