"""The generator's prefix system.

Three prefixes steer the frozen backbone: a shared prefix (task-level,
input-independent), a style prefix (one per target style), and a content
prefix extracted by running the same frozen backbone over the input sentence
conditioned on an auxiliary extraction prefix fused from all style
embeddings. Each prefix is reparameterized through a small projection MLP
whose output heads emit every layer's key/value columns.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MASK_NEG, LanguageModel, PrefixBlock


class ProjectionNet:
    """Two-layer MLP from d to per-layer key/value columns.

    One shared hidden layer (width `hidden`, tanh) feeds one output head per
    (layer, key/value) pair; splitting the heads keeps each emitted tensor
    (B, P, d) so the graph never materializes an all-layer blob.
    """

    def __init__(self, rng, name: str, d: int, hidden: int, num_layers: int, param):
        self.num_layers = num_layers
        self.w1 = param(f"{name}.w1", rng.normal(0, 1.0 / np.sqrt(d), (d, hidden)))
        self.b1 = param(f"{name}.b1", np.zeros(hidden))
        self.heads = []
        for l in range(num_layers):
            wk = param(f"{name}.w2.{l}.k", rng.normal(0, 0.02, (hidden, d)))
            bk = param(f"{name}.b2.{l}.k", np.zeros(d))
            wv = param(f"{name}.w2.{l}.v", rng.normal(0, 0.02, (hidden, d)))
            bv = param(f"{name}.b2.{l}.v", np.zeros(d))
            self.heads.append((wk, bk, wv, bv))

    def __call__(self, x: Tensor) -> list[tuple[Tensor, Tensor]]:
        """x (..., P, d) -> per layer ((..., P, d) keys, (..., P, d) values)."""
        h = ad.tanh(ad.add(ad.matmul(x, self.w1), self.b1))
        out = []
        for wk, bk, wv, bv in self.heads:
            out.append((ad.add(ad.matmul(h, wk), bk), ad.add(ad.matmul(h, wv), bv)))
        return out


class PrefixBuilder:
    """Owns every trainable generator parameter and builds prefix blocks.

    The projection MLP for the shared/style path is one instance; the content
    and extraction paths have their own unless `tie_projections` routes them
    all through the shared instance.
    """

    def __init__(self, run_cfg, backbone: LanguageModel, rng: np.random.Generator):
        self.cfg = run_cfg
        self.backbone = backbone
        mc = backbone.cfg
        d, L = mc.model_dim, mc.num_layers
        hidden = run_cfg.proj_hidden
        self.params: dict[str, Tensor] = {}
        self.content_pass_count = 0  # extraction forwards through the backbone

        def param(name, data):
            t = Tensor(data, requires_grad=True, name=f"generator.prefix.{name}")
            self.params[t.name] = t
            return t

        self.shared_tokens = param(
            "shared_tokens", rng.normal(0, 1.0, (run_cfg.shared_prefix_len, d))
        )
        self.style_embeddings = param(
            "style_embeddings", rng.normal(0, 1.0, (run_cfg.num_styles, d))
        )
        self.style_position_offsets = param(
            "style_position_offsets", rng.normal(0, 1.0, (run_cfg.style_prefix_len, d))
        )
        self.main_proj = ProjectionNet(rng, "main_proj", d, hidden, L, param)
        if run_cfg.tie_projections:
            self.content_proj = self.main_proj
            self.extraction_proj = self.main_proj
        else:
            self.content_proj = ProjectionNet(rng, "content_proj", d, hidden, L, param)
            self.extraction_proj = ProjectionNet(rng, "extraction_proj", d, hidden, L, param)
        self.fusion = {
            "w1": param("fusion.w1", rng.normal(0, 1.0 / np.sqrt(run_cfg.num_styles * d),
                                                (run_cfg.num_styles * d, d))),
            "b1": param("fusion.b1", np.zeros(d)),
            "w2": param("fusion.w2", rng.normal(0, 1.0 / np.sqrt(d), (d, d))),
            "b2": param("fusion.b2", np.zeros(d)),
        }

    # -- parameter management ----------------------------------------------------

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

    # -- the prefixes ------------------------------------------------------------

    def build_shared_prefix(self) -> PrefixBlock:
        """Task-level prefix from the shared virtual tokens; input-independent."""
        x = ad.reshape(self.shared_tokens, (1,) + self.shared_tokens.shape)
        return PrefixBlock(source="shared", layer_kv=self.main_proj(x))

    def build_style_prefix(self, target_style: int) -> PrefixBlock:
        """Target-style prefix: the style embedding plus learned per-position
        offsets, run through the shared projection."""
        if not 0 <= target_style < self.cfg.num_styles:
            raise ValueError(f"unknown style {target_style} (have {self.cfg.num_styles})")
        emb = ad.embedding(self.style_embeddings, np.array([target_style]))  # (1, d)
        x = ad.add(self.style_position_offsets, emb)
        x = ad.reshape(x, (1,) + x.shape)
        return PrefixBlock(source="style", layer_kv=self.main_proj(x))

    def build_extraction_prefix(self) -> PrefixBlock:
        """Prefix conditioning the content-extraction pass, fused from all
        style embeddings and broadcast across its positions."""
        mc = self.backbone.cfg
        flat_styles = ad.reshape(self.style_embeddings, (1, 1, self.cfg.num_styles * mc.model_dim))
        h = ad.tanh(ad.add(ad.matmul(flat_styles, self.fusion["w1"]), self.fusion["b1"]))
        fused = ad.add(ad.matmul(h, self.fusion["w2"]), self.fusion["b2"])  # (1, 1, d)
        P = self.cfg.extraction_prefix_len
        layer_kv = []
        for k, v in self.extraction_proj(fused):
            layer_kv.append(
                (ad.broadcast_to(k, (1, P, mc.model_dim)), ad.broadcast_to(v, (1, P, mc.model_dim)))
            )
        return PrefixBlock(source="extraction", layer_kv=layer_kv)

    def build_content_prefix(self, tokens, lengths: np.ndarray | None = None) -> PrefixBlock:
        """Run the frozen backbone over (extraction prefix, X); each sentence
        position's final hidden state projects to that position's K/V columns.

        `tokens` is ids (B, n) or a soft sequence (B, n, V); `lengths` marks
        the real span per row, and padded columns must be masked out by the
        consumer of the resulting block.
        """
        B, n = tokens.shape[0], tokens.shape[1]
        if n < 1:
            raise ValueError("content prefix needs a non-empty sentence")
        extraction = self.build_extraction_prefix()
        P = extraction.length
        mask = self.backbone.default_mask(P, n)
        if lengths is not None:
            mask = np.repeat(mask, B, axis=0)
            cols = np.arange(n)
            invalid = cols[None, :] >= np.asarray(lengths)[:, None]  # (B, n)
            mask[:, :, P:][np.broadcast_to(invalid[:, None, :], (B, n, n))] = MASK_NEG
        hs = self.backbone.forward(tokens, prefixes=[extraction], attn_mask=mask)
        self.content_pass_count += 1
        return PrefixBlock(source="content", layer_kv=self.content_proj(hs.hidden))

    def style_pseudo_embedding(self, target_style: int) -> Tensor:
        """The raw style embedding as a single pseudo-token input vector
        (1, 1, d), for the style-embedding model variant."""
        if not 0 <= target_style < self.cfg.num_styles:
            raise ValueError(f"unknown style {target_style}")
        return ad.embedding(self.style_embeddings, np.array([[target_style]]))

    def assemble(
        self,
        shared: PrefixBlock | None,
        style: PrefixBlock | None,
        content: PrefixBlock | None,
    ) -> list[PrefixBlock]:
        """Ordered [shared, style, content], dropping ablated (None) slots."""
        blocks = [b for b in (shared, style, content) if b is not None]
        layer_counts = {b.num_layers for b in blocks}
        if len(layer_counts) > 1:
            raise ValueError(f"prefix blocks disagree on layer count: {sorted(layer_counts)}")
        return blocks


def generator_parameter_count(run_cfg) -> int:
    """Closed-form trainable-parameter tally for the prefix system."""
    d = run_cfg.model_dim
    L = run_cfg.num_layers
    hidden = run_cfg.proj_hidden
    mlp = d * hidden + hidden + L * 2 * (hidden * d + d)
    n_mlps = 1 if run_cfg.tie_projections else 3
    embeddings = (run_cfg.shared_prefix_len + run_cfg.num_styles + run_cfg.style_prefix_len) * d
    fusion = run_cfg.num_styles * d * d + d + d * d + d
    return embeddings + n_mlps * mlp + fusion
