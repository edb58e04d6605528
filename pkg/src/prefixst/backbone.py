"""Miniature decoder-only transformer with per-layer key/value prefix
injection, causal-LM scoring, and hard/soft autoregressive generation.

Prefixes are injected directly into each layer's attention as extra key/value
columns (they bypass embeddings and projections and carry no positional
embedding); layer l consumes only layer l's prefix slice. Sentence positions
attend causally to each other and fully to every prefix column. Soft inputs
(probability rows over the vocabulary) embed as mixture of token embeddings,
which keeps generation differentiable when fed back autoregressively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID, SEP_ID

MASK_NEG = -1e9


@dataclass
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    vocab_size: int = 64
    max_positions: int = 128

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @classmethod
    def from_run_config(cls, cfg) -> "ModelConfig":
        return cls(
            num_layers=cfg.num_layers,
            num_heads=cfg.num_heads,
            model_dim=cfg.model_dim,
            ff_dim=cfg.ff_dim,
            vocab_size=cfg.vocab_size,
            max_positions=cfg.max_positions,
        )


@dataclass
class PrefixBlock:
    """Per-layer key/value activations injected ahead of the sentence.

    `layer_kv[l]` holds layer l's (keys, values), each (B, P, d); B may be 1
    for input-independent blocks (broadcast at use).
    """

    source: str  # shared | style | extraction | content | discriminator
    layer_kv: list[tuple[Tensor, Tensor]]

    @property
    def length(self) -> int:
        return self.layer_kv[0][0].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_kv)


@dataclass
class HiddenStates:
    """Final hidden states and logits for the sentence positions (prefix
    positions never surface here)."""

    hidden: Tensor  # (B, S, d), after the final layer norm
    logits: Tensor  # (B, S, V)
    layer_kv: list[tuple[Tensor, Tensor]] = field(default_factory=list)


@dataclass
class DecodeState:
    """Per-layer K/V caches (graph tensors) plus key visibility flags."""

    ks: list[Tensor]
    vs: list[Tensor]
    key_valid: np.ndarray  # (B, K) bool; False columns are never attended


def backbone_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter tally; must equal the allocated sizes exactly."""
    d, ff, L = cfg.model_dim, cfg.ff_dim, cfg.num_layers
    per_layer = 4 * d * d + 2 * d * ff + 4 * d  # qkvo + mlp + two layer norms
    return cfg.vocab_size * d + cfg.max_positions * d + L * per_layer + 2 * d


class LanguageModel:
    """GPT-style causal LM; output head is tied to the token embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.frozen = False
        self.params: dict[str, Tensor] = {}
        d, ff, L = cfg.model_dim, cfg.ff_dim, cfg.num_layers

        def par(name, shape, std):
            data = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)
            t = Tensor(data, requires_grad=True, name=f"backbone.{name}")
            self.params[t.name] = t
            return t

        def ones_par(name, shape):
            t = Tensor(np.ones(shape), requires_grad=True, name=f"backbone.{name}")
            self.params[t.name] = t
            return t

        resid_std = 0.02 / np.sqrt(2 * L)
        self.wte = par("wte", (cfg.vocab_size, d), 0.02)
        self.wpe = par("wpe", (cfg.max_positions, d), 0.01)
        self.layers = []
        for i in range(L):
            self.layers.append(
                {
                    "ln1_g": ones_par(f"layers.{i}.ln1.gain", (d,)),
                    "ln1_b": par(f"layers.{i}.ln1.bias", (d,), 0.0),
                    "wq": par(f"layers.{i}.attn.wq", (d, d), 0.02),
                    "wk": par(f"layers.{i}.attn.wk", (d, d), 0.02),
                    "wv": par(f"layers.{i}.attn.wv", (d, d), 0.02),
                    "wo": par(f"layers.{i}.attn.wo", (d, d), resid_std),
                    "ln2_g": ones_par(f"layers.{i}.ln2.gain", (d,)),
                    "ln2_b": par(f"layers.{i}.ln2.bias", (d,), 0.0),
                    "w1": par(f"layers.{i}.mlp.w1", (d, ff), 0.02),
                    "w2": par(f"layers.{i}.mlp.w2", (ff, d), resid_std),
                }
            )
        self.lnf_g = ones_par("lnf.gain", (d,))
        self.lnf_b = par("lnf.bias", (d,), 0.0)

    # -- parameter management -------------------------------------------------

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True
        self.frozen = False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float32) for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name}")
            arr = tensors[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward --------------------------------------------------------------

    def embed_inputs(self, tokens) -> Tensor:
        """Token ids (B,S) or soft rows (B,S,V) -> input vectors (B,S,d)."""
        if isinstance(tokens, Tensor) or (
            isinstance(tokens, np.ndarray) and tokens.ndim == 3
        ):
            soft = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
            if soft.shape[-1] != self.cfg.vocab_size:
                raise ad.ShapeError(
                    f"soft input width {soft.shape[-1]} vs vocab {self.cfg.vocab_size}"
                )
            return ad.matmul(soft, self.wte)
        ids = np.asarray(tokens)
        if ids.ndim != 2:
            raise ad.ShapeError(f"token ids must be (B, S), got {ids.shape}")
        if ids.size and ids.max() >= self.cfg.vocab_size:
            raise IndexError(f"token id {ids.max()} out of range (vocab {self.cfg.vocab_size})")
        return ad.embedding(self.wte, ids)

    @staticmethod
    def _stack_prefix_kv(prefixes, batch: int) -> Tensor | None:
        if not prefixes:
            return None
        layer_counts = {b.num_layers for b in prefixes}
        if len(layer_counts) != 1:
            raise ValueError(f"prefix blocks disagree on layer count: {sorted(layer_counts)}")
        parts = []
        for b in prefixes:
            kv = b.kv
            if kv.shape[0] == 1 and batch > 1:
                kv = ad.broadcast_to(kv, (batch,) + kv.shape[1:])
            parts.append(kv)
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def default_mask(self, prefix_len: int, sent_len: int) -> np.ndarray:
        """Additive mask (1, S, P+S): full prefix visibility, causal sentence."""
        m = np.zeros((1, sent_len, prefix_len + sent_len), dtype=ad.get_default_dtype())
        tri = np.triu(np.full((sent_len, sent_len), MASK_NEG), k=1)
        m[0, :, prefix_len:] = tri
        return m

    def _block(self, l: int, x: Tensor, pk, pv, mask):
        lay = self.layers[l]
        h = ad.layer_norm(x, lay["ln1_g"], lay["ln1_b"])
        k = ad.matmul(h, lay["wk"])
        v = ad.matmul(h, lay["wv"])
        k_full = k if pk is None else ad.concat([pk, k], axis=1)
        v_full = v if pv is None else ad.concat([pv, v], axis=1)
        attn_out = ad.attention_core(
            h, lay["wq"], k_full, v_full, lay["wo"], mask, self.cfg.num_heads
        )
        x = ad.add(x, attn_out)
        h2 = ad.layer_norm(x, lay["ln2_g"], lay["ln2_b"])
        mlp = ad.mlp_gelu(h2, lay["w1"], lay["w2"])
        return ad.add(x, mlp), k_full, v_full

    def forward(
        self,
        tokens,
        prefixes=(),
        position_ids: np.ndarray | None = None,
        attn_mask: np.ndarray | None = None,
        input_vectors: Tensor | None = None,
        collect_kv: bool = False,
    ) -> HiddenStates:
        """Run the stack over sentence inputs with optional prefix injection.

        `position_ids` (B,S) and `attn_mask` (B or 1, S, P+S, additive)
        default to contiguous positions and causal-over-sentence visibility.
        """
        if input_vectors is not None:
            x = input_vectors
        else:
            x = self.embed_inputs(tokens)
        B, S = x.shape[0], x.shape[1]
        kv_all = self._stack_prefix_kv(list(prefixes), B)
        P = kv_all.shape[1] if kv_all is not None else 0
        if P + S > self.cfg.max_positions:
            raise ValueError(
                f"sequence too long: {P} prefix + {S} sentence positions "
                f"> max_positions {self.cfg.max_positions}"
            )
        if position_ids is None:
            position_ids = np.broadcast_to(np.arange(S), (B, S))
        x = ad.add(x, ad.embedding(self.wpe, position_ids))
        if attn_mask is None:
            attn_mask = self.default_mask(P, S)
        layer_kv = []
        for l in range(self.cfg.num_layers):
            pk = pv = None
            if kv_all is not None:
                pk = ad.getitem(kv_all, (slice(None), slice(None), l, 0, slice(None)))
                pv = ad.getitem(kv_all, (slice(None), slice(None), l, 1, slice(None)))
            x, k_full, v_full = self._block(l, x, pk, pv, attn_mask)
            if collect_kv:
                layer_kv.append((k_full, v_full))
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        logits = ad.matmul(x, ad.transpose(self.wte, (1, 0)))
        return HiddenStates(hidden=x, logits=logits, layer_kv=layer_kv)

    # -- incremental decoding ---------------------------------------------------

    def prime_decode(
        self,
        tokens,
        prefixes=(),
        position_ids=None,
        attn_mask=None,
        key_valid: np.ndarray | None = None,
        input_vectors: Tensor | None = None,
    ) -> tuple[HiddenStates, DecodeState]:
        """Forward over the conditioning context, capturing K/V caches.

        `key_valid` (B, P+S) marks which cached columns later decode steps may
        attend (defaults to everything).
        """
        hs = self.forward(
            tokens,
            prefixes=prefixes,
            position_ids=position_ids,
            attn_mask=attn_mask,
            input_vectors=input_vectors,
            collect_kv=True,
        )
        ks = [kv[0] for kv in hs.layer_kv]
        vs = [kv[1] for kv in hs.layer_kv]
        B, K = ks[0].shape[0], ks[0].shape[1]
        if key_valid is None:
            key_valid = np.ones((B, K), dtype=bool)
        if key_valid.shape != (B, K):
            raise ValueError(f"key_valid shape {key_valid.shape} != {(B, K)}")
        hs.layer_kv = []
        return hs, DecodeState(ks=ks, vs=vs, key_valid=key_valid.copy())

    def decode_step(
        self,
        state: DecodeState,
        inputs,
        position_ids: np.ndarray,
        valid: np.ndarray | None = None,
    ) -> Tensor:
        """Advance one position; returns logits (B, V) and extends the caches.

        `inputs` is ids (B,), soft rows (B, V), or a Tensor of either; the new
        column's own visibility for future steps is `valid` (default all True).
        """
        cfg = self.cfg
        if isinstance(inputs, Tensor) or (isinstance(inputs, np.ndarray) and inputs.dtype.kind == "f"):
            soft = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
            x = ad.matmul(ad.reshape(soft, (soft.shape[0], 1, cfg.vocab_size)), self.wte)
        else:
            ids = np.asarray(inputs).reshape(-1, 1)
            x = ad.embedding(self.wte, ids)
        B = x.shape[0]
        pos = np.asarray(position_ids).reshape(B, 1)
        if pos.max() >= cfg.max_positions:
            raise ValueError(f"position {pos.max()} exceeds max_positions {cfg.max_positions}")
        x = ad.add(x, ad.embedding(self.wpe, pos))

        K = state.key_valid.shape[1]
        mask = np.where(state.key_valid[:, None, :], 0.0, MASK_NEG).astype(x.data.dtype)
        mask = np.concatenate([mask, np.zeros((B, 1, 1), dtype=x.data.dtype)], axis=2)
        for l in range(cfg.num_layers):
            x_new, k_full, v_full = self._block(l, x, state.ks[l], state.vs[l], mask)
            state.ks[l] = k_full
            state.vs[l] = v_full
            x = x_new
        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        logits = ad.matmul(x, ad.transpose(self.wte, (1, 0)))
        new_valid = np.ones((B, 1), dtype=bool) if valid is None else np.asarray(valid).reshape(B, 1)
        state.key_valid = np.concatenate([state.key_valid, new_valid], axis=1)
        return ad.reshape(logits, (B, cfg.vocab_size))

    # -- scoring and generation -------------------------------------------------

    def _begin_id(self) -> int:
        return SEP_ID if self.cfg.vocab_size > SEP_ID else 0

    def sequence_log_prob(self, target: list[int], prefixes=(), context: list[int] | None = None) -> Tensor:
        """Teacher-forced sum of log p(target_t | prefixes, context, target_<t).

        Scoring starts at a separator token appended after the context (id 0
        for degenerate vocabularies too small to hold the separator).
        """
        target = list(target)
        if not target:
            raise ValueError("target must be non-empty")
        context = list(context or [])
        v = self.cfg.vocab_size
        for tok in target + context:
            if not 0 <= tok < v:
                raise IndexError(f"token id {tok} out of range (vocab {v})")
        inputs = np.array([context + [self._begin_id()] + target[:-1]], dtype=np.int64)
        hs = self.forward(inputs, prefixes=prefixes)
        n = len(target)
        logits = ad.getitem(hs.logits, (slice(None), slice(len(context), len(context) + n), slice(None)))
        weights = np.ones((1, n), dtype=hs.logits.data.dtype)
        nll = ad.cross_entropy_logits(logits, np.array([target]), weights)
        return ad.neg(nll)

    def generate(
        self,
        prefixes=(),
        context: list[int] | None = None,
        mode: str = "greedy",
        max_len: int | None = None,
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        """Decode after `context + [SEP]`. Greedy/sample return id lists
        (EOS-terminated, EOS not included); soft returns the distribution
        sequence as a Tensor (max_len, V), differentiable under a tape.
        """
        if mode not in ("greedy", "sample", "soft"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "greedy" and temperature <= 0:
            raise ValueError("temperature must be > 0")
        context = list(context or [])
        if max_len is None:
            max_len = len(context) + 8
        if max_len == 0:
            return Tensor(np.zeros((0, self.cfg.vocab_size))) if mode == "soft" else []
        if mode == "sample" and rng is None:
            raise ValueError("sample mode needs an rng")

        ids = np.array([context + [self._begin_id()]], dtype=np.int64)
        hs, state = self.prime_decode(ids, prefixes=prefixes)
        logits = ad.getitem(hs.logits, (slice(None), slice(ids.shape[1] - 1, ids.shape[1]), slice(None)))
        logits = ad.reshape(logits, (1, self.cfg.vocab_size))
        next_pos = ids.shape[1]

        out_ids: list[int] = []
        soft_steps: list[Tensor] = []
        for step in range(max_len):
            if mode == "soft":
                dist = ad.softmax(logits, axis=-1, scale=1.0 / temperature)
                soft_steps.append(dist)
                if step + 1 == max_len:
                    break
                logits = self.decode_step(state, dist, np.array([next_pos]))
            else:
                z = logits.data[0]
                if mode == "greedy":
                    tok = int(z.argmax())
                else:
                    zt = (z / temperature) - (z / temperature).max()
                    p = np.exp(zt)
                    p /= p.sum()
                    tok = int(rng.choice(len(p), p=p))
                if tok == EOS_ID:
                    break
                out_ids.append(tok)
                if step + 1 == max_len:
                    break
                logits = self.decode_step(state, np.array([tok]), np.array([next_pos]))
            next_pos += 1

        if mode == "soft":
            return ad.concat(soft_steps, axis=0)
        return out_ids

    # -- pretraining --------------------------------------------------------------

    def pretrain_loss(self, batch) -> Tensor:
        """Mean next-token cross-entropy over a corpus batch ([BOS] x [EOS])."""
        B, n_max = batch.ids.shape
        inputs = np.full((B, n_max + 1), PAD_ID, dtype=np.int64)
        targets = np.full((B, n_max + 1), PAD_ID, dtype=np.int64)
        weights = np.zeros((B, n_max + 1), dtype=ad.get_default_dtype())
        inputs[:, 0] = BOS_ID
        inputs[:, 1:] = batch.ids
        targets[:, :n_max] = batch.ids
        for b, n in enumerate(batch.lengths):
            targets[b, n] = EOS_ID
            weights[b, : n + 1] = 1.0
        total = weights.sum()
        hs = self.forward(inputs)
        return ad.cross_entropy_logits(hs.logits, targets, weights / total)

    def pretrain_step(self, batch, optimizer) -> float:
        """One optimizer step of causal-LM pretraining; rejected once frozen."""
        if self.frozen:
            raise RuntimeError("backbone is frozen; pretraining is no longer allowed")
        params = self.param_list()
        ad.zero_grads(params)
        with ad.Tape() as tape:
            loss = self.pretrain_loss(batch)
        ad.backward(tape, loss)
        optimizer.step(params)
        return float(loss.data)
