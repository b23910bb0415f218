"""Model assembly: embedding, Mamba/attention fusion, recurrent stack, head.

The main architecture embeds an item sequence, fuses a Mamba pass with
low-rank attention through a gated mixing layer, refines the result
with a stack of residual Mamba layers, and scores the full vocabulary
from the final position.  Ablation variants rewire these parts:

    default  full architecture
    v1       fusion layer replaced by a single residual Mamba layer
    v2       no Mamba anywhere: fusion keeps attention only, stack
             layers become feed-forward blocks
    v3       low-rank attention replaced by vanilla attention
    v4       stack layers replaced by feed-forward blocks
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import LsaParams, init_lsa, lsa_attention, vanilla_attention
from .mamba import MambaParams, init_mamba, mamba_block
from .tensor import ParameterStore, Tensor

VARIANTS = ("default", "v1", "v2", "v3", "v4")


@dataclass
class ModelConfig:
    vocab_size: int                 # item count + 1; id 0 is padding
    max_len: int = 50
    d_model: int = 64
    d_state: int = 32
    n_interests: int = 8
    n_heads: int = 2
    n_layers: int = 2
    expand: int = 2
    d_conv: int = 4
    dropout: float = 0.0
    variant: str = "default"
    use_skip: bool = True
    per_head_theta: bool = False
    fresh_mlp1: bool = False
    freeze_padding: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "max_len", "d_model", "d_state", "n_interests",
                     "n_heads", "expand", "d_conv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover at least one real item")


@dataclass
class PffnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class StackLayer:
    mamba: MambaParams | None
    pffn: PffnParams | None
    ln_g: Tensor
    ln_b: Tensor


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, b) if b is not None else y


class MlsaModel:
    """Sequential recommender over dense item ids (0 = left padding)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params = ParameterStore(seed)
        self._drop_rng = np.random.default_rng(seed ^ 0x5EED)
        c = config
        store = self.params

        self.embedding = store.uniform("embedding.M", (c.vocab_size, c.d_model),
                                       c.d_model)
        if c.freeze_padding:
            self.embedding.data[0, :] = 0.0

        self.il_mamba: MambaParams | None = None
        self.il_lsa: LsaParams | None = None
        self.mlp1 = self.mlp1_alt = self.mlp2 = self.mlp3 = None
        self.lns: dict[str, tuple[Tensor, Tensor]] = {}

        if c.variant != "v2":
            self.il_mamba = init_mamba(store, "il.mamba", c.d_model, c.d_state,
                                       c.d_conv, c.expand, c.use_skip)
        self._add_ln("il.ln1")
        if c.variant != "v1":
            self.il_lsa = init_lsa(store, "il.lsa", c.d_model, c.n_interests,
                                   c.n_heads, with_theta=(c.variant != "v3"),
                                   per_head_theta=c.per_head_theta)
            self.mlp1 = (store.uniform("il.mlp1.w", (c.d_model, c.d_model), c.d_model),
                         store.zeros("il.mlp1.b", (c.d_model,)))
            if c.fresh_mlp1:
                self.mlp1_alt = (
                    store.uniform("il.mlp1_alt.w", (c.d_model, c.d_model), c.d_model),
                    store.zeros("il.mlp1_alt.b", (c.d_model,)))
            self.mlp2 = (store.uniform("il.mlp2.w", (2 * c.d_model, c.d_model),
                                       2 * c.d_model),
                         store.zeros("il.mlp2.b", (c.d_model,)))
            self.mlp3 = (store.uniform("il.mlp3.w", (c.d_model, c.d_model), c.d_model),
                         store.zeros("il.mlp3.b", (c.d_model,)))
            for name in ("il.ln2", "il.ln3", "il.ln4"):
                self._add_ln(name)

        self.stack: list[StackLayer] = []
        pffn_stack = c.variant in ("v2", "v4")
        for b in range(c.n_layers):
            if pffn_stack:
                hidden = 4 * c.d_model
                pffn = PffnParams(
                    store.uniform(f"stack.{b}.pffn.w1", (c.d_model, hidden), c.d_model),
                    store.zeros(f"stack.{b}.pffn.b1", (hidden,)),
                    store.uniform(f"stack.{b}.pffn.w2", (hidden, c.d_model), hidden),
                    store.zeros(f"stack.{b}.pffn.b2", (c.d_model,)))
                layer = StackLayer(None, pffn, *self._new_ln(f"stack.{b}.ln"))
            else:
                mp = init_mamba(store, f"stack.{b}.mamba", c.d_model, c.d_state,
                                c.d_conv, c.expand, c.use_skip)
                layer = StackLayer(mp, None, *self._new_ln(f"stack.{b}.ln"))
            self.stack.append(layer)

        self.head_w = store.uniform("head.W", (c.d_model, c.vocab_size), c.d_model)
        self.head_b = store.zeros("head.b", (c.vocab_size,))

    # -- parameter helpers ---------------------------------------------

    def _new_ln(self, name: str) -> tuple[Tensor, Tensor]:
        g = self.params.add(f"{name}.g", np.ones(self.config.d_model))
        b = self.params.zeros(f"{name}.b", (self.config.d_model,))
        return g, b

    def _add_ln(self, name: str) -> None:
        self.lns[name] = self._new_ln(name)

    def _ln(self, name: str, x: Tensor) -> Tensor:
        g, b = self.lns[name]
        return T.layernorm(x, g, b)

    def reseed_dropout(self, seed: int) -> None:
        self._drop_rng = np.random.default_rng(seed ^ 0x5EED)

    def _drop(self, x: Tensor, training: bool) -> Tensor:
        return T.dropout(x, self.config.dropout, self._drop_rng, training)

    # -- forward --------------------------------------------------------

    def forward(self, ids: np.ndarray, training: bool = False
                ) -> tuple[Tensor, dict[str, Tensor]]:
        """Score all items from an id sequence.

        ids is [L] or [B, L], right-aligned (newest item last, zeros pad
        the front).  Returns (logits, intermediates); logits is [vocab]
        for a single sequence, [B, vocab] for a batch.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        inter: dict[str, Tensor] = {}
        c = self.config

        e = self._drop(T.embedding(self.embedding, ids), training)
        inter["embeddings"] = e

        if c.variant == "v1":
            fused = self._drop(
                self._ln("il.ln1", T.add(mamba_block(e, self.il_mamba), e)), training)
            inter["hidden"] = inter["fused"] = fused
        else:
            if c.variant == "v2":
                h = self._ln("il.ln1", e)
            else:
                h = self._ln("il.ln1", T.add(mamba_block(e, self.il_mamba), e))
            h = self._drop(h, training)
            inter["hidden"] = h

            if c.variant == "v3":
                attn = vanilla_attention(h, self.il_lsa)
            else:
                attn = lsa_attention(h, self.il_lsa)
            h_attn = self._drop(self._ln("il.ln2", T.add(attn, h)), training)
            inter["attn_hidden"] = h_attn

            gate = T.gelu(_linear(h_attn, *self.mlp1))
            inter["gate"] = gate
            gated = T.mul(h, gate)
            inter["gated"] = gated
            gated_norm = self._drop(self._ln("il.ln3", gated), training)
            inter["gated_norm"] = gated_norm

            gate2 = gate if self.mlp1_alt is None \
                else T.gelu(_linear(h_attn, *self.mlp1_alt))
            fused = self._ln("il.ln4", T.add(
                _linear(T.concat_last([gated_norm, gate2]), *self.mlp2),
                _linear(e, *self.mlp3)))
            fused = self._drop(fused, training)
            inter["fused"] = fused

        x = fused
        for b, layer in enumerate(self.stack):
            if layer.mamba is not None:
                x = T.layernorm(T.add(mamba_block(x, layer.mamba), x),
                                layer.ln_g, layer.ln_b)
            else:
                p = layer.pffn
                y = _linear(T.gelu(_linear(x, p.w1, p.b1)), p.w2, p.b2)
                x = T.layernorm(T.add(y, x), layer.ln_g, layer.ln_b)
            x = self._drop(x, training)
            inter[f"stack_{b}"] = x

        h_last = T.take_row(x, x.shape[-2] - 1)
        inter["last_hidden"] = h_last
        logits = _linear(h_last, self.head_w, self.head_b)
        if single:
            logits = T.take_row(logits, 0)
        inter["logits"] = logits
        return logits, inter

    def predict(self, ids: np.ndarray) -> np.ndarray:
        """Distribution over all items for the next interaction."""
        with T.no_grad():
            logits, _ = self.forward(ids, training=False)
            return T.softmax(logits, axis=-1).data

    # -- store management ------------------------------------------------

    def rebind(self) -> None:
        """Point every parameter reference at the current store's entries.

        Needed after swapping self.params for another store with the
        same manifest (precision change, checkpoint surgery).
        """
        from .mamba import SsmParams
        p = self.params

        def ssm(prefix: str, old: SsmParams) -> SsmParams:
            return SsmParams(
                p[f"{prefix}.a_log"], p[f"{prefix}.proj_B.w"],
                p[f"{prefix}.proj_C.w"], p[f"{prefix}.proj_delta.w"],
                p[f"{prefix}.proj_delta.b"],
                p[f"{prefix}.skip_d"] if old.skip_d is not None else None,
                old.d_state)

        def mamba(prefix: str, old: MambaParams) -> MambaParams:
            return MambaParams(
                p[f"{prefix}.in_proj.w"], p[f"{prefix}.conv.w"],
                p[f"{prefix}.conv.b"], ssm(f"{prefix}.ssm", old.ssm),
                p[f"{prefix}.out_proj.w"], old.e_inner)

        self.embedding = p["embedding.M"]
        if self.il_mamba is not None:
            self.il_mamba = mamba("il.mamba", self.il_mamba)
        if self.il_lsa is not None:
            old = self.il_lsa
            self.il_lsa = LsaParams(
                p["il.lsa.theta"] if old.theta is not None else None,
                p["il.lsa.w_q"], p["il.lsa.w_k"], p["il.lsa.w_v"],
                old.n_heads, old.n_interests, old.per_head_theta)
        for attr, name in (("mlp1", "il.mlp1"), ("mlp1_alt", "il.mlp1_alt"),
                           ("mlp2", "il.mlp2"), ("mlp3", "il.mlp3")):
            if getattr(self, attr) is not None:
                setattr(self, attr, (p[f"{name}.w"], p[f"{name}.b"]))
        for name in list(self.lns):
            self.lns[name] = (p[f"{name}.g"], p[f"{name}.b"])
        for b, layer in enumerate(self.stack):
            layer.ln_g = p[f"stack.{b}.ln.g"]
            layer.ln_b = p[f"stack.{b}.ln.b"]
            if layer.mamba is not None:
                layer.mamba = mamba(f"stack.{b}.mamba", layer.mamba)
            else:
                layer.pffn = PffnParams(
                    p[f"stack.{b}.pffn.w1"], p[f"stack.{b}.pffn.b1"],
                    p[f"stack.{b}.pffn.w2"], p[f"stack.{b}.pffn.b2"])
        self.head_w = p["head.W"]
        self.head_b = p["head.b"]

    def cast_float64(self) -> None:
        """Swap to a float64 copy of the parameters (gradient checking)."""
        self.params = self.params.astype(np.float64)
        self.rebind()

    def score(self, ids: np.ndarray) -> np.ndarray:
        """Raw item scores (logits); ranking-equivalent to predict()."""
        with T.no_grad():
            logits, _ = self.forward(ids, training=False)
            return logits.data


def build_variant(config: ModelConfig, seed: int = 0) -> MlsaModel:
    """Construct the requested architecture variant."""
    return MlsaModel(config, seed)
