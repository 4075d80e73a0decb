"""Transformer encoder scoring one 30-second PSG epoch at a time.

Each 4x3000 epoch is z-scored per channel, cut into fixed-size patches,
linearly projected, tagged with positional and channel embeddings, and
prefixed with a learnable CLS token. A stack of pre-LN self-attention /
MLP blocks encodes the tokens; two MLP heads read the CLS state: a raw
(unbounded) sleep-depth scalar and a 2-way REM logit pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 4
    samples_per_epoch: int = 3000
    patch_size: int = 100
    embed_dim: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.samples_per_epoch % self.patch_size != 0:
            raise ValueError("samples_per_epoch must be a multiple of patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be a multiple of n_heads")
        for name in ("channels", "samples_per_epoch", "patch_size", "embed_dim", "depth", "n_heads", "mlp_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def patches_per_channel(self) -> int:
        return self.samples_per_epoch // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.channels * self.patches_per_channel

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @staticmethod
    def desk() -> "ModelConfig":
        return ModelConfig()

    @staticmethod
    def full() -> "ModelConfig":
        return ModelConfig(embed_dim=512, depth=6, n_heads=8, mlp_dim=2048)


STD_FLOOR = 1e-6


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class SleepDepthModel:
    """Parameter container plus forward passes built on the autodiff tape."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        # one-hot map from patch index to source channel, fixed per config
        c = config
        sel = np.zeros((c.n_patches, c.channels))
        sel[np.arange(c.n_patches), np.arange(c.n_patches) // c.patches_per_channel] = 1.0
        self._chan_select = ad.Tensor(sel)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, dm = c.embed_dim, c.mlp_dim
        qkv = 3 * c.n_heads * c.head_dim

        def p(name, value):
            self.params[name] = ad.parameter(value, name=name)

        p("patch_proj_w", _trunc_normal(rng, (c.patch_size, d)))
        p("patch_proj_b", np.zeros(d))
        p("pos_emb", _trunc_normal(rng, (c.n_tokens, d)))
        p("chan_emb", _trunc_normal(rng, (c.channels, d)))
        p("cls", _trunc_normal(rng, (1, 1, d)))
        for i in range(c.depth):
            p(f"layer{i}.ln1_g", np.ones(d))
            p(f"layer{i}.ln1_b", np.zeros(d))
            p(f"layer{i}.qkv_w", _trunc_normal(rng, (d, qkv)))
            p(f"layer{i}.qkv_b", np.zeros(qkv))
            p(f"layer{i}.msa_w", _trunc_normal(rng, (d, d)))
            p(f"layer{i}.msa_b", np.zeros(d))
            p(f"layer{i}.ln2_g", np.ones(d))
            p(f"layer{i}.ln2_b", np.zeros(d))
            p(f"layer{i}.mlp1_w", _trunc_normal(rng, (d, dm)))
            p(f"layer{i}.mlp1_b", np.zeros(dm))
            p(f"layer{i}.mlp2_w", _trunc_normal(rng, (dm, d)))
            p(f"layer{i}.mlp2_b", np.zeros(d))
        for head, width in (("depth_head", 1), ("rem_head", 2)):
            p(f"{head}.w1", _trunc_normal(rng, (d, dm)))
            p(f"{head}.b1", np.zeros(dm))
            p(f"{head}.w2", _trunc_normal(rng, (dm, width)))
            p(f"{head}.b2", np.zeros(width))

    def zero_weights(self) -> None:
        for t in self.params.values():
            t.data[:] = 0.0
        for i in range(self.config.depth):
            self.params[f"layer{i}.ln1_g"].data[:] = 1.0
            self.params[f"layer{i}.ln2_g"].data[:] = 1.0

    # ------------------------------------------------------------- forward

    def embed(self, epochs: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        """Epoch batch (B, C, L) -> token tensor (B, N+1, D)."""
        c = self.config
        x = np.asarray(epochs, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (c.channels, c.samples_per_epoch):
            raise ValueError(f"expected epochs of shape (B, {c.channels}, {c.samples_per_epoch}), got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        sd = np.maximum(x.std(axis=-1, keepdims=True), STD_FLOOR)
        x = (x - mu) / sd
        patches = ad.Tensor(x.reshape(x.shape[0], c.n_patches, c.patch_size))
        tokens = ad.add(ad.matmul(patches, self.params["patch_proj_w"]), self.params["patch_proj_b"])
        tokens = ad.add(tokens, ad.matmul(self._chan_select, self.params["chan_emb"]))
        cls = ad.broadcast_to(self.params["cls"], (x.shape[0], 1, c.embed_dim))
        tokens = ad.concat([cls, tokens], axis=1)
        tokens = ad.add(tokens, self.params["pos_emb"])
        tokens = self._dropout(tokens, train, rng)
        if single:
            tokens = ad.reshape(tokens, (c.n_tokens, c.embed_dim))
        return tokens

    def _dropout(self, t: ad.Tensor, train: bool, rng: np.random.Generator | None) -> ad.Tensor:
        p = self.config.dropout
        if not train or p <= 0.0:
            return t
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        mask = (rng.random(t.shape) >= p) / (1.0 - p)
        return ad.mul(t, ad.Tensor(mask))

    def encode(self, tokens: ad.Tensor, train: bool = False, rng: np.random.Generator | None = None,
               collect_attention: list | None = None) -> ad.Tensor:
        c = self.config
        inv_sqrt = 1.0 / math.sqrt(c.head_dim)
        single = len(tokens.shape) == 2
        if single:
            tokens = ad.reshape(tokens, (1,) + tokens.shape)
        b_dim = tokens.shape[0]
        t_dim = tokens.shape[1]
        x = tokens
        for i in range(c.depth):
            P = self.params
            h = ad.layer_norm(x, P[f"layer{i}.ln1_g"], P[f"layer{i}.ln1_b"])
            qkv = ad.add(ad.matmul(h, P[f"layer{i}.qkv_w"]), P[f"layer{i}.qkv_b"])
            q, k, v = ad.split(qkv, [c.embed_dim] * 3, axis=-1)

            def heads(t):
                t = ad.reshape(t, (b_dim, t_dim, c.n_heads, c.head_dim))
                return ad.transpose(t, (0, 2, 1, 3))

            q, k, v = heads(q), heads(k), heads(v)
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            attn = ad.softmax(scores, axis=-1)
            if collect_attention is not None:
                collect_attention.append(attn.data)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b_dim, t_dim, c.embed_dim))
            msa = ad.add(ad.matmul(ctx, P[f"layer{i}.msa_w"]), P[f"layer{i}.msa_b"])
            x = ad.add(x, msa)
            h2 = ad.layer_norm(x, P[f"layer{i}.ln2_g"], P[f"layer{i}.ln2_b"])
            m = ad.gelu(ad.add(ad.matmul(h2, P[f"layer{i}.mlp1_w"]), P[f"layer{i}.mlp1_b"]))
            m = ad.add(ad.matmul(m, P[f"layer{i}.mlp2_w"]), P[f"layer{i}.mlp2_b"])
            m = self._dropout(m, train, rng)
            x = ad.add(x, m)
        if not np.isfinite(x.data).all():
            raise FloatingPointError("non-finite activations in encoder")
        if single:
            x = ad.reshape(x, x.shape[1:])
        return x

    def _head(self, cls: ad.Tensor, name: str) -> ad.Tensor:
        P = self.params
        h = ad.gelu(ad.add(ad.matmul(cls, P[f"{name}.w1"]), P[f"{name}.b1"]))
        return ad.add(ad.matmul(h, P[f"{name}.w2"]), P[f"{name}.b2"])

    def forward(self, epochs: np.ndarray, train: bool = False, rng: np.random.Generator | None = None
                ) -> tuple[ad.Tensor, ad.Tensor]:
        """Returns (raw_depth (B,), rem_logits (B, 2)); raw depth is unbounded."""
        epochs = np.asarray(epochs, dtype=np.float64)
        if epochs.ndim == 2:
            epochs = epochs[None]
        tokens = self.embed(epochs, train=train, rng=rng)
        encoded = self.encode(tokens, train=train, rng=rng)
        b_dim = encoded.shape[0]
        cls = ad.reshape(ad.narrow(encoded, 1, 0, 1), (b_dim, self.config.embed_dim))
        raw_depth = ad.reshape(self._head(cls, "depth_head"), (b_dim,))
        rem_logits = self._head(cls, "rem_head")
        return raw_depth, rem_logits

    def trainable(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()
