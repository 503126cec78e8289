"""Small pre-norm transformer: RMSNorm, SwiGLU FFN, RoPE, grouped-query
attention, and a runtime-selectable causal or bidirectional attention mask.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class AttentionMode(enum.Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    heads: int = 4
    kv_heads: int = 2
    vocab_size: int = 256
    max_seq_len: int = 128
    rope_theta: float = 10_000.0
    rmsnorm_eps: float = 1e-5
    init_std: float = float(np.sqrt(0.2))
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.heads % self.kv_heads != 0:
            raise ValueError("heads must be divisible by kv_heads")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (RoPE pairs coordinates)")
        if self.max_seq_len < 2 or self.vocab_size < 2:
            raise ValueError("max_seq_len and vocab_size must both be >= 2")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "embed_dim": self.embed_dim,
            "ffn_dim": self.ffn_dim, "heads": self.heads,
            "kv_heads": self.kv_heads, "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len, "rope_theta": self.rope_theta,
            "rmsnorm_eps": self.rmsnorm_eps, "init_std": self.init_std,
            "tie_embeddings": self.tie_embeddings,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


Parameters = Dict[str, Tensor]


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter name set for a config, in a fixed order."""
    names = ["embed"]
    for i in range(cfg.layers):
        p = f"layer.{i}"
        names += [
            f"{p}.attn_norm", f"{p}.attn.wq", f"{p}.attn.wk",
            f"{p}.attn.wv", f"{p}.attn.wo",
            f"{p}.ffn_norm", f"{p}.ffn.w_gate", f"{p}.ffn.w_up",
            f"{p}.ffn.w_down",
        ]
    names.append("final_norm")
    if not cfg.tie_embeddings:
        names.append("head")
    return names


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Weights i.i.d. N(0, init_std^2); RMSNorm gains start at 1."""
    rng = np.random.default_rng(seed)
    d, f = cfg.embed_dim, cfg.ffn_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, cfg.init_std, size=shape), requires_grad=True)

    params: Parameters = {"embed": w(cfg.vocab_size, d)}
    for i in range(cfg.layers):
        p = f"layer.{i}"
        params[f"{p}.attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.attn.wq"] = w(d, d)
        params[f"{p}.attn.wk"] = w(d, cfg.kv_dim)
        params[f"{p}.attn.wv"] = w(d, cfg.kv_dim)
        params[f"{p}.attn.wo"] = w(d, d)
        params[f"{p}.ffn_norm"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.ffn.w_gate"] = w(d, f)
        params[f"{p}.ffn.w_up"] = w(d, f)
        params[f"{p}.ffn.w_down"] = w(f, d)
    params["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    if not cfg.tie_embeddings:
        params["head"] = w(d, cfg.vocab_size)
    return params


def _mask_matrix(seq_len: int, mode: AttentionMode,
                 pad_mask: Optional[Sequence[bool]]) -> np.ndarray:
    """Additive [T, T] mask: 0 where attending is allowed, NEG_INF elsewhere."""
    m = np.zeros((seq_len, seq_len))
    if mode is AttentionMode.CAUSAL:
        m[np.triu_indices(seq_len, k=1)] = T.NEG_INF
    if pad_mask is not None:
        pad = ~np.asarray(pad_mask, dtype=bool)
        if pad.all():
            raise ValueError("attention: all positions padded")
        m[:, pad] = T.NEG_INF
    return m


def attention(hidden: Tensor, params: Parameters, layer: int, cfg: ModelConfig,
              mode: AttentionMode,
              pad_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Grouped-query scaled dot-product attention over one [T, d] block input
    (already normalized by the caller). Query head i uses key/value group
    floor(i / (heads / kv_heads))."""
    seq_len = hidden.data.shape[0]
    if seq_len > cfg.max_seq_len:
        raise ValueError("sequence longer than max_seq_len")
    p = f"layer.{layer}.attn"
    q = T.matmul(hidden, params[f"{p}.wq"])
    k = T.matmul(hidden, params[f"{p}.wk"])
    v = T.matmul(hidden, params[f"{p}.wv"])

    hd = cfg.head_dim
    positions = list(range(seq_len))
    mask = _mask_matrix(seq_len, mode, pad_mask)
    group_size = cfg.heads // cfg.kv_heads
    scale = 1.0 / np.sqrt(hd)

    head_outputs = []
    for h in range(cfg.heads):
        g = h // group_size
        qh = T.rope_apply(T.slice_cols(q, h * hd, (h + 1) * hd), positions,
                          cfg.rope_theta)
        kh = T.rope_apply(T.slice_cols(k, g * hd, (g + 1) * hd), positions,
                          cfg.rope_theta)
        vh = T.slice_cols(v, g * hd, (g + 1) * hd)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), scale)
        weights = T.softmax(T.add_const(scores, mask), axis=-1)
        head_outputs.append(T.matmul(weights, vh))
    return T.matmul(T.concat_cols(head_outputs), params[f"{p}.wo"])


def _ffn(hidden: Tensor, params: Parameters, layer: int) -> Tensor:
    p = f"layer.{layer}.ffn"
    gate = T.matmul(hidden, params[f"{p}.w_gate"])
    up = T.matmul(hidden, params[f"{p}.w_up"])
    return T.matmul(T.swiglu(gate, up), params[f"{p}.w_down"])


def forward(params: Parameters, cfg: ModelConfig, tokens: Sequence[int],
            mode: AttentionMode,
            pad_mask: Optional[Sequence[bool]] = None) -> Tuple[Tensor, Tensor]:
    """Run the model, returning (final hidden states [T, d], logits [T, V])."""
    tokens = list(tokens)
    if len(tokens) > cfg.max_seq_len:
        raise ValueError("sequence longer than max_seq_len")
    if any(t < 0 or t >= cfg.vocab_size for t in tokens):
        raise ValueError("token id out of range")

    x = T.gather_rows(params["embed"], tokens)
    for i in range(cfg.layers):
        normed = T.rms_norm(x, params[f"layer.{i}.attn_norm"], cfg.rmsnorm_eps)
        x = T.add(x, attention(normed, params, i, cfg, mode, pad_mask))
        normed = T.rms_norm(x, params[f"layer.{i}.ffn_norm"], cfg.rmsnorm_eps)
        x = T.add(x, _ffn(normed, params, i))
    hidden = T.rms_norm(x, params["final_norm"], cfg.rmsnorm_eps)
    head = params["embed"] if cfg.tie_embeddings else params["head"]
    logits = T.matmul(hidden, T.transpose(head) if cfg.tie_embeddings else head)
    return hidden, logits
