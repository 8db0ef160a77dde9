"""Configurable encoder-decoder transformer.

Residual placement (PostNorm/PreNorm), the normalization variant, FixNorm,
initialization and weight tying are all chosen through :class:`ModelConfig`.
Activations are (batch, time, d_model) tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, PAD_ID, smoothed_targets
from .init import InitScheme, init_embeddings, small_init_attention, xavier_normal
from .norms import NormSpec, apply_norm, cosine_logits, fix_norm_rows, init_norm_params
from .tensor import ParameterSet, Tensor

SITES = ("enc_self_att", "enc_ffn", "dec_self_att", "dec_enc_att", "dec_ffn",
         "enc_final", "dec_final", "output_layer")
RESIDUALS = ("PostNorm", "PreNorm")


@dataclass(frozen=True)
class SublayerId:
    site: str
    layer_index: int

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown sublayer site {self.site!r}")

    def sort_key(self) -> tuple[int, int]:
        return SITES.index(self.site), self.layer_index


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 0  # 0 means 4 * d_model
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    word_dropout: float = 0.1
    label_smoothing: float = 0.1
    residual: str = "PreNorm"
    norm: NormSpec = field(default_factory=NormSpec)
    fix_norm: bool = False
    init: InitScheme = field(default_factory=InitScheme)
    tie_embeddings: bool = True
    max_len: int = 256

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0 or self.max_len < 1:
            raise ValueError("layer counts must be >= 0 and max_len >= 1")
        for name in ("dropout", "word_dropout", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.residual not in RESIDUALS:
            raise ValueError(f"residual must be one of {RESIDUALS}, got {self.residual!r}")
        if self.d_ff < 0:
            raise ValueError("d_ff must be >= 0")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def g0(self) -> float:
        return self.init.g_init or math.sqrt(self.d_model)

    @property
    def cosine_output(self) -> bool:
        return self.fix_norm and self.norm.variant == "ScaleNorm"


# ---------------------------------------------------------------- building blocks

def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal encodings; even columns sin, odd columns cos."""
    pos = np.arange(length)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)[:, : d // 2]
    return pe


def residual_unit(x: Tensor, F: Callable[[Tensor], Tensor], placement: str,
                  norm: Callable[[Tensor], Tensor], dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """PostNorm: ``norm(x + drop(F(x)))``; PreNorm: ``x + drop(F(norm(x)))``."""
    if placement == "PostNorm":
        return norm(x + T.dropout(F(x), dropout, rng))
    if placement == "PreNorm":
        return x + T.dropout(F(norm(x)), dropout, rng)
    raise ValueError(f"unknown residual placement {placement!r}")


def multi_head_attention(q: Tensor, kv: Tensor, mask: np.ndarray | None,
                         params: Mapping[str, Tensor], n_heads: int,
                         dropout: float = 0.0, rng: np.random.Generator | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q`` is (B, Tq, d), ``kv`` is (B, Tk, d) and ``mask`` broadcasts to
    (B, Tq, Tk) with True meaning "may attend".
    """
    q, kv = T.as_tensor(q), T.as_tensor(kv)
    B, Tq, d = q.shape
    Tk = kv.shape[1]
    if kv.shape[0] != B or kv.shape[2] != d:
        raise T.ShapeError(f"attention: query {q.shape} vs key/value {kv.shape}")
    if d % n_heads:
        raise ValueError(f"attention: d={d} not divisible by n_heads={n_heads}")
    dk = d // n_heads
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (B, Tq, Tk))
        if not mask.any(axis=-1).all():
            raise ValueError("attention: a query row has every key masked")

    def heads(x: Tensor, W: str, b: str, n: int) -> Tensor:
        y = T.linear(x, params[W], params[b])
        return T.transpose(T.reshape(y, (B, n, n_heads, dk)), (0, 2, 1, 3))

    Q = heads(q, "Wq", "bq", Tq)
    K = heads(kv, "Wk", "bk", Tk)
    Vh = heads(kv, "Wv", "bv", Tk)
    scores = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(dk))
    if mask is not None:
        scores = T.masked_fill(scores, ~mask[:, None, :, :], -np.inf)
    w = T.softmax(scores, axis=-1)
    ctx = T.matmul(T.dropout(w, dropout, rng), Vh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    out = T.linear(ctx, params["Wo"], params["bo"])
    return (out, w.data) if return_weights else out


def feed_forward(x: Tensor, params: Mapping[str, Tensor], dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    h = T.relu(T.linear(x, params["W1"], params["b1"]))
    return T.linear(T.dropout(h, dropout, rng), params["W2"], params["b2"])


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), max(width, 1)), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class _Scope(Mapping):
    """Read-only view of the parameters under one dotted prefix."""

    def __init__(self, params: ParameterSet, prefix: str):
        self._p, self._pre = params, prefix + "."

    def __getitem__(self, k):
        return self._p[self._pre + k]

    def __iter__(self):
        n = len(self._pre)
        return (k[n:] for k in self._p if k.startswith(self._pre))

    def __len__(self):
        return sum(1 for _ in self)


class Transformer:
    def __init__(self, config: ModelConfig, vocab_size: int,
                 target_mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None,
                 params: ParameterSet | None = None):
        self.config = config
        self.vocab_size = vocab_size
        if target_mask is None:
            target_mask = np.ones(vocab_size, dtype=bool)
            target_mask[[PAD_ID, BOS_ID]] = False
        self.target_mask = np.asarray(target_mask, dtype=bool)
        if self.target_mask.shape != (vocab_size,):
            raise ValueError("target_mask must have one entry per vocabulary id")
        self._pe = positional_encoding(config.max_len, config.d_model)
        self.params = params if params is not None else self._init_params(
            rng if rng is not None else np.random.default_rng(0))

    # ------------------------------------------------------------ parameters

    def _init_params(self, rng: np.random.Generator) -> ParameterSet:
        c, d, V = self.config, self.config.d_model, self.vocab_size
        p: dict[str, Tensor] = {}
        emb_mode = c.init.embedding_init
        if emb_mode == "auto":
            emb_mode = "uniform_pm_0_01" if c.fix_norm else "gaussian_inv_sqrt_d"

        def leaf(a):
            return Tensor(a, requires_grad=True)

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                if c.init.attention_init == "small_init":
                    p[f"{prefix}.W{w}"] = leaf(small_init_attention(d, rng))
                else:
                    p[f"{prefix}.W{w}"] = leaf(xavier_normal(d, d, rng))
                p[f"{prefix}.b{w}"] = leaf(np.zeros(d))

        def ffn(prefix):
            p[f"{prefix}.W1"] = leaf(xavier_normal(d, c.ff_dim, rng))
            p[f"{prefix}.b1"] = leaf(np.zeros(c.ff_dim))
            p[f"{prefix}.W2"] = leaf(xavier_normal(c.ff_dim, d, rng))
            p[f"{prefix}.b2"] = leaf(np.zeros(d))

        def norm(prefix):
            for role, t in init_norm_params(c.norm, d, c.g0).items():
                p[f"{prefix}.{role}"] = t

        if c.tie_embeddings:
            p["embed.E"] = leaf(init_embeddings(emb_mode, V, d, rng))
        else:
            p["embed.src"] = leaf(init_embeddings(emb_mode, V, d, rng))
            p["embed.tgt"] = leaf(init_embeddings(emb_mode, V, d, rng))
            p["output.W"] = leaf(init_embeddings(emb_mode, V, d, rng))
        for i in range(c.n_enc_layers):
            attn(f"encoder.layer{i}.self_attn")
            norm(f"encoder.layer{i}.self_attn_norm")
            ffn(f"encoder.layer{i}.ffn")
            norm(f"encoder.layer{i}.ffn_norm")
        for i in range(c.n_dec_layers):
            attn(f"decoder.layer{i}.self_attn")
            norm(f"decoder.layer{i}.self_attn_norm")
            attn(f"decoder.layer{i}.enc_attn")
            norm(f"decoder.layer{i}.enc_attn_norm")
            ffn(f"decoder.layer{i}.ffn")
            norm(f"decoder.layer{i}.ffn_norm")
        if c.residual == "PreNorm":
            norm("encoder.final_norm")
            norm("decoder.final_norm")
        if c.cosine_output:
            # the output scale is always learned, even when sublayer g's are fixed
            p["output.g"] = leaf(np.array(c.g0))
        return ParameterSet(p)

    def norm_sites(self) -> list[tuple[SublayerId, str]]:
        """Every normalization site with its parameter prefix, in (site, layer) order."""
        c = self.config
        sites = []
        for i in range(c.n_enc_layers):
            sites += [(SublayerId("enc_self_att", i), f"encoder.layer{i}.self_attn_norm"),
                      (SublayerId("enc_ffn", i), f"encoder.layer{i}.ffn_norm")]
        for i in range(c.n_dec_layers):
            sites += [(SublayerId("dec_self_att", i), f"decoder.layer{i}.self_attn_norm"),
                      (SublayerId("dec_enc_att", i), f"decoder.layer{i}.enc_attn_norm"),
                      (SublayerId("dec_ffn", i), f"decoder.layer{i}.ffn_norm")]
        if c.residual == "PreNorm":
            sites += [(SublayerId("enc_final", c.n_enc_layers), "encoder.final_norm"),
                      (SublayerId("dec_final", c.n_dec_layers), "decoder.final_norm")]
        if c.cosine_output:
            sites.append((SublayerId("output_layer", c.n_dec_layers), "output"))
        return sorted(sites, key=lambda s: s[0].sort_key())

    def num_parameters(self) -> int:
        return self.params.num_elements()

    def scope(self, prefix: str) -> Mapping[str, Tensor]:
        return _Scope(self.params, prefix)

    def _norm(self, prefix: str) -> Callable[[Tensor], Tensor]:
        spec, scope = self.config.norm, self.scope(prefix)
        return lambda x: apply_norm(spec, scope, x)

    # ------------------------------------------------------------ forward

    def _table(self, side: str) -> Tensor:
        c = self.config
        if c.tie_embeddings:
            E = self.params["embed.E"]
        else:
            E = self.params[{"src": "embed.src", "tgt": "embed.tgt", "out": "output.W"}[side]]
        return fix_norm_rows(E, c.norm.eps) if c.fix_norm else E

    def embed(self, tokens: np.ndarray, side: str = "src",
              rng: np.random.Generator | None = None) -> Tensor:
        """Gather (optionally FixNorm'd) rows, scale by sqrt(d), add positions, dropout."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n = tokens.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.config.max_len}")
        d = self.config.d_model
        x = T.scale(T.embed_lookup(self._table(side), tokens), math.sqrt(d))
        x = x + self._pe[:n]
        return T.dropout(x, self.config.dropout, rng)

    def encode_embedded(self, x: Tensor, src_mask: np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> Tensor:
        c = self.config
        mask = None if src_mask is None else np.asarray(src_mask, dtype=bool)[:, None, :]
        for i in range(c.n_enc_layers):
            pre = f"encoder.layer{i}"
            sa = self.scope(pre + ".self_attn")
            x = residual_unit(
                x, lambda h: multi_head_attention(h, h, mask, sa, c.n_heads, c.dropout, rng),
                c.residual, self._norm(pre + ".self_attn_norm"), c.dropout, rng)
            ff = self.scope(pre + ".ffn")
            x = residual_unit(x, lambda h: feed_forward(h, ff, c.dropout, rng),
                              c.residual, self._norm(pre + ".ffn_norm"), c.dropout, rng)
        if c.residual == "PreNorm":
            x = self._norm("encoder.final_norm")(x)
        return x

    def encode(self, src: np.ndarray, src_mask: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src_mask is None:
            src_mask = src != PAD_ID
        return self.encode_embedded(self.embed(src, "src", rng), src_mask, rng)

    def decode_embedded(self, y: Tensor, memory: Tensor, src_mask: np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> Tensor:
        c = self.config
        self_mask = causal_mask(y.shape[1])[None]
        mem_mask = None if src_mask is None else np.asarray(src_mask, dtype=bool)[:, None, :]
        for i in range(c.n_dec_layers):
            pre = f"decoder.layer{i}"
            sa, ea, ff = (self.scope(pre + s) for s in (".self_attn", ".enc_attn", ".ffn"))
            y = residual_unit(
                y, lambda h: multi_head_attention(h, h, self_mask, sa, c.n_heads, c.dropout, rng),
                c.residual, self._norm(pre + ".self_attn_norm"), c.dropout, rng)
            y = residual_unit(
                y, lambda h: multi_head_attention(h, memory, mem_mask, ea, c.n_heads, c.dropout, rng),
                c.residual, self._norm(pre + ".enc_attn_norm"), c.dropout, rng)
            y = residual_unit(y, lambda h: feed_forward(h, ff, c.dropout, rng),
                              c.residual, self._norm(pre + ".ffn_norm"), c.dropout, rng)
        if c.residual == "PreNorm":
            y = self._norm("decoder.final_norm")(y)
        return y

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        return self.decode_embedded(self.embed(tgt_in, "tgt", rng), memory, src_mask, rng)

    def output_logits(self, h: Tensor) -> Tensor:
        """Tied (or cosine, for FixNorm+ScaleNorm) projection with non-target ids at -inf."""
        c = self.config
        if c.cosine_output:
            E = self.params["embed.E"] if c.tie_embeddings else self.params["output.W"]
            logits = cosine_logits(h, E, self.params["output.g"], c.norm.eps)
        else:
            logits = T.matmul(h, T.transpose(self._table("out")))
        return T.masked_fill(logits, ~self.target_mask, -np.inf)

    def loss(self, src: np.ndarray, tgt_in: np.ndarray, tgt_out: np.ndarray,
             rng: np.random.Generator | None = None,
             label_smoothing: float | None = None) -> tuple[Tensor, int]:
        """Token-summed label-smoothed cross-entropy and the number of scored tokens."""
        eps = self.config.label_smoothing if label_smoothing is None else label_smoothing
        src = np.asarray(src, dtype=np.int64)
        src_mask = src != PAD_ID
        memory = self.encode(src, src_mask, rng)
        h = self.decode(tgt_in, memory, src_mask, rng)
        logits = self.output_logits(h)
        labels = np.asarray(tgt_out, dtype=np.int64).reshape(-1)
        q = smoothed_targets(labels, eps, self.target_mask)
        flat = T.reshape(logits, (-1, self.vocab_size))
        return T.soft_cross_entropy(flat, q), int((labels != PAD_ID).sum())

    def greedy_decode(self, src_tokens: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
        """Append the argmax token until EOS or ``max_len`` tokens; EOS is not returned."""
        if not len(src_tokens):
            return []
        max_len = min(max_len, self.config.max_len - 1)
        with T.no_grad():
            src = pad_batch(src_tokens)
            src_mask = src != PAD_ID
            memory = self.encode(src, src_mask)
            B = src.shape[0]
            ys = np.full((B, 1), BOS_ID, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                h = self.decode(ys, memory, src_mask)
                last = T.Tensor(h.data[:, -1:, :])
                nxt = self.output_logits(last).data[:, 0, :].argmax(axis=-1)
                nxt = np.where(done, PAD_ID, nxt)
                ys = np.concatenate([ys, nxt[:, None]], axis=1)
                done |= nxt == EOS_ID
                if done.all():
                    break
        out = []
        for row in ys[:, 1:]:
            seq = []
            for tok in row:
                if tok in (EOS_ID, PAD_ID):
                    break
                seq.append(int(tok))
            out.append(seq)
        return out

    def with_config(self, **changes) -> Transformer:
        return Transformer(replace(self.config, **changes), self.vocab_size,
                           self.target_mask, params=self.params)
