"""Dialogue network: embeddings, pre-norm transformer stack, context
extraction, the causal Flow module over contexts, and the two output heads.

The forward pass of one dialogue produces hidden states H, context vectors
C (one per [C] marker), predicted next-contexts C', real and predicted
influences (consecutive context differences), generator logits conditioned
on [predicted influence; previous hidden state], and bag-of-words logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import EncodedDialogue
from .tensor import Tensor


@dataclass
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    vocab_size: int = 64
    max_positions: int = 128
    max_utterances: int = 32
    flow_layers: int = 1
    dropout: float = 0.1
    precision: str = "float32"  # "float32" | "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.flow_layers < 1:
            raise ValueError("flow_layers must be >= 1")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must cover the 5 reserved ids plus content")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "max_utterances": self.max_utterances,
            "flow_layers": self.flow_layers,
            "dropout": self.dropout,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _block_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        "ln1.g": (d,),
        "ln1.b": (d,),
        "attn.wq": (d, d),
        "attn.bq": (d,),
        "attn.wk": (d, d),
        "attn.bk": (d,),
        "attn.wv": (d, d),
        "attn.bv": (d,),
        "attn.wo": (d, d),
        "attn.bo": (d,),
        "ln2.g": (d,),
        "ln2.b": (d,),
        "ffn.w1": (d, f),
        "ffn.b1": (f,),
        "ffn.w2": (f, d),
        "ffn.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {
        "tok_emb": (v, d),
        "seg_emb": (2, d),
        "pos_emb": (cfg.max_positions, d),
        "utt_emb": (cfg.max_utterances, d),
    }
    for i in range(cfg.n_layers):
        for k, s in _block_param_shapes(cfg).items():
            shapes[f"layer{i}.{k}"] = s
    for i in range(cfg.flow_layers):
        for k, s in _block_param_shapes(cfg).items():
            shapes[f"flow{i}.{k}"] = s
    shapes.update(
        {
            "lnf.g": (d,),
            "lnf.b": (d,),
            "gen.w1": (2 * d, v),
            "gen.b1": (v,),
            "bow.w2": (d, v),
            "bow.b2": (v,),
        }
    )
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """normal(0, 0.02) weights; zero biases; unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            data = np.zeros(shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True, dtype=cfg.dtype, name=name)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {
        k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()
    }


@dataclass
class ForwardOutput:
    hidden: Tensor  # [L, d]
    contexts: Tensor  # [N+1, d]
    contexts_pred: Tensor  # [N, d]
    influences: Tensor  # [N, d] == contexts[1:] - contexts[:-1]
    influences_pred: Tensor  # [N, d] == contexts_pred - contexts[:-1]
    gen_logits: Tensor  # [L, |V|]; row p predicts the token at position p; row 0 unused
    bow_logits: Tensor  # [N, |V|]
    utterance_of_position: np.ndarray = field(default=None)  # int [L], -1 at position 0


def _causal_mask(n: int, n_heads: int, dtype) -> Tensor:
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -1e9
    return Tensor(np.broadcast_to(m, (n_heads, n, n)).copy())


def _transformer_block(
    x: Tensor,
    prefix: str,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    mask: Tensor,
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    n = x.shape[0]
    p = params

    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = T.add(T.matmul(h, p[f"{prefix}.attn.wq"]), p[f"{prefix}.attn.bq"])
    k = T.add(T.matmul(h, p[f"{prefix}.attn.wk"]), p[f"{prefix}.attn.bk"])
    v = T.add(T.matmul(h, p[f"{prefix}.attn.wv"]), p[f"{prefix}.attn.bv"])
    q = T.transpose(T.reshape(q, (n, nh, dh)), (1, 0, 2))
    k = T.transpose(T.reshape(k, (n, nh, dh)), (1, 0, 2))
    v = T.transpose(T.reshape(v, (n, nh, dh)), (1, 0, 2))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    scores = T.add(scores, mask)
    attn = T.softmax(scores, axis=-1)
    if train:
        attn = T.dropout(attn, cfg.dropout, rng)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d))
    proj = T.add(T.matmul(ctx, p[f"{prefix}.attn.wo"]), p[f"{prefix}.attn.bo"])
    if train:
        proj = T.dropout(proj, cfg.dropout, rng)
    x = T.add(x, proj)

    h2 = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    a = T.gelu(T.add(T.matmul(h2, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
    o = T.add(T.matmul(a, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])
    if train:
        o = T.dropout(o, cfg.dropout, rng)
    return T.add(x, o)


def embed_inputs(
    encoded: EncodedDialogue,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Sum of token, segment, and position embeddings."""
    if encoded.length > cfg.max_positions:
        raise ValueError(
            f"sequence length {encoded.length} exceeds max_positions {cfg.max_positions}"
        )
    if int(encoded.token_ids.max()) >= cfg.vocab_size:
        raise T.IndexLookupError("token id outside embedding table")
    x = T.embedding_lookup(encoded.token_ids, params["tok_emb"])
    x = T.add(x, T.embedding_lookup(encoded.segment_ids, params["seg_emb"]))
    x = T.add(x, T.embedding_lookup(encoded.position_ids, params["pos_emb"]))
    if train:
        x = T.dropout(x, cfg.dropout, rng)
    return x


def transformer_stack(
    x: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm causal stack followed by a final layer norm."""
    n = x.shape[0]
    mask = _causal_mask(n, cfg.n_heads, x.data.dtype)
    for i in range(cfg.n_layers):
        x = _transformer_block(x, f"layer{i}", params, cfg, mask, train, rng)
    return T.layer_norm(x, params["lnf.g"], params["lnf.b"])


def extract_contexts(hidden: Tensor, context_positions: np.ndarray) -> Tensor:
    return T.take_rows(hidden, context_positions)


def flow_predict(
    contexts: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predict the next context from each causal prefix of the context rows.

    Input row j (0-based) is the context before utterance j+1; output row j
    is the predicted context after it.  All predictions come from one causal
    pass.
    """
    k = contexts.shape[0]
    if k > cfg.max_utterances:
        raise ValueError(f"{k} contexts exceed max_utterances {cfg.max_utterances}")
    x = T.add(contexts, T.take_rows(params["utt_emb"], np.arange(k)))
    mask = _causal_mask(k, cfg.n_heads, contexts.data.dtype)
    for i in range(cfg.flow_layers):
        x = _transformer_block(x, f"flow{i}", params, cfg, mask, train, rng)
    return x


def compute_influences(contexts: Tensor, contexts_pred: Tensor) -> tuple[Tensor, Tensor]:
    """Real and predicted influences: consecutive (predicted) context deltas."""
    n1 = contexts.shape[0]
    prev = T.slice_rows(contexts, 0, n1 - 1)
    nxt = T.slice_rows(contexts, 1, n1)
    influences = T.sub(nxt, prev)
    influences_pred = T.sub(contexts_pred, prev)
    return influences, influences_pred


def generator_logits(influence_pred: Tensor, h_prev: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Token logits from [predicted influence ; previous hidden state]."""
    feats = T.concat([influence_pred, h_prev], axis=-1)
    return T.add(T.matmul(feats, params["gen.w1"]), params["gen.b1"])


def bow_logits(influences_pred: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Non-autoregressive bag-of-words logits, one row per utterance."""
    return T.add(T.matmul(influences_pred, params["bow.w2"]), params["bow.b2"])


def utterance_index_of_positions(encoded: EncodedDialogue) -> np.ndarray:
    """Map each position to its utterance index; -1 for the leading [C]."""
    upos = np.full(encoded.length, -1, dtype=np.int64)
    for k, (start, stop) in enumerate(encoded.utterance_spans):
        upos[start:stop] = k
    return upos


def forward(
    encoded: EncodedDialogue,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Full single-dialogue forward pass."""
    if train and rng is None:
        rng = np.random.default_rng(0)
    x = embed_inputs(encoded, params, cfg, train, rng)
    hidden = transformer_stack(x, params, cfg, train, rng)
    contexts = extract_contexts(hidden, encoded.context_positions)
    n1 = contexts.shape[0]
    contexts_pred = flow_predict(T.slice_rows(contexts, 0, n1 - 1), params, cfg, train, rng)
    influences, influences_pred = compute_influences(contexts, contexts_pred)

    upos = utterance_index_of_positions(encoded)
    length = encoded.length
    inf_rows = T.take_rows(influences_pred, upos[1:])
    h_prev = T.slice_rows(hidden, 0, length - 1)
    tail = generator_logits(inf_rows, h_prev, params)
    zero_row = Tensor(np.zeros((1, cfg.vocab_size), dtype=tail.data.dtype))
    gen = T.concat([zero_row, tail], axis=0)

    return ForwardOutput(
        hidden=hidden,
        contexts=contexts,
        contexts_pred=contexts_pred,
        influences=influences,
        influences_pred=influences_pred,
        gen_logits=gen,
        bow_logits=bow_logits(influences_pred, params),
        utterance_of_position=upos,
    )
