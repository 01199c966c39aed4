"""Influence-guided decoding: predict the next-utterance influence from the
context history, hold it fixed, and decode greedily or with beam search.

The beam/greedy cores run against a step-scorer interface (log-probs of the
next token given the tokens generated so far), so tiny hand-set scorers can
be checked against exhaustive enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import (
    CTX,
    PAD,
    SPEAKER1,
    SPEAKER2,
    DialogueSample,
    EncodedDialogue,
    Vocab,
    decode_tokens,
    encode_dialogue,
    normalize_sample,
)
from .flow_score import flow_score, turn_similarity
from .model import (
    ModelConfig,
    extract_contexts,
    flow_predict,
    forward,
    generator_logits,
    transformer_stack,
    embed_inputs,
)
from .tensor import Tensor
from .trajectory import trajectory_points

BANNED_GENERATION_IDS = (PAD, SPEAKER1, SPEAKER2)


@dataclass
class DecodeConfig:
    strategy: str = "greedy"  # "greedy" | "beam"
    beam_width: int = 5
    max_new_tokens: int = 24
    length_alpha: float = 0.7

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool = False

    def normalized_score(self, alpha: float) -> float:
        return self.log_prob / (max(len(self.tokens), 1) ** alpha)


def predict_next_influence(
    prefix: EncodedDialogue, params: dict[str, Tensor], cfg: ModelConfig
) -> np.ndarray:
    """Predicted influence of the utterance about to be decoded.

    The prefix must end with a [C] marker; the flow module runs over every
    context row and the prediction from the final row, minus that row, is
    the influence vector (held fixed for the whole utterance).
    """
    if int(prefix.token_ids[-1]) != CTX:
        raise ValueError("decode prefix must end with a [C] marker")
    x = embed_inputs(prefix, params, cfg, train=False)
    hidden = transformer_stack(x, params, cfg, train=False)
    contexts = extract_contexts(hidden, prefix.context_positions)
    pred = flow_predict(contexts, params, cfg, train=False)
    return (pred.data[-1] - contexts.data[-1]).copy()


class ModelStepScorer:
    """Log-probs of the next token given the prefix and generated tokens.

    Each call recomputes the transformer over prefix + generated tokens, so
    the decoding state is the full-recompute state by construction.
    """

    def __init__(
        self,
        prefix: EncodedDialogue,
        influence_pred: np.ndarray,
        params: dict[str, Tensor],
        cfg: ModelConfig,
        bot_segment: int,
    ):
        self.prefix = prefix
        self.params = params
        self.cfg = cfg
        self.bot_segment = bot_segment
        self.influence = Tensor(
            influence_pred.reshape(1, -1).astype(cfg.dtype), requires_grad=False
        )

    def hidden_states(self, generated: list[int]) -> np.ndarray:
        enc = self._extend(generated)
        x = embed_inputs(enc, self.params, self.cfg, train=False)
        return transformer_stack(x, self.params, self.cfg, train=False).data

    def _extend(self, generated: list[int]) -> EncodedDialogue:
        n_new = len(generated)
        token_ids = np.concatenate([self.prefix.token_ids, np.asarray(generated, dtype=np.int64)])
        segment_ids = np.concatenate(
            [self.prefix.segment_ids, np.full(n_new, self.bot_segment, dtype=np.int64)]
        )
        length = token_ids.shape[0]
        if length > self.cfg.max_positions:
            raise ValueError("decoding exceeded max_positions")
        return EncodedDialogue(
            token_ids=token_ids,
            segment_ids=segment_ids,
            position_ids=np.arange(length, dtype=np.int64),
            context_positions=self.prefix.context_positions,
            utterance_spans=self.prefix.utterance_spans,
            loss_mask=np.zeros(length, dtype=bool),
            speakers=self.prefix.speakers,
        )

    def log_probs(self, generated: list[int]) -> np.ndarray:
        hidden = self.hidden_states(generated)
        h_prev = Tensor(hidden[-1:].astype(self.cfg.dtype))
        logits = generator_logits(self.influence, h_prev, self.params).data[0]
        logits = logits.astype(np.float64).copy()
        logits[list(BANNED_GENERATION_IDS)] = -np.inf
        shifted = logits - logits.max()
        return shifted - np.log(np.sum(np.exp(shifted)))


def greedy_search(
    log_probs: Callable[[list[int]], np.ndarray],
    max_new_tokens: int,
    stop_id: int = CTX,
) -> Hypothesis:
    """Argmax decoding; ties resolve to the lowest token id."""
    tokens: list[int] = []
    total = 0.0
    for _ in range(max_new_tokens):
        lp = log_probs(tokens)
        tok = int(np.argmax(lp))
        tokens.append(tok)
        total += float(lp[tok])
        if tok == stop_id:
            return Hypothesis(tokens, total, finished=True)
    return Hypothesis(tokens, total, finished=True)


def beam_search(
    log_probs: Callable[[list[int]], np.ndarray],
    width: int,
    max_new_tokens: int,
    length_alpha: float = 0.7,
    stop_id: int = CTX,
) -> list[Hypothesis]:
    """Standard beam search with a finished pool; deterministic tie-breaks.

    Candidates sort by score descending, then token-id sequence ascending.
    Returns hypotheses ranked by log-prob / length^alpha.
    """
    live = [Hypothesis([], 0.0)]
    done: list[Hypothesis] = []
    for _ in range(max_new_tokens):
        candidates: list[Hypothesis] = []
        for hyp in live:
            lp = log_probs(hyp.tokens)
            order = np.lexsort((np.arange(lp.size), -lp))[:width]
            for tok in order:
                if not np.isfinite(lp[tok]):
                    continue
                candidates.append(
                    Hypothesis(hyp.tokens + [int(tok)], hyp.log_prob + float(lp[tok]))
                )
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        # the top-width candidates claim the beam slots; a finished candidate
        # retires its slot, so width-1 reduces exactly to greedy search
        live = []
        for cand in candidates[:width]:
            if cand.tokens[-1] == stop_id:
                cand.finished = True
                done.append(cand)
            else:
                live.append(cand)
        if not live:
            break
    for hyp in live:
        hyp.finished = True
        done.append(hyp)
    done.sort(key=lambda h: (-h.normalized_score(length_alpha), h.tokens))
    return done


def _strip_stop(tokens: list[int], stop_id: int = CTX) -> list[int]:
    return [t for t in tokens if t != stop_id]


def greedy_decode(
    prefix: EncodedDialogue,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    decode_cfg: DecodeConfig,
    bot_segment: int = 1,
) -> list[int]:
    """Decode one utterance greedily; returns content tokens (no stop marker)."""
    influence = predict_next_influence(prefix, params, cfg)
    scorer = ModelStepScorer(prefix, influence, params, cfg, bot_segment)
    budget = min(decode_cfg.max_new_tokens, cfg.max_positions - prefix.length)
    hyp = greedy_search(scorer.log_probs, budget)
    return _strip_stop(hyp.tokens)


def beam_decode(
    prefix: EncodedDialogue,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    decode_cfg: DecodeConfig,
    bot_segment: int = 1,
) -> list[Hypothesis]:
    influence = predict_next_influence(prefix, params, cfg)
    scorer = ModelStepScorer(prefix, influence, params, cfg, bot_segment)
    budget = min(decode_cfg.max_new_tokens, cfg.max_positions - prefix.length)
    return beam_search(
        scorer.log_probs, decode_cfg.beam_width, budget, decode_cfg.length_alpha
    )


def decode_reply(
    prefix: EncodedDialogue,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    decode_cfg: DecodeConfig,
    bot_segment: int = 1,
) -> list[int]:
    if decode_cfg.strategy == "beam":
        ranked = beam_decode(prefix, params, cfg, decode_cfg, bot_segment)
        return _strip_stop(ranked[0].tokens) if ranked else []
    return greedy_decode(prefix, params, cfg, decode_cfg, bot_segment)


# ---------------------------------------------------------------------------
# interactive chat


@dataclass
class FlowTurnDiagnostics:
    turn_index: int
    similarity: float
    flow_running: float
    predicted_norm: float
    realized_norm: float
    trajectory: list[dict]
    truncated: bool = False


@dataclass
class ChatSession:
    vocab: Vocab
    model_cfg: ModelConfig
    decode_cfg: DecodeConfig = field(default_factory=DecodeConfig)
    utterances: list[tuple[str, str]] = field(default_factory=list)  # ("A"/"B", text)
    similarities: list[float] = field(default_factory=list)

    USER, BOT = "A", "B"


def chat_step(
    session: ChatSession,
    user_text: str,
    params: dict[str, Tensor],
) -> tuple[str, FlowTurnDiagnostics]:
    """One exchange: append the user turn, decode a reply, score its influence."""
    cfg = session.model_cfg
    session.utterances.append((ChatSession.USER, user_text))

    sample = normalize_sample(session.utterances)
    prefix = encode_dialogue(sample, session.vocab, cfg.max_positions - session.decode_cfg.max_new_tokens - 1)
    truncated = prefix.n_utterances < sample.n_utterances

    influence_pred = predict_next_influence(prefix, params, cfg)
    reply_ids = decode_reply(prefix, params, cfg, session.decode_cfg, bot_segment=1)
    reply_text = decode_tokens(reply_ids, session.vocab)
    session.utterances.append((ChatSession.BOT, reply_text if reply_text else "<unk>"))

    full = encode_dialogue(
        normalize_sample(session.utterances), session.vocab, cfg.max_positions
    )
    out = forward(full, params, cfg, train=False)
    realized = out.influences.data[-1]
    s = turn_similarity(influence_pred, realized)
    session.similarities.append(s)
    running, _ = flow_score(session.similarities)

    kept = full.n_utterances
    speakers = [sp for sp, _ in normalize_sample(session.utterances).utterances][-kept:]
    diag = FlowTurnDiagnostics(
        turn_index=len(session.similarities),
        similarity=s,
        flow_running=running,
        predicted_norm=float(np.linalg.norm(influence_pred)),
        realized_norm=float(np.linalg.norm(realized)),
        trajectory=trajectory_points(out.contexts.data, speakers),
        truncated=truncated,
    )
    return session.utterances[-1][1], diag
