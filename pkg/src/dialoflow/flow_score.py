"""Reference-free conversation quality metric plus the correlation harness.

Each bot turn is scored by the similarity between the influence the model
predicted for that turn and the influence the turn actually produced
(cosine times length ratio, in [-1, 1]).  Similarities aggregate into a
perplexity-style dialogue score: 1 is perfect, all-zero similarity gives
exactly 2, lower is better.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    EncodingError,
    Vocab,
    encode_dialogue,
    normalize_sample,
)
from .model import ModelConfig, forward
from .tensor import Tensor
from .training import rgm_terms

logger = logging.getLogger(__name__)

SIM_CLAMP = 1e-6  # keep log2((s+1)/2) finite at s == -1


class ScoringError(ValueError):
    """Raised when a conversation log cannot be scored (e.g. no bot turns)."""


class CorrelationError(ValueError):
    """Raised for degenerate correlation inputs (n < 3 or constant series)."""


@dataclass
class ConversationLog:
    turns: list[dict]  # {"speaker": "human"|"bot", "text": str}
    rating: float | None = None
    bot_id: str | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "ConversationLog":
        turns = []
        for t in obj["turns"]:
            if t.get("speaker") not in ("human", "bot") or not isinstance(t.get("text"), str):
                raise ScoringError(f"malformed turn: {t!r}")
            turns.append({"speaker": t["speaker"], "text": t["text"]})
        rating = obj.get("rating")
        if rating is not None and not math.isfinite(float(rating)):
            raise ScoringError("non-finite rating")
        return cls(turns=turns, rating=rating, bot_id=obj.get("bot_id"))


def load_logs(path) -> list[ConversationLog]:
    logs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                logs.append(ConversationLog.from_json(json.loads(line)))
    return logs


@dataclass
class FlowReport:
    similarities: list[float]
    flow: float
    bot_turn_count: int
    clamped: bool = False
    baseline_perplexity: float | None = None
    skipped_turns: int = 0
    details: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "similarities": self.similarities,
            "flow": self.flow,
            "bot_turn_count": self.bot_turn_count,
            "clamped": self.clamped,
            "baseline_perplexity": self.baseline_perplexity,
            "skipped_turns": self.skipped_turns,
            "turns": self.details,
        }


def turn_similarity(pred: np.ndarray, real: np.ndarray) -> float:
    """Cosine similarity scaled by the norm ratio min/max; in [-1, 1].

    Zero-vector conventions: both zero -> 1 (identical influences), exactly
    one zero -> 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    np_, nr = float(np.linalg.norm(pred)), float(np.linalg.norm(real))
    if np_ == 0.0 and nr == 0.0:
        return 1.0
    if np_ == 0.0 or nr == 0.0:
        return 0.0
    cos = float(pred @ real) / (np_ * nr)
    s = cos * min(np_, nr) / max(np_, nr)
    return max(-1.0, min(1.0, s))


def flow_score(similarities) -> tuple[float, bool]:
    """Perplexity-style aggregate 2^(-mean log2((s+1)/2)); >= 1, lower is better.

    Similarities of exactly -1 are clamped just above -1 (the log would
    diverge); the flag reports whether any clamp fired.
    """
    sims = list(similarities)
    if not sims:
        raise ScoringError("flow score needs at least one scored turn")
    clamped = any(s <= -1.0 for s in sims)
    total = 0.0
    for s in sims:
        s = max(s, -1.0 + SIM_CLAMP)
        total += math.log2((s + 1.0) / 2.0)
    return 2.0 ** (-total / len(sims)), clamped


def _log_to_sample(log: ConversationLog):
    """Map human/bot turns to alternating A/B utterances with bot flags."""
    role_letter = {}
    turns = []
    skipped = 0
    for t in log.turns:
        if not t["text"].strip():
            logger.warning("skipping empty turn in log %s", log.bot_id)
            skipped += 1
            continue
        if t["speaker"] not in role_letter:
            role_letter[t["speaker"]] = "A" if not role_letter else "B"
        turns.append((role_letter[t["speaker"]], t["text"]))
    sample = normalize_sample(turns)
    bot_letter = role_letter.get("bot")
    flags = [sp == bot_letter for sp, _ in sample.utterances]
    return sample, flags, skipped


def score_log(
    log: ConversationLog,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocab,
    with_perplexity: bool = True,
) -> FlowReport:
    """Score one conversation: only bot turns contribute to the metric."""
    sample, bot_flags, skipped = _log_to_sample(log)
    if not any(bot_flags):
        raise ScoringError("conversation has no bot turns to score")
    if sample.n_utterances < 1:
        raise ScoringError("conversation is empty after filtering")
    try:
        encoded = encode_dialogue(sample, vocab, cfg.max_positions)
    except EncodingError as exc:
        raise ScoringError(f"conversation cannot be encoded: {exc}") from exc
    # encoding may have evicted oldest utterances; align flags to the kept tail
    kept = encoded.n_utterances
    bot_flags = bot_flags[-kept:]

    out = forward(encoded, params, cfg, train=False)
    pred = out.influences_pred.data
    real = out.influences.data
    sims = []
    details = []
    for k in range(kept):
        if not bot_flags[k]:
            continue
        s = turn_similarity(pred[k], real[k])
        sims.append(s)
        details.append(
            {
                "utterance": k,
                "s": s,
                "predicted_norm": float(np.linalg.norm(pred[k])),
                "realized_norm": float(np.linalg.norm(real[k])),
            }
        )
    flow, clamped = flow_score(sims)
    ppl = baseline_perplexity_from_forward(out, encoded, bot_flags) if with_perplexity else None
    return FlowReport(
        similarities=sims,
        flow=flow,
        bot_turn_count=len(sims),
        clamped=clamped,
        baseline_perplexity=ppl,
        skipped_turns=skipped,
        details=details,
    )


def baseline_perplexity_from_forward(out, encoded, bot_flags) -> float:
    """Mean over bot utterances of exp(per-token generation NLL)."""
    logp = np.asarray(out.gen_logits.data, dtype=np.float64)
    shifted = logp - logp.max(axis=-1, keepdims=True)
    logsm = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ppls = []
    for k, (start, stop) in enumerate(encoded.utterance_spans):
        if k >= len(bot_flags) or not bot_flags[k]:
            continue
        nll = -np.mean([logsm[p, encoded.token_ids[p]] for p in range(start, stop)])
        ppls.append(math.exp(nll))
    return float(np.mean(ppls)) if ppls else math.nan


def baseline_perplexity(log, params, cfg, vocab) -> float:
    report = score_log(log, params, cfg, vocab, with_perplexity=True)
    return report.baseline_perplexity


# ---------------------------------------------------------------------------
# correlations


def _student_t_sf(t: float, df: int) -> float:
    """Two-sided p-value helper: P(|T| >= t) for Student's t with df dof."""
    x = df / (df + t * t)
    return _reg_incomplete_beta(df / 2.0, 0.5, x)


def _reg_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via Lentz's continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    if x > (a + 1.0) / (a + b + 2.0):
        return 1.0 - _reg_incomplete_beta(b, a, 1.0 - x)
    lbeta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    front = math.exp(a * math.log(x) + b * math.log(1.0 - x) - lbeta) / a

    tiny = 1e-300

    def _clamp(v: float) -> float:
        return v if abs(v) > tiny else tiny

    # Lentz evaluation of 1 / (1 + d1/(1 + d2/(1 + ...)))
    c = 1.0
    d = 1.0 / _clamp(1.0 - (a + b) * x / (a + 1.0))
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2))
        d = 1.0 / _clamp(1.0 + num * d)
        c = _clamp(1.0 + num / c)
        h *= d * c
        num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))
        d = 1.0 / _clamp(1.0 + num * d)
        c = _clamp(1.0 + num / c)
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return front * h


def pearson(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided t-approximation p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        raise CorrelationError(f"need >= 3 paired points, got {n}/{y.size}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise CorrelationError("correlation undefined for constant input")
    xc = x - x.mean()
    yc = y - y.mean()
    r = float((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = abs(r) * math.sqrt((n - 2) / (1.0 - r * r))
    return r, _student_t_sf(t, n - 2)


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks for ties (1-based)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, float]:
    """Spearman rho: Pearson correlation of fractional ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return pearson(_fractional_ranks(x), _fractional_ranks(y))


def chatbot_level_eval(
    logs: list[ConversationLog],
    params: dict[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocab,
) -> dict:
    """Per-bot mean flow score vs mean human rating, correlated across bots.

    Flow score is negated before correlating (lower flow means better).
    """
    by_bot: dict[str, list[ConversationLog]] = {}
    for log in logs:
        by_bot.setdefault(log.bot_id or "unknown", []).append(log)

    rows = []
    for bot_id in sorted(by_bot):
        flows, ratings, ppls = [], [], []
        for log in by_bot[bot_id]:
            report = score_log(log, params, cfg, vocab)
            flows.append(report.flow)
            if report.baseline_perplexity is not None:
                ppls.append(report.baseline_perplexity)
            if log.rating is not None:
                ratings.append(float(log.rating))
        rows.append(
            {
                "bot_id": bot_id,
                "conversations": len(by_bot[bot_id]),
                "mean_flow": float(np.mean(flows)),
                "mean_perplexity": float(np.mean(ppls)) if ppls else None,
                "mean_rating": float(np.mean(ratings)) if ratings else None,
            }
        )

    rated = [r for r in rows if r["mean_rating"] is not None]
    correlations = None
    if len(rated) >= 3:
        neg_flow = [-r["mean_flow"] for r in rated]
        rating = [r["mean_rating"] for r in rated]
        pr, pp = pearson(neg_flow, rating)
        sr, sp = spearman(neg_flow, rating)
        correlations = {
            "pearson": pr,
            "pearson_p": pp,
            "spearman": sr,
            "spearman_p": sp,
            "n_bots": len(rated),
        }
    elif rated:
        raise CorrelationError(f"need >= 3 rated bots for correlations, got {len(rated)}")
    return {"bots": rows, "correlations": correlations}


def format_bot_table(result: dict) -> str:
    lines = [f"{'bot':<16} {'convs':>5} {'flow':>8} {'ppl':>10} {'rating':>7}"]
    for r in result["bots"]:
        ppl = f"{r['mean_perplexity']:.3f}" if r["mean_perplexity"] is not None else "-"
        rating = f"{r['mean_rating']:.3f}" if r["mean_rating"] is not None else "-"
        lines.append(
            f"{r['bot_id']:<16} {r['conversations']:>5} {r['mean_flow']:>8.4f} {ppl:>10} {rating:>7}"
        )
    c = result.get("correlations")
    if c:
        lines.append(
            f"chatbot-level correlation (negated flow vs rating): "
            f"pearson {c['pearson']:.3f} (p={c['pearson_p']:.3g}), "
            f"spearman {c['spearman']:.3f} (p={c['spearman_p']:.3g})"
        )
    return "\n".join(lines)
