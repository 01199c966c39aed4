"""Reference-based generation metrics: multi-reference corpus BLEU, NIST
(information-weighted n-gram matches), n-gram entropy, and average length.

Classic unsmoothed definitions; a zero-match order drives BLEU to zero
with a warning instead of a smoothed value.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import DialogueSample, Vocab, decode_tokens, encode_dialogue, normalize_sample, tokenize
from .generation import DecodeConfig, decode_reply

logger = logging.getLogger(__name__)


@dataclass
class EvalCase:
    hypothesis: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.hypothesis or not self.references or any(not r for r in self.references):
            raise ValueError("hypothesis and references must be nonempty after tokenization")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(cases: list[EvalCase], n: int = 4) -> float:
    """Corpus BLEU: clipped precisions over orders 1..n, geometric mean,
    closest-reference-length brevity penalty."""
    matches = [0] * n
    totals = [0] * n
    hyp_len = 0
    ref_len = 0
    for case in cases:
        h = case.hypothesis
        hyp_len += len(h)
        closest = min(case.references, key=lambda r: (abs(len(r) - len(h)), len(r)))
        ref_len += len(closest)
        for order in range(1, n + 1):
            hc = _ngrams(h, order)
            if not hc:
                continue
            clip = Counter()
            for r in case.references:
                rc = _ngrams(r, order)
                for g in hc:
                    clip[g] = max(clip[g], rc.get(g, 0))
            matches[order - 1] += sum(min(c, clip[g]) for g, c in hc.items())
            totals[order - 1] += sum(hc.values())
    if totals[n - 1] == 0:
        logger.warning("BLEU-%d: no hypothesis long enough for order %d", n, n)
        return 0.0
    if any(m == 0 for m in matches):
        logger.warning("BLEU-%d: an n-gram order has zero matches; score is 0", n)
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return bp * math.exp(log_prec)


_NIST_BETA = -math.log(2.0) / (math.log(1.5) ** 2)  # brevity factor 0.5 at ratio 2/3


def nist_n(cases: list[EvalCase], n: int = 4) -> float:
    """NIST (Doddington): matched n-grams weighted by information gain
    computed over the pooled reference corpus."""
    # reference-corpus counts for the information weights
    counts: Counter = Counter()
    total_ref_words = 0
    for case in cases:
        for r in case.references:
            total_ref_words += len(r)
            for order in range(1, n + 1):
                counts.update(_ngrams(r, order))

    def info(gram: tuple) -> float:
        denom = counts.get(gram, 0)
        if denom == 0:
            return 0.0
        numer = counts.get(gram[:-1], 0) if len(gram) > 1 else total_ref_words
        if numer == 0:
            return 0.0
        return math.log2(numer / denom)

    score = 0.0
    hyp_len = 0
    ref_len_sum = 0.0
    info_sums = [0.0] * n
    hyp_counts = [0] * n
    for case in cases:
        h = case.hypothesis
        hyp_len += len(h)
        ref_len_sum += sum(len(r) for r in case.references) / len(case.references)
        for order in range(1, n + 1):
            hc = _ngrams(h, order)
            clip = Counter()
            for r in case.references:
                rc = _ngrams(r, order)
                for g in hc:
                    clip[g] = max(clip[g], rc.get(g, 0))
            for g, c in hc.items():
                info_sums[order - 1] += min(c, clip[g]) * info(g)
            hyp_counts[order - 1] += sum(hc.values())

    for order in range(n):
        if hyp_counts[order]:
            score += info_sums[order] / hyp_counts[order]
    ratio = min(hyp_len / ref_len_sum, 1.0) if ref_len_sum > 0 else 1.0
    brevity = math.exp(_NIST_BETA * math.log(ratio) ** 2) if ratio > 0 else 0.0
    return score * brevity


def entropy_n(hypotheses: list[list[str]], n: int = 1) -> float:
    """Natural-log entropy of the pooled order-n gram distribution."""
    pooled: Counter = Counter()
    for h in hypotheses:
        pooled.update(_ngrams(h, n))
    total = sum(pooled.values())
    if total == 0:
        return 0.0
    return -sum((c / total) * math.log(c / total) for c in pooled.values())


def avg_len(hypotheses: list[list[str]]) -> float:
    if not hypotheses:
        raise ValueError("avg_len of an empty set is undefined")
    return float(np.mean([len(h) for h in hypotheses]))


# ---------------------------------------------------------------------------
# test-set evaluation


def load_testset(path) -> list[dict]:
    """Line-delimited JSON: {"context": [turns...], "references": [str, ...]}.

    Context turns are either strings (speakers alternate from "A") or
    {"speaker": "A"|"B", "text": str} objects.
    """
    cases = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            turns = []
            for i, t in enumerate(obj["context"]):
                if isinstance(t, str):
                    turns.append(("A" if i % 2 == 0 else "B", t))
                else:
                    turns.append((t["speaker"], t["text"]))
            cases.append({"context": turns, "references": list(obj["references"])})
    if not cases:
        raise ValueError(f"testset {path} is empty")
    return cases


def evaluate_testset(
    params,
    model_cfg,
    vocab: Vocab,
    testset: list[dict],
    decode_cfg: DecodeConfig | None = None,
) -> dict:
    """Decode each context and compute the metric table row."""
    decode_cfg = decode_cfg or DecodeConfig()
    if not testset:
        raise ValueError("empty testset")
    eval_cases = []
    hyps = []
    for case in testset:
        sample = normalize_sample(case["context"])
        bot_segment = 1 if sample.utterances[-1][0] == "A" else 0
        prefix = encode_dialogue(
            sample, vocab, model_cfg.max_positions - decode_cfg.max_new_tokens - 1
        )
        reply_ids = decode_reply(prefix, params, model_cfg, decode_cfg, bot_segment=bot_segment)
        hyp = tokenize(decode_tokens(reply_ids, vocab)) or ["<unk>"]
        refs = [tokenize(r) or ["<unk>"] for r in case["references"]]
        hyps.append(hyp)
        eval_cases.append(EvalCase(hyp, refs))
    return {
        "nist_2": nist_n(eval_cases, 2),
        "nist_4": nist_n(eval_cases, 4),
        "bleu_2": bleu_n(eval_cases, 2),
        "bleu_4": bleu_n(eval_cases, 4),
        "entropy": entropy_n(hyps, 1),
        "avg_len": avg_len(hyps),
        "cases": len(eval_cases),
    }


def format_metric_table(metrics: dict) -> str:
    header = f"{'NIST-2':>8} {'NIST-4':>8} {'BLEU-2':>8} {'BLEU-4':>8} {'Entropy':>8} {'Avg Len':>8}"
    row = (
        f"{metrics['nist_2']:>8.4f} {metrics['nist_4']:>8.4f} "
        f"{metrics['bleu_2']:>8.4f} {metrics['bleu_4']:>8.4f} "
        f"{metrics['entropy']:>8.4f} {metrics['avg_len']:>8.2f}"
    )
    return header + "\n" + row
