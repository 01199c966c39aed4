"""Corpus loading, vocabulary construction, and dialogue encoding.

A dialogue is flattened to  [C] u1 [C] u2 [C] ... uN [C] : one leading
context marker plus one after each utterance, so a dialogue with N
utterances carries N+1 marker positions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

PAD, UNK, CTX, SPEAKER1, SPEAKER2 = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[C]", "[SPEAKER1]", "[SPEAKER2]"]
NUM_RESERVED = len(RESERVED_TOKENS)

_PUNCT_RE = re.compile(r"([!\"#$%&'()*+,\-./:;<=>?@\[\\\]^_`{|}~])")


class CorpusError(ValueError):
    """Raised for unusable corpora (unreadable, empty, or mostly malformed)."""


class EncodingError(ValueError):
    """Raised when a dialogue cannot be encoded within the position budget."""


def tokenize(text: str) -> list[str]:
    """Lowercase, pad punctuation with spaces, split on whitespace."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


@dataclass
class DialogueSample:
    """Ordered speaker turns; speakers strictly alternate after normalization."""

    utterances: list[tuple[str, str]]  # (speaker "A"|"B", text)

    @property
    def n_utterances(self) -> int:
        return len(self.utterances)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, tok: str) -> int:
        return self.token_to_id.get(tok, UNK)

    def encode_text(self, text: str) -> list[int]:
        return [self.encode_token(t) for t in tokenize(text)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh]
        if toks[:NUM_RESERVED] != RESERVED_TOKENS:
            raise CorpusError(f"vocabulary file {path} lacks the reserved header lines")
        return cls.from_tokens(toks[NUM_RESERVED:])

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocab":
        id_to_token = list(RESERVED_TOKENS)
        for t in tokens:
            id_to_token.append(t)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)


@dataclass
class EncodedDialogue:
    """Flat id sequences for one dialogue plus structural indices."""

    token_ids: np.ndarray  # int64 [L]
    segment_ids: np.ndarray  # int64 [L], values 0/1
    position_ids: np.ndarray  # int64 [L], 0..L-1
    context_positions: np.ndarray  # int64 [N+1], indices of [C] tokens
    utterance_spans: list[tuple[int, int]]  # half-open, includes terminating [C]
    loss_mask: np.ndarray  # bool [L]
    speakers: list[str] = field(default_factory=list)  # per-utterance "A"/"B"

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def n_utterances(self) -> int:
        return len(self.utterance_spans)


@dataclass
class Batch:
    """Right-padded id matrices plus per-sample structure."""

    token_ids: np.ndarray  # [B, Lmax]
    segment_ids: np.ndarray
    position_ids: np.ndarray
    valid_mask: np.ndarray  # bool [B, Lmax], False on padding
    samples: list[EncodedDialogue]


def normalize_sample(turns: list[tuple[str, str]]) -> DialogueSample:
    """Merge consecutive same-speaker turns; the segment scheme assumes alternation."""
    merged: list[tuple[str, str]] = []
    for speaker, text in turns:
        if merged and merged[-1][0] == speaker:
            merged[-1] = (speaker, merged[-1][1] + " " + text)
        else:
            merged.append((speaker, text))
    return DialogueSample(merged)


def load_corpus(path, min_utterances: int = 2) -> Iterator[DialogueSample]:
    """Yield validated samples from a line-delimited JSON corpus.

    Malformed lines are skipped and counted; more than 10% malformed lines
    rejects the whole corpus.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    samples: list[DialogueSample] = []
    bad: list[int] = []
    total = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        total += 1
        sample = _parse_line(line)
        if sample is None or sample.n_utterances < min_utterances:
            bad.append(lineno)
            continue
        samples.append(sample)
    if total and len(bad) / total > 0.10:
        raise CorpusError(
            f"corpus {path} rejected: {len(bad)}/{total} malformed lines (lines {bad[:20]})"
        )
    if bad:
        import logging

        logging.getLogger(__name__).warning(
            "corpus %s: skipped %d malformed lines: %s", path, len(bad), bad[:20]
        )
    yield from samples


def _parse_line(line: str) -> DialogueSample | None:
    try:
        obj = json.loads(line)
        turns = obj["dialogue"]
        parsed = []
        for t in turns:
            speaker = t["speaker"]
            text = t["text"]
            if speaker not in ("A", "B") or not isinstance(text, str) or not text.strip():
                return None
            parsed.append((speaker, text))
    except (json.JSONDecodeError, KeyError, TypeError):
        return None
    if not parsed:
        return None
    return normalize_sample(parsed)


def build_vocab(corpus: Iterable[DialogueSample], min_freq: int = 1, max_size: int = 50000) -> Vocab:
    """Frequency-sorted vocabulary, ties broken lexicographically."""
    freqs: dict[str, int] = {}
    seen_any = False
    for sample in corpus:
        seen_any = True
        for _, text in sample.utterances:
            for tok in tokenize(text):
                freqs[tok] = freqs.get(tok, 0) + 1
    if not seen_any:
        raise CorpusError("cannot build vocabulary from an empty corpus")
    kept = sorted(
        (t for t, f in freqs.items() if f >= min_freq),
        key=lambda t: (-freqs[t], t),
    )[:max_size]
    return Vocab.from_tokens(kept)


def encode_dialogue(sample: DialogueSample, vocab: Vocab, max_positions: int) -> EncodedDialogue:
    """Flatten a dialogue into id sequences with [C] markers.

    Dialogues that exceed max_positions drop oldest whole utterances (keeping
    at least 2); a dialogue whose last 2 utterances still do not fit raises
    EncodingError.
    """
    utterances = list(sample.utterances)
    while True:
        token_lists = [vocab.encode_text(text) for _, text in utterances]
        length = 1 + sum(len(toks) + 1 for toks in token_lists)
        if length <= max_positions:
            break
        if len(utterances) <= 2:
            raise EncodingError(
                f"dialogue needs {length} positions for its last 2 utterances; "
                f"budget is {max_positions}"
            )
        utterances = utterances[1:]

    seg_of = {"A": 0, "B": 1}
    token_ids = [CTX]
    segment_ids = [seg_of[utterances[0][0]]]
    context_positions = [0]
    spans: list[tuple[int, int]] = []
    for (speaker, _), toks in zip(utterances, token_lists):
        start = len(token_ids)
        token_ids.extend(toks)
        segment_ids.extend([seg_of[speaker]] * len(toks))
        token_ids.append(CTX)
        segment_ids.append(seg_of[speaker])
        context_positions.append(len(token_ids) - 1)
        spans.append((start, len(token_ids)))

    length = len(token_ids)
    loss_mask = np.zeros(length, dtype=bool)
    for start, stop in spans:
        loss_mask[start:stop] = True
    return EncodedDialogue(
        token_ids=np.asarray(token_ids, dtype=np.int64),
        segment_ids=np.asarray(segment_ids, dtype=np.int64),
        position_ids=np.arange(length, dtype=np.int64),
        context_positions=np.asarray(context_positions, dtype=np.int64),
        utterance_spans=spans,
        loss_mask=loss_mask,
        speakers=[s for s, _ in utterances],
    )


def batch_dialogues(encoded: list[EncodedDialogue], pad_id: int = PAD) -> Batch:
    """Right-pad sequences into matrices; padding is masked out everywhere."""
    lmax = max(e.length for e in encoded)
    n = len(encoded)
    token_ids = np.full((n, lmax), pad_id, dtype=np.int64)
    segment_ids = np.zeros((n, lmax), dtype=np.int64)
    position_ids = np.zeros((n, lmax), dtype=np.int64)
    valid = np.zeros((n, lmax), dtype=bool)
    for i, e in enumerate(encoded):
        token_ids[i, : e.length] = e.token_ids
        segment_ids[i, : e.length] = e.segment_ids
        position_ids[i, : e.length] = e.position_ids
        valid[i, : e.length] = True
    return Batch(token_ids, segment_ids, position_ids, valid, list(encoded))


def decode_tokens(ids, vocab: Vocab) -> str:
    """Inverse of tokenization up to whitespace; reserved ids dropped except [UNK]."""
    words = []
    for i in ids:
        i = int(i)
        if i == UNK:
            words.append("<unk>")
        elif i < NUM_RESERVED:
            continue
        else:
            words.append(vocab.id_to_token[i])
    return " ".join(words)
