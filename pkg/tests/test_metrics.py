"""Generation-metric tests: hand-computed BLEU/entropy values, an
independently written NIST reference, and testset evaluation plumbing."""

import json
import math
from collections import defaultdict

import numpy as np
import pytest

from dialoflow.gen_metrics import (
    EvalCase,
    avg_len,
    bleu_n,
    entropy_n,
    evaluate_testset,
    format_metric_table,
    load_testset,
    nist_n,
)
from dialoflow.generation import DecodeConfig


def case(hyp, refs):
    return EvalCase(hyp.split(), [r.split() for r in refs])


class TestBleu:
    def test_identical_single_reference(self):
        assert bleu_n([case("a b c d", ["a b c d"])], 4) == pytest.approx(1.0)

    def test_hand_computed_bigram_case(self):
        # p1 = 2/3, p2 = 1/2, BP = 1 -> sqrt(1/3)
        score = bleu_n([case("a b c", ["a b d"])], 2)
        assert score == pytest.approx(0.5773502691896258, abs=1e-6)

    def test_no_overlap_is_zero(self):
        assert bleu_n([case("x y", ["a b"])], 1) == 0.0

    def test_clipping_limits_repeats(self):
        # "the the the" vs "the cat": clipped unigram matches = 1; no brevity
        # penalty because the hypothesis is longer than the reference
        score = bleu_n([case("the the the", ["the cat"])], 1)
        assert score == pytest.approx(1 / 3)

    def test_brevity_penalty_uses_closest_reference(self):
        # hyp len 2; refs len 2 and 5 -> closest is 2 -> BP = 1
        score = bleu_n([case("a b", ["a b", "a b c d e"])], 1)
        assert score == pytest.approx(1.0)

    def test_multi_reference_union(self):
        # each token covered by a different reference
        score = bleu_n([case("a b", ["a x", "y b"])], 1)
        assert score == pytest.approx(1.0)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(0)
        letters = list("abcde")
        for _ in range(50):
            cases = [
                case(
                    " ".join(rng.choice(letters, size=rng.integers(1, 6))),
                    [" ".join(rng.choice(letters, size=rng.integers(1, 6)))],
                )
                for _ in range(3)
            ]
            assert 0.0 <= bleu_n(cases, 2) <= 1.0

    def test_empty_hypothesis_rejected(self):
        with pytest.raises(ValueError):
            EvalCase([], [["a"]])


def nist_reference(cases, n):
    """Straight transcription of the Doddington (2002) corpus NIST score,
    written independently of the library implementation."""
    ref_counts = defaultdict(int)
    w_bar = 0
    for c in cases:
        for ref in c.references:
            w_bar += len(ref)
            for order in range(1, n + 1):
                for i in range(len(ref) - order + 1):
                    ref_counts[tuple(ref[i : i + order])] += 1

    def info(gram):
        c_full = ref_counts[gram]
        if c_full == 0:
            return 0.0
        c_prefix = w_bar if len(gram) == 1 else ref_counts[gram[:-1]]
        if c_prefix == 0:
            return 0.0
        return math.log(c_prefix / c_full, 2)

    total = 0.0
    sys_len = 0
    mean_ref_len = 0.0
    for order in range(1, n + 1):
        gained = 0.0
        produced = 0
        for c in cases:
            hyp = c.hypothesis
            hyp_grams = defaultdict(int)
            for i in range(len(hyp) - order + 1):
                hyp_grams[tuple(hyp[i : i + order])] += 1
            produced += sum(hyp_grams.values())
            for gram, count in hyp_grams.items():
                best = 0
                for ref in c.references:
                    occ = sum(
                        1
                        for i in range(len(ref) - order + 1)
                        if tuple(ref[i : i + order]) == gram
                    )
                    best = max(best, occ)
                gained += min(count, best) * info(gram)
        if produced:
            total += gained / produced
    for c in cases:
        sys_len += len(c.hypothesis)
        mean_ref_len += sum(len(r) for r in c.references) / len(c.references)
    beta = -math.log(2.0) / math.log(1.5) ** 2
    ratio = min(sys_len / mean_ref_len, 1.0)
    penalty = math.exp(beta * math.log(ratio) ** 2) if ratio > 0 else 0.0
    return total * penalty


class TestNist:
    TOY = [
        case("the cat sat on the mat", ["the cat sat on a mat", "a cat sat on the mat"]),
        case("dogs bark at night", ["dogs bark loudly at night", "the dogs bark at night"]),
    ]

    def test_matches_independent_reference(self):
        for n in (1, 2, 3, 4):
            assert nist_n(self.TOY, n) == pytest.approx(nist_reference(self.TOY, n), abs=1e-4)

    def test_matches_reference_on_random_corpora(self):
        rng = np.random.default_rng(1)
        letters = list("abcdef")
        for seed in range(20):
            cases = []
            for _ in range(4):
                hyp = " ".join(rng.choice(letters, size=rng.integers(2, 8)))
                refs = [
                    " ".join(rng.choice(letters, size=rng.integers(2, 8)))
                    for _ in range(rng.integers(1, 3))
                ]
                cases.append(case(hyp, refs))
            for n in (2, 4):
                assert nist_n(cases, n) == pytest.approx(
                    nist_reference(cases, n), abs=1e-4
                ), f"seed {seed} n {n}"

    def test_no_overlap_is_zero(self):
        assert nist_n([case("x y z", ["a b c"])], 2) == 0.0

    def test_duplicating_cases_invariant(self):
        once = nist_n(self.TOY, 4)
        twice = nist_n(self.TOY + self.TOY, 4)
        assert twice == pytest.approx(once, rel=1e-12)

    def test_nonnegative(self):
        assert nist_n(self.TOY, 4) >= 0.0


class TestEntropy:
    def test_single_repeated_gram(self):
        assert entropy_n([["a", "a"]], 1) == 0.0

    def test_two_equal_grams(self):
        assert entropy_n([["a", "b"]], 1) == pytest.approx(math.log(2))

    def test_uniform_four_grams(self):
        assert entropy_n([["a", "b"], ["c", "d"]], 1) == pytest.approx(math.log(4))

    def test_maximal_iff_uniform(self):
        skewed = entropy_n([["a", "a", "a", "b"]], 1)
        assert skewed < math.log(2)

    def test_pooled_across_hypotheses(self):
        assert entropy_n([["a"], ["a"], ["b"], ["b"]], 1) == pytest.approx(math.log(2))

    def test_bigram_order(self):
        # "a b a b" bigrams: (a,b) x2, (b,a) x1
        h = entropy_n([["a", "b", "a", "b"]], 2)
        expected = -(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3))
        assert h == pytest.approx(expected)


class TestAvgLen:
    def test_mean(self):
        assert avg_len([["a"], ["a", "b", "c"]]) == 2.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            avg_len([])


class TestEvaluateTestset:
    def _write_testset(self, tmp_path, corpus):
        path = tmp_path / "testset.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for sample in corpus:
                turns = [{"speaker": s, "text": t} for s, t in sample.utterances[:-1]]
                fh.write(
                    json.dumps({"context": turns, "references": [sample.utterances[-1][1]]})
                    + "\n"
                )
        return path

    def test_overfit_model_scores_high(self, trained_toy, tmp_path):
        path = self._write_testset(tmp_path, trained_toy["corpus"])
        testset = load_testset(path)
        metrics = evaluate_testset(
            trained_toy["params"],
            trained_toy["model_cfg"],
            trained_toy["vocab"],
            testset,
            DecodeConfig(max_new_tokens=8),
        )
        assert metrics["bleu_2"] > 0.9
        assert metrics["cases"] == len(testset)
        assert metrics["avg_len"] > 0
        table = format_metric_table(metrics)
        assert "NIST-2" in table and "BLEU-4" in table

    def test_deterministic(self, trained_toy, tmp_path):
        path = self._write_testset(tmp_path, trained_toy["corpus"][:4])
        testset = load_testset(path)
        args = (trained_toy["params"], trained_toy["model_cfg"], trained_toy["vocab"], testset)
        assert evaluate_testset(*args) == evaluate_testset(*args)

    def test_string_contexts_alternate_speakers(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text(
            json.dumps({"context": ["hi there", "hello"], "references": ["fine"]}) + "\n",
            encoding="utf-8",
        )
        cases = load_testset(path)
        assert cases[0]["context"] == [("A", "hi there"), ("B", "hello")]

    def test_empty_testset_rejected(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty"):
            load_testset(path)
