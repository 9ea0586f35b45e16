import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagul_lab import metrics
from cagul_lab.data import VQARecord

words = st.lists(st.sampled_from("abcd"), max_size=7)


def brute_lcs(a, b):
    # longest subsequence of a that is also a subsequence of b
    def is_sub(s, t):
        it = iter(t)
        return all(x in it for x in s)
    for n in range(min(len(a), len(b)), 0, -1):
        if any(is_sub(c, b) for c in itertools.combinations(a, n)):
            return n
    return 0


@settings(max_examples=300, deadline=None)
@given(words, words)
def test_lcs_matches_brute_force(a, b):
    assert metrics.lcs_length(a, b) == brute_lcs(a, b)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_rouge_l_is_symmetric_and_bounded(a, b):
    r = metrics.rouge_l(a, b)
    assert 0.0 <= r <= 1.0
    assert r == pytest.approx(metrics.rouge_l(b, a))


def test_rouge_l_oracles():
    assert metrics.rouge_l("a x c", "a b c") == pytest.approx(2 / 3)
    assert metrics.rouge_l("a b c", "a b c") == 1.0
    assert metrics.rouge_l("", "a") == 0.0
    assert metrics.rouge_l("x y", "a b") == 0.0


def test_exact_match_oracles():
    assert metrics.exact_match("she lives in denver now", ["denver"]) == 1.0
    assert metrics.exact_match("born in may 1990", ["may", "1991"]) == 0.5
    assert metrics.exact_match("denverish", ["denver"]) == 0.0
    assert metrics.exact_match("", [], "") == 1.0
    with pytest.raises(metrics.MetricError):
        metrics.exact_match("x", [], "some answer")


def test_min_k_oracles():
    assert metrics.min_k([-0.1, -3.0, -2.0, -0.2], 50) == pytest.approx(-2.5)
    assert metrics.min_k([-0.1, -3.0, -2.0, -0.2], 20) == pytest.approx(-3.0)
    assert metrics.min_k([-1.0], 20) == -1.0
    with pytest.raises(metrics.MetricError):
        metrics.min_k([], 20)
    with pytest.raises(metrics.MetricError):
        metrics.min_k([-1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 0), min_size=1, max_size=30), st.floats(1, 100), st.floats(1, 100))
def test_min_k_grows_with_k(lp, k1, k2):
    lo, hi = sorted((k1, k2))
    assert metrics.min_k(lp, lo) <= metrics.min_k(lp, hi) + 1e-12


def test_truth_ratio_oracle():
    assert metrics.truth_ratio_from_probs(0.5, [0.1, 0.2]) == pytest.approx(0.3)
    assert metrics.truth_ratio_from_probs(0.0, [0.1]) == math.inf
    assert metrics.normalized_prob([math.log(0.25)] * 3) == pytest.approx(0.25)


class FakeModel:
    """Answers from a lookup table and scores answers by a fixed log-prob per token."""

    def __init__(self, answers, lp=-0.5):
        self.answers, self.lp = answers, lp

    def generate(self, items):
        return [self.answers.get(q, "") for _, q in items]

    def logprobs(self, items):
        return [np.full(len(a.split()), self.lp if a.startswith("the answer is x") else -2.0) for _, _, a in items]


def _record():
    return VQARecord(0, 0, "q0", "x", True, ["q1", "q2"], "the answer is x",
                     ["the answer is y", "the answer is z"])


def test_ape_and_truth_ratio_with_fake_model():
    rec = _record()
    model = FakeModel({"q0": "x", "q1": "x", "q2": "nope"})
    assert metrics.ape(model, rec) == 0.5
    assert metrics.truth_ratio(model, rec) == pytest.approx(math.exp(-2.0) / math.exp(-0.5))


def test_evaluate_reports_per_split_metrics():
    rec = _record()
    model = FakeModel({"q0": "x", "q1": "x", "q2": "x"})
    report = metrics.evaluate(model, {"forget": [rec], "nonprivate": [rec], "general": []})
    assert set(report.splits["forget"]) == set(metrics.SPLIT_METRICS["forget"])
    assert report.get("forget", "exact_match") == 1.0 and report.get("forget", "ape") == 1.0
    assert report.get("forget", "min_k") == pytest.approx(-2.0)
    assert "truth_ratio" in report.splits["nonprivate"]
    assert report.splits["general"] == {}
    assert len(list(report.rows())) == 4 + 3
