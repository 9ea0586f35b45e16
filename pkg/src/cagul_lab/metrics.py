"""Evaluation metrics: ROUGE-L, keyword exact match, MinK, APE and truth ratio.

Scoring functions are pure. The model-facing helpers (:func:`ape`,
:func:`truth_ratio`, :func:`evaluate`) accept anything with the
``generate`` / ``logprobs`` surface of :class:`cagul_lab.vlm.Runner`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("forget", "retain", "nonprivate", "general")

# metric -> splits it is computed on
SPLIT_METRICS = {
    "forget": ("rouge_l", "exact_match", "ape", "min_k"),
    "retain": ("rouge_l", "exact_match"),
    "nonprivate": ("rouge_l", "exact_match", "truth_ratio"),
    "general": ("exact_match",),
}

# lower is better on the forget side, higher elsewhere; truth ratio is reported raw
ORIENTATION = {"forget": "down", "retain": "up", "nonprivate": "up", "general": "up"}


class MetricError(ValueError):
    pass


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def lcs_length(a, b) -> int:
    a, b = _tokens(a), _tokens(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference) -> float:
    """Token-level ROUGE-L F-score over whitespace tokens."""
    h, r = _tokens(hypothesis), _tokens(reference)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


def exact_match(hypothesis, keywords, answer: str | None = None) -> float:
    """Fraction of ``keywords`` present as whole tokens in ``hypothesis``.

    An empty keyword set scores 1.0 for an empty answer; for a non-empty
    answer it means the record is malformed and raises :class:`MetricError`.
    """
    kws = list(dict.fromkeys(keywords))
    if not kws:
        if answer is None or not answer.strip():
            return 1.0
        raise MetricError(f"record with answer {answer!r} has no keywords")
    present = set(_tokens(hypothesis))
    return sum(k in present for k in kws) / len(kws)


def min_k(logprobs, k_percent: float = 20.0) -> float:
    """Mean of the ceil(k% * T) smallest per-token log-probs."""
    lp = np.sort(np.asarray(logprobs, dtype=np.float64).ravel())
    if lp.size == 0:
        raise MetricError("min_k of an empty sequence")
    if not 0 < k_percent <= 100:
        raise MetricError(f"k_percent must be in (0, 100], got {k_percent}")
    n = max(1, math.ceil(k_percent / 100.0 * lp.size - 1e-9))
    return float(lp[:n].mean())


def normalized_prob(logprobs) -> float:
    lp = np.asarray(logprobs, dtype=np.float64)
    return float(np.exp(lp.mean())) if lp.size else 0.0


def truth_ratio_from_probs(paraphrase_prob: float, perturbed_probs) -> float:
    if paraphrase_prob <= 0:
        return float("inf")
    return float(np.mean(perturbed_probs)) / paraphrase_prob


def ape(model, record) -> float:
    """Mean exact match over the record's question paraphrases."""
    qs = list(record.q_paraphrases) or [record.question]
    outs = model.generate([(record.id, q) for q in qs])
    return float(np.mean([exact_match(o, record.keywords, record.answer) for o in outs]))


def truth_ratio(model, record) -> float:
    """Mean normalized probability of the perturbed answers over that of the paraphrased answer."""
    items = [(record.id, record.question, a) for a in [record.a_paraphrase, *record.a_perturbed]]
    probs = [normalized_prob(lp) for lp in model.logprobs(items)]
    return truth_ratio_from_probs(probs[0], probs[1:])


@dataclass
class MetricReport:
    """Per-split metric values plus efficiency counters."""

    splits: dict = field(default_factory=dict)
    trainable_param_count: int = 0
    seconds_per_epoch: float = 0.0
    wall_clock_seconds: float = 0.0

    def get(self, split: str, metric: str) -> float:
        return self.splits[split][metric]

    def rows(self):
        for split in SPLITS:
            for metric, value in self.splits.get(split, {}).items():
                yield split, metric, value


def _split_scores(model, records, metrics, k_percent):
    if not records:
        return {}
    outs = model.generate([(r.id, r.question) for r in records])
    res = {}
    if "rouge_l" in metrics:
        res["rouge_l"] = float(np.mean([rouge_l(o, r.answer) for o, r in zip(outs, records)]))
    if "exact_match" in metrics:
        res["exact_match"] = float(np.mean([exact_match(o, r.keywords, r.answer) for o, r in zip(outs, records)]))
    if "ape" in metrics:
        items, owner = [], []
        for n, r in enumerate(records):
            for q in list(r.q_paraphrases) or [r.question]:
                items.append((r.id, q))
                owner.append(n)
        para = model.generate(items)
        per = [[] for _ in records]
        for n, o in zip(owner, para):
            per[n].append(exact_match(o, records[n].keywords, records[n].answer))
        res["ape"] = float(np.mean([np.mean(p) for p in per]))
    if "min_k" in metrics:
        lps = model.logprobs([(r.id, r.question, r.answer) for r in records])
        res["min_k"] = float(np.mean([min_k(lp, k_percent) for lp in lps]))
    if "truth_ratio" in metrics:
        items = [(r.id, r.question, a) for r in records for a in [r.a_paraphrase, *r.a_perturbed]]
        probs = [normalized_prob(lp) for lp in model.logprobs(items)]
        trs, at = [], 0
        for r in records:
            n = 1 + len(r.a_perturbed)
            trs.append(truth_ratio_from_probs(probs[at], probs[at + 1:at + n]))
            at += n
        res["truth_ratio"] = float(np.mean(trs))
    return res


def evaluate(model, splits: dict, k_percent: float = 20.0) -> MetricReport:
    """Score ``model`` on named record lists (keys from :data:`SPLITS`)."""
    report = MetricReport()
    for name in SPLITS:
        if name in splits:
            report.splits[name] = _split_scores(model, splits[name], SPLIT_METRICS[name], k_percent)
    return report
