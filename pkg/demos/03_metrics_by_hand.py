"""
Evaluation metrics on hand-made inputs
======================================

The scores used in every report, computed on inputs small enough to
check in your head.
"""

import math

from cagul_lab import metrics

# %%
# ROUGE-L: one substituted word out of three leaves an LCS of two.
print(metrics.rouge_l("a x c", "a b c"))  # 2/3

# %%
# Exact match counts answer keywords that appear as whole words.
print(metrics.exact_match("she was born in may 1990", ["may", "1991"]))  # 0.5

# %%
# MinK averages the lowest k% of token log-probs. Memorized text has no
# very unlikely token, so its MinK sits near zero.
lp = [-0.1, -3.0, -2.0, -0.2]
for k in (20, 50, 100):
    print(f"MinK {k:3d}%", metrics.min_k(lp, k))

# %%
# Truth ratio: mean normalized probability of wrong answers over that of the
# paraphrased right answer. The raw ratio is reported, so lower means the
# model prefers the truth.
print(metrics.truth_ratio_from_probs(0.5, [0.1, 0.2]))  # 0.3
print(metrics.normalized_prob([math.log(0.5)] * 4))     # 0.5
