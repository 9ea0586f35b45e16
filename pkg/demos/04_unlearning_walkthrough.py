"""
Unlearning four individuals end to end
======================================

Generate the toy corpus, train the base model, then remove the private
answers of four individuals two ways: with CAGUL (frozen model, small
token encoder) and with PO+GD (full finetuning toward a refusal).

Runs in about a minute on one core. Pass an output directory to keep
the artifacts; a temporary one is used otherwise.
"""

import sys
import tempfile

from cagul_lab.__main__ import main as cli

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="cagul-demo-")
o = ["--out", out]

# %%
# 20 individuals with 8 questions each, 2 of them private.
cli(["datagen", *o])

# %%
# Pretrain on fresh images, then finetune until every answer is memorized.
cli(["finetune", *o])
cli(["eval", *o, "--method", "finetune"])

# %%
# CAGUL only trains a discriminator and an affine map on 3 of 16 visual tokens.
# Forget-set answers turn into refusals while the other splits stay intact.
cli(["unlearn", *o, "--method", "cagul"])
cli(["eval", *o, "--method", "cagul"])

# %%
# PO+GD reaches similar numbers but updates all 47k backbone weights.
cli(["unlearn", *o, "--method", "po_gd"])
cli(["eval", *o, "--method", "po_gd"])

print(f"\nartifacts in {out}")
