"""
Which visual tokens does a question look at?
============================================

Encode one image with the toy VLM, read the cross-attention from the
question tokens and pick the least-attended visual tokens.
"""

import numpy as np

from cagul_lab import data, probe, vlm

ds = data.generate()
tok = vlm.Tokenizer(ds.vocab)
cfg = vlm.VLMConfig(vocab_size=len(ds.vocab)).validate()
params = vlm.init_vlm(cfg, seed=0)

# %%
# Each 16x16 image is cut into sixteen 4x4 patches, one visual token per patch.
rec = ds.records[0]
visual = vlm.encode_image(params, ds.image(rec.id)[None]).data
print("visual tokens", visual.shape)

# %%
# alpha averages attention over question positions and heads; it sums to one
# in cross-attention mode.
q = tok.encode(rec.question)
res = probe.probe(params, visual, [q], k=3)[0]
print("question:", rec.question)
print("alpha as a 4x4 grid:\n", np.round(res.alpha.reshape(4, 4), 3))
print("sum", res.alpha.sum())
print("bottom-3 tokens", res.indices)

# %%
# Rewording the question can move the least-attended tokens.
for para in rec.q_paraphrases:
    r = probe.probe(params, visual, [tok.encode(para)], k=3)[0]
    print(f"{para!r:60} -> {r.indices}")
