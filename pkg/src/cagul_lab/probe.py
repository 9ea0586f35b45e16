"""Cross-modal attention extraction and least-attended token selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vlm
from .autodiff import ContractError, Tensor


@dataclass
class SelectionResult:
    alpha: np.ndarray
    indices: list[int]


def extract_cross_modal(profile: vlm.AttentionProfile, layer: int, sample: int = 0,
                        n_q: int | None = None) -> list[np.ndarray]:
    """Per-head text-to-visual attention blocks (n_q, n_v) of one layer.

    Joint mode slices the text-row / visual-column block out of the full
    attention matrix without renormalizing it; cross mode returns the stored
    cross-attention matrix.
    """
    stack = profile.cross_attn if profile.mode == "cross_attention" else profile.self_attn
    if not 0 <= layer < len(stack):
        raise ContractError(f"layer {layer} out of range for {len(stack)} layers")
    A = stack[layer][sample]
    if profile.mode == "joint_self_attention":
        A = A[:, profile.n_v:, :profile.n_v]
    if n_q is not None:
        A = A[:, :n_q]
    return [A[h] for h in range(A.shape[0])]


def attention_alpha(blocks) -> np.ndarray:
    """Average attention over query rows and heads: one score per visual token."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ContractError("attention_alpha: no attention blocks")
    shape = blocks[0].shape
    if any(b.shape != shape for b in blocks):
        raise ContractError("attention_alpha: blocks differ in shape")
    return np.stack(blocks).sum(axis=(0, 1)) / (shape[0] * len(blocks))


def bottom_k(alpha, k: int) -> SelectionResult:
    """Indices of the k smallest scores; ties go to the lower index; returned ascending."""
    alpha = np.asarray(alpha)
    if not 1 <= k <= alpha.size:
        raise ContractError(f"bottom_k: k={k} outside [1, {alpha.size}]")
    order = np.argsort(alpha, kind="stable")
    return SelectionResult(alpha, sorted(int(i) for i in order[:k]))


def probe(base: vlm.VLMParams, visual, questions: list[list[int]], k: int,
          layer: int = 0) -> list[SelectionResult]:
    """Score visual tokens for each (image, question) with a question-only pass of ``base``."""
    cfg = base.config
    vis = visual.data if isinstance(visual, Tensor) else np.asarray(visual)
    B = len(questions)
    T = max(len(q) for q in questions)
    ids = np.full((B, T), vlm.PAD, dtype=np.int64)
    for b, q in enumerate(questions):
        ids[b, :len(q)] = q
    prof = vlm.forward(base, Tensor(vis), ids).attention
    out = []
    for b, q in enumerate(questions):
        alpha = attention_alpha(extract_cross_modal(prof, layer, sample=b, n_q=len(q)))
        out.append(bottom_k(alpha, k))
    return out
