"""Finetuning-based unlearning baselines and retraining.

All methods update every trainable toy-model parameter. Gradient-ascent
methods are guarded by :func:`early_stop`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vlm
from .autodiff import Tensor
from .data import REFUSAL

log = logging.getLogger(__name__)

METHODS = ("ga", "ga_gd", "ga_kl", "po_gd", "retrain")


@dataclass
class BaselineConfig:
    method: str = "po_gd"
    lr: float | None = None
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    retain_ratio_limit: float = 1.5
    forget_em_floor: float = 0.05
    nll_floor: float = 1.0
    refusal: str = REFUSAL

    # toy rates; the forget set gives GA only two steps per epoch, so its rate is not scaled down
    DEFAULT_LR = {"ga": 1e-2, "ga_gd": 5e-4, "ga_kl": 5e-4, "po_gd": 1e-3, "retrain": 3e-3}

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.lr is None:
            self.lr = self.DEFAULT_LR[self.method]
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def early_stop(history: list[dict], retain_ratio_limit: float = 1.5, forget_em_floor: float = 0.05,
               nll_floor: float = 1.0) -> bool:
    """Stop once retain NLL exceeds ``limit`` times its reference or forget EM is near zero.

    ``history`` entries carry ``retain_nll`` and ``forget_em``; the first
    entry is the state before unlearning. The reference NLL is floored at
    ``nll_floor`` nats per token, since a memorizing base sits near zero and
    a bare ratio would then trip on noise.
    """
    if not history:
        return False
    ref = max(history[0]["retain_nll"], nll_floor)
    last = history[-1]
    if last["retain_nll"] / ref > retain_ratio_limit:
        return True
    return last["forget_em"] <= forget_em_floor


def kl_term(logits: Tensor, ref_logits: np.ndarray, batch: vlm.TextBatch, sample_weights) -> Tensor:
    """``sum_b w_b * mean_t KL(p_model || p_ref)`` over scored answer positions."""
    B, T, V = logits.shape
    w = np.asarray(sample_weights, dtype=float)
    pos = (batch.targets >= 0).astype(float)
    tok_w = (w / np.maximum(batch.answer_len, 1))[:, None] * pos
    lp = ad.log_softmax(logits)
    z = ref_logits - ref_logits.max(-1, keepdims=True)
    lref = z - np.log(np.exp(z).sum(-1, keepdims=True))
    diff = ad.add(lp, Tensor(-lref.astype(logits.data.dtype)))
    per = ad.mul(ad.exp(lp), diff)
    weighted = ad.mul(per, Tensor(np.broadcast_to(tok_w[:, :, None], (B, T, V)).astype(logits.data.dtype)))
    return ad.sum_(weighted)


@dataclass
class BaselineLog:
    epochs: list = field(default_factory=list)
    history: list = field(default_factory=list)
    stopped_early: bool = False
    seconds_per_epoch: float = 0.0
    trainable_params: int = 0


def _nll(params, examples):
    images, batch = vlm.batch_inputs(params, examples)
    logits = vlm.forward(params, vlm.encode_image(params, images), batch.ids).logits
    return vlm.token_nll(logits, batch)


def unlearn_finetune(base: vlm.VLMParams, forget: list[vlm.TrainExample], retain: list[vlm.TrainExample],
                     config: BaselineConfig, refusal_ids: list[int] | None = None,
                     monitor=None) -> tuple[vlm.VLMParams, BaselineLog]:
    """Run one finetuning baseline from ``base`` (which is not modified).

    ``forget`` / ``retain`` hold the true answers. ``monitor(params)`` returns
    an early-stop history entry (``retain_nll``, ``forget_em``); it is
    consulted after every epoch for the gradient-ascent methods.
    """
    if config.method == "retrain":
        raise ValueError("use retrain() for the retrain baseline")
    params = base.copy()
    blog = BaselineLog(trainable_params=params.count(trainable_only=True))
    frozen_ref = base.copy().set_frozen(True)
    opt = ad.Adam(params.trainable(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    m = config.method
    uses_ga = m.startswith("ga")
    if m == "po_gd":
        if refusal_ids is None:
            raise ValueError("po_gd needs the refusal token ids")
        forget = [vlm.TrainExample(e.image, e.question, list(refusal_ids)) for e in forget]
    if uses_ga and monitor is not None:
        blog.history.append(monitor(params))
    n_steps = max(1, int(np.ceil(len(forget) / config.batch_size)))
    start = time.perf_counter()
    step = 0
    for ep in range(config.epochs):
        t0 = time.perf_counter()
        f_order = rng.permutation(len(forget))
        r_order = rng.permutation(len(retain)) if retain else np.array([], dtype=int)
        r_per = int(np.ceil(len(retain) / n_steps)) if retain else 0
        tot = {"forget": 0.0, "retain": 0.0}
        for s in range(n_steps):
            f_chunk = [forget[i] for i in f_order[s * config.batch_size:(s + 1) * config.batch_size]]
            r_chunk = [retain[i] for i in r_order[s * r_per:(s + 1) * r_per]]
            terms = []
            if f_chunk:
                l_f = _nll(params, f_chunk)
                tot["forget"] += float(l_f.data)
                terms.append(ad.scale(l_f, -1.0) if uses_ga else l_f)
            if r_chunk and m in ("ga_gd", "po_gd"):
                l_r = _nll(params, r_chunk)
                tot["retain"] += float(l_r.data)
                terms.append(l_r)
            if r_chunk and m == "ga_kl":
                images, batch = vlm.batch_inputs(params, r_chunk)
                logits = vlm.forward(params, vlm.encode_image(params, images), batch.ids).logits
                ref = vlm.forward(frozen_ref, vlm.encode_image(frozen_ref, images), batch.ids).logits.data
                l_kl = kl_term(logits, ref, batch, np.full(len(r_chunk), 1.0 / len(r_chunk)))
                tot["retain"] += float(l_kl.data)
                terms.append(l_kl)
            if not terms:
                continue
            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            if not np.isfinite(loss.data):
                raise vlm.TrainingError(f"{m} diverged at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            step += 1
        blog.epochs.append({"epoch": ep, **{k: v / n_steps for k, v in tot.items()},
                            "seconds": time.perf_counter() - t0})
        if uses_ga and monitor is not None:
            blog.history.append(monitor(params))
            if early_stop(blog.history, config.retain_ratio_limit, config.forget_em_floor, config.nll_floor):
                blog.stopped_early = True
                break
    blog.seconds_per_epoch = (time.perf_counter() - start) / max(len(blog.epochs), 1)
    return params, blog


def retrain(init: vlm.VLMParams, retain: list[vlm.TrainExample], lr: float = 3e-3, batch_size: int = 16,
            epochs: int = 60, seed: int = 0) -> tuple[vlm.VLMParams, BaselineLog]:
    """Finetune the pre-finetune model on the retain data only."""
    blog = BaselineLog(trainable_params=init.count(trainable_only=True))
    times = []

    def on_epoch(ep, loss, _):
        times.append(time.perf_counter())
        blog.epochs.append({"epoch": ep, "retain": loss})

    start = time.perf_counter()
    params, _ = vlm.finetune(init, retain, lr=lr, batch_size=batch_size, epochs=epochs, seed=seed, on_epoch=on_epoch)
    blog.seconds_per_epoch = (time.perf_counter() - start) / max(epochs, 1)
    return params, blog
