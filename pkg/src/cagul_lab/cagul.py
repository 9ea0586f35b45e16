"""Attention-guided unlearning against a frozen VLM.

A small discriminator decides from the visual tokens whether an image
belongs to an individual who asked to be forgotten. For those images, the
``k`` visual tokens the question attends to least are passed through a
learned affine token encoder before the frozen model sees them. Everything
else goes through the base model untouched.
"""

from __future__ import annotations

import io
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import baselines, probe, vlm
from .autodiff import Tensor
from .data import REFUSAL

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_discriminator", "no_encoder_random_noise", "random_token_selection")
LOSS_VARIANTS = ("po_gd", "ga_gd", "ga_kl")


class CagulError(RuntimeError):
    pass


MIN_K = 3


def default_k(n_v: int) -> int:
    """About 3% of the visual tokens (200 per 6404), but never fewer than ``MIN_K``.

    With only a handful of tokens the least-attended one shifts with the
    question wording, so a single transformed token does not hold up under
    paraphrase.
    """
    return min(n_v, max(MIN_K, math.ceil(200 * n_v / 6404)))


@dataclass
class CagulConfig:
    k: int | None = None
    threshold: float = 0.5
    refusal: str = REFUSAL
    epochs_discriminator: int = 2
    epochs_joint: int = 30
    lr: float = 1e-2
    lr_discriminator: float = 1e-1
    batch_size: int = 4
    ablation: str = "none"
    loss_variant: str = "po_gd"
    conv_channels: int = 16
    max_grad_norm: float = 1.0
    seed: int = 0
    min_discriminator_accuracy: float = 0.9

    def resolve(self, n_v: int) -> "CagulConfig":
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        k = default_k(n_v) if self.k is None else self.k
        if not 1 <= k <= n_v:
            raise ValueError(f"k={k} outside [1, {n_v}]")
        out = CagulConfig(**asdict(self))
        out.k = k
        return out


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Discriminator:
    """1-D convolution over the token axis (width 3, zero padded), SiLU, mean-pool, linear head."""

    def __init__(self, d: int, channels: int = 8, seed: int = 0, width: int = 3):
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(width * d)
        self.width = width
        self.params = {
            "disc.conv.w": Tensor(rng.uniform(-s, s, (width * d, channels)), requires_grad=True),
            "disc.conv.b": Tensor(np.zeros(channels), requires_grad=True),
            "disc.head.w": Tensor(np.zeros((channels, 1)), requires_grad=True),
            "disc.head.b": Tensor(np.zeros(1), requires_grad=True),
        }

    def __call__(self, visual) -> Tensor:
        z = ad.as_tensor(visual)
        if z.data.ndim == 2:
            z = ad.reshape(z, (1,) + z.shape)
        B, n, d = z.shape
        pad = Tensor(np.zeros((B, self.width // 2, d), dtype=z.data.dtype))
        zp = ad.concat([pad, z, pad], axis=1)
        windows = ad.concat([ad.take(zp, np.arange(o, o + n), 1) for o in range(self.width)], axis=-1)
        h = ad.silu(ad.add(ad.matmul(windows, self.params["disc.conv.w"]), self.params["disc.conv.b"]))
        pooled = ad.mean(h, axis=1)
        logit = ad.add(ad.matmul(pooled, self.params["disc.head.w"]), self.params["disc.head.b"])
        return ad.sigmoid(ad.reshape(logit, (B,)))

    def values(self):
        return list(self.params.values())


class TokenEncoder:
    """Affine map d -> d applied to each selected token; starts as the identity."""

    def __init__(self, d: int):
        self.params = {
            "enc.w": Tensor(np.eye(d), requires_grad=True),
            "enc.b": Tensor(np.zeros(d), requires_grad=True),
        }

    def __call__(self, tokens) -> Tensor:
        return ad.add(ad.matmul(ad.as_tensor(tokens), self.params["enc.w"]), self.params["enc.b"])

    def values(self):
        return list(self.params.values())


def discriminate(disc: Discriminator, visual, threshold: float = 0.5):
    """Probability that each image belongs to a forget-set individual, and the 0/1 label."""
    v = ad.as_tensor(visual)
    if v.data.ndim not in (2, 3) or v.shape[-1] != disc.params["disc.conv.w"].shape[0] // disc.width:
        raise ad.ShapeError(f"discriminate: visual tokens of shape {v.shape}")
    prob = disc(v).data.astype(np.float64)
    return prob, (prob >= threshold).astype(int)


def selection_mask(indices: list[list[int]], route, n_v: int, d: int) -> np.ndarray:
    """(B, n_v, d) mask: rows in each sample's index set, for routed samples only."""
    mask = np.zeros((len(indices), n_v, d), dtype=bool)
    for b, K in enumerate(indices):
        if len(set(K)) != len(K):
            raise ad.ContractError(f"transform_tokens: duplicate indices {K}")
        if route[b] and K:
            mask[b, list(K)] = True
    return mask


def transform_tokens(enc, visual, K) -> Tensor:
    """Replace rows ``K`` of ``visual`` by ``enc(row)``; other rows are copied unchanged."""
    v = ad.as_tensor(visual)
    squeeze = v.data.ndim == 2
    if squeeze:
        v = ad.reshape(v, (1,) + v.shape)
    B, n_v, d = v.shape
    Ks = [list(K)] if squeeze else [list(k) for k in K]
    if any(not 0 <= i < n_v for k in Ks for i in k):
        raise ad.ContractError(f"transform_tokens: index out of range for {n_v} tokens")
    mask = selection_mask(Ks, [True] * B, n_v, d)
    out = ad.where(mask, enc(v), v)
    return ad.reshape(out, (n_v, d)) if squeeze else out


def sample_key(image_id: int, question: str) -> int:
    return zlib.crc32(f"{image_id}|{question}".encode())


# ---------------------------------------------------------------------------
# wrapped model
# ---------------------------------------------------------------------------

class CagulModel(vlm.Runner):
    """Frozen base model plus discriminator and token encoder."""

    def __init__(self, base: vlm.VLMParams, tokenizer, images, config: CagulConfig,
                 disc: Discriminator | None = None, enc: TokenEncoder | None = None):
        super().__init__(base, tokenizer, images)
        self.config = config.resolve(base.config.n_visual_tokens)
        d = base.config.d_model
        self.disc = disc or Discriminator(d, config.conv_channels, seed=config.seed)
        self.enc = enc or TokenEncoder(d)
        self._probe_cache: dict = {}

    @property
    def base(self) -> vlm.VLMParams:
        return self.params

    def trainable_count(self) -> int:
        n = 0
        if self.config.ablation != "no_discriminator":
            n += sum(t.size for t in self.disc.values())
        if self.config.ablation != "no_encoder_random_noise":
            n += sum(t.size for t in self.enc.values())
        return n

    def route(self, visual) -> np.ndarray:
        if self.config.ablation == "no_discriminator":
            return np.ones(len(visual), dtype=int)
        return discriminate(self.disc, Tensor(visual), self.config.threshold)[1]

    def select(self, ids, questions, visual) -> list[list[int]]:
        """Token indices to transform per sample (bottom-k of the probe, or random)."""
        cfg = self.config
        n_v = self.params.config.n_visual_tokens
        keys = [sample_key(i, " ".join(map(str, q))) for i, q in zip(ids, questions)]
        if cfg.ablation == "random_token_selection":
            return [sorted(np.random.default_rng([cfg.seed, key]).choice(n_v, cfg.k, replace=False).tolist())
                    for key in keys]
        missing = [b for b, key in enumerate(keys) if key not in self._probe_cache]
        if missing:
            res = probe.probe(self.params, visual[missing], [questions[b] for b in missing], cfg.k)
            for b, r in zip(missing, res):
                self._probe_cache[keys[b]] = r.indices
        return [self._probe_cache[key] for key in keys]

    def transformed(self, ids, questions, visual: np.ndarray, route=None) -> tuple[Tensor, np.ndarray]:
        """Visual tokens fed to the frozen model (differentiable in the encoder) and the routing."""
        route = self.route(visual) if route is None else route
        n_v, d = visual.shape[1], visual.shape[2]
        z = Tensor(visual)
        if not route.any():
            return z, route
        K = self.select(ids, questions, visual)
        mask = selection_mask(K, route, n_v, d)
        if self.config.ablation == "no_encoder_random_noise":
            noise = np.zeros_like(visual)
            for b, (i, q) in enumerate(zip(ids, questions)):
                if route[b]:
                    rng = np.random.default_rng([self.config.seed, sample_key(i, " ".join(map(str, q)))])
                    noise[b, K[b]] = rng.uniform(-1, 1, (len(K[b]), d))
            return Tensor(np.where(mask, visual + noise, visual)), route
        return ad.where(mask, self.enc(z), z), route

    def visual(self, ids, questions) -> np.ndarray:
        base_vis = vlm.encode_image(self.params, self.pixels(ids)).data
        return self.transformed(ids, questions, base_vis)[0].data

    def forward(self, ids, questions, text_ids) -> tuple[Tensor, np.ndarray]:
        """Logits of the wrapped model; ``cagul_forward`` in batch form."""
        base_vis = vlm.encode_image(self.params, self.pixels(ids)).data
        z, route = self.transformed(ids, questions, base_vis)
        return vlm.forward(self.params, z, text_ids).logits, route

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        tensors = {**self.disc.params, **self.enc.params}
        with open(path, "wb") as f:
            vlm.write_named_tensors(f, b"CGUL1", tensors, trailer=asdict(self.config))

    @classmethod
    def load(cls, path, base, tokenizer, images) -> "CagulModel":
        with open(path, "rb") as f:
            tensors, cfg = vlm.read_named_tensors(f, b"CGUL1", with_trailer=True)
        config = CagulConfig(**cfg)
        model = cls(base, tokenizer, images, config)
        for name, t in tensors.items():
            target = model.disc.params if name.startswith("disc.") else model.enc.params
            if target[name].shape != t.shape:
                raise ValueError(f"module checkpoint mismatch at {name}")
            target[name] = t
        return model


def cagul_forward(model: CagulModel, image_id: int, question: str) -> np.ndarray:
    """Logits over the question positions plus <bos> for one (image, question)."""
    q = model.tokenizer.encode(question)
    logits, _ = model.forward([image_id], [q], np.array([q + [vlm.BOS]]))
    return logits.data[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_bce(disc: Discriminator, visual, labels) -> Tensor:
    return ad.bce(disc(visual), np.asarray(labels, dtype=float))


def _group_weights(mask: np.ndarray) -> np.ndarray:
    n = int(mask.sum())
    return mask / n if n else np.zeros(len(mask))


def loss_retain(logits: Tensor, batch: vlm.TextBatch, retain_rows: np.ndarray) -> Tensor:
    """Mean token-normalized NLL of the true answers over the retain rows."""
    return vlm.token_nll(logits, batch, _group_weights(retain_rows))


def loss_forget_po(logits: Tensor, batch: vlm.TextBatch, forget_rows: np.ndarray) -> Tensor:
    """Mean token-normalized NLL of the refusal over the forget rows (batch carries the refusal)."""
    return vlm.token_nll(logits, batch, _group_weights(forget_rows))


def loss_joint(l_bce: Tensor, l_f: Tensor, l_r: Tensor) -> Tensor:
    return ad.add(ad.add(l_bce, l_f), l_r)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    discriminator_accuracy: float = 0.0
    epochs: list = field(default_factory=list)
    seconds_per_epoch: float = 0.0
    stopped_early: bool = False
    trainable_params: int = 0


def _split_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def train_cagul(base: vlm.VLMParams, forget, retain, config: CagulConfig, tokenizer, images,
                eval_hook=None) -> tuple[CagulModel, TrainLog]:
    """Two-stage training: the discriminator alone, then the joint objective.

    ``forget`` / ``retain`` are record lists; ``images`` maps ids to pixel
    grids. Backbone parameters are frozen for the duration and left
    bit-identical. ``eval_hook(model)`` (optional) returns the early-stop
    history entry used by the gradient-ascent loss variants.
    """
    cfg = config.resolve(base.config.n_visual_tokens)
    saved_flags = {n: t.requires_grad for n, t in base.tensors.items()}
    base.set_frozen(True)
    try:
        return _train(base, forget, retain, cfg, tokenizer, images, eval_hook)
    finally:
        for n, t in base.tensors.items():
            t.requires_grad = saved_flags[n]


def _train(base, forget, retain, cfg, tokenizer, images, eval_hook):
    model = CagulModel(base, tokenizer, images, cfg)
    tlog = TrainLog(trainable_params=model.trainable_count())
    rng = np.random.default_rng(cfg.seed)
    records = list(forget) + list(retain)
    if not records:
        raise CagulError("train_cagul: no training records")
    is_forget = np.array([1] * len(forget) + [0] * len(retain))
    forget_ids = {r.id for r in forget}
    labels = np.array([int(r.id in forget_ids) for r in records])
    ids = [r.id for r in records]
    q_ids = [tokenizer.encode(r.question) for r in records]
    answers = [tokenizer.encode(r.answer) for r in records]
    refusal = tokenizer.encode(cfg.refusal)
    visual = vlm.encode_image(base, model.pixels(ids)).data

    train_disc = cfg.ablation != "no_discriminator"
    train_enc = cfg.ablation != "no_encoder_random_noise"

    if train_disc:
        opt = ad.Adam(model.disc.values(), lr=cfg.lr_discriminator)
        for ep in range(cfg.epochs_discriminator):
            for idx in _split_batches(len(records), cfg.batch_size, rng):
                loss = loss_bce(model.disc, Tensor(visual[idx]), labels[idx])
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
        _, pred = discriminate(model.disc, Tensor(visual), cfg.threshold)
        tlog.discriminator_accuracy = float((pred == labels).mean())
        log.info("discriminator stage-1 accuracy %.3f", tlog.discriminator_accuracy)
        if tlog.discriminator_accuracy < cfg.min_discriminator_accuracy:
            raise CagulError(f"discriminator accuracy {tlog.discriminator_accuracy:.3f} after stage 1 "
                             f"is below {cfg.min_discriminator_accuracy}; routing would be unreliable")

    params = (model.disc.values() if train_disc else []) + (model.enc.values() if train_enc else [])
    opt = ad.Adam(params, lr=cfg.lr)
    ga = cfg.loss_variant in ("ga_gd", "ga_kl")
    history = []
    start = time.perf_counter()
    total_steps = cfg.epochs_joint * int(np.ceil(len(records) / cfg.batch_size))
    step = 0
    for ep in range(cfg.epochs_joint):
        t0 = time.perf_counter()
        tot = {"bce": 0.0, "forget": 0.0, "retain": 0.0}
        for idx in _split_batches(len(records), cfg.batch_size, rng):
            opt.lr = ad.linear_decay(cfg.lr, step, total_steps)
            step += 1
            fr = is_forget[idx].astype(bool)
            use_refusal = fr & (cfg.loss_variant == "po_gd")
            ans = [refusal if use_refusal[j] else answers[i] for j, i in enumerate(idx)]
            batch = vlm.make_batch([q_ids[i] for i in idx], ans, base.config)
            v = visual[idx]
            terms = []
            if train_disc:
                probs = model.disc(Tensor(v))
                l_bce = ad.bce(probs, labels[idx].astype(float))
                route = (probs.data >= cfg.threshold).astype(int)
                terms.append(l_bce)
                tot["bce"] += float(l_bce.data)
            else:
                route = np.ones(len(idx), dtype=int)
            if train_enc and route.any():
                z, _ = model.transformed([ids[i] for i in idx], [q_ids[i] for i in idx], v, route)
                logits = vlm.forward(base, z, batch.ids).logits
                if ga:
                    l_f = ad.scale(vlm.token_nll(logits, batch, _group_weights(fr)), -1.0)
                else:
                    l_f = loss_forget_po(logits, batch, fr)
                l_r = loss_retain(logits, batch, ~fr)
                if cfg.loss_variant == "ga_kl":
                    ref = vlm.forward(base, Tensor(v), batch.ids).logits.data
                    l_r = baselines.kl_term(logits, ref, batch, _group_weights(~fr))
                terms += [l_f, l_r]
                tot["forget"] += float(l_f.data)
                tot["retain"] += float(l_r.data)
            if not terms:
                continue
            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            opt.zero_grad()
            ad.backward(loss)
            ad.clip_grad_norm(params, cfg.max_grad_norm)
            opt.step()
        entry = {"epoch": ep, **tot, "seconds": time.perf_counter() - t0}
        tlog.epochs.append(entry)
        if ga and eval_hook is not None:
            history.append(eval_hook(model))
            if baselines.early_stop(history):
                tlog.stopped_early = True
                break
    n_ep = max(len(tlog.epochs), 1)
    tlog.seconds_per_epoch = (time.perf_counter() - start) / n_ep
    return model, tlog
