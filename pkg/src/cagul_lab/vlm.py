"""A miniature vision-language model.

Images are cut into patches, embedded per patch and projected into the
language model's embedding space (the visual tokens ``Z_v``). The language
model is a small pre-LN transformer that consumes visual and text tokens in
one of two wirings:

* ``cross_attention``: text tokens run causal self-attention, and each layer
  has an extra sublayer in which text queries attend to the visual tokens.
* ``joint_self_attention``: ``[visual ; text]`` is one causal sequence.

Text layout per sample is ``question <bos> answer <eos>``; sequences in a
batch are right-padded, which the causal mask makes harmless.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, REFUSE = 0, 1, 2, 3
MASK_VALUE = -1e9
MODES = ("cross_attention", "joint_self_attention")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class VLMConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_visual_tokens: int = 16
    max_query_len: int = 24
    max_answer_len: int = 12
    d_ff: int = 64
    attention_mode: str = "cross_attention"
    image_side: int = 16
    patch_side: int = 4

    def validate(self) -> "VLMConfig":
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_side % self.patch_side:
            raise ConfigError("patch_side must divide image_side")
        if self.n_visual_tokens != (self.image_side // self.patch_side) ** 2:
            raise ConfigError("n_visual_tokens must equal (image_side / patch_side)^2")
        if self.attention_mode not in MODES:
            raise ConfigError(f"attention_mode must be one of {MODES}")
        if self.vocab_size < 5 or min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("sizes must be positive and vocab_size >= 5")
        return self

    @property
    def max_text_len(self) -> int:
        return self.max_query_len + 1 + self.max_answer_len

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class VLMParams:
    """Named parameters; ``frozen`` entries do not receive gradients."""

    def __init__(self, config: VLMConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def trainable(self):
        return [t for t in self.tensors.values() if t.requires_grad]

    def set_frozen(self, frozen: bool, prefix: str = "") -> "VLMParams":
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                t.requires_grad = not frozen
        return self

    def is_frozen(self, name) -> bool:
        return not self.tensors[name].requires_grad

    def count(self, trainable_only=False) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad or not trainable_only)

    def copy(self) -> "VLMParams":
        return VLMParams(self.config, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                                       for n, t in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            h.update(n.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def param_shapes(cfg: VLMConfig) -> dict[str, tuple]:
    d, V, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    shapes = {
        "patch.w": (cfg.patch_dim, d), "patch.b": (d,),
        "proj.w": (d, d), "proj.b": (d,),
        "vis_pos": (cfg.n_visual_tokens, d),
        "tok_emb": (V, d), "txt_pos": (cfg.max_text_len, d),
    }
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,)})
        shapes.update({p + f"attn.{w}": (d, d) for w in ("wq", "wk", "wv", "wo")})
        if cfg.attention_mode == "cross_attention":
            shapes.update({p + "lnx.g": (d,), p + "lnx.b": (d,)})
            shapes.update({p + f"xattn.{w}": (d, d) for w in ("wq", "wk", "wv", "wo")})
        shapes.update({p + "ln2.g": (d,), p + "ln2.b": (d,),
                       p + "ff.w1": (d, f), p + "ff.b1": (f,), p + "ff.w2": (f, d), p + "ff.b2": (d,)})
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head.w": (d, V), "head.b": (V,)})
    return shapes


def init_vlm(config: VLMConfig, seed: int) -> VLMParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if name not in ("tok_emb", "txt_pos", "vis_pos") else config.d_model
            s = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-s, s, size=shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return VLMParams(config, tensors)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

class Tokenizer:
    """Whitespace word-level tokenizer over a closed vocabulary (specials first)."""

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as e:
            raise ConfigError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (PAD, BOS, EOS))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class AttentionProfile:
    """Attention probabilities of one forward pass, per layer, shape (B, H, rows, cols).

    ``self_attn`` holds the text (cross mode) or full joint (joint mode)
    matrices; ``cross_attn`` holds the text-to-visual matrices of cross mode.
    """
    mode: str
    n_v: int
    n_heads: int
    self_attn: list = field(default_factory=list)
    cross_attn: list = field(default_factory=list)

    @property
    def n_layers(self):
        return len(self.self_attn)


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T, V) over text positions
    attention: AttentionProfile
    visual: Tensor  # visual tokens actually used (before position embeddings)


def patchify(images: np.ndarray, cfg: VLMConfig) -> np.ndarray:
    """(B, side, side) pixel grids to (B, n_v, patch_side^2) row-major patches."""
    images = np.asarray(images, dtype=ad.default_dtype())
    if images.ndim == 2:
        images = images[None]
    s, p = cfg.image_side, cfg.patch_side
    if images.shape[1:] != (s, s):
        raise ad.ShapeError(f"encode_image: expected {s}x{s} image, got {images.shape[1:]}")
    g = s // p
    B = images.shape[0]
    return images.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(B, g * g, p * p)


def encode_image(params: VLMParams, images) -> Tensor:
    """Patch embedder then projector: ``Z_v`` with shape (B, n_v, d) (or (n_v, d) for one image)."""
    single = np.asarray(images).ndim == 2
    x = Tensor(patchify(images, params.config))
    h = ad.silu(ad.add(ad.matmul(x, params["patch.w"]), params["patch.b"]))
    z = ad.add(ad.matmul(h, params["proj.w"]), params["proj.b"])
    if single:
        z = ad.reshape(z, z.shape[1:])
    return z


def _heads(x: Tensor, B, T, H, dh) -> Tensor:
    return ad.transpose(ad.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))


def _attention(xq: Tensor, xkv: Tensor, prefix: str, params: VLMParams, mask, H: int):
    """Multi-head attention; returns (output, probabilities (B, H, Tq, Tk))."""
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // H
    q = _heads(ad.matmul(xq, params[prefix + "wq"]), B, Tq, H, dh)
    k = _heads(ad.matmul(xkv, params[prefix + "wk"]), B, Tk, H, dh)
    v = _heads(ad.matmul(xkv, params[prefix + "wv"]), B, Tk, H, dh)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.masked_fill(scores, mask, MASK_VALUE)
    probs = ad.softmax(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, Tq, d))
    return ad.matmul(ctx, params[prefix + "wo"]), probs


def _ln(x, params, prefix):
    return ad.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def _ffn(x, params, p):
    h = ad.silu(ad.add(ad.matmul(x, params[p + "ff.w1"]), params[p + "ff.b1"]))
    return ad.add(ad.matmul(h, params[p + "ff.w2"]), params[p + "ff.b2"])


def forward(params: VLMParams, visual: Tensor, text_ids) -> ForwardOutput:
    """Run the language model on visual tokens (B, n_v, d) and text ids (B, T)."""
    cfg = params.config
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.ndim == 1:
        text_ids = text_ids[None]
    visual = ad.as_tensor(visual)
    if visual.data.ndim == 2:
        visual = ad.reshape(visual, (1,) + visual.shape)
    B, T = text_ids.shape
    n_v, d, H = cfg.n_visual_tokens, cfg.d_model, cfg.n_heads
    if T > cfg.max_text_len:
        raise ad.ContractError(f"forward: text length {T} exceeds {cfg.max_text_len}")
    if visual.shape != (B, n_v, d):
        raise ad.ShapeError(f"forward: visual tokens {visual.shape}, expected {(B, n_v, d)}")
    prof = AttentionProfile(cfg.attention_mode, n_v, H)
    vis = _add_pos(visual, params["vis_pos"], B)
    txt = ad.embedding(params["tok_emb"], text_ids)
    txt = _add_pos(txt, ad.take(params["txt_pos"], np.arange(T), 0), B)

    if cfg.attention_mode == "joint_self_attention":
        x = ad.concat([vis, txt], axis=1)
        L = n_v + T
        causal = np.triu(np.ones((L, L), dtype=bool), 1)
    else:
        x = txt
        causal = np.triu(np.ones((T, T), dtype=bool), 1)

    for l in range(cfg.n_layers):
        p = f"layer{l}."
        a, probs = _attention(h := _ln(x, params, p + "ln1"), h, p + "attn.", params, causal, H)
        prof.self_attn.append(probs.data)
        x = ad.add(x, a)
        if cfg.attention_mode == "cross_attention":
            a, probs = _attention(_ln(x, params, p + "lnx"), vis, p + "xattn.", params, None, H)
            prof.cross_attn.append(probs.data)
            x = ad.add(x, a)
        x = ad.add(x, _ffn(_ln(x, params, p + "ln2"), params, p))

    if cfg.attention_mode == "joint_self_attention":
        x = ad.take(x, np.arange(n_v, n_v + T), 1)
    logits = ad.add(ad.matmul(_ln(x, params, "lnf"), params["head.w"]), params["head.b"])
    return ForwardOutput(logits, prof, visual)


def _add_pos(x: Tensor, pos: Tensor, B: int) -> Tensor:
    # expand the (T, d) table across the batch through a shared-weight matmul
    ones = Tensor(np.ones((B, 1, 1), dtype=x.data.dtype))
    T, d = pos.shape
    return ad.add(x, ad.reshape(ad.matmul(ones, ad.reshape(pos, (1, T * d))), (B, T, d)))


# ---------------------------------------------------------------------------
# batching and losses
# ---------------------------------------------------------------------------

@dataclass
class TextBatch:
    ids: np.ndarray        # (B, T) model inputs
    targets: np.ndarray    # (B, T) next-token targets, -1 where unused
    answer_len: np.ndarray  # (B,) number of scored target positions per sample
    query_len: np.ndarray  # (B,)


def make_batch(questions: list[list[int]], answers: list[list[int]], cfg: VLMConfig,
               include_eos: bool = True) -> TextBatch:
    """Pack ``question <bos> answer`` inputs; targets score the answer (and <eos>)."""
    B = len(questions)
    if B == 0:
        raise ad.ContractError("make_batch: empty batch")
    seqs, tgts, alen = [], [], []
    for q, a in zip(questions, answers):
        if not a:
            raise ad.ContractError("make_batch: empty answer")
        if len(q) > cfg.max_query_len:
            raise ad.ContractError(f"question of {len(q)} tokens exceeds max_query_len={cfg.max_query_len}")
        if len(a) > cfg.max_answer_len:
            raise ad.ContractError(f"answer of {len(a)} tokens exceeds max_answer_len={cfg.max_answer_len}")
        seqs.append(list(q) + [BOS] + list(a))
        tgt = [-1] * len(q) + list(a) + [EOS if include_eos else -1]
        tgts.append(tgt)
        alen.append(len(a) + (1 if include_eos else 0))
    T = max(len(s) for s in seqs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), -1, dtype=np.int64)
    for b, (s, t) in enumerate(zip(seqs, tgts)):
        ids[b, :len(s)] = s
        targets[b, :len(t)] = t
    return TextBatch(ids, targets, np.array(alen), np.array([len(q) for q in questions]))


def token_nll(logits: Tensor, batch: TextBatch, sample_weights=None) -> Tensor:
    """``sum_b w_b * mean_t NLL(answer_t)``; default weights average over the batch."""
    B, T, V = logits.shape
    w = np.full(B, 1.0 / B) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    per_tok = (w / np.maximum(batch.answer_len, 1))[:, None] * (batch.targets >= 0)
    flat = ad.reshape(logits, (B * T, V))
    return ad.cross_entropy(flat, batch.targets.reshape(-1), per_tok.reshape(-1))


def token_logprobs(logits: np.ndarray, batch: TextBatch) -> list[np.ndarray]:
    """Per-sample arrays of log p(target) at scored positions."""
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    out = []
    for b in range(logits.shape[0]):
        pos = np.nonzero(batch.targets[b] >= 0)[0]
        out.append(logp[b, pos, batch.targets[b, pos]].astype(np.float64))
    return out


def sequence_log_likelihood(params: VLMParams, image, question: list[int], answer: list[int],
                            include_eos: bool = False, visual=None) -> np.ndarray:
    """log p(Y^t | V, X, Y^<t) for each answer token (optionally the closing <eos>)."""
    if not answer:
        raise ad.ContractError("sequence_log_likelihood: empty answer")
    batch = make_batch([question], [answer], params.config, include_eos=include_eos)
    z = encode_image(params, np.asarray(image)[None]) if visual is None else visual
    out = forward(params, z, batch.ids)
    return token_logprobs(out.logits.data, batch)[0]


def generate_ids(params: VLMParams, visual, questions: list[list[int]], max_new_tokens: int) -> list[list[int]]:
    """Batched greedy decoding; each sample stops at its own <eos>."""
    if max_new_tokens < 1:
        raise ad.ContractError("generate: max_new_tokens must be >= 1")
    cfg = params.config
    max_new_tokens = min(max_new_tokens, cfg.max_answer_len + 1)
    seqs = [list(q) + [BOS] for q in questions]
    outs: list[list[int]] = [[] for _ in questions]
    done = [False] * len(questions)
    vis = visual.data if isinstance(visual, Tensor) else np.asarray(visual)
    for _ in range(max_new_tokens):
        live = [b for b in range(len(seqs)) if not done[b]]
        if not live:
            break
        T = max(len(seqs[b]) for b in live)
        if T > cfg.max_text_len:
            break
        ids = np.full((len(live), T), PAD, dtype=np.int64)
        for r, b in enumerate(live):
            ids[r, :len(seqs[b])] = seqs[b]
        logits = forward(params, Tensor(vis[live]), ids).logits.data
        for r, b in enumerate(live):
            nxt = int(np.argmax(logits[r, len(seqs[b]) - 1]))
            if nxt == EOS:
                done[b] = True
                continue
            outs[b].append(nxt)
            seqs[b].append(nxt)
    return outs


def generate(params: VLMParams, tokenizer: Tokenizer, image, question: str, max_new_tokens: int = 12) -> str:
    z = encode_image(params, np.asarray(image)[None])
    ids = generate_ids(params, z, [tokenizer.encode(question)], max_new_tokens)[0]
    return tokenizer.decode(ids)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    image: np.ndarray
    question: list[int]
    answer: list[int]


def examples_from(records, images: dict, tokenizer: Tokenizer, refusal: str | None = None) -> list[TrainExample]:
    out = []
    for r in records:
        img = images[r.id].astype(np.float32) / 255.0 if images[r.id].dtype == np.uint8 else images[r.id]
        out.append(TrainExample(img, tokenizer.encode(r.question),
                                tokenizer.encode(refusal if refusal is not None else r.answer)))
    return out


def batch_inputs(params: VLMParams, examples: list[TrainExample], include_eos=True):
    batch = make_batch([e.question for e in examples], [e.answer for e in examples], params.config, include_eos)
    images = np.stack([e.image for e in examples])
    return images, batch


def finetune(params: VLMParams, examples: list[TrainExample], lr: float = 3e-3, batch_size: int = 16,
             epochs: int = 60, seed: int = 0, on_epoch=None) -> tuple[VLMParams, list[float]]:
    """Maximize the length-normalized answer log-likelihood with Adam.

    Returns a trained copy and the per-epoch mean training loss. Frozen
    entries of ``params`` stay frozen.
    """
    if not examples:
        raise ad.ContractError("finetune: empty dataset")
    params = params.copy()
    if epochs == 0:
        return params, []
    opt = ad.Adam(params.trainable(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for ep in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for s in range(0, len(order), batch_size):
            chunk = [examples[i] for i in order[s:s + batch_size]]
            images, batch = batch_inputs(params, chunk)
            try:
                z = encode_image(params, images)
                loss = token_nll(forward(params, z, batch.ids).logits, batch)
            except ad.NumericError as e:
                raise TrainingError(f"finetune diverged at step {step}: {e}") from None
            if not np.isfinite(loss.data):
                raise TrainingError(f"finetune diverged at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(chunk))
            step += 1
        history.append(sum(losses) / len(examples))
        log.debug("finetune epoch %d loss %.4f", ep, history[-1])
        if on_epoch is not None and on_epoch(ep, history[-1], params) is False:
            break
    return params, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_named_tensors(f, magic: bytes, tensors: dict[str, Tensor], trailer: dict | None = None) -> None:
    f.write(magic)
    f.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nb = name.encode()
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", t.data.ndim))
        f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        f.write(struct.pack("<B", 0 if t.requires_grad else 1))
        f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    if trailer is not None:
        blob = json.dumps(trailer, sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def read_named_tensors(f, magic: bytes, with_trailer=False):
    if f.read(len(magic)) != magic:
        raise ValueError(f"bad checkpoint magic, expected {magic!r}")
    (count,) = struct.unpack("<I", f.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode()
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        (frozen,) = struct.unpack("<B", f.read(1))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = Tensor(data, requires_grad=not frozen, name=name)
    trailer = None
    if with_trailer:
        raw = f.read(4)
        if len(raw) == 4:
            (blen,) = struct.unpack("<I", raw)
            trailer = json.loads(f.read(blen).decode())
    return tensors, trailer


def save_params(params: VLMParams, path) -> None:
    with open(path, "wb") as f:
        write_named_tensors(f, b"TVLM1", params.tensors)


def load_params(path, config: VLMConfig) -> VLMParams:
    with open(path, "rb") as f:
        tensors, _ = read_named_tensors(f, b"TVLM1")
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ConfigError(f"checkpoint does not match config at {name}")
    return VLMParams(config, tensors)


def to_bytes(params: VLMParams) -> bytes:
    buf = io.BytesIO()
    write_named_tensors(buf, b"TVLM1", params.tensors)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation wrapper
# ---------------------------------------------------------------------------

class Runner:
    """Answers (image id, question) queries with a plain model.

    :class:`cagul_lab.cagul.CagulModel` exposes the same ``visual`` /
    ``generate`` / ``logprobs`` surface, so metrics treat both alike.
    """

    def __init__(self, params: VLMParams, tokenizer: Tokenizer, images: dict, batch_size: int = 256):
        self.params = params
        self.tokenizer = tokenizer
        self.images = images
        self.batch_size = batch_size

    def pixels(self, ids) -> np.ndarray:
        out = []
        for i in ids:
            img = self.images[i]
            out.append(img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img)
        return np.stack(out)

    def visual(self, ids, questions: list[list[int]]) -> np.ndarray:
        return encode_image(self.params, self.pixels(ids)).data

    def generate(self, items, max_new_tokens: int = 12) -> list[str]:
        out = []
        for s in range(0, len(items), self.batch_size):
            chunk = items[s:s + self.batch_size]
            qs = [self.tokenizer.encode(q) for _, q in chunk]
            vis = self.visual([i for i, _ in chunk], qs)
            out += [self.tokenizer.decode(ids) for ids in generate_ids(self.params, vis, qs, max_new_tokens)]
        return out

    def logprobs(self, items, include_eos: bool = False) -> list[np.ndarray]:
        """Per-token log-probs of ``answer`` for each ``(image id, question, answer)``."""
        out = []
        for s in range(0, len(items), self.batch_size):
            chunk = items[s:s + self.batch_size]
            qs = [self.tokenizer.encode(q) for _, q, _ in chunk]
            batch = make_batch(qs, [self.tokenizer.encode(a) for _, _, a in chunk], self.params.config,
                               include_eos=include_eos)
            vis = self.visual([i for i, _, _ in chunk], qs)
            out += token_logprobs(forward(self.params, Tensor(vis), batch.ids).logits.data, batch)
        return out
