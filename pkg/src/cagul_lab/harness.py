"""Experiment orchestration behind the ``python -m cagul_lab`` command line.

Every command reads a flat ``key = value`` config (plus flag overrides),
works under one output directory with fixed file names, and archives the
resolved config it ran with::

    <out>/data/                     dataset (datagen)
    <out>/models/pretrained.tvlm    pre-finetune model
    <out>/models/finetune.tvlm      base model every unlearning method starts from
    <out>/models/<tag>.tvlm|.cgul   unlearned models
    <out>/logs/<tag>.json           training logs (trainable params, seconds per epoch)
    <out>/reports/<tag>.csv|.txt    metric reports
    <out>/probe/attention.jsonl     per-sample attention scores and selected tokens
    <out>/sweep/<param>.csv|.txt    sweep series
    <out>/configs/<command>-<tag>.txt
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, cagul, data, metrics, probe, vlm

log = logging.getLogger(__name__)

UNLEARN_METHODS = ("cagul",) + baselines.METHODS
EVAL_TARGETS = ("pretrain", "finetune") + UNLEARN_METHODS
CSV_COLUMNS = ("method", "split", "metric", "value", "seed", "k", "m_tilde", "params_trainable", "seconds_per_epoch")
TIMING_COLUMNS = ("seconds_per_epoch",)


class UsageError(ValueError):
    """Bad config, flag or missing input; maps to exit code 1."""


@dataclass
class ExperimentConfig:
    # dataset
    m: int = 20
    n: int = 8
    n_private: int = 2
    m_general: int = 10
    data_seed: int = 0
    m_tilde: int = 4
    split_seed: int = 0
    # model
    attention_mode: str = "cross_attention"
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    model_seed: int = 0
    # pretraining and finetuning
    pretrain_images: int = 400
    pretrain_epochs: int = 30
    replay: int = 240
    finetune_epochs: int = 60
    finetune_lr: float = 3e-3
    finetune_batch: int = 16
    # unlearning
    method: str = "cagul"
    ablation: str = "none"
    loss_variant: str = "po_gd"
    k: int = 0
    cagul_lr: float = 1e-2
    epochs_discriminator: int = 2
    epochs_joint: int = 30
    unlearn_epochs: int = 10
    unlearn_lr: float = 0.0
    unlearn_batch: int = 4
    # evaluation
    k_percent: float = 20.0
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.method not in EVAL_TARGETS:
            raise UsageError(f"unknown method {self.method!r}; valid: {', '.join(EVAL_TARGETS)}")
        if self.ablation not in cagul.ABLATIONS:
            raise UsageError(f"unknown ablation {self.ablation!r}; valid: {', '.join(cagul.ABLATIONS)}")
        if self.loss_variant not in cagul.LOSS_VARIANTS:
            raise UsageError(f"unknown loss variant {self.loss_variant!r}; valid: {', '.join(cagul.LOSS_VARIANTS)}")
        if not 0 <= self.m_tilde <= self.m:
            raise UsageError(f"m_tilde={self.m_tilde} outside [0, {self.m}]")
        if self.k < 0:
            raise UsageError("k must be >= 0 (0 selects the default)")
        return self

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    kind = type(_FIELDS[key].default)
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = coerce(key, raw)
        except UsageError as e:
            raise UsageError(f"{source}:{n}: {e}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values).validate()


def resolved_k(cfg: ExperimentConfig, n_v: int = 16) -> int:
    return cfg.k if cfg.k > 0 else cagul.default_k(n_v)


def tag(cfg: ExperimentConfig, method: str | None = None) -> str:
    """Deterministic artifact name for a method run."""
    method = method or cfg.method
    if method in ("pretrain", "finetune"):
        return method
    parts = [method]
    if method == "cagul":
        if cfg.ablation != "none":
            parts.append(cfg.ablation)
        if cfg.loss_variant != "po_gd":
            parts.append(cfg.loss_variant)
        parts.append(f"k{resolved_k(cfg)}")
    parts += [f"m{cfg.m_tilde}", f"s{cfg.seed}"]
    return "-".join(parts)


class Workspace:
    """Lazily loaded shared state for one output directory."""

    def __init__(self, out, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self._ds = None

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def archive_config(self, command: str, name: str | None = None) -> Path:
        p = self.path("configs", f"{command}-{name}.txt" if name else f"{command}.txt")
        p.write_text(self.cfg.to_text())
        return p

    # -- inputs ------------------------------------------------------------
    @property
    def dataset(self) -> data.Dataset:
        if self._ds is None:
            root = self.out / "data"
            if not (root / "manifest.jsonl").is_file():
                raise UsageError(f"dataset not found under {root}; run datagen first")
            self._ds = data.load(root)
        return self._ds

    @property
    def tokenizer(self) -> vlm.Tokenizer:
        return vlm.Tokenizer(self.dataset.vocab)

    @property
    def vlm_config(self) -> vlm.VLMConfig:
        c = self.cfg
        return vlm.VLMConfig(vocab_size=len(self.dataset.vocab), d_model=c.d_model, n_layers=c.n_layers,
                             n_heads=c.n_heads, attention_mode=c.attention_mode).validate()

    def split(self) -> data.SplitSpec:
        return data.split(self.dataset, self.cfg.m_tilde, self.cfg.split_seed)

    def load_model(self, name: str) -> vlm.VLMParams:
        p = self.out / "models" / f"{name}.tvlm"
        if not p.is_file():
            raise UsageError(f"checkpoint not found: {p}")
        return vlm.load_params(p, self.vlm_config)

    def pretrain_data(self):
        return data.pretrain_corpus(self.dataset, self.cfg.pretrain_images, seed=self.cfg.data_seed)

    def replay_examples(self):
        recs, imgs = self.pretrain_data()
        n = min(self.cfg.replay, len(recs))
        pick = np.random.default_rng(self.cfg.seed).choice(len(recs), n, replace=False)
        return vlm.examples_from([recs[i] for i in pick], imgs, self.tokenizer)

    def all_forms(self, records) -> list[vlm.TrainExample]:
        """Training examples for every surface form of each question."""
        expanded = [dataclasses.replace(r, question=q) for r in records for q in [r.question, *r.q_paraphrases]]
        return vlm.examples_from(expanded, self.dataset.images, self.tokenizer)

    def write_log(self, name: str, entry: dict) -> Path:
        p = self.path("logs", f"{name}.json")
        p.write_text(json.dumps(entry, indent=1, sort_keys=True))
        return p

    def read_log(self, name: str) -> dict:
        p = self.out / "logs" / f"{name}.json"
        return json.loads(p.read_text()) if p.is_file() else {}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_datagen(ws: Workspace) -> data.Dataset:
    c = ws.cfg
    ds = data.generate(m=c.m, n=c.n, n_private=c.n_private, seed=c.data_seed, m_general=c.m_general)
    data.save(ds, ws.out / "data")
    ws._ds = ds
    ws.archive_config("datagen")
    log.info("wrote %d records for %d individuals", len(ds.records), len(ds.individuals()))
    return ds


def run_finetune(ws: Workspace) -> tuple[vlm.VLMParams, dict]:
    """Pretrain on the generic corpus, then finetune on the dataset plus replay."""
    c = ws.cfg
    ds, tok = ws.dataset, ws.tokenizer
    recs, imgs = ws.pretrain_data()
    init = vlm.init_vlm(ws.vlm_config, c.model_seed)
    t0 = time.perf_counter()
    pre, pre_hist = vlm.finetune(init, vlm.examples_from(recs, imgs, tok), lr=c.finetune_lr,
                                 batch_size=c.finetune_batch, epochs=c.pretrain_epochs, seed=c.seed)
    pre_sec = (time.perf_counter() - t0) / max(c.pretrain_epochs, 1)
    pre.set_frozen(True, "patch.")
    vlm.save_params(pre, ws.path("models", "pretrained.tvlm"))
    examples = ws.all_forms(ds.records) + ws.replay_examples()
    t0 = time.perf_counter()
    base, hist = vlm.finetune(pre, examples, lr=c.finetune_lr, batch_size=c.finetune_batch,
                              epochs=c.finetune_epochs, seed=c.seed)
    sec = (time.perf_counter() - t0) / max(c.finetune_epochs, 1)
    vlm.save_params(base, ws.path("models", "finetune.tvlm"))
    entry = {"method": "finetune", "params_trainable": base.count(trainable_only=True),
             "seconds_per_epoch": sec, "loss": hist, "pretrain_loss": pre_hist,
             "pretrain_seconds_per_epoch": pre_sec}
    ws.write_log("finetune", entry)
    ws.write_log("pretrain", {"method": "pretrain", "params_trainable": init.count(trainable_only=True),
                              "seconds_per_epoch": pre_sec, "loss": pre_hist})
    ws.archive_config("finetune")
    return base, entry


def _cagul_config(c: ExperimentConfig) -> cagul.CagulConfig:
    return cagul.CagulConfig(k=c.k or None, epochs_discriminator=c.epochs_discriminator,
                             epochs_joint=c.epochs_joint, lr=c.cagul_lr, batch_size=c.unlearn_batch,
                             ablation=c.ablation, loss_variant=c.loss_variant, seed=c.seed)


def _monitor(ws: Workspace, sp: data.SplitSpec):
    """Early-stop probe for gradient-ascent runs: retain NLL on a fixed subset and forget EM."""
    tok = ws.tokenizer
    sub = vlm.examples_from(sp.retain[::8], ws.dataset.images, tok)

    def entry(runner):
        params = runner.params
        images, batch = vlm.batch_inputs(params, sub)
        if isinstance(runner, cagul.CagulModel):
            logits, _ = runner.forward([r.id for r in sp.retain[::8]], [tok.encode(r.question) for r in sp.retain[::8]],
                                       batch.ids)
        else:
            logits = vlm.forward(params, vlm.encode_image(params, images), batch.ids).logits
        nll = float(vlm.token_nll(logits, batch).data)
        em = metrics.evaluate(runner, {"forget": sp.forget}).splits["forget"]["exact_match"] if sp.forget else 0.0
        return {"retain_nll": nll, "forget_em": em}
    return entry


def run_unlearn(ws: Workspace) -> tuple[str, dict]:
    c = ws.cfg
    if c.method not in UNLEARN_METHODS:
        raise UsageError(f"unknown method {c.method!r}; valid: {', '.join(UNLEARN_METHODS)}")
    ds, tok, sp = ws.dataset, ws.tokenizer, ws.split()
    name = tag(c)
    base = ws.load_model("finetune")
    mon = _monitor(ws, sp)
    if c.method == "cagul":
        model, tlog = cagul.train_cagul(base, sp.forget, sp.retain, _cagul_config(c), tok, ds.images,
                                        eval_hook=mon)
        model.save(ws.path("models", f"{name}.cgul"))
        entry = {"discriminator_accuracy": tlog.discriminator_accuracy, "epochs": tlog.epochs,
                 "stopped_early": tlog.stopped_early, "params_trainable": tlog.trainable_params,
                 "seconds_per_epoch": tlog.seconds_per_epoch}
    elif c.method == "retrain":
        pre = ws.load_model("pretrained")
        retain = ws.all_forms(sp.retain) + ws.replay_examples()
        params, blog = baselines.retrain(pre, retain, lr=c.unlearn_lr or c.finetune_lr, batch_size=c.finetune_batch,
                                         epochs=c.finetune_epochs, seed=c.seed)
        vlm.save_params(params, ws.path("models", f"{name}.tvlm"))
        entry = {"epochs": blog.epochs, "params_trainable": blog.trainable_params,
                 "seconds_per_epoch": blog.seconds_per_epoch}
    else:
        bcfg = baselines.BaselineConfig(c.method, lr=c.unlearn_lr or None, epochs=c.unlearn_epochs,
                                        batch_size=c.unlearn_batch, seed=c.seed)
        fx = vlm.examples_from(sp.forget, ds.images, tok)
        rx = vlm.examples_from(sp.retain, ds.images, tok)
        params, blog = baselines.unlearn_finetune(
            base, fx, rx, bcfg, refusal_ids=tok.encode(data.REFUSAL),
            monitor=lambda p: mon(vlm.Runner(p, tok, ds.images)))
        vlm.save_params(params, ws.path("models", f"{name}.tvlm"))
        entry = {"epochs": blog.epochs, "history": blog.history, "stopped_early": blog.stopped_early,
                 "params_trainable": blog.trainable_params, "seconds_per_epoch": blog.seconds_per_epoch}
    entry.update(method=c.method, tag=name, k=resolved_k(c) if c.method == "cagul" else None)
    ws.write_log(name, entry)
    ws.archive_config("unlearn", name)
    return name, entry


def runner_for(ws: Workspace, method: str | None = None):
    """Load the evaluable model for ``method`` (default: the config's)."""
    c = ws.cfg
    method = method or c.method
    name = tag(c, method)
    ds, tok = ws.dataset, ws.tokenizer
    if method == "cagul":
        p = ws.out / "models" / f"{name}.cgul"
        if not p.is_file():
            raise UsageError(f"checkpoint not found: {p}")
        return cagul.CagulModel.load(p, ws.load_model("finetune"), tok, ds.images), name
    model_name = "pretrained" if method == "pretrain" else name
    return vlm.Runner(ws.load_model(model_name), tok, ds.images), name


def run_eval(ws: Workspace, method: str | None = None) -> metrics.MetricReport:
    c = ws.cfg
    method = method or c.method
    runner, name = runner_for(ws, method)
    sp = ws.split()
    report = metrics.evaluate(runner, {"forget": sp.forget, "retain": sp.retain, "nonprivate": sp.nonprivate,
                                       "general": ws.dataset.general}, c.k_percent)
    counts = {"forget": len(sp.forget), "retain": len(sp.retain), "nonprivate": len(sp.nonprivate),
              "general": len(ws.dataset.general)}
    for split, n in counts.items():
        report.splits.setdefault(split, {})["count"] = n
    lg = ws.read_log(name)
    report.trainable_param_count = int(lg.get("params_trainable", 0))
    report.seconds_per_epoch = float(lg.get("seconds_per_epoch", 0.0))
    rows = report_rows(method, report, c)
    write_csv(ws.path("reports", f"{name}.csv"), rows)
    ws.path("reports", f"{name}.txt").write_text(format_table([(name, report)]))
    ws.archive_config("eval", name)
    return report


def run_probe(ws: Workspace, layer: int = 0) -> Path:
    """Write one JSON line per dataset record: attention scores and the selected tokens."""
    base = ws.load_model("finetune")
    tok, ds = ws.tokenizer, ws.dataset
    k = resolved_k(ws.cfg, base.config.n_visual_tokens)
    out = ws.path("probe", "attention.jsonl")
    recs = ds.records
    vis = vlm.encode_image(base, np.stack([ds.image(r.id) for r in recs])).data
    res = probe.probe(base, vis, [tok.encode(r.question) for r in recs], k, layer=layer)
    with open(out, "w") as f:
        for r, s in zip(recs, res):
            f.write(json.dumps({"id": r.id, "question": r.question, "layer": layer,
                                "alpha": [float(a) for a in s.alpha], "K": s.indices}) + "\n")
    ws.archive_config("probe-attention")
    return out


def run_sweep(ws: Workspace, param: str, values: list) -> list[dict]:
    """Unlearn and evaluate once per value of ``k`` or ``m_tilde``."""
    if param not in ("k", "m_tilde"):
        raise UsageError(f"sweep parameter must be k or m_tilde, got {param!r}")
    if param == "k" and ws.cfg.method != "cagul":
        raise UsageError("a k sweep needs method = cagul")
    rows, table = [], []
    orig = ws.cfg
    try:
        for v in values:
            ws.cfg = orig.replace(**{param: int(v)}).validate()
            name, _ = run_unlearn(ws)
            rep = run_eval(ws)
            rows += report_rows(ws.cfg.method, rep, ws.cfg)
            table.append((name, rep))
    finally:
        ws.cfg = orig
    write_csv(ws.path("sweep", f"{param}.csv"), rows)
    ws.path("sweep", f"{param}.txt").write_text(format_table(table))
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def report_rows(method: str, report: metrics.MetricReport, cfg: ExperimentConfig) -> list[dict]:
    k = resolved_k(cfg) if method == "cagul" else ""
    return [{"method": method, "split": split, "metric": metric, "value": value, "seed": cfg.seed,
             "k": k, "m_tilde": cfg.m_tilde, "params_trainable": report.trainable_param_count,
             "seconds_per_epoch": report.seconds_per_epoch}
            for split, metric, value in report.rows()]


def write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# (header group, column label, split, metric)
TABLE_COLUMNS = (
    ("Forget", "Rouge-", "forget", "rouge_l"),
    ("Forget", "EM-", "forget", "exact_match"),
    ("Forget", "APE-", "forget", "ape"),
    ("Forget", "MinK-", "forget", "min_k"),
    ("Retain D_r", "Rouge+", "retain", "rouge_l"),
    ("Retain D_np", "Rouge+", "nonprivate", "rouge_l"),
    ("Retain D_np", "EM+", "nonprivate", "exact_match"),
    ("Retain D_np", "TR", "nonprivate", "truth_ratio"),
    ("General", "EM+", "general", "exact_match"),
)


def format_table(rows) -> str:
    """Aligned plain-text table; ``-`` marks lower-is-better, ``+`` higher-is-better, TR is the raw ratio."""
    head1 = ["", *(g for g, *_ in TABLE_COLUMNS), "", ""]
    head2 = ["Method", *(c for _, c, *_ in TABLE_COLUMNS), "Params", "s/epoch"]
    body = []
    for name, rep in rows:
        cells = [name]
        for _, _, split, metric in TABLE_COLUMNS:
            v = rep.splits.get(split, {}).get(metric)
            cells.append("n/a" if v is None else f"{v:.3f}")
        cells += [str(rep.trainable_param_count), f"{rep.seconds_per_epoch:.3f}"]
        body.append(cells)
    grid = [head1, head2, *body]
    widths = [max(len(r[i]) for r in grid) for i in range(len(head2))]
    # blank repeated group labels so each group name prints once
    prev = None
    for i, g in enumerate(head1):
        head1[i], prev = ("" if g == prev else g), g
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in grid]
    lines.insert(2, "-" * len(lines[1]))
    return "\n".join(lines) + "\n"
