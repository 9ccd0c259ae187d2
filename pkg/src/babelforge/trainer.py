"""Pretraining loop: Adam with linear warmup then linear decay, gradient
clipping, per-language held-out evaluation, checkpointing.

Training always runs to total_steps; validation perplexity is reported but
never used as a stopping criterion.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import corpus as corpus_mod
from . import model as model_mod
from .model import ModelParams, TransformerConfig
from .sampler import (LanguageStream, MaskedBatch, apply_masking, build_batch,
                      pack_sequences, smoothed_distribution)
from .tokenizer import UnigramVocab, load_vocab
from .util import spawn_rng, stable_hash, write_manifest

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-6


class TrainDivergedError(RuntimeError):
    """Raised on a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.peak_lr
        frac = (self.total_steps - step) / (self.total_steps - self.warmup_steps)
        return self.peak_lr * max(0.0, frac)


@dataclass
class TrainState:
    step: int
    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    schedule: LrSchedule
    rng_seed: int
    epoch_counters: dict[str, int] = field(default_factory=dict)


def init_train_state(config: TransformerConfig, schedule: LrSchedule,
                     seed: int) -> TrainState:
    params = model_mod.init_params(config, seed)
    return TrainState(step=0, params=params,
                      adam_m=model_mod.zeros_like_params(params),
                      adam_v=model_mod.zeros_like_params(params),
                      schedule=schedule, rng_seed=seed)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clip, accumulated in sorted name order for bitwise
    reproducibility. Returns the pre-clip norm."""
    sq = 0.0
    for name in sorted(grads):
        sq += float((grads[name].astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for name in sorted(grads):
            grads[name] *= scale
    return norm


def adam_step(state: TrainState, grads: dict[str, np.ndarray]) -> TrainState:
    """One Adam update (beta1=0.9, beta2=0.98, eps=1e-6, bias correction);
    the learning rate comes from the schedule at the pre-update step."""
    for name in sorted(grads):
        if not np.isfinite(grads[name]).all():
            raise ValueError(f"non-finite gradient in {name}")
    lr = state.schedule.at(state.step)
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name in sorted(grads):
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        state.params.tensors[name] -= np.asarray(lr * update,
                                                 dtype=state.params.dtype)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    step: int
    losses: dict[str, float]          # per-language held-out MLM loss
    accuracies: dict[str, float]      # per-language masked-token top-1
    aggregate_loss: float             # q-weighted over evaluated languages


def evaluate_mlm(params: ModelParams, heldout_texts: dict[str, list[str]],
                 vocab: UnigramVocab, policy, seq_len: int, mask_prob: float,
                 eval_seed: int = 104729, batch_rows: int = 64) -> EvalReport:
    """Deterministic held-out evaluation. Packing keeps the given document
    order and the masking rng restarts identically per language, so metrics
    depend only on content: a copied language under a new code scores
    identically (the tag is bookkeeping)."""
    losses: dict[str, float] = {}
    accs: dict[str, float] = {}
    for lang in policy.langs:
        texts = heldout_texts.get(lang, [])
        if not texts:
            log.warning("evaluate_mlm: no held-out documents for %s, omitted", lang)
            continue
        sequences = pack_sequences(sorted(texts), vocab, seq_len)
        rng = spawn_rng(eval_seed, "evalmask")
        ce_sum, n_tokens, n_correct = 0.0, 0, 0
        for start in range(0, len(sequences), batch_rows):
            rows = sequences[start:start + batch_rows]
            toks = np.empty((len(rows), seq_len), dtype=np.int64)
            labs = np.empty((len(rows), seq_len), dtype=np.int64)
            attn = np.empty((len(rows), seq_len), dtype=bool)
            for i, seq in enumerate(rows):
                attn[i] = seq != vocab.pad_id
                toks[i], labs[i] = apply_masking(seq, mask_prob, rng, vocab)
            batch = MaskedBatch(tokens=toks, labels=labs,
                                lang_tags=[lang] * len(rows), attn_mask=attn)
            flat = batch.masked_labels()
            if flat.size == 0:
                continue
            logits, _ = model_mod.forward(params, batch, train_mode=False)
            loss, _ = model_mod.mlm_loss(logits, flat)
            ce_sum += loss * flat.size
            n_tokens += flat.size
            n_correct += int((logits.argmax(axis=-1) == flat).sum())
        if n_tokens == 0:
            log.warning("evaluate_mlm: no masked tokens for %s, omitted", lang)
            continue
        losses[lang] = ce_sum / n_tokens
        accs[lang] = n_correct / n_tokens

    if not losses:
        raise ValueError("no language produced held-out metrics")
    weights = np.array([policy.q_for(lang) for lang in losses])
    weights = weights / weights.sum()
    aggregate = float(np.dot(weights, np.array(list(losses.values()))))
    return EvalReport(step=0, losses=losses, accuracies=accs,
                      aggregate_loss=aggregate)


# ---------------------------------------------------------------------------
# Run configuration and the training loop.
# ---------------------------------------------------------------------------

RUN_DEFAULTS: dict[str, object] = {
    "corpus": "",            # JSONL corpus path
    "vocab": "",             # unigram vocab TSV path
    "out_dir": "run",
    "seed": 0,
    "steps": 500,
    "batch_size": 16,
    "seq_len": 32,
    "mask_prob": 0.15,
    "alpha": 0.3,
    "layers": 2,
    "hidden": 32,
    "heads": 2,
    "ffn": 0,
    "max_seq": 0,            # 0 resolves to seq_len
    "dropout": 0.0,
    "peak_lr": 5e-4,
    "warmup_frac": 0.1,
    "clip_norm": 1.0,
    "eval_interval": 100,
    "ckpt_interval": 200,
    "heldout_permille": 20,
}


def resolve_run_config(raw: dict) -> dict:
    """Fill defaults and coerce string values to the default's type;
    unknown keys are an error so typos cannot silently change a run."""
    config = dict(RUN_DEFAULTS)
    for key, value in raw.items():
        if key not in RUN_DEFAULTS:
            raise ValueError(f"unknown run config key: {key}")
        default = RUN_DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = type(default)(float(value)) if isinstance(default, int) \
                else type(default)(value)
        config[key] = value
    return config


def split_heldout(docs, permille: int):
    """Stable split by source_id hash (held-out disjoint from training)."""
    train, heldout = [], []
    for doc in docs:
        (heldout if stable_hash(doc.source_id) % 1000 < permille else train).append(doc)
    return train, heldout


def _metrics_header(config: dict) -> str:
    lines = [f"# {key} = {config[key]}" for key in sorted(config)]
    lines.append("step,lang,split,loss,acc,lr,tokens_seen")
    return "\n".join(lines) + "\n"


def _metric_row(step, lang, split, loss, acc, lr, tokens_seen) -> str:
    return (f"{step},{lang},{split},{loss:.6f},{acc:.6f},"
            f"{lr:.8g},{tokens_seen}\n")


class _NullWriter:
    def write(self, _row: str) -> None:
        pass


def run_training(train_docs, vocab: UnigramVocab, config: dict,
                 heldout_texts: dict[str, list[str]] | None = None,
                 metrics=None, checkpoint_fn=None):
    """Core pretraining loop over in-memory documents.

    `config` is a resolved run config; `metrics` is any object with write()
    (rows only, no header); `checkpoint_fn(state)` runs at ckpt_interval.
    Returns (TrainState, SamplingPolicy). Never stops early on a validation
    plateau: always runs to `steps`.
    """
    metrics = metrics or _NullWriter()
    heldout_texts = heldout_texts or {}
    seed = config["seed"]
    seq_len = config["seq_len"]
    steps = config["steps"]

    model_config = TransformerConfig(
        layers=config["layers"], hidden=config["hidden"], heads=config["heads"],
        vocab_size=vocab.size, ffn=config["ffn"],
        max_seq=config["max_seq"] or seq_len, dropout=config["dropout"])

    stats = corpus_mod.compute_stats(train_docs)
    policy = smoothed_distribution({st.lang: st.n_sentences for st in stats},
                                   config["alpha"])
    texts_by_lang: dict[str, list[str]] = {}
    for doc in train_docs:
        texts_by_lang.setdefault(doc.lang, []).append(doc.text)
    streams = {lang: LanguageStream(texts_by_lang[lang], vocab, seq_len, seed, lang)
               for lang in policy.langs}

    schedule = LrSchedule(peak_lr=config["peak_lr"],
                          warmup_steps=int(round(config["warmup_frac"] * steps)),
                          total_steps=steps)
    state = init_train_state(model_config, schedule, seed)
    batch_rng = spawn_rng(seed, "batches")
    dropout_rng = spawn_rng(seed, "dropout")
    tokens_seen = 0

    def write_eval(report: EvalReport, step: int, lr: float):
        for lang in sorted(report.losses):
            metrics.write(_metric_row(step, lang, "heldout", report.losses[lang],
                                      report.accuracies[lang], lr, tokens_seen))
        metrics.write(_metric_row(step, "all", "heldout", report.aggregate_loss,
                                  0.0, lr, tokens_seen))

    for _ in range(steps):
        lr = schedule.at(state.step)
        batch = build_batch(streams, policy, config["batch_size"], seq_len,
                            config["mask_prob"], batch_rng)
        loss, grads, acc = model_mod.loss_and_grads(
            state.params, batch, train_mode=True, rng=dropout_rng)
        if not math.isfinite(loss):
            raise TrainDivergedError(f"non-finite loss at step {state.step}",
                                     getattr(checkpoint_fn, "last_path", None))
        tokens_seen += int(batch.attn_mask.sum())
        metrics.write(_metric_row(state.step, "all", "train", loss, acc, lr,
                                  tokens_seen))
        clip_gradients(grads, config["clip_norm"])
        adam_step(state, grads)
        state.epoch_counters = {l: s.epoch for l, s in streams.items()}

        if config["eval_interval"] > 0 and state.step % config["eval_interval"] == 0 \
                and state.step < steps and heldout_texts:
            report = evaluate_mlm(state.params, heldout_texts, vocab, policy,
                                  seq_len, config["mask_prob"])
            write_eval(report, state.step, lr)
        if checkpoint_fn and config["ckpt_interval"] > 0 \
                and state.step % config["ckpt_interval"] == 0:
            checkpoint_fn(state)

    if heldout_texts:
        report = evaluate_mlm(state.params, heldout_texts, vocab, policy,
                              seq_len, config["mask_prob"])
        write_eval(report, state.step, schedule.at(state.step))
    return state, policy


def save_train_state(path: str, state: TrainState, run_config: dict | None = None):
    named = dict(state.params.tensors)
    named.update({f"adam_m.{k}": v for k, v in state.adam_m.items()})
    named.update({f"adam_v.{k}": v for k, v in state.adam_v.items()})
    extra = {"step": state.step, "rng_seed": state.rng_seed,
             "peak_lr": state.schedule.peak_lr,
             "warmup_steps": state.schedule.warmup_steps,
             "total_steps": state.schedule.total_steps,
             "epoch_counters": state.epoch_counters}
    if run_config is not None:
        extra["run_config"] = {k: run_config[k] for k in sorted(run_config)}
    model_mod.save_checkpoint(path, state.params.config, named, extra)


def train(run_config: dict) -> tuple[str, str]:
    """Full pretraining run from files; returns (checkpoint path, metrics
    log path). A non-finite loss aborts with the last good checkpoint kept."""
    config = resolve_run_config(run_config)
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seed = config["seed"]

    docs = corpus_mod.read_jsonl(config["corpus"])
    vocab = load_vocab(config["vocab"])
    train_docs, heldout_docs = split_heldout(docs, config["heldout_permille"])
    heldout_texts: dict[str, list[str]] = {}
    for doc in heldout_docs:
        heldout_texts.setdefault(doc.lang, []).append(doc.text)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")

    def checkpoint_fn(state: TrainState):
        save_train_state(ckpt_path, state, config)
        checkpoint_fn.last_path = ckpt_path

    checkpoint_fn.last_path = None

    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_metrics_header(config))
        state, _ = run_training(train_docs, vocab, config,
                                heldout_texts=heldout_texts, metrics=f,
                                checkpoint_fn=checkpoint_fn)

    save_train_state(ckpt_path, state, config)
    write_manifest(out_dir, "pretrain", config,
                   inputs=[config["corpus"], config["vocab"]],
                   outputs=[ckpt_path, metrics_path], seed=seed)
    return ckpt_path, metrics_path


def load_train_state(path: str) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from a checkpoint; returns (state, extra)."""
    config, tensors, extra = model_mod.load_checkpoint(path)
    params_t, adam_m, adam_v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam_m."):
            adam_m[name[len("adam_m."):]] = arr
        elif name.startswith("adam_v."):
            adam_v[name[len("adam_v."):]] = arr
        else:
            params_t[name] = arr
    params = ModelParams(config, params_t)
    schedule = LrSchedule(peak_lr=extra["peak_lr"],
                          warmup_steps=extra["warmup_steps"],
                          total_steps=extra["total_steps"])
    state = TrainState(step=extra["step"], params=params, adam_m=adam_m,
                       adam_v=adam_v, schedule=schedule,
                       rng_seed=extra["rng_seed"],
                       epoch_counters=extra.get("epoch_counters", {}))
    return state, extra
