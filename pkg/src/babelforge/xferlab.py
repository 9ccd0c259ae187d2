"""Transfer experiments on synthetic cipher languages: frozen-encoder topic
probes, and the language-count / sampling-alpha / vocabulary-capacity sweeps.

Every sweep varies exactly one factor; points carry a fingerprint of the
fixed configuration so that is machine-checkable. All trend conclusions are
aggregated over multiple seeds.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from . import trainer as trainer_mod
from .corpus import Document
from .model import ModelParams, TransformerConfig, param_count
from .sampler import MaskedBatch, smoothed_distribution
from .synthlang import SyntheticLangSpec, generate_languages, geometric_profile, language_code
from .tokenizer import UnigramVocab, train_unigram, viterbi_encode
from .util import config_fingerprint, spawn_rng, stable_hash

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Sentence encoding and the logistic probe.
# ---------------------------------------------------------------------------

def encode_sentences(params: ModelParams, vocab: UnigramVocab, texts: list[str],
                     seq_len: int, batch_rows: int = 64) -> np.ndarray:
    """Mean-pooled final hidden states, one vector per sentence."""
    pooled = []
    for start in range(0, len(texts), batch_rows):
        chunk = texts[start:start + batch_rows]
        toks = np.full((len(chunk), seq_len), vocab.pad_id, dtype=np.int64)
        for i, text in enumerate(chunk):
            ids = [vocab.bos_id] + viterbi_encode(vocab, text)[:seq_len - 2] + [vocab.eos_id]
            toks[i, :len(ids)] = ids
        attn = toks != vocab.pad_id
        batch = MaskedBatch(tokens=toks, labels=np.full_like(toks, -1),
                            lang_tags=[""] * len(chunk), attn_mask=attn)
        _, vecs = model_mod.forward(params, batch, train_mode=False)
        pooled.append(vecs)
    return np.concatenate(pooled, axis=0)


def _fit_softmax_probe(x: np.ndarray, y: np.ndarray, n_classes: int,
                       iters: int = 300, lr: float = 0.5, l2: float = 1e-4):
    """Full-batch multinomial logistic regression on standardized features.
    Returns (W, b, mean, std) for later scoring; deterministic."""
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-8
    xs = (x - mean) / std
    n, d = xs.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(iters):
        z = xs @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xs.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b, mean, std


def _probe_accuracy(probe, x: np.ndarray, y: np.ndarray) -> float:
    w, b, mean, std = probe
    z = ((x - mean) / std) @ w + b
    return float((z.argmax(axis=1) == y).mean())


@dataclass
class ProbeResult:
    config_id: str
    per_lang: dict[str, float]
    hi_langs: list[str]
    lo_langs: list[str]

    @property
    def hi_avg(self) -> float:
        return float(np.mean([self.per_lang[l] for l in self.hi_langs]))

    @property
    def lo_avg(self) -> float:
        return float(np.mean([self.per_lang[l] for l in self.lo_langs]))


def _probe_split(docs: list[Document], lang: str, n_eval: int, n_train: int):
    """Deterministic disjoint train/eval pools, ordered by source_id hash."""
    pool = [d for d in docs if d.lang == lang and d.topic is not None]
    pool.sort(key=lambda d: stable_hash(d.source_id))
    return pool[n_eval:n_eval + n_train], pool[:n_eval]


def probe_transfer(params: ModelParams, vocab: UnigramVocab, docs: list[Document],
                   train_lang: str, test_langs: list[str], n_train: int,
                   seed: int, seq_len: int = 32, n_eval: int = 120,
                   hi_langs: list[str] | None = None,
                   lo_langs: list[str] | None = None,
                   config_id: str = "") -> ProbeResult:
    """Fit a multinomial logistic probe on mean-pooled vectors of train_lang
    sentences and report topic accuracy per test language. The encoder is
    frozen: parameters are only ever read."""
    topics = sorted({d.topic for d in docs if d.topic is not None})
    topic_idx = {t: i for i, t in enumerate(topics)}

    train_pool, _ = _probe_split(docs, train_lang, n_eval, n_train)
    if not train_pool:
        raise ValueError(f"no labeled sentences for train language {train_lang}")
    x = encode_sentences(params, vocab, [d.text for d in train_pool], seq_len)
    y = np.array([topic_idx[d.topic] for d in train_pool])
    probe = _fit_softmax_probe(x, y, len(topics))

    per_lang: dict[str, float] = {}
    for lang in test_langs:
        _, eval_pool = _probe_split(docs, lang, n_eval, n_train)
        if not eval_pool:
            log.warning("probe_transfer: language %s absent, omitted", lang)
            continue
        xe = encode_sentences(params, vocab, [d.text for d in eval_pool], seq_len)
        ye = np.array([topic_idx[d.topic] for d in eval_pool])
        per_lang[lang] = _probe_accuracy(probe, xe, ye)
    return ProbeResult(config_id=config_id, per_lang=per_lang,
                       hi_langs=[l for l in (hi_langs or []) if l in per_lang],
                       lo_langs=[l for l in (lo_langs or []) if l in per_lang])


# ---------------------------------------------------------------------------
# Constant-parameter width solving.
# ---------------------------------------------------------------------------

def solve_width(target_params: int, template: TransformerConfig) -> int:
    """Largest hidden size (multiple of heads) whose parameter count stays
    within the target; exact search through param_count."""
    step = template.heads
    ratio = max(1, template.ffn // template.hidden)
    best = 0
    h = step
    while True:
        cfg = replace(template, hidden=h, ffn=ratio * h)
        if param_count(cfg) > target_params:
            break
        best = h
        h += step
    if best == 0:
        raise ValueError("no feasible width: target below the smallest model")
    return best


# ---------------------------------------------------------------------------
# Sweep harness.
# ---------------------------------------------------------------------------

SWEEP_DEFAULTS: dict[str, object] = {
    "sweep": "languages",          # languages | alpha | vocab
    "values": "2,4,7,12,20",
    "seeds": "0,1,2",
    # synthetic corpus
    "n_langs": 4,
    "overlap": 0.3,
    "base_sentences": 1600,
    "decay": 0.82,
    "floor_sentences": 150,
    "n_topics": 4,
    "nouns_per_topic": 14,
    "verbs_per_topic": 9,
    "adjs_per_topic": 7,
    "topic_purity": 0.92,
    # tokenizer
    "target_v": 500,
    "tokenizer_sample": 1600,
    # model / training
    "steps": 400,
    "batch_size": 16,
    "seq_len": 24,
    "mask_prob": 0.15,
    "alpha": 0.3,
    "layers": 2,
    "hidden": 32,
    "heads": 2,
    "dropout": 0.0,
    "peak_lr": 3e-3,
    "warmup_frac": 0.1,
    "clip_norm": 1.0,
    # probe
    "probe_train": 220,
    "probe_eval": 120,
    # curse-of-multilinguality recovery rerun
    "widened_hidden": 48,
}


def resolve_sweep_config(raw: dict) -> dict:
    config = dict(SWEEP_DEFAULTS)
    for key, value in raw.items():
        if key not in SWEEP_DEFAULTS:
            raise ValueError(f"unknown sweep config key: {key}")
        default = SWEEP_DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = type(default)(float(value)) if isinstance(default, int) \
                else type(default)(value)
        config[key] = value
    return config


def _parse_values(text: str, kind: str) -> list:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    return [float(p) if kind == "alpha" else int(float(p)) for p in parts]


@dataclass
class SweepPoint:
    x: float
    per_lang_mean: dict[str, float]
    per_lang_std: dict[str, float]
    hi_mean: float
    hi_std: float
    lo_mean: float
    lo_std: float
    results: list[ProbeResult] = field(default_factory=list, repr=False)


@dataclass
class SweepCurve:
    variable: str
    points: list[SweepPoint]
    fingerprint: str
    config: dict
    n_seeds: int
    extras: dict = field(default_factory=dict)

    def xs(self) -> list[float]:
        return [p.x for p in self.points]


def _aggregate_point(x: float, results: list[ProbeResult]) -> SweepPoint:
    langs = sorted(results[0].per_lang)
    mean = {l: float(np.mean([r.per_lang[l] for r in results])) for l in langs}
    std = {l: float(np.std([r.per_lang[l] for r in results], ddof=1))
           if len(results) > 1 else 0.0 for l in langs}
    his = [r.hi_avg for r in results if r.hi_langs]
    los = [r.lo_avg for r in results if r.lo_langs]
    agg = lambda v: (float(np.mean(v)),
                     float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
    hi_mean, hi_std = agg(his) if his else (float("nan"), 0.0)
    lo_mean, lo_std = agg(los) if los else (float("nan"), 0.0)
    return SweepPoint(x=x, per_lang_mean=mean, per_lang_std=std,
                      hi_mean=hi_mean, hi_std=hi_std,
                      lo_mean=lo_mean, lo_std=lo_std, results=results)


def train_tokenizer_smoothed(docs: list[Document], alpha: float, sample_total: int,
                      target_v: int, seed: int) -> UnigramVocab:
    """Train the shared vocabulary on an alpha-smoothed sample, mirroring the
    batch-sampling distribution."""
    texts: dict[str, list[str]] = {}
    for d in docs:
        texts.setdefault(d.lang, []).append(d.text)
    policy = smoothed_distribution({l: len(t) for l, t in texts.items()}, alpha)
    sample: list[str] = []
    for lang, q in zip(policy.langs, policy.q):
        want = int(round(q * sample_total))
        if want <= 0:
            continue
        pool = texts[lang]
        rng = spawn_rng(seed, "toksample", lang)
        idx = rng.integers(0, len(pool), size=want)
        sample.extend(pool[i] for i in idx)
    return train_unigram(sample, target_v)


def _pretrain_config(cfg: dict, seed: int, hidden: int | None = None,
                     ffn: int | None = None) -> dict:
    run = dict(trainer_mod.RUN_DEFAULTS)
    run.update(
        seed=seed, steps=cfg["steps"], batch_size=cfg["batch_size"],
        seq_len=cfg["seq_len"], mask_prob=cfg["mask_prob"], alpha=cfg["alpha"],
        layers=cfg["layers"], hidden=hidden or cfg["hidden"], heads=cfg["heads"],
        ffn=ffn or 0, dropout=cfg["dropout"], peak_lr=cfg["peak_lr"],
        warmup_frac=cfg["warmup_frac"], clip_norm=cfg["clip_norm"],
        eval_interval=0, ckpt_interval=0)
    return run


def _run_point(cfg: dict, spec: SyntheticLangSpec, seed: int,
               hidden: int | None = None, ffn: int | None = None,
               config_id: str = "") -> ProbeResult:
    """One sweep job: generate corpus, train tokenizer, pretrain, probe."""
    docs = generate_languages(spec, seed)
    vocab = train_tokenizer_smoothed(docs, cfg["alpha"], cfg["tokenizer_sample"],
                              cfg["target_v"], seed)
    run = _pretrain_config(cfg, seed, hidden=hidden, ffn=ffn)
    state, _ = trainer_mod.run_training(docs, vocab, run)

    langs = [language_code(i) for i in range(spec.n_langs)]
    sizes = dict(zip(langs, spec.size_profile))
    train_lang = max(langs, key=lambda l: (sizes[l], l))
    if cfg.get("_exclude_train_from_test"):
        test_langs = [l for l in langs if l != train_lang]
    else:
        test_langs = langs
    by_size = sorted(test_langs, key=lambda l: (-sizes[l], l))
    hi = sorted(by_size[:2])
    lo_pool = [l for l in by_size if l != train_lang]
    lo = sorted(lo_pool[-2:]) if len(lo_pool) >= 2 else lo_pool

    return probe_transfer(state.params, vocab, docs, train_lang, test_langs,
                          n_train=cfg["probe_train"], seed=seed,
                          seq_len=cfg["seq_len"], n_eval=cfg["probe_eval"],
                          hi_langs=hi, lo_langs=lo, config_id=config_id)


def _point_job(args):
    return _run_point(*args)


def _run_jobs(jobs_args: list, jobs: int) -> list[ProbeResult]:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_point_job, jobs_args))
    return [_point_job(a) for a in jobs_args]


def _check_fingerprints(point_configs: list[dict], swept_key: str) -> str:
    prints = {config_fingerprint(c, exclude=(swept_key,)) for c in point_configs}
    if len(prints) != 1:
        raise ValueError(f"sweep points disagree outside {swept_key}: {prints}")
    return prints.pop()


def sweep_languages(k_values: list[int], cfg: dict, seeds: list[int],
                    jobs: int = 1) -> SweepCurve:
    """Curse-of-multilinguality sweep: pretrain on the first k languages at
    fixed capacity and probe transfer from the largest language. The probe's
    training language is excluded from the test set so every reported number
    is genuine transfer. An extra widened-capacity rerun at max k is stored
    under extras["widened"]."""
    cfg = dict(cfg)
    cfg["_exclude_train_from_test"] = True
    max_k = max(k_values)
    full_profile = geometric_profile(cfg["base_sentences"], cfg["decay"], max_k,
                                     floor=cfg["floor_sentences"])
    point_configs = []
    jobs_args = []
    for k in k_values:
        if k > max_k:
            raise ValueError("k exceeds generated languages")
        spec = SyntheticLangSpec(
            n_langs=k, lexicon_overlap=cfg["overlap"],
            size_profile=full_profile[:k], n_topics=cfg["n_topics"],
            nouns_per_topic=cfg["nouns_per_topic"],
            verbs_per_topic=cfg["verbs_per_topic"],
            adjs_per_topic=cfg["adjs_per_topic"],
            topic_purity=cfg["topic_purity"])
        pc = {**{k2: v for k2, v in cfg.items() if not k2.startswith("_")},
              "n_langs": k}
        point_configs.append(pc)
        cid = config_fingerprint(pc)
        for seed in seeds:
            jobs_args.append((cfg, spec, seed, None, None, cid))
    fingerprint = _check_fingerprints(point_configs, "n_langs")

    flat = _run_jobs(jobs_args, jobs)
    points = []
    idx = 0
    for k in k_values:
        points.append(_aggregate_point(k, flat[idx:idx + len(seeds)]))
        idx += len(seeds)

    # widened-capacity rerun at max k (the Fig.2 capacity analog)
    spec = SyntheticLangSpec(
        n_langs=max_k, lexicon_overlap=cfg["overlap"],
        size_profile=full_profile, n_topics=cfg["n_topics"],
        nouns_per_topic=cfg["nouns_per_topic"],
        verbs_per_topic=cfg["verbs_per_topic"],
        adjs_per_topic=cfg["adjs_per_topic"], topic_purity=cfg["topic_purity"])
    wide_h = cfg["widened_hidden"]
    wide_args = [(cfg, spec, seed, wide_h, None, f"wide-{wide_h}") for seed in seeds]
    wide_results = _run_jobs(wide_args, jobs)
    curve = SweepCurve(variable="n_langs", points=points,
                       fingerprint=fingerprint,
                       config={k2: v for k2, v in cfg.items()
                               if not k2.startswith("_")},
                       n_seeds=len(seeds))
    curve.extras["widened"] = _aggregate_point(max_k, wide_results)
    curve.extras["widened_hidden"] = wide_h
    return curve


def _fixed_spec(cfg: dict) -> SyntheticLangSpec:
    profile = geometric_profile(cfg["base_sentences"], cfg["decay"],
                                cfg["n_langs"], floor=cfg["floor_sentences"])
    return SyntheticLangSpec(
        n_langs=cfg["n_langs"], lexicon_overlap=cfg["overlap"],
        size_profile=profile, n_topics=cfg["n_topics"],
        nouns_per_topic=cfg["nouns_per_topic"],
        verbs_per_topic=cfg["verbs_per_topic"],
        adjs_per_topic=cfg["adjs_per_topic"], topic_purity=cfg["topic_purity"])


def sweep_alpha(alpha_values: list[float], cfg: dict, seeds: list[int],
                jobs: int = 1) -> SweepCurve:
    """High/low-resource trade-off sweep over the sampling exponent."""
    if len(alpha_values) < 3:
        raise ValueError("need at least 3 alpha values")
    if any(a < 0 for a in alpha_values):
        raise ValueError("alpha must be >= 0")
    spec = _fixed_spec(cfg)
    point_configs = []
    jobs_args = []
    for a in alpha_values:
        pc = {**cfg, "alpha": a}
        point_configs.append(pc)
        cid = config_fingerprint(pc)
        for seed in seeds:
            jobs_args.append(({**cfg, "alpha": a}, spec, seed, None, None, cid))
    fingerprint = _check_fingerprints(point_configs, "alpha")
    flat = _run_jobs(jobs_args, jobs)
    points = []
    idx = 0
    for a in alpha_values:
        points.append(_aggregate_point(a, flat[idx:idx + len(seeds)]))
        idx += len(seeds)
    return SweepCurve(variable="alpha", points=points, fingerprint=fingerprint,
                      config=dict(cfg), n_seeds=len(seeds))


def sweep_vocab(v_values: list[int], cfg: dict, seeds: list[int],
                jobs: int = 1) -> SweepCurve:
    """Vocabulary-capacity sweep at a constant parameter budget: each V gets
    its own tokenizer and a solve_width-adjusted transformer."""
    spec = _fixed_spec(cfg)
    ratio = 4
    template = TransformerConfig(
        layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"],
        vocab_size=max(v_values), ffn=ratio * cfg["hidden"],
        max_seq=cfg["seq_len"], dropout=cfg["dropout"])
    budget = param_count(template)

    point_configs = []
    jobs_args = []
    widths = {}
    for v in v_values:
        width = solve_width(budget, replace(template, vocab_size=v, ffn=0))
        widths[v] = width
        achieved = param_count(replace(template, vocab_size=v, hidden=width,
                                       ffn=ratio * width))
        if abs(achieved - budget) / budget > 0.02:
            raise ValueError(
                f"V={v}: width {width} misses budget by "
                f"{abs(achieved - budget) / budget:.1%}")
        pc = {**cfg, "target_v": v}
        point_configs.append(pc)
        cid = config_fingerprint(pc)
        for seed in seeds:
            jobs_args.append(({**cfg, "target_v": v}, spec, seed, width,
                              ratio * width, cid))
    fingerprint = _check_fingerprints(point_configs, "target_v")
    flat = _run_jobs(jobs_args, jobs)
    points = []
    idx = 0
    for v in v_values:
        points.append(_aggregate_point(v, flat[idx:idx + len(seeds)]))
        idx += len(seeds)
    curve = SweepCurve(variable="target_v", points=points,
                       fingerprint=fingerprint, config=dict(cfg),
                       n_seeds=len(seeds))
    curve.extras["budget"] = budget
    curve.extras["widths"] = widths
    return curve


def run_sweep(raw_config: dict, jobs: int = 1) -> SweepCurve:
    """Dispatch from a flat sweep spec (the CLI entry point)."""
    cfg = resolve_sweep_config(raw_config)
    kind = cfg["sweep"]
    seeds = _parse_values(cfg["seeds"], "int")
    values = _parse_values(cfg["values"], "alpha" if kind == "alpha" else "int")
    fixed = {k: v for k, v in cfg.items() if k not in ("sweep", "values", "seeds")}
    if kind == "languages":
        return sweep_languages([int(v) for v in values], fixed, seeds, jobs)
    if kind == "alpha":
        return sweep_alpha(values, fixed, seeds, jobs)
    if kind == "vocab":
        return sweep_vocab([int(v) for v in values], fixed, seeds, jobs)
    raise ValueError(f"unknown sweep kind: {kind}")


# ---------------------------------------------------------------------------
# Curve (de)serialization for the report stage.
# ---------------------------------------------------------------------------

def curve_to_json(curve: SweepCurve) -> dict:
    def point_dict(p: SweepPoint) -> dict:
        return {"x": p.x, "per_lang_mean": p.per_lang_mean,
                "per_lang_std": p.per_lang_std,
                "hi_mean": p.hi_mean, "hi_std": p.hi_std,
                "lo_mean": p.lo_mean, "lo_std": p.lo_std,
                "seed_results": [
                    {"config_id": r.config_id, "per_lang": r.per_lang,
                     "hi_langs": r.hi_langs, "lo_langs": r.lo_langs}
                    for r in p.results]}

    extras = {k: (point_dict(v) if isinstance(v, SweepPoint) else v)
              for k, v in curve.extras.items()}
    return {"variable": curve.variable, "fingerprint": curve.fingerprint,
            "n_seeds": curve.n_seeds, "config": curve.config,
            "points": [point_dict(p) for p in curve.points], "extras": extras}


def curve_from_json(data: dict) -> SweepCurve:
    def point_from(d: dict) -> SweepPoint:
        results = [ProbeResult(config_id=r["config_id"], per_lang=r["per_lang"],
                               hi_langs=r["hi_langs"], lo_langs=r["lo_langs"])
                   for r in d.get("seed_results", [])]
        return SweepPoint(x=d["x"], per_lang_mean=d["per_lang_mean"],
                          per_lang_std=d["per_lang_std"],
                          hi_mean=d["hi_mean"], hi_std=d["hi_std"],
                          lo_mean=d["lo_mean"], lo_std=d["lo_std"],
                          results=results)

    extras = {k: (point_from(v) if isinstance(v, dict) and "per_lang_mean" in v else v)
              for k, v in data.get("extras", {}).items()}
    return SweepCurve(variable=data["variable"],
                      points=[point_from(p) for p in data["points"]],
                      fingerprint=data["fingerprint"], config=data["config"],
                      n_seeds=data["n_seeds"], extras=extras)


def save_curve(curve: SweepCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(curve_to_json(curve), f, indent=2, sort_keys=True)
        f.write("\n")


def load_curve(path: str) -> SweepCurve:
    with open(path, "r", encoding="utf-8") as f:
        return curve_from_json(json.load(f))
