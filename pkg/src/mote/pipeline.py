"""End-to-end assembly and evaluation protocols.

Every heavy artifact (corpus, stage-1 codecs, trained system, retrieval
extractor) is cached on disk under a content hash of the exact config that
produced it, so test fixtures and the CLI share one set of trained models.
Systems handed out for sampling are always the reloaded checkpoint, never
the in-memory training result, so results are reproducible across
processes despite float32 storage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, nn
from .checkpoint import load_checkpoint, save_checkpoint
from .med import MedConfig, MotionEncoderDecoder, reconstruction_rmse
from .metrics import (ExtractorConfig, RetrievalExtractor, bleu, fid,
                      m_modality, mm_dist, r_precision,
                      train_retrieval_extractor, text_metrics)
from .mtdm import MtdmConfig, UnifiedDenoiser
from .sampler import (GenerationSystem, GuidanceConfig, LatentStats,
                      sample_joint, sample_motion_to_text,
                      sample_text_to_motion, sample_unconditional)
from .schedule import build_schedule
from .ted import TedConfig, TextEncoderDecoder, exact_match_rate
from .trainer import TrainConfig, train_denoiser, train_med, train_ted

DEFAULT_CACHE = Path(".cache")


@dataclass
class PipelineConfig:
    seeds_per_combo: int = 35
    corpus_seed: int = 0
    schedule_kind: str = "scaled_linear"
    med: MedConfig = field(default_factory=MedConfig)
    ted: TedConfig = field(default_factory=TedConfig)
    mtdm: MtdmConfig = field(default_factory=MtdmConfig)
    med_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-3, weight_decay=0.0, batch=32, epochs=24, seed=11))
    ted_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=2e-3, weight_decay=0.0, batch=48, epochs=300, seed=12))
    mtdm_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=2e-4, weight_decay=0.01, batch=64, epochs=60, seed=13))
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        pairs = (
            ("motion latent length", self.med.latent_len, self.mtdm.motion_latent_len),
            ("text latent length", self.ted.latent_len, self.mtdm.text_latent_len),
            ("motion latent width", self.med.model_dim, self.mtdm.motion_latent_dim),
            ("text latent width", self.ted.model_dim, self.mtdm.text_latent_dim),
        )
        for name, stage1, stage2 in pairs:
            if stage1 != stage2:
                raise ValueError(
                    f"{name} mismatch: codec gives {stage1}, denoiser expects {stage2}")

    def to_dict(self) -> dict:
        return asdict(self)


def pipeline_from_dict(payload: dict) -> PipelineConfig:
    """Deep-merge a partial config dict over the defaults.

    Top-level keys name PipelineConfig fields; nested dicts override single
    fields of the nested config they target.  Unknown keys raise.
    """
    from dataclasses import fields as dc_fields

    base = PipelineConfig()
    known = {f.name for f in dc_fields(PipelineConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        current = getattr(base, name)
        if isinstance(value, dict):
            try:
                kwargs[name] = replace(current, **value)
            except TypeError as exc:
                raise ValueError(f"bad keys under '{name}': {exc}") from None
        else:
            kwargs[name] = value
    return replace(base, **kwargs)


def config_hash(obj) -> str:
    """Stable short fingerprint of any json-encodable config payload."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# cached artifact builders


def get_corpus(cfg: PipelineConfig, cache_dir=DEFAULT_CACHE) -> data.Corpus:
    key = config_hash({"seeds": cfg.seeds_per_combo, "corpus_seed": cfg.corpus_seed})
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    root = Path(cache_dir) / f"corpus-{key}"
    if not (root / "data.bin").exists():
        corpus = data.build_corpus(cfg.seeds_per_combo, cfg.corpus_seed)
        data.save_corpus(corpus, root)
    return data.load_corpus(root)


def _train_clips(corpus: data.Corpus) -> list:
    return [corpus.normalize(corpus.clips[i]) for i in corpus.indices("train")]


def _test_clips(corpus: data.Corpus) -> list:
    return [corpus.normalize(corpus.clips[i]) for i in corpus.indices("test")]


def train_med_model(cfg: PipelineConfig, corpus: data.Corpus, path,
                    log_file=None) -> None:
    model = MotionEncoderDecoder(cfg.med, seed=cfg.med_train.seed)
    train_med(model, _train_clips(corpus), cfg.med_train, log_file=log_file)
    save_checkpoint(path, {"med": asdict(cfg.med)}, nn.state_dict(model))


def train_ted_model(cfg: PipelineConfig, corpus: data.Corpus, path,
                    log_file=None) -> None:
    """Caption codec training runs on the deduplicated caption set; the
    corpus repeats each caption many times and the codec only has to
    memorize the inventory."""
    index = data.vocab_index(corpus.vocab)
    model = TextEncoderDecoder(cfg.ted, seed=cfg.ted_train.seed)
    train_caps = sorted({corpus.captions[i] for i in corpus.indices("train")})
    tokens = [data.tokenize(c, index) for c in train_caps]
    train_ted(model, tokens, cfg.ted_train, log_file=log_file)
    save_checkpoint(path, {"ted": asdict(cfg.ted)}, nn.state_dict(model))


def load_med(path) -> MotionEncoderDecoder:
    meta, tensors = load_checkpoint(path)
    model = MotionEncoderDecoder(MedConfig(**meta["med"]), seed=0)
    nn.load_state(model, tensors)
    return model


def load_ted(path) -> TextEncoderDecoder:
    meta, tensors = load_checkpoint(path)
    model = TextEncoderDecoder(TedConfig(**meta["ted"]), seed=0)
    nn.load_state(model, tensors)
    return model


def med_cache_path(cfg: PipelineConfig, cache_dir=DEFAULT_CACHE) -> Path:
    key = config_hash({"med": asdict(cfg.med), "train": asdict(cfg.med_train),
                       "seeds": cfg.seeds_per_combo, "corpus_seed": cfg.corpus_seed})
    return Path(cache_dir) / f"med-{key}.mote"


def ted_cache_path(cfg: PipelineConfig, cache_dir=DEFAULT_CACHE) -> Path:
    key = config_hash({"ted": asdict(cfg.ted), "train": asdict(cfg.ted_train),
                       "seeds": cfg.seeds_per_combo, "corpus_seed": cfg.corpus_seed})
    return Path(cache_dir) / f"ted-{key}.mote"


def system_cache_path(cfg: PipelineConfig, cache_dir=DEFAULT_CACHE) -> Path:
    return Path(cache_dir) / f"system-{config_hash(cfg.to_dict())}.mote"


def get_med(cfg: PipelineConfig, corpus: data.Corpus,
            cache_dir=DEFAULT_CACHE) -> MotionEncoderDecoder:
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    path = med_cache_path(cfg, cache_dir)
    if not path.exists():
        with open(path.with_suffix(".jsonl"), "w") as log:
            train_med_model(cfg, corpus, path, log_file=log)
    return load_med(path)


def get_ted(cfg: PipelineConfig, corpus: data.Corpus,
            cache_dir=DEFAULT_CACHE) -> TextEncoderDecoder:
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    path = ted_cache_path(cfg, cache_dir)
    if not path.exists():
        with open(path.with_suffix(".jsonl"), "w") as log:
            train_ted_model(cfg, corpus, path, log_file=log)
    return load_ted(path)


def encode_motion_latents(med: MotionEncoderDecoder, corpus: data.Corpus,
                          batch: int = 64) -> np.ndarray:
    """Mean latents for every item, length-sorted batching for short pads."""
    clips = [corpus.normalize(c) for c in corpus.clips]
    order = np.argsort([len(c) for c in clips], kind="stable")
    out = [None] * len(clips)
    for lo in range(0, len(order), batch):
        idx = order[lo : lo + batch]
        latents = med.encode_mean([clips[i] for i in idx])
        for i, z in zip(idx, latents):
            out[i] = z
    return np.stack(out)


def encode_text_latents(ted: TextEncoderDecoder, corpus: data.Corpus,
                        batch: int = 256) -> np.ndarray:
    index = data.vocab_index(corpus.vocab)
    outs = []
    for lo in range(0, len(corpus.captions), batch):
        outs.append(ted.encode_captions(corpus.captions[lo : lo + batch], index))
    return np.concatenate(outs)


def latent_stats(latents: np.ndarray, train_idx) -> LatentStats:
    chosen = latents[train_idx]
    return LatentStats(chosen.mean(axis=0),
                       np.maximum(chosen.std(axis=0), 1e-6))


def _stats_to_meta(stats: LatentStats) -> dict:
    return {"mean": stats.mean.tolist(), "std": stats.std.tolist()}


def save_system(path, cfg: PipelineConfig, corpus: data.Corpus,
                med, ted, denoiser, motion_stats, text_stats) -> None:
    tensors = {}
    for prefix, model in (("med", med), ("ted", ted), ("mtdm", denoiser)):
        for name, arr in nn.state_dict(model).items():
            tensors[f"{prefix}.{name}"] = arr
    meta = {
        "pipeline": cfg.to_dict(),
        "schedule": {"kind": cfg.schedule_kind, "timesteps": cfg.mtdm.timesteps},
        "vocab": corpus.vocab,
        "feature_mean": corpus.mean.tolist(),
        "feature_std": corpus.std.tolist(),
        "motion_stats": _stats_to_meta(motion_stats),
        "text_stats": _stats_to_meta(text_stats),
    }
    save_checkpoint(path, meta, tensors)


def load_system(path) -> GenerationSystem:
    meta, tensors = load_checkpoint(path)
    pipe = meta["pipeline"]
    med = MotionEncoderDecoder(MedConfig(**pipe["med"]), seed=0)
    ted = TextEncoderDecoder(TedConfig(**pipe["ted"]), seed=0)
    den = UnifiedDenoiser(MtdmConfig(**pipe["mtdm"]), seed=0)
    for prefix, model in (("med", med), ("ted", ted), ("mtdm", den)):
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items()
                 if k.startswith(prefix + ".")}
        nn.load_state(model, state)
    sched = build_schedule(meta["schedule"]["kind"], meta["schedule"]["timesteps"])
    return GenerationSystem(
        denoiser=den, sched=sched, med=med, ted=ted, vocab=meta["vocab"],
        feature_mean=np.array(meta["feature_mean"]),
        feature_std=np.array(meta["feature_std"]),
        motion_stats=LatentStats(**meta["motion_stats"]),
        text_stats=LatentStats(**meta["text_stats"]),
        meta={"path": str(path)})


def build_system(cfg: PipelineConfig, corpus: data.Corpus, med, ted, path,
                 log_file=None) -> None:
    """Stage 2 on frozen codecs: encode everything, standardize over the
    train split, train the denoiser, bundle the lot into one checkpoint."""
    z_m = encode_motion_latents(med, corpus)
    z_s = encode_text_latents(ted, corpus)
    train_idx = corpus.indices("train")
    m_stats = latent_stats(z_m, train_idx)
    s_stats = latent_stats(z_s, train_idx)
    denoiser = UnifiedDenoiser(cfg.mtdm, seed=cfg.mtdm_train.seed)
    sched = build_schedule(cfg.schedule_kind, cfg.mtdm.timesteps)
    train_denoiser(denoiser, sched,
                   m_stats.forward(z_m[train_idx]),
                   s_stats.forward(z_s[train_idx]),
                   cfg.mtdm_train, log_file=log_file)
    save_system(path, cfg, corpus, med, ted, denoiser, m_stats, s_stats)


def get_system(cfg: PipelineConfig, cache_dir=DEFAULT_CACHE) -> GenerationSystem:
    """Corpus -> stage 1 -> stage 2, all cached; returns the reloaded bundle."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = system_cache_path(cfg, cache_dir)
    if not path.exists():
        corpus = get_corpus(cfg, cache_dir)
        med = get_med(cfg, corpus, cache_dir)
        ted = get_ted(cfg, corpus, cache_dir)
        with open(path.with_suffix(".jsonl"), "w") as log:
            build_system(cfg, corpus, med, ted, path, log_file=log)
    return load_system(path)


def get_extractor(cfg: PipelineConfig, corpus: data.Corpus,
                  cache_dir=DEFAULT_CACHE) -> RetrievalExtractor:
    key = config_hash({"extractor": asdict(cfg.extractor),
                       "seeds": cfg.seeds_per_combo, "corpus_seed": cfg.corpus_seed})
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    path = Path(cache_dir) / f"extractor-{key}.mote"
    if not path.exists():
        idx = corpus.indices("train")
        model = train_retrieval_extractor(
            [corpus.clips[i] for i in idx], [corpus.captions[i] for i in idx],
            corpus.vocab, corpus.mean, corpus.std, cfg.extractor)
        save_checkpoint(path, {"extractor": asdict(cfg.extractor)},
                        nn.state_dict(model))
    return load_extractor(path, corpus)


def load_extractor(path, corpus: data.Corpus) -> RetrievalExtractor:
    meta, tensors = load_checkpoint(path)
    model = RetrievalExtractor(ExtractorConfig(**meta["extractor"]), corpus.vocab,
                               corpus.mean, corpus.std)
    nn.load_state(model, tensors)
    return model


# ---------------------------------------------------------------------------
# evaluation protocols


def eval_stage1(med: MotionEncoderDecoder, ted: TextEncoderDecoder,
                corpus: data.Corpus) -> dict:
    """Held-out codec quality: worst per-feature RMSE and exact caption rate."""
    rmse = reconstruction_rmse(med, _test_clips(corpus))
    test_caps = sorted({corpus.captions[i] for i in corpus.indices("test")})
    exact = exact_match_rate(ted, test_caps, corpus.vocab)
    return {"med_rmse": rmse.tolist(), "med_rmse_max": float(rmse.max()),
            "ted_exact_match": exact, "ted_captions": len(test_caps)}


def _held_out_items(corpus: data.Corpus, n: int, seed: int) -> list:
    pool = corpus.indices("test")
    rng = np.random.default_rng(seed)
    if n >= len(pool):
        return pool
    return list(rng.choice(pool, size=n, replace=False))


def _spec_attrs(corpus: data.Corpus, i: int) -> dict:
    s = corpus.specs[i]
    return {"action": s.action, "direction": s.direction, "speed": s.speed}


def _match(expected: dict | None, probe: data.ProbeResult) -> bool:
    if expected is None:
        return False
    return (expected["action"] == probe.action
            and expected["direction"] == probe.direction
            and expected["speed"] == probe.speed)


def eval_t2m(system: GenerationSystem, corpus: data.Corpus, n: int = 100,
             w: float = 7.5, steps: int = 100, seed: int = 0,
             frames: int = 64) -> dict:
    """Generate from held-out captions; probe the outputs against the text."""
    items = _held_out_items(corpus, n, seed)
    captions = [corpus.captions[i] for i in items]
    guidance = GuidanceConfig(w_m=w, steps=steps, seed=seed)
    clips = sample_text_to_motion(system, captions, frames, guidance)
    probes = [data.attribute_probe(c) for c in clips]
    parses = [data.parse_caption(c) for c in captions]
    hits = [_match(p, q) for p, q in zip(parses, probes)]
    return {"rate": float(np.mean(hits)), "n": len(items), "w": w,
            "probes": [q.attrs for q in probes],
            "expected": [tuple(p.values()) if p else None for p in parses],
            "clips": clips}


def eval_m2t(system: GenerationSystem, corpus: data.Corpus, n: int = 100,
             w: float = 7.0, steps: int = 100, seed: int = 0) -> dict:
    """Caption held-out clips; parse the captions against the clip probes."""
    items = _held_out_items(corpus, n, seed)
    clips = [corpus.clips[i] for i in items]
    guidance = GuidanceConfig(w_s=w, steps=steps, seed=seed)
    captions = sample_motion_to_text(system, clips, guidance)
    probes = [data.attribute_probe(c) for c in clips]
    parses = [data.parse_caption(c) for c in captions]
    hits = [_match(p, q) for p, q in zip(parses, probes)]
    return {"rate": float(np.mean(hits)), "n": len(items), "w": w,
            "captions": captions, "items": items}


def eval_joint(system: GenerationSystem, n: int = 100, steps: int = 100,
               seed: int = 0, frames: int = 64) -> dict:
    """Pair consistency of jointly generated (clip, caption) samples."""
    pairs = sample_joint(system, n, frames, GuidanceConfig(steps=steps, seed=seed))
    hits, details = [], []
    for clip, caption in pairs:
        probe = data.attribute_probe(clip)
        parsed = data.parse_caption(caption)
        hits.append(_match(parsed, probe))
        details.append({"caption": caption, "probe": probe.attrs})
    return {"rate": float(np.mean(hits)), "n": n, "details": details}


def eval_w0_control(system: GenerationSystem, corpus: data.Corpus, n: int = 100,
                    steps: int = 100, seed: int = 0, frames: int = 64) -> dict:
    """w=0 ignores the prompt, so the prompt-match rate must sit at the
    base rate of matching a random prompt; both are estimated from the same
    generated batch and compared at 3 sigma."""
    out = eval_t2m(system, corpus, n=n, w=0.0, steps=steps, seed=seed, frames=frames)
    probes = out["probes"]
    expected = out["expected"]
    observed = out["rate"]
    cross = [exp is not None and exp == probe
             for i, exp in enumerate(expected)
             for j, probe in enumerate(probes) if i != j]
    chance = float(np.mean(cross))
    sigma = float(np.sqrt(max(chance * (1 - chance), 1e-12) / len(probes)))
    return {"observed": observed, "chance": chance, "sigma": sigma,
            "within_3_sigma": bool(abs(observed - chance) <= 3 * sigma), "n": n}


def guidance_sweep(system: GenerationSystem, corpus: data.Corpus,
                   extractor: RetrievalExtractor, ws=(0.0, 3.0, 7.5),
                   n: int = 100, steps: int = 100, seed: int = 0,
                   frames: int = 64) -> dict:
    """Attribute match and FID versus guidance weight, fixed prompt set."""
    items = _held_out_items(corpus, n, seed)
    real_feats = extractor.motion_features([corpus.clips[i] for i in items])
    results = {}
    for w in ws:
        out = eval_t2m(system, corpus, n=n, w=w, steps=steps, seed=seed, frames=frames)
        gen_feats = extractor.motion_features(out["clips"])
        results[w] = {"match": out["rate"], "fid": fid(real_feats, gen_feats)}
    return results


def retrieval_report(system: GenerationSystem, corpus: data.Corpus,
                     extractor: RetrievalExtractor, n: int = 160,
                     steps: int = 100, seed: int = 0, frames: int = 64,
                     gallery_size: int = 32) -> dict:
    """The quantitative table: retrieval, FID, MMDist, MModality, text scores."""
    items = _held_out_items(corpus, n, seed)
    captions = [corpus.captions[i] for i in items]
    real_clips = [corpus.clips[i] for i in items]
    groups = [f"{corpus.specs[i].action}|{corpus.specs[i].direction}|{corpus.specs[i].speed}"
              for i in items]
    gen_clips = sample_text_to_motion(system, captions, frames,
                                      GuidanceConfig(steps=steps, seed=seed))
    text_f = extractor.text_features(captions)
    gen_f = extractor.motion_features(gen_clips)
    real_f = extractor.motion_features(real_clips)
    rp = r_precision(gen_f, text_f, groups=groups, gallery_size=gallery_size,
                     repeats=5, seed=seed)
    gt_rp = r_precision(real_f, text_f, groups=groups, gallery_size=gallery_size,
                        repeats=5, seed=seed)

    m2t = eval_m2t(system, corpus, n=min(n, 100), steps=steps, seed=seed)
    refs = []
    for i in m2t["items"]:
        s = corpus.specs[i]
        refs.append([data.caption_for(s.action, s.direction, s.speed, t)
                     for t in range(3)])
    caption_scores = text_metrics(m2t["captions"], refs)

    per_caption = {}
    for feat, caption in zip(gen_f, captions):
        per_caption.setdefault(caption, []).append(feat)
    diverse = [np.stack(v) for v in per_caption.values() if len(v) >= 2]
    diversity = m_modality(diverse, seed=seed) if diverse else None
    return {
        "r_precision": rp, "r_precision_ground_truth": gt_rp,
        "fid": fid(real_f, gen_f), "mm_dist": mm_dist(text_f, gen_f),
        "m_modality": diversity, "text_metrics": caption_scores, "n": len(items),
    }


# ---------------------------------------------------------------------------
# latent-size ablation


def reduced_profile(base: PipelineConfig, motion_latent_len: int,
                    seed: int) -> PipelineConfig:
    """Small-budget profile for the latent-size sweep: same shapes, fewer
    items and epochs, seed threaded through every stage."""
    return replace(
        base,
        seeds_per_combo=6,
        med=replace(base.med, latent_len=motion_latent_len),
        mtdm=replace(base.mtdm, motion_latent_len=motion_latent_len),
        med_train=replace(base.med_train, epochs=12, seed=100 + seed),
        ted_train=replace(base.ted_train, epochs=150, seed=200 + seed),
        mtdm_train=replace(base.mtdm_train, epochs=30, seed=300 + seed),
    )


def latent_ablation(base: PipelineConfig, lens=(2, 4, 8), seeds=(0, 1, 2),
                    n: int = 50, steps: int = 50, cache_dir=DEFAULT_CACHE) -> dict:
    """Train the reduced profile at each motion-latent length and score both
    directions; returns per-length 3-seed medians."""
    results = {}
    for l in lens:
        t2m_rates, bleu4s = [], []
        for seed in seeds:
            cfg = reduced_profile(base, l, seed)
            system = get_system(cfg, cache_dir)
            corpus = get_corpus(cfg, cache_dir)
            t2m_rates.append(eval_t2m(system, corpus, n=n, steps=steps,
                                      seed=seed)["rate"])
            m2t = eval_m2t(system, corpus, n=n, steps=steps, seed=seed)
            refs = []
            for i in m2t["items"]:
                s = corpus.specs[i]
                refs.append([data.caption_for(s.action, s.direction, s.speed, t)
                             for t in range(3)])
            bleu4s.append(bleu(m2t["captions"], refs, max_n=4))
        results[l] = {"t2m_match_median": float(np.median(t2m_rates)),
                      "m2t_bleu4_median": float(np.median(bleu4s)),
                      "t2m": t2m_rates, "bleu4": bleu4s}
    return results
