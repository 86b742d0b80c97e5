"""Evaluation stack: retrieval features, distribution metrics, text metrics.

The retrieval extractor is a pair of small contrastive encoders trained on
the synthetic corpus; its absolute feature scales are corpus-specific, so
downstream gates compare orderings and sanity anchors rather than absolute
values.  All distance metrics below operate on plain feature arrays, which
keeps them testable with hand-built inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data, nn
from .autodiff import Graph, Tensor
from .optim import AdamW, cosine_lr

STAT_DIM = 33   # per-feature mean/std/first/last + frame-count fraction


def motion_summary(clip: np.ndarray, feature_mean, feature_std,
                   max_frames: int = 128) -> np.ndarray:
    """Fixed-size statistics of one raw clip, on normalized features."""
    x = (np.asarray(clip, dtype=np.float64) - feature_mean) / feature_std
    return np.concatenate([
        x.mean(axis=0), x.std(axis=0), x[0], x[-1],
        [x.shape[0] / max_frames],
    ])


def caption_bag(caption: str, index: dict) -> np.ndarray:
    """Word-count vector over the corpus vocabulary, scaled by length."""
    ids = data.tokenize(caption, index)
    vec = np.zeros(len(index), dtype=np.float64)
    for i in ids:
        vec[i] += 1.0
    return vec / len(ids)


@dataclass
class ExtractorConfig:
    feature_dim: int = 32
    hidden: int = 64
    temperature: float = 0.07
    lr: float = 2e-3
    weight_decay: float = 0.0
    batch: int = 64
    epochs: int = 40
    seed: int = 0


class RetrievalExtractor(nn.Module):
    """Two MLP towers mapping motion statistics and caption word counts
    into one shared unit sphere."""

    def __init__(self, cfg: ExtractorConfig, vocab: list,
                 feature_mean, feature_std, seed: int | None = None):
        self.cfg = cfg
        self.vocab = list(vocab)
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.box = nn.RngBox(0)
        self.motion_in = nn.Linear(STAT_DIM, cfg.hidden, rng)
        self.motion_out = nn.Linear(cfg.hidden, cfg.feature_dim, rng)
        self.text_in = nn.Linear(len(vocab), cfg.hidden, rng)
        self.text_out = nn.Linear(cfg.hidden, cfg.feature_dim, rng)

    def _tower(self, x: Tensor, lin_in, lin_out) -> Tensor:
        h = lin_out(ad.gelu(lin_in(x)))
        norm = ad.sqrt((h * h).sum(axis=-1, keepdims=True) + 1e-24)
        return h / norm

    def motion_tower(self, stats: np.ndarray) -> Tensor:
        return self._tower(Tensor(stats), self.motion_in, self.motion_out)

    def text_tower(self, bags: np.ndarray) -> Tensor:
        return self._tower(Tensor(bags), self.text_in, self.text_out)

    def motion_features(self, clips: list) -> np.ndarray:
        stats = np.stack([motion_summary(c, self.feature_mean, self.feature_std)
                          for c in clips])
        return self.motion_tower(stats).data

    def text_features(self, captions: list) -> np.ndarray:
        index = data.vocab_index(self.vocab)
        bags = np.stack([caption_bag(c, index) for c in captions])
        return self.text_tower(bags).data


def info_nce(m_feat: Tensor, t_feat: Tensor, temperature: float) -> Tensor:
    """Symmetric in-batch contrastive loss over the similarity matrix."""
    b = m_feat.data.shape[0]
    logits = ad.matmul(m_feat, ad.transpose(t_feat, (1, 0))) / temperature
    eye = Tensor(np.eye(b))
    loss_m = -(ad.log_softmax(logits) * eye).sum() / b
    loss_t = -(ad.log_softmax(ad.transpose(logits, (1, 0))) * eye).sum() / b
    return (loss_m + loss_t) / 2.0


def train_retrieval_extractor(clips: list, captions: list, vocab: list,
                              feature_mean, feature_std,
                              cfg: ExtractorConfig | None = None) -> RetrievalExtractor:
    """Fit the two towers on matched pairs; everything derives from cfg.seed."""
    cfg = cfg or ExtractorConfig()
    if len(clips) != len(captions):
        raise ValueError("clips and captions must pair up")
    model = RetrievalExtractor(cfg, vocab, feature_mean, feature_std)
    index = data.vocab_index(vocab)
    stats = np.stack([motion_summary(c, model.feature_mean, model.feature_std)
                      for c in clips])
    bags = np.stack([caption_bag(c, index) for c in captions])
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(clips)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        for lo in range(0, n, cfg.batch):
            idx = order[lo : lo + cfg.batch]
            if idx.size < 2:
                continue
            opt.zero_grad()
            with Graph() as g:
                loss = info_nce(model.motion_tower(stats[idx]),
                                model.text_tower(bags[idx]), cfg.temperature)
            g.backward(loss)
            opt.step(lr)
    return model


def r_precision(motion_feats: np.ndarray, text_feats: np.ndarray,
                groups=None, gallery_size: int = 32, repeats: int = 20,
                seed: int = 0) -> dict:
    """Top-k retrieval rates over galleries of one match + mismatches.

    Each query caption faces its true motion plus gallery_size-1 decoys; the
    gallery is ranked by Euclidean distance.  When groups are given, decoys
    are restricted to items with a different group key, so paraphrases of
    the same underlying content are never counted as failures.  Returns
    per-k means with 95% halfwidths over the repeated decoy draws.
    """
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    n = len(motion_feats)
    if len(text_feats) != n:
        raise ValueError("feature arrays must pair up")
    if groups is None:
        pools = [np.delete(np.arange(n), i) for i in range(n)]
    else:
        groups = np.asarray(groups)
        pools = [np.flatnonzero(groups != groups[i]) for i in range(n)]
    need = gallery_size - 1
    if any(p.size < need for p in pools):
        raise ValueError(f"need at least {need} mismatch candidates per query")
    rng = np.random.default_rng(seed)
    hits = np.zeros((repeats, 3))
    for r in range(repeats):
        ranks = np.empty(n, dtype=np.int64)
        for i in range(n):
            decoys = rng.choice(pools[i], size=need, replace=False)
            gallery = motion_feats[np.concatenate([[i], decoys])]
            dist = np.linalg.norm(gallery - text_feats[i], axis=1)
            ranks[i] = int((dist < dist[0]).sum())
        for k in range(3):
            hits[r, k] = float((ranks <= k).mean())
    mean = hits.mean(axis=0)
    half = 1.96 * hits.std(axis=0, ddof=1) / np.sqrt(repeats) if repeats > 1 else np.zeros(3)
    return {"top1": float(mean[0]), "top2": float(mean[1]), "top3": float(mean[2]),
            "ci95": {"top1": float(half[0]), "top2": float(half[1]),
                     "top3": float(half[2])},
            "queries": n * repeats}


def _cov(x: np.ndarray) -> np.ndarray:
    c = np.asarray(x, dtype=np.float64) - x.mean(axis=0)
    cov = c.T @ c / (len(x) - 1)
    return (cov + cov.T) / 2.0


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between the Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-d with a common width")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need more than {dim} samples per set for a {dim}-d covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = _cov(a), _cov(b)
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def mm_dist(text_feats: np.ndarray, motion_feats: np.ndarray) -> float:
    """Mean Euclidean distance between matched text/motion features."""
    t = np.asarray(text_feats, dtype=np.float64)
    m = np.asarray(motion_feats, dtype=np.float64)
    if t.shape != m.shape:
        raise ValueError("matched feature arrays must share a shape")
    return float(np.linalg.norm(t - m, axis=1).mean())


def m_modality(feature_groups: list, pairs_per_text: int = 10, seed: int = 0) -> float:
    """Diversity: mean distance over disjoint same-caption feature pairs.

    Each group holds the features of motions generated from one caption;
    a seeded shuffle pairs them off without reuse, capped at pairs_per_text.
    """
    rng = np.random.default_rng(seed)
    dists = []
    for feats in feature_groups:
        feats = np.asarray(feats, dtype=np.float64)
        k = len(feats)
        if k < 2:
            raise ValueError("every caption needs at least 2 motions")
        order = rng.permutation(k)
        take = min(pairs_per_text, k // 2)
        for p in range(take):
            i, j = order[2 * p], order[2 * p + 1]
            dists.append(np.linalg.norm(feats[i] - feats[j]))
    return float(np.mean(dists))


def _tokens(text) -> list:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list, references: list, max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precision, geometric mean, brevity penalty.

    references holds one list of reference texts per candidate.  No
    smoothing: a missing n-gram order zeroes the score, as in the original
    definition.
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    clipped = np.zeros(max_n)
    total = np.zeros(max_n)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = _tokens(cand)
        refs = [_tokens(r) for r in (refs if isinstance(refs, (list, tuple)) else [refs])]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            best = Counter()
            for r in refs:
                rc = _ngrams(r, n)
                for gram, c in rc.items():
                    best[gram] = max(best[gram], c)
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
    if cand_len == 0 or np.any(total == 0) or np.any(clipped == 0):
        return 0.0
    log_prec = np.log(clipped / total).mean()
    bp = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(bp * np.exp(log_prec))


def _lcs_len(a: list, b: list) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(cur[j - 1], prev[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: list, references: list, beta: float = 1.2) -> float:
    """Mean longest-common-subsequence F-measure, best reference per item."""
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    scores = []
    for cand, refs in zip(candidates, references):
        cand = _tokens(cand)
        refs = [_tokens(r) for r in (refs if isinstance(refs, (list, tuple)) else [refs])]
        best = 0.0
        for r in refs:
            if not cand or not r:
                continue
            lcs = _lcs_len(cand, r)
            if lcs == 0:
                continue
            rec, prec = lcs / len(r), lcs / len(cand)
            best = max(best, (1 + beta**2) * rec * prec / (rec + beta**2 * prec))
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def cider_d(candidates: list, references: list, max_n: int = 4,
            sigma: float = 6.0) -> float:
    """Consensus metric: clipped TF-IDF n-gram cosine with a length prior.

    IDF is computed over the reference corpus only; scores are averaged
    over n-gram orders and references, scaled by 10.
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate required")
    ref_lists = [
        [_tokens(r) for r in (refs if isinstance(refs, (list, tuple)) else [refs])]
        for refs in references
    ]
    n_docs = len(ref_lists)
    doc_freq = [Counter() for _ in range(max_n)]
    for refs in ref_lists:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            for gram in seen:
                doc_freq[n - 1][gram] += 1

    def tfidf(tokens, n):
        vec = {}
        for gram, c in _ngrams(tokens, n).items():
            df = max(1.0, doc_freq[n - 1][gram])
            vec[gram] = c * np.log(n_docs / df)
        norm = np.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    scores = []
    for cand, refs in zip(candidates, ref_lists):
        cand = _tokens(cand)
        per_n = np.zeros(max_n)
        for n in range(1, max_n + 1):
            cvec, cnorm = tfidf(cand, n)
            acc = 0.0
            for r in refs:
                rvec, rnorm = tfidf(r, n)
                if cnorm == 0 or rnorm == 0:
                    continue
                dot = sum(min(v, rvec.get(gram, 0.0)) * rvec.get(gram, 0.0)
                          for gram, v in cvec.items())
                penalty = np.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
                acc += penalty * dot / (cnorm * rnorm)
            per_n[n - 1] = acc / len(refs)
        scores.append(per_n.mean())
    return float(10.0 * np.mean(scores))


def text_metrics(candidates: list, references: list) -> dict:
    """The caption-quality bundle reported by evaluation runs."""
    return {
        "bleu1": bleu(candidates, references, max_n=1),
        "bleu4": bleu(candidates, references, max_n=4),
        "rougeL": rouge_l(candidates, references),
        "cider": cider_d(candidates, references),
    }
