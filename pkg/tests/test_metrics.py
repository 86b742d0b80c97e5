import numpy as np
import pytest

from mote import data, metrics
from mote.autodiff import Tensor
from mote.metrics import (ExtractorConfig, RetrievalExtractor, bleu, caption_bag,
                          cider_d, fid, info_nce, m_modality, mm_dist,
                          motion_summary, r_precision, rouge_l, text_metrics,
                          train_retrieval_extractor)


def test_motion_summary_layout():
    clip = np.arange(64 * 8, dtype=np.float64).reshape(64, 8)
    s = motion_summary(clip, np.zeros(8), np.ones(8))
    assert s.shape == (metrics.STAT_DIM,)
    assert np.allclose(s[:8], clip.mean(axis=0))
    assert np.allclose(s[16:24], clip[0])
    assert s[-1] == 0.5


def test_caption_bag_counts():
    vocab = data.build_vocab()
    index = data.vocab_index(vocab)
    bag = caption_bag("a point moves left slowly", index)
    assert bag.shape == (len(vocab),)
    assert bag.sum() == pytest.approx(1.0)
    assert bag[index["left"]] > 0


def test_info_nce_uniform_hand_value():
    f = np.tile(np.array([1.0, 0.0]), (4, 1))
    loss = info_nce(Tensor(f), Tensor(f), temperature=0.07)
    assert float(loss.data) == pytest.approx(np.log(4.0), rel=1e-12)


def test_fid_identity_and_shift():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 4))
    assert abs(fid(x, x)) < 1e-8
    # equal covariances cancel, leaving exactly the squared mean shift
    assert fid(x, x + 1.0) == pytest.approx(4.0, abs=1e-8)
    one = rng.standard_normal((200, 1))
    assert fid(one, one + 1.0) == pytest.approx(1.0, abs=1e-8)


def test_fid_symmetry_and_validation():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((40, 3)), 0.5 * rng.standard_normal((50, 3)) + 0.3
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)
    assert fid(a, b) >= 0
    with pytest.raises(ValueError, match="samples"):
        fid(rng.standard_normal((3, 4)), rng.standard_normal((20, 4)))
    with pytest.raises(ValueError, match="width"):
        fid(rng.standard_normal((20, 3)), rng.standard_normal((20, 4)))


def test_r_precision_oracle_and_nesting():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((64, 8))
    out = r_precision(feats, feats, gallery_size=32, repeats=3, seed=0)
    assert out["top1"] == 1.0
    rand = r_precision(rng.standard_normal((64, 8)), rng.standard_normal((64, 8)),
                       gallery_size=32, repeats=3, seed=0)
    assert rand["top1"] <= rand["top2"] <= rand["top3"]


def test_r_precision_random_features_near_chance():
    rng = np.random.default_rng(3)
    n, repeats = 200, 5
    out = r_precision(rng.standard_normal((n, 6)), rng.standard_normal((n, 6)),
                      gallery_size=32, repeats=repeats, seed=1)
    p = 1.0 / 32
    sigma = np.sqrt(p * (1 - p) / (n * repeats))
    assert abs(out["top1"] - p) < 3 * sigma


def test_r_precision_groups_exclude_paraphrases():
    rng = np.random.default_rng(4)
    centers = rng.standard_normal((40, 5))
    feats = np.repeat(centers, 2, axis=0)          # two paraphrases per item
    groups = np.repeat(np.arange(40), 2)
    out = r_precision(feats, feats, groups=groups, gallery_size=32, repeats=2, seed=0)
    assert out["top1"] == 1.0
    with pytest.raises(ValueError, match="mismatch"):
        r_precision(feats[:8], feats[:8], groups=groups[:8], gallery_size=32)


def test_mm_dist_values():
    assert mm_dist(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0
    assert mm_dist(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])) == 5.0
    with pytest.raises(ValueError):
        mm_dist(np.zeros((3, 2)), np.zeros((4, 2)))


def test_m_modality_zero_and_gaussian_oracle():
    assert m_modality([np.ones((6, 3))] * 4) == 0.0
    rng = np.random.default_rng(5)
    groups = [rng.standard_normal((20, 2)) for _ in range(100)]
    est = m_modality(groups, pairs_per_text=10, seed=0)
    # pair distance of 2-d unit Gaussians has mean sqrt(pi), var 4 - pi
    sigma = np.sqrt((4 - np.pi) / 1000)
    assert abs(est - np.sqrt(np.pi)) < 3 * sigma
    with pytest.raises(ValueError, match="at least 2"):
        m_modality([np.ones((1, 3))])


def test_bleu_identity_clipping_and_brevity():
    assert bleu(["a point moves left"], [["a point moves left"]], max_n=1) == 1.0
    assert bleu(["a point moves left"], [["a point moves left"]], max_n=4) == 1.0
    assert bleu(["the the the the"], [["the cat sat"]], max_n=1) == 0.25
    assert bleu(["b c d"], [["e f g"]], max_n=1) == 0.0
    assert bleu([""], [["a b"]], max_n=1) == 0.0
    short = bleu(["a b"], [["a b c d"]], max_n=1)
    assert short == pytest.approx(np.exp(1 - 4 / 2), rel=1e-12)


def test_rouge_l_values():
    assert rouge_l(["a b c"], [["a b c"]]) == 1.0
    assert rouge_l(["a b"], [["c d"]]) == 0.0
    got = rouge_l(["a b c"], [["a c d"]])
    assert got == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_cider_perfect_match_and_disjoint():
    caps = ["a red cat sits quietly", "a blue dog runs fast", "the green bird flies home"]
    assert cider_d(caps, [[c] for c in caps]) == pytest.approx(10.0, abs=1e-9)
    assert cider_d(["x y z w"], [["p q r s"]]) == 0.0
    shorter = cider_d(["a red cat", "a blue dog runs fast", "the green bird flies home"],
                      [[c] for c in caps])
    assert shorter < 10.0


def test_text_metrics_bundle_keys():
    out = text_metrics(["a b c d"], [["a b c d"]])
    assert out["bleu1"] == 1.0 and out["bleu4"] == 1.0 and out["rougeL"] == 1.0
    assert set(out) == {"bleu1", "bleu4", "rougeL", "cider"}


def _tiny_pairs():
    clips, caps = [], []
    for action in ("walk-line", "circle"):
        for direction in ("left", "right"):
            for speed in ("slow", "fast"):
                spec = data.MotionSpec(action=action, direction=direction,
                                       speed=speed, frames=48, seed=1)
                clips.append(data.generate_clip(spec))
                caps.append(data.caption_for(action, direction, speed, template=0))
    return clips, caps


def test_extractor_unit_norm_and_determinism():
    clips, caps = _tiny_pairs()
    vocab = data.build_vocab()
    cfg = ExtractorConfig(epochs=2, batch=8, seed=3)
    a = train_retrieval_extractor(clips, caps, vocab, np.zeros(8), np.ones(8), cfg)
    b = train_retrieval_extractor(clips, caps, vocab, np.zeros(8), np.ones(8), cfg)
    fa, fb = a.motion_features(clips), b.motion_features(clips)
    assert np.array_equal(fa, fb)
    assert np.allclose(np.linalg.norm(fa, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(a.text_features(caps), axis=1), 1.0, atol=1e-9)


def test_extractor_training_separates_pairs():
    clips, caps = _tiny_pairs()
    vocab = data.build_vocab()
    cfg = ExtractorConfig(epochs=60, batch=8, seed=0, lr=3e-3)
    model = train_retrieval_extractor(clips, caps, vocab, np.zeros(8), np.ones(8), cfg)
    m, t = model.motion_features(clips), model.text_features(caps)
    sims = t @ m.T
    matched = np.median(np.diag(sims))
    mismatched = np.median(sims[~np.eye(len(sims), dtype=bool)])
    assert matched > mismatched + 0.2


def test_extractor_rejects_unpaired_input():
    clips, caps = _tiny_pairs()
    with pytest.raises(ValueError, match="pair"):
        train_retrieval_extractor(clips[:3], caps[:2], data.build_vocab(),
                                  np.zeros(8), np.ones(8), ExtractorConfig(epochs=1))
