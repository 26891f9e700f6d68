import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scalar_bce
from scenevg.geometry import Box, iou
from scenevg.levilm import (
    LeViLM, LeViLMConfig, LeViLMNet, alignment_scores, build_target, entity_features,
    matching_loss, region_anchors, select_prediction,
)

D = torch.float64


def tiny_net(layers=1, vocab=20, seed=0):
    torch.manual_seed(seed)
    cfg = LeViLMConfig(image_size=16, patch_size=8, d=8, heads=2, layers=layers,
                       max_prompt_tokens=12, text_layers=0)
    return LeViLMNet(cfg, vocab).double()


class TestScoring:
    def test_anchor_count(self):
        cfg = LeViLMConfig()
        assert region_anchors(cfg).shape == (len(cfg.scales) * cfg.grid ** 2, 4)

    def test_entity_features_mean_pool(self):
        z = torch.arange(12, dtype=D).reshape(4, 3)
        e = entity_features(z, [(1, 3), (0, 1)])
        assert e.tolist() == [[4.5, 5.5, 6.5], [0.0, 1.0, 2.0]]
        with pytest.raises(ValueError):
            entity_features(z, [(2, 2)])
        with pytest.raises(ValueError):
            entity_features(z, [(3, 9)])

    def test_alignment_is_dot_product(self):
        zi = torch.tensor([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]], dtype=D)
        ze = torch.tensor([[1.0, 1.0], [2.0, 0.0]], dtype=D)
        s = alignment_scores(zi, ze)
        assert s.shape == (3, 2)
        assert s.tolist() == [[3.0, 2.0], [-1.0, 0.0], [4.0, 6.0]]
        with pytest.raises(ValueError):
            alignment_scores(zi, torch.ones(2, 3, dtype=D))

    def test_target_marks_overlapping_anchors(self):
        anchors = [(0, 0, 0.5, 0.5), (0.5, 0, 1, 0.5), (0, 0, 1, 1)]
        gt = Box(0.05, 0.0, 0.5, 0.5)
        t = build_target(anchors, gt, mentions=2)
        assert t.shape == (3, 3)
        want = [float(iou(a, gt) >= 0.5) for a in anchors]
        assert want == [1.0, 0.0, 0.0]
        assert all(t[:, j].tolist() == want for j in range(3))

    def test_target_forces_best_anchor(self):
        anchors = [(0, 0, 0.5, 0.5), (0.5, 0.5, 1, 1)]
        t = build_target(anchors, Box(0.55, 0.55, 0.7, 0.7), mentions=0)
        assert t[:, 0].tolist() == [0.0, 1.0]

    def test_bce_matches_scalar_oracle(self):
        scores = torch.tensor([[2.0, -1.0], [0.5, 3.0], [-4.0, 0.0]], dtype=D)
        targets = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=D)
        want = np.mean([scalar_bce(s, t) for s, t in zip(scores.flatten().tolist(),
                                                           targets.flatten().tolist())])
        assert float(matching_loss(scores, targets)) == pytest.approx(want, abs=1e-14)
        mask = torch.tensor([[1, 0], [1, 0], [1, 0]], dtype=torch.bool)
        want_col0 = np.mean([scalar_bce(s, t) for s, t in [(2.0, 1.0), (0.5, 0.0), (-4.0, 0.0)]])
        assert float(matching_loss(scores, targets, mask)) == pytest.approx(want_col0, abs=1e-14)
        with pytest.raises(ValueError):
            matching_loss(scores, targets[:, :1])


class TestSelection:
    regions = [Box(0, 0, 10, 10), Box(10, 0, 20, 10), Box(0, 10, 10, 20), Box(0, 0, 20, 20)]

    def test_highest(self):
        scores = np.array([[1.0], [3.0], [-2.0], [0.5]])
        assert select_prediction(self.regions, scores, "H") == self.regions[1]

    def test_none_when_nothing_passes(self):
        scores = np.full((4, 1), -1.0)
        for s in ("H", "R", "U"):
            assert select_prediction(self.regions, scores, s, gt=self.regions[0]) is None

    def test_random_draws_from_candidates(self):
        scores = np.array([[1.0], [3.0], [-2.0], [0.5]])
        picks = {select_prediction(self.regions, scores, "R", rng=k) for k in range(40)}
        assert picks == {self.regions[0], self.regions[1], self.regions[3]}
        assert select_prediction(self.regions, scores, "R", rng=5) == \
            select_prediction(self.regions, scores, "R", rng=5)

    def test_upper_bound_uses_gt(self):
        scores = np.array([[1.0], [3.0], [-2.0], [0.5]])
        assert select_prediction(self.regions, scores, "U", gt=self.regions[0]) == self.regions[0]
        assert select_prediction(self.regions, scores, "U", gt=self.regions[2]) is None
        with pytest.raises(ValueError):
            select_prediction(self.regions, scores, "U")
        with pytest.raises(ValueError):
            select_prediction(self.regions, scores, "X")

    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(0, 3),
           st.integers(0, 1000))
    @settings(max_examples=200)
    def test_upper_bound_dominates(self, col, gt_idx, seed):
        scores = np.array(col)[:, None]
        gt = self.regions[gt_idx]

        def ok(box):
            return box is not None and iou(box, gt) >= 0.5

        u = ok(select_prediction(self.regions, scores, "U", gt=gt))
        assert u >= ok(select_prediction(self.regions, scores, "H"))
        assert u >= ok(select_prediction(self.regions, scores, "R", rng=seed))


class TestFusion:
    def test_zero_layers_identity(self):
        net = tiny_net()
        hi, ht = torch.randn(2, 4, 8, dtype=D), torch.randn(2, 5, 8, dtype=D)
        zi, zt = net.fuse(hi, ht, layers=0)
        assert torch.equal(zi, hi) and torch.equal(zt, ht)

    def test_shapes_preserved(self):
        net = tiny_net(layers=2)
        hi, ht = torch.randn(2, 4, 8, dtype=D), torch.randn(2, 5, 8, dtype=D)
        zi, zt = net.fuse(hi, ht)
        assert zi.shape == hi.shape and zt.shape == ht.shape

    def test_zeroed_cross_attention_decouples_streams(self):
        net = tiny_net()
        with torch.no_grad():
            for blk in net.fusion:
                for p in (blk.text_from_image, blk.image_from_text):
                    for lin in (p.o_proj, p.ff_out):
                        lin.weight.zero_()
                        lin.bias.zero_()
        hi, ht = torch.randn(1, 4, 8, dtype=D), torch.randn(1, 5, 8, dtype=D)
        zi, _ = net.fuse(hi, ht)
        zi2, _ = net.fuse(hi, torch.randn(1, 5, 8, dtype=D))
        assert torch.allclose(zi, zi2, atol=1e-14)

    def test_pad_rows_never_reach_image_stream(self):
        net = tiny_net(layers=2)
        hi = torch.randn(1, 4, 8, dtype=D)
        ht = torch.randn(1, 6, 8, dtype=D)
        mask = torch.tensor([[True, True, True, True, False, False]])
        other = ht.clone()
        other[0, 4:] = torch.randn(2, 8, dtype=D) * 10
        zi, zt = net.fuse(hi, ht, mask)
        zi2, zt2 = net.fuse(hi, other, mask)
        assert torch.allclose(zi, zi2, atol=1e-12)
        assert torch.allclose(zt[:, :4], zt2[:, :4], atol=1e-12)


class TestEstimator:
    def test_get_params_and_clone(self):
        from sklearn.base import clone

        m = LeViLM(variant="Q", epochs=3)
        assert m.get_params()["variant"] == "Q"
        assert clone(m).get_params() == m.get_params()

    def test_invalid_variant(self, small_corpus):
        with pytest.raises(ValueError):
            LeViLM(variant="K", epochs=0).fit(small_corpus)

    def test_predict_before_fit(self, small_corpus):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            LeViLM().predict(small_corpus)

    def _tiny(self, **kw):
        return LeViLM(image_size=16, patch_size=8, d=8, heads=2, layers=1, text_layers=1,
                      max_prompt_tokens=96, batch_size=8, **kw)

    def test_zero_shot_keeps_initial_weights(self, small_corpus):
        a = self._tiny(regime="ZS", epochs=5).fit(small_corpus)
        b = self._tiny(regime="FT", epochs=0).fit(small_corpus)
        for (ka, va), (_, vb) in zip(a.net_.state_dict().items(), b.net_.state_dict().items()):
            assert torch.equal(va, vb), ka

    def test_linear_probe_trains_only_scoring(self, small_corpus):
        init = self._tiny(regime="ZS").fit(small_corpus).net_.state_dict()
        lp = self._tiny(regime="LP", epochs=2).fit(small_corpus)
        scoring = {id(p) for p in lp.net_.scoring_parameters()}
        for name, p in lp.net_.named_parameters():
            changed = not torch.equal(p.detach(), init[name])
            assert changed == (id(p) in scoring), name

    def test_decision_shapes_and_predictions(self, small_corpus):
        m = self._tiny(variant="Q+K+S", epochs=1).fit(small_corpus)
        scores = m.decision_function(small_corpus[:5])
        n = len(m.net_.anchors)
        for s, sc in zip(small_corpus[:5], scores):
            assert sc.shape == (n, 1 + len(s.coref))
        preds = m.predict(small_corpus[:5], "H")
        assert len(preds) == 5
        assert all(p is None or isinstance(p, Box) for p in preds)
        assert len(m.loss_history_) == 1 and math.isfinite(m.loss_history_[0])

    def test_query_variant_has_single_column(self, small_corpus):
        m = self._tiny(variant="Q", epochs=0).fit(small_corpus)
        assert all(sc.shape[1] == 1 for sc in m.decision_function(small_corpus[:3]))

    def test_seeded_training_reproducible(self, small_corpus):
        a = self._tiny(epochs=1, random_state=3).fit(small_corpus)
        b = self._tiny(epochs=1, random_state=3).fit(small_corpus)
        assert a.loss_history_ == b.loss_history_

    def test_augmentation_keeps_spans_and_targets(self, small_corpus):
        from scenevg import lexicon

        m = self._tiny(variant="Q+K+S", epochs=0, shuffle_knowledge=True,
                       swap_groups=(lexicon.NAMES,)).fit(small_corpus)
        tables = m._swap_tables()
        assert len(tables) == 1
        rng = np.random.default_rng(0)
        for s in small_corpus[:10]:
            enc = m._encode(s, True)
            aug = m._augment(s, enc, tables, rng)
            assert len(aug.spans) == len(enc.spans) and aug.gt == enc.gt
            assert len(aug.ids) == len(enc.ids)
            words_out = [m.vocab_.itos_[i] for i in aug.ids]
            for a, b in aug.spans[1:]:
                assert words_out[a:b] == [m.vocab_.itos_[i] for i in enc.ids[enc.spans[1][0]:enc.spans[1][1]]]

    def test_no_augmentation_by_default(self, small_corpus):
        m = self._tiny(epochs=0).fit(small_corpus)
        enc = m._encode(small_corpus[0], False)
        assert m._augment(small_corpus[0], enc, m._swap_tables(), np.random.default_rng(0)) is enc
