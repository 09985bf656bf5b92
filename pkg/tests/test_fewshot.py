import dataclasses

import numpy as np
import pytest

import fsed.fewshot as fs
import fsed.model as M
from fsed.errors import TaskError
from fsed.framing import WindowBatch
from fsed.ingest import RunConfig

TINY = dataclasses.replace(RunConfig(), channels=4, embed_dim=4, heads=2,
                           ffn_dim=8, mel_bands=16, win_frames=32,
                           shift_frames=8, iters=4, aug_start_iter=2,
                           support_count=2, finetune_batch=1,
                           pseudo_cycles=1, pseudo_iters=2)


def tiny_model(seed=0, n_classes=3):
    return M.ModelParams(TINY, n_classes=n_classes, seed=seed)


class TestPosCenter:
    def test_identical_unit_vectors(self):
        v = np.array([0.6, 0.8])
        assert fs.pos_center([v] * 5) == pytest.approx(v)

    def test_mean_then_normalize(self):
        center = fs.pos_center([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert center == pytest.approx([0.7071, 0.7071], abs=1e-4)

    def test_zero_norm_rejected(self):
        with pytest.raises(TaskError):
            fs.pos_center([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])


class TestQuerySimilarity:
    def test_self_similarity_one(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=8)
        center = v / np.linalg.norm(v)
        sims, score = fs.query_similarity(v[None, :], center)
        assert score == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_zero(self):
        sims, _ = fs.query_similarity(np.array([[1.0, 0.0]]),
                                      np.array([0.0, 1.0]))
        assert sims[0] == pytest.approx(0.0)

    def test_oracle_value(self):
        center = np.array([1.0, 1.0]) / np.sqrt(2)
        sims, _ = fs.query_similarity(np.array([[1.0, 0.0]]), center)
        assert sims[0] == pytest.approx(0.70711, abs=1e-5)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(50, 8))
        c = rng.normal(size=8)
        sims, score = fs.query_similarity(emb, c / np.linalg.norm(c))
        assert np.all(sims >= -1 - 1e-12) and np.all(sims <= 1 + 1e-12)
        assert score == sims.max()

    def test_window_score_is_max(self):
        emb = np.array([[1.0, 0.0], [0.0, -1.0], [0.5, 0.5]])
        _, score = fs.query_similarity(emb, np.array([1.0, 0.0]))
        assert score == pytest.approx(1.0)


class TestReconstructNegatives:
    def _windows(self, n):
        return [WindowBatch(features=np.full((8, 2), float(i)),
                            sed_labels=np.zeros(8, dtype=int),
                            sfbc_labels=np.zeros(8, dtype=int),
                            train_mask=np.ones(8, dtype=int),
                            window_start_frame=0, source_id="q")
                for i in range(n)]

    def test_lowest_score_selected(self):
        pool = fs.reconstruct_negatives(self._windows(3), [0.9, 0.1, 0.5], 1, [])
        assert len(pool) == 1
        assert np.all(pool[0] == 1.0)

    def test_quota_exceeds_count(self):
        pool = fs.reconstruct_negatives(self._windows(2), [0.3, 0.4], 10, [])
        assert len(pool) == 2

    def test_tie_earlier_index(self):
        pool = fs.reconstruct_negatives(self._windows(3), [0.5, 0.5, 0.5], 1, [])
        assert np.all(pool[0] == 0.0)

    def test_empty_query_region(self):
        neg = [np.ones((5, 2))]
        pool = fs.reconstruct_negatives([], [], 2, neg)
        assert len(pool) == 1 and np.all(pool[0] == 1.0)

    def test_matches_brute_force_argmin(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            scores = rng.uniform(-1, 1, n).round(3).tolist()
            pool = fs.reconstruct_negatives(self._windows(n), scores, 1, [])
            best = min(range(n), key=lambda i: (scores[i], i))
            assert np.all(pool[0] == best)


class TestBuildSupports:
    POOL = [np.full((40, 3), -1.0)]

    def _shot(self, length, value=7.0):
        return np.full((length, 3), value)

    def test_deterministic(self):
        a = fs.build_supports([self._shot(10)], self.POOL, 4, seed=3, win=64)
        b = fs.build_supports([self._shot(10)], self.POOL, 4, seed=3, win=64)
        for wa, wb in zip(a.support1 + a.support2, b.support1 + b.support2):
            assert np.array_equal(wa.features, wb.features)
            assert np.array_equal(wa.sed_labels, wb.sed_labels)

    def test_single_contiguous_pos_run(self):
        sup = fs.build_supports([self._shot(9), self._shot(14)], self.POOL,
                                8, seed=4, win=64)
        for w in sup.support1 + sup.support2:
            pos = np.flatnonzero(w.sed_labels)
            assert len(pos) >= 1
            assert np.array_equal(pos, np.arange(pos[0], pos[-1] + 1))

    def test_pos_frame_count_matches_shot(self):
        sup = fs.build_supports([self._shot(50)], self.POOL, 5, seed=5, win=431)
        for w in sup.support1 + sup.support2:
            assert int(w.sed_labels.sum()) == 50

    def test_labeled_frames_carry_shot_content(self):
        shots = [self._shot(12, value=5.0), self._shot(7, value=9.0)]
        sup = fs.build_supports(shots, self.POOL, 6, seed=6, win=64)
        for w in sup.support1 + sup.support2:
            shot = shots[w.provenance["shot"]]
            a = w.provenance["offset"]
            assert np.array_equal(w.features[a:a + len(shot)], shot)
            assert np.array_equal(np.flatnonzero(w.sed_labels),
                                  np.arange(a, a + len(shot)))

    def test_oversized_shot_cropped(self):
        sup = fs.build_supports([self._shot(100)], self.POOL, 2, seed=7, win=64)
        for w in sup.support1:
            assert int(w.sed_labels.sum()) == 64

    def test_no_shots_rejected(self):
        with pytest.raises(TaskError):
            fs.build_supports([], self.POOL, 2, seed=0)


class TestTimeFilterAug:
    SPEC = fs.AugSpec(zones=6, min_zone=48)

    def test_identity_knots(self):
        rng = np.random.default_rng(8)
        window = rng.uniform(0, 1, (431, 16))
        out = fs.time_filter_aug(window, self.SPEC, rng,
                                 knots=np.full(7, 6.0 / 14.0))
        assert out == pytest.approx(window, abs=1e-12)

    def test_three_frame_ramp_gains(self):
        spec = fs.AugSpec(zones=1, min_zone=3)
        window = np.ones((3, 2))
        out = fs.time_filter_aug(window, spec, np.random.default_rng(9),
                                 knots=np.array([0.0, 1.0]))
        assert out[:, 0] == pytest.approx([0.50119, 1.12202, 2.51189], abs=1e-5)

    def test_gain_bounds(self):
        rng = np.random.default_rng(10)
        window = np.ones((431, 4))
        for _ in range(20):
            out = fs.time_filter_aug(window, self.SPEC, rng)
            assert np.all(out >= 0.50119 - 1e-5)
            assert np.all(out <= 2.51189 + 1e-5)

    def test_zero_frames_stay_zero(self):
        rng = np.random.default_rng(11)
        window = np.zeros((431, 4))
        assert np.all(fs.time_filter_aug(window, self.SPEC, rng) == 0)

    def test_constant_knots_uniform_scale(self):
        rng = np.random.default_rng(12)
        window = rng.uniform(0, 1, (431, 4))
        out = fs.time_filter_aug(window, self.SPEC, rng, knots=np.full(7, 0.25))
        ratio = out / window
        assert ratio == pytest.approx(ratio.flat[0])

    def test_short_window_identity(self):
        window = np.ones((10, 4))
        out = fs.time_filter_aug(window, self.SPEC, np.random.default_rng(13))
        assert np.array_equal(out, window)
        assert out is not window

    def test_zone_lengths_respect_minimum(self):
        # all zones at least min_zone: total length preserved by construction
        rng = np.random.default_rng(14)
        out = fs.time_filter_aug(np.ones((431, 2)), self.SPEC, rng)
        assert out.shape == (431, 2)


class TestGrafting:
    def test_pos_center_row(self):
        model = tiny_model()
        before = model.decoder_sed.w.data.copy()
        center = np.arange(4, dtype=float)
        fs.graft_background_row(model, center, "pos_center")
        assert np.array_equal(model.decoder_sed.w.data[:, 0], center)
        assert model.decoder_sed.b.data[0] == 0.0
        # all other rows bit-identical
        assert model.decoder_sed.w.data[:, 1:].tobytes() == \
            before[:, 1:].tobytes()

    def test_binary_row_mode(self):
        model = tiny_model()
        fs.graft_background_row(model, np.zeros(4), "binary_row")
        assert np.array_equal(model.decoder_sed.w.data[:, 0],
                              model.decoder_bin.w.data[:, 1])

    def test_unknown_mode(self):
        with pytest.raises(Exception):
            fs.graft_background_row(tiny_model(), np.zeros(4), "bogus")


def _tiny_supports(seed=0):
    rng = np.random.default_rng(seed)
    shot = rng.uniform(1, 2, (8, 16))
    pool = [rng.uniform(0, 0.2, (40, 16))]
    return fs.build_supports([shot], pool, TINY.support_count, seed=seed, win=32)


class TestFinetuneSed:
    def test_freeze_contract(self):
        model = tiny_model()
        before = model.snapshot()
        fs.finetune_sed(model, _tiny_supports(), [], TINY, seed=1)
        after = model.state_arrays()
        for name in before:
            if name.startswith(("block0.", "block1.", "embed_proj.", "tf.",
                                "decoder_sfbc.")) and "running" not in name:
                assert np.array_equal(before[name], after[name]), name
        changed = any(not np.array_equal(before[n], after[n])
                      for n in before if n.startswith("decoder_bin."))
        assert changed

    def test_binary_loss_decreases(self):
        cfg = dataclasses.replace(TINY, iters=30, use_aug=False,
                                  finetune_batch=2)
        model = tiny_model()
        sup = _tiny_supports(2)

        def mean_loss():
            vals = []
            for w in sup.support1 + sup.support2:
                loss, _ = fs._binary_ce(model, w.features, w.sfbc_labels,
                                        w.train_mask, cfg.win_frames)
                vals.append(float(loss.data))
            return float(np.mean(vals))

        before = mean_loss()
        fs.finetune_sed(model, sup, [], cfg, seed=3)
        assert mean_loss() < before


class TestPseudoLabels:
    def _query_windows(self, seed=0, n=2):
        rng = np.random.default_rng(seed)
        return [WindowBatch(features=rng.uniform(0, 1, (32, 16)),
                            sed_labels=np.zeros(32, dtype=int),
                            sfbc_labels=np.zeros(32, dtype=int),
                            train_mask=np.ones(32, dtype=int),
                            window_start_frame=32 * i, source_id="q")
                for i in range(n)]

    def test_zero_cycles_unchanged(self):
        cfg = dataclasses.replace(TINY, pseudo_cycles=0)
        model = tiny_model()
        before = model.snapshot()
        stats = fs.pseudo_label_refine(model, self._query_windows(), cfg, 0)
        assert stats == {"cycles_run": 0, "cycles_skipped": 0}
        for k, v in model.state_arrays().items():
            assert np.array_equal(v, before[k])

    def test_unconfident_cycles_skipped(self, monkeypatch):
        model = tiny_model()
        before = model.snapshot()
        monkeypatch.setattr(fs, "_bin_probs",
                            lambda m, f, w: np.full(w, 0.5))
        stats = fs.pseudo_label_refine(model, self._query_windows(), TINY, 0)
        assert stats["cycles_skipped"] == TINY.pseudo_cycles
        assert stats["cycles_run"] == 0
        for k, v in model.state_arrays().items():
            assert np.array_equal(v, before[k])

    def test_confident_frames_trigger_training(self):
        model = tiny_model()
        before = model.snapshot()
        stats = fs.pseudo_label_refine(model, self._query_windows(1), TINY, 0)
        if stats["cycles_run"]:
            assert any(not np.array_equal(before[n], model.state_arrays()[n])
                       for n in before if n.startswith("decoder_bin."))


class TestFinetuneSfbc:
    def test_transformer_frozen_decoder_trained(self):
        model = tiny_model()
        before = model.snapshot()
        center = fs.finetune_sfbc(model, _tiny_supports(4), TINY, seed=5)
        assert center is not None and center.shape == (4,)
        after = model.state_arrays()
        for name in before:
            if name.startswith("tf.") or name.startswith("block"):
                assert np.array_equal(before[name], after[name]), name
        assert any(not np.array_equal(before[n], after[n])
                   for n in before if n.startswith("decoder_sfbc."))

    def test_empty_support1_skipped(self):
        model = tiny_model()
        sup = fs.ReconstructedSupports(support1=[], support2=[])
        assert fs.finetune_sfbc(model, sup, TINY, seed=0) is None


class TestFrameArithmetic:
    def test_time_to_frames_center_rule(self):
        period = 256 / 22050
        a, b = fs._time_to_frames(0.0, 1.0, period)
        assert (a, b) == (0, 86)  # frame 85 center 0.9927 < 1.0 <= frame 86

    def test_shot_embedding_masked_mean(self):
        model = tiny_model()
        rng = np.random.default_rng(15)
        features = rng.uniform(0, 1, (200, 16))
        emb_val = fs.shot_embedding(model, features, (40, 48), TINY)
        assert emb_val.shape == (4,)
        assert np.all(np.isfinite(emb_val))
