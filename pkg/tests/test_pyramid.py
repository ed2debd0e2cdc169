from dataclasses import replace

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from stpyramid import tensorops as T
from stpyramid.data import Dataset, DatasetConfig, VideoSample, gen_dataset
from stpyramid.pyramid import (
    CheckpointError,
    PyramidConfig,
    TrainConfig,
    backward,
    build_params,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    temporal_fuse,
    train,
    variant_config,
)
from stpyramid.sketch import circular_convolution_direct, count_sketch

TINY = PyramidConfig(m=2, c_s=4, c_t=4, grid_h=2, grid_w=2, d_t=8, d_att=8, d_top=8,
                     n_hidden=4, head_width=5, n_classes=3)


def tiny_batch(config=TINY, n=2, chunks=None, seed=0):
    rng = np.random.default_rng(seed)
    chunks = chunks or config.m
    return Dataset(
        rng.normal(size=(n, config.c_s, config.grid_h, config.grid_w)),
        rng.normal(size=(n, chunks, config.c_t)),
        rng.integers(0, config.n_classes, size=n),
    )


def end_to_end_check(config, seed=0, n=2):
    params = build_params(config, seed)
    if params.attention is not None:
        # the score layer starts at zero; perturb it so every gradient path is live
        w = params.attention.conv2.weight
        w[...] = np.random.default_rng(seed + 2).normal(size=w.shape)
    batch = tiny_batch(config, n=n, seed=seed)
    up = np.random.default_rng(seed + 1).normal(size=(n, config.n_classes))
    logits, caches = forward(batch, params)
    grads, input_grads = backward(caches, up, params)

    def loss():
        return np.sum(forward(batch, params)[0] * up)

    errors = {name: rel_error(grads[name], numeric_grad(loss, arr)) for name, arr in params.arrays().items()}
    errors["input.spatial"] = rel_error(input_grads["spatial_map"], numeric_grad(loss, batch.spatial_map))
    errors["input.temporal"] = rel_error(input_grads["temporal_vecs"], numeric_grad(loss, batch.temporal_vecs))
    return errors


class TestBuild:
    def test_deterministic(self):
        a, b = build_params(TINY, 3), build_params(TINY, 3)
        for k, v in a.arrays().items():
            assert np.array_equal(v, b.arrays()[k])
        assert a.hashes() == b.hashes()

    def test_seed_changes_params(self):
        a, b = build_params(TINY, 3), build_params(TINY, 4)
        assert not np.array_equal(a.arrays()["head.main.0.weight"], b.arrays()["head.main.0.weight"])

    def test_hash_seeds_unique(self):
        params = build_params(PyramidConfig(), 0)
        seeds = [h.seed for h in params.hashes().values()]
        assert len(seeds) == 3 + 2 + 3
        assert len(set(seeds)) == len(seeds)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            build_params(replace(TINY, d_top=0), 0)
        with pytest.raises(ValueError):
            build_params(replace(TINY, top_fusion_method="max"), 0)
        with pytest.raises(ValueError):
            build_params(replace(TINY, top_fusion_method="average_logits"), 0)

    def test_variant_ladder_grows(self):
        base = PyramidConfig()
        params = {v: build_params(variant_config(base, v), 0) for v in "ABCD"}
        n = {v: p.n_parameters() for v, p in params.items()}
        assert n["A"] < n["B"] < n["C"] <= n["D"]
        assert len(params["A"].hashes()) < len(params["B"].hashes()) < len(params["C"].hashes()) < len(params["D"].hashes())
        assert params["D"].attention is not None and params["C"].attention is None


class TestTemporalFuse:
    def test_sum(self, rng):
        cfg = replace(TINY, m=3, temporal_fusion_method="sum")
        v = rng.normal(size=4)
        out, _ = temporal_fuse(np.stack([v, v, v]), build_params(cfg, 0))
        np.testing.assert_allclose(out, 3 * v, atol=1e-15)

    def test_concat_order(self, rng):
        cfg = replace(TINY, temporal_fusion_method="concat")
        a, b = rng.normal(size=4), rng.normal(size=4)
        out, _ = temporal_fuse(np.stack([a, b]), build_params(cfg, 0))
        np.testing.assert_array_equal(out, np.concatenate([a, b]))

    def test_stcb_is_convolution_of_sketches(self, rng):
        params = build_params(TINY, 0)
        a, b = rng.normal(size=4), rng.normal(size=4)
        out, _ = temporal_fuse(np.stack([a, b]), params)
        h0, h1 = params.temporal_hashes
        np.testing.assert_allclose(out, circular_convolution_direct(count_sketch(a, h0), count_sketch(b, h1)), atol=1e-9)

    @pytest.mark.parametrize("method", ["stcb", "concat", "sum"])
    def test_single_path_passthrough(self, rng, method):
        params = build_params(replace(TINY, m=1, temporal_fusion_method=method), 0)
        v = rng.normal(size=(1, 4))
        np.testing.assert_array_equal(temporal_fuse(v, params)[0], v[0])

    def test_path_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            temporal_fuse(rng.normal(size=(3, 4)), build_params(TINY, 0))


class TestForward:
    def test_zero_head_gives_uniform(self):
        cfg = replace(TINY, n_classes=2)
        params = build_params(cfg, 0)
        last = params.heads["main"][1]
        last.weight[...] = 0.0
        last.bias[...] = 0.0
        batch = tiny_batch(cfg)
        logits, _ = forward(batch, params)
        loss, _ = T.softmax_cross_entropy(logits, batch.labels)
        assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_attention_disabled_passes_average(self):
        cfg = replace(TINY, attention_enabled=False)
        params = build_params(cfg, 0)
        batch = tiny_batch(cfg)
        _, caches = forward(batch, params)
        assert "attention" not in caches
        # the third top pathway received the spatial average
        spatial_avg = T.average_pool_grid(batch.spatial_map)
        np.testing.assert_allclose(caches["top_cache"][0].sketches[2], count_sketch(spatial_avg, params.top_hashes[2]))

    def test_zero_score_net_matches_no_attention(self):
        d = build_params(TINY, 0)
        d.attention.conv2.weight[...] = 0.0
        d.attention.conv2.bias[...] = 0.0
        c = build_params(replace(TINY, attention_enabled=False), 0)
        for k, v in c.arrays().items():
            v[...] = d.arrays()[k]
        batch = tiny_batch(TINY)
        np.testing.assert_allclose(forward(batch, d)[0], forward(batch, c)[0], atol=1e-12)

    def test_single_sample(self):
        params = build_params(TINY, 0)
        batch = tiny_batch(TINY, n=3)
        logits, _ = forward(batch, params)
        one, _ = forward(batch[1], params)
        assert one.shape == (3,)
        np.testing.assert_allclose(one, logits[1], atol=1e-12)

    def test_centred_chunk_selection(self):
        cfg = replace(TINY, m=1)
        params = build_params(cfg, 0)
        batch = tiny_batch(cfg, chunks=3)
        swapped = Dataset(batch.spatial_map, batch.temporal_vecs[:, [0, 1, 0]], batch.labels)
        np.testing.assert_allclose(forward(batch, params)[0], forward(swapped, params)[0], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(tiny_batch(replace(TINY, c_s=5)), build_params(TINY, 0))

    def test_two_stream_outputs_log_mean_posterior(self):
        cfg = variant_config(TINY, "A")
        params = build_params(cfg, 0)
        logits, caches = forward(tiny_batch(cfg), params)
        np.testing.assert_allclose(np.exp(logits).sum(axis=-1), 1.0, atol=1e-12)


class TestBackward:
    def test_zero_upstream(self):
        params = build_params(TINY, 0)
        _, caches = forward(tiny_batch(), params)
        grads, inputs = backward(caches, np.zeros((2, 3)), params)
        assert all(not g.any() for g in grads.values())
        assert all(not g.any() for g in inputs.values())

    def test_end_to_end_tiny(self):
        errors = end_to_end_check(TINY)
        assert max(errors.values()) < 1e-4, errors

    @pytest.mark.parametrize("variant", ["A", "B", "C"])
    def test_end_to_end_variants(self, variant):
        errors = end_to_end_check(variant_config(TINY, variant))
        assert max(errors.values()) < 1e-4, errors

    @pytest.mark.parametrize("overrides", [
        dict(temporal_fusion_method="concat", top_fusion_method="concat", attention_input="concat"),
        dict(temporal_fusion_method="sum", top_fusion_method="sum", attention_input="sum"),
        dict(m=3, post_sketch_normalize=True),
    ])
    def test_end_to_end_alternatives(self, overrides):
        errors = end_to_end_check(replace(TINY, **overrides))
        assert max(errors.values()) < 1e-4, errors

    def test_deterministic(self):
        params = build_params(TINY, 0)
        batch = tiny_batch()
        up = np.ones((2, 3))
        g1, _ = backward(forward(batch, params)[1], up, params)
        g2, _ = backward(forward(batch, params)[1], up, params)
        for k in g1:
            assert np.array_equal(g1[k], g2[k])

    def test_cache_mismatch(self):
        params = build_params(TINY, 0)
        _, caches = forward(tiny_batch(), params)
        with pytest.raises(ValueError):
            backward(caches, np.zeros((3, 3)), params)


SMALL_DATA = DatasetConfig(n_train=64, n_test=32, c_s=8, c_t=8, grid_h=3, grid_w=3)
SMALL_MODEL = PyramidConfig(c_s=8, c_t=8, grid_h=3, grid_w=3, d_t=32, d_att=16, d_top=32,
                            n_hidden=8, head_width=16)


class TestTrain:
    @pytest.fixture(scope="class")
    @staticmethod
    def small():
        return gen_dataset(SMALL_DATA)

    def test_zero_iterations(self, small):
        tr, _ = small
        init = build_params(SMALL_MODEL, 0)
        before = {k: v.copy() for k, v in init.arrays().items()}
        params, metrics = train(tr, SMALL_MODEL, TrainConfig(iterations=0), params=init)
        assert metrics == []
        for k, v in params.arrays().items():
            assert np.array_equal(v, before[k])

    def test_loss_decreases_first_epoch(self, small):
        tr, _ = small
        params = build_params(SMALL_MODEL, 0)
        logits, _ = forward(tr, params)
        initial, _ = T.softmax_cross_entropy(logits, tr.labels)
        params, _ = train(tr, SMALL_MODEL, TrainConfig(iterations=2, batch_size=32), params=params)
        after, _ = T.softmax_cross_entropy(forward(tr, params)[0], tr.labels)
        assert after < initial

    def test_same_seed_same_log(self, small):
        tr, te = small
        cfg = TrainConfig(iterations=12, batch_size=16, seed=5)
        _, m1 = train(tr, SMALL_MODEL, cfg, test_set=te)
        _, m2 = train(tr, SMALL_MODEL, cfg, test_set=te)
        assert m1 == m2
        assert len(m1) == 3

    def test_overfit_one_sample(self):
        # full model D on one fixed sample: monotone loss decrease at lr 0.01
        tr, _ = gen_dataset(replace(DatasetConfig(), n_train=1, n_test=1))
        params = build_params(PyramidConfig(), 0)
        arrays, vel = params.arrays(), {}
        from stpyramid.pyramid import loss_and_grads

        losses = []
        for _ in range(50):
            loss, _, grads = loss_and_grads(tr, params)
            losses.append(loss)
            T.sgd_step(arrays, grads, 0.01, 0.0, vel)
        assert np.all(np.diff(losses) < 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self, small):
        from stpyramid.pyramid import DivergenceError

        tr, _ = small
        with pytest.raises(DivergenceError):
            train(tr, SMALL_MODEL, TrainConfig(iterations=200, lr=1e6, momentum=0.0))

    def test_lr_schedule(self):
        cfg = TrainConfig(iterations=100, lr=0.01)
        assert cfg.lr_at(0) == 0.01
        assert cfg.lr_at(60) == pytest.approx(0.001)
        assert cfg.lr_at(85) == pytest.approx(0.0001)


class TestEvaluate:
    def test_oracle_params_perfect(self):
        # a 2-class problem separable on the spatial average; hand-set the head
        cfg = PyramidConfig(m=1, c_s=2, c_t=2, grid_h=2, grid_w=2, n_classes=2, head_width=2,
                            top_fusion_method="concat", attention_enabled=False)
        params = build_params(cfg, 0)
        first, last = params.heads["main"]
        first.weight[...] = 0.0
        first.bias[...] = 0.0
        first.weight[0, 0] = first.weight[1, 1] = 1.0  # spatial average channels
        last.weight[...] = np.eye(2)
        last.bias[...] = 0.0
        samples = []
        for i in range(20):
            label = i % 2
            x = np.zeros((2, 2, 2))
            x[label] = 1.0
            samples.append(VideoSample(x, np.zeros((1, 2)), label))
        acc, conf = evaluate(Dataset.from_samples(samples), params)
        assert acc == 1.0
        assert conf.tolist() == [[10, 0], [0, 10]]

    def test_untrained_near_chance(self):
        tr, te = gen_dataset(replace(DatasetConfig(), n_train=8, n_test=800))
        rng = np.random.default_rng(0)
        shuffled = Dataset(te.spatial_map, te.temporal_vecs, rng.permutation(te.labels))
        params, _ = train(tr, PyramidConfig(), TrainConfig(iterations=0))
        acc, conf = evaluate(shuffled, params)
        assert abs(acc - 0.125) < 0.05
        assert conf.sum(axis=1).tolist() == np.bincount(shuffled.labels, minlength=8).tolist()


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = build_params(TINY, 2)
        batch = tiny_batch()
        tr = Dataset(batch.spatial_map, batch.temporal_vecs, batch.labels)
        params, _ = train(tr, TINY, TrainConfig(iterations=3, batch_size=2), params=params)
        path = tmp_path / "model.stpn"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.config == params.config
        assert np.array_equal(forward(batch, loaded)[0], forward(batch, params)[0])
        for k, v in params.velocity.items():
            assert np.array_equal(loaded.velocity[k], v)
        assert path.read_bytes()[:4] == b"STPN"

    @pytest.mark.parametrize("variant", ["A", "B", "C", "D"])
    def test_round_trip_variants(self, tmp_path, variant):
        params = build_params(variant_config(TINY, variant), 7)
        path = tmp_path / "m.stpn"
        save_checkpoint(path, params)
        batch = tiny_batch()
        assert np.array_equal(forward(batch, load_checkpoint(path))[0], forward(batch, params)[0])

    def test_corrupt(self, tmp_path):
        path = tmp_path / "m.stpn"
        save_checkpoint(path, build_params(TINY, 0))
        raw = path.read_bytes()
        (tmp_path / "bad.stpn").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.stpn")
        (tmp_path / "short.stpn").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "short.stpn")
