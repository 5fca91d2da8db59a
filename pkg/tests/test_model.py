import hashlib
import os

import numpy as np
import numpy.testing as npt
import pytest

from gradcheck import sampled_fd_check
from sagrid.layers import bilinear_upsample_x2, cross_entropy, global_avg_pool, maxpool2d
from sagrid.model import (
    BackboneConfig,
    CheckpointError,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from sagrid.tensor import ShapeMismatchError, Tensor, no_grad, tsum, use_dtype

TINY = BackboneConfig(stage_channels=(4, 8, 16, 32), input_hw=(64, 32), num_classes=5)


def batch(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(dtype))


class TestBuild:
    def test_baseline_has_no_sag(self):
        m = build_model(TINY, (), seed=0)
        assert m.sags == {}
        assert m.depths == frozenset()

    def test_depth_four(self):
        m = build_model(TINY, {4}, seed=0)
        assert sorted(m.sags) == [4]

    def test_all_depths(self):
        m = build_model(TINY, {1, 2, 3, 4}, seed=0)
        assert sorted(m.sags) == [1, 2, 3, 4]

    def test_invalid_depth(self):
        with pytest.raises(ValueError):
            build_model(TINY, {5}, seed=0)

    def test_deterministic_init(self):
        a = build_model(TINY, {4}, seed=3)
        b = build_model(TINY, {4}, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            npt.assert_array_equal(pa.data, pb.data)
        c = build_model(TINY, {4}, seed=4)
        assert not np.array_equal(a.stem.conv.weight.data, c.stem.conv.weight.data)

    def test_default_l2_placement(self):
        m = build_model(TINY, {1, 2, 3, 4}, seed=0)
        assert m.sags[1].apply_l2 and m.sags[2].apply_l2 and m.sags[3].apply_l2
        assert not m.sags[4].apply_l2

    def test_l2_placement_override(self):
        cfg = BackboneConfig(stage_channels=(4, 8, 16, 32), input_hw=(64, 32),
                             num_classes=5, l2_depths=frozenset({4}))
        m = build_model(cfg, {1, 4}, seed=0)
        assert not m.sags[1].apply_l2
        assert m.sags[4].apply_l2


class TestForward:
    def test_baseline_logits_and_empty_grids(self):
        m = build_model(TINY, (), seed=0)
        logits, grids = m.forward(batch((2, 3, 64, 32)), train=False)
        assert logits.shape == (2, 5)
        assert grids == {}

    def test_baseline_never_touches_high_branch(self):
        m = build_model(TINY, (), seed=0)
        m.forward(batch((2, 3, 64, 32)), train=True)
        m.extract_embedding(batch((2, 3, 64, 32)))
        assert m.counters == {"upsample": 0, "sag": 0}

    def test_sag_paths_counted(self):
        m = build_model(TINY, {2, 4}, seed=0)
        m.forward(batch((1, 3, 64, 32)))
        assert m.counters["upsample"] == 1
        assert m.counters["sag"] == 2

    def test_grid_geometry_default_input(self):
        cfg = BackboneConfig(num_classes=4)
        m = build_model(cfg, {1, 2, 3, 4}, seed=0)
        _, grids = m.forward(batch((1, 3, 160, 64)), train=False)
        assert {d: tuple(g.values.shape[2:]) for d, g in grids.items()} == {
            1: (40, 16), 2: (20, 8), 3: (10, 4), 4: (5, 2)}

    def test_input_extent_mismatch(self):
        m = build_model(TINY, (), seed=0)
        with pytest.raises(ShapeMismatchError):
            m.forward(batch((1, 3, 32, 32)))

    def test_zero_init_sag_equals_uniform_merge(self):
        """With a zeroed grid head the merge is exactly maxpool(f1) / (h*w)."""
        m = build_model(TINY, {4}, seed=1)
        m.sags[4].conv1x1.weight.data[...] = 0.0
        m.sags[4].conv1x1.bias.data[...] = 0.0
        x = batch((2, 3, 64, 32), seed=5)
        with no_grad():
            logits, grids = m.forward(x, train=False)

            low = m.stem(x, False)
            high = m.stem(bilinear_upsample_x2(x), False)
            for stage in m.stages:
                low, high = stage(low, False), stage(high, False)
            h, w = high.shape[2] // 2, high.shape[3] // 2
            merged = maxpool2d(high, 2).data * np.float32(1.0 / (h * w))
            hand_logits = m.fc(global_avg_pool(Tensor(merged))).data

        npt.assert_allclose(grids[4].values.data, 1.0 / (h * w), rtol=1e-6)
        npt.assert_allclose(logits.data, hand_logits, atol=1e-7)

    def test_weight_sharing_gradient_is_sum_of_branches(self):
        x = batch((2, 3, 64, 32), seed=7)

        def stage1_weight_grad(low_loss: bool, high_loss: bool) -> np.ndarray:
            m = build_model(TINY, {4}, seed=2)
            losses = []
            if low_loss:
                losses.append(tsum(m.stages[0](m.stem(x, False), False)))
            if high_loss:
                losses.append(tsum(m.stages[0](m.stem(bilinear_upsample_x2(x), False), False)))
            total = losses[0] if len(losses) == 1 else losses[0] + losses[1]
            total.backward()
            return m.stages[0].conv1.weight.grad.copy()

        both = stage1_weight_grad(True, True)
        low_only = stage1_weight_grad(True, False)
        high_only = stage1_weight_grad(False, True)
        assert np.abs(low_only).sum() > 0 and np.abs(high_only).sum() > 0
        npt.assert_allclose(both, low_only + high_only, rtol=1e-4, atol=1e-6)

    def test_end_to_end_gradient_matches_fd(self):
        labels = np.array([1, 3])
        with use_dtype(np.float64):
            m = build_model(TINY, {4}, seed=3)
            x = batch((2, 3, 64, 32), seed=9, dtype=np.float64)

            def loss_fn():
                logits, _ = m.forward(x, train=False)
                return cross_entropy(logits, labels)

            err = sampled_fd_check(loss_fn, m.stages[0].conv1.weight, n_coords=6)
            assert err < 1e-3


class TestEmbedding:
    def test_dimension_matches_final_stage(self):
        m = build_model(BackboneConfig(num_classes=4), {4}, seed=0)
        emb = m.extract_embedding(batch((2, 3, 160, 64)))
        assert emb.shape == (2, 128)

    def test_identical_images_identical_embeddings(self):
        m = build_model(TINY, {4}, seed=0)
        one = np.random.default_rng(1).normal(size=(1, 3, 64, 32)).astype(np.float32)
        emb = m.extract_embedding(Tensor(np.concatenate([one, one])))
        npt.assert_array_equal(emb.data[0], emb.data[1])

    def test_deterministic_across_calls(self):
        m = build_model(TINY, {1, 4}, seed=0)
        x = batch((3, 3, 64, 32), seed=2)
        npt.assert_array_equal(m.extract_embedding(x).data, m.extract_embedding(x).data)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = build_model(TINY, {1, 4}, seed=11)
        m.stages[2].bn1.running_mean += 0.25  # make buffers non-trivial
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path, epoch=7, extra={"mean_rgb": [0.4, 0.5, 0.6]})
        loaded, meta = load_checkpoint(path)

        assert meta["epoch"] == 7
        assert meta["depths"] == [1, 4]
        assert meta["seed"] == 11
        assert meta["extra"]["mean_rgb"] == [0.4, 0.5, 0.6]
        for (na, pa), (nb, pb) in zip(m.named_parameters(), loaded.named_parameters()):
            assert na == nb
            npt.assert_array_equal(pa.data, pb.data)
        for (na, ba), (nb, bb) in zip(m.named_buffers(), loaded.named_buffers()):
            assert na == nb
            npt.assert_array_equal(ba, bb)

        x = batch((2, 3, 64, 32), seed=4)
        npt.assert_array_equal(m.forward(x)[0].data, loaded.forward(x)[0].data)

    def test_save_is_deterministic(self, tmp_path):
        m = build_model(TINY, {4}, seed=0)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(m, a)
        save_checkpoint(m, b)
        assert hashlib.sha256(a.read_bytes()).hexdigest() == hashlib.sha256(b.read_bytes()).hexdigest()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        m = build_model(TINY, {4}, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path)
        (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_tampered_name_rejected(self, tmp_path):
        m = build_model(TINY, {4}, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path)
        blob = path.read_bytes().replace(b"stem.conv.weight", b"stem.conv.weighX", 1)
        (tmp_path / "bad.ckpt").write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
