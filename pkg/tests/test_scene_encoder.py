"""Scene encoder: patch embedding, token assembly, freeze contracts."""

import numpy as np
import pytest

from scenecap.autodiff import AdamW, Tensor, finite_difference_check
from scenecap.errors import ConfigError
from scenecap.pointcloud import PatchSet, PointCloud, knn_group
from scenecap.scene_encoder import SceneEncoder, SceneEncoderConfig

RNG = np.random.default_rng(100)


def small_config(**kw):
    base = dict(feature_dim=1, d_patch=8, d_model=8, m_task=2, m_patches=4,
                k_neighbors=3, n_layers=1, n_heads=2, freeze_seed=5)
    base.update(kw)
    return SceneEncoderConfig(**base)


def small_cloud(n=20, f=1, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(coords=rng.normal(size=(n, 3)),
                      features=rng.normal(size=(n, f)), seed_hint=seed)


def patch_set(m=3, k=4, f=1, seed=1):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(m, k, 3 + f))
    pts[:, 0, :3] = 0.0
    return PatchSet(center_indices=np.arange(m), patch_points=pts)


class TestEncodePatches:
    def test_identical_patches_give_identical_tokens(self):
        enc = SceneEncoder(small_config(), RNG)
        patches = patch_set(m=2)
        patches.patch_points[1] = patches.patch_points[0]
        tokens = enc.encode_patches(patches)
        np.testing.assert_array_equal(tokens.data[0], tokens.data[1])

    def test_k1_pooling_is_identity_over_one_point(self):
        from scenecap.autodiff import gelu

        enc = SceneEncoder(small_config(k_neighbors=1), RNG)
        patches = patch_set(m=2, k=1)
        tokens = enc.encode_patches(patches)
        flat = Tensor(patches.patch_points.reshape(2, 4))
        expected = (gelu(flat @ enc.mlp_w1 + enc.mlp_b1) @ enc.mlp_w2 + enc.mlp_b2).data
        np.testing.assert_array_equal(tokens.data, expected)

    def test_gradient_wrt_patch_mlp_weights(self):
        enc = SceneEncoder(small_config(), RNG)
        patches = patch_set()
        original = enc.mlp_w1

        def f(w):
            enc.mlp_w1 = w
            try:
                return enc.encode_patches(patches).sum()
            finally:
                enc.mlp_w1 = original

        err = finite_difference_check(f, Tensor(original.data.copy()))
        assert err < 1e-4


class TestAssembleSequence:
    def test_task_tokens_lead(self):
        enc = SceneEncoder(small_config(m_task=1), RNG)
        tokens = enc.encode_patches(patch_set(m=2))
        seq = enc.assemble_sequence(tokens)
        assert seq.shape == (3, 8)
        np.testing.assert_array_equal(seq.data[0], enc.task_tokens.data[0])

    def test_point_rows_follow_patch_order(self):
        enc = SceneEncoder(small_config(m_task=1), RNG)
        patches = patch_set(m=3)
        tokens = enc.encode_patches(patches)
        seq = enc.assemble_sequence(tokens)
        swapped = PatchSet(center_indices=patches.center_indices,
                           patch_points=patches.patch_points[[1, 0, 2]])
        seq_swapped = enc.assemble_sequence(enc.encode_patches(swapped))
        np.testing.assert_array_equal(seq.data[1], seq_swapped.data[2])
        np.testing.assert_array_equal(seq.data[2], seq_swapped.data[1])

    def test_equal_widths_skip_projection(self):
        enc = SceneEncoder(small_config(), RNG)
        assert enc.proj is None
        tokens = enc.encode_patches(patch_set(m=2))
        seq = enc.assemble_sequence(tokens)
        np.testing.assert_array_equal(seq.data[2:], tokens.data)

    def test_differing_widths_use_projection(self):
        enc = SceneEncoder(small_config(d_patch=4, d_model=8), RNG)
        assert enc.proj is not None and enc.proj.shape == (4, 8)
        seq = enc.assemble_sequence(enc.encode_patches(patch_set(m=2)))
        assert seq.shape == (4, 8)

    def test_wrong_width_without_projection_is_config_error(self):
        enc = SceneEncoder(small_config(), RNG)
        with pytest.raises(ConfigError, match="projection"):
            enc.assemble_sequence(Tensor(np.zeros((2, 5))))


class TestEncodeScene:
    def test_deterministic(self):
        enc = SceneEncoder(small_config(), np.random.default_rng(1))
        cloud = small_cloud()
        a = enc.encode_scene(cloud)
        b = enc.encode_scene(cloud)
        np.testing.assert_array_equal(a.vector.data, b.vector.data)
        np.testing.assert_array_equal(a.token_grid.data, b.token_grid.data)

    def test_token_grid_row_count(self):
        enc = SceneEncoder(small_config(), RNG)
        emb = enc.encode_scene(small_cloud())
        assert emb.token_grid.shape == (2 + 4, 8)
        assert np.all(np.isfinite(emb.vector.data))

    def test_backward_reaches_trainable_but_not_frozen(self):
        enc = SceneEncoder(small_config(), np.random.default_rng(2))
        emb = enc.encode_scene(small_cloud())
        (emb.vector * emb.vector).sum().backward()
        assert enc.task_tokens.grad is not None
        assert enc.mlp_w1.grad is not None
        for name, p in enc.params.items():
            if name.startswith("scene.frozen."):
                assert p.grad is None, name

    def test_zero_layers_reduces_to_pooled_task_tokens(self):
        enc = SceneEncoder(small_config(n_layers=0, d_patch=4, d_model=8),
                           np.random.default_rng(3))
        emb = enc.encode_scene(small_cloud())
        expected = (enc.task_tokens @ enc.proj).data.mean(axis=0)
        np.testing.assert_allclose(emb.vector.data, expected, atol=1e-12)

    def test_first_task_pooling_mode(self):
        enc = SceneEncoder(small_config(n_layers=0, pool="first_task"),
                           np.random.default_rng(4))
        emb = enc.encode_scene(small_cloud())
        np.testing.assert_array_equal(emb.vector.data, enc.task_tokens.data[0])

    def test_freeze_contract_after_updates(self):
        enc = SceneEncoder(small_config(), np.random.default_rng(5))
        frozen_before = {k: p.data.copy() for k, p in enc.params.items()
                         if not p.requires_grad}
        trainable = {k: p for k, p in enc.params.items() if p.requires_grad}
        opt = AdamW(trainable, lr=1e-2, weight_decay=0.0)
        cloud = small_cloud()
        for _ in range(3):
            opt.zero_grad()
            emb = enc.encode_scene(cloud)
            (emb.vector * emb.vector).sum().backward()
            opt.step()
        for k, before in frozen_before.items():
            assert enc.params[k].data.tobytes() == before.tobytes(), k

    def test_trainable_parameters_move_under_nonzero_loss(self):
        enc = SceneEncoder(small_config(), np.random.default_rng(6))
        task_before = enc.task_tokens.data.copy()
        mlp_before = enc.mlp_w1.data.copy()
        opt = AdamW({k: p for k, p in enc.params.items() if p.requires_grad},
                    lr=1e-2, weight_decay=0.0)
        opt.zero_grad()
        emb = enc.encode_scene(small_cloud())
        (emb.vector * emb.vector).sum().backward()
        opt.step()
        assert not np.array_equal(enc.task_tokens.data, task_before)
        assert not np.array_equal(enc.mlp_w1.data, mlp_before)

    def test_non_member_point_permutation_leaves_embedding_unchanged(self):
        # Two far-away points that belong to no patch may swap places.
        rng = np.random.default_rng(7)
        coords = np.concatenate([rng.normal(scale=0.1, size=(8, 3)),
                                 [[50.0, 50.0, 50.0], [51.0, 51.0, 51.0]]])
        feats = np.concatenate([rng.normal(size=(8, 1)), [[0.5], [0.5]]])
        enc = SceneEncoder(small_config(m_patches=2, k_neighbors=3),
                           np.random.default_rng(8))
        centers = np.array([0, 1])

        def embed(cl):
            return enc.encode_from_patches(knn_group(cl, centers, 3)).vector.data

        cloud = PointCloud(coords=coords, features=feats)
        swapped = PointCloud(coords=coords[[0, 1, 2, 3, 4, 5, 6, 7, 9, 8]],
                             features=feats[[0, 1, 2, 3, 4, 5, 6, 7, 9, 8]])
        np.testing.assert_array_equal(embed(cloud), embed(swapped))


def test_frozen_weights_reproducible_from_seed():
    a = SceneEncoder(small_config(freeze_seed=9), np.random.default_rng(1))
    b = SceneEncoder(small_config(freeze_seed=9), np.random.default_rng(2))
    for name, p in a.params.items():
        if not p.requires_grad:
            np.testing.assert_array_equal(p.data, b.params[name].data)
