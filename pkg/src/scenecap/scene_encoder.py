"""Scene encoder: patch tokens, task tokens, and a frozen transformer trunk.

The raw cloud is reduced to M patches (farthest point sampling + kNN
grouping), each patch is embedded by a shared point-wise MLP with max
pooling, learnable task tokens are prepended, and the assembled sequence
runs through frozen transformer layers generated from a fixed seed. The
global scene embedding pools the task-token outputs; the full token grid
is retained for decoder cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, gelu, max_along
from .errors import ConfigError
from .pointcloud import PatchSet, PointCloud, farthest_point_sample, knn_group
from .transformer import EncoderBlock, init_weight, init_zeros

POOL_MODES = ("mean_task", "first_task")


@dataclass
class SceneEncoderConfig:
    feature_dim: int = 1
    d_patch: int = 64
    d_model: int = 64
    m_task: int = 4
    m_patches: int = 64
    k_neighbors: int = 16
    n_layers: int = 2
    n_heads: int = 4
    freeze_seed: int = 7
    pool: str = "mean_task"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.m_task < 1:
            raise ValueError("at least one task token is required")
        if self.pool not in POOL_MODES:
            raise ConfigError(f"unknown pool mode '{self.pool}'")


@dataclass
class SceneEmbedding:
    vector: Tensor      # (d_model,) pooled task-token output
    token_grid: Tensor  # (m_task + m_patches, d_model) for cross-attention


class SceneEncoder:
    def __init__(self, config: SceneEncoderConfig, init_rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        in_dim = 3 + config.feature_dim

        self.mlp_w1 = init_weight(init_rng, (in_dim, config.d_patch),
                                  "scene.patch_mlp.w1", trainable=True)
        self.mlp_b1 = init_zeros((config.d_patch,), "scene.patch_mlp.b1", trainable=True)
        self.mlp_w2 = init_weight(init_rng, (config.d_patch, config.d_patch),
                                  "scene.patch_mlp.w2", trainable=True)
        self.mlp_b2 = init_zeros((config.d_patch,), "scene.patch_mlp.b2", trainable=True)
        self.task_tokens = init_weight(init_rng, (config.m_task, config.d_patch),
                                       "scene.task_tokens", trainable=True)
        for t in (self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2, self.task_tokens):
            self.params[t.name] = t

        self.proj: Tensor | None = None
        if config.d_patch != config.d_model:
            self.proj = init_weight(init_rng, (config.d_patch, config.d_model),
                                    "scene.proj", trainable=True)
            self.params[self.proj.name] = self.proj

        frozen_rng = np.random.default_rng(config.freeze_seed)
        self.blocks = [
            EncoderBlock(frozen_rng, config.d_model, config.n_heads,
                         f"scene.frozen.layer{i}", trainable=False, params=self.params)
            for i in range(config.n_layers)
        ]

    def encode_patches(self, patches: PatchSet) -> Tensor:
        """Shared two-layer point MLP, max-pooled over each patch's K points."""
        m, k, width = patches.patch_points.shape
        flat = Tensor(patches.patch_points.reshape(m * k, width))
        h = gelu(flat @ self.mlp_w1 + self.mlp_b1)
        h = h @ self.mlp_w2 + self.mlp_b2
        return max_along(h.reshape(m, k, self.config.d_patch), axis=1)

    def assemble_sequence(self, point_tokens: Tensor) -> Tensor:
        """Task tokens first, then point tokens; project to model width if needed."""
        if point_tokens.shape[-1] != self.config.d_patch:
            raise ConfigError(
                f"point tokens are {point_tokens.shape[-1]}-wide, expected "
                f"{self.config.d_patch}; no projection is configured for that width")
        seq = concat([self.task_tokens, point_tokens], axis=0)
        return seq @ self.proj if self.proj is not None else seq

    def encode_scene(self, cloud: PointCloud, fps_seed: int | None = None) -> SceneEmbedding:
        centers = farthest_point_sample(
            cloud, min(self.config.m_patches, cloud.n_points),
            seed=fps_seed if fps_seed is not None else 0)
        patches = knn_group(cloud, centers, min(self.config.k_neighbors, cloud.n_points))
        return self.encode_from_patches(patches)

    def encode_from_patches(self, patches: PatchSet) -> SceneEmbedding:
        seq = self.assemble_sequence(self.encode_patches(patches))
        for block in self.blocks:
            seq = block(seq)
        m_t = self.config.m_task
        if self.config.pool == "mean_task":
            vector = seq[:m_t].mean(axis=0)
        else:
            vector = seq[0]
        return SceneEmbedding(vector=vector, token_grid=seq)
