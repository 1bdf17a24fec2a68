"""Bundle of all model components with shared configuration and checkpointing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .alignment import ProjectionHeads
from .autodiff import Tensor, checksum_params
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .decoder import CaptionDecoder, DecoderConfig
from .errors import ConfigError
from .scene_encoder import SceneEncoder, SceneEncoderConfig
from .text_encoder import TextEncoder, TextEncoderConfig, Vocabulary


@dataclass
class ModelConfig:
    feature_dim: int = 1
    d_model: int = 64
    d_patch: int = 64
    d_shared: int = 64
    m_task: int = 4
    m_patches: int = 64
    k_neighbors: int = 16
    n_layers: int = 2
    n_heads: int = 4
    text_layers: int = 2
    max_len: int = 24
    freeze_seed: int = 7
    init_seed: int = 1
    pool: str = "mean_task"
    tau_init: float = 0.07

    def scene_config(self) -> SceneEncoderConfig:
        return SceneEncoderConfig(
            feature_dim=self.feature_dim, d_patch=self.d_patch, d_model=self.d_model,
            m_task=self.m_task, m_patches=self.m_patches, k_neighbors=self.k_neighbors,
            n_layers=self.n_layers, n_heads=self.n_heads,
            freeze_seed=self.freeze_seed, pool=self.pool)

    def text_config(self) -> TextEncoderConfig:
        return TextEncoderConfig(d_model=self.d_model, n_layers=self.text_layers,
                                 n_heads=self.n_heads, freeze_seed=self.freeze_seed + 1)

    def decoder_config(self) -> DecoderConfig:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        return DecoderConfig(d_model=self.d_model, n_layers=self.n_layers,
                             n_heads=self.n_heads, d_k=self.d_model // self.n_heads,
                             max_len=self.max_len)


class CaptionModel:
    """Scene encoder + text encoder + projection heads + caption decoder."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.init_seed)
        self.scene_encoder = SceneEncoder(config.scene_config(), rng)
        self.text_encoder = TextEncoder(config.text_config(), len(vocab), rng)
        self.heads = ProjectionHeads(rng, config.d_model, config.d_model,
                                     config.d_shared, tau_init=config.tau_init)
        self.decoder = CaptionDecoder(config.decoder_config(), len(vocab), rng)

    def parameters(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        for part in (self.scene_encoder, self.text_encoder, self.heads, self.decoder):
            merged.update(part.params)
        return merged

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if not p.requires_grad}

    def checksum(self) -> str:
        return checksum_params(self.parameters())

    # ------------------------------------------------------------------
    # persistence: binary weights + a JSON sidecar describing the shapes
    # ------------------------------------------------------------------
    def save(self, path, vocab_path=None) -> None:
        save_checkpoint(path, self.parameters())
        sidecar = {"model": asdict(self.config)}
        if vocab_path is not None:
            sidecar["vocab"] = str(vocab_path)
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None) -> "CaptionModel":
        try:
            with open(str(path) + ".json", "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"missing checkpoint sidecar '{path}.json'") from exc
        config = ModelConfig(**sidecar["model"])
        if vocab is None:
            if "vocab" not in sidecar:
                raise ConfigError("checkpoint sidecar names no vocabulary file")
            vocab = Vocabulary.load(sidecar["vocab"])
        model = cls(config, vocab)
        restore_into(model.parameters(), load_checkpoint(path))
        return model
