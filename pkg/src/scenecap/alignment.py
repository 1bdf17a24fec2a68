"""Shared-space projection heads and the contrastive alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import math
import numpy as np

from .autodiff import (Tensor, clip, gather_rows, gelu, log_softmax,
                       stack_rows)
from .errors import DegenerateEmbeddingError
from .transformer import init_weight, init_zeros

TAU_MIN, TAU_MAX = 0.01, 100.0


@dataclass
class AlignedPair:
    scene_unit: Tensor  # (d_shared,), unit L2 norm
    text_unit: Tensor   # (d_shared,), unit L2 norm


def l2_normalize(v: Tensor) -> Tensor:
    norm_sq = (v * v).sum()
    if norm_sq.item() == 0.0:
        raise DegenerateEmbeddingError("cannot normalize a zero-norm embedding")
    return v / norm_sq.sqrt()


class ProjectionHeads:
    """One-hidden-layer heads for each modality plus a learnable temperature.

    The temperature is stored as log(tau) and clamped to [0.01, 100] on
    read; gradient flows through the clamp's identity region only.
    """

    def __init__(self, init_rng: np.random.Generator, d_scene: int, d_text: int,
                 d_shared: int, tau_init: float = 0.07):
        self.params: dict[str, Tensor] = {}

        def head(prefix: str, d_in: int):
            w1 = init_weight(init_rng, (d_in, d_shared), f"{prefix}.w1", True)
            b1 = init_zeros((d_shared,), f"{prefix}.b1", True)
            w2 = init_weight(init_rng, (d_shared, d_shared), f"{prefix}.w2", True)
            b2 = init_zeros((d_shared,), f"{prefix}.b2", True)
            for t in (w1, b1, w2, b2):
                self.params[t.name] = t
            return (w1, b1, w2, b2)

        self._head_v = head("align.head_v", d_scene)
        self._head_t = head("align.head_t", d_text)
        self.log_tau = Tensor(np.array([math.log(tau_init)]), requires_grad=True,
                              name="align.log_tau")
        self.params[self.log_tau.name] = self.log_tau

    def project_scene(self, f: Tensor) -> Tensor:
        w1, b1, w2, b2 = self._head_v
        return (gelu(f.reshape(1, -1) @ w1 + b1) @ w2 + b2).reshape(-1)

    def project_text(self, f: Tensor) -> Tensor:
        w1, b1, w2, b2 = self._head_t
        return (gelu(f.reshape(1, -1) @ w1 + b1) @ w2 + b2).reshape(-1)

    def tau_tensor(self) -> Tensor:
        return clip(self.log_tau.exp(), TAU_MIN, TAU_MAX)

    @property
    def tau(self) -> float:
        return float(np.clip(np.exp(self.log_tau.data[0]), TAU_MIN, TAU_MAX))


def project_and_normalize(f_scene: Tensor, f_text: Tensor,
                          heads: ProjectionHeads) -> AlignedPair:
    return AlignedPair(
        scene_unit=l2_normalize(heads.project_scene(f_scene)),
        text_unit=l2_normalize(heads.project_text(f_text)),
    )


def similarity(a, b) -> float:
    """Cosine of two unit vectors, which reduces to their dot product."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    return float(av @ bv)


def info_nce(pairs: list[AlignedPair], tau, symmetric: bool = False) -> Tensor:
    """Contrastive loss over in-batch pairs, scene-to-text direction.

    Row i of the similarity matrix is scored by cross-entropy against
    target i and the rows are averaged. ``symmetric=True`` adds the
    text-to-scene direction and halves the sum. ``tau`` may be a float or
    a differentiable scalar tensor; any positive value is accepted.
    """
    if not pairs:
        raise ValueError("info_nce requires at least one pair")
    scene = stack_rows([p.scene_unit for p in pairs])
    text = stack_rows([p.text_unit for p in pairs])
    sims = scene @ text.T
    logits = sims / tau
    n = len(pairs)
    targets = np.arange(n)
    loss = -gather_rows(log_softmax(logits, axis=1), targets).mean()
    if symmetric:
        loss_t = -gather_rows(log_softmax(logits.T, axis=1), targets).mean()
        loss = (loss + loss_t) * 0.5
    return loss
