"""Autoregressive caption decoder with cross-attention into scene tokens.

Each layer applies causal self-attention over the generated prefix, then
cross-attention whose keys and values come from the scene token grid, then
a feed-forward block, all pre-norm with residuals. Decoding strategies:
greedy argmax, beam search, and seeded temperature/top-k sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather_rows, log_softmax, no_grad
from .scene_encoder import SceneEmbedding
from .text_encoder import BOS, EOS, PAD, CaptionSequence, Vocabulary
from .transformer import (AttentionParams, FeedForwardParams, LayerNormParams,
                          init_weight, scaled_dot_attention, sinusoidal_positions)

cross_attention = scaled_dot_attention  # bare attention equation, re-exported


@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_k: int = 16
    max_len: int = 24

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_k:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_k "
                f"({self.n_heads}*{self.d_k})")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for start and stop tokens")


@dataclass
class DecodeParams:
    strategy: str = "greedy"  # greedy | beam | stochastic
    temperature: float = 1.0
    top_k: int = 20
    seed: int | tuple | None = 0
    beam_width: int = 4
    nucleus_p: float | None = None  # replaces top_k filtering when set

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "stochastic"):
            raise ValueError(f"unknown decode strategy '{self.strategy}'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1 or self.beam_width < 1:
            raise ValueError("top_k and beam width must be at least 1")


class _DecoderLayer:
    def __init__(self, rng, d_model: int, prefix: str, params: dict[str, Tensor]):
        self.ln1 = LayerNormParams(d_model, f"{prefix}.ln1", True, params)
        self.self_attn = AttentionParams(rng, d_model, f"{prefix}.self", True, params)
        self.ln2 = LayerNormParams(d_model, f"{prefix}.ln2", True, params)
        self.cross_attn = AttentionParams(rng, d_model, f"{prefix}.cross", True, params)
        self.ln3 = LayerNormParams(d_model, f"{prefix}.ln3", True, params)
        self.ffn = FeedForwardParams(rng, d_model, f"{prefix}.ffn", True, params)

    def __call__(self, x: Tensor, memory: Tensor, n_heads: int) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, n_heads, causal=True)
        x = x + self.cross_attn(self.ln2(x), memory, n_heads)
        x = x + self.ffn(self.ln3(x))
        return x


class CaptionDecoder:
    def __init__(self, config: DecoderConfig, vocab_size: int,
                 init_rng: np.random.Generator):
        self.config = config
        self.vocab_size = vocab_size
        self.params: dict[str, Tensor] = {}
        self.embed = init_weight(init_rng, (vocab_size, config.d_model),
                                 "dec.embed", trainable=True)
        self.params[self.embed.name] = self.embed
        self.layers = [
            _DecoderLayer(init_rng, config.d_model, f"dec.layer{i}", self.params)
            for i in range(config.n_layers)
        ]
        self.final_ln = LayerNormParams(config.d_model, "dec.final_ln", True, self.params)
        self.out_proj = init_weight(init_rng, (config.d_model, vocab_size),
                                    "dec.out_proj", trainable=True)
        self.params[self.out_proj.name] = self.out_proj

    def forward(self, prefix_ids, scene: SceneEmbedding) -> Tensor:
        """Next-token logits for every prefix position, shape (T, vocab)."""
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if len(ids) >= self.config.max_len + 1:
            raise ValueError(
                f"prefix of length {len(ids)} exceeds max_len {self.config.max_len}")
        from .autodiff import take_rows

        h = take_rows(self.embed, ids)
        h = h + Tensor(sinusoidal_positions(len(ids), self.config.d_model))
        for layer in self.layers:
            h = layer(h, scene.token_grid, self.config.n_heads)
        return self.final_ln(h) @ self.out_proj

    def loss(self, logits: Tensor, target_ids, reduction: str = "mean") -> Tensor:
        """Cross-entropy against targets, ignoring padding positions."""
        targets = np.asarray(target_ids, dtype=np.int64)
        if len(targets) > logits.shape[0]:
            raise ValueError(
                f"{len(targets)} targets for {logits.shape[0]} logit rows")
        mask = (targets != PAD).astype(np.float64)
        supervised = mask.sum()
        if supervised == 0:
            raise ValueError("caption loss needs at least one non-pad target")
        picked = gather_rows(log_softmax(logits[:len(targets)], axis=-1), targets)
        total = -(picked * Tensor(mask)).sum()
        if reduction == "sum":
            return total
        if reduction == "mean":
            return total / supervised
        raise ValueError(f"unknown loss reduction '{reduction}'")

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------
    def decode(self, scene: SceneEmbedding, dp: DecodeParams,
               vocab: Vocabulary) -> CaptionSequence:
        return self.decode_scored(scene, dp, vocab)[0]

    def decode_scored(self, scene: SceneEmbedding, dp: DecodeParams,
                      vocab: Vocabulary) -> tuple[CaptionSequence, list[float]]:
        """Decode plus the log-probability of each emitted token."""
        with no_grad():
            if dp.strategy == "beam":
                ids, logprobs = self._beam(scene, dp)
            else:
                ids, logprobs = self._step_decode(scene, dp)
        text = vocab.decode(ids)
        return CaptionSequence(ids=ids, text=text), logprobs

    def _next_logits(self, ids: list[int], scene: SceneEmbedding) -> np.ndarray:
        return self.forward(ids, scene).data[-1]

    def _step_decode(self, scene: SceneEmbedding, dp: DecodeParams):
        rng = np.random.default_rng(dp.seed) if dp.strategy == "stochastic" else None
        ids = [BOS]
        out: list[int] = []
        logprobs: list[float] = []
        for _ in range(self.config.max_len - 1):
            logits = self._next_logits(ids, scene)
            if dp.strategy == "greedy":
                nxt = int(np.argmax(logits))
            else:
                nxt = _sample(logits, dp, rng)
            logprobs.append(_token_logprob(logits, nxt))
            if nxt == EOS:
                break
            ids.append(nxt)
            out.append(nxt)
        return out, logprobs

    def _beam(self, scene: SceneEmbedding, dp: DecodeParams):
        # A beam is (prefix ids incl. BOS, per-token logprobs, total logprob, done).
        beams = [([BOS], [], 0.0, False)]
        width = dp.beam_width
        for _ in range(self.config.max_len - 1):
            if all(done for *_, done in beams):
                break
            grown = []
            for b_idx, (ids, lps, total, done) in enumerate(beams):
                if done:
                    grown.append((total, b_idx, -1, (ids, lps, total, True)))
                    continue
                logits = self._next_logits(ids, scene)
                lp = logits - _logsumexp(logits)
                for tok in np.argsort(-lp, kind="stable")[:width]:
                    tok = int(tok)
                    cand = (ids if tok == EOS else ids + [tok],
                            lps + [float(lp[tok])], total + lp[tok], tok == EOS)
                    grown.append((total + lp[tok], b_idx, tok, cand))
            grown.sort(key=lambda g: (-g[0], g[1], g[2]))
            beams = [cand for _, _, _, cand in grown[:width]]
        finished = [b for b in beams if b[3]] or beams
        ids, lps, _total, _done = max(finished, key=lambda b: b[2])
        return ids[1:], lps

    def generation_seed(self, base_seed: int, index: int) -> tuple[int, int]:
        """Stable per-candidate RNG key, independent of scheduling order."""
        return (base_seed, index)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


def _token_logprob(logits: np.ndarray, token: int) -> float:
    return float(logits[token] - _logsumexp(logits))


def _sample(logits: np.ndarray, dp: DecodeParams, rng: np.random.Generator) -> int:
    """Temperature + top-k (or nucleus) sampling over next-token logits."""
    scaled = logits / dp.temperature
    order = np.argsort(-scaled, kind="stable")
    if dp.nucleus_p is not None:
        probs = np.exp(scaled[order] - _logsumexp(scaled[order]))
        keep = int(np.searchsorted(np.cumsum(probs), dp.nucleus_p) + 1)
        kept = order[:max(1, keep)]
    else:
        kept = order[:dp.top_k]
    if len(kept) == 1:
        return int(kept[0])
    z = scaled[kept] - _logsumexp(scaled[kept])
    return int(rng.choice(kept, p=np.exp(z)))
