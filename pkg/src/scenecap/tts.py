"""Inference-only best-of-N caption search with judge-guided selection.

One frozen scene encode feeds both a compact text summary (retrieved from
a descriptor bank by cosine in the shared space) and N seeded stochastic
decodes. A judge scores each candidate against the summary; the highest
reward wins, ties to the lower candidate index. Judge failures degrade to
the greedy caption rather than aborting: the search must never be worse
than unavailable. Model parameters are never touched.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .alignment import l2_normalize
from .autodiff import Tensor, no_grad
from .decoder import DecodeParams
from .errors import ConfigError, JudgeProtocolError
from .model import CaptionModel
from .pointcloud import PointCloud
from .text_encoder import CaptionSequence
from .textnorm import STOP_WORDS, tokenize

RUBRIC_ID = "scene-evidence-v1"  # fixed scoring rubric, identical across datasets
DEFAULT_TIMEOUT_MS = 10_000
DEFAULT_RETRIES = 2


@dataclass
class JudgeVerdict:
    index: int
    reward: float | None
    latency_ms: float
    raw: str = ""
    status: str = "ok"      # ok | failed
    error: str | None = None

    def __post_init__(self):
        if self.status == "ok":
            if self.reward is None or not 0.0 <= self.reward <= 1.0:
                raise JudgeProtocolError(
                    f"candidate {self.index}: reward {self.reward!r} outside [0, 1]")


def failure_verdict(index: int, error: str) -> JudgeVerdict:
    return JudgeVerdict(index=index, reward=None, latency_ms=0.0,
                        status="failed", error=error)


# ----------------------------------------------------------------------
# descriptor bank and summary retrieval
# ----------------------------------------------------------------------
class DescriptorBank:
    """Short textual descriptors with precomputed unit embeddings."""

    def __init__(self, descriptors: list[str], embeddings: np.ndarray):
        if len(descriptors) != len(embeddings):
            raise ValueError("one embedding row per descriptor is required")
        self.descriptors = list(descriptors)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if len(norms) and not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("descriptor embeddings must be unit-norm")

    def __len__(self) -> int:
        return len(self.descriptors)

    @classmethod
    def build(cls, descriptors: list[str], model: CaptionModel) -> "DescriptorBank":
        """Embed descriptors through the frozen text path and alignment head."""
        rows = []
        with no_grad():
            for text in descriptors:
                emb = model.text_encoder.encode(model.vocab.encode(text))
                rows.append(l2_normalize(model.heads.project_text(emb)).data)
        return cls(descriptors, np.stack(rows) if rows else np.zeros((0, 0)))

    @classmethod
    def from_file(cls, path, model: CaptionModel) -> "DescriptorBank":
        return cls.build(read_descriptor_file(path), model)


def read_descriptor_file(path) -> list[str]:
    """One descriptor per line; blank lines and '#' comments ignored."""
    lines = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def default_descriptor_path() -> Path:
    return Path(__file__).parent / "data" / "descriptors.txt"


@dataclass
class SceneSummary:
    descriptors: list[str]
    similarities: list[float]
    rendered: str


def retrieve_summary(scene_unit: np.ndarray, bank: DescriptorBank,
                     k_s: int = 5) -> SceneSummary:
    """Top-k_s descriptors by cosine similarity, ties to the lower bank index."""
    if len(bank) == 0:
        raise ConfigError("descriptor bank is empty")
    if k_s < 1:
        raise ValueError("summary size must be at least 1")
    vec = scene_unit.data if isinstance(scene_unit, Tensor) else np.asarray(scene_unit)
    sims = bank.embeddings @ vec
    order = np.argsort(-sims, kind="stable")[:k_s]
    descriptors = [bank.descriptors[i] for i in order]
    return SceneSummary(descriptors=descriptors,
                        similarities=[float(sims[i]) for i in order],
                        rendered=", ".join(descriptors))


# ----------------------------------------------------------------------
# judges
# ----------------------------------------------------------------------
def _summary_words(summary: SceneSummary) -> set[str]:
    words = set()
    for d in summary.descriptors:
        words.update(t for t in tokenize(d) if t not in STOP_WORDS)
    return words


class MockJudge:
    """Deterministic stand-in: reward is candidate/summary word overlap."""

    def score(self, summary: SceneSummary, candidate: str) -> float:
        base = _summary_words(summary)
        cand = {t for t in tokenize(candidate) if t not in STOP_WORDS}
        return len(cand & base) / max(1, len(base))

    def score_batch(self, summary: SceneSummary, candidates: list[str],
                    max_workers: int = 1) -> list[JudgeVerdict]:
        def one(i: int) -> JudgeVerdict:
            t0 = time.perf_counter()
            reward = self.score(summary, candidates[i])
            return JudgeVerdict(index=i, reward=reward,
                                latency_ms=(time.perf_counter() - t0) * 1000.0)

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                return list(pool.map(one, range(len(candidates))))
        return [one(i) for i in range(len(candidates))]


class HttpJudge:
    """Judge backed by a scoring endpoint speaking the JSON wire protocol.

    One batched POST per scene: body {"summary", "candidates", "rubric_id"},
    response {"rewards": [...]} with exactly one in-range reward per
    candidate. Network failures after retries become per-candidate failure
    verdicts; malformed responses raise a protocol error carrying a body
    excerpt.
    """

    def __init__(self, endpoint: str, timeout_ms: int = DEFAULT_TIMEOUT_MS,
                 retries: int = DEFAULT_RETRIES, rubric_id: str = RUBRIC_ID,
                 backoff_s: float = 0.25):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_ms = timeout_ms
        self.retries = retries
        self.rubric_id = rubric_id
        self.backoff_s = backoff_s

    def request_body(self, summary: SceneSummary, candidates: list[str]) -> dict:
        return {"summary": summary.rendered, "candidates": list(candidates),
                "rubric_id": self.rubric_id}

    def score_batch(self, summary: SceneSummary,
                    candidates: list[str]) -> list[JudgeVerdict]:
        body = self.request_body(summary, candidates)
        t0 = time.perf_counter()
        last_error = "no attempt made"
        response = None
        for attempt in range(self.retries + 1):
            try:
                response = requests.post(f"{self.endpoint}/judge", json=body,
                                         timeout=self.timeout_ms / 1000.0)
                break
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        if response is None:
            return [failure_verdict(i, last_error) for i in range(len(candidates))]
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return self._parse(response, candidates, elapsed_ms)

    def _parse(self, response, candidates: list[str],
               elapsed_ms: float) -> list[JudgeVerdict]:
        excerpt = response.text[:200]
        if response.status_code != 200:
            raise JudgeProtocolError(
                f"judge returned HTTP {response.status_code}: {excerpt!r}")
        try:
            doc = response.json()
            rewards = doc["rewards"]
        except (ValueError, KeyError) as exc:
            raise JudgeProtocolError(
                f"malformed judge response ({exc}): {excerpt!r}") from exc
        if not isinstance(rewards, list) or len(rewards) != len(candidates):
            raise JudgeProtocolError(
                f"judge returned {len(rewards) if isinstance(rewards, list) else '?'} "
                f"rewards for {len(candidates)} candidates: {excerpt!r}")
        verdicts = []
        per_cand = elapsed_ms / max(1, len(candidates))
        for i, r in enumerate(rewards):
            if not isinstance(r, (int, float)) or not 0.0 <= float(r) <= 1.0:
                raise JudgeProtocolError(
                    f"candidate {i}: reward {r!r} outside [0, 1]: {excerpt!r}")
            verdicts.append(JudgeVerdict(index=i, reward=float(r),
                                         latency_ms=per_cand, raw=excerpt))
        return verdicts


# ----------------------------------------------------------------------
# selection
# ----------------------------------------------------------------------
def select_best(candidates: list[CaptionSequence],
                verdicts: list[JudgeVerdict]) -> tuple[int, JudgeVerdict]:
    """Argmax over successful rewards, ties broken by lower candidate index."""
    ok = [v for v in verdicts if v.status == "ok"]
    if not ok:
        raise ValueError("no successful verdicts to select from")
    best = max(ok, key=lambda v: (v.reward, -v.index))
    return best.index, best


def _four_gram_overlap(a: list[int], b: list[int]) -> float:
    ga = {tuple(a[i:i + 4]) for i in range(len(a) - 3)}
    gb = {tuple(b[i:i + 4]) for i in range(len(b) - 3)}
    return len(ga & gb) / max(1, len(ga | gb))


def top_k_vote(candidates: list[CaptionSequence], verdicts: list[JudgeVerdict],
               k: int) -> CaptionSequence:
    """Consensus among the k best-rewarded candidates.

    The winner has the highest mean token-level 4-gram overlap with the
    other kept candidates; ties break by higher reward, then lower index.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ok = sorted((v for v in verdicts if v.status == "ok"),
                key=lambda v: (-v.reward, v.index))
    if not ok:
        raise ValueError("no successful verdicts to vote over")
    kept = ok[:k]
    if len(kept) == 1:
        return candidates[kept[0].index]
    scored = []
    for v in kept:
        others = [candidates[o.index].ids for o in kept if o.index != v.index]
        mean_overlap = sum(_four_gram_overlap(candidates[v.index].ids, o)
                           for o in others) / len(others)
        scored.append((-mean_overlap, -v.reward, v.index))
    scored.sort()
    return candidates[scored[0][2]]


# ----------------------------------------------------------------------
# the search itself
# ----------------------------------------------------------------------
@dataclass
class CandidateResult:
    text: str
    reward: float | None
    latency_ms: float
    status: str


@dataclass
class SearchResult:
    selected: CaptionSequence
    candidates: list[CandidateResult]
    timing: dict
    overhead_ratio: float | None = None
    fallback: bool = False
    summary: SceneSummary | None = None
    selected_index: int | None = None
    error: str | None = None

    def to_json(self) -> dict:
        doc = {
            "selected": self.selected.text,
            "candidates": [
                {"text": c.text, "reward": c.reward,
                 "latency_ms": round(c.latency_ms, 3), "status": c.status}
                for c in self.candidates
            ],
            "timing": {key: round(val, 3) for key, val in self.timing.items()},
            "overhead_ratio": (round(self.overhead_ratio, 2)
                               if self.overhead_ratio is not None else None),
            "fallback": self.fallback,
        }
        if self.summary is not None:
            doc["summary"] = self.summary.rendered
        if self.error is not None:
            doc["error"] = self.error
        return doc


def run_tts(cloud: PointCloud, model: CaptionModel, bank: DescriptorBank,
            judge, n: int = 8, k_s: int = 5, seed: int = 0,
            temperature: float = 1.0, top_k: int = 20, max_workers: int = 1,
            baseline_total_ms: float | None = None,
            fps_seed: int | None = None) -> SearchResult:
    """Best-of-N search over stochastic decodes, judged against a scene summary.

    Candidate i decodes with RNG key (seed, i), so results are independent
    of scheduling order. The model is read-only throughout.
    """
    if n < 1:
        raise ValueError("candidate count must be at least 1")
    t_start = time.perf_counter()

    with no_grad():
        scene = model.scene_encoder.encode_scene(cloud, fps_seed=fps_seed)
        scene_unit = l2_normalize(model.heads.project_scene(scene.vector))
        summary = retrieve_summary(scene_unit.data, bank, k_s)
    encode_ms = (time.perf_counter() - t_start) * 1000.0

    t_decode = time.perf_counter()

    def decode_candidate(i: int) -> CaptionSequence:
        dp = DecodeParams(strategy="stochastic", temperature=temperature,
                          top_k=top_k, seed=model.decoder.generation_seed(seed, i))
        return model.decoder.decode(scene, dp, model.vocab)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            candidates = list(pool.map(decode_candidate, range(n)))
    else:
        candidates = [decode_candidate(i) for i in range(n)]

    protocol_error: str | None = None
    try:
        if isinstance(judge, MockJudge):
            verdicts = judge.score_batch(summary, [c.text for c in candidates],
                                         max_workers=max_workers)
        else:
            verdicts = judge.score_batch(summary, [c.text for c in candidates])
    except JudgeProtocolError as exc:
        protocol_error = str(exc)
        verdicts = [failure_verdict(i, protocol_error) for i in range(n)]
    decode_judge_ms = (time.perf_counter() - t_decode) * 1000.0

    fallback = False
    try:
        selected_index, _ = select_best(candidates, verdicts)
        selected = candidates[selected_index]
    except ValueError:
        # Every candidate failed judging: degrade to the greedy caption.
        fallback = True
        selected_index = None
        with no_grad():
            selected = model.decoder.decode(scene, DecodeParams(strategy="greedy"),
                                            model.vocab)

    total_ms = (time.perf_counter() - t_start) * 1000.0
    return SearchResult(
        selected=selected,
        candidates=[CandidateResult(text=c.text, reward=v.reward,
                                    latency_ms=v.latency_ms, status=v.status)
                    for c, v in zip(candidates, verdicts)],
        timing={"encode_ms": encode_ms, "decode_judge_ms": decode_judge_ms,
                "total_ms": total_ms},
        overhead_ratio=(total_ms / baseline_total_ms
                        if baseline_total_ms else None),
        fallback=fallback,
        summary=summary,
        selected_index=selected_index,
        error=protocol_error,
    )


def overhead_ratio(total_ms: float, baseline_ms: float) -> float:
    """Report-ready latency overhead, rounded to two decimals."""
    return round(total_ms / baseline_ms, 2)
