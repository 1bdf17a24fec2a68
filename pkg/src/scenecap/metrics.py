"""Caption quality metrics, 3D box IoU, localization gating, hallucination.

Text metrics: corpus-level consensus scoring (TF-IDF n-gram cosine, scaled
by 10), 4-gram precision with brevity penalty, longest-common-subsequence
F-measure, and a stem-level unigram-alignment score reported as "M (lite)"
because it omits synonym lookup. All of them share one normalizer
(lowercase, punctuation split, light suffix stemmer) so scores stay
mutually consistent. Localization-aware scores gate each item's metric on
axis-aligned box overlap; oracle-box mode substitutes the ground-truth box
so the gate always passes.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .textnorm import STOP_WORDS, content_words, stem, tokenize

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
CIDER_MAX_N = 4
CIDER_SCALE = 10.0

METRIC_KEYS = ("C", "B4", "M", "R")


@dataclass
class CorpusItem:
    candidate: str
    references: list[str]
    pred_box: np.ndarray | None = None
    gt_box: np.ndarray | None = None
    scene_vocab: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.references:
            raise ValueError("corpus items need at least one reference caption")
        if self.pred_box is not None:
            self.pred_box = np.asarray(self.pred_box, dtype=np.float64).reshape(6)
        if self.gt_box is not None:
            self.gt_box = np.asarray(self.gt_box, dtype=np.float64).reshape(6)


def load_corpus_jsonl(path) -> list[CorpusItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                items.append(CorpusItem(
                    candidate=rec["candidate"],
                    references=list(rec["references"]),
                    pred_box=rec.get("pred_box"),
                    gt_box=rec.get("gt_box"),
                    scene_vocab=set(rec.get("scene_vocab", [])),
                ))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"corpus line {lineno}: {exc}") from exc
    if not items:
        raise FormatError(f"corpus file '{path}' contains no items")
    return items


# ----------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------
def aabb_iou(a, b) -> float:
    """Intersection-over-union of axis-aligned boxes given as (center, size)."""
    a = np.asarray(a, dtype=np.float64).reshape(6)
    b = np.asarray(b, dtype=np.float64).reshape(6)
    if np.any(a[3:] <= 0) or np.any(b[3:] <= 0):
        raise ValueError("box sizes must be strictly positive")
    lo = np.maximum(a[:3] - a[3:] / 2, b[:3] - b[3:] / 2)
    hi = np.minimum(a[:3] + a[3:] / 2, b[:3] + b[3:] / 2)
    inter = float(np.prod(np.maximum(0.0, hi - lo)))
    union = float(np.prod(a[3:]) + np.prod(b[3:])) - inter
    return inter / union


# ----------------------------------------------------------------------
# n-gram precision score
# ----------------------------------------------------------------------
def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, references: list[str]) -> float:
    """Geometric mean of clipped 1..4-gram precisions with brevity penalty.

    Zero or undefined precisions are replaced by a tiny epsilon so short
    candidates score near zero instead of blowing up the geometric mean.
    """
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand:
        warnings.warn("scoring an empty candidate caption", stacklevel=2)
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        counts = _ngram_counts(cand, n)
        total = sum(counts.values())
        if total == 0:
            p = BLEU_EPS
        else:
            clipped = 0
            for gram, c in counts.items():
                best = max(_ngram_counts(r, n).get(gram, 0) for r in refs)
                clipped += min(c, best)
            p = clipped / total if clipped > 0 else BLEU_EPS
        log_sum += 0.25 * math.log(p)
    c_len = len(cand)
    r_len = min((len(r) for r in refs), key=lambda rl: (abs(rl - c_len), rl))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum)


# ----------------------------------------------------------------------
# longest-common-subsequence score
# ----------------------------------------------------------------------
def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: list[str]) -> float:
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    best = 0.0
    b2 = ROUGE_BETA * ROUGE_BETA
    for ref in (tokenize(r) for r in references):
        if not ref:
            continue
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        best = max(best, (1 + b2) * r * p / (r + b2 * p))
    return best


# ----------------------------------------------------------------------
# stem-level alignment score ("M (lite)": no synonym lookup)
# ----------------------------------------------------------------------
def _align_unigrams(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Leftmost exact matches first, then stem matches on the leftovers."""
    matches: list[tuple[int, int]] = []
    used_ref: set[int] = set()
    for ci, ct in enumerate(cand):
        for ri, rt in enumerate(ref):
            if ri not in used_ref and rt == ct:
                matches.append((ci, ri))
                used_ref.add(ri)
                break
    matched_c = {ci for ci, _ in matches}
    for ci, ct in enumerate(cand):
        if ci in matched_c:
            continue
        cs = stem(ct)
        for ri, rt in enumerate(ref):
            if ri not in used_ref and stem(rt) == cs:
                matches.append((ci, ri))
                used_ref.add(ri)
                break
    matches.sort()
    return matches


def meteor_lite(candidate: str, references: list[str]) -> float:
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in (tokenize(r) for r in references):
        if not ref:
            continue
        matches = _align_unigrams(cand, ref)
        m = len(matches)
        if m == 0:
            continue
        chunks = 0
        prev = None
        for ci, ri in matches:
            if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
                chunks += 1
            prev = (ci, ri)
        p = m / len(cand)
        r = m / len(ref)
        f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
        penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
        best = max(best, f_mean * (1.0 - penalty))
    return best


# ----------------------------------------------------------------------
# consensus TF-IDF score
# ----------------------------------------------------------------------
def _stemmed(text: str) -> list[str]:
    return [stem(t) for t in tokenize(text)]


class IdfTable:
    """Inverse document frequencies with the df-floor default for unseen grams.

    An n-gram absent from every reference set has document frequency 0,
    floored to 1, so its weight is log(corpus size): it never matches a
    reference but still inflates a candidate's norm.
    """

    def __init__(self, values: dict, n_docs: int):
        self.values = values
        self.n_docs = n_docs
        self.default = math.log(n_docs) if n_docs else 0.0

    def get(self, gram) -> float:
        return self.values.get(gram, self.default)


def compute_idf(items: list[CorpusItem]) -> IdfTable:
    """log(corpus size / document frequency) over reference n-gram sets."""
    df: Counter = Counter()
    for item in items:
        seen = set()
        for ref in item.references:
            toks = _stemmed(ref)
            for n in range(1, CIDER_MAX_N + 1):
                seen.update(_ngram_counts(toks, n).keys())
        df.update(seen)
    n_docs = len(items)
    return IdfTable({g: math.log(n_docs / max(1.0, c)) for g, c in df.items()},
                    n_docs)


def save_idf(path, idf: IdfTable) -> None:
    doc = {"n_docs": idf.n_docs,
           "idf": {" ".join(g): v for g, v in idf.values.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_idf(path) -> IdfTable:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return IdfTable({tuple(k.split(" ")): v for k, v in doc["idf"].items()},
                    int(doc["n_docs"]))


def _tfidf_vector(tokens: list[str], n: int, idf: IdfTable) -> tuple[dict, float]:
    vec = {g: c * idf.get(g) for g, c in _ngram_counts(tokens, n).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(items: list[CorpusItem], idf: IdfTable | None = None) -> tuple[float, list[float]]:
    """Mean and per-item consensus scores over stemmed 1..4-grams.

    Document frequency is measured over this corpus's reference sets
    unless a precomputed table is supplied. A single-item corpus scores
    zero by construction: every n-gram's frequency equals the corpus size.
    """
    if not items:
        raise ValueError("cider needs at least one corpus item")
    if idf is None:
        idf = compute_idf(items)
    scores = []
    for item in items:
        cand_toks = _stemmed(item.candidate)
        per_n = []
        for n in range(1, CIDER_MAX_N + 1):
            cvec, cnorm = _tfidf_vector(cand_toks, n, idf)
            sims = []
            for ref in item.references:
                rvec, rnorm = _tfidf_vector(_stemmed(ref), n, idf)
                if cnorm == 0.0 or rnorm == 0.0:
                    sims.append(0.0)
                    continue
                dot = sum(v * rvec.get(g, 0.0) for g, v in cvec.items())
                sims.append(dot / (cnorm * rnorm))
            per_n.append(sum(sims) / len(sims))
        scores.append(CIDER_SCALE * sum(per_n) / CIDER_MAX_N)
    return sum(scores) / len(scores), scores


# ----------------------------------------------------------------------
# localization-aware protocol and hallucination
# ----------------------------------------------------------------------
def per_item_scores(items: list[CorpusItem], metric: str,
                    idf: IdfTable | None = None) -> list[float]:
    if metric == "C":
        return cider(items, idf=idf)[1]
    fn = {"B4": bleu4, "M": meteor_lite, "R": rouge_l}.get(metric)
    if fn is None:
        raise ValueError(f"unknown metric '{metric}'; expected one of {METRIC_KEYS}")
    return [fn(item.candidate, item.references) for item in items]


def m_at_k_iou(items: list[CorpusItem], metric: str, k: float,
               oracle_boxes: bool = False, idf: IdfTable | None = None) -> float:
    """Mean per-item metric gated by box overlap at threshold ``k``.

    Oracle-box mode scores against the ground-truth box itself, so the
    gate is satisfied everywhere and the result equals the ungated mean.
    """
    scores = per_item_scores(items, metric, idf=idf)
    total = 0.0
    for item, score in zip(items, scores):
        if oracle_boxes:
            gate = 1.0
        else:
            if item.pred_box is None or item.gt_box is None:
                raise ValueError(
                    "items need pred_box and gt_box outside oracle-box mode")
            gate = 1.0 if aabb_iou(item.pred_box, item.gt_box) >= k else 0.0
        total += score * gate
    return total / len(items)


def is_hallucinating(caption: str, scene_vocab: set[str]) -> bool:
    """True when any stemmed content word lacks support in the scene vocabulary."""
    allowed = {stem(w.lower()) for w in scene_vocab}
    return any(t not in allowed for t in content_words(tokenize(caption), stemmed=True))


def hallucination_rate(items: list[CorpusItem],
                       captions: list[str] | None = None) -> float:
    """Fraction of captions mentioning content absent from scene evidence.

    The verifier is deterministic and identical for every caption source;
    ``captions`` defaults to each item's candidate.
    """
    if captions is None:
        captions = [item.candidate for item in items]
    if len(captions) != len(items):
        raise ValueError("one caption per corpus item is required")
    flagged = 0
    for item, caption in zip(items, captions):
        if not item.scene_vocab:
            raise ValueError("hallucination check needs scene_vocab on every item")
        flagged += is_hallucinating(caption, item.scene_vocab)
    return flagged / len(items)


def evaluate_corpus(items: list[CorpusItem], thresholds=(0.25, 0.5),
                    oracle_boxes: bool = False, idf: IdfTable | None = None) -> dict:
    """Full metric report: every metric at every threshold plus hallucination."""
    if idf is None:
        idf = compute_idf(items)
    metrics = {}
    for k in thresholds:
        for key in METRIC_KEYS:
            metrics[f"{key}@{_fmt_k(k)}"] = m_at_k_iou(
                items, key, k, oracle_boxes=oracle_boxes, idf=idf)
    report = {"metrics": metrics, "items": []}
    have_vocab = all(item.scene_vocab for item in items)
    report["hallucination_rate"] = hallucination_rate(items) if have_vocab else None
    item_scores = {key: per_item_scores(items, key, idf=idf) for key in METRIC_KEYS}
    for i, item in enumerate(items):
        rec = {"candidate": item.candidate}
        for key in METRIC_KEYS:
            rec[key] = item_scores[key][i]
        if item.pred_box is not None and item.gt_box is not None:
            rec["iou"] = aabb_iou(item.pred_box, item.gt_box)
        report["items"].append(rec)
    return report


def _fmt_k(k: float) -> str:
    return f"{k:g}"


def report_table(report: dict, thresholds=(0.25, 0.5)) -> str:
    """Text mirror of the metric report, one row per IoU threshold."""
    lines = ["IoU\tC\tB-4\tM (lite)\tR"]
    for k in thresholds:
        kk = _fmt_k(k)
        m = report["metrics"]
        lines.append(f"{kk}\t{m['C@' + kk]:.4f}\t{m['B4@' + kk]:.4f}"
                     f"\t{m['M@' + kk]:.4f}\t{m['R@' + kk]:.4f}")
    if report.get("hallucination_rate") is not None:
        lines.append(f"hallucination_rate\t{report['hallucination_rate']:.4f}")
    return "\n".join(lines)
