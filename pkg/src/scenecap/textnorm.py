"""Shared text normalization: tokenizer, light stemmer, stop words.

Every text consumer in the package (vocabulary construction, caption
metrics, the hallucination verifier, the mock judge) goes through these
functions so that scores stay mutually consistent.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

# Words the suffix stripper must leave alone.
_STEM_EXCEPTIONS = frozenset({
    "is", "was", "has", "its", "this", "as", "us", "does", "goes", "yes",
    "his", "hers", "ours", "during", "ring", "king", "thing", "nothing",
    "something", "anything", "everything", "being", "ceiling",
})

# Function and relation words that never count as scene content.
STOP_WORDS = frozenset({
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "being",
    "of", "in", "on", "at", "to", "with", "and", "or", "for", "by",
    "this", "that", "these", "those", "it", "its", "there", "here",
    "has", "have", "had", "as", "from", "into", "onto", "over", "under",
    "above", "below", "between", "behind", "beside", "against", "near", "next",
    "front", "back", "left", "right", "side", "middle", "center",
    "one", "two", "three", "some", "any", "all", "very", "also",
    ".", ",", ";", ":", "!", "?", "'", '"', "-",
})


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word tokens; punctuation marks stand alone."""
    return _TOKEN_RE.findall(text.lower())


def stem(token: str) -> str:
    """Strip a single 's'/'es'/'ing' suffix, with a small exception list."""
    if token in _STEM_EXCEPTIONS:
        return token
    if token.endswith("ing") and len(token) > 5:
        return token[:-3]
    if token.endswith("es") and len(token) > 4 and \
            token.endswith(("ches", "shes", "sses", "xes", "zes", "oes")):
        return token[:-2]
    if token.endswith("s") and not token.endswith("ss") and len(token) > 3:
        return token[:-1]
    return token


def content_words(tokens: list[str], stemmed: bool = False) -> list[str]:
    """Tokens with stop words removed, optionally stemmed."""
    kept = [t for t in tokens if t not in STOP_WORDS]
    return [stem(t) for t in kept] if stemmed else kept


def normalize_caption(text: str) -> str:
    """Whitespace-normalized rendering: tokens joined by single spaces."""
    return " ".join(tokenize(text))
