"""Deterministic synthetic corpora in text8 format (a-z plus space).

The generator produces lowercase word streams with three layers of learnable
structure: pronounceable within-word letter statistics, a Zipf-Mandelbrot
frequency law, and slowly drifting topics so that mid-range context carries
signal. It is a stand-in for character-level benchmark data in offline
environments; everything is a pure function of the seed.
"""

from __future__ import annotations

import numpy as np

VOWELS = "aeiou"
CONSONANTS = "bcdfghjklmnpqrstvwxyz"


def _make_word(rng: np.random.Generator) -> str:
    n_syllables = int(rng.integers(1, 4))
    parts = []
    for _ in range(n_syllables):
        onset = CONSONANTS[rng.integers(len(CONSONANTS))]
        nucleus = VOWELS[rng.integers(len(VOWELS))]
        parts.append(onset + nucleus)
        if rng.random() < 0.35:
            parts.append(CONSONANTS[rng.integers(len(CONSONANTS))])
    return "".join(parts)


def _word_inventory(rng: np.random.Generator, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        w = _make_word(rng)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_corpus(n_chars: int, seed: int = 0, n_words: int = 2000,
                n_topics: int = 8, topic_span: int = 400) -> str:
    """Generate roughly n_chars characters of topic-structured word salad.

    Words follow a Zipf-Mandelbrot law; at any point 70% of draws come from
    the current topic's sub-vocabulary, which rotates every `topic_span`
    words. Output alphabet is exactly {a..z, space}.
    """
    rng = np.random.default_rng(seed)
    words = _word_inventory(rng, n_words)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    zipf = 1.0 / (ranks + 2.7) ** 1.05
    zipf /= zipf.sum()
    topic_of = rng.integers(0, n_topics, n_words)
    topic_probs = []
    for t in range(n_topics):
        p = np.where(topic_of == t, zipf * 0.7 / max(zipf[topic_of == t].sum(), 1e-12),
                     zipf * 0.3 / max(zipf[topic_of != t].sum(), 1e-12))
        topic_probs.append(p / p.sum())

    chunks: list[str] = []
    total = 0
    topic = int(rng.integers(n_topics))
    since_switch = 0
    while total < n_chars:
        if since_switch >= topic_span:
            topic = int(rng.integers(n_topics))
            since_switch = 0
        idx = rng.choice(n_words, size=64, p=topic_probs[topic])
        for i in idx:
            w = words[int(i)]
            chunks.append(w)
            total += len(w) + 1
        since_switch += 64
    return " ".join(chunks)[:n_chars].rstrip()


def repeating_pattern(n_chars: int = 100, period: int = 25) -> str:
    """Cyclic alphabet pattern, e.g. abcde...y repeated; every character
    determines its successor, so it is exactly learnable from one step of
    context."""
    base = "abcdefghijklmnopqrstuvwxyz"[:period]
    reps = n_chars // period + 1
    return (base * reps)[:n_chars]
