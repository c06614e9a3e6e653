"""Corpus ingestion, character vocabulary, batching, metrics, and sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .model import InnModel, inn_forward

LN2 = math.log(2.0)


@dataclass
class Vocab:
    """Bijective char <-> id mapping, symbols sorted by codepoint."""

    symbols: list[str]
    lookup: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.fromiter((self.lookup[c] for c in text), dtype=np.int64,
                               count=len(text))
        except KeyError as e:
            raise InputError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in np.asarray(ids).reshape(-1))


@dataclass
class CorpusSplit:
    """Contiguous train/valid/test id streams; no overlap, original order."""

    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray
    fractions: tuple[float, float, float]
    vocab: Vocab


@dataclass
class Batch:
    inputs: np.ndarray   # (b, l) int ids
    targets: np.ndarray  # (b, l) int ids, inputs shifted left by one


def build_vocab(text: str) -> Vocab:
    if not text:
        raise InputError("cannot build a vocabulary from empty text")
    symbols = sorted(set(text))
    return Vocab(symbols=symbols, lookup={c: i for i, c in enumerate(symbols)})


def load_text(path: str) -> str:
    """Read a corpus file; byte-level fallback for non-UTF-8 input."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def split_corpus(text: str, fractions: tuple[float, float, float] = (0.9, 0.05, 0.05),
                 vocab: Vocab | None = None) -> CorpusSplit:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split fractions must sum to 1, got {fractions}")
    vocab = vocab or build_vocab(text)
    ids = vocab.encode(text)
    n = len(ids)
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return CorpusSplit(train_ids=ids[:a], valid_ids=ids[a:b], test_ids=ids[b:],
                       fractions=fractions, vocab=vocab)


def batchify(ids: np.ndarray, b: int, l: int, step: int | None = None) -> list[Batch]:
    """Deterministic contiguous windows packed into (b, l) batches.

    Each window consumes l+1 ids (inputs plus one-shifted targets); windows
    start every `step` ids (default l+1, non-overlapping). Trailing ids that
    do not fill a whole batch of windows are dropped.
    """
    ids = np.asarray(ids)
    step = (l + 1) if step is None else step
    if step < 1:
        raise InputError(f"window step must be >= 1, got {step}")
    if len(ids) < b * (l + 1):
        raise InputError(f"corpus too small: need at least {b * (l + 1)} ids "
                         f"for batch={b}, window={l}; got {len(ids)}")
    starts = list(range(0, len(ids) - l, step))
    n_batches = len(starts) // b
    batches = []
    for i in range(n_batches):
        chunk = starts[i * b:(i + 1) * b]
        inputs = np.stack([ids[s:s + l] for s in chunk])
        targets = np.stack([ids[s + 1:s + l + 1] for s in chunk])
        batches.append(Batch(inputs=inputs, targets=targets))
    return batches


def bpc(mean_nll_nats: float) -> float:
    """Bits per character from mean negative log-likelihood in nats."""
    if mean_nll_nats < 0:
        raise InputError(f"mean NLL must be >= 0, got {mean_nll_nats}")
    return mean_nll_nats / LN2


def nats_from_bpc(value: float) -> float:
    return value * LN2


def perplexity(mean_nll_nats: float) -> float:
    if mean_nll_nats < 0:
        raise InputError(f"mean NLL must be >= 0, got {mean_nll_nats}")
    return math.exp(mean_nll_nats)


def evaluate_nll(model: InnModel, ids: np.ndarray, batch_size: int, window: int,
                 max_batches: int | None = None) -> float:
    """Mean NLL (nats per character) over non-overlapping windows, no context
    carry between windows; slightly pessimistic versus sliding evaluation."""
    batches = batchify(ids, batch_size, window)
    if max_batches is not None:
        batches = batches[:max_batches]
    if not batches:
        raise InputError("no full evaluation batch fits the given ids")
    total, count = 0.0, 0
    for batch in batches:
        logits, _ = inn_forward(batch.inputs, model, training=False)
        nll = T.cross_entropy(logits, batch.targets).item()
        total += nll * batch.targets.size
        count += batch.targets.size
    return total / count


def generate(model: InnModel, vocab: Vocab, seed_text: str, length: int,
             temperature: float, rng_seed: int = 0) -> str:
    """Autoregressive sampling: softmax(logits / T), categorical draw.

    Deterministic for a fixed rng_seed. The full prefix is re-run each step;
    fine at desk scale.
    """
    if temperature <= 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    if not seed_text:
        raise InputError("seed text must be non-empty")
    ids = list(vocab.encode(seed_text))
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(length):
        context = np.asarray([ids], dtype=np.int64)
        logits, _ = inn_forward(context, model, training=False)
        last = logits.data[0, -1, :].astype(np.float64) / temperature
        last -= last.max()
        p = np.exp(last)
        p /= p.sum()
        nxt = int(rng.choice(vocab.size, p=p))
        ids.append(nxt)
        out.append(vocab.symbols[nxt])
    return "".join(out)
