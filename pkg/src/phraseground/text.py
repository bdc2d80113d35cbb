"""Phrase tokenization, deterministic embeddings, and category clustering.

The embedder stands in for a pretrained sentence encoder: every token maps
to a fixed gaussian vector derived from a hash of its spelling, and a phrase
embeds as the mean of its token vectors. Phrases sharing tokens therefore
land close together, which is all the downstream category clustering needs.
"""

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Phrase:
    tokens: tuple
    raw: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("phrase has no tokens")


def tokenize(raw):
    """Lowercase, split on whitespace/punctuation, drop empty pieces."""
    if raw is None or not raw.strip():
        raise ValueError("cannot tokenize empty text")
    tokens = tuple(_TOKEN_RE.findall(raw.lower()))
    if not tokens:
        raise ValueError(f"no tokens left after stripping punctuation: {raw!r}")
    return Phrase(tokens, raw)


def _token_seed(token, salt):
    digest = hashlib.blake2b(f"{salt}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class HashedEmbedder:
    """Deterministic token vectors: blake2 hash -> seeded standard gaussian."""

    def __init__(self, dim=64, salt="phraseground"):
        self.dim = dim
        self.salt = salt
        self._cache = {}

    def token_vector(self, token):
        v = self._cache.get(token)
        if v is None:
            rng = np.random.default_rng(_token_seed(token, self.salt))
            v = rng.standard_normal(self.dim)
            self._cache[token] = v
        return v

    def sequence(self, phrase):
        """Per-token vectors, shape (len(tokens), dim); LSTM encoder input."""
        return np.stack([self.token_vector(t) for t in phrase.tokens])

    def embed(self, phrase):
        """Mean of token vectors (order-insensitive by construction)."""
        return self.sequence(phrase).mean(axis=0)


def embed_phrase(phrase, embedder):
    return embedder.embed(phrase)


class QueryEmbedder:
    """Pairs a phrase-level embedder (for clustering) with a token-level one
    (for LSTM input sequences); both deterministic."""

    def __init__(self, phrase_dim=64, token_dim=32):
        self.phrase_dim = phrase_dim
        self.token_dim = token_dim
        self._phrase = HashedEmbedder(dim=phrase_dim, salt="phrase")
        self._tokens = HashedEmbedder(dim=token_dim, salt="token")

    def embed(self, phrase):
        return self._phrase.embed(phrase)

    def sequence(self, phrase):
        return self._tokens.sequence(phrase)


# ---------------------------------------------------------------------------
# phrase categories (k-means over phrase embeddings)

@dataclass
class CategoryModel:
    centers: np.ndarray  # (n_categories, dim)

    @property
    def n(self):
        return self.centers.shape[0]

    def to_json_dict(self):
        return {"centers": self.centers.tolist()}

    @classmethod
    def from_json_dict(cls, d):
        return cls(np.array(d["centers"], dtype=np.float64))


def fit_categories(embeddings, n_categories, seed=0, max_iter=100, tol=1e-6, n_init=8):
    """Cluster phrase embeddings with k-means (k-means++ seeding).

    Runs n_init deterministic restarts derived from the seed and keeps the
    lowest-cost solution. A cluster that empties is reseeded with the point
    currently farthest from its assigned center. Raises when fewer than
    n_categories distinct embeddings are supplied.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a (n, dim) array")
    if len(np.unique(x, axis=0)) < n_categories:
        raise ValueError(f"need at least {n_categories} distinct embeddings")

    best_centers, best_cost = None, np.inf
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centers = _lloyd(x, _kmeanspp_init(x, n_categories, rng), max_iter, tol)
        cost = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).min(axis=1).sum()
        if cost < best_cost - 1e-12:
            best_centers, best_cost = centers, cost
    return CategoryModel(best_centers)


def _lloyd(x, centers, max_iter, tol):
    k = len(centers)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                worst = int(d2[np.arange(len(x)), assign].argmax())
                new_centers[j] = x[worst]
            else:
                new_centers[j] = members.mean(axis=0)
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    return centers


def _kmeanspp_init(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def assign_category(embedding, model):
    """Category with the largest dot product; ties go to the lowest index."""
    ep = np.asarray(embedding, dtype=np.float64)
    if ep.shape[0] != model.centers.shape[1]:
        raise ValueError("embedding dim does not match category centers")
    return int(np.argmax(model.centers @ ep))


def within_cluster_cost(embeddings, model):
    x = np.asarray(embeddings, dtype=np.float64)
    d2 = ((x[:, None, :] - model.centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


# ---------------------------------------------------------------------------
# nouns and word vectors

def extract_nouns(phrase, noun_lexicon):
    """Tokens present in the lexicon, original order, deduplicated."""
    seen, out = set(), []
    for t in phrase.tokens:
        if t in noun_lexicon and t not in seen:
            seen.add(t)
            out.append(t)
    return out


def load_noun_lexicon(path):
    with open(path, encoding="utf-8") as f:
        return frozenset(line.strip() for line in f if line.strip())


def save_noun_lexicon(nouns, path):
    with open(path, "w", encoding="utf-8") as f:
        for n in sorted(nouns):
            f.write(n + "\n")


class WordVectorTable:
    """token -> fixed vector; all vectors share one dimension."""

    def __init__(self, vectors):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError("word vectors must all share one dimension")
        self._vectors = {t: np.asarray(v, dtype=np.float64) for t, v in vectors.items()}
        self.dim = dims.pop() if dims else 0

    def __contains__(self, token):
        return token in self._vectors

    def tokens(self):
        return list(self._vectors)

    def vector(self, token):
        return self._vectors[token]

    def vector_or_zero(self, token):
        v = self._vectors.get(token)
        return np.zeros(self.dim) if v is None else v

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump({t: v.tolist() for t, v in sorted(self._vectors.items())},
                      f, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    @classmethod
    def from_embedder(cls, tokens, dim=32, salt="wordvec"):
        emb = HashedEmbedder(dim=dim, salt=salt)
        return cls({t: emb.token_vector(t) for t in tokens})
