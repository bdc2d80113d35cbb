"""Weakly-supervised proposal indexing via knowledge transfer.

Two signals are combined, neither of which ever sees a ground-truth box:

- data-driven: a category head over proposal features is trained from
  image-level labels only. Per-proposal category logits are averaged over
  the image, squashed by a sigmoid, and penalized with a multi-label
  cross-entropy against "does this image contain phrase category j".
- appearance-based: the per-proposal source-class probabilities supplied by
  the dataset (a stand-in for a pretrained detector) weight source-class
  word vectors; the cosine between that blend and the normalized sum of the
  query's category vector and noun vectors scores the proposal.

At query time the per-proposal score is the average of the sigmoid of the
data-driven logit for the query's category and the appearance correlation;
the top-L proposals form the weak indexed set.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .pin import IndexedEntry, IndexedSet, features_matrix
from .text import assign_category, extract_nouns, tokenize

logger = logging.getLogger(__name__)

DEFAULT_WEAK_TOP_L = 5


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


class DktHead:
    """MLP over proposal features -> per-category pre-sigmoid logits."""

    def __init__(self, feature_dim, n_categories, rng, hidden=64):
        self.n_categories = n_categories
        self.fc1 = nn.dense(rng, hidden, feature_dim, activation="relu")
        self.fc2 = nn.dense(rng, n_categories, hidden)

    def bundle(self):
        return nn.ParameterBundle([
            ("fc1.w", self.fc1.weights), ("fc1.b", self.fc1.bias),
            ("fc2.w", self.fc2.weights), ("fc2.b", self.fc2.bias),
        ])

    def logits(self, features):
        return nn.forward(self.fc2, nn.forward(self.fc1, features))


def dkt_image_score(proposal_logits):
    """sigmoid of the per-category mean over the image's K proposals."""
    z = np.asarray(proposal_logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("expected a (K, N) matrix with K >= 1")
    return sigmoid(z.mean(axis=0))


def dkt_loss(pc, y):
    """Mean multi-label cross-entropy of image scores against binary labels."""
    pc = np.asarray(pc, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def dkt_training_loss(logits, y):
    """Graph version computed from logits for numerical stability.

    Uses -[y log sigma(z) + (1-y) log(1-sigma(z))] = softplus(z) - y*z on the
    per-category mean logit, which equals dkt_loss(dkt_image_score(...), y).
    """
    z = ad.tmean(logits, axis=0)
    y = np.asarray(y, dtype=np.float64)
    return ad.tmean(ad.softplus(z) - z * y)


def image_labels(scene, query_categories, n_categories):
    """Binary vector: which phrase categories appear among the image's queries."""
    y = np.zeros(n_categories)
    for c in query_categories:
        y[c] = 1.0
    return y


def train_dkt(head, scenes, categories, embedder, schedule, seed=0):
    """Image-level multi-label training; no box supervision enters here."""
    items = []
    for scene in scenes:
        cats = [assign_category(embedder.embed(tokenize(q.phrase)), categories)
                for q in scene.queries]
        items.append((features_matrix(scene.proposals),
                      image_labels(scene, cats, head.n_categories)))
    bundle = head.bundle()
    rng = np.random.default_rng([seed, 0xD1])
    log = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at(schedule, epoch)
        order = rng.permutation(len(items))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            batch = [items[i] for i in order[lo:lo + schedule.batch_size]]
            total = None
            for feats, y in batch:
                loss = dkt_training_loss(head.logits(feats), y)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            bundle.zero_grad()
            total.backward()
            nn.sgd_step(bundle, bundle.gradients(), lr)
            losses.append(float(total.value))
        log.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
    return log


# ---------------------------------------------------------------------------
# appearance-based transfer

@dataclass
class SourceClassTable:
    """Source class names with their word vectors, aligned to the dataset's
    per-proposal probability vectors."""
    class_names: list
    vectors: np.ndarray  # (n_sources, D_w)

    @classmethod
    def from_word_table(cls, class_names, word_table):
        return cls(list(class_names),
                   np.stack([word_table.vector(n) for n in class_names]))


def akt_score(source_probs, table, category_vec, noun_vecs):
    """Cosine between probability-weighted source vectors and the query side.

    The query side is the normalized sum of the phrase-category vector and
    the phrase's noun vectors. Either side being (near) zero yields 0.
    """
    source_probs = np.asarray(source_probs, dtype=np.float64)
    if source_probs.shape[0] != len(table.class_names):
        raise ValueError("source probability vector does not match the table")
    left = source_probs @ table.vectors
    right = np.asarray(category_vec, dtype=np.float64)
    for v in noun_vecs:
        right = right + v
    ln, rn = np.linalg.norm(left), np.linalg.norm(right)
    if ln <= nn.NORM_EPS or rn <= nn.NORM_EPS:
        logger.debug("akt_score: zero vector on one side, returning 0")
        return 0.0
    return float((left / ln) @ (right / rn))


# ---------------------------------------------------------------------------
# weak indexing

class WeakModel:
    """Trained dkt head plus the lookup machinery for akt scoring."""

    def __init__(self, dkt_head, categories, embedder, source_table,
                 word_table, noun_lexicon, category_nouns, top_l=DEFAULT_WEAK_TOP_L):
        self.dkt_head = dkt_head
        self.categories = categories
        self.embedder = embedder
        self.source_table = source_table
        self.word_table = word_table
        self.noun_lexicon = noun_lexicon
        self.category_nouns = category_nouns  # representative noun per category
        self.top_l = top_l

    def category_vector(self, category):
        noun = self.category_nouns[category]
        if noun is None:
            return np.zeros(self.word_table.dim)
        return self.word_table.vector_or_zero(noun)

    def proposal_scores(self, proposals, phrase_text):
        """Averaged appearance + data-driven score per proposal."""
        phrase = tokenize(phrase_text)
        cat = assign_category(self.embedder.embed(phrase), self.categories)
        logits = self.dkt_head.logits(features_matrix(proposals)).value
        pc = sigmoid(logits[:, cat])
        cat_vec = self.category_vector(cat)
        noun_vecs = [self.word_table.vector_or_zero(t)
                     for t in extract_nouns(phrase, self.noun_lexicon)]
        akt = np.zeros(len(proposals))
        for k, p in enumerate(proposals):
            if p.source_class_probs is not None:
                akt[k] = akt_score(p.source_class_probs, self.source_table,
                                   cat_vec, noun_vecs)
        return 0.5 * (akt + pc)


def category_noun_table(scenes, categories, embedder, noun_lexicon):
    """Most frequent lexicon noun among training phrases per category."""
    counts = [{} for _ in range(categories.n)]
    for scene in scenes:
        for q in scene.queries:
            phrase = tokenize(q.phrase)
            cat = assign_category(embedder.embed(phrase), categories)
            for noun in extract_nouns(phrase, noun_lexicon):
                counts[cat][noun] = counts[cat].get(noun, 0) + 1
    return [max(c, key=lambda n: (c[n], n)) if c else None for c in counts]


def weak_index(model, proposals, phrase_text, top_l=None):
    """Top-L proposals by the averaged weak score; boxes are not regressed."""
    top_l = model.top_l if top_l is None else top_l
    scores = model.proposal_scores(proposals, phrase_text)
    order = np.argsort(-scores, kind="stable")[:top_l]
    entries = [IndexedEntry(proposal_index=int(i), proposal=proposals[i],
                            score=float(scores[i]), regressed_box=proposals[i].box)
               for i in order]
    return IndexedSet(entries, short_set=len(entries) < top_l)
