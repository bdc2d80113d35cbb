"""Proposal Indexing Network.

Stage 1 classifies region proposals into phrase categories (plus a
background class) from their visual features alone. Stage 2 scores each
surviving proposal against the query: the proposal feature is concatenated
with an LSTM encoding of the query and projected to a 5-vector whose first
entry is a similarity logit (softmaxed across the query's proposal set) and
whose remaining four entries are box-regression parameters. The top-L
proposals by similarity form the query's indexed set.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .geometry import decode_regression, encode_regression, iou
from .text import assign_category, tokenize

POSITIVE_IOU = 0.5  # a proposal is positive when IoU with gt exceeds this

# regression targets are scaled up for optimization (plain SGD barely moves
# on raw targets of magnitude ~0.1); predictions are unscaled before decoding
REG_TARGET_SCALE = 4.0


def features_matrix(proposals):
    """Stack proposal features row-wise and l2-normalize each row."""
    return nn.l2_normalize_rows(np.stack([p.feature for p in proposals]))


def softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


# ---------------------------------------------------------------------------
# stage 1: category classifier

class Stage1Classifier:
    """Two-layer MLP over proposal features -> N categories + background."""

    def __init__(self, feature_dim, n_categories, rng, hidden=64):
        self.n_categories = n_categories
        self.fc1 = nn.dense(rng, hidden, feature_dim, activation="relu")
        self.fc2 = nn.dense(rng, n_categories + 1, hidden)

    @property
    def background(self):
        return self.n_categories

    def bundle(self):
        return nn.ParameterBundle([
            ("fc1.w", self.fc1.weights), ("fc1.b", self.fc1.bias),
            ("fc2.w", self.fc2.weights), ("fc2.b", self.fc2.bias),
        ])

    def logits(self, features):
        return nn.forward(self.fc2, nn.forward(self.fc1, features))

    def posteriors(self, features):
        """(K, N+1) softmax rows; evaluation path, no graph kept."""
        z = self.logits(features).value
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def label_proposals(scene, query_categories):
    """Category of the best-overlapping ground truth (IoU > 0.5), else background.

    query_categories[i] is the phrase category of scene.queries[i]; the
    returned labels use index n_categories ... for background the caller's
    classifier background index (labels hold -1 for background here).
    """
    labels = []
    for p in scene.proposals:
        best_q, best_v = None, POSITIVE_IOU
        for q, cat in zip(scene.queries, query_categories):
            v = iou(p.box, q.box)
            if v > best_v:
                best_q, best_v = cat, v
        labels.append(-1 if best_q is None else best_q)
    return np.array(labels, dtype=int)


def scene_query_categories(scene, categories, embedder):
    return [assign_category(embedder.embed(tokenize(q.phrase)), categories)
            for q in scene.queries]


def train_stage1(classifier, scenes, categories, embedder, schedule, seed=0):
    """Softmax cross-entropy over all labeled proposals; returns per-epoch log."""
    feats, labels = [], []
    for scene in scenes:
        cats = scene_query_categories(scene, categories, embedder)
        y = label_proposals(scene, cats)
        y = np.where(y < 0, classifier.background, y)
        feats.append(features_matrix(scene.proposals))
        labels.append(y)
    X = np.vstack(feats)
    y = np.concatenate(labels)

    present = set(np.unique(y))
    missing = [j for j in range(classifier.n_categories) if j not in present]
    if missing:
        warnings.warn(f"no positive proposals for categories {missing}; "
                      "they will only be learned as absent", stacklevel=2)

    bundle = classifier.bundle()
    rng = np.random.default_rng([seed, 0xA1])
    log = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at(schedule, epoch)
        order = rng.permutation(len(X))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            idx = order[lo:lo + schedule.batch_size]
            logits = classifier.logits(X[idx])
            logp = ad.log_softmax(logits, axis=1)
            loss = -ad.tmean(logp[np.arange(len(idx)), y[idx]])
            bundle.zero_grad()
            loss.backward()
            nn.sgd_step(bundle, bundle.gradients(), lr)
            losses.append(float(loss.value))
        log.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
    return log


def stage1_filter(classifier, features, category, keep_k):
    """Indices of the top keep_k proposals by P(category), stable order."""
    probs = classifier.posteriors(features)[:, category]
    order = np.argsort(-probs, kind="stable")
    return list(order[:keep_k])


# ---------------------------------------------------------------------------
# stage 2: query-conditioned ranking and regression

class Stage2Head:
    """concat(proposal feature, query encoding) -> [similarity logit, 4 regs]."""

    def __init__(self, feature_dim, token_dim, rng, lstm_hidden=16,
                 hidden=64, bidirectional=True):
        self.encoder = nn.LstmEncoder(token_dim, lstm_hidden, rng,
                                      bidirectional=bidirectional, name="query_lstm")
        self.fc1 = nn.dense(rng, hidden, feature_dim + self.encoder.output_dim,
                            activation="relu")
        self.fc2 = nn.dense(rng, 5, hidden)

    def bundle(self):
        return nn.ParameterBundle(self.encoder.params() + [
            ("fc1.w", self.fc1.weights), ("fc1.b", self.fc1.bias),
            ("fc2.w", self.fc2.weights), ("fc2.b", self.fc2.bias),
        ])

    def score_set(self, features, token_seq):
        """(K, 5) tensor of raw outputs for one query's proposal set."""
        features = ad.as_tensor(features)
        k = features.value.shape[0]
        g = self.encoder.encode(token_seq)
        tiled = ad.stack([g] * k, axis=0)
        x = ad.concat([features, tiled], axis=1)
        return nn.forward(self.fc2, nn.forward(self.fc1, x))


def stage2_probabilities(raw):
    """Softmax the similarity logits across the query's proposal set."""
    return softmax(np.asarray(raw)[:, 0])


def pin_loss(scores, positives, targets):
    """Mean over positives of [-log p + (1/4) sum_k smooth_l1(reg - target)].

    ``scores`` rows are [probability, 4 regression params] with the softmax
    already applied across the set; ``targets`` aligns with ``positives``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = list(positives)
    if not positives:
        raise ValueError("pin_loss requires at least one positive")
    total = 0.0
    for pos, tgt in zip(positives, np.asarray(targets, dtype=np.float64)):
        resid = scores[pos, 1:5] - tgt
        total += -np.log(scores[pos, 0]) + 0.25 * nn.smooth_l1(resid).sum()
    return total / len(positives)


def pin_training_loss(raw, positives, targets):
    """Graph version of pin_loss from raw (pre-softmax) stage-2 outputs."""
    logp = ad.log_softmax(raw[:, 0])
    pos = np.asarray(positives, dtype=int)
    resid = raw[pos, 1:5] - np.asarray(targets, dtype=np.float64)
    per_pos = -logp[pos] + 0.25 * ad.tsum(ad.smooth_l1(resid), axis=1)
    return ad.tmean(per_pos)


@dataclass
class TrainingUnit:
    """One query's stage-2 training instance over its filtered proposal set."""
    features: np.ndarray        # (K, D) rows for the kept proposals
    token_seq: np.ndarray       # (T, token_dim)
    positives: list             # positions within the kept subset
    targets: np.ndarray         # (P, 4)


def build_stage2_units(scenes, categories, embedder, classifier, keep_k):
    units, skipped = [], 0
    for scene in scenes:
        feats = features_matrix(scene.proposals)
        cats = scene_query_categories(scene, categories, embedder)
        for q, cat in zip(scene.queries, cats):
            keep = stage1_filter(classifier, feats, cat, keep_k)
            pos, tgts = [], []
            for j, pi in enumerate(keep):
                if iou(scene.proposals[pi].box, q.box) > POSITIVE_IOU:
                    pos.append(j)
                    tgts.append(encode_regression(scene.proposals[pi].box, q.box))
            if not pos:
                skipped += 1
                continue
            units.append(TrainingUnit(feats[keep], embedder.sequence(tokenize(q.phrase)),
                                      pos, REG_TARGET_SCALE * np.stack(tgts)))
    return units, skipped


def train_stage2(head, units, schedule, seed=0):
    """Mini-batch SGD over per-query units; returns the per-epoch log."""
    bundle = head.bundle()
    rng = np.random.default_rng([seed, 0xA2])
    log = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at(schedule, epoch)
        order = rng.permutation(len(units))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            batch = [units[i] for i in order[lo:lo + schedule.batch_size]]
            total = None
            for u in batch:
                raw = head.score_set(u.features, u.token_seq)
                loss = pin_training_loss(raw, u.positives, u.targets)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            bundle.zero_grad()
            total.backward()
            nn.sgd_step(bundle, bundle.gradients(), lr)
            losses.append(float(total.value))
        log.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
    return log


# ---------------------------------------------------------------------------
# indexing

@dataclass
class IndexedEntry:
    proposal_index: int   # index into the scene's raw proposal list
    proposal: object
    score: float          # softmaxed similarity across the query's set
    regressed_box: object


@dataclass
class IndexedSet:
    entries: list = field(default_factory=list)
    short_set: bool = False

    def __len__(self):
        return len(self.entries)

    def boxes(self):
        return [e.proposal.box for e in self.entries]

    def regressed_boxes(self):
        return [e.regressed_box for e in self.entries]


class PinModel:
    """Trained categories + stage-1 + stage-2, ready to index proposals."""

    def __init__(self, categories, stage1, stage2, embedder, top_l=10, keep_k=None):
        self.categories = categories
        self.stage1 = stage1
        self.stage2 = stage2
        self.embedder = embedder
        self.top_l = top_l
        self.keep_k = keep_k if keep_k is not None else 2 * top_l

    def query_category(self, phrase_text):
        return assign_category(self.embedder.embed(tokenize(phrase_text)),
                               self.categories)

    def pin_scores(self, proposals, phrase_text, keep_k=None):
        """(kept indices, (K,5) scores): softmaxed similarity + regression params."""
        keep_k = self.keep_k if keep_k is None else keep_k
        feats = features_matrix(proposals)
        cat = self.query_category(phrase_text)
        keep = stage1_filter(self.stage1, feats, cat, keep_k)
        token_seq = self.embedder.sequence(tokenize(phrase_text))
        raw = self.stage2.score_set(feats[keep], token_seq).value
        scores = np.column_stack([stage2_probabilities(raw),
                                  raw[:, 1:5] / REG_TARGET_SCALE])
        return keep, scores

    def index(self, proposals, phrase_text, top_l=None, keep_k=None):
        """Stage-1 filter, stage-2 rank, top-L select with regressed boxes."""
        top_l = self.top_l if top_l is None else top_l
        keep, scores = self.pin_scores(proposals, phrase_text, keep_k)
        # ties in the similarity break by original proposal index
        order = sorted(range(len(keep)), key=lambda j: (-scores[j, 0], keep[j]))
        entries = []
        for j in order[:top_l]:
            pi = keep[j]
            entries.append(IndexedEntry(
                proposal_index=pi,
                proposal=proposals[pi],
                score=float(scores[j, 0]),
                regressed_box=decode_regression(proposals[pi].box, scores[j, 1:5]),
            ))
        return IndexedSet(entries, short_set=len(entries) < top_l)
