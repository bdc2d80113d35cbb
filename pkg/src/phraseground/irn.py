"""Inter-phrase Regression Network.

Given a relation tuple (source phrase, relation, target phrase), a trained
direction head maps each indexed proposal of one phrase to a predicted box
for the other: the proposal's visual feature, its 5-D spatial configuration,
a one-hot encoding of the (source, target) category pair, and an LSTM
encoding of the relation text are concatenated, passed through a ReLU hidden
layer, and projected to 4 box-regression parameters interpreted against the
proposal's box. Separate heads handle source->target and target->source.

Predicted boxes are unioned into the PIN candidate set; they inherit the
visual feature of the raw proposal they overlap most (or an interpolated
feature when nothing overlaps enough).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .geometry import decode_regression, encode_regression, iou, spatial_config
from .prn import Candidate, CandidateSet
from .text import tokenize

UNK_RELATION = "unk"
DEDUP_IOU = 0.95          # relation boxes this close to an existing candidate drop
FEATURE_LOOKUP_IOU = 0.3  # minimum overlap to borrow a raw proposal's feature
REG_TARGET_SCALE = 2.0    # same optimization trick as the PIN stage-2 head


class RelationVocab:
    """Relations seen few times in training collapse to an UNK token."""

    def __init__(self, kept, min_count=5):
        self.kept = frozenset(kept)
        self.min_count = min_count

    @classmethod
    def from_counts(cls, counts, min_count=5):
        return cls({r for r, c in counts.items() if c > min_count}, min_count)

    @classmethod
    def from_scenes(cls, scenes, min_count=5):
        counts = {}
        for scene in scenes:
            for r in scene.relations:
                counts[r.relation] = counts.get(r.relation, 0) + 1
        return cls.from_counts(counts, min_count)

    def canonical(self, relation):
        return relation if relation in self.kept else UNK_RELATION

    def to_json_dict(self):
        return {"kept": sorted(self.kept), "min_count": self.min_count}

    @classmethod
    def from_json_dict(cls, d):
        return cls(d["kept"], d["min_count"])


def pair_one_hot(source_category, target_category, n_categories):
    """One-hot over the N^2 (source, target) category pairs."""
    if not (0 <= source_category < n_categories and 0 <= target_category < n_categories):
        raise ValueError("category index out of range")
    v = np.zeros(n_categories * n_categories)
    v[source_category * n_categories + target_category] = 1.0
    return v


class IrnHead:
    """Relation-conditioned regression for one direction."""

    def __init__(self, feature_dim, n_categories, token_dim, rng,
                 lstm_hidden=16, hidden=64, bidirectional=True):
        self.n_categories = n_categories
        self.encoder = nn.LstmEncoder(token_dim, lstm_hidden, rng,
                                      bidirectional=bidirectional, name="relation_lstm")
        in_dim = feature_dim + 5 + n_categories ** 2 + self.encoder.output_dim
        self.fc1 = nn.dense(rng, hidden, in_dim, activation="relu")
        self.fc2 = nn.dense(rng, 4, hidden)

    def bundle(self):
        return nn.ParameterBundle(self.encoder.params() + [
            ("fc1.w", self.fc1.weights), ("fc1.b", self.fc1.bias),
            ("fc2.w", self.fc2.weights), ("fc2.b", self.fc2.bias),
        ])

    def predict_set(self, features, lvs, rv, relation_tokens):
        """(K, 4) regression parameters for K proposals of one tuple."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        lvs = np.atleast_2d(np.asarray(lvs, dtype=np.float64))
        k = features.shape[0]
        er = self.encoder.encode(relation_tokens)
        tiled = ad.stack([er] * k, axis=0)
        rv_rows = ad.as_tensor(np.tile(rv, (k, 1)))
        x = ad.concat([ad.as_tensor(features), ad.as_tensor(lvs), rv_rows, tiled], axis=1)
        return nn.forward(self.fc2, nn.forward(self.fc1, x))

    def predict(self, feature, lv, rv, relation_tokens):
        """Unscaled 4-vector for a single proposal (evaluation path)."""
        raw = self.predict_set(feature[None, :], lv[None, :], rv, relation_tokens)
        return raw.value[0] / REG_TARGET_SCALE


def irn_loss(predicted, gt_target):
    """Sum over the 4 coordinates of smooth_l1(pred - gt)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    gt_target = np.asarray(gt_target, dtype=np.float64)
    return float(nn.smooth_l1(predicted - gt_target).sum())


def irn_training_loss(raw, targets):
    """Graph version: mean over the K proposals of Eq.-style smooth-L1 sums."""
    resid = raw - np.asarray(targets, dtype=np.float64)
    return ad.tmean(ad.tsum(ad.smooth_l1(resid), axis=1))


@dataclass
class IrnUnit:
    """One (tuple, direction) training instance over L indexed proposals."""
    features: np.ndarray       # (L, D) l2-normalized
    lvs: np.ndarray            # (L, 5)
    rv: np.ndarray             # (N^2,)
    relation_tokens: np.ndarray
    targets: np.ndarray        # (L, 4), scaled


def build_irn_units(scenes, pin_model, vocab, embedder, n_categories):
    """Training units for both directions; indexed sets come from trained PIN."""
    units_so, units_os = [], []
    for scene in scenes:
        if not scene.relations:
            continue
        indexed_cache = {}

        def indexed_for(qi):
            if qi not in indexed_cache:
                indexed_cache[qi] = pin_model.index(scene.proposals,
                                                    scene.queries[qi].phrase)
            return indexed_cache[qi]

        for rel in scene.relations:
            src_q = scene.queries[rel.source_query]
            tgt_q = scene.queries[rel.target_query]
            src_cat = pin_model.query_category(src_q.phrase)
            tgt_cat = pin_model.query_category(tgt_q.phrase)
            rv = pair_one_hot(src_cat, tgt_cat, n_categories)
            tokens = embedder.sequence(tokenize(vocab.canonical(rel.relation)))
            for units, neighbor_qi, goal_box in (
                    (units_so, rel.source_query, tgt_q.box),
                    (units_os, rel.target_query, src_q.box)):
                idx = indexed_for(neighbor_qi)
                if not idx.entries:
                    continue
                feats = nn.l2_normalize_rows(
                    np.stack([e.proposal.feature for e in idx.entries]))
                lvs = np.stack([spatial_config(e.proposal.box, scene.width, scene.height)
                                for e in idx.entries])
                targets = np.stack([encode_regression(e.proposal.box, goal_box)
                                    for e in idx.entries])
                units.append(IrnUnit(feats, lvs, rv, tokens,
                                     REG_TARGET_SCALE * targets))
    return units_so, units_os


def train_irn(head, units, schedule, seed=0):
    bundle = head.bundle()
    rng = np.random.default_rng([seed, 0xB1])
    log = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at(schedule, epoch)
        order = rng.permutation(len(units))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            batch = [units[i] for i in order[lo:lo + schedule.batch_size]]
            total = None
            for u in batch:
                raw = head.predict_set(u.features, u.lvs, u.rv, u.relation_tokens)
                loss = irn_training_loss(raw, u.targets)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            bundle.zero_grad()
            total.backward()
            nn.sgd_step(bundle, bundle.gradients(), lr)
            losses.append(float(total.value))
        log.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
    return log


def generate_relation_proposals(head, neighbor_indexed, rv, relation_tokens,
                                image_size):
    """One decoded box per indexed neighbor proposal (no clipping here)."""
    boxes = []
    if not neighbor_indexed.entries:
        return boxes
    feats = nn.l2_normalize_rows(
        np.stack([e.proposal.feature for e in neighbor_indexed.entries]))
    w, h = image_size
    lvs = np.stack([spatial_config(e.proposal.box, w, h)
                    for e in neighbor_indexed.entries])
    raw = head.predict_set(feats, lvs, rv, relation_tokens).value / REG_TARGET_SCALE
    for e, t in zip(neighbor_indexed.entries, raw):
        boxes.append(decode_regression(e.proposal.box, t))
    return boxes


def _lookup_feature(box, raw_proposals):
    """Feature of the best-overlapping raw proposal, or an interpolated one."""
    overlaps = np.array([iou(box, p.box) for p in raw_proposals])
    best = int(np.argmax(overlaps))
    if overlaps[best] >= FEATURE_LOOKUP_IOU:
        return raw_proposals[best].feature, False
    cx, cy = box.center
    dists = np.array([np.hypot(p.box.center[0] - cx, p.box.center[1] - cy)
                      for p in raw_proposals])
    nearest = np.argsort(dists, kind="stable")[:2]
    return np.mean([raw_proposals[i].feature for i in nearest], axis=0), True


def augment_candidates(pin_set, relation_boxes, raw_proposals):
    """Union PIN-indexed proposals with IRN boxes, deduplicating near-copies.

    ``pin_set`` may be an IndexedSet (fresh union) or an existing
    CandidateSet (idempotent re-augmentation). PIN entries are never
    dropped; a relation box overlapping any existing candidate at IoU >
    DEDUP_IOU is discarded.
    """
    if isinstance(pin_set, CandidateSet):
        candidates = list(pin_set.candidates)
    else:
        candidates = [Candidate(box=e.proposal.box, feature=e.proposal.feature,
                                origin="pin", refined_box=e.regressed_box,
                                pin_score=e.score, proposal_index=e.proposal_index)
                      for e in pin_set.entries]
    for box in relation_boxes:
        if any(iou(box, c.box) > DEDUP_IOU for c in candidates):
            continue
        feature, interpolated = _lookup_feature(box, raw_proposals)
        candidates.append(Candidate(box=box, feature=feature, origin="irn",
                                    refined_box=box, interpolated=interpolated))
    return CandidateSet(candidates)
