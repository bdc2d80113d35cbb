"""Proposal Ranking Network.

Each candidate is described by its visual feature, a contrastive feature
(average of unit-normalized differences against the other candidates), and
its 5-D spatial configuration. A two-layer ReLU stack encodes the visual
side; another encodes the concatenated query and caption LSTM embeddings.
The text encoding is projected into the visual space (with a learned scalar
bias projection) and the score is their dot product plus the bias. Training
uses a max-margin hinge: every negative must sit below the best positive by
a margin.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .geometry import spatial_config

DEFAULT_MARGIN = 0.1  # the margin value is a free parameter; 0.1 is the default


@dataclass
class Candidate:
    box: object                 # box the candidate is scored at
    feature: np.ndarray
    origin: str                 # "pin" | "irn"
    refined_box: object = None  # box reported if this candidate wins
    pin_score: float = None
    proposal_index: int = None
    interpolated: bool = False

    def __post_init__(self):
        if self.origin not in ("pin", "irn"):
            raise ValueError(f"unknown candidate origin {self.origin!r}")
        if self.refined_box is None:
            self.refined_box = self.box


@dataclass
class CandidateSet:
    candidates: list = field(default_factory=list)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def boxes(self):
        return [c.box for c in self.candidates]

    def features(self):
        """(K, D) l2-normalized feature rows."""
        if not self.candidates:
            raise ValueError("empty candidate set")
        return nn.l2_normalize_rows(np.stack([c.feature for c in self.candidates]))

    def spatials(self, width, height):
        return np.stack([spatial_config(c.box, width, height)
                         for c in self.candidates])


def contrastive_features(features, eps=1e-8):
    """Average pairwise unit-difference context vectors, one row per candidate.

    Row k is the mean over l != k of (f_k - f_l) / ||f_k - f_l||; pairs
    closer than eps are skipped, and a singleton set (or all-identical
    features) yields zero rows.
    """
    f = np.asarray(features, dtype=np.float64)
    k = f.shape[0]
    out = np.zeros_like(f)
    if k < 2:
        return out
    for i in range(k):
        diffs = f[i] - np.delete(f, i, axis=0)
        norms = np.linalg.norm(diffs, axis=1)
        keep = norms > eps
        if keep.any():
            out[i] = (diffs[keep] / norms[keep, None]).mean(axis=0)
    return out


class PrnModel:
    """Bimodal scorer over a query's candidate set."""

    def __init__(self, feature_dim, token_dim, rng, enc_dim=64, hidden=256,
                 lstm_hidden=16, bidirectional=True, dropout_p=0.5,
                 margin=DEFAULT_MARGIN, standardize=True, positive_pool="max"):
        if positive_pool not in ("max", "mean"):
            raise ValueError("positive_pool must be 'max' or 'mean'")
        self.margin = margin
        self.dropout_p = dropout_p
        self.standardize = standardize
        self.positive_pool = positive_pool
        self.query_encoder = nn.LstmEncoder(token_dim, lstm_hidden, rng,
                                            bidirectional=bidirectional,
                                            name="query_lstm")
        self.caption_encoder = nn.LstmEncoder(token_dim, lstm_hidden, rng,
                                              bidirectional=bidirectional,
                                              name="caption_lstm")
        vis_in = 2 * feature_dim + 5
        txt_in = self.query_encoder.output_dim + self.caption_encoder.output_dim
        self.vis1 = nn.dense(rng, hidden, vis_in, activation="relu")
        self.vis2 = nn.dense(rng, enc_dim, hidden, activation="relu")
        self.txt1 = nn.dense(rng, hidden, txt_in, activation="relu")
        self.txt2 = nn.dense(rng, enc_dim, hidden, activation="relu")
        self.w_p = ad.parameter(nn.init_matrix(rng, enc_dim, enc_dim))
        self.b_p = ad.parameter(nn.init_matrix(rng, 1, enc_dim)[0])

    def bundle(self):
        return nn.ParameterBundle(
            self.query_encoder.params() + self.caption_encoder.params() + [
                ("vis1.w", self.vis1.weights), ("vis1.b", self.vis1.bias),
                ("vis2.w", self.vis2.weights), ("vis2.b", self.vis2.bias),
                ("txt1.w", self.txt1.weights), ("txt1.b", self.txt1.bias),
                ("txt2.w", self.txt2.weights), ("txt2.b", self.txt2.bias),
                ("w_p", self.w_p), ("b_p", self.b_p),
            ])

    # -- encoders ---------------------------------------------------------

    def encode_visual(self, features, cfv, lv, training=False, rng=None):
        """(K, enc_dim) visual encodings of concat(feature, contrastive, spatial)."""
        x = ad.as_tensor(np.hstack([features, cfv, lv]))
        h = nn.forward(self.vis1, x)
        h = self._dropout(h, training, rng)
        h = nn.forward(self.vis2, h)
        return self._dropout(h, training, rng)

    def encode_text(self, query_tokens, caption_tokens=None, training=False, rng=None):
        """(enc_dim,) text encoding; captionless datasets use a zero caption."""
        g_p = self.query_encoder.encode(query_tokens)
        if caption_tokens is None or len(caption_tokens) == 0:
            g_fc = ad.Tensor(np.zeros(self.caption_encoder.output_dim))
        else:
            g_fc = self.caption_encoder.encode(caption_tokens)
        h = nn.forward(self.txt1, ad.concat([g_p, g_fc]))
        h = self._dropout(h, training, rng)
        h = nn.forward(self.txt2, h)
        return self._dropout(h, training, rng)

    def _dropout(self, h, training, rng):
        if not training or self.dropout_p <= 0.0:
            return h
        return h * nn.dropout_mask(rng, h.value.shape, self.dropout_p)

    # -- scoring ----------------------------------------------------------

    def score(self, text_enc, visual_enc):
        """zeta for every candidate: dot(relu(W_P Rp), Rv_k) + relu(b_P Rp)."""
        vp = ad.relu(ad.matmul(self.w_p, text_enc))
        bias = ad.relu(ad.matmul(self.b_p, text_enc))
        return ad.matmul(visual_enc, vp) + bias

    def score_set(self, candidate_set, query_tokens, caption_tokens, image_size,
                  training=False, rng=None):
        """Graph of zeta scores, shape (K,), for one query's candidate set."""
        feats = candidate_set.features()
        cfv = contrastive_features(feats)
        lv = candidate_set.spatials(*image_size)
        rv = self.encode_visual(feats, cfv, lv, training, rng)
        if self.standardize and len(candidate_set) >= 2:
            rv = nn.standardize(rv)
        rp = self.encode_text(query_tokens, caption_tokens, training, rng)
        return self.score(rp, rv)


def prn_loss(scores, positives, margin=DEFAULT_MARGIN, positive_pool="max"):
    """Sum over negatives of max(0, margin + zeta_neg - pooled positive zeta).

    ``scores`` may be a plain array (returns float) or a graph tensor
    (returns a scalar tensor for training). No negatives means zero loss;
    callers skip queries without positives.
    """
    is_graph = isinstance(scores, ad.Tensor)
    values = scores.value if is_graph else np.asarray(scores, dtype=np.float64)
    k = len(values)
    positives = sorted(set(positives))
    if not positives:
        raise ValueError("prn_loss requires at least one positive")
    negatives = [i for i in range(k) if i not in positives]
    if not negatives:
        return ad.Tensor(0.0) if is_graph else 0.0
    if not is_graph:
        pos = values[positives]
        rep = pos.max() if positive_pool == "max" else pos.mean()
        return float(np.maximum(0.0, margin + values[negatives] - rep).sum())
    pos = scores[np.asarray(positives, dtype=int)]
    rep = ad.tmax(pos) if positive_pool == "max" else ad.tmean(pos)
    neg = scores[np.asarray(negatives, dtype=int)]
    return ad.tsum(ad.relu(neg - rep + margin))


def predict(model, candidate_set, query_tokens, caption_tokens, image_size):
    """Index of the highest-scoring candidate (ties -> lowest index)."""
    if len(candidate_set) == 0:
        raise ValueError("cannot predict from an empty candidate set")
    zeta = model.score_set(candidate_set, query_tokens, caption_tokens,
                           image_size).value
    return int(np.argmax(zeta)), zeta


@dataclass
class PrnUnit:
    """One query's ranking instance over its full candidate set."""
    features: np.ndarray
    cfv: np.ndarray
    lv: np.ndarray
    query_tokens: np.ndarray
    caption_tokens: np.ndarray
    positives: list


def train_prn(model, units, schedule, seed=0):
    bundle = model.bundle()
    rng = np.random.default_rng([seed, 0xC1])
    log = []
    for epoch in range(schedule.epochs):
        lr = nn.lr_at(schedule, epoch)
        order = rng.permutation(len(units))
        losses = []
        for lo in range(0, len(order), schedule.batch_size):
            batch = [units[i] for i in order[lo:lo + schedule.batch_size]]
            total = None
            for u in batch:
                rv = model.encode_visual(u.features, u.cfv, u.lv,
                                         training=True, rng=rng)
                if model.standardize and len(u.features) >= 2:
                    rv = nn.standardize(rv)
                rp = model.encode_text(u.query_tokens, u.caption_tokens,
                                       training=True, rng=rng)
                loss = prn_loss(model.score(rp, rv), u.positives,
                                margin=model.margin,
                                positive_pool=model.positive_pool)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            bundle.zero_grad()
            total.backward()
            nn.sgd_step(bundle, bundle.gradients(), lr)
            losses.append(float(total.value))
        log.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
    return log
