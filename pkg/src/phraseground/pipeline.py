"""End-to-end orchestration: configuration, staged training, grounding, and
model (de)serialization.

Grounding modes select how much of the pipeline participates:

- "pin":      top indexed proposal, regression applied.
- "pin_irn":  PIN plus relation-generated boxes, ranked by the stage-2
              similarity over the union.
- "pin_prn":  PIN candidates only, reranked by the context scorer.
- "full":     PIN plus relation boxes, reranked by the context scorer.
- "weak":     the weakly-supervised index (no boxes were used in training).

Every stage is deterministic given the config seed; inference uses no
randomness at all.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import irn as irn_mod
from . import nn
from . import pin as pin_mod
from . import prn as prn_mod
from . import weak as weak_mod
from .geometry import Box, iou
from .synthdata import Proposal
from .text import CategoryModel, QueryEmbedder, fit_categories, tokenize

MODEL_SCHEMA_VERSION = 1

GROUND_MODES = ("pin", "pin_irn", "pin_prn", "full", "weak")
STAGES = ("pin1", "pin2", "irn", "prn", "weak")

# stage -> stages that must already exist in the model
STAGE_DEPS = {
    "pin1": (),
    "pin2": ("pin1",),
    "irn": ("pin1", "pin2"),
    "prn": ("pin1", "pin2"),
    "weak": ("pin1",),
}


def _default_schedules():
    # Desk-scale heads need far more aggressive plain-SGD settings than the
    # reference large-scale schedule (1e-3, 30 epochs); see decisions notes.
    return {
        "pin1": nn.TrainSchedule(base_lr=0.5, epochs=12, decay_every=10, batch_size=40),
        "pin2": nn.TrainSchedule(base_lr=1.0, epochs=100, decay_every=40, batch_size=8),
        "irn": nn.TrainSchedule(base_lr=0.5, epochs=60, decay_every=25, batch_size=8),
        "prn": nn.TrainSchedule(base_lr=0.3, epochs=40, decay_every=18, batch_size=8),
        "weak": nn.TrainSchedule(base_lr=0.3, epochs=20, decay_every=10, batch_size=8),
    }


@dataclass
class PipelineConfig:
    n_categories: int = 10
    top_l: int = 10
    keep_k: int = None              # defaults to 2 * top_l
    phrase_dim: int = 64
    token_dim: int = 32
    lstm_hidden: int = 16
    bidirectional: bool = True
    stage1_hidden: int = 64
    stage2_hidden: int = 64
    irn_hidden: int = 64
    prn_hidden: int = 256
    prn_enc_dim: int = 64
    dropout_p: float = 0.5
    margin: float = 0.1
    positive_pool: str = "max"
    standardize: bool = True
    relation_min_count: int = 5
    weak_top_l: int = 5
    seed: int = 0
    schedules: dict = field(default_factory=_default_schedules)

    def resolved_keep_k(self):
        return self.keep_k if self.keep_k is not None else 2 * self.top_l

    def to_json_dict(self):
        d = asdict(self)
        d["schedules"] = {k: asdict(s) for k, s in self.schedules.items()}
        return d

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        sched = d.pop("schedules", None)
        cfg = cls(**d)
        if sched is not None:
            cfg.schedules = {k: nn.TrainSchedule(**v) for k, v in sched.items()}
        return cfg


class GroundingModel:
    """Everything the grounding pipeline has learned, staged incrementally."""

    def __init__(self, config, feature_dim):
        self.config = config
        self.feature_dim = feature_dim
        self.embedder = QueryEmbedder(config.phrase_dim, config.token_dim)
        self.categories = None
        self.stage1 = None
        self.stage2 = None
        self.relation_vocab = None
        self.irn_so = None
        self.irn_os = None
        self.prn = None
        self.dkt = None
        self.category_nouns = None
        self.source_classes = None

    def trained_stages(self):
        out = []
        if self.categories is not None and self.stage1 is not None:
            out.append("pin1")
        if self.stage2 is not None:
            out.append("pin2")
        if self.irn_so is not None:
            out.append("irn")
        if self.prn is not None:
            out.append("prn")
        if self.dkt is not None:
            out.append("weak")
        return out

    def pin_model(self):
        return pin_mod.PinModel(self.categories, self.stage1, self.stage2,
                                self.embedder, top_l=self.config.top_l,
                                keep_k=self.config.resolved_keep_k())

    def weak_model(self, word_vectors, noun_lexicon):
        table = weak_mod.SourceClassTable.from_word_table(self.source_classes,
                                                          word_vectors)
        return weak_mod.WeakModel(self.dkt, self.categories, self.embedder,
                                  table, word_vectors, noun_lexicon,
                                  self.category_nouns,
                                  top_l=self.config.weak_top_l)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self):
        heads = {}
        if self.stage1 is not None:
            heads["pin1"] = self.stage1.bundle().to_json_dict()
        if self.stage2 is not None:
            heads["pin2"] = self.stage2.bundle().to_json_dict()
        if self.irn_so is not None:
            heads["irn_so"] = self.irn_so.bundle().to_json_dict()
            heads["irn_os"] = self.irn_os.bundle().to_json_dict()
        if self.prn is not None:
            heads["prn"] = self.prn.bundle().to_json_dict()
        if self.dkt is not None:
            heads["weak"] = self.dkt.bundle().to_json_dict()
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "config": self.config.to_json_dict(),
            "feature_dim": self.feature_dim,
            "categories": None if self.categories is None
                          else self.categories.to_json_dict(),
            "relation_vocab": None if self.relation_vocab is None
                              else self.relation_vocab.to_json_dict(),
            "category_nouns": self.category_nouns,
            "source_classes": self.source_classes,
            "heads": heads,
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema_version "
                             f"{d.get('schema_version')!r}")
        config = PipelineConfig.from_json_dict(d["config"])
        model = cls(config, d["feature_dim"])
        if d.get("categories") is not None:
            model.categories = CategoryModel.from_json_dict(d["categories"])
        if d.get("relation_vocab") is not None:
            model.relation_vocab = irn_mod.RelationVocab.from_json_dict(
                d["relation_vocab"])
        model.category_nouns = d.get("category_nouns")
        model.source_classes = d.get("source_classes")
        heads = d.get("heads", {})
        rng = np.random.default_rng(0)  # values overwritten right after
        if "pin1" in heads:
            model.stage1 = _build_stage1(config, model.feature_dim, rng)
            model.stage1.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["pin1"]))
        if "pin2" in heads:
            model.stage2 = _build_stage2(config, model.feature_dim, rng)
            model.stage2.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["pin2"]))
        if "irn_so" in heads:
            model.irn_so = _build_irn(config, model.feature_dim, rng)
            model.irn_so.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["irn_so"]))
            model.irn_os = _build_irn(config, model.feature_dim, rng)
            model.irn_os.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["irn_os"]))
        if "prn" in heads:
            model.prn = _build_prn(config, model.feature_dim, rng)
            model.prn.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["prn"]))
        if "weak" in heads:
            model.dkt = _build_dkt(config, model.feature_dim, rng)
            model.dkt.bundle().load_values(
                nn.ParameterBundle.from_json_dict(heads["weak"]))
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def _build_stage1(config, feature_dim, rng):
    return pin_mod.Stage1Classifier(feature_dim, config.n_categories, rng,
                                    hidden=config.stage1_hidden)


def _build_stage2(config, feature_dim, rng):
    return pin_mod.Stage2Head(feature_dim, config.token_dim, rng,
                              lstm_hidden=config.lstm_hidden,
                              hidden=config.stage2_hidden,
                              bidirectional=config.bidirectional)


def _build_irn(config, feature_dim, rng):
    return irn_mod.IrnHead(feature_dim, config.n_categories, config.token_dim,
                           rng, lstm_hidden=config.lstm_hidden,
                           hidden=config.irn_hidden,
                           bidirectional=config.bidirectional)


def _build_prn(config, feature_dim, rng):
    return prn_mod.PrnModel(feature_dim, config.token_dim, rng,
                            enc_dim=config.prn_enc_dim, hidden=config.prn_hidden,
                            lstm_hidden=config.lstm_hidden,
                            bidirectional=config.bidirectional,
                            dropout_p=config.dropout_p, margin=config.margin,
                            standardize=config.standardize,
                            positive_pool=config.positive_pool)


def _build_dkt(config, feature_dim, rng):
    return weak_mod.DktHead(feature_dim, config.n_categories, rng)


# ---------------------------------------------------------------------------
# training

def train_pipeline(dataset, config, stages=STAGES, model=None):
    """Train the requested stages in order; returns (model, logs per stage)."""
    feature_dim = len(dataset.train[0].proposals[0].feature)
    if model is None:
        model = GroundingModel(config, feature_dim)
    logs = {}
    for stage in STAGES:
        if stage not in stages:
            continue
        missing = [d for d in STAGE_DEPS[stage] if d not in model.trained_stages()]
        if missing:
            raise ValueError(f"stage {stage!r} requires {missing} to be trained first")
        logs[stage] = _train_stage(model, dataset, stage)
    return model, logs


def _train_stage(model, dataset, stage):
    config = model.config
    sched = config.schedules[stage]
    rng = np.random.default_rng([config.seed, STAGES.index(stage) + 1])
    scenes = dataset.train

    if stage == "pin1":
        phrases = [model.embedder.embed(tokenize(q.phrase))
                   for s in scenes for q in s.queries]
        model.categories = fit_categories(np.array(phrases), config.n_categories,
                                          seed=config.seed)
        model.stage1 = _build_stage1(config, model.feature_dim, rng)
        model.source_classes = list(dataset.source_classes)
        return pin_mod.train_stage1(model.stage1, scenes, model.categories,
                                    model.embedder, sched, seed=config.seed)

    if stage == "pin2":
        model.stage2 = _build_stage2(config, model.feature_dim, rng)
        units, skipped = pin_mod.build_stage2_units(
            scenes, model.categories, model.embedder, model.stage1,
            config.resolved_keep_k())
        log = pin_mod.train_stage2(model.stage2, units, sched, seed=config.seed)
        return {"epochs": log, "skipped_queries": skipped}

    if stage == "irn":
        model.relation_vocab = irn_mod.RelationVocab.from_scenes(
            scenes, config.relation_min_count)
        model.irn_so = _build_irn(config, model.feature_dim, rng)
        model.irn_os = _build_irn(config, model.feature_dim, rng)
        units_so, units_os = irn_mod.build_irn_units(
            scenes, model.pin_model(), model.relation_vocab, model.embedder,
            config.n_categories)
        return {
            "so": irn_mod.train_irn(model.irn_so, units_so, sched, seed=config.seed),
            "os": irn_mod.train_irn(model.irn_os, units_os, sched,
                                    seed=config.seed + 1),
        }

    if stage == "prn":
        model.prn = _build_prn(config, model.feature_dim, rng)
        units, skipped = _build_prn_units(model, scenes)
        log = prn_mod.train_prn(model.prn, units, sched, seed=config.seed)
        return {"epochs": log, "skipped_queries": skipped}

    if stage == "weak":
        if dataset.noun_lexicon is None:
            raise ValueError("weak stage needs the dataset noun lexicon")
        model.dkt = _build_dkt(config, model.feature_dim, rng)
        model.category_nouns = weak_mod.category_noun_table(
            scenes, model.categories, model.embedder, dataset.noun_lexicon)
        return weak_mod.train_dkt(model.dkt, scenes, model.categories,
                                  model.embedder, sched, seed=config.seed)

    raise ValueError(f"unknown stage {stage!r}")


def _candidate_set_for_query(model, scene, query_index, indexed_cache,
                             use_irn=True):
    """PIN index the query, then union relation boxes from its neighbors."""
    pin_model = model.pin_model()
    if query_index not in indexed_cache:
        indexed_cache[query_index] = pin_model.index(
            scene.proposals, scene.queries[query_index].phrase)
    indexed = indexed_cache[query_index]
    relation_boxes = []
    if use_irn and model.irn_so is not None:
        for rel in scene.relations:
            if query_index not in (rel.source_query, rel.target_query):
                continue
            if rel.target_query == query_index:
                head, neighbor_qi = model.irn_so, rel.source_query
            else:
                head, neighbor_qi = model.irn_os, rel.target_query
            if neighbor_qi not in indexed_cache:
                indexed_cache[neighbor_qi] = pin_model.index(
                    scene.proposals, scene.queries[neighbor_qi].phrase)
            src_cat = pin_model.query_category(scene.queries[rel.source_query].phrase)
            tgt_cat = pin_model.query_category(scene.queries[rel.target_query].phrase)
            rv = irn_mod.pair_one_hot(src_cat, tgt_cat, model.config.n_categories)
            tokens = model.embedder.sequence(tokenize(
                model.relation_vocab.canonical(rel.relation)))
            relation_boxes.extend(irn_mod.generate_relation_proposals(
                head, indexed_cache[neighbor_qi], rv, tokens,
                (scene.width, scene.height)))
    return irn_mod.augment_candidates(indexed, relation_boxes, scene.proposals)


def _build_prn_units(model, scenes):
    units, skipped = [], 0
    use_irn = model.irn_so is not None
    for scene in scenes:
        indexed_cache = {}
        caption_tokens = (model.embedder.sequence(tokenize(scene.caption))
                          if scene.caption.strip() else None)
        for qi, q in enumerate(scene.queries):
            cand = _candidate_set_for_query(model, scene, qi, indexed_cache,
                                            use_irn=use_irn)
            positives = [i for i, c in enumerate(cand)
                         if iou(c.box, q.box) > pin_mod.POSITIVE_IOU]
            if not positives:
                skipped += 1
                continue
            feats = cand.features()
            units.append(prn_mod.PrnUnit(
                features=feats,
                cfv=prn_mod.contrastive_features(feats),
                lv=cand.spatials(scene.width, scene.height),
                query_tokens=model.embedder.sequence(tokenize(q.phrase)),
                caption_tokens=caption_tokens,
                positives=positives,
            ))
    return units, skipped


# ---------------------------------------------------------------------------
# grounding

def clip_box(box, width, height):
    x_min = min(max(box.x_min, 0.0), width)
    x_max = min(max(box.x_max, 0.0), width)
    y_min = min(max(box.y_min, 0.0), height)
    y_max = min(max(box.y_max, 0.0), height)
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box(x_min, y_min, x_max, y_max)


def _rank_candidates_by_stage2(model, cand, phrase_text):
    feats = cand.features()
    tokens = model.embedder.sequence(tokenize(phrase_text))
    raw = model.stage2.score_set(feats, tokens).value
    probs = pin_mod.softmax(raw[:, 0])
    order = sorted(range(len(cand)), key=lambda i: (-probs[i], i))
    return order, probs


def ground_scene(model, scene, mode="full", weak_model=None):
    """Per-query grounding results for one scene under the given mode."""
    if mode not in GROUND_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {GROUND_MODES}")
    results = []
    indexed_cache = {}
    caption_tokens = (model.embedder.sequence(tokenize(scene.caption))
                      if scene.caption.strip() else None)
    pin_model = model.pin_model() if mode != "weak" else None

    for qi, q in enumerate(scene.queries):
        if mode == "weak":
            idx = weak_mod.weak_index(weak_model, scene.proposals, q.phrase)
            ranked = [e.proposal.box for e in idx.entries]
            cand_rows = [{"box": e.proposal.box.as_list(), "origin": "pin",
                          "score": e.score} for e in idx.entries]
            results.append(_result_row(scene, qi, ranked, ranked[0], cand_rows))
            continue

        if qi not in indexed_cache:
            indexed_cache[qi] = pin_model.index(scene.proposals, q.phrase)
        indexed = indexed_cache[qi]
        top_raw_box = indexed.entries[0].proposal.box if indexed.entries else None

        if mode == "pin":
            ranked = indexed.regressed_boxes()
            cand_rows = [{"box": e.proposal.box.as_list(),
                          "refined_box": e.regressed_box.as_list(),
                          "origin": "pin", "pin_score": e.score}
                         for e in indexed.entries]
        else:
            use_irn = mode in ("pin_irn", "full") and model.irn_so is not None
            cand = _candidate_set_for_query(model, scene, qi, indexed_cache,
                                            use_irn=use_irn)
            if mode == "pin_irn":
                order, scores = _rank_candidates_by_stage2(model, cand, q.phrase)
                zeta = None
            else:  # pin_prn / full
                zeta = model.prn.score_set(
                    cand, model.embedder.sequence(tokenize(q.phrase)),
                    caption_tokens, (scene.width, scene.height)).value
                order = sorted(range(len(cand)), key=lambda i: (-zeta[i], i))
                scores = zeta
            ranked = [cand.candidates[i].refined_box for i in order]
            cand_rows = []
            for i in order:
                c = cand.candidates[i]
                row = {"box": c.box.as_list(),
                       "refined_box": c.refined_box.as_list(),
                       "origin": c.origin, "pin_score": c.pin_score,
                       "score": float(scores[i])}
                if zeta is not None:
                    row["zeta"] = float(zeta[i])
                cand_rows.append(row)

        prediction = None
        for b in ranked:
            clipped = clip_box(b, scene.width, scene.height)
            if clipped is not None:
                prediction = clipped
                break
        results.append(_result_row(scene, qi, ranked, prediction, cand_rows,
                                   top_raw_box))
    return results


def _result_row(scene, qi, ranked, prediction, cand_rows, top_raw_box=None):
    q = scene.queries[qi]
    return {
        "scene_id": scene.id,
        "query_index": qi,
        "phrase": q.phrase,
        "gt_box": q.box.as_list(),
        "class_label": q.class_label,
        "predicted_box": None if prediction is None else prediction.as_list(),
        "ranked_boxes": [b.as_list() for b in ranked],
        "top_raw_box": None if top_raw_box is None else top_raw_box.as_list(),
        "candidates": cand_rows,
    }


def ground_dataset(model, scenes, mode="full", weak_model=None):
    out = []
    for scene in scenes:
        out.extend(ground_scene(model, scene, mode=mode, weak_model=weak_model))
    return out
