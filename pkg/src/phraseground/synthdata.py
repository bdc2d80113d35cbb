"""Synthetic scene generator and dataset I/O.

Scenes are built from known ground truth so every downstream claim is
checkable: object features are class prototypes plus attribute offsets plus
gaussian noise; proposal features blend toward a background prototype as
their overlap with the underlying object decays, and carry a saturating
encoding of their geometric offset from it (the way a detector's crop
features reflect how the object sits inside the crop — this is what makes
box regression learnable from features). Relation tuples are geometrically
truthful by construction: targets are placed according to the relation word.

Datasets serialize as versioned JSON; generation is bit-reproducible per
seed, with each scene drawn from its own (seed, scene_index) stream.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, encode_regression, iou
from .text import WordVectorTable

SCHEMA_VERSION = 1

RELATIONS = ("left-of", "right-of", "above", "below", "holds", "near")

# each class is a (head noun, modifier) compound; the head noun doubles as
# the detector source-class name and the lexicon entry, while the two-token
# compound keeps class tokens dominant in mean-pooled phrase embeddings
_CLASS_SPECS = (("person", "young"), ("dog", "pet"), ("car", "sports"),
                ("bus", "city"), ("chair", "arm"), ("bottle", "water"),
                ("bird", "song"), ("horse", "race"), ("table", "coffee"),
                ("boat", "sail"), ("sheep", "farm"), ("plant", "potted"))
_CLASS_NOUNS = tuple(head for head, _ in _CLASS_SPECS)
_ATTRIBUTES = ("red", "small", "tall", "shiny", "blue", "large", "dark", "pale")


def class_phrase(class_id, attribute):
    head, modifier = _CLASS_SPECS[class_id]
    return f"{attribute} {modifier} {head}"

# feature composition knobs (see module docstring)
ATTRIBUTE_SCALE = 0.5        # attribute offsets are this fraction of a prototype
DISPLACEMENT_SATURATION = 0.5    # offsets squash into (-sat, sat) before coding
FEATURE_BLEND_LOW = 0.1      # below this IoU a proposal looks like background
FEATURE_BLEND_HIGH = 0.45    # above this IoU it looks fully like the object
SOURCE_PROB_PEAK = 3.0       # logit mass on the true class for source probs

# rng stream tags
_T_PROTO, _T_ATTR, _T_BG, _T_DISP, _T_WORDS = 101, 102, 103, 104, 105


class DatasetError(ValueError):
    """Malformed or infeasible dataset input/config."""


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 17
    n_scenes: int = 250
    image_width: int = 640
    image_height: int = 480
    n_object_classes: int = 8
    n_attributes: int = 4
    objects_per_scene: int = 3
    proposals_per_scene: int = 24
    feature_dim: int = 32
    feature_noise_sigma: float = 0.1
    word_vector_dim: int = 32
    relation_vocab: tuple = RELATIONS
    hard_fraction: float = 0.0
    emit_source_probs: bool = True
    train_fraction: float = 0.8

    def __post_init__(self):
        counts = (self.n_scenes, self.n_object_classes, self.n_attributes,
                  self.objects_per_scene, self.proposals_per_scene, self.feature_dim)
        if any(c < 1 for c in counts):
            raise DatasetError("all counts must be >= 1")
        if self.feature_noise_sigma < 0:
            raise DatasetError("feature_noise_sigma must be >= 0")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise DatasetError("hard_fraction must lie in [0, 1]")
        if self.proposals_per_scene < 3 * self.objects_per_scene + 2:
            raise DatasetError("proposals_per_scene too small for the per-object "
                              "positive/medium trio plus decoys")
        if self.n_object_classes > len(_CLASS_NOUNS):
            raise DatasetError(f"at most {len(_CLASS_NOUNS)} object classes supported")
        if self.n_attributes > len(_ATTRIBUTES):
            raise DatasetError(f"at most {len(_ATTRIBUTES)} attributes supported")
        if not any(r in self.relation_vocab for r in ("left-of", "right-of", "above", "below")):
            raise DatasetError("relation vocabulary needs at least one directional relation")


@dataclass
class Proposal:
    box: Box
    feature: np.ndarray
    source_class_probs: np.ndarray = None


@dataclass
class SceneObject:
    box: Box
    class_id: int
    class_name: str
    attribute: str


@dataclass
class Query:
    phrase: str
    box: Box
    class_label: int
    object_index: int


@dataclass
class RelationRef:
    source_query: int
    relation: str
    target_query: int


@dataclass
class Scene:
    id: str
    width: int
    height: int
    objects: list
    proposals: list
    queries: list
    caption: str
    relations: list = field(default_factory=list)


@dataclass
class Dataset:
    train: list
    test: list
    source_classes: list
    word_vectors: WordVectorTable = None
    noun_lexicon: frozenset = None


# ---------------------------------------------------------------------------
# feature model

class FeatureModel:
    """Deterministic class prototypes, attribute offsets, and offset coding."""

    def __init__(self, config):
        d = config.feature_dim
        self.prototypes = np.random.default_rng(
            [config.seed, _T_PROTO]).standard_normal((config.n_object_classes, d))
        self.attr_offsets = ATTRIBUTE_SCALE * np.random.default_rng(
            [config.seed, _T_ATTR]).standard_normal((config.n_attributes, d))
        self.background = np.random.default_rng([config.seed, _T_BG]).standard_normal(d)
        self.disp_matrix = 0.5 * np.random.default_rng(
            [config.seed, _T_DISP]).standard_normal((d, 4))
        self.noise_sigma = config.feature_noise_sigma

    def object_feature(self, class_id, attr_id):
        return self.prototypes[class_id] + self.attr_offsets[attr_id]

    def displacement_code(self, proposal_box, object_box):
        t = encode_regression(proposal_box, object_box)
        s = DISPLACEMENT_SATURATION
        return self.disp_matrix @ (s * np.tanh(t / s))

    def proposal_feature(self, box, objects, rng):
        best, best_iou = None, 0.0
        for obj in objects:
            v = iou(box, obj.box)
            if v > best_iou:
                best, best_iou = obj, v
        alpha = np.clip((best_iou - FEATURE_BLEND_LOW)
                        / (FEATURE_BLEND_HIGH - FEATURE_BLEND_LOW), 0.0, 1.0)
        feat = (1.0 - alpha) * self.background
        if best is not None and alpha > 0.0:
            attr_id = _ATTRIBUTES.index(best.attribute)
            feat = feat + alpha * (self.object_feature(best.class_id, attr_id)
                                   + self.displacement_code(box, best.box))
        feat = feat + rng.normal(0.0, self.noise_sigma, len(self.background))
        probs = self._source_probs(best, best_iou, alpha, rng)
        return feat, probs, best, best_iou

    def _source_probs(self, best, best_iou, alpha, rng):
        logits = rng.normal(0.0, 0.3, len(self.prototypes))
        if best is not None and best_iou >= 0.3:
            logits[best.class_id] += SOURCE_PROB_PEAK * alpha
        e = np.exp(logits - logits.max())
        return e / e.sum()


# ---------------------------------------------------------------------------
# relation geometry

def relation_holds(relation, source_box, target_box, width, height):
    """Whether the relation word is geometrically true of (source, target).

    Directional words describe where the target sits relative to the source
    (image coordinates, y grows downward); 'holds' means the target center
    lies inside the source box; 'near' bounds the center distance.
    """
    sx, sy = source_box.center
    tx, ty = target_box.center
    if relation == "left-of":
        return tx < sx
    if relation == "right-of":
        return tx > sx
    if relation == "above":
        return ty < sy
    if relation == "below":
        return ty > sy
    if relation == "holds":
        return (source_box.x_min < tx < source_box.x_max
                and source_box.y_min < ty < source_box.y_max)
    if relation == "near":
        return math.hypot(tx - sx, ty - sy) <= 0.3 * max(width, height)
    raise DatasetError(f"unknown relation {relation!r}")


def _place_target(source, relation, size_scale, config, rng):
    W, H = config.image_width, config.image_height
    sw, sh = source.width, source.height
    sx, sy = source.center
    if relation == "holds":
        tw = sw * rng.uniform(0.3, 0.45)
        th = sh * rng.uniform(0.3, 0.45)
        cx = sx + rng.uniform(-0.1, 0.1) * sw
        cy = sy + rng.uniform(-0.1, 0.1) * sh
    else:
        tw = sw * rng.uniform(0.85, 1.15) * size_scale
        th = sh * rng.uniform(0.85, 1.15) * size_scale
        cx, cy = sx, sy
        if relation in ("left-of", "right-of"):
            gap = rng.uniform(0.05, 0.2) * sw
            dx = 0.5 * sw + 0.5 * tw + gap
            cx = sx - dx if relation == "left-of" else sx + dx
            cy = sy + rng.uniform(-0.15, 0.15) * sh
        elif relation in ("above", "below"):
            gap = rng.uniform(0.05, 0.2) * sh
            dy = 0.5 * sh + 0.5 * th + gap
            cy = sy - dy if relation == "above" else sy + dy
            cx = sx + rng.uniform(-0.15, 0.15) * sw
        else:  # near
            d = (0.5 * (sw + tw)) * rng.uniform(1.1, 1.5)
            theta = rng.uniform(0, 2 * np.pi)
            cx, cy = sx + d * np.cos(theta), sy + d * np.sin(theta)
    box = _box_from_center(cx, cy, tw, th)
    if box.x_min < 0 or box.y_min < 0 or box.x_max > W or box.y_max > H:
        return None
    if not relation_holds(relation, source, box, W, H):
        return None
    return box


def _box_from_center(cx, cy, w, h):
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def _class_size_factor(class_id, n_classes):
    # classes occupy distinct size bands so box size carries class signal
    if n_classes == 1:
        return 1.0
    return 0.7 + 0.6 * class_id / (n_classes - 1)


# ---------------------------------------------------------------------------
# proposal jitter

def _jittered_box(gt, rng, shift, scale_lo, scale_hi, image_size):
    W, H = image_size
    w = gt.width * rng.uniform(scale_lo, scale_hi)
    h = gt.height * rng.uniform(scale_lo, scale_hi)
    cx = gt.center[0] + rng.uniform(-shift, shift) * gt.width
    cy = gt.center[1] + rng.uniform(-shift, shift) * gt.height
    box = _box_from_center(cx, cy, w, h)
    return Box(max(box.x_min, 0.0), max(box.y_min, 0.0),
               min(box.x_max, W), min(box.y_max, H))


def _sample_box_with_iou(gt, rng, image_size, lo, hi, shift, scale_lo, scale_hi,
                         max_tries=80):
    for _ in range(max_tries):
        box = _jittered_box(gt, rng, shift, scale_lo, scale_hi, image_size)
        v = iou(box, gt)
        if lo < v <= hi:
            return box
    raise DatasetError(f"could not jitter a box with IoU in ({lo}, {hi}]")


def _sample_decoy(objects, rng, config, max_tries=200):
    W, H = config.image_width, config.image_height
    for _ in range(max_tries):
        w = rng.uniform(0.08, 0.35) * W
        h = rng.uniform(0.08, 0.35) * H
        x0 = rng.uniform(0, W - w)
        y0 = rng.uniform(0, H - h)
        box = Box(x0, y0, x0 + w, y0 + h)
        if all(iou(box, o.box) < 0.25 for o in objects):
            return box
    raise DatasetError("image too crowded to place decoy proposals")


# ---------------------------------------------------------------------------
# scene generation

def _place_objects(config, classes, attrs, rng):
    """Chain-place objects so consecutive pairs realize a sampled relation."""
    W, H = config.image_width, config.image_height
    rels = []
    for _ in range(300):
        objects = []
        ok = True
        for i, (cid, aid) in enumerate(zip(classes, attrs)):
            factor = _class_size_factor(cid, config.n_object_classes)
            if i == 0:
                w = factor * rng.uniform(0.14, 0.28) * W
                h = factor * rng.uniform(0.14, 0.28) * H
                cx = rng.uniform(0.5 * w, W - 0.5 * w)
                cy = rng.uniform(0.5 * h, H - 0.5 * h)
                box = _box_from_center(cx, cy, w, h)
            else:
                rel = config.relation_vocab[rng.integers(len(config.relation_vocab))]
                prev_factor = _class_size_factor(objects[-1].class_id,
                                                 config.n_object_classes)
                box = _place_target(objects[-1].box, rel, factor / prev_factor,
                                    config, rng)
                if box is None:
                    ok = False
                    break
                bad_overlap = any(
                    iou(box, o.box) > 0.3 and not (rel == "holds" and o is objects[-1])
                    for o in objects)
                if bad_overlap:
                    ok = False
                    break
                rels.append((i - 1, rel, i))
            objects.append(SceneObject(box, int(cid), _CLASS_NOUNS[cid], _ATTRIBUTES[aid]))
        if ok:
            return objects, rels
        rels = []
    raise DatasetError("could not place objects; config is infeasible")


def _generate_scene(config, features, scene_index):
    rng = np.random.default_rng([config.seed, scene_index])
    W, H = config.image_width, config.image_height
    n_obj = config.objects_per_scene

    classes = rng.choice(config.n_object_classes, size=n_obj,
                         replace=n_obj > config.n_object_classes)
    attrs = rng.integers(0, config.n_attributes, size=n_obj)
    objects, rel_pairs = _place_objects(config, classes, attrs, rng)

    queries = [Query(class_phrase(o.class_id, o.attribute), o.box, o.class_id, i)
               for i, o in enumerate(objects)]
    relations = [RelationRef(s, rel, t) for s, rel, t in rel_pairs]

    clauses = [f"a {queries[s].phrase} {rel} a {queries[t].phrase}"
               for s, rel, t in rel_pairs]
    caption = " and ".join(clauses) if clauses else " ".join(q.phrase for q in queries)

    dropped = [config.hard_fraction > 0 and rng.random() < config.hard_fraction
               for _ in objects]

    boxes = []
    size = (W, H)
    for i, o in enumerate(objects):
        if not dropped[i]:
            boxes.append(_sample_box_with_iou(o.box, rng, size, 0.6, 1.0, 0.06, 0.94, 1.07))
            boxes.append(_sample_box_with_iou(o.box, rng, size, 0.5, 0.7, 0.33, 0.8, 1.25))
        boxes.append(_sample_box_with_iou(o.box, rng, size, 0.25, 0.43, 0.4, 0.8, 1.3))
    while len(boxes) < config.proposals_per_scene:
        boxes.append(_sample_decoy(objects, rng, config))
    order = rng.permutation(len(boxes))

    proposals = []
    for idx in order:
        feat, probs, _, _ = features.proposal_feature(boxes[idx], objects, rng)
        proposals.append(Proposal(boxes[idx], feat,
                                  probs if config.emit_source_probs else None))

    return Scene(f"scene_{scene_index:05d}", W, H, objects, proposals,
                 queries, caption, relations)


def generate(config):
    """Build a deterministic train/test dataset from the config seed."""
    features = FeatureModel(config)
    scenes = [_generate_scene(config, features, i) for i in range(config.n_scenes)]
    n_train = int(round(config.train_fraction * config.n_scenes))
    class_names = list(_CLASS_NOUNS[:config.n_object_classes])

    vocab_tokens = set(class_names) | {m for _, m in _CLASS_SPECS[:config.n_object_classes]}
    vocab_tokens |= set(_ATTRIBUTES[:config.n_attributes]) | {"a", "and"}
    for rel in config.relation_vocab:
        vocab_tokens.update(rel.replace("-", " ").split())
    word_vectors = WordVectorTable.from_embedder(sorted(vocab_tokens),
                                                 dim=config.word_vector_dim)
    return Dataset(train=scenes[:n_train], test=scenes[n_train:],
                   source_classes=class_names, word_vectors=word_vectors,
                   noun_lexicon=frozenset(class_names))


# ---------------------------------------------------------------------------
# JSON serialization

def _box_to_list(b):
    return [b.x_min, b.y_min, b.x_max, b.y_max]


def scene_to_dict(scene):
    d = {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "objects": [{"box": _box_to_list(o.box), "class_id": o.class_id,
                     "class_name": o.class_name, "attribute": o.attribute}
                    for o in scene.objects],
        "proposals": [],
        "queries": [{"phrase": q.phrase, "box": _box_to_list(q.box),
                     "class_label": q.class_label, "object_index": q.object_index}
                    for q in scene.queries],
        "caption": scene.caption,
        "relations": [{"source_query": r.source_query, "relation": r.relation,
                       "target_query": r.target_query} for r in scene.relations],
    }
    for p in scene.proposals:
        pd = {"box": _box_to_list(p.box), "feature": p.feature.tolist()}
        if p.source_class_probs is not None:
            pd["source_class_probs"] = p.source_class_probs.tolist()
        d["proposals"].append(pd)
    return d


def scene_from_dict(d, where="scene"):
    try:
        objects = [SceneObject(Box.from_list(o["box"]), int(o["class_id"]),
                               o["class_name"], o["attribute"])
                   for o in d["objects"]]
        proposals = []
        for p in d["proposals"]:
            probs = p.get("source_class_probs")
            proposals.append(Proposal(
                Box.from_list(p["box"]),
                np.asarray(p["feature"], dtype=np.float64),
                None if probs is None else np.asarray(probs, dtype=np.float64)))
        queries = [Query(q["phrase"], Box.from_list(q["box"]),
                         int(q["class_label"]), int(q["object_index"]))
                   for q in d["queries"]]
        relations = [RelationRef(int(r["source_query"]), r["relation"],
                                 int(r["target_query"]))
                     for r in d.get("relations", [])]
        return Scene(d["id"], int(d["width"]), int(d["height"]), objects,
                     proposals, queries, d.get("caption", ""), relations)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed scene at {where}: {e}") from e


def _split_to_dict(scenes, source_classes):
    return {"schema_version": SCHEMA_VERSION,
            "source_classes": list(source_classes),
            "scenes": [scene_to_dict(s) for s in scenes]}


def _split_from_dict(d, path):
    if not isinstance(d, dict) or "schema_version" not in d:
        raise DatasetError(f"{path}: missing schema_version")
    if d["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema_version {d['schema_version']!r}")
    scenes = [scene_from_dict(s, where=f"{path} scenes[{i}]")
              for i, s in enumerate(d.get("scenes", []))]
    return scenes, d.get("source_classes", [])


def write_dataset(dataset, out_dir):
    """Write train.json/test.json plus word vectors and the noun lexicon."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    for name, scenes in (("train", dataset.train), ("test", dataset.test)):
        with open(os.path.join(out_dir, f"{name}.json"), "w", encoding="utf-8") as f:
            json.dump(_split_to_dict(scenes, dataset.source_classes), f,
                      separators=(",", ":"))
    if dataset.word_vectors is not None:
        dataset.word_vectors.save(os.path.join(out_dir, "word_vectors.json"))
    if dataset.noun_lexicon is not None:
        from .text import save_noun_lexicon
        save_noun_lexicon(dataset.noun_lexicon, os.path.join(out_dir, "nouns.txt"))


def read_dataset(in_dir):
    import os
    splits = {}
    source_classes = []
    for name in ("train", "test"):
        path = os.path.join(in_dir, f"{name}.json")
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise DatasetError(f"missing dataset file {path}")
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: invalid JSON at line {e.lineno}, col {e.colno}")
        splits[name], source_classes = _split_from_dict(d, path)
    wv_path = os.path.join(in_dir, "word_vectors.json")
    word_vectors = WordVectorTable.load(wv_path) if os.path.exists(wv_path) else None
    lex_path = os.path.join(in_dir, "nouns.txt")
    noun_lexicon = None
    if os.path.exists(lex_path):
        from .text import load_noun_lexicon
        noun_lexicon = load_noun_lexicon(lex_path)
    return Dataset(train=splits["train"], test=splits["test"],
                   source_classes=source_classes, word_vectors=word_vectors,
                   noun_lexicon=noun_lexicon)
