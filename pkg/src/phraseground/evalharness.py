"""Grounding metrics: accuracy at an IoU threshold, top-k retrieval
accuracy, the raw-proposal upper bound, and per-category breakdowns.

A prediction counts when its IoU with the ground truth strictly exceeds the
threshold (default 0.5)."""

import json

import numpy as np

from .geometry import iou

IOU_THRESHOLD = 0.5


def accuracy(predictions, gts, threshold=IOU_THRESHOLD):
    """Fraction of queries whose predicted box overlaps gt at IoU > threshold."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    if not predictions:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, gts)
               if p is not None and iou(p, g) > threshold)
    return hits / len(predictions)


def topk_accuracy(ranked, gts, k, threshold=IOU_THRESHOLD):
    """Fraction of queries where any of the first k ranked boxes hits gt."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) != len(gts):
        raise ValueError("rankings and ground truths differ in length")
    if not ranked:
        return 0.0
    hits = 0
    for boxes, gt in zip(ranked, gts):
        hits += any(iou(b, gt) > threshold for b in boxes[:k])
    return hits / len(ranked)


def upper_bound(proposal_sets, gts, threshold=IOU_THRESHOLD):
    """Fraction of queries for which some raw proposal covers the gt."""
    if len(proposal_sets) != len(gts):
        raise ValueError("proposal sets and ground truths differ in length")
    if not gts:
        return 0.0
    hits = 0
    for boxes, gt in zip(proposal_sets, gts):
        hits += any(iou(b, gt) > threshold for b in boxes)
    return hits / len(gts)


def per_category_report(ious, categories, threshold=IOU_THRESHOLD, n_categories=None):
    """Accuracy per category with support counts, plus the overall number.

    Categories with zero support report accuracy None and are excluded from
    the overall figure (which is the support-weighted mean of the rest).
    """
    if len(ious) != len(categories):
        raise ValueError("ious and categories differ in length")
    categories = [int(c) for c in categories]
    if n_categories is None:
        n_categories = max(categories) + 1 if categories else 0
    rows = []
    total_hits = total_support = 0
    for j in range(n_categories):
        member_ious = [v for v, c in zip(ious, categories) if c == j]
        support = len(member_ious)
        if support == 0:
            rows.append({"category": j, "support": 0, "accuracy": None})
            continue
        hits = sum(1 for v in member_ious if v > threshold)
        rows.append({"category": j, "support": support, "accuracy": hits / support})
        total_hits += hits
        total_support += support
    overall = total_hits / total_support if total_support else 0.0
    return {"per_category": rows, "overall": overall}


def report_text_table(report):
    """Aligned text rendering of a per-category report."""
    lines = [f"{'category':>8}  {'support':>7}  {'accuracy':>8}"]
    for row in report["per_category"]:
        acc = "n/a" if row["accuracy"] is None else f"{row['accuracy']:.4f}"
        lines.append(f"{row['category']:>8}  {row['support']:>7}  {acc:>8}")
    lines.append(f"{'overall':>8}  {sum(r['support'] for r in report['per_category']):>7}"
                 f"  {report['overall']:.4f}")
    return "\n".join(lines)


def results_json(per_query, report, topk, bound, extra=None):
    """Stable-ordered results document for golden-file comparisons."""
    doc = {
        "per_query": per_query,
        "per_category": report["per_category"],
        "overall": report["overall"],
        "topk": topk,
        "upper_bound": bound,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
