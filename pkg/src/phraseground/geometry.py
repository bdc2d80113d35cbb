"""Axis-aligned boxes, IoU, box-regression targets, and 5-D box encodings.

Boxes are half-open real rectangles in pixel units; IoU uses continuous
areas. Regression targets use the scale-invariant (tx, ty, tw, th)
center/log-size transform. Two 5-D encodings are provided: an absolute one
normalized by image size, and a pairwise relative one normalized by the
anchor box.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, xs):
        if len(xs) != 4:
            raise ValueError("box arrays must have exactly 4 entries")
        return cls(float(xs[0]), float(xs[1]), float(xs[2]), float(xs[3]))


def iou(a, b):
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU table, shape (len(a), len(b))."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def encode_regression(proposal, gt):
    """Targets (tx, ty, tw, th) that map the proposal box onto the gt box."""
    px, py = proposal.center
    gx, gy = gt.center
    return np.array([
        (gx - px) / proposal.width,
        (gy - py) / proposal.height,
        np.log(gt.width / proposal.width),
        np.log(gt.height / proposal.height),
    ])


def decode_regression(proposal, t, image_size=None):
    """Inverse of encode_regression; clips to the image when a size is given.

    Raises if clipping collapses the box to non-positive width or height.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (4,) or not np.all(np.isfinite(t)):
        raise ValueError("regression target must be 4 finite reals")
    px, py = proposal.center
    cx = px + t[0] * proposal.width
    cy = py + t[1] * proposal.height
    w = proposal.width * np.exp(t[2])
    h = proposal.height * np.exp(t[3])
    x_min, x_max = cx - 0.5 * w, cx + 0.5 * w
    y_min, y_max = cy - 0.5 * h, cy + 0.5 * h
    if image_size is not None:
        wim, him = image_size
        x_min, x_max = np.clip([x_min, x_max], 0.0, wim)
        y_min, y_max = np.clip([y_min, y_max], 0.0, him)
        if x_min >= x_max or y_min >= y_max:
            raise ValueError("decoded box collapsed after clipping to the image")
    return Box(x_min, y_min, x_max, y_max)


def spatial_config(box, width, height):
    """5-D absolute encoding: corners over image dims plus area fraction."""
    if width <= 0 or height <= 0:
        raise ValueError("image dims must be positive")
    return np.array([
        box.x_min / width,
        box.y_min / height,
        box.x_max / width,
        box.y_max / height,
        (box.width * box.height) / (width * height),
    ])


def relative_encoding(anchor, other):
    """5-D pairwise encoding of ``other`` against ``anchor``.

    Entries: center offsets over anchor dims, width/height differences over
    anchor dims, and the area ratio other/anchor. The offsets are
    anchor-minus-other, so a box to the right of the anchor gets a negative
    first entry.
    """
    ax, ay = anchor.center
    ox, oy = other.center
    return np.array([
        (ax - ox) / anchor.width,
        (ay - oy) / anchor.height,
        (anchor.width - other.width) / anchor.width,
        (anchor.height - other.height) / anchor.height,
        (other.width * other.height) / (anchor.width * anchor.height),
    ])
