"""Toy one-stage anchor detector: backbone with named taps, SSD-style heads,
anchor matching, detection loss, decoding with NMS, and VOC mAP."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, Module

BOX_VARIANCES = (0.1, 0.2)
CHECKPOINT_MAGIC = b"I3NT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1, 2, 2)
    anchors_per_cell: int = 1
    anchor_scale: float = 3.0
    zero_heads: bool = False
    head_std: float = 0.01

    # tap name -> index of the block it follows (0-based)
    taps = {"low": 1, "g1": 2, "g2": 4, "lA": 4, "lB": 5}
    layers = ("lA", "lB")


@dataclass
class AnchorGrid:
    """Per-layer anchors as (cx, cy, w, h) rows in (y, x, a) order."""

    layer_shapes: dict[str, tuple[int, int]]
    anchors_per_cell: int = 1
    scale: float = 3.0
    per_layer: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.per_layer = {}
        for name, (h, w) in self.layer_shapes.items():
            ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
            rows = []
            for a in range(self.anchors_per_cell):
                size_w = self.scale / w * (1.0 + 0.5 * a)
                size_h = self.scale / h * (1.0 + 0.5 * a)
                rows.append(np.stack([xs, ys, np.full_like(xs, size_w), np.full_like(ys, size_h)], axis=-1))
            self.per_layer[name] = np.stack(rows, axis=2).reshape(-1, 4)

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.per_layer[k] for k in self.layer_shapes])

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.per_layer.items()}


@dataclass
class HeadPrediction:
    logits: Tensor  # (N, M, K+1)
    offsets: Tensor  # (N, M, 4)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardOutput:
    taps: dict[str, Tensor]
    heads: dict[str, HeadPrediction]

    def combined(self) -> HeadPrediction:
        names = list(self.heads)
        return HeadPrediction(ad.concat([self.heads[n].logits for n in names], axis=1),
                              ad.concat([self.heads[n].offsets for n in names], axis=1))


class DetectionModel(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or ModelConfig()
        object.__setattr__(self, "config", cfg)
        rng = np.random.default_rng(seed)
        chans = (3,) + tuple(cfg.widths)
        for i, (cin, cout, s) in enumerate(zip(chans[:-1], chans[1:], cfg.strides)):
            setattr(self, f"block{i + 1}", Conv2d(cin, cout, 3, rng, stride=s, padding=1))
        a = cfg.anchors_per_cell
        k1 = cfg.num_classes + 1
        for name in cfg.layers:
            c = cfg.widths[cfg.taps[name]]
            setattr(self, f"cls_{name}", Conv2d(c, a * k1, 3, rng, padding=1, zero_init=cfg.zero_heads, std=cfg.head_std))
            setattr(self, f"box_{name}", Conv2d(c, a * 4, 3, rng, padding=1, zero_init=cfg.zero_heads, std=cfg.head_std))
        object.__setattr__(self, "anchors", AnchorGrid(self.tap_shapes(with_channels=False, layers_only=True),
                                                       a, cfg.anchor_scale))

    # ------------------------------------------------------------- geometry
    def tap_shapes(self, with_channels: bool = True, layers_only: bool = False) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        sizes = []
        s = cfg.image_size
        for stride in cfg.strides:
            s = (s + 2 - 3) // stride + 1
            sizes.append(s)
        names = cfg.layers if layers_only else tuple(cfg.taps)
        out = {}
        for name in names:
            i = cfg.taps[name]
            out[name] = (cfg.widths[i], sizes[i], sizes[i]) if with_channels else (sizes[i], sizes[i])
        return out

    def backbone_prefixes(self, upto: str) -> list[str]:
        """Parameter-name prefixes of the blocks feeding tap ``upto``."""
        return [f"block{i + 1}." for i in range(self.config.taps[upto] + 1)]

    # -------------------------------------------------------------- forward
    def forward_with_taps(self, image) -> ForwardOutput:
        cfg = self.config
        x = ad.as_tensor(image)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected images of shape (N, 3, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        feats = []
        for i in range(len(cfg.widths)):
            x = ad.relu(getattr(self, f"block{i + 1}")(x))
            feats.append(x)
        taps = {name: feats[i] for name, i in cfg.taps.items()}
        heads = {name: self.head(name, taps[name]) for name in cfg.layers}
        return ForwardOutput(taps, heads)

    def head(self, layer: str, feat: Tensor) -> HeadPrediction:
        k1 = self.config.num_classes + 1
        n = feat.shape[0]
        cls = getattr(self, f"cls_{layer}")(feat)
        box = getattr(self, f"box_{layer}")(feat)
        logits = ad.reshape(ad.transpose(cls, (0, 2, 3, 1)), (n, -1, k1))
        offsets = ad.reshape(ad.transpose(box, (0, 2, 3, 1)), (n, -1, 4))
        return HeadPrediction(logits, offsets)

    def class_logits_for_vector(self, layer: str, vec: Tensor) -> Tensor:
        """Apply ``layer``'s class head to a single feature vector as a 1x1 map."""
        c = vec.shape[-1]
        logits = getattr(self, f"cls_{layer}")(ad.reshape(vec, (1, c, 1, 1)))
        return ad.reshape(logits, (-1,))[: self.config.num_classes + 1]


# ------------------------------------------------------------------- boxes
def _check_box(b) -> None:
    if b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError(f"box {tuple(b)} has nonpositive width or height")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-format boxes (x0, y0, x1, y1)."""
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-format boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1)


def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """SSD offset encoding of center-format ``gt`` relative to ``anchors``."""
    v0, v1 = BOX_VARIANCES
    return np.concatenate([(gt[:, :2] - anchors[:, :2]) / anchors[:, 2:] / v0,
                           np.log(gt[:, 2:] / anchors[:, 2:]) / v1], axis=1)


def decode(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    v0, v1 = BOX_VARIANCES
    centers = anchors[:, :2] + offsets[..., :2] * v0 * anchors[:, 2:]
    sizes = anchors[:, 2:] * np.exp(np.clip(offsets[..., 2:] * v1, -10, 10))
    return np.concatenate([centers, sizes], axis=-1)


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, gt_labels: Sequence[int],
                  threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Assign anchors to ground truth.

    Returns ``(labels, offsets)`` where ``labels`` is 0 for background and
    ``class_id + 1`` otherwise. Boxes are center format.
    """
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int64)
    offsets = np.zeros((m, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return labels, offsets
    overlaps = iou_matrix(center_to_corners(anchors), center_to_corners(gt_boxes))
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(m), best_gt]
    for j in range(len(gt_boxes)):
        a = int(overlaps[:, j].argmax())
        best_gt[a] = j
        best_iou[a] = 2.0
    pos = best_iou >= threshold
    gl = np.asarray(gt_labels, dtype=np.int64)
    labels[pos] = gl[best_gt[pos]] + 1
    offsets[pos] = encode(gt_boxes[best_gt[pos]], anchors[pos])
    return labels, offsets


def match_batch(anchors: np.ndarray, annotations) -> tuple[np.ndarray, np.ndarray]:
    labs, offs = [], []
    for ann in annotations:
        boxes = np.array([a.box for a in ann]).reshape(-1, 4)
        l, o = match_anchors(anchors, boxes, [a.class_id for a in ann])
        labs.append(l)
        offs.append(o)
    return np.stack(labs), np.stack(offs)


def detection_loss(logits: Tensor, offsets: Tensor, labels: np.ndarray, box_targets: np.ndarray,
                   neg_ratio: int = 3) -> Tensor:
    """Softmax cross-entropy with hard-negative mining plus smooth-L1 on positives.

    Each image keeps its ``neg_ratio * max(1, positives)`` highest-loss
    negatives. The sum is divided by the batch's positive count (at least 1).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, m, k1 = logits.shape
    if labels.shape != (n, m):
        raise ShapeError(f"labels shape {labels.shape} != {(n, m)}")
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros((n, m, k1))
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    ce = -ad.tsum(logp * onehot, axis=-1)  # (N, M)
    pos = labels > 0
    select = pos.copy()
    for i in range(n):
        neg_idx = np.flatnonzero(~pos[i])
        k = min(neg_ratio * max(1, int(pos[i].sum())), len(neg_idx))
        if k:
            order = np.argsort(-ce.data[i, neg_idx], kind="stable")
            select[i, neg_idx[order[:k]]] = True
    cls_loss = ad.tsum(ce * select.astype(np.float64))
    resid = offsets - np.asarray(box_targets, dtype=np.float64)
    loc_loss = ad.tsum(ad.smooth_l1(resid) * pos[..., None].astype(np.float64))
    return (cls_loss + loc_loss) * (1.0 / max(1, int(pos.sum())))


# ---------------------------------------------------------------- decoding
@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # corners


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order])[0]
        order = [j for j, v in zip(order, ious) if v <= iou_thresh]
    return keep


def decode_and_nms(probs: np.ndarray, offsets: np.ndarray, anchors: np.ndarray,
                   conf_thresh: float = 0.05, nms_iou: float = 0.45, top_k: int = 50) -> list[Detection]:
    """Per-class greedy NMS over one image's anchor predictions."""
    if not (0 < conf_thresh < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    boxes = np.clip(center_to_corners(decode(np.asarray(offsets), anchors)), 0.0, 1.0)
    dets: list[Detection] = []
    for c in range(1, probs.shape[-1]):
        idx = np.flatnonzero(probs[:, c] > conf_thresh)
        idx = idx[(boxes[idx, 2] > boxes[idx, 0]) & (boxes[idx, 3] > boxes[idx, 1])]
        if len(idx) == 0:
            continue
        keep = nms(boxes[idx], probs[idx, c], nms_iou)
        dets.extend(Detection(c - 1, float(probs[idx[k], c]), tuple(float(v) for v in boxes[idx[k]])) for k in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[:top_k]


# -------------------------------------------------------------------- mAP
def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_map(detections: Sequence[Sequence[Detection]], ground_truth, num_classes: int,
                 iou_thresh: float = 0.5) -> dict:
    """VOC-style per-class AP and their mean over classes with ground truth.

    ``ground_truth`` holds per-image lists of :class:`~i3net.synth.Annotation`.
    """
    aps: dict[int, float] = {}
    for c in range(num_classes):
        gts = {}
        npos = 0
        for i, ann in enumerate(ground_truth):
            boxes = [a.corners() for a in ann if a.class_id == c]
            gts[i] = (np.array(boxes).reshape(-1, 4), np.zeros(len(boxes), dtype=bool))
            npos += len(boxes)
        cands = [(d.score, i, d.box) for i, dets in enumerate(detections) for d in dets if d.class_id == c]
        if npos == 0:
            continue
        order = sorted(range(len(cands)), key=lambda j: -cands[j][0])
        tp = np.zeros(len(order))
        fp = np.zeros(len(order))
        for r, j in enumerate(order):
            _, img, box = cands[j]
            gboxes, used = gts[img]
            if len(gboxes):
                ov = iou_matrix(np.array([box]), gboxes)[0]
                best = int(ov.argmax())
                if ov[best] >= iou_thresh and not used[best]:
                    used[best] = True
                    tp[r] = 1
                    continue
            fp[r] = 1
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        recall = ctp / npos
        precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
        aps[c] = voc_ap(recall, precision)
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    return {"ap": aps, "map": m}


def predict(model: DetectionModel, images: np.ndarray, batch_size: int = 50,
            conf_thresh: float = 0.05, nms_iou: float = 0.45) -> list[list[Detection]]:
    anchors = model.anchors.all
    out: list[list[Detection]] = []
    for s in range(0, len(images), batch_size):
        fo = model.forward_with_taps(Tensor(images[s:s + batch_size]))
        comb = fo.combined()
        probs = comb.probs
        for i in range(probs.shape[0]):
            out.append(decode_and_nms(probs[i], comb.offsets.data[i], anchors, conf_thresh, nms_iou))
    return out


# -------------------------------------------------------------- checkpoint
class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    """Write named float32 arrays after the ``I3NT`` magic and a u32 version."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", version)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected_version: int = CHECKPOINT_VERSION) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != expected_version:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {expected_version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated array {name!r} at byte offset {pos}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record at byte offset {pos}: {exc}") from None
    return out
