"""Initial seed generation: a global-average-pooled classifier trained with
multi-label sigmoid loss, per-pixel score maps from its final layer,
foreground thresholding at 0.3 with background from a colour-distance
saliency proxy at 0.06, plus the ground-truth substitution harness and the
retraining relabeler.
"""

from dataclasses import dataclass

import numpy as np

from .losses import IGNORE
from .model import encoder_forward, encoder_backward, predict, \
    zero_model_grads, ModelParams, ENCODER_CHANNELS
from .affinity import init_affinity_params
from .tensor import nearest_resize

__all__ = ["CamClassifier", "train_cam_classifier", "extract_cam",
           "cam_to_seeds", "median_color", "saliency_map",
           "substitute_seeds", "relabel_for_retraining",
           "cam_multilabel_accuracy", "seed_quality"]


@dataclass
class CamClassifier:
    """Encoder weights plus the per-class scoring kernel applied after
    global average pooling during training and per pixel afterwards."""
    enc: ModelParams        # only enc1..enc3 are used
    cls_w: np.ndarray       # (D, C)
    n_classes: int


def _init_cam(rng, n_classes, dtype=np.float32):
    c = ENCODER_CHANNELS

    def he(k, cin, cout):
        std = np.sqrt(2.0 / (k * k * cin))
        return rng.normal(0.0, std, (k, k, cin, cout)).astype(dtype)

    enc = ModelParams(enc1=he(3, c[0], c[1]), enc2=he(3, c[1], c[2]),
                      enc3=he(3, c[2], c[3]),
                      cls=np.zeros((c[3], 1), dtype=dtype),
                      affinity=init_affinity_params(rng, c[3], dtype=dtype))
    cls_w = rng.normal(0.0, 0.01, (c[3], n_classes)).astype(dtype)
    return CamClassifier(enc=enc, cls_w=cls_w, n_classes=n_classes)


def train_cam_classifier(images, epochs=20, lr=1e-3, rng_seed=0, batch=8,
                         momentum=0.9):
    """Multi-label sigmoid-loss training of the scoring head over
    global-average-pooled encoder features."""
    n_classes = max(max(im.labels, default=0) for im in images)
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 11]))
    cam = _init_cam(rng, n_classes)
    vel_enc = zero_model_grads(cam.enc)
    vel_cls = np.zeros_like(cam.cls_w)
    n = len(images)
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch):
            idx = order[b:b + batch]
            genc = zero_model_grads(cam.enc)
            gcls = np.zeros_like(cam.cls_w)
            for i in idx:
                im = images[i]
                y = np.zeros(n_classes, dtype=np.float32)
                for c in im.labels:
                    y[c - 1] = 1.0
                feat, cache = encoder_forward(cam.enc, im.pixels)
                pooled = feat.mean(axis=(0, 1))
                z = pooled @ cam.cls_w
                # stable sigmoid BCE: mean_c softplus(z) - y*z
                loss = float(np.mean(np.maximum(z, 0) - y * z +
                                     np.log1p(np.exp(-np.abs(z)))))
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite classifier loss on image {im.id}: z={z}")
                dz = (1.0 / (1.0 + np.exp(-z)) - y) / n_classes
                gcls += np.outer(pooled, dz)
                gpooled = cam.cls_w @ dz
                h, w = feat.shape[:2]
                gfeat = np.broadcast_to(gpooled / (h * w),
                                        feat.shape).astype(feat.dtype)
                encoder_backward(gfeat, cache, cam.enc, genc)
            bn = len(idx)
            for grp, vel, par in ((genc.enc1, vel_enc.enc1, cam.enc.enc1),
                                  (genc.enc2, vel_enc.enc2, cam.enc.enc2),
                                  (genc.enc3, vel_enc.enc3, cam.enc.enc3),
                                  (gcls, vel_cls, cam.cls_w)):
                vel *= momentum
                vel += grp / bn
                par -= (lr * vel).astype(par.dtype)
    return cam


def extract_cam(cam, image):
    """Per-class score maps from applying the scoring kernel at every pixel,
    min-max normalised into [0,1] per class (constant maps become zero) and
    nearest-resized to the image resolution."""
    feat, _ = encoder_forward(cam.enc, image)
    h, w, d = feat.shape
    scores = (feat.reshape(h * w, d) @ cam.cls_w).reshape(h, w, -1)
    lo = scores.min(axis=(0, 1), keepdims=True)
    hi = scores.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    norm = np.where(span > 0, (scores - lo) / np.where(span > 0, span, 1), 0.0)
    ih, iw = image.shape[:2]
    if (h, w) != (ih, iw):
        norm = nearest_resize(norm, ih, iw)
    return norm.astype(np.float32)


def median_color(images):
    """Channel-wise median over every pixel of the given images; with
    mostly-background low-saturation scenes this sits on the background."""
    stack = np.concatenate([im.pixels.reshape(-1, 3) for im in images])
    return np.median(stack, axis=0)


def saliency_map(image, reference_color):
    """Distance from the family background colour, min-max scaled to [0,1]
    per image (constant maps become zero)."""
    dist = np.linalg.norm(image - reference_color, axis=-1)
    lo, hi = dist.min(), dist.max()
    if hi <= lo:
        return np.zeros_like(dist, dtype=np.float32)
    return ((dist - lo) / (hi - lo)).astype(np.float32)


def cam_to_seeds(cam_scores, saliency, image_labels, fg_thresh=0.3,
                 bg_thresh=0.06):
    """Threshold normalised score maps into a seed mask.

    A pixel takes class c when c is in the image's labels, exceeds
    fg_thresh, and is uniquely maximal among the exceeding classes (two
    exceeding classes within 1e-6 of the top is a conflict -> IGNORE).
    Pixels with no exceeding class become background when saliency is below
    bg_thresh, IGNORE otherwise.
    """
    for t, name in ((fg_thresh, "fg_thresh"), (bg_thresh, "bg_thresh")):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"{name} must be in [0,1], got {t}")
    h, w, n_classes = cam_scores.shape
    present = sorted(c for c in image_labels if 1 <= c <= n_classes)
    mask = np.full((h, w), IGNORE, dtype=np.uint8)
    if present:
        sub = cam_scores[:, :, [c - 1 for c in present]]
        exceeding = sub > fg_thresh
        sub_hit = np.where(exceeding, sub, -np.inf)
        top = sub_hit.max(axis=2)
        any_hit = exceeding.any(axis=2)
        n_top = (sub_hit >= top[:, :, None] - 1e-6).sum(axis=2)
        winner = np.argmax(sub_hit, axis=2)
        class_of = np.array(present, dtype=np.uint8)[winner]
        fg = any_hit & (n_top == 1)
        mask[fg] = class_of[fg]
    else:
        any_hit = np.zeros((h, w), dtype=bool)
    bg = ~any_hit & (saliency < bg_thresh)
    mask[bg] = 0
    return mask


def substitute_seeds(seeds, ground_truth, ratio, rng_seed):
    """Replace floor(ratio*n) uniformly chosen seed masks with the full
    ground-truth masks; the rest pass through unchanged."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0,1], got {ratio}")
    if len(seeds) != len(ground_truth):
        raise ValueError(
            f"{len(seeds)} seeds vs {len(ground_truth)} ground-truth masks")
    n = len(seeds)
    k = int(np.floor(ratio * n))
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 13]))
    chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    return [ground_truth[i].copy() if i in chosen else seeds[i].copy()
            for i in range(n)]


def relabel_for_retraining(params, images):
    """Dense self-branch predictions as the next round's seed masks; no
    IGNORE pixels, no post-processing."""
    return [predict(params, im.pixels) for im in images]


def cam_multilabel_accuracy(cam, images):
    """Fraction of (image, class) decisions where sigmoid(score) > 0.5
    matches the image-level label."""
    hits = 0
    for im in images:
        feat, _ = encoder_forward(cam.enc, im.pixels)
        z = feat.mean(axis=(0, 1)) @ cam.cls_w
        pred = z > 0.0
        truth = np.zeros(cam.n_classes, dtype=bool)
        for c in im.labels:
            truth[c - 1] = True
        hits += int((pred == truth).sum())
    return hits / (len(images) * cam.n_classes)


def seed_quality(seed_masks, gt_masks):
    """Foreground precision/recall and coverage of the seeds against dense
    ground truth (diagnostic printout for the seeds command)."""
    tp = fp = fg_seeded = fg_total = labeled = total = 0
    for s, g in zip(seed_masks, gt_masks):
        fg = (s != IGNORE) & (s > 0)
        tp += int((s[fg] == g[fg]).sum())
        fp += int((s[fg] != g[fg]).sum())
        fg_seeded += int((fg & (g == s)).sum())
        fg_total += int((g > 0).sum())
        labeled += int((s != IGNORE).sum())
        total += s.size
    precision = tp / max(tp + fp, 1)
    recall = fg_seeded / max(fg_total, 1)
    return {"fg_precision": precision, "fg_recall": recall,
            "labeled_fraction": labeled / max(total, 1)}
