"""Pixel-wise softmax cross-entropy over seed masks, online pseudo-label
generation filtered by image-level labels, the completion loss, and the
four-term overall training loss.

Masks hold class ids 0..C with 255 = IGNORE; class 0 is background and is
always an admissible pseudo-label.
"""

import numpy as np

IGNORE = 255

__all__ = ["IGNORE", "softmax_pixels", "seeded_ce", "online_pseudo_label",
           "completion_loss", "overall_loss"]


def softmax_pixels(logits):
    """Row-stable softmax over the last (class) axis of (H,W,K) logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_ce(logits, mask):
    h, w, k = logits.shape
    if mask.shape != (h, w):
        raise ValueError(f"shape mismatch: logits {logits.shape} vs mask {mask.shape}")
    valid = mask != IGNORE
    labels = mask[valid].astype(np.int64)
    if labels.size and labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for {k} classes")
    grad = np.zeros_like(logits)
    n = int(valid.sum())
    if n == 0:
        return 0.0, grad
    z = logits[valid]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), labels] -= 1
    grad[valid] = p / n
    return loss, grad


def seeded_ce(logits, seeds):
    """Cross-entropy averaged over the non-IGNORE seed pixels; zero loss and
    zero gradient when every pixel is ignored."""
    return _masked_ce(logits, seeds)


def online_pseudo_label(logits, image_labels):
    """Hard per-pixel argmax labels, kept only where the winning class is
    background or one of the image-level labels; everything else IGNORE.
    Argmax ties resolve to the lowest class index. The result is a constant
    target: no gradient flows through it."""
    k = logits.shape[-1]
    pred = np.argmax(logits, axis=-1)
    allowed = np.zeros(k, dtype=bool)
    allowed[0] = True
    for c in image_labels:
        if not 0 <= c < k:
            raise ValueError(f"image label {c} out of range for {k} classes")
        allowed[c] = True
    mask = np.where(allowed[pred], pred, IGNORE).astype(np.uint8)
    return mask


def completion_loss(logits, pseudo):
    """Cross-entropy against an online pseudo mask; same functional form as
    seeded_ce, averaged over the pseudo mask's non-IGNORE pixels."""
    return _masked_ce(logits, pseudo)


def overall_loss(feat_cross, feat_self, classifier, seeds, image_labels,
                 enable_cp=True):
    """Total training loss for one query image: seed cross-entropy on both
    branch outputs plus (optionally) the completion loss on both, each
    completion term using a pseudo mask from its own branch's logits."""
    logits_c = _apply_classifier(feat_cross, classifier)
    logits_s = _apply_classifier(feat_self, classifier)
    total = seeded_ce(logits_c, seeds)[0] + seeded_ce(logits_s, seeds)[0]
    if enable_cp:
        total += completion_loss(
            logits_c, online_pseudo_label(logits_c, image_labels))[0]
        total += completion_loss(
            logits_s, online_pseudo_label(logits_s, image_labels))[0]
    return total


def _apply_classifier(feat, classifier):
    h, w, d = feat.shape
    return (feat.reshape(h * w, d) @ classifier).reshape(h, w, -1)
