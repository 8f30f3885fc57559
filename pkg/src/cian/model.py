"""Toy segmentation network and its trainer: a 3-layer stride-1 conv encoder
shared siamese-style between query and references, the affinity branches, a
per-pixel linear classifier, and SGD with a poly-decayed learning rate.

All gradients are hand-derived; loss_and_grads is the single code path used
both by the training loop and by the finite-difference checks.
"""

import csv
from dataclasses import dataclass, fields

import numpy as np

from .affinity import (AffinityParams, init_affinity_params,
                       zero_affinity_grads, forward_branches,
                       backward_branches, cian_branch)
from .losses import seeded_ce, completion_loss, online_pseudo_label
from .pairing import sample_pairs, format_pair_log
from .tensor import conv2d, conv2d_backward, relu, relu_backward, save_tensor, \
    load_tensor

__all__ = ["ModelParams", "TrainConfig", "init_model", "encoder_forward",
           "forward_step", "loss_and_grads", "train", "predict", "poly_lr",
           "hflip", "save_checkpoint", "load_checkpoint", "zero_model_grads",
           "param_groups"]

ENCODER_CHANNELS = (3, 16, 32, 32)


@dataclass
class ModelParams:
    enc1: np.ndarray        # (3,3,3,16)
    enc2: np.ndarray        # (3,3,16,32)
    enc3: np.ndarray        # (3,3,32,32)
    cls: np.ndarray         # (D, C+1)
    affinity: AffinityParams

    def astype(self, dtype):
        return ModelParams(self.enc1.astype(dtype), self.enc2.astype(dtype),
                           self.enc3.astype(dtype), self.cls.astype(dtype),
                           self.affinity.astype(dtype))


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    momentum: float = 0.9
    power: float = 0.9
    epochs: int = 30
    batch: int = 8
    crop: int = 64
    pair_mode: str = "common"
    enable_cp: bool = True
    enable_cross: bool = True
    n_refs: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.power <= 1:
            raise ValueError(f"power must be in (0,1], got {self.power}")


def init_model(rng, n_classes, dtype=np.float32):
    """Fan-in-scaled normal encoder, N(0, 0.01) for the classifier and the
    affinity projections, zero residual gate."""
    c = ENCODER_CHANNELS

    def he(k, cin, cout):
        std = np.sqrt(2.0 / (k * k * cin))
        return rng.normal(0.0, std, (k, k, cin, cout)).astype(dtype)

    return ModelParams(
        enc1=he(3, c[0], c[1]),
        enc2=he(3, c[1], c[2]),
        enc3=he(3, c[2], c[3]),
        cls=rng.normal(0.0, 0.01, (c[3], n_classes + 1)).astype(dtype),
        affinity=init_affinity_params(rng, c[3], dtype=dtype),
    )


def zero_model_grads(params):
    return ModelParams(np.zeros_like(params.enc1), np.zeros_like(params.enc2),
                       np.zeros_like(params.enc3), np.zeros_like(params.cls),
                       zero_affinity_grads(params.affinity))


def param_groups(params):
    """Flat (name, array) view over every learnable group; the order is the
    checkpoint and update order."""
    groups = [("enc1", params.enc1), ("enc2", params.enc2),
              ("enc3", params.enc3), ("cls", params.cls)]
    for f in fields(AffinityParams):
        groups.append((f"aff_{f.name}", getattr(params.affinity, f.name)))
    return groups


def _set_group(params, name, arr):
    if name.startswith("aff_"):
        setattr(params.affinity, name[4:], arr)
    else:
        setattr(params, name, arr)


def _add_grads(dst, src):
    for (_, d), (_, s) in zip(param_groups(dst), param_groups(src)):
        d += s


def _sgd_update(params, velocity, grads, lr, momentum, scale):
    for (_, p), (_, v), (_, g) in zip(param_groups(params),
                                      param_groups(velocity),
                                      param_groups(grads)):
        v *= momentum
        v += g * scale
        p -= (lr * v).astype(p.dtype)


def encoder_forward(params, img):
    """Three stride-1 pad-1 3x3 conv + ReLU stages; output keeps the input
    resolution."""
    z1 = conv2d(img, params.enc1, 1, 1)
    a1 = relu(z1)
    z2 = conv2d(a1, params.enc2, 1, 1)
    a2 = relu(z2)
    z3 = conv2d(a2, params.enc3, 1, 1)
    a3 = relu(z3)
    return a3, (img, z1, a1, z2, a2, z3)


def encoder_backward(grad_feat, cache, params, grads):
    img, z1, a1, z2, a2, z3 = cache
    g = relu_backward(grad_feat, z3)
    g, gk3 = conv2d_backward(g, a2, params.enc3, 1, 1)
    grads.enc3 += gk3
    g = relu_backward(g, z2)
    g, gk2 = conv2d_backward(g, a1, params.enc2, 1, 1)
    grads.enc2 += gk2
    g = relu_backward(g, z1)
    _, gk1 = conv2d_backward(g, img, params.enc1, 1, 1)
    grads.enc1 += gk1


def _classify(feat, cls_w):
    h, w, d = feat.shape
    return (feat.reshape(h * w, d) @ cls_w).reshape(h, w, -1)


def forward_step(params, query_img, reference_imgs):
    """Encode query and references with the shared encoder, run both
    affinity branches, classify per pixel."""
    feat_q, _ = encoder_forward(params, query_img)
    ref_feats = [encoder_forward(params, r)[0] for r in reference_imgs]
    out_cross, out_self, _ = forward_branches(feat_q, ref_feats,
                                              params.affinity)
    return (out_cross, out_self,
            _classify(out_cross, params.cls), _classify(out_self, params.cls))


def loss_and_grads(params, query_img, reference_imgs, seed_mask, image_labels,
                   enable_cp=True, frozen_pseudo=None):
    """Full per-image loss and gradients for every parameter group.

    frozen_pseudo pins the two pseudo masks (cross, self) instead of
    regenerating them, so finite differences see the same constant targets
    the analytic gradient assumes.
    Returns (loss, term dict, ModelParams-shaped grads, (pseudo_c, pseudo_s)).
    """
    feat_q, cache_q = encoder_forward(params, query_img)
    ref_feats, ref_caches = [], []
    for r in reference_imgs:
        f, c = encoder_forward(params, r)
        ref_feats.append(f)
        ref_caches.append(c)
    out_c, out_s, dual = forward_branches(feat_q, ref_feats, params.affinity)
    logits_c = _classify(out_c, params.cls)
    logits_s = _classify(out_s, params.cls)

    ce_c, g_c = seeded_ce(logits_c, seed_mask)
    ce_s, g_s = seeded_ce(logits_s, seed_mask)
    terms = {"loss_ce_c": ce_c, "loss_ce_s": ce_s,
             "loss_cp_c": 0.0, "loss_cp_s": 0.0}
    if enable_cp:
        if frozen_pseudo is None:
            pseudo_c = online_pseudo_label(logits_c, image_labels)
            pseudo_s = online_pseudo_label(logits_s, image_labels)
        else:
            pseudo_c, pseudo_s = frozen_pseudo
        cp_c, gcp_c = completion_loss(logits_c, pseudo_c)
        cp_s, gcp_s = completion_loss(logits_s, pseudo_s)
        terms["loss_cp_c"] = cp_c
        terms["loss_cp_s"] = cp_s
        g_c = g_c + gcp_c
        g_s = g_s + gcp_s
    else:
        pseudo_c = pseudo_s = None
    loss = sum(terms.values())

    grads = zero_model_grads(params)
    h, w, d = out_c.shape
    k = params.cls.shape[1]
    grads.cls += out_c.reshape(h * w, d).T @ g_c.reshape(h * w, k)
    grads.cls += out_s.reshape(h * w, d).T @ g_s.reshape(h * w, k)
    gfeat_c = (g_c.reshape(h * w, k) @ params.cls.T).reshape(h, w, d)
    gfeat_s = (g_s.reshape(h * w, k) @ params.cls.T).reshape(h, w, d)
    grad_fq, grad_refs, aff_grads = backward_branches(
        gfeat_c, gfeat_s, dual, params.affinity)
    grads.affinity = aff_grads
    encoder_backward(grad_fq, cache_q, params, grads)
    for gr, cache in zip(grad_refs, ref_caches):
        encoder_backward(gr, cache, params, grads)
    return loss, terms, grads, (pseudo_c, pseudo_s)


def poly_lr(lr0, step, total_steps, power=0.9):
    return lr0 * (1.0 - step / total_steps) ** power


def hflip(arr):
    """Horizontal mirror of (H,W) or (H,W,C); applying twice is identity."""
    return arr[:, ::-1].copy()


def _random_crop(rng, img, mask, crop):
    h, w = img.shape[:2]
    if crop >= h and crop >= w:
        return img, mask
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return (img[top:top + crop, left:left + crop],
            mask[top:top + crop, left:left + crop])


def train(config, images, seed_masks, out_dir=None, log_pairs=False):
    """SGD with momentum over the query-image loss; per-epoch checkpoints
    and a step-level CSV log when out_dir is given. Returns final params."""
    if len(images) != len(seed_masks):
        raise ValueError(
            f"{len(images)} images vs {len(seed_masks)} seed masks")
    n_classes = max(max(im.labels, default=0) for im in images)
    ids = [im.id for im in images]
    by_id = {im.id: i for i, im in enumerate(images)}
    label_index = {im.id: im.labels for im in images}

    init_rng = np.random.default_rng(
        np.random.SeedSequence([config.rng_seed, 3]))
    params = init_model(init_rng, n_classes)
    velocity = zero_model_grads(params)
    run_rng = np.random.default_rng(
        np.random.SeedSequence([config.rng_seed, 7]))

    n = len(images)
    steps_per_epoch = (n + config.batch - 1) // config.batch
    total_steps = config.epochs * steps_per_epoch

    log_rows = []
    pair_lines = []
    last_ckpt = None
    step = 0
    for epoch in range(config.epochs):
        order = run_rng.permutation(n)
        for b in range(steps_per_epoch):
            batch_idx = order[b * config.batch:(b + 1) * config.batch]
            batch_ids = [ids[i] for i in batch_idx]
            if config.enable_cross:
                pairs = sample_pairs(label_index, batch_ids,
                                     mode=config.pair_mode,
                                     n_refs=config.n_refs, rng=run_rng)
                if log_pairs:
                    pair_lines.extend(format_pair_log(pairs))
            lr = poly_lr(config.lr0, step, total_steps, config.power)
            batch_grads = zero_model_grads(params)
            batch_terms = {"loss_ce_c": 0.0, "loss_ce_s": 0.0,
                           "loss_cp_c": 0.0, "loss_cp_s": 0.0}
            for j, idx in enumerate(batch_idx):
                img = images[idx].pixels
                mask = seed_masks[idx]
                img, mask = _random_crop(run_rng, img, mask, config.crop)
                if run_rng.random() < 0.5:
                    img, mask = hflip(img), hflip(mask)
                refs = []
                if config.enable_cross:
                    refs = [images[by_id[rid]].pixels
                            for rid in pairs.reference_ids[j]]
                loss, terms, grads, _ = loss_and_grads(
                    params, img, refs, mask, images[idx].labels,
                    enable_cp=config.enable_cp)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at step {step}; last good "
                        f"checkpoint: {last_ckpt}")
                _add_grads(batch_grads, grads)
                for key in batch_terms:
                    batch_terms[key] += terms[key]
            bn = len(batch_idx)
            _sgd_update(params, velocity, batch_grads, lr, config.momentum,
                        1.0 / bn)
            log_rows.append([step, lr] +
                            [batch_terms[k] / bn for k in
                             ("loss_ce_c", "loss_ce_s",
                              "loss_cp_c", "loss_cp_s")])
            step += 1
        if out_dir is not None:
            ckpt = out_dir / "checkpoint"
            save_checkpoint(params, ckpt)
            last_ckpt = ckpt
    if out_dir is not None:
        with open(out_dir / "train_log.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "lr", "loss_ce_c", "loss_ce_s",
                         "loss_cp_c", "loss_cp_s"])
            for row in log_rows:
                wr.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        if log_pairs:
            (out_dir / "pairs.log").write_text(
                "\n".join(pair_lines) + ("\n" if pair_lines else ""))
    return params


def predict(params, image):
    """Dense argmax prediction through the self-affinity branch; ties go to
    the lowest class index; never emits IGNORE."""
    feat, _ = encoder_forward(params, image)
    out = cian_branch(feat, [], params.affinity)
    logits = _classify(out, params.cls)
    return np.argmax(logits, axis=-1).astype(np.uint8)


def save_checkpoint(params, ckpt_dir):
    """One CIAN1 container per parameter group plus a text manifest."""
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in param_groups(params):
        fname = f"{name}.cian1"
        save_tensor(ckpt_dir / fname, arr)
        lines.append(f"{name}\t{fname}")
    (ckpt_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir):
    manifest = (ckpt_dir / "manifest.txt").read_text().splitlines()
    arrays = {}
    for line in manifest:
        if not line.strip():
            continue
        name, fname = line.split("\t")
        arrays[name] = load_tensor(ckpt_dir / fname)
    dim = arrays["aff_w_query"].shape[0]
    params = ModelParams(
        enc1=arrays["enc1"], enc2=arrays["enc2"], enc3=arrays["enc3"],
        cls=arrays["cls"],
        affinity=AffinityParams(**{f.name: arrays[f"aff_{f.name}"]
                                   for f in fields(AffinityParams)}))
    for name, _ in param_groups(params):
        if name not in arrays:
            raise ValueError(f"checkpoint missing group {name}")
    return params
