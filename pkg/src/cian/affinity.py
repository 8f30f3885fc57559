"""Cross-image affinity: pixel-to-pixel attention between a query feature map
and reference feature maps, message retrieval, multi-pair max merging, and the
zero-initialised residual gate. Forward and hand-derived backward.

Conventions: feature maps are (H,W,D). The query side stays at full
resolution; reference-side projections are max-pooled window 2 stride 2
(skipped when a reference spatial dim is < 2). The pair of an image with
itself is always included and sits at merge index 0.
"""

from dataclasses import dataclass, fields

import numpy as np

from .tensor import maxpool2d, maxpool2d_backward
from .pnm import write_pgm

__all__ = [
    "AffinityParams",
    "init_affinity_params",
    "zero_affinity_grads",
    "affinity_forward",
    "merge_messages",
    "residual_merge",
    "cian_branch",
    "affinity_backward",
    "forward_branches",
    "backward_branches",
    "export_affinity_pgm",
    "average_affinity_map",
]


@dataclass
class AffinityParams:
    """Projection matrices and the per-channel residual gate.

    w_query/w_ref map D -> D/2, w_content and w_out map D -> D. gate_scale
    and gate_bias start at zero so the module is an exact identity at init.
    """
    w_query: np.ndarray
    w_ref: np.ndarray
    w_content: np.ndarray
    w_out: np.ndarray
    gate_scale: np.ndarray
    gate_bias: np.ndarray

    def astype(self, dtype):
        return AffinityParams(**{f.name: getattr(self, f.name).astype(dtype)
                                 for f in fields(self)})


def init_affinity_params(rng, dim, dtype=np.float32, std=0.01):
    """Normal(0, std) projections, zero gate. dim must be even."""
    if dim % 2:
        raise ValueError(f"feature dim must be even, got {dim}")
    half = dim // 2
    return AffinityParams(
        w_query=rng.normal(0.0, std, (dim, half)).astype(dtype),
        w_ref=rng.normal(0.0, std, (dim, half)).astype(dtype),
        w_content=rng.normal(0.0, std, (dim, dim)).astype(dtype),
        w_out=rng.normal(0.0, std, (dim, dim)).astype(dtype),
        gate_scale=np.zeros(dim, dtype=dtype),
        gate_bias=np.zeros(dim, dtype=dtype),
    )


def zero_affinity_grads(params):
    return AffinityParams(**{f.name: np.zeros_like(getattr(params, f.name))
                             for f in fields(AffinityParams)})


def _accumulate(grads, **named):
    for name, g in named.items():
        getattr(grads, name).__iadd__(g)


def _pool_ref(proj):
    """Stride-2 max-pool of a reference-side projection; identity if the
    spatial dims don't admit a 2x2 window."""
    h, w = proj.shape[:2]
    if h < 2 or w < 2:
        return proj, None
    return maxpool2d(proj, 2, 2, return_indices=True)


@dataclass
class _PairState:
    query_shape: tuple
    ref_shape: tuple
    fq_flat: np.ndarray      # (Nq, D)
    fr_flat: np.ndarray      # (Nr, D)
    q_proj: np.ndarray       # (Nq, D/2)
    r_pooled: np.ndarray     # (P, D/2)
    c_pooled: np.ndarray     # (P, D)
    r_idx: np.ndarray | None
    c_idx: np.ndarray | None
    pooled_grid: tuple       # (Hp, Wp)
    weights: np.ndarray      # (Nq, P) row-stochastic
    message: np.ndarray      # (H, W, D)


def _pair_forward(query, reference, params):
    h, w, d = query.shape
    hr, wr, dr = reference.shape
    if d != dr or d != params.w_query.shape[0]:
        raise ValueError(
            f"channel mismatch: query {query.shape}, reference "
            f"{reference.shape}, params expect D={params.w_query.shape[0]}")
    fq = query.reshape(h * w, d)
    fr = reference.reshape(hr * wr, d)
    q_proj = fq @ params.w_query
    r_full = (fr @ params.w_ref).reshape(hr, wr, -1)
    c_full = (fr @ params.w_content).reshape(hr, wr, d)
    r_pooled3, r_idx = _pool_ref(r_full)
    c_pooled3, c_idx = _pool_ref(c_full)
    hp, wp = r_pooled3.shape[:2]
    r_pooled = r_pooled3.reshape(hp * wp, -1)
    c_pooled = c_pooled3.reshape(hp * wp, d)
    logits = q_proj @ r_pooled.T
    row_max = logits.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ValueError("non-finite affinity dot products")
    e = np.exp(logits - row_max)
    denom = e.sum(axis=1, keepdims=True)
    weights = e / denom
    message = (weights @ c_pooled).reshape(h, w, d)
    return _PairState(
        query_shape=query.shape, ref_shape=reference.shape,
        fq_flat=fq, fr_flat=fr, q_proj=q_proj,
        r_pooled=r_pooled, c_pooled=c_pooled,
        r_idx=r_idx, c_idx=c_idx, pooled_grid=(hp, wp),
        weights=weights, message=message)


def _pair_backward(grad_message, st, params, grads):
    """Backward of one pair given d(loss)/d(message). Returns gradients
    w.r.t. the query and reference feature maps; parameter gradients
    accumulate into `grads`."""
    h, w, d = st.query_shape
    gm = grad_message.reshape(h * w, d)
    grad_a = gm @ st.c_pooled.T
    grad_cp = st.weights.T @ gm
    # softmax Jacobian per row
    inner = (grad_a * st.weights).sum(axis=1, keepdims=True)
    grad_logits = st.weights * (grad_a - inner)
    grad_qproj = grad_logits @ st.r_pooled
    grad_rp = grad_logits.T @ st.q_proj
    # un-pool reference-side gradients
    hr, wr, _ = st.ref_shape
    if st.r_idx is not None:
        hp, wp = st.pooled_grid
        grad_rfull = maxpool2d_backward(
            grad_rp.reshape(hp, wp, -1), st.r_idx, (hr, wr, grad_rp.shape[1]))
        grad_cfull = maxpool2d_backward(
            grad_cp.reshape(hp, wp, d), st.c_idx, (hr, wr, d))
    else:
        grad_rfull = grad_rp.reshape(hr, wr, -1)
        grad_cfull = grad_cp.reshape(hr, wr, d)
    grad_rflat = grad_rfull.reshape(hr * wr, -1)
    grad_cflat = grad_cfull.reshape(hr * wr, d)
    _accumulate(grads,
                w_query=st.fq_flat.T @ grad_qproj,
                w_ref=st.fr_flat.T @ grad_rflat,
                w_content=st.fr_flat.T @ grad_cflat)
    grad_query = (grad_qproj @ params.w_query.T).reshape(st.query_shape)
    grad_ref = (grad_rflat @ params.w_ref.T
                + grad_cflat @ params.w_content.T).reshape(st.ref_shape)
    return grad_query, grad_ref


def affinity_forward(query, reference, params):
    """Affinity weights and retrieved message for one (query, reference)
    pair. Weights are row-stochastic over the pooled reference pixels."""
    st = _pair_forward(query, reference, params)
    return st.weights, st.message


def merge_messages(messages, mode="max"):
    """Element-wise max (default) or mean across message maps."""
    if not messages:
        raise ValueError("merge_messages needs a non-empty list")
    shapes = {m.shape for m in messages}
    if len(shapes) > 1:
        raise ValueError(f"message shapes differ: {sorted(shapes)}")
    stack = np.stack(messages)
    if mode == "max":
        return stack.max(axis=0)
    if mode == "avg":
        return stack.mean(axis=0)
    raise ValueError(f"unknown merge mode {mode!r}")


def _merge_max_forward(messages):
    stack = np.stack(messages)
    idx = np.argmax(stack, axis=0)  # ties -> lowest index (self first)
    merged = np.take_along_axis(stack, idx[None], axis=0)[0]
    return merged, idx


@dataclass
class _ResidualState:
    x_shape: tuple
    m_flat: np.ndarray
    u: np.ndarray  # (N, D) pre-gate projection of the message


def _residual_forward(x, message, params):
    h, w, d = x.shape
    if message.shape != x.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs message {message.shape}")
    m_flat = message.reshape(h * w, d)
    u = m_flat @ params.w_out
    out = x + (params.gate_scale * u + params.gate_bias).reshape(h, w, d)
    return out, _ResidualState(x.shape, m_flat, u)


def _residual_backward(grad_out, st, params, grads):
    h, w, d = st.x_shape
    g = grad_out.reshape(h * w, d)
    _accumulate(grads,
                gate_scale=(g * st.u).sum(axis=0),
                gate_bias=g.sum(axis=0))
    grad_u = g * params.gate_scale
    _accumulate(grads, w_out=st.m_flat.T @ grad_u)
    grad_message = (grad_u @ params.w_out.T).reshape(st.x_shape)
    return grad_out, grad_message  # identity path, message path


def residual_merge(x, message, params):
    """x + gate_scale * (w_out message) + gate_bias; exact identity while
    the gate is zero."""
    out, _ = _residual_forward(x, message, params)
    return out


@dataclass
class _BranchState:
    pair_states: list        # index 0 is the self pair
    n_refs: int
    merge_idx: np.ndarray
    residual: _ResidualState
    out_shape: tuple


def cian_branch(query, references, params, want_state=False):
    """Augment the query with messages from its references and from itself
    (always included, merge index 0), max-merged, through the residual gate.
    With an empty reference list this is the self-affinity branch."""
    states = [_pair_forward(query, query, params)]
    states += [_pair_forward(query, r, params) for r in references]
    merged, merge_idx = _merge_max_forward([s.message for s in states])
    out, res_st = _residual_forward(query, merged, params)
    if want_state:
        return out, _BranchState(states, len(references), merge_idx, res_st,
                                 out.shape)
    return out


def affinity_backward(upstream_grad, state, params):
    """Gradients of a cian_branch output w.r.t. the query, each reference,
    and all affinity parameters."""
    if upstream_grad.shape != state.out_shape:
        raise ValueError(
            f"saved state mismatch: grad {upstream_grad.shape} vs forward "
            f"output {state.out_shape}")
    grads = zero_affinity_grads(params)
    grad_query, grad_merged = _residual_backward(
        upstream_grad, state.residual, params, grads)
    grad_query = grad_query.copy()
    grad_refs = []
    for k, st in enumerate(state.pair_states):
        grad_msg = np.where(state.merge_idx == k, grad_merged, 0)
        gq, gr = _pair_backward(grad_msg, st, params, grads)
        grad_query += gq
        if k == 0:
            grad_query += gr  # self pair: reference is the query itself
        else:
            grad_refs.append(gr)
    return grad_query, grad_refs, grads


@dataclass
class _DualState:
    """Shared forward state for the cross and self branches of one query.
    The self pair is computed once and reused by both branches."""
    self_state: _PairState
    ref_states: list
    cross_merge_idx: np.ndarray
    cross_residual: _ResidualState
    self_residual: _ResidualState
    out_shape: tuple


def forward_branches(query, references, params):
    """Cross branch (self pair + references, max merge) and self branch
    (self pair only) in one pass; equals running cian_branch twice."""
    self_st = _pair_forward(query, query, params)
    ref_states = [_pair_forward(query, r, params) for r in references]
    messages = [self_st.message] + [s.message for s in ref_states]
    merged, merge_idx = _merge_max_forward(messages)
    out_cross, res_c = _residual_forward(query, merged, params)
    out_self, res_s = _residual_forward(query, self_st.message, params)
    state = _DualState(self_st, ref_states, merge_idx, res_c, res_s,
                       out_cross.shape)
    return out_cross, out_self, state


def backward_branches(grad_cross, grad_self, state, params):
    """Backward of forward_branches; the self pair accumulates gradient
    contributions from both branches."""
    if grad_cross.shape != state.out_shape or grad_self.shape != state.out_shape:
        raise ValueError("saved state mismatch in backward_branches")
    grads = zero_affinity_grads(params)
    gq_c, gm_cross = _residual_backward(grad_cross, state.cross_residual,
                                        params, grads)
    gq_s, gm_self = _residual_backward(grad_self, state.self_residual,
                                       params, grads)
    grad_query = gq_c + gq_s
    grad_self_msg = np.where(state.cross_merge_idx == 0, gm_cross, 0) + gm_self
    gq, gr = _pair_backward(grad_self_msg, state.self_state, params, grads)
    grad_query = grad_query + gq + gr
    grad_refs = []
    for k, st in enumerate(state.ref_states, start=1):
        grad_msg = np.where(state.cross_merge_idx == k, gm_cross, 0)
        gq, gr = _pair_backward(grad_msg, st, params, grads)
        grad_query += gq
        grad_refs.append(gr)
    return grad_query, grad_refs, grads


def export_affinity_pgm(weights, path):
    """Dump an affinity matrix as a P5 graymap, each row rescaled by its
    row max so the strongest link per query pixel is white."""
    mx = weights.max(axis=1, keepdims=True)
    mx = np.where(mx > 0, mx, 1)
    img = np.floor(weights / mx * 255.0 + 0.5).astype(np.uint8)
    write_pgm(path, img)


def average_affinity_map(weights, pooled_grid):
    """Mean affinity each pooled reference pixel receives over all query
    pixels, rescaled by the map max into [0,1]."""
    avg = weights.mean(axis=0)
    mx = avg.max()
    if mx > 0:
        avg = avg / mx
    return avg.reshape(pooled_grid)
