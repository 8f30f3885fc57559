"""Query-reference pair sampling: common-class (default), random-class
(ablation), and self pairing (test time). References are drawn from the
whole training index, not just the current batch.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["PairBatch", "shared_classes", "sample_pairs", "format_pair_log"]


@dataclass
class PairBatch:
    query_ids: list
    reference_ids: list  # list of lists, n_refs per query
    mode: str


def shared_classes(a, b):
    """Foreground classes present in both label sets."""
    return set(a) & set(b)


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_pairs(dataset_index, batch_ids, mode="common", n_refs=1, rng=0):
    """Pick n_refs reference ids for every query id in batch_ids.

    common: uniform over images sharing >= 1 foreground class with the
    query, excluding the query itself when alternatives exist, falling back
    to a self pair when none. random: uniform over all other images
    regardless of labels. self: the query pairs only to itself.
    """
    if not dataset_index:
        raise ValueError("empty dataset index")
    if n_refs < 1:
        raise ValueError(f"n_refs must be >= 1, got {n_refs}")
    if mode not in ("common", "random", "self"):
        raise ValueError(f"unknown pair mode {mode!r}")
    rng = _as_rng(rng)
    all_ids = sorted(dataset_index)
    refs = []
    for qid in batch_ids:
        if mode == "self":
            refs.append([qid] * n_refs)
            continue
        if mode == "common":
            labels = dataset_index[qid]
            cands = [i for i in all_ids
                     if i != qid and shared_classes(labels, dataset_index[i])]
        else:
            cands = [i for i in all_ids if i != qid]
        if not cands:
            refs.append([qid] * n_refs)  # self-pair fallback
            continue
        picks = rng.integers(0, len(cands), size=n_refs)
        refs.append([cands[int(p)] for p in picks])
    return PairBatch(query_ids=list(batch_ids), reference_ids=refs, mode=mode)


def format_pair_log(batch):
    """Audit lines, one per (query, reference): "query<TAB>ref<TAB>mode"."""
    lines = []
    for qid, rids in zip(batch.query_ids, batch.reference_ids):
        for rid in rids:
            lines.append(f"{qid}\t{rid}\t{batch.mode}")
    return lines
