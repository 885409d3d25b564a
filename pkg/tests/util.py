"""Shared constructors for hand-built vocabularies and proposals."""

import numpy as np

from ovlab.discovery import Box, OracleInfo, Proposal
from ovlab.vocab import Vocabulary


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_vocab(
    base_emb,
    under_emb=None,
    sub=None,
    n_discovered=None,
    novel_emb=None,
    novel_ids=None,
    base_ids=None,
    encoder=None,
    context_vectors=None,
    inference=None,
):
    """Build a Vocabulary snapshot directly from chosen embedding rows.

    Lets tests pick exact geometry (orthogonal blocks, prescribed cosines)
    without routing the underlying block through the encoder.
    """
    base_emb = np.asarray(base_emb, dtype=np.float64)
    if base_emb.size == 0:
        base_emb = base_emb.reshape(0, sub.shape[0] if sub is not None else 0)
    d = base_emb.shape[1] if base_emb.size else (sub.shape[0] if sub is not None else None)
    under_emb = (
        np.asarray(under_emb, dtype=np.float64)
        if under_emb is not None
        else np.zeros((0, d))
    )
    novel_emb = (
        np.asarray(novel_emb, dtype=np.float64)
        if novel_emb is not None
        else np.zeros((0, d))
    )
    if sub is None:
        raise ValueError("sub embedding required")
    base_ids = tuple(base_ids) if base_ids is not None else tuple(range(base_emb.shape[0]))
    novel_ids = (
        tuple(novel_ids)
        if novel_ids is not None
        else tuple(range(1000, 1000 + novel_emb.shape[0]))
    )
    n_under = under_emb.shape[0]
    if n_discovered is None:
        n_discovered = n_under
    if context_vectors is None:
        context_vectors = np.zeros((n_under, 1))
    if inference is None:
        inference = bool(novel_emb.shape[0]) or novel_ids != ()
    stacked = np.vstack([base_emb, novel_emb, under_emb, np.asarray(sub)[None, :]])
    stacked.setflags(write=False)
    return Vocabulary(
        base_ids=base_ids,
        novel_ids=novel_ids,
        n_underlying=n_under,
        n_discovered=n_discovered,
        embeddings=stacked,
        context_vectors=np.asarray(context_vectors, dtype=np.float64),
        encoder=encoder,
        baseline_mode=False,
        inference=inference,
        _base_pos={cid: pos for pos, cid in enumerate(base_ids)},
    )


def make_proposal(det_feature, img_feature=None, gt_label=None, box=None, rpn_score=0.9, oracle=None):
    det = np.asarray(det_feature, dtype=np.float64)
    img = np.asarray(img_feature, dtype=np.float64) if img_feature is not None else det
    return Proposal(
        box=box or Box(0.0, 0.0, 10.0, 10.0),
        rpn_score=rpn_score,
        det_feature=det,
        img_feature=img,
        gt_label=gt_label,
        oracle=oracle,
    )


def random_proposal(rng, d, gt_label=None, source="object", generative=None):
    return make_proposal(
        unit(rng, d),
        img_feature=unit(rng, d),
        gt_label=gt_label,
        oracle=OracleInfo(generative_label=generative, source=source),
    )
