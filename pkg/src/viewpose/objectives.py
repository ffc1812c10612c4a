"""Pretraining losses and the temporally stratified batch sampler.

Contrastive alignment is computed per ordered view pair and averaged over the
pair set: cross-modal pairs include the same-view pair (p = q), in-modal pairs
exclude it.  Two geometric terms penalize view-dependent similarity structure,
and a masked-coordinate MSE supervises pose reconstruction.  The total
training objective is their weighted sum.

The sampler draws each minibatch from one procedure timeline split into
equal segments, one clip per segment with a shared fractional offset, so
batch elements are pairwise temporally distant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .encoders import EmbeddingSet


@dataclass
class LossConfig:
    """Weights and pair policies of the pretraining objective."""

    temperature: float = 0.07
    lambda_geo: float = 0.5
    lambda_mask: float = 0.5
    cross_include_same_view: bool = True
    in_modal_include_same_view: bool = False
    batch_size: int = 32

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.lambda_geo < 0 or self.lambda_mask < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "lambda_geo": self.lambda_geo,
            "lambda_mask": self.lambda_mask,
            "cross_include_same_view": self.cross_include_same_view,
            "in_modal_include_same_view": self.in_modal_include_same_view,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class LossReport:
    """One scalar per objective term for a single training step."""

    video_to_pose: float
    pose_to_video: float
    video_to_video: float
    pose_to_pose: float
    contrastive: float
    cross_geo: float
    in_geo: float
    masked: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "video_to_pose": self.video_to_pose,
            "pose_to_video": self.pose_to_video,
            "video_to_video": self.video_to_video,
            "pose_to_pose": self.pose_to_pose,
            "contrastive": self.contrastive,
            "cross_geo": self.cross_geo,
            "in_geo": self.in_geo,
            "masked": self.masked,
            "total": self.total,
        }


def info_nce(anchors: torch.Tensor, targets: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """Contrastive loss over one anchor/target set.

    ``-(1/N) sum_n log(exp(<a_n, t_n>/tau) / sum_k exp(<a_n, t_k>/tau))``:
    the anchor is fixed across the denominator and the targets vary.  Both
    sets must be L2-normalized by the caller.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = anchors @ targets.transpose(-1, -2) / temperature  # (N, N)
    positives = logits.diagonal(dim1=-2, dim2=-1)
    return (torch.logsumexp(logits, dim=-1) - positives).mean()


def _pair_mean(anchors: torch.Tensor, targets: torch.Tensor,
               pairs: List[Tuple[int, int]],
               temperature: float) -> torch.Tensor:
    """Mean InfoNCE over ordered view pairs; anchors/targets are (N, C, D)."""
    total = anchors.new_zeros(())
    for p, q in pairs:
        total = total + info_nce(anchors[:, p], targets[:, q], temperature)
    return total / len(pairs)


def contrastive_total(embeddings: EmbeddingSet, config: LossConfig):
    """Four contrastive terms and their mean.

    Returns (video_to_pose, pose_to_video, video_to_video, pose_to_pose,
    contrastive) where the first two average over ordered cross-modal view
    pairs (including p = q by default) and the last two over ordered
    in-modal pairs with p != q.  With a single view the in-modal terms are
    zero (there are no pairs) and a warning is emitted.
    """
    video = embeddings.video_n
    pose = embeddings.pose_n
    C = video.shape[1]
    cross_pairs = [(p, q) for p in range(C) for q in range(C)
                   if config.cross_include_same_view or p != q]
    in_pairs = [(p, q) for p in range(C) for q in range(C)
                if config.in_modal_include_same_view or p != q]
    v2p = _pair_mean(video, pose, cross_pairs, config.temperature)
    p2v = _pair_mean(pose, video, cross_pairs, config.temperature)
    if in_pairs:
        v2v = _pair_mean(video, video, in_pairs, config.temperature)
        p2p = _pair_mean(pose, pose, in_pairs, config.temperature)
    else:
        warnings.warn("single view: in-modal contrastive terms are 0",
                      RuntimeWarning)
        v2v = video.new_zeros(())
        p2p = pose.new_zeros(())
    con = (v2p + p2v + v2v + p2p) / 4.0
    return v2p, p2v, v2v, p2p, con


def cross_geo(embeddings: EmbeddingSet, config: LossConfig) -> torch.Tensor:
    """Cross-modal similarity symmetry across views.

    ``(1/N) sum_n sum_{p<q} (<I_n^p, J_n^q> - <J_n^p, I_n^q>)^2``; zero when
    the video/pose similarity structure is view-symmetric, and zero with a
    single view.
    """
    video = embeddings.video_n
    pose = embeddings.pose_n
    N, C = video.shape[:2]
    sim = torch.einsum("npd,nqd->npq", video, pose)  # <I^p, J^q>
    diff = sim - sim.transpose(1, 2)                 # minus <I^q, J^p>
    iu = torch.triu_indices(C, C, offset=1)
    return diff[:, iu[0], iu[1]].square().sum() / N


def in_geo(embeddings: EmbeddingSet, config: LossConfig) -> torch.Tensor:
    """In-modal similarity agreement between modalities.

    ``(1/N) sum_n sum_{p<q} (<I_n^p, I_n^q> - <J_n^p, J_n^q>)^2``.
    """
    video = embeddings.video_n
    pose = embeddings.pose_n
    N, C = video.shape[:2]
    sim_v = torch.einsum("npd,nqd->npq", video, video)
    sim_p = torch.einsum("npd,nqd->npq", pose, pose)
    iu = torch.triu_indices(C, C, offset=1)
    diff = (sim_v - sim_p)[:, iu[0], iu[1]]
    return diff.square().sum() / N


def masked_pose_loss(predictions: torch.Tensor, targets: torch.Tensor,
                     validity: torch.Tensor) -> torch.Tensor:
    """MSE over valid joint coordinates of masked tokens.

    Args:
        predictions: (K, 2, N_j) predicted normalized coordinates.
        targets: (K, 2, N_j) original coordinates.
        validity: (K, N_j) bool; invalid joints are excluded from the mean.

    Returns 0 when nothing is masked or nothing is valid.
    """
    if predictions.shape != targets.shape:
        raise ValueError(
            f"prediction shape {tuple(predictions.shape)} != target shape "
            f"{tuple(targets.shape)}"
        )
    if predictions.shape[0] == 0:
        return predictions.new_zeros(())
    weight = validity.unsqueeze(1).to(predictions.dtype)  # (K, 1, N_j)
    denom = weight.sum() * 2
    if denom.item() == 0:
        return predictions.new_zeros(())
    return ((predictions - targets).square() * weight).sum() / denom


def align_total(contrastive: torch.Tensor, cross_geo_term: torch.Tensor,
                in_geo_term: torch.Tensor, masked: torch.Tensor,
                lambda_geo: float, lambda_mask: float) -> torch.Tensor:
    """Total objective: contrastive + lambda_geo*(geo terms) + lambda_mask*mask."""
    return contrastive + lambda_geo * (cross_geo_term + in_geo_term) \
        + lambda_mask * masked


def loss_report(embeddings: EmbeddingSet, predictions: torch.Tensor,
                targets: torch.Tensor, validity: torch.Tensor,
                config: LossConfig):
    """All terms for one step.

    Returns (total loss tensor for backward, LossReport of detached floats).
    """
    v2p, p2v, v2v, p2p, con = contrastive_total(embeddings, config)
    cg = cross_geo(embeddings, config)
    ig = in_geo(embeddings, config)
    mk = masked_pose_loss(predictions, targets, validity)
    total = align_total(con, cg, ig, mk, config.lambda_geo, config.lambda_mask)
    report = LossReport(
        video_to_pose=float(v2p.detach()), pose_to_video=float(p2v.detach()),
        video_to_video=float(v2v.detach()), pose_to_pose=float(p2p.detach()),
        contrastive=float(con.detach()), cross_geo=float(cg.detach()),
        in_geo=float(ig.detach()), masked=float(mk.detach()),
        total=float(total.detach()),
    )
    return total, report


# ---------------------------------------------------------------------------
# Temporally stratified batch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipAddress:
    procedure_id: int
    clip_index: int


class SegmentSampler:
    """Draws minibatches whose clips are pairwise temporally distant.

    Each batch comes from one procedure when it is long enough: its timeline
    is divided into ``batch_size`` equal segments and one clip is taken per
    segment at a shared fractional offset, so consecutive picks are at least
    ``floor(timeline / batch_size)`` clips apart.  Shorter procedures are
    combined round-robin, each contributing one clip per segment of its own
    timeline.
    """

    def __init__(self, procedures: Sequence, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._lengths = [(int(m.procedure_id), int(m.num_clips))
                         for m in procedures if int(m.num_clips) > 0]
        if not self._lengths:
            raise ValueError("sampler needs at least one non-empty procedure")
        pids = [pid for pid, _ in self._lengths]
        if len(set(pids)) != len(pids):
            raise ValueError("duplicate procedure ids")
        self._by_pid = dict(self._lengths)
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._queue: List[int] = []

    def _next_procedure(self) -> Tuple[int, int]:
        if not self._queue:
            self._queue = list(self._rng.permutation(len(self._lengths)))
        return self._lengths[self._queue.pop(0)]

    @staticmethod
    def _stratified(num_clips: int, count: int, offset: float) -> List[int]:
        """One index per segment of a ``num_clips`` timeline, shared offset.

        Segment boundaries are the exact integer partition
        ``ceil(i * num_clips / count)``, so pick ``i`` always lies inside
        segment ``i`` — the shared offset is scaled to each segment's own
        clip count rather than applied to fractional positions, which could
        round a pick back across a boundary.
        """
        bounds = [-((-i * num_clips) // count) for i in range(count + 1)]
        return [lo + int(offset * (hi - lo))
                for lo, hi in zip(bounds, bounds[1:])]

    def sample_batch(self) -> List[ClipAddress]:
        remaining = self.batch_size
        counts: Dict[int, int] = {}
        skipped = 0
        while remaining > 0:
            pid, length = self._next_procedure()
            if pid in counts:
                # every procedure already contributes; if a full cycle finds
                # no fresh one the corpus is smaller than the batch, so allow
                # duplicates rather than loop forever
                skipped += 1
                if skipped >= len(self._lengths):
                    counts[pid] += remaining
                    remaining = 0
                continue
            skipped = 0
            take = min(remaining, length)
            counts[pid] = take
            remaining -= take
        batch: List[ClipAddress] = []
        for pid, count in counts.items():
            offset = float(self._rng.uniform(0.0, 1.0))
            batch.extend(
                ClipAddress(pid, idx)
                for idx in self._stratified(self._by_pid[pid], count, offset))
        return batch

    def sample_epoch(self, num_batches: int) -> List[List[ClipAddress]]:
        return [self.sample_batch() for _ in range(num_batches)]
