"""Dual encoders: video clips -> per-view I^c and pose sequences -> J^c.

The pose branch assembles, per view, the sequence [CLS, token(t=0, person=0),
..., token(T-1, N_p-1)] and runs joint attention over all views concatenated,
so views can exchange information; each view's embedding J^c is read at its
CLS position.  The video branch embeds non-overlapping space-time cubes and
encodes every view independently with shared weights; I^c is read at a CLS
token.  Masked pose modeling utilities (mask application and the coordinate
decoder) live here too.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn


def sincos_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sine-cosine encoding of integer positions, (len(positions), dim)."""
    if dim % 2 != 0:
        raise ValueError(f"sincos dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-np.log(10000.0) * torch.arange(half) / half)
    angles = positions.float().unsqueeze(1) * freqs.unsqueeze(0)
    out = torch.empty(positions.shape[0], dim)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


def time_track_table(clip_len: int, max_persons: int, dim: int) -> torch.Tensor:
    """2D positional table (clip_len, max_persons, dim).

    The first half of the channels encodes the timestep, the second half the
    track rank; deterministic in (clip_len, max_persons, dim).
    """
    half = dim // 2
    t_part = sincos_table(torch.arange(clip_len), half)       # (T, dim/2)
    r_part = sincos_table(torch.arange(max_persons), dim - half)
    table = torch.cat([
        t_part.unsqueeze(1).expand(clip_len, max_persons, half),
        r_part.unsqueeze(0).expand(clip_len, max_persons, dim - half),
    ], dim=2)
    return table


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor,
                key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = x + attn_out
        return x + self.ffn(self.norm2(x))


@dataclass
class PoseEncoderConfig:
    embed_dim: int = 128
    num_heads: int = 4
    num_layers: int = 6
    mlp_ratio: float = 4.0
    num_views: int = 4
    max_persons: int = 8
    clip_len: int = 8
    num_joints: int = 17

    def __post_init__(self):
        if self.embed_dim % 4 != 0:
            raise ValueError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must divide evenly into heads")
        if min(self.num_views, self.max_persons, self.clip_len,
               self.num_layers) < 1:
            raise ValueError("num_views, max_persons, clip_len, num_layers "
                             "must all be >= 1")

    @property
    def seq_len(self) -> int:
        """Tokens per view: one CLS plus one slot per (timestep, person)."""
        return self.max_persons * self.clip_len + 1


@dataclass
class VideoEncoderConfig:
    embed_dim: int = 128
    num_heads: int = 4
    num_layers: int = 4
    mlp_ratio: float = 4.0
    clip_len: int = 8
    frame_size: Tuple[int, int] = (64, 64)
    cube: Tuple[int, int, int] = (2, 8, 8)  # (t, h, w)

    def __post_init__(self):
        t, h, w = self.cube
        fh, fw = self.frame_size
        if self.clip_len % t or fh % h or fw % w:
            raise ValueError(
                f"clip {self.clip_len}x{self.frame_size} not divisible by "
                f"cube {self.cube}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must divide evenly into heads")

    @property
    def num_patch_tokens(self) -> int:
        t, h, w = self.cube
        return (self.clip_len // t) * (self.frame_size[0] // h) \
            * (self.frame_size[1] // w)


@dataclass
class PoseSequenceBatch:
    """Assembled multi-view pose token sequences plus mask/target metadata.

    All tensors are laid out (B, C, S, ...) with S = N_p*T + 1 and position 0
    of every view holding that view's CLS token.
    """

    tokens: torch.Tensor        # (B, C, S, D) content + positional embeddings
    pos: torch.Tensor           # (B, C, S, D) positional part alone
    padding: torch.Tensor       # (B, C, S) bool, True where PAD (absent slot)
    maskable: torch.Tensor      # (B, C, S) bool, tokens eligible for masking
    target_coords: torch.Tensor  # (B, C, S, 2, N_j) original coordinates
    target_valid: torch.Tensor  # (B, C, S, N_j) bool

    @property
    def num_views(self) -> int:
        return self.tokens.shape[1]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[2]


class PoseSequenceEncoder(nn.Module):
    """G: tokenized pose sequences of all views -> per-view embeddings J^c."""

    def __init__(self, config: PoseEncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.pad_token = nn.Parameter(torch.randn(d) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.view_embed = nn.Parameter(torch.randn(config.num_views, d) * 0.02)
        table = time_track_table(config.clip_len, config.max_persons, d)
        self.register_buffer("pos_table", table)  # (T, N_p, D)
        self.blocks = nn.ModuleList([
            TransformerBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_layers)
        ])

    # -- sequence assembly ---------------------------------------------------

    def build_sequence(self, pi: torch.Tensor, track_ids: torch.Tensor,
                       poses2d: torch.Tensor,
                       validity: torch.Tensor) -> PoseSequenceBatch:
        """Assemble per-view token sequences from tokenized poses.

        Person slots are re-ordered canonically by global track id (shared
        across views), so the slot order used by the data carries no
        information; the positional code of a person follows their track.
        If a clip contains more tracks than the encoder's N_p, the tracks
        with most valid joints are kept (warns once).

        Args:
            pi: (B, C, T, P, D) pose embeddings from the tokenizer/baseline.
            track_ids: (B, C, T, P) ints, -1 = absent.
            poses2d: (B, C, T, P, 2, N_j) original coordinates (mask targets).
            validity: (B, C, T, P, N_j) bool.
        """
        cfg = self.config
        B, C, T, P = pi.shape[:4]
        if C != cfg.num_views or T != cfg.clip_len:
            raise ValueError(
                f"batch has {C} views x {T} frames, encoder configured for "
                f"{cfg.num_views} x {cfg.clip_len}"
            )
        S = cfg.seq_len
        np_enc = cfg.max_persons
        d = cfg.embed_dim
        nj = cfg.num_joints
        device = pi.device

        tokens = torch.empty(B, C, S, d, device=device, dtype=pi.dtype)
        pos = torch.empty_like(tokens)
        padding = torch.ones(B, C, S, dtype=torch.bool, device=device)
        maskable = torch.zeros_like(padding)
        tgt_coords = torch.zeros(B, C, S, 2, nj, device=device,
                                 dtype=poses2d.dtype)
        tgt_valid = torch.zeros(B, C, S, nj, dtype=torch.bool, device=device)

        # positional scaffold: CLS carries the view embedding, body tokens
        # carry (timestep, track-rank) sine-cosine codes plus the view code
        view = self.view_embed[:C]                                # (C, D)
        pos[:, :, 0] = view.view(1, C, d)
        body = self.pos_table.reshape(1, 1, T * np_enc, d) + view.view(1, C, 1, d)
        pos[:, :, 1:] = body
        tokens[:, :, 0] = self.cls_token + pos[:, :, 0]
        tokens[:, :, 1:] = self.pad_token + pos[:, :, 1:]
        padding[:, :, 0] = False

        tid_np = track_ids.detach().cpu().numpy()
        val_np = validity.detach().cpu().numpy()
        bb: List[int] = []
        cc: List[int] = []
        tt: List[int] = []
        pp: List[int] = []
        qq: List[int] = []
        t_range = list(range(T))
        for b in range(B):
            ranks = _rank_tracks(tid_np[b], val_np[b], np_enc)
            for c in range(C):
                for s in range(P):
                    tid = int(tid_np[b, c, 0, s])
                    if tid < 0 or tid not in ranks:
                        continue
                    r = ranks[tid]
                    bb.extend([b] * T)
                    cc.extend([c] * T)
                    tt.extend(t_range)
                    pp.extend([s] * T)
                    qq.extend(1 + t * np_enc + r for t in t_range)
        if bb:
            ib = torch.as_tensor(bb, device=device)
            ic = torch.as_tensor(cc, device=device)
            it = torch.as_tensor(tt, device=device)
            ip = torch.as_tensor(pp, device=device)
            iq = torch.as_tensor(qq, device=device)
            tokens[ib, ic, iq] = pi[ib, ic, it, ip] + pos[ib, ic, iq]
            padding[ib, ic, iq] = False
            maskable[ib, ic, iq] = validity[ib, ic, it, ip].any(dim=-1)
            tgt_coords[ib, ic, iq] = poses2d[ib, ic, it, ip]
            tgt_valid[ib, ic, iq] = validity[ib, ic, it, ip]
        return PoseSequenceBatch(tokens, pos, padding, maskable,
                                 tgt_coords, tgt_valid)

    # -- forward -------------------------------------------------------------

    def forward(self, batch: PoseSequenceBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Joint cross-view attention over the concatenated view sequences.

        Returns (sequence output (B, C, S, D), J (B, C, D)).

        Raises:
            RuntimeError: non-finite activations, reported with layer index.
        """
        B, C, S, d = batch.tokens.shape
        x = batch.tokens.reshape(B, C * S, d)
        key_pad = batch.padding.reshape(B, C * S)
        for i, block in enumerate(self.blocks):
            x = block(x, key_padding_mask=key_pad)
            if not torch.isfinite(x).all():
                raise RuntimeError(
                    f"non-finite activations after pose transformer layer {i}"
                )
        seq = x.view(B, C, S, d)
        cls = seq[:, :, 0]
        return seq, cls


_overflow_warned = False


def _rank_tracks(track_ids: np.ndarray, validity: np.ndarray,
                 max_persons: int) -> dict:
    """Canonical track -> rank map for one sample, capped at ``max_persons``.

    Ranks are assigned by ascending global track id over the union of tracks
    present in any view; overflow keeps the tracks with most valid joints.
    """
    global _overflow_warned
    ids = np.unique(track_ids[track_ids >= 0])
    if ids.size > max_persons:
        if not _overflow_warned:
            warnings.warn(
                f"clip has {ids.size} tracks, keeping the {max_persons} with "
                f"most valid joints", RuntimeWarning)
            _overflow_warned = True
        scores = np.array([(validity * (track_ids == t)[..., None]).sum()
                           for t in ids])
        keep = ids[np.argsort(-scores, kind="stable")[:max_persons]]
        ids = np.sort(keep)
    return {int(t): r for r, t in enumerate(ids)}


def apply_mask(encoder: PoseSequenceEncoder, batch: PoseSequenceBatch,
               ratio: float, seed) -> Tuple[PoseSequenceBatch, torch.Tensor,
                                            torch.Tensor, torch.Tensor]:
    """Replace a random subset of pose tokens with the MASK embedding.

    Exactly floor(ratio * num_maskable) tokens are drawn uniformly without
    replacement over the whole batch; CLS and PAD positions are never
    eligible.  Masked tokens keep their positional embeddings.

    Returns (masked batch, mask_index (K, 3) of (b, c, s), target coordinates
    (K, 2, N_j), target validity (K, N_j)).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    candidates = torch.nonzero(batch.maskable)  # (N, 3)
    k = int(ratio * candidates.shape[0])
    if k == 0:
        empty = torch.zeros(0, dtype=torch.long)
        nj = batch.target_valid.shape[-1]
        return batch, empty.view(0, 3), \
            torch.zeros(0, 2, nj, dtype=batch.target_coords.dtype), \
            torch.zeros(0, nj, dtype=torch.bool)
    pick = np.random.default_rng(seed).choice(candidates.shape[0], size=k,
                                              replace=False)
    pick.sort()
    chosen = candidates[torch.as_tensor(pick)]
    b_i, c_i, s_i = chosen[:, 0], chosen[:, 1], chosen[:, 2]
    tokens = batch.tokens.clone()
    tokens[b_i, c_i, s_i] = encoder.mask_token + batch.pos[b_i, c_i, s_i]
    masked = replace(batch, tokens=tokens)
    return masked, chosen, batch.target_coords[b_i, c_i, s_i], \
        batch.target_valid[b_i, c_i, s_i]


class MaskedPoseDecoder(nn.Module):
    """Two attention blocks + linear head predicting coordinates of masked tokens."""

    def __init__(self, embed_dim: int = 128, num_heads: int = 4,
                 num_joints: int = 17, num_layers: int = 2):
        super().__init__()
        self.num_joints = num_joints
        self.blocks = nn.ModuleList([
            TransformerBlock(embed_dim, num_heads) for _ in range(num_layers)
        ])
        self.head = nn.Linear(embed_dim, 2 * num_joints)

    def forward(self, seq: torch.Tensor, padding: torch.Tensor,
                mask_index: torch.Tensor) -> torch.Tensor:
        """Predict (K, 2, N_j) coordinates for the masked positions.

        Args:
            seq: encoder output (B, C, S, D).
            padding: (B, C, S) bool PAD flags.
            mask_index: (K, 3) rows of (b, c, s); K may be zero.
        """
        if mask_index.shape[0] == 0:
            return torch.zeros(0, 2, self.num_joints, device=seq.device)
        B, C, S, d = seq.shape
        x = seq.reshape(B, C * S, d)
        key_pad = padding.reshape(B, C * S)
        for block in self.blocks:
            x = block(x, key_padding_mask=key_pad)
        x = x.view(B, C, S, d)
        picked = x[mask_index[:, 0], mask_index[:, 1], mask_index[:, 2]]
        return self.head(picked).view(-1, 2, self.num_joints)


class VideoEncoder(nn.Module):
    """F: frames of one view -> embedding I^c; views share all weights."""

    def __init__(self, config: VideoEncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch = nn.Conv3d(3, d, kernel_size=config.cube,
                               stride=config.cube)
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        n = config.num_patch_tokens
        self.register_buffer("pos_table",
                             sincos_table(torch.arange(n + 1), d))
        self.blocks = nn.ModuleList([
            TransformerBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_layers)
        ])

    def forward_tokens(self, frames: torch.Tensor) -> torch.Tensor:
        """Token sequence (N, 1 + num_patches, D) for frames (N, T, 3, H, W)."""
        n = frames.shape[0]
        x = self.patch(frames.transpose(1, 2))     # (N, D, T', H', W')
        x = x.flatten(2).transpose(1, 2)           # (N, patches, D)
        cls = self.cls_token.view(1, 1, -1).expand(n, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_table.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """Per-view embeddings I (B, C, D) for frames (B, C, T, 3, H, W)."""
        B, C = frames.shape[:2]
        flat = frames.reshape(B * C, *frames.shape[2:])
        tokens = self.forward_tokens(flat)
        return tokens[:, 0].view(B, C, -1)


@dataclass
class EmbeddingSet:
    """Per-view embeddings of both modalities, raw and L2-normalized."""

    video: torch.Tensor       # (B, C, D) raw I
    pose: torch.Tensor        # (B, C, D) raw J
    video_n: torch.Tensor     # unit-norm copies
    pose_n: torch.Tensor

    @classmethod
    def from_raw(cls, video: torch.Tensor, pose: torch.Tensor) -> "EmbeddingSet":
        return cls(video, pose, l2_normalize(video), l2_normalize(pose))


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)
