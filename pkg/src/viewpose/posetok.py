"""Discrete pose tokenizer: one 2D pose -> M codebook tokens -> embedding π.

A small vector-quantized autoencoder over joint coordinates.  The encoder maps
an imputed pose (coordinates plus a validity channel) to M pre-quantization
feature vectors, each snapped to its nearest codebook row with a
straight-through gradient.  The quantized codes are decoded back to
coordinates for the reconstruction loss and, separately, concatenated and
projected to the D-dimensional embedding π consumed by the sequence encoders.
After training the whole module is frozen; downstream models treat π as input.

Also hosts the trainable MLP baseline used by the tokenizer ablation.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .tensorio import TensorIOError, load_tensor_dir, save_tensor_dir


_CYCLE_WEIGHT = 0.5   # weight of the re-tokenization stability term
_EMA_DECAY = 0.99     # codebook moving-average decay


@dataclass
class TokenizerConfig:
    """Architecture and training knobs for the pose tokenizer."""

    num_tokens: int = 8        # M: codes per pose
    codebook_size: int = 256   # V
    code_dim: int = 16
    output_dim: int = 128      # D: dimension of π
    hidden_dim: int = 256
    commitment_weight: float = 0.25
    num_joints: int = 17
    epochs: int = 150
    batch_size: int = 256
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ValueError(f"num_tokens must be >= 1, got {self.num_tokens}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.output_dim <= 0:
            raise ValueError(f"output_dim must be > 0, got {self.output_dim}")
        if self.code_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("code_dim and hidden_dim must be > 0")
        if self.commitment_weight < 0:
            raise ValueError("commitment_weight must be >= 0")


@dataclass
class PoseEmbedding:
    """Tokenized pose: embedding π, its code indices and a validity flag."""

    pi: torch.Tensor            # (D,)
    token_indices: torch.Tensor  # (M,) long, in [0, V)
    valid: bool


class PoseTokenizer(nn.Module):
    """VQ autoencoder over single 2D poses; frozen after :func:`train_tokenizer`.

    Input layout per pose: 2*N_j imputed coordinates followed by N_j validity
    indicators.  Invalid joints are replaced by the per-joint mean coordinate
    observed during training (stored in the ``joint_mean`` buffer).
    """

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        nj, h = config.num_joints, config.hidden_dim
        m, cd = config.num_tokens, config.code_dim
        in_dim = 3 * nj
        self.encoder = nn.Sequential(
            nn.Linear(in_dim, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, m * cd),
        )
        self.decoder = nn.Sequential(
            nn.Linear(m * cd, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, 2 * nj),
        )
        self.projector = nn.Linear(m * cd, config.output_dim)
        self.codebook = nn.Parameter(torch.empty(config.codebook_size, cd))
        nn.init.uniform_(self.codebook, -1.0 / config.codebook_size,
                         1.0 / config.codebook_size)
        self.pad_embedding = nn.Parameter(torch.zeros(config.output_dim))
        self.register_buffer("joint_mean", torch.full((2, nj), 0.5))
        self.register_buffer("usage", torch.zeros(config.codebook_size,
                                                  dtype=torch.long))
        self.frozen = False

    def impute(self, poses: torch.Tensor, validity: torch.Tensor) -> torch.Tensor:
        """Dense encoder input: mean-imputed coords + validity channel.

        Args:
            poses: (B, 2, N_j) normalized coordinates.
            validity: (B, N_j) bool.
        Returns:
            (B, 3*N_j) float tensor.
        """
        v = validity.to(poses.dtype).unsqueeze(1)              # (B, 1, N_j)
        mean = self.joint_mean.to(poses.dtype).unsqueeze(0)    # (1, 2, N_j)
        filled = poses * v + mean * (1.0 - v)
        return torch.cat([filled.flatten(1), validity.to(poses.dtype)], dim=1)

    def encode_features(self, poses: torch.Tensor,
                        validity: torch.Tensor) -> torch.Tensor:
        """Pre-quantization features, (B, M, code_dim)."""
        z = self.encoder(self.impute(poses, validity))
        return z.view(-1, self.config.num_tokens, self.config.code_dim)

    def quantize(self, z_e: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Nearest-codebook assignment.

        Returns (z_q, indices) with z_q carrying no gradient path to z_e.
        """
        flat = z_e.reshape(-1, self.config.code_dim)
        d2 = (flat.pow(2).sum(1, keepdim=True)
              - 2.0 * flat @ self.codebook.to(flat.dtype).t()
              + self.codebook.to(flat.dtype).pow(2).sum(1))
        indices = d2.argmin(dim=1)
        z_q = self.codebook.to(flat.dtype)[indices].view_as(z_e)
        return z_q, indices.view(z_e.shape[:-1])

    def forward(self, poses: torch.Tensor, validity: torch.Tensor):
        """Training pass: reconstruction, commitment and cycle losses.

        The codebook itself is updated by exponential moving averages in
        :func:`train_tokenizer`, not by a loss term.  The cycle term pins the
        encoding of each reconstruction back onto the codes it was decoded
        from, stabilizing re-tokenization of decoded poses.

        Returns (recon (B, 2, N_j), indices (B, M), losses dict).
        """
        z_e = self.encode_features(poses, validity)
        z_q, indices = self.quantize(z_e)
        z_st = z_e + (z_q - z_e).detach()  # straight-through
        recon = self.decoder(z_st.flatten(1)).view_as(poses)
        v = validity.to(poses.dtype).unsqueeze(1)
        denom = v.sum().clamp_min(1.0) * 2.0
        recon_loss = (((recon - poses) * v) ** 2).sum() / denom
        commit = (z_e - z_q.detach()).pow(2).mean()
        all_valid = torch.ones_like(validity)
        z_cycle = self.encode_features(recon.detach(), all_valid)
        cycle = (z_cycle - z_q.detach()).pow(2).mean()
        losses = {
            "recon": recon_loss,
            "commit": commit,
            "cycle": cycle,
            "total": recon_loss + self.config.commitment_weight * commit
                     + _CYCLE_WEIGHT * cycle,
        }
        return recon, indices, losses

    def decode_indices(self, indices: torch.Tensor) -> torch.Tensor:
        """Reconstruct poses (B, 2, N_j) from code indices (B, M)."""
        z_q = self.codebook[indices.reshape(-1)].view(
            indices.shape[0], self.config.num_tokens * self.config.code_dim)
        return self.decoder(z_q).view(-1, 2, self.config.num_joints)

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True

    def weight_fingerprint(self) -> str:
        """Hash of all parameters/buffers; constant iff nothing changed."""
        import hashlib
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _as_tensor_batch(poses, validity, num_joints: int):
    poses_t = torch.as_tensor(np.asarray(poses), dtype=torch.float32)
    if poses_t.ndim == 2:
        poses_t = poses_t.unsqueeze(0)
    if poses_t.shape[-2:] != (2, num_joints):
        raise ValueError(f"expected poses (..., 2, {num_joints}), "
                         f"got {tuple(poses_t.shape)}")
    if validity is None:
        valid_t = torch.ones(poses_t.shape[0], num_joints, dtype=torch.bool)
    else:
        valid_t = torch.as_tensor(np.asarray(validity), dtype=torch.bool)
        if valid_t.ndim == 1:
            valid_t = valid_t.unsqueeze(0)
    return poses_t, valid_t


def train_tokenizer(poses, config: TokenizerConfig,
                    validity=None) -> PoseTokenizer:
    """Train the VQ pose autoencoder and return it frozen.

    Args:
        poses: (N, 2, N_j) array of normalized poses, N >= 1000.
        config: TokenizerConfig.
        validity: optional (N, N_j) bool mask; missing joints are
            mean-imputed and excluded from the reconstruction target.

    Raises:
        ValueError: fewer than 1000 training poses.
        RuntimeError: loss became non-finite (divergence).
    """
    poses_t, valid_t = _as_tensor_batch(poses, validity, config.num_joints)
    n = poses_t.shape[0]
    if n < 1000:
        raise ValueError(f"need at least 1000 training poses, got {n}")
    torch.manual_seed(config.seed)
    tok = PoseTokenizer(config)

    # per-joint mean over valid observations, for imputation
    v = valid_t.float()
    counts = v.sum(0).clamp_min(1.0)                      # (N_j,)
    mean = (poses_t * v.unsqueeze(1)).sum(0) / counts     # (2, N_j)
    tok.joint_mean.copy_(mean)

    # seed the codebook from encoder outputs on real poses; a blind uniform
    # init at the wrong scale starves most codes from the first step on
    rng = np.random.default_rng(config.seed)
    v_size = config.codebook_size
    with torch.no_grad():
        warm = rng.choice(n, size=min(n, 2048), replace=False)
        feats = tok.encode_features(poses_t[warm], valid_t[warm])
        flat = feats.reshape(-1, config.code_dim)
        pick = rng.choice(flat.shape[0], size=v_size,
                          replace=flat.shape[0] < v_size)
        jitter = torch.as_tensor(
            rng.normal(0.0, 1e-4, size=(v_size, config.code_dim)),
            dtype=flat.dtype)
        tok.codebook.copy_(flat[pick] + jitter)

    # the codebook is EMA-maintained, everything else Adam-trained
    params = [p for name, p in tok.named_parameters() if name != "codebook"]
    opt = torch.optim.Adam(params, lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.epochs))
    ema_count = torch.ones(v_size)
    ema_sum = tok.codebook.detach().clone()
    steps_per_epoch = max(1, n // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_usage = torch.zeros(v_size, dtype=torch.long)
        last_z = None
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            pb = poses_t[idx]
            vb = valid_t[idx]
            _, indices, losses = tok(pb, vb)
            if not torch.isfinite(losses["total"]):
                raise RuntimeError(
                    f"tokenizer training diverged at epoch {epoch} step {step}: "
                    f"recon={losses['recon'].item():.4g} "
                    f"commit={losses['commit'].item():.4g}"
                )
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            with torch.no_grad():
                last_z = tok.encode_features(pb, vb).detach()
                flat_z = last_z.reshape(-1, config.code_dim)
                flat_i = tok.quantize(last_z)[1].flatten()
                counts = torch.bincount(flat_i, minlength=v_size).float()
                sums = torch.zeros(v_size, config.code_dim)
                sums.index_add_(0, flat_i, flat_z)
                ema_count.mul_(_EMA_DECAY).add_(counts, alpha=1 - _EMA_DECAY)
                ema_sum.mul_(_EMA_DECAY).add_(sums, alpha=1 - _EMA_DECAY)
                total_count = ema_count.sum()
                smoothed = ((ema_count + 1e-5) / (total_count + v_size * 1e-5)
                            * total_count)
                tok.codebook.copy_(ema_sum / smoothed.unsqueeze(1))
                epoch_usage += counts.long()
        sched.step()
        tok.usage += epoch_usage
        _reseed_dead_codes(tok, epoch_usage, last_z, ema_count, ema_sum, rng)

    _separate_duplicate_codes(tok, rng)
    tok.freeze()
    return tok


def _reseed_dead_codes(tok: PoseTokenizer, epoch_usage: torch.Tensor,
                       feature_pool: Optional[torch.Tensor],
                       ema_count: torch.Tensor, ema_sum: torch.Tensor,
                       rng: np.random.Generator) -> None:
    """Move codes unused for a whole epoch onto random encoder outputs.

    The EMA statistics of reseeded codes are reset so the stale history does
    not immediately drag them back.
    """
    dead = torch.nonzero(epoch_usage == 0).flatten()
    if dead.numel() == 0 or feature_pool is None:
        return
    flat = feature_pool.reshape(-1, tok.config.code_dim)
    pick = rng.integers(0, flat.shape[0], size=dead.numel())
    noise = torch.as_tensor(
        rng.normal(0.0, 1e-3, size=(dead.numel(), tok.config.code_dim)),
        dtype=tok.codebook.dtype)
    with torch.no_grad():
        tok.codebook[dead] = flat[pick] + noise
        ema_count[dead] = 1.0
        ema_sum[dead] = tok.codebook[dead]


def _separate_duplicate_codes(tok: PoseTokenizer, rng: np.random.Generator) -> None:
    """Nudge exactly-coincident codebook rows apart (distinctness invariant)."""
    with torch.no_grad():
        cb = tok.codebook
        for i in range(1, cb.shape[0]):
            while (cb[:i] == cb[i]).all(dim=1).any():
                cb[i] += torch.as_tensor(
                    rng.normal(0.0, 1e-4, size=cb.shape[1]), dtype=cb.dtype)


def encode_batch(tok: PoseTokenizer, poses, validity=None):
    """Tokenize a batch of poses.

    Args:
        tok: frozen tokenizer.
        poses: (B, 2, N_j).
        validity: optional (B, N_j) bool.
    Returns:
        pi (B, D), indices (B, M) long, valid (B,) bool.  Poses with no valid
        joint receive the tokenizer's PAD embedding and index 0.
    """
    poses_t, valid_t = _as_tensor_batch(poses, validity, tok.config.num_joints)
    with torch.no_grad():
        z_e = tok.encode_features(poses_t, valid_t)
        z_q, indices = tok.quantize(z_e)
        pi = tok.projector(z_q.flatten(1))
    any_valid = valid_t.any(dim=1)
    pi = torch.where(any_valid.unsqueeze(1), pi,
                     tok.pad_embedding.unsqueeze(0).to(pi.dtype))
    indices = torch.where(any_valid.unsqueeze(1), indices,
                          torch.zeros_like(indices))
    return pi, indices, any_valid


def encode_pose(tok: PoseTokenizer, pose, validity=None) -> PoseEmbedding:
    """Tokenize one pose (2, N_j) into a :class:`PoseEmbedding`."""
    pi, indices, valid = encode_batch(tok, pose, validity)
    return PoseEmbedding(pi=pi[0], token_indices=indices[0],
                         valid=bool(valid[0]))


class MlpPoseBaseline(nn.Module):
    """Two-layer perceptron on flat coordinates; the non-tokenized baseline.

    Unlike the tokenizer it stays trainable end-to-end during downstream
    training.  Invalid joints are zero-imputed with the validity mask
    appended as extra channels.
    """

    def __init__(self, num_joints: int = 17, hidden_dim: int = 128,
                 output_dim: int = 128):
        super().__init__()
        self.num_joints = num_joints
        self.net = nn.Sequential(
            nn.Linear(3 * num_joints, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, output_dim),
        )

    def forward(self, poses: torch.Tensor, validity: torch.Tensor) -> torch.Tensor:
        v = validity.to(poses.dtype)
        x = torch.cat([(poses * v.unsqueeze(-2)).flatten(-2), v], dim=-1)
        return self.net(x)


def save_tokenizer(path: str, tok: PoseTokenizer) -> None:
    """Checkpoint as flat tensors + config sidecar (bit-exact round trip)."""
    arrays = {name: t.detach().cpu().numpy()
              for name, t in tok.state_dict().items()}
    save_tensor_dir(path, arrays, {"kind": "pose_tokenizer",
                                   "config": asdict(tok.config)})


def load_tokenizer(path: str) -> PoseTokenizer:
    """Load a tokenizer checkpoint; the result is frozen."""
    arrays, meta = load_tensor_dir(path)
    if meta.get("kind") != "pose_tokenizer":
        raise TensorIOError(f"{path} is not a pose tokenizer checkpoint")
    config = TokenizerConfig(**meta["config"])
    tok = PoseTokenizer(config)
    state = {name: torch.as_tensor(arr) for name, arr in arrays.items()}
    tok.load_state_dict(state)
    tok.freeze()
    return tok


def poses_from_dataset(dataset, split: str, limit: int = 20000,
                       seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Harvest person-frame poses (and validity) from a scene dataset split.

    Iterates clips in order, collecting every (view, frame, person) slot with
    at least one valid joint, then subsamples to ``limit`` with a fixed seed.
    """
    poses, valids = [], []
    for pid, ci in dataset.clip_ids(split):
        clip = dataset.get_clip(pid, ci)
        present = clip.validity.any(axis=-1)  # (C, T, N_p)
        c_idx, t_idx, p_idx = np.nonzero(present)
        poses.append(clip.poses2d[c_idx, t_idx, p_idx])
        valids.append(clip.validity[c_idx, t_idx, p_idx])
    poses_arr = np.concatenate(poses, axis=0)
    valid_arr = np.concatenate(valids, axis=0)
    if poses_arr.shape[0] > limit:
        pick = np.random.default_rng(seed).choice(poses_arr.shape[0], size=limit,
                                                  replace=False)
        pick.sort()
        poses_arr, valid_arr = poses_arr[pick], valid_arr[pick]
    return poses_arr.astype(np.float32), valid_arr
