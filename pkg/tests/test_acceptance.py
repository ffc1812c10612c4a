"""Release gate: twelve end-to-end acceptance criteria.

Each test prints one verdict line (collected into a terminal summary block by
``conftest``) and then asserts at the stated tolerance.  The heavy fixtures —
the shipped benchmark corpus, its tokenizer, one pretraining run per
objective variant, and the downstream finetuning battery — are session-scoped
and shared by the trend criteria.
"""

import itertools
import json
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

import reference
from conftest import record_criterion
from viewpose.cli import OBJECTIVES, _loss_config, _mask_ratio
from viewpose.config import ExperimentConfig
from viewpose.downstream import (
    PoolingSpec,
    ProtocolSetup,
    pool_embeddings,
    run_loss_ablation,
    run_tokenizer_ablation,
    run_unimodal,
    run_view_count_ablation,
    stratified_fraction,
)
from viewpose.encoders import (
    EmbeddingSet,
    PoseEncoderConfig,
    PoseSequenceEncoder,
    VideoEncoder,
    VideoEncoderConfig,
)
from viewpose.objectives import (
    LossConfig,
    SegmentSampler,
    align_total,
    contrastive_total,
    cross_geo,
    in_geo,
    info_nce,
    masked_pose_loss,
)
from viewpose.posetok import (
    PoseTokenizer,
    TokenizerConfig,
    poses_from_dataset,
    train_tokenizer,
)
from viewpose.scenegen import (
    SceneConfig,
    build_dataset,
    generate_procedure,
    load_dataset,
    serialize_dataset,
)
from viewpose.tensorio import read_json
from viewpose.trainer import (
    PretrainModel,
    TrainConfig,
    build_optimizer,
    load_checkpoint,
    module_state_from,
    pretrain,
    pretrain_step,
    restore_optimizer,
    save_checkpoint,
)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BENCHMARK_CONFIG = os.path.join(ROOT, "configs", "benchmark.json")
DEFAULT_CONFIG = os.path.join(ROOT, "configs", "default.json")

# Downstream label fractions for the trend criteria.  The data-efficiency
# comparison is made at 10% and 100%; the ablation suites use 20% (small
# enough that representation quality, not label supply, dominates) and the
# view-count sweep uses the full labeled set.
UNIMODAL_FRACTION = 0.2
ABLATION_FRACTION = 0.2


# ---------------------------------------------------------------------------
# Session fixtures: benchmark corpus -> tokenizer -> checkpoints -> battery
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def bench_config():
    return ExperimentConfig.from_dict(read_json(BENCHMARK_CONFIG))


@pytest.fixture(scope="session")
def bench(bench_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    return build_dataset(bench_config.scene, bench_config.num_procedures,
                        str(root / "dataset"))


@pytest.fixture(scope="session")
def bench_tokenizer(bench, bench_config):
    poses, validity = poses_from_dataset(bench, "train")
    return train_tokenizer(poses, bench_config.tokenizer, validity=validity)


@pytest.fixture(scope="session")
def checkpoints(bench, bench_tokenizer, bench_config, tmp_path_factory):
    """One pretraining run per objective variant, full benchmark recipe."""
    root = tmp_path_factory.mktemp("pretrain")
    out = {}
    for objective in OBJECTIVES:
        torch.manual_seed(bench_config.pretrain.seed)
        model = PretrainModel(bench_config.video_encoder_config(),
                              bench_config.pose_encoder_config(),
                              decoder_layers=bench_config.model.decoder_layers)
        train_cfg = replace(bench_config.pretrain,
                            mask_ratio=_mask_ratio(bench_config, objective))
        path, rows = pretrain(bench, bench_tokenizer, model, train_cfg,
                              _loss_config(bench_config, objective),
                              run_dir=str(root / objective))
        out[objective] = {"checkpoint": path, "rows": rows}
    return out


@pytest.fixture(scope="session")
def setup(bench, bench_tokenizer, bench_config):
    return ProtocolSetup(bench, bench_config.video_encoder_config(),
                         bench_config.pose_encoder_config(),
                         bench_config.finetune, tokenizer=bench_tokenizer,
                         seeds=tuple(bench_config.protocol.seeds))


def _accuracy_runs(setup, init, fraction):
    accs = []
    for seed in setup.seeds:
        labeled = stratified_fraction(setup.dataset, "train", fraction, seed)
        bundle = setup.build(init=init, seed=seed)
        accs.append(setup.finetune_and_eval(bundle, labeled, seed).accuracy)
    return accs


@pytest.fixture(scope="session")
def battery(setup, checkpoints, bench_tokenizer):
    """Every downstream run the trend criteria share, computed once."""
    full = checkpoints["full"]["checkpoint"]
    clip_star = checkpoints["contrastive_only"]["checkpoint"]
    hash_before = bench_tokenizer.weight_fingerprint()

    results = {
        "acc10": {
            "scratch": _accuracy_runs(setup, None, 0.10),
            "full": _accuracy_runs(setup, full, 0.10),
            "contrastive_only": _accuracy_runs(setup, clip_star, 0.10),
        },
        "acc100": {
            "scratch": _accuracy_runs(setup, None, 1.00),
            "full": _accuracy_runs(setup, full, 1.00),
        },
        "unimodal": {
            modality: run_unimodal(setup, modality, full,
                                   fraction=UNIMODAL_FRACTION)
            for modality in ("video", "pose")
        },
        "view_count": run_view_count_ablation(setup, full, fraction=1.0),
        "loss_ablation": run_loss_ablation(
            setup, {m: checkpoints[m]["checkpoint"] for m in OBJECTIVES},
            fraction=ABLATION_FRACTION),
        "tokenizer_ablation": run_tokenizer_ablation(
            setup, fraction=ABLATION_FRACTION),
    }
    results["tokenizer_hash"] = (hash_before,
                                 bench_tokenizer.weight_fingerprint())
    return results


def _mean(values):
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# 1. Vectorized losses match brute-force references
# ---------------------------------------------------------------------------

class TestLossOracles:
    def test_criterion_1_loss_oracle_equivalence(self):
        t0 = time.time()
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 5))
            c = int(rng.integers(1, 4))
            d = int(rng.integers(2, 9))
            tau = float(rng.uniform(0.05, 0.5))
            video = torch.as_tensor(rng.normal(size=(n, c, d)))
            pose = torch.as_tensor(rng.normal(size=(n, c, d)))
            es = EmbeddingSet.from_raw(video, pose)
            config = LossConfig(temperature=tau)
            got = [x.item() for x in contrastive_total(es, config)[:4]]
            got += [cross_geo(es, config).item(), in_geo(es, config).item()]
            vn = es.video_n.numpy()
            pn = es.pose_n.numpy()
            want = list(reference.contrastive_ref(vn, pn, tau)[:4])
            want += [reference.cross_geo_ref(vn, pn),
                     reference.in_geo_ref(vn, pn)]
            k = int(rng.integers(1, 7))
            nj = int(rng.integers(1, 6))
            preds = torch.as_tensor(rng.normal(size=(k, 2, nj)))
            targets = torch.as_tensor(rng.normal(size=(k, 2, nj)))
            valid = torch.as_tensor(rng.random((k, nj)) < 0.8)
            got.append(masked_pose_loss(preds, targets, valid).item())
            want.append(reference.masked_mse_ref(preds.numpy(),
                                                 targets.numpy(),
                                                 valid.numpy()))
            for g, w in zip(got, want):
                worst = max(worst, abs(g - w))
        elapsed = time.time() - t0
        ok = worst <= 1e-10 and elapsed < 60.0
        record_criterion(
            f"[criterion  1] {'PASS' if ok else 'FAIL'} loss oracles: "
            f"max |vectorized - reference| {worst:.2e} (tol 1e-10), "
            f"{elapsed:.1f}s (< 60s)")
        assert worst <= 1e-10
        assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. Analytic gradients match central finite differences
# ---------------------------------------------------------------------------

def _fd_check(value_fn, checks, h=1e-6):
    """Max relative error of central differences vs recorded gradients.

    ``checks`` is a list of (tensor, gradient, coordinate-list) triples; the
    tensors are perturbed in place.
    """
    worst = 0.0
    for tensor, grad, coords in checks:
        for idx in coords:
            with torch.no_grad():
                orig = tensor[idx].item()
                tensor[idx] = orig + h
                up = value_fn()
                tensor[idx] = orig - h
                down = value_fn()
                tensor[idx] = orig
            fd = (up - down) / (2.0 * h)
            an = grad[idx].item()
            scale = max(abs(fd), abs(an))
            if scale < 1e-9:
                continue
            worst = max(worst, abs(fd - an) / scale)
    return worst


def _sample_coords(rng, tensor, count=3):
    flat = [tuple(int(rng.integers(0, s)) for s in tensor.shape)
            for _ in range(count)]
    return flat


class TestGradientChecks:
    def test_criterion_2_gradient_checks(self):
        t0 = time.time()
        torch.manual_seed(7)
        rng = np.random.default_rng(7)
        lc = LossConfig(temperature=0.2)

        # -- gradients w.r.t. embeddings (contrastive + geometric terms) --
        video = torch.tensor(rng.normal(size=(3, 2, 6)), requires_grad=True)
        pose = torch.tensor(rng.normal(size=(3, 2, 6)), requires_grad=True)

        def embed_loss():
            es = EmbeddingSet.from_raw(video, pose)
            con = contrastive_total(es, lc)[4]
            zero = torch.zeros((), dtype=video.dtype)
            return align_total(con, cross_geo(es, lc), in_geo(es, lc), zero,
                               lc.lambda_geo, lc.lambda_mask).item()

        es = EmbeddingSet.from_raw(video, pose)
        con = contrastive_total(es, lc)[4]
        zero = torch.zeros((), dtype=video.dtype)
        total = align_total(con, cross_geo(es, lc), in_geo(es, lc), zero,
                            lc.lambda_geo, lc.lambda_mask)
        total.backward()
        emb_err = _fd_check(
            embed_loss,
            [(video.data, video.grad, _sample_coords(rng, video, 6)),
             (pose.data, pose.grad, _sample_coords(rng, pose, 6))])

        # -- gradients w.r.t. module parameters through the full pipeline --
        tok = PoseTokenizer(TokenizerConfig(
            num_tokens=2, codebook_size=8, code_dim=3, output_dim=8,
            hidden_dim=8, epochs=1)).double()
        video_cfg = VideoEncoderConfig(embed_dim=8, num_heads=2, num_layers=1,
                                       clip_len=2, frame_size=(8, 8),
                                       cube=(1, 4, 4))
        pose_cfg = PoseEncoderConfig(embed_dim=8, num_heads=2, num_layers=1,
                                     num_views=2, max_persons=2, clip_len=2)
        model = PretrainModel(video_cfg, pose_cfg, decoder_layers=1).double()
        B, C, T, P, nj = 2, 2, 2, 2, 17
        frames = torch.as_tensor(rng.random((B, C, T, 3, 8, 8)))
        poses = torch.as_tensor(rng.random((B, C, T, P, 2, nj)))
        validity = torch.as_tensor(rng.random((B, C, T, P, nj)) < 0.9)
        tracks = torch.arange(P).view(1, 1, 1, P).expand(B, C, T, P).long()
        batch = {"frames": frames, "poses": poses, "validity": validity,
                 "tracks": tracks}

        def pipeline_loss():
            z_q, _ = tok.quantize(tok.encode_features(
                poses.reshape(-1, 2, nj), validity.reshape(-1, nj)))
            pi = tok.projector(z_q.flatten(1)).view(B, C, T, P, -1)
            total, _ = pretrain_step(model, pi, batch, lc,
                                     mask_ratio=0.5, mask_seed=[11, 0])
            return total

        for p in itertools.chain(tok.parameters(), model.parameters()):
            p.grad = None
        pipeline_loss().backward()
        groups = {
            "tokenizer projection": [tok.projector.weight,
                                     tok.projector.bias],
            "pose transformer": [model.pose.blocks[0].attn.in_proj_weight,
                                 model.pose.blocks[0].ffn[0].weight,
                                 model.pose.cls_token],
            "video encoder": [model.video.patch.weight,
                              model.video.blocks[0].ffn[0].weight,
                              model.video.cls_token],
            "masked decoder": [model.decoder.head.weight,
                               model.decoder.blocks[0].attn.in_proj_weight],
        }
        param_err = 0.0
        for name, params in groups.items():
            checks = [(p.data, p.grad, _sample_coords(rng, p, 3))
                      for p in params if p.grad is not None]
            assert checks, f"no gradients recorded for {name}"
            err = _fd_check(lambda: pipeline_loss().item(), checks, h=1e-6)
            param_err = max(param_err, err)

        elapsed = time.time() - t0
        ok = emb_err <= 1e-4 and param_err <= 1e-3 and elapsed < 300.0
        record_criterion(
            f"[criterion  2] {'PASS' if ok else 'FAIL'} gradient checks: "
            f"embeddings rel err {emb_err:.2e} (tol 1e-4), parameters "
            f"{param_err:.2e} (tol 1e-3), {elapsed:.1f}s (< 300s)")
        assert emb_err <= 1e-4
        assert param_err <= 1e-3
        assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 3. Closed-form loss values
# ---------------------------------------------------------------------------

class TestAnalyticValues:
    def test_criterion_3_analytic_loss_values(self):
        rng = np.random.default_rng(3)
        worst = 0.0

        a = torch.as_tensor(rng.normal(size=(1, 5)))
        worst = max(worst, abs(info_nce(a, a, 0.07).item()))

        anchors = torch.as_tensor(rng.normal(size=(6, 4)))
        one = torch.as_tensor(rng.normal(size=(1, 4)))
        uniform = one.expand(6, 4)
        worst = max(worst, abs(info_nce(anchors, uniform, 0.3).item()
                               - math.log(6.0)))

        video = torch.as_tensor(rng.normal(size=(4, 3, 8)))
        es = EmbeddingSet.from_raw(video, video.clone())
        config = LossConfig()
        worst = max(worst, abs(cross_geo(es, config).item()))
        worst = max(worst, abs(in_geo(es, config).item()))

        targets = torch.as_tensor(rng.normal(size=(5, 2, 7)))
        valid = torch.ones(5, 7, dtype=torch.bool)
        worst = max(worst,
                    abs(masked_pose_loss(targets.clone(), targets,
                                         valid).item()))
        delta = 0.37
        shifted = targets + delta
        worst = max(worst, abs(masked_pose_loss(shifted, targets,
                                                valid).item() - delta ** 2))

        ok = worst <= 1e-12
        record_criterion(
            f"[criterion  3] {'PASS' if ok else 'FAIL'} analytic values: "
            f"max deviation {worst:.2e} (tol 1e-12)")
        assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 4. Structural invariants of the encoders and pooling
# ---------------------------------------------------------------------------

class TestStructuralInvariants:
    def test_criterion_4_structural_invariants(self):
        import copy as copy_mod
        torch.manual_seed(0)
        rng = np.random.default_rng(42)
        pose_cfg = PoseEncoderConfig(embed_dim=32, num_heads=4, num_layers=2,
                                     num_views=3, max_persons=3, clip_len=4)
        encoder = PoseSequenceEncoder(pose_cfg)
        C, T, P, d = 3, 4, 3, 32
        B = 2
        pi = torch.as_tensor(rng.normal(size=(B, C, T, P, d)),
                             dtype=torch.float32)
        tracks = torch.full((B, C, T, P), -1, dtype=torch.long)
        tracks[:, :, :, 0] = 7
        tracks[:, :, :, 2] = 4
        poses = torch.as_tensor(rng.random((B, C, T, P, 2, 17)),
                                dtype=torch.float32)
        valid = torch.as_tensor(rng.random((B, C, T, P, 17)) < 0.9)
        valid &= (tracks >= 0).unsqueeze(-1)

        batch = encoder.build_sequence(pi, tracks, poses, valid)
        _, cls = encoder(batch)

        # PAD invariance: overwrite padded slots with noise
        tampered = replace(
            batch, tokens=batch.tokens
            + 1e3 * batch.padding.unsqueeze(-1).float()
            * torch.as_tensor(rng.normal(size=batch.tokens.shape),
                              dtype=torch.float32))
        _, cls_t = encoder(tampered)
        pad_dev = (cls - cls_t).abs().max().item()

        # view permutation equivariance (pose branch carries view embeddings)
        sigma = rng.permutation(C)
        permuted = copy_mod.deepcopy(encoder)
        with torch.no_grad():
            permuted.view_embed.copy_(encoder.view_embed[sigma])
        _, cls_s = permuted(permuted.build_sequence(
            pi[:, sigma], tracks[:, sigma], poses[:, sigma], valid[:, sigma]))
        pose_perm_dev = (cls_s - cls[:, sigma]).abs().max().item()

        video_cfg = VideoEncoderConfig(embed_dim=32, num_heads=4,
                                       num_layers=1, clip_len=2,
                                       frame_size=(16, 16), cube=(2, 8, 8))
        video = VideoEncoder(video_cfg)
        frames = torch.as_tensor(rng.random((B, C, 2, 3, 16, 16)),
                                 dtype=torch.float32)
        emb = video(frames)
        video_perm_dev = (video(frames[:, sigma])
                          - emb[:, sigma]).abs().max().item()
        perm_dev = max(pose_perm_dev, video_perm_dev)

        # mean pooling is invariant to the order views are listed in
        es = EmbeddingSet.from_raw(
            torch.as_tensor(rng.normal(size=(B, C, d)), dtype=torch.float32),
            torch.as_tensor(rng.normal(size=(B, C, d)), dtype=torch.float32))
        pooled = pool_embeddings(es, PoolingSpec(("video", "pose"),
                                                 tuple(range(C))))
        perm_views = tuple(int(v) for v in rng.permutation(C))
        pooled_p = pool_embeddings(es, PoolingSpec(("video", "pose"),
                                                   perm_views))
        shuffled = EmbeddingSet.from_raw(es.video[:, sigma], es.pose[:, sigma])
        pooled_s = pool_embeddings(shuffled,
                                   PoolingSpec(("video", "pose"),
                                               tuple(range(C))))
        pool_dev = max((pooled - pooled_p).abs().max().item(),
                       (pooled - pooled_s).abs().max().item())

        tokens_per_view = batch.tokens.shape[2]
        expected_tokens = P * T + 1
        big = VideoEncoderConfig(clip_len=8, frame_size=(224, 224),
                                 cube=(2, 16, 16))
        vision_tokens = big.num_patch_tokens

        ok = (pad_dev <= 1e-5 and perm_dev <= 1e-5 and pool_dev <= 1e-6
              and tokens_per_view == expected_tokens and vision_tokens == 784)
        record_criterion(
            f"[criterion  4] {'PASS' if ok else 'FAIL'} structural "
            f"invariants: PAD dev {pad_dev:.2e} (tol 1e-5), view-perm dev "
            f"{perm_dev:.2e} (tol 1e-5), pooling dev {pool_dev:.2e} "
            f"(tol 1e-6), tokens/view {tokens_per_view}=={expected_tokens}, "
            f"vision tokens {vision_tokens}==784")
        assert pad_dev <= 1e-5
        assert perm_dev <= 1e-5
        assert pool_dev <= 1e-6
        assert tokens_per_view == expected_tokens
        assert vision_tokens == 784


# ---------------------------------------------------------------------------
# 5. Sampler keeps batches temporally spread
# ---------------------------------------------------------------------------

class TestSamplerProperty:
    def test_criterion_5_batches_occupy_distinct_segments(self, bench):
        manifests = [bench.procedures[p] for p in bench.splits["train"]]
        sampler = SegmentSampler(manifests, batch_size=6, seed=42)
        lengths = {m.procedure_id: m.num_clips for m in manifests}
        violations = 0
        for _ in range(1000):
            batch = sampler.sample_batch()
            groups = {}
            for addr in batch:
                groups.setdefault(addr.procedure_id, []).append(
                    addr.clip_index)
            for pid, indices in groups.items():
                # exact integer partition of the timeline into k segments
                L, k = lengths[pid], len(indices)
                bounds = [-((-j * L) // k) for j in range(k + 1)]
                ordered = sorted(indices)
                if not all(bounds[j] <= idx < bounds[j + 1]
                           for j, idx in enumerate(ordered)):
                    violations += 1
        ok = violations == 0
        record_criterion(
            f"[criterion  5] {'PASS' if ok else 'FAIL'} sampler: "
            f"{violations} of 1000 batches with colliding temporal segments "
            f"(exact)")
        assert violations == 0


# ---------------------------------------------------------------------------
# 6. Default-configuration pretraining halves its loss within budget
# ---------------------------------------------------------------------------

class TestPretrainingSmoke:
    def test_criterion_6_default_pretraining(self, tmp_path):
        config = ExperimentConfig.from_dict(read_json(DEFAULT_CONFIG))
        ds = build_dataset(config.scene, config.num_procedures,
                           str(tmp_path / "dataset"))
        total_clips = sum(ds.num_clips(s) for s in ds.splits)
        poses, validity = poses_from_dataset(ds, "train")
        tok = train_tokenizer(poses, config.tokenizer, validity=validity)
        torch.manual_seed(config.pretrain.seed)
        model = PretrainModel(config.video_encoder_config(),
                              config.pose_encoder_config(),
                              decoder_layers=config.model.decoder_layers)
        t0 = time.time()
        _, rows = pretrain(ds, tok, model, config.pretrain, config.loss,
                           run_dir=str(tmp_path / "run"))
        elapsed = time.time() - t0
        by_epoch = {}
        for row in rows:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        first = _mean(by_epoch[min(by_epoch)])
        last = _mean(by_epoch[max(by_epoch)])
        ratio = last / first
        ok = ratio <= 0.5 and elapsed <= 1200.0
        record_criterion(
            f"[criterion  6] {'PASS' if ok else 'FAIL'} pretraining smoke: "
            f"{total_clips} clips, epoch-mean ratio {ratio:.3f} (<= 0.50), "
            f"{elapsed/60:.1f} min (<= 20 min)")
        assert ratio <= 0.5
        assert elapsed <= 1200.0


# ---------------------------------------------------------------------------
# 7.-10. Trend criteria on the shared downstream battery
# ---------------------------------------------------------------------------

class TestDataEfficiencyTrend:
    def test_criterion_7_pretraining_gap(self, battery):
        full10 = _mean(battery["acc10"]["full"])
        scratch10 = _mean(battery["acc10"]["scratch"])
        clip10 = _mean(battery["acc10"]["contrastive_only"])
        full100 = _mean(battery["acc100"]["full"])
        scratch100 = _mean(battery["acc100"]["scratch"])
        gap10 = 100.0 * (full10 - scratch10)
        gap100 = 100.0 * (full100 - scratch100)
        ok = gap10 >= 3.0 and full10 >= clip10 and gap100 < gap10
        record_criterion(
            f"[criterion  7] {'PASS' if ok else 'FAIL'} data efficiency: "
            f"10% gap {gap10:.1f} pts (>= 3.0), full {100*full10:.1f} vs "
            f"contrastive-only {100*clip10:.1f} (>=), 100% gap {gap100:.1f} "
            f"< 10% gap {gap10:.1f}")
        assert gap10 >= 3.0
        assert full10 >= clip10
        assert gap100 < gap10


class TestUnimodalTrend:
    def test_criterion_8_unimodal_finetuning(self, battery):
        deltas = {}
        for modality in ("video", "pose"):
            summary = battery["unimodal"][modality]["summary"]
            deltas[modality] = (summary["pretrained"]["accuracy"]["mean"]
                                - summary["scratch"]["accuracy"]["mean"])
        ok = all(v >= 0.0 for v in deltas.values())
        record_criterion(
            f"[criterion  8] {'PASS' if ok else 'FAIL'} unimodal trend: "
            f"pretrained - scratch = video {100*deltas['video']:+.1f} pts, "
            f"pose {100*deltas['pose']:+.1f} pts (each >= 0)")
        assert deltas["video"] >= 0.0
        assert deltas["pose"] >= 0.0


class TestViewCountTrend:
    def test_criterion_9_view_count_monotone(self, battery):
        boxes = battery["view_count"]["box_stats"]
        medians = [boxes[str(n)]["median"] for n in range(1, len(boxes) + 1)]
        ok = all(b >= a for a, b in zip(medians, medians[1:]))
        pretty = " <= ".join(f"{100*m:.1f}" for m in medians)
        record_criterion(
            f"[criterion  9] {'PASS' if ok else 'FAIL'} view-count trend: "
            f"median pose-only accuracy by views {pretty}")
        assert ok


class TestAblationDirections:
    def test_criterion_10_ablation_directions(self, battery):
        table = {row["method"]: row["drop_points"]
                 for row in battery["loss_ablation"]["table"]}
        both_removed_largest = (
            table["contrastive_only"] > table["with_geo"]
            and table["contrastive_only"] > table["with_mask"])
        summary = battery["tokenizer_ablation"]["summary"]
        acc = {k: v["accuracy"]["mean"] for k, v in summary.items()}
        vq_ge_mlp = acc["vq/pos"] >= acc["mlp/pos"]
        pos_ge_nopos = acc["vq/pos"] >= acc["vq/nopos"]
        ok = both_removed_largest and vq_ge_mlp and pos_ge_nopos
        record_criterion(
            f"[criterion 10] {'PASS' if ok else 'FAIL'} ablations: drops "
            f"geo-only {table['with_mask']:.1f} / mask-only "
            f"{table['with_geo']:.1f} / neither {table['contrastive_only']:.1f}"
            f" pts (largest: neither); tokens {100*acc['vq/pos']:.1f} vs mlp "
            f"{100*acc['mlp/pos']:.1f}, no-pos {100*acc['vq/nopos']:.1f}")
        assert both_removed_largest
        assert vq_ge_mlp
        assert pos_ge_nopos


# ---------------------------------------------------------------------------
# 11. Tokenizer quality and freeze integrity
# ---------------------------------------------------------------------------

class TestTokenizerQuality:
    def test_criterion_11_tokenizer_quality(self, bench, bench_tokenizer,
                                            battery):
        te_p, te_v = poses_from_dataset(bench, "val", seed=1)
        pt = torch.as_tensor(te_p)
        vt = torch.as_tensor(te_v)
        with torch.no_grad():
            z_q, _ = bench_tokenizer.quantize(
                bench_tokenizer.encode_features(pt, vt))
            recon = bench_tokenizer.decoder(z_q.flatten(1)).view_as(pt)
            err = ((recon - pt) ** 2).sum(dim=1).sqrt()[vt].mean().item()
            _, idx = bench_tokenizer.quantize(
                bench_tokenizer.encode_features(pt, vt))
        used = idx.flatten().unique().numel()
        utilization = used / bench_tokenizer.config.codebook_size
        before, after = battery["tokenizer_hash"]
        ok = err < 0.03 and utilization > 0.25 and before == after
        record_criterion(
            f"[criterion 11] {'PASS' if ok else 'FAIL'} tokenizer: held-out "
            f"per-joint error {err:.4f} (< 0.03), utilization "
            f"{utilization:.2f} (> 0.25), weight hash "
            f"{'constant' if before == after else 'CHANGED'} through "
            f"downstream training")
        assert err < 0.03
        assert utilization > 0.25
        assert before == after


# ---------------------------------------------------------------------------
# 12. Determinism and persistence
# ---------------------------------------------------------------------------

def _tiny_end_to_end(root):
    scene = SceneConfig(num_views=2, max_persons=2, clip_len=4,
                        frame_size=(16, 16), noise_std=0.005,
                        occlusion_prob=0.08, seed=5, imbalance_ratio=1.5,
                        segment_rounds=1, base_segment_clips=2)
    ds = build_dataset(scene, 8, os.path.join(root, "ds"))
    poses, validity = poses_from_dataset(ds, "train", limit=4000)
    tok = train_tokenizer(poses, TokenizerConfig(
        output_dim=32, hidden_dim=64, codebook_size=64, epochs=8),
        validity=validity)
    video_cfg = VideoEncoderConfig(embed_dim=32, num_heads=4, num_layers=1,
                                   clip_len=4, frame_size=(16, 16),
                                   cube=(2, 8, 8))
    pose_cfg = PoseEncoderConfig(embed_dim=32, num_heads=4, num_layers=1,
                                 num_views=2, max_persons=2, clip_len=4)
    torch.manual_seed(0)
    model = PretrainModel(video_cfg, pose_cfg, decoder_layers=1)
    tc = TrainConfig(phase="pretrain", epochs=2, batch_size=4, seed=0)
    ckpt, rows = pretrain(ds, tok, model, tc, LossConfig(batch_size=4),
                          run_dir=os.path.join(root, "pre"))
    setup = ProtocolSetup(ds, video_cfg, pose_cfg,
                          TrainConfig.finetune_defaults(epochs=2,
                                                        batch_size=4),
                          tokenizer=tok, seeds=(0,))
    bundle = setup.build(init=ckpt, seed=0)
    labeled = stratified_fraction(ds, "train", 1.0, 0)
    report = setup.finetune_and_eval(bundle, labeled, 0)
    metrics = rows + [report.to_dict()]
    return ds, ckpt, json.dumps(metrics, sort_keys=True)


def _reload_and_resave(ckpt, out):
    """Round trip: checkpoint -> live modules + optimizer -> checkpoint."""
    tensors, meta = load_checkpoint(ckpt)
    model = PretrainModel.from_config_dict(meta["model_config"])
    for prefix in ("video", "pose", "decoder"):
        getattr(model, prefix).load_state_dict(
            module_state_from(tensors, prefix))
    optimizer = build_optimizer(model.parameters(),
                                TrainConfig.from_dict(meta["train_config"]))
    restore_optimizer(optimizer, tensors, meta)
    clean = {k: v for k, v in meta.items()
             if k not in ("schema_version", "modules", "optimizer")}
    save_checkpoint(out, {"video": model.video, "pose": model.pose,
                          "decoder": model.decoder}, optimizer, clean)


class TestDeterminismAndPersistence:
    def test_criterion_12_determinism_and_persistence(self, tmp_path):
        ds1, ckpt1, metrics1 = _tiny_end_to_end(str(tmp_path / "a"))
        ds2, ckpt2, metrics2 = _tiny_end_to_end(str(tmp_path / "b"))
        runs_identical = metrics1 == metrics2

        # checkpoint round trip is byte-exact
        again = str(tmp_path / "again")
        _reload_and_resave(ckpt1, again)
        files1 = sorted(os.listdir(ckpt1))
        files2 = sorted(os.listdir(again))
        bytes_equal = files1 == files2 and all(
            open(os.path.join(ckpt1, f), "rb").read()
            == open(os.path.join(again, f), "rb").read() for f in files1)

        # dataset round trip is element-wise exact
        scene = SceneConfig(num_views=2, max_persons=2, clip_len=4,
                            frame_size=(16, 16), noise_std=0.01,
                            occlusion_prob=0.1, seed=9, imbalance_ratio=1.5,
                            segment_rounds=1, base_segment_clips=2)
        procedures = [generate_procedure(scene, i) for i in range(2)]
        out = str(tmp_path / "roundtrip")
        serialize_dataset(out, scene, procedures, {"train": [0, 1]})
        loaded = load_dataset(out)
        exact = True
        for pid, (manifest, clips) in enumerate(procedures):
            for clip in clips:
                got = loaded.get_clip(pid, clip.clip_index)
                exact &= np.array_equal(got.frames, clip.frames)
                exact &= np.array_equal(got.poses2d, clip.poses2d)
                exact &= np.array_equal(got.validity, clip.validity)
                exact &= np.array_equal(got.track_ids, clip.track_ids)
                exact &= got.label == clip.label

        ok = runs_identical and bytes_equal and exact
        record_criterion(
            f"[criterion 12] {'PASS' if ok else 'FAIL'} determinism: "
            f"seed-identical runs {'identical' if runs_identical else 'DIFFER'}"
            f", checkpoint round trip "
            f"{'byte-exact' if bytes_equal else 'DIFFERS'}, dataset round "
            f"trip {'exact' if exact else 'DIFFERS'}")
        assert runs_identical
        assert bytes_equal
        assert exact
