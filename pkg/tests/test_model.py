import json

import numpy as np
import pytest
import torch

from auvmae.errors import DataError
from auvmae.knowledge import estimate_inter_knowledge, estimate_intra_knowledge
from auvmae.labels import LabelSequence, class_weights, occurrence_rates
from auvmae.losses import LossWeights, inter_loss, intra_loss, total_loss, weighted_bce
from auvmae.model import (
    Checkpoint,
    ClassifierHead,
    Encoder,
    ModelConfig,
    PredictionBatch,
    _deterministic_init,
    _forward_probs,
    decode_reconstruct,
    encode,
    finetune,
    load_checkpoint,
    predict,
    pretrain,
    save_checkpoint,
)
from auvmae.synth import default_generator_spec, default_render_spec, sample_dataset
from auvmae.video import VideoClip, make_tube_mask, no_mask, tokenize

TINY = dict(
    clip_len=8, height=16, width=16, channels=1, tubelet_t=2, patch=4,
    embed_dim=32, encoder_depth=2, encoder_heads=4, decoder_dim=32, decoder_depth=1,
    pretrain_steps=40, finetune_steps=30,
)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def tiny_dataset(num_clips=6, seed=3, clip_len=8):
    gspec = default_generator_spec()
    rspec = default_render_spec(noise_sigma=0.05)
    rspec.height = rspec.width = 16
    rspec.regions = {1: (2, 2, 4, 4), 2: (2, 10, 4, 4), 3: (10, 2, 4, 4), 4: (10, 10, 4, 4)}
    return sample_dataset(gspec, rspec, num_clips=num_clips, clip_len=clip_len, seed=seed)


def tiny_priors(dataset):
    labels = [s for _, s in dataset]
    return (
        (estimate_intra_knowledge(labels), estimate_inter_knowledge(labels)),
        class_weights(occurrence_rates(labels)),
    )


class TestModelConfig:
    def test_rejects_bad_divisibility(self):
        with pytest.raises(DataError):
            tiny_config(clip_len=7)
        with pytest.raises(DataError):
            tiny_config(height=17)

    def test_rejects_bad_ratio(self):
        with pytest.raises(DataError):
            tiny_config(pretrain_mask_ratio=1.0)

    def test_rate_for_level(self):
        cfg = tiny_config()
        assert cfg.rate_for_level("video") == 1
        assert cfg.rate_for_level("patch") == 1
        assert cfg.rate_for_level("frame") == 4
        with pytest.raises(DataError):
            cfg.rate_for_level("pixel")

    def test_dict_round_trip(self):
        cfg = tiny_config(au_ids=(1, 2, 3, 4))
        back = ModelConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_rejects_unknown_fields(self):
        with pytest.raises(DataError, match="unknown config"):
            ModelConfig.from_dict({"nonsense": 1})


class TestEncode:
    def test_latent_count_matches_visible(self):
        cfg = tiny_config()
        encoder = Encoder(cfg)
        _deterministic_init(encoder, 0)
        clip = tiny_dataset(num_clips=1)[0][0]
        grid = tokenize(clip, cfg.tubelet_t, cfg.patch)
        mask = make_tube_mask(grid.blocks, grid.spatial, 0.5, seed=1)
        latents = encode(grid, mask, encoder)
        assert latents.shape == (int(mask.visible.sum()), cfg.embed_dim)

    def test_no_mask_encodes_every_token(self):
        cfg = tiny_config()
        encoder = Encoder(cfg)
        _deterministic_init(encoder, 0)
        clip = tiny_dataset(num_clips=1)[0][0]
        grid = tokenize(clip, cfg.tubelet_t, cfg.patch)
        latents = encode(grid, no_mask(grid.blocks, grid.spatial), encoder)
        assert latents.shape == (grid.blocks * grid.spatial, cfg.embed_dim)

    def test_permutation_consistency(self):
        cfg = tiny_config()
        encoder = Encoder(cfg)
        _deterministic_init(encoder, 7)
        rng = np.random.default_rng(0)
        count = cfg.blocks() * cfg.spatial
        vectors = torch.tensor(rng.random((count, cfg.token_dim)), dtype=torch.float32)
        positions = torch.arange(count)
        base = encoder(vectors, positions)
        perm = torch.tensor(rng.permutation(count))
        shuffled = encoder(vectors[perm], positions[perm])
        unshuffled = torch.empty_like(shuffled)
        unshuffled[perm] = shuffled
        assert torch.allclose(base, unshuffled, atol=1e-5)

    def test_rejects_all_masked(self):
        cfg = tiny_config()
        encoder = Encoder(cfg)
        clip = tiny_dataset(num_clips=1)[0][0]
        grid = tokenize(clip, cfg.tubelet_t, cfg.patch)
        from auvmae.video import MaskSpec

        empty = MaskSpec(visible=np.zeros((grid.blocks, grid.spatial), dtype=bool), kind="tube", ratio=0.9)
        with pytest.raises(DataError, match="at least one visible"):
            encode(grid, empty, encoder)


class TestDecode:
    def test_reconstruction_count_and_finite_loss(self):
        from auvmae.losses import reconstruction_loss
        from auvmae.model import Decoder, _grid_tensor

        cfg = tiny_config()
        encoder, decoder = Encoder(cfg), Decoder(cfg)
        _deterministic_init(encoder, 1)
        _deterministic_init(decoder, 2)
        clip = tiny_dataset(num_clips=1)[0][0]
        grid = tokenize(clip, cfg.tubelet_t, cfg.patch)
        mask = make_tube_mask(grid.blocks, grid.spatial, 0.5, seed=4)
        recon = decode_reconstruct(encode(grid, mask, encoder), mask, decoder)
        assert recon.shape == (int(mask.masked.sum()), cfg.token_dim)
        loss = reconstruction_loss(_grid_tensor(grid), recon, mask)
        assert torch.isfinite(loss) and loss.item() > 0


class TestClassify:
    @pytest.mark.parametrize("level", ["video", "frame", "patch"])
    def test_output_rows_match_original_length(self, level):
        rate = 4 if level == "frame" else 1
        cfg = tiny_config(downsample_rate=rate)
        encoder, head = Encoder(cfg), ClassifierHead(cfg)
        _deterministic_init(encoder, 3)
        _deterministic_init(head, 4)
        clip = tiny_dataset(num_clips=1)[0][0]
        probs = _forward_probs(encoder, head, clip, level, cfg, mask_seed=9)
        assert probs.shape == (cfg.clip_len, cfg.au_count)
        vals = probs.detach().numpy()
        assert (vals > 0).all() and (vals < 1).all()

    def test_classify_wraps_prediction_batch(self):
        from auvmae.model import classify
        from auvmae.video import no_mask

        cfg = tiny_config()
        encoder, head = Encoder(cfg), ClassifierHead(cfg)
        _deterministic_init(encoder, 5)
        _deterministic_init(head, 6)
        clip = tiny_dataset(num_clips=1)[0][0]
        grid = tokenize(clip, cfg.tubelet_t, cfg.patch)
        mask = no_mask(grid.blocks, grid.spatial)
        batch = classify(encode(grid, mask, encoder), mask, clip.num_frames, head,
                         level="video", clip_id=clip.clip_id)
        assert isinstance(batch, PredictionBatch)
        assert batch.probs.shape == (cfg.clip_len, cfg.au_count)
        assert batch.level == "video" and batch.clip_id == clip.clip_id


class TestPretrain:
    def test_loss_decreases(self):
        dataset = tiny_dataset(num_clips=4)
        cfg = tiny_config(pretrain_steps=120)
        losses = []
        pretrain([c for c, _ in dataset], cfg, on_step=lambda s, r: losses.append(r.recon))
        assert len(losses) == 120
        assert losses[-1] < 0.8 * losses[0]

    def test_bit_identical_checkpoints(self, tmp_path):
        dataset = tiny_dataset(num_clips=2)
        cfg = tiny_config(pretrain_steps=15)
        a = pretrain([c for c, _ in dataset], cfg)
        b = pretrain([c for c, _ in dataset], cfg)
        pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(pa, a)
        save_checkpoint(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError, match="empty"):
            pretrain([], tiny_config())

    def test_wrong_clip_shape_rejected(self):
        cfg = tiny_config()
        clip = VideoClip(pixels=np.zeros((4, 16, 16, 1), dtype=np.float32))
        with pytest.raises(DataError, match="does not match config"):
            pretrain([clip], cfg)


@pytest.fixture(scope="module")
def trained():
    dataset = tiny_dataset(num_clips=6)
    priors, weights = tiny_priors(dataset)
    cfg = tiny_config(pretrain_steps=30, finetune_steps=40)
    init = pretrain([c for c, _ in dataset], cfg)
    reports = []
    ckpt = finetune(
        dataset, priors, weights, "video", init,
        on_step=lambda s, r: reports.append((s, r)),
    )
    return dataset, priors, weights, init, ckpt, reports


class TestFinetunePredict:

    def test_loss_reports_logged_every_step(self, trained):
        *_, reports = trained
        assert len(reports) == 40
        doc = json.loads(reports[0][1].json_line(step=0))
        assert set(doc) == {"step", "total", "cls", "intra", "inter"}

    def test_config_carries_au_ids(self, trained):
        *_, ckpt, _ = trained
        assert ckpt.config.au_ids == (1, 2, 3, 4)

    def test_predict_deterministic(self, trained):
        dataset, *_, ckpt, _ = trained
        clip = dataset[0][0]
        a = predict(ckpt, clip, "video")
        b = predict(ckpt, clip, "video")
        assert np.array_equal(a.probs, b.probs)
        assert a.probs.shape == (8, 4)
        assert a.level == "video"

    def test_patch_predict_mask_seed_contract(self, trained):
        dataset, *_, ckpt, _ = trained
        clip = dataset[0][0]
        a = predict(ckpt, clip, "patch", mask_seed=1)
        b = predict(ckpt, clip, "patch", mask_seed=1)
        c = predict(ckpt, clip, "patch", mask_seed=2)
        assert np.array_equal(a.probs, b.probs)
        assert a.probs.shape == c.probs.shape == (8, 4)

    def test_checkpoint_round_trip_preserves_predictions(self, trained, tmp_path):
        dataset, *_, ckpt, _ = trained
        path = tmp_path / "ft.bin"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        save_checkpoint(tmp_path / "ft2.bin", back)
        assert path.read_bytes() == (tmp_path / "ft2.bin").read_bytes()
        clip = dataset[0][0]
        assert np.array_equal(predict(ckpt, clip, "video").probs, predict(back, clip, "video").probs)

    def test_frame_level_requires_matching_pretrain_rate(self, trained):
        dataset, priors, weights, init, *_ = trained
        with pytest.raises(DataError, match="rate"):
            finetune(dataset, priors, weights, "frame", init)

    def test_prior_dimension_mismatch_rejected(self, trained):
        dataset, _, weights, init, *_ = trained
        bad = [
            LabelSequence(au_ids=(1, 2), frames=s.frames[:, :2], clip_id=s.clip_id)
            for _, s in dataset
        ]
        bad_priors = (estimate_intra_knowledge(bad), estimate_inter_knowledge(bad))
        with pytest.raises(DataError, match="priors sized"):
            finetune(dataset, bad_priors, weights, "video", init)

    def test_predict_needs_head(self, trained):
        dataset, _, _, init, _, _ = trained
        clip = dataset[0][0]
        with pytest.raises(DataError, match="missing parameters"):
            predict(init, clip, "video")

    def test_gradient_flows_through_knowledge_losses(self, trained):
        dataset, priors, weights, *_ = trained
        cfg = tiny_config()
        encoder, head = Encoder(cfg), ClassifierHead(cfg)
        _deterministic_init(encoder, 11)
        _deterministic_init(head, 12)
        clip, seq = dataset[0]
        probs = _forward_probs(encoder, head, clip, "video", cfg, mask_seed=0)
        labels = torch.from_numpy(seq.frames.astype(np.float32))
        loss = total_loss(
            weighted_bce(probs, labels, weights),
            intra_loss(probs, priors[0]),
            inter_loss(probs, priors[1]),
            LossWeights(),
        )
        loss.backward()
        grads = [p.grad for p in head.parameters()]
        assert all(g is not None for g in grads)
        assert sum(float(g.abs().sum()) for g in grads) > 0

    def test_straight_through_alone_reaches_head(self, trained):
        dataset, priors, *_ = trained
        cfg = tiny_config()
        encoder, head = Encoder(cfg), ClassifierHead(cfg)
        _deterministic_init(encoder, 13)
        _deterministic_init(head, 14)
        clip, _ = dataset[0]
        probs = _forward_probs(encoder, head, clip, "video", cfg, mask_seed=0)
        intra_loss(probs, priors[0]).backward()
        total = sum(float(p.grad.abs().sum()) for p in head.parameters() if p.grad is not None)
        assert total > 0


class TestCheckpointFormat:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "none.bin")

    def test_value_round_trip(self, tmp_path):
        cfg = tiny_config()
        params = {
            "a.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b.bias": np.array([1.5, -2.5], dtype=np.float64),
            "c.count": np.array([7], dtype=np.int64),
        }
        path = tmp_path / "ck.bin"
        save_checkpoint(path, Checkpoint(config=cfg, params=params, step=12))
        back = load_checkpoint(path)
        assert back.step == 12
        assert back.config == cfg
        for name, arr in params.items():
            assert back.params[name].dtype == arr.dtype
            assert np.array_equal(back.params[name], arr)
