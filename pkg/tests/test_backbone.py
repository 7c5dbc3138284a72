import dataclasses

import numpy as np
import pytest

import segprompt.tensor as T
from segprompt.backbone import (
    PretrainedBundle, ViTBackbone, ViTConfig, build_backbone, load_pretrained,
    pretext_pretrain, pretext_pretrain_stem, save_pretrained,
)
from segprompt.data import GeneratorConfig, generate_pretext
from segprompt.errors import ConfigurationError, ContractError, DimensionError
from segprompt.layers import ResNetStem
from segprompt.tensor import Tensor
from segprompt.util import substream

DESK = ViTConfig()


def small_pretext(n_videos=3, frames=16, seed=0):
    cfg = dataclasses.replace(GeneratorConfig(), pretext_videos=n_videos,
                              frames_per_video=frames, seed=seed)
    return generate_pretext(cfg)


class TestViTConfig:
    def test_desk_defaults(self):
        assert DESK.n_img == 16

    def test_vitb16_geometry(self):
        cfg = ViTConfig(image_size=224, patch_size=16, embed_dim=768,
                        num_layers=0, num_heads=12, mlp_ratio=4.0)
        assert cfg.n_img == 196

    def test_divisibility_errors(self):
        with pytest.raises(ConfigurationError):
            ViTConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigurationError):
            ViTConfig(embed_dim=65, num_heads=4)


class TestPatchify:
    def test_desk_token_count(self):
        bb = build_backbone(DESK, seed=0)
        tokens = bb.patchify(Tensor(np.zeros((3, 32, 32))))
        assert tokens.shape == (16, 64)

    def test_vitb16_token_count(self):
        cfg = ViTConfig(image_size=224, patch_size=16, embed_dim=768,
                        num_layers=0, num_heads=12, mlp_ratio=4.0)
        bb = build_backbone(cfg, seed=0)
        tokens = bb.patchify(Tensor(np.zeros((1, 3, 224, 224))))
        assert tokens.shape == (1, 196, 768)

    def test_zero_image_gives_position_embeddings(self):
        bb = build_backbone(DESK, seed=1)
        tokens = bb.patchify(Tensor(np.zeros((3, 32, 32))))
        np.testing.assert_allclose(tokens.data, bb.pos_embed.data[1:], atol=1e-15)

    def test_wrong_size_rejected(self):
        bb = build_backbone(DESK, seed=0)
        with pytest.raises(DimensionError):
            bb.patchify(Tensor(np.zeros((3, 16, 16))))


class TestEncode:
    def test_zero_layers_is_final_norm(self):
        cfg = dataclasses.replace(DESK, num_layers=0)
        bb = build_backbone(cfg, seed=2)
        x = substream(3, "x").normal(size=(5, 64))
        out = bb.encode(Tensor(x))
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        np.testing.assert_allclose(out.data, (x - mu) / np.sqrt(var + 1e-6), atol=1e-12)

    @pytest.mark.parametrize("n_total", [197, 248])
    def test_length_preserved(self, n_total):
        bb = build_backbone(DESK, seed=4)
        out = bb.encode(Tensor(substream(5, "t").normal(size=(n_total, 64))))
        assert out.shape == (n_total, 64)

    def test_permutation_equivariance(self):
        bb = build_backbone(DESK, seed=6)
        tokens = substream(7, "t").normal(size=(10, 64))
        out = bb.encode(Tensor(tokens)).data
        swapped = tokens.copy()
        swapped[[3, 7]] = swapped[[7, 3]]
        out_swapped = bb.encode(Tensor(swapped)).data
        expect = out.copy()
        expect[[3, 7]] = expect[[7, 3]]
        np.testing.assert_allclose(out_swapped, expect, atol=1e-10)

    def test_dim_mismatch(self):
        bb = build_backbone(DESK, seed=0)
        with pytest.raises(DimensionError):
            bb.encode(Tensor(np.zeros((5, 32))))

    def test_nan_free_on_bounded_inputs(self):
        bb = build_backbone(DESK, seed=8)
        tokens = substream(9, "t").uniform(-10, 10, size=(20, 64))
        assert np.isfinite(bb.encode(Tensor(tokens)).data).all()


class TestLayerPrompts:
    def test_single_layer_equals_appended(self):
        cfg = dataclasses.replace(DESK, num_layers=1)
        bb = build_backbone(cfg, seed=10)
        tokens = Tensor(substream(11, "t").normal(size=(6, 64)))
        prompt = Tensor(substream(12, "p").normal(size=(3, 64)))
        deep = bb.encode_with_layer_prompts(tokens, [prompt])
        shallow = bb.encode(T.concat([tokens, prompt], axis=0))
        np.testing.assert_allclose(deep.data, shallow.data, atol=1e-12)

    def test_empty_prompts_equal_plain_encode(self):
        bb = build_backbone(DESK, seed=13)
        tokens = Tensor(substream(14, "t").normal(size=(6, 64)))
        prompts = [Tensor(np.zeros((0, 64))) for _ in range(DESK.num_layers)]
        np.testing.assert_allclose(
            bb.encode_with_layer_prompts(tokens, prompts).data,
            bb.encode(tokens).data, atol=1e-15,
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_deep_differs_from_shallow(self, seed):
        bb = build_backbone(DESK, seed=100 + seed)
        rng = substream(seed, "tokens")
        tokens = Tensor(rng.normal(size=(6, 64)))
        banks = [Tensor(rng.normal(size=(2, 64))) for _ in range(DESK.num_layers)]
        deep_cls = bb.encode_with_layer_prompts(tokens, banks).data[0]
        shallow_cls = bb.encode(T.concat([tokens, banks[0]], axis=0)).data[0]
        assert not np.allclose(deep_cls, shallow_cls)

    def test_bank_count_must_match_layers(self):
        bb = build_backbone(DESK, seed=15)
        with pytest.raises(DimensionError):
            bb.encode_with_layer_prompts(Tensor(np.zeros((4, 64))),
                                         [Tensor(np.zeros((2, 64)))])


class TestStateRoundTrip:
    def test_state_load_state(self):
        bb = build_backbone(DESK, seed=16)
        bb2 = build_backbone(DESK, seed=17)
        bb2.load_state(bb.state())
        x = Tensor(substream(18, "x").normal(size=(5, 64)))
        np.testing.assert_array_equal(bb.encode(x).data, bb2.encode(x).data)

    def test_key_mismatch_rejected(self):
        bb = build_backbone(DESK, seed=16)
        state = bb.state()
        state.pop("cls_token")
        with pytest.raises(ConfigurationError):
            bb.load_state(state)


class TestPretext:
    @pytest.mark.parametrize("seed", range(3))
    def test_pretext_beats_chance(self, seed):
        samples = small_pretext(n_videos=6, frames=30, seed=seed)
        bb = build_backbone(DESK, seed=seed)
        _, report = pretext_pretrain(bb, samples, epochs=30, seed=seed)
        assert report.holdout_accuracy > 0.5, (
            f"seed {seed}: pretext accuracy {report.holdout_accuracy} not above 0.5"
        )

    def test_backbone_frozen_after_completion(self):
        samples = small_pretext(n_videos=2, frames=8)
        bb = build_backbone(DESK, seed=0)
        bb, _ = pretext_pretrain(bb, samples, epochs=1, seed=0)
        assert bb.pretrained
        assert all(not t.requires_grad for _, t in bb.parameters())

    def test_checkpoint_roundtrip_identical_forward(self, tmp_path):
        samples = small_pretext(n_videos=2, frames=8)
        bb = build_backbone(DESK, seed=1)
        bb, _ = pretext_pretrain(bb, samples, epochs=1, seed=1,
                                 ckpt_path=tmp_path / "bb.ckpt")
        bundle = load_pretrained(tmp_path / "bb.ckpt")
        bb2 = bundle.build_backbone()
        tokens = Tensor(substream(2, "t").normal(size=(7, 64)))
        assert bb.encode(tokens).data.tobytes() == bb2.encode(tokens).data.tobytes()

    def test_overlap_with_eval_videos_rejected(self):
        samples = small_pretext(n_videos=2, frames=8)
        bb = build_backbone(DESK, seed=0)
        with pytest.raises(ContractError, match="overlap"):
            pretext_pretrain(bb, samples, epochs=1,
                             eval_video_ids={samples[0].video_id})

    def test_stem_pretext_runs(self):
        samples = small_pretext(n_videos=2, frames=12)
        stem = ResNetStem(substream(0, "stem"))
        stem, report = pretext_pretrain_stem(stem, samples, epochs=2, seed=0)
        assert 0.0 <= report.holdout_accuracy <= 1.0
        assert len(report.epoch_losses) == 2


class TestPretrainedBundle:
    def test_save_load_with_stem(self, tmp_path):
        bb = build_backbone(DESK, seed=3)
        stem = ResNetStem(substream(4, "stem"))
        save_pretrained(tmp_path / "full.ckpt", bb, stem, meta={"pretext_checksum": "abc"})
        bundle = load_pretrained(tmp_path / "full.ckpt")
        assert bundle.vit_cfg == DESK
        assert bundle.meta["pretext_checksum"] == "abc"
        assert set(bundle.stem_state) == {n for n, _ in stem.parameters()}
        bb2 = bundle.build_backbone()
        assert not any(t.requires_grad for _, t in bb2.parameters())

    def test_missing_config_block(self, tmp_path):
        from segprompt.checkpoint import save_checkpoint
        save_checkpoint(tmp_path / "raw.ckpt", {"backbone.cls_token": np.zeros(4)})
        with pytest.raises(ConfigurationError, match="config"):
            load_pretrained(tmp_path / "raw.ckpt")
