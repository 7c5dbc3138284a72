import numpy as np
import pytest

import segprompt.tensor as T
from segprompt.backbone import ViTConfig, build_backbone
from segprompt.errors import ConfigurationError, ContractError, DimensionError
from segprompt.layers import cross_entropy
from segprompt.model import (
    ModelConfig, PromptSet, SegEncoder, SegMap, StoneClassifier, TuningMode,
    assemble, binarize, crop_to_foreground, encode_segmap,
)
from segprompt.optim import Adam, zero_grads
from segprompt.tensor import Tape, Tensor, backward
from segprompt.util import substream

DESK = ViTConfig()


def make_model(mode, seed=0, backbone_seed=1, **kw):
    backbone = build_backbone(DESK, seed=backbone_seed)
    backbone.set_trainable(False)
    return StoneClassifier(ModelConfig(mode, **kw), DESK, seed, backbone=backbone)


def random_mask(seed, size=32, fill=0.3):
    rng = substream(seed, "mask")
    vals = np.where(rng.uniform(size=(size, size)) < fill, 1.0, -1.0)
    vals[0, 0] = 1.0  # never empty
    return SegMap(vals)


class TestSegMap:
    def test_requires_plus_minus_one(self):
        with pytest.raises(ContractError):
            SegMap(np.zeros((4, 4)))

    def test_requires_2d(self):
        with pytest.raises(DimensionError):
            SegMap(np.ones((2, 2, 2)))

    def test_foreground(self):
        m = SegMap(np.array([[1.0, -1.0], [-1.0, -1.0]]))
        assert m.foreground_fraction() == 0.25
        assert m.height == m.width == 2


class TestBinarize:
    def test_threshold_rule(self):
        m = binarize(np.array([[0.7, 0.3]]))
        np.testing.assert_array_equal(m.values, [[1.0, -1.0]])

    def test_all_zero_is_background(self):
        m = binarize(np.zeros((3, 3)))
        assert (m.values == -1.0).all()

    def test_exact_half_is_foreground(self):
        m = binarize(np.full((2, 2), 0.5))
        assert (m.values == 1.0).all()

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            binarize(np.array([[1.2]]))


class TestSegEncoder:
    def zeroed_encoder(self, l_s=16, include_indicator=True):
        enc = SegEncoder(DESK, l_s, substream(0, "enc"),
                         include_indicator=include_indicator)
        for _, t in enc.stem.parameters():
            t.data[:] = 0.0
        enc.proj.weight.data[:] = 0.0
        enc.proj.bias.data[:] = 0.0
        return enc

    def test_zeroed_encoder_gives_ps_plus_r(self):
        enc = self.zeroed_encoder()
        out = encode_segmap(enc, random_mask(1))
        np.testing.assert_allclose(out.data, enc.p_s.data + enc.r.data, atol=1e-15)

    def test_difference_cancels_ps_and_r(self):
        enc = SegEncoder(DESK, 16, substream(2, "enc"))
        a = encode_segmap(enc, random_mask(3)).data
        b = encode_segmap(enc, random_mask(4)).data
        diff = a - b
        # re-randomize the additive tokens; the difference must not move
        enc.p_s.data = substream(5, "ps").normal(size=enc.p_s.shape)
        enc.r.data = substream(6, "r").normal(size=enc.r.shape)
        a2 = encode_segmap(enc, random_mask(3)).data
        b2 = encode_segmap(enc, random_mask(4)).data
        np.testing.assert_allclose(a2 - b2, diff, atol=1e-12)

    def test_ls49_pools_to_7x7(self):
        enc = SegEncoder(DESK, 49, substream(7, "enc"))
        assert enc.side == 7
        out = enc.encode(np.stack([random_mask(8).values]))
        assert out.shape == (1, 49, 64)

    def test_additivity_of_indicator(self):
        enc = SegEncoder(DESK, 9, substream(9, "enc"))
        mask = random_mask(10)
        full = encode_segmap(enc, mask).data
        r = enc.r.data.copy()
        enc.r.data = np.zeros_like(enc.r.data)
        without = encode_segmap(enc, mask).data
        np.testing.assert_allclose(full - without, np.broadcast_to(r, full.shape), atol=1e-12)

    def test_indicator_distinguishability(self):
        # zeroed encoders and zero extra tokens: with r the seg tokens differ
        # from the extra tokens, without r they coincide
        enc = self.zeroed_encoder()
        enc.p_s.data[:] = 0.0
        seg_tokens = encode_segmap(enc, random_mask(11)).data
        extra = np.zeros_like(seg_tokens)
        assert not np.allclose(seg_tokens, extra)

        enc_no_r = self.zeroed_encoder(include_indicator=False)
        enc_no_r.p_s.data[:] = 0.0
        seg_tokens = encode_segmap(enc_no_r, random_mask(11)).data
        np.testing.assert_allclose(seg_tokens, extra, atol=1e-15)

    def test_non_square_ls_rejected(self):
        with pytest.raises(ConfigurationError):
            SegEncoder(DESK, 12, substream(12, "enc"))

    def test_pool_bound_rejected(self):
        with pytest.raises(ConfigurationError):
            SegEncoder(DESK, 81, substream(13, "enc"))  # 9x9 grid from 8x8 features


class TestAssemble:
    def test_degenerate_plain_vit(self):
        cls = Tensor(np.zeros(8))
        z_x = Tensor(np.zeros((4, 8)))
        seq = assemble(cls, z_x)
        assert len(seq) == 5
        assert seq.roles == ("cls",) + ("image",) * 4

    def test_paper_constants_length_248(self):
        d = 16
        seq = assemble(Tensor(np.zeros(d)), Tensor(np.zeros((196, d))),
                       Tensor(np.zeros((49, d))), Tensor(np.zeros((2, d))))
        assert len(seq) == 248

    def test_paper_constant_role_partitions(self):
        d = 16
        seq = assemble(Tensor(np.zeros(d)), Tensor(np.zeros((196, d))),
                       Tensor(np.zeros((49, d))), Tensor(np.zeros((2, d))))
        assert seq.role_indices("cls") == [0]
        assert seq.role_indices("image") == list(range(1, 197))
        assert seq.role_indices("seg") == list(range(197, 246))
        assert seq.role_indices("extra") == list(range(246, 248))

    def test_role_order_invariant(self):
        d = 8
        seq = assemble(Tensor(np.zeros(d)), Tensor(np.zeros((3, d))),
                       Tensor(np.zeros((2, d))), Tensor(np.zeros((1, d))))
        order = {"cls": 0, "image": 1, "seg": 2, "extra": 3}
        ranks = [order[r] for r in seq.roles]
        assert ranks == sorted(ranks)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            assemble(Tensor(np.zeros(8)), Tensor(np.zeros((3, 8))),
                     Tensor(np.zeros((2, 4))))

    def test_batched_broadcast(self):
        d = 8
        seq = assemble(Tensor(np.zeros((2, 1, d))), Tensor(np.zeros((2, 3, d))),
                       Tensor(np.zeros((2, 2, d))), Tensor(np.zeros((1, d))))
        assert seq.tokens.shape == (2, 7, d)


class TestModelConfig:
    def test_ablation_only_for_segprompt(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(TuningMode.VPT, no_indicator=True)
        ModelConfig(TuningMode.SEGPROMPT, no_indicator=True)

    def test_non_square_ls(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(TuningMode.SEGPROMPT, l_s=10)

    def test_mode_names_are_cli_labels(self):
        assert [m.value for m in TuningMode] == [
            "ft", "ft-crop", "ft-concat", "resnet", "resnet-crop", "resnet-concat",
            "vpt", "vpt-deep", "segprompt", "segprompt-deep",
        ]


class TestForward:
    def batch(self, n=2, seed=20):
        rng = substream(seed, "imgs")
        return rng.uniform(0.0, 1.0, size=(n, 3, 32, 32))

    def test_segprompt_all_background_is_finite(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        masks = [SegMap(np.full((32, 32), -1.0)) for _ in range(2)]
        logits = model.forward(self.batch(), masks)
        assert logits.shape == (2, 2)
        assert np.isfinite(logits.data).all()

    def test_ft_crop_full_foreground_equals_ft(self):
        imgs = self.batch()
        masks = [SegMap(np.ones((32, 32))) for _ in range(2)]
        ft = make_model(TuningMode.FT, seed=3, backbone_seed=4)
        crop = make_model(TuningMode.FT_CROP, seed=3, backbone_seed=4)
        np.testing.assert_allclose(crop.forward(imgs, masks).data,
                                   ft.forward(imgs).data, atol=1e-12)

    def test_ft_concat_starts_at_ft_behaviour(self):
        imgs = self.batch()
        masks = [random_mask(21), random_mask(22)]
        ft = make_model(TuningMode.FT, seed=5, backbone_seed=6)
        concat = make_model(TuningMode.FT_CONCAT, seed=5, backbone_seed=6)
        np.testing.assert_allclose(concat.forward(imgs, masks).data,
                                   ft.forward(imgs).data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_segprompt_sensitive_to_mask_translation(self, seed):
        model = make_model(TuningMode.SEGPROMPT, seed=seed, backbone_seed=seed + 50, l_s=16)
        # the projector ships zero-initialized (mask pathway grows during
        # training); give it weight so the mechanism itself is exercised
        rng = substream(seed, "probe")
        model.seg_encoder.proj.weight.data = rng.normal(
            0.0, 0.05, size=model.seg_encoder.proj.weight.shape)
        imgs = self.batch(n=1, seed=seed)
        vals = np.full((32, 32), -1.0)
        vals[4:12, 4:12] = 1.0
        shifted = np.roll(vals, 10, axis=1)
        a = model.forward(imgs, [SegMap(vals)]).data
        b = model.forward(imgs, [SegMap(shifted)]).data
        assert not np.allclose(a, b)

    def test_missing_mask_rejected(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        with pytest.raises(ContractError, match="segmentation map"):
            model.forward(self.batch())

    def test_mask_shape_mismatch(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        bad = [SegMap(np.ones((16, 16))), SegMap(np.ones((16, 16)))]
        with pytest.raises(DimensionError):
            model.forward(self.batch(), bad)

    def test_vpt_and_deep_modes_run(self):
        imgs = self.batch()
        for mode in (TuningMode.VPT, TuningMode.VPT_DEEP):
            logits = make_model(mode, seed=7).forward(imgs)
            assert logits.shape == (2, 2)
        masks = [random_mask(23), random_mask(24)]
        for mode in (TuningMode.SEGPROMPT_DEEP,):
            logits = make_model(mode, seed=8, l_s=9).forward(imgs, masks)
            assert logits.shape == (2, 2)

    def test_resnet_modes_run(self):
        imgs = self.batch()
        masks = [random_mask(25), random_mask(26)]
        for mode, needs_mask in ((TuningMode.RESNET, False),
                                 (TuningMode.RESNET_CROP, True),
                                 (TuningMode.RESNET_CONCAT, True)):
            model = StoneClassifier(ModelConfig(mode), DESK, 9)
            logits = model.forward(imgs, masks if needs_mask else None)
            assert logits.shape == (2, 2)


class TestCrop:
    def test_empty_foreground_falls_back_to_full_image(self):
        img = substream(30, "img").uniform(size=(3, 8, 8))
        mask = SegMap(np.full((8, 8), -1.0))
        np.testing.assert_array_equal(crop_to_foreground(img, mask), img)

    def test_crop_zeroes_background_and_resizes(self):
        img = np.ones((3, 8, 8))
        vals = np.full((8, 8), -1.0)
        vals[2:6, 2:6] = 1.0
        out = crop_to_foreground(img, SegMap(vals))
        assert out.shape == (3, 8, 8)
        np.testing.assert_allclose(out, 1.0)  # box interior is all foreground

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            crop_to_foreground(np.ones((3, 8, 8)), SegMap(np.ones((4, 4))))


class TestTrainableParameters:
    def test_segprompt_disjoint_from_backbone(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        trainable_ids = {id(t) for _, t in model.trainable_parameters()}
        backbone_ids = {id(t) for _, t in model.backbone.parameters()}
        assert trainable_ids.isdisjoint(backbone_ids)
        assert not any(name.startswith("backbone.") for name, _ in model.trainable_parameters())

    def test_count_ordering_vpt_segprompt_ft(self):
        counts = {}
        for mode in (TuningMode.VPT, TuningMode.SEGPROMPT, TuningMode.FT):
            model = make_model(mode, l_s=16) if mode.is_segprompt else make_model(mode)
            counts[mode] = sum(t.size for _, t in model.trainable_parameters())
        assert counts[TuningMode.VPT] < counts[TuningMode.SEGPROMPT] < counts[TuningMode.FT]

    def test_vpt_parameter_count_formula(self):
        model = make_model(TuningMode.VPT, vpt_tokens=8)
        count = sum(t.size for _, t in model.trainable_parameters())
        classifier = sum(t.size for _, t in model.classifier.parameters())
        assert count == 8 * DESK.embed_dim + classifier

    def test_ft_includes_backbone(self):
        model = make_model(TuningMode.FT)
        names = {name for name, _ in model.trainable_parameters()}
        assert any(n.startswith("backbone.") for n in names)

    def test_counts_sum_to_total(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        trainable, frozen = model.parameter_counts()
        total = sum(t.size for _, t in model.all_parameters())
        assert trainable + frozen == total


class TestOneStepFreezing:
    def test_backbone_untouched_encoder_moves(self):
        model = make_model(TuningMode.SEGPROMPT, l_s=16)
        imgs = substream(40, "img").uniform(size=(4, 3, 32, 32))
        masks = [random_mask(41 + i) for i in range(4)]
        labels = np.array([0, 1, 0, 1])
        backbone_before = {k: v.copy() for k, v in model.backbone.state().items()}
        encoder_before = {n: t.data.copy() for n, t in model.seg_encoder.parameters()}
        trainables = model.trainable_parameters()
        zero_grads(trainables)
        with Tape():
            loss = cross_entropy(model.forward(imgs, masks), labels)
            backward(loss)
        Adam(lr=1e-3).step(trainables)
        after = model.backbone.state()
        assert max(np.abs(after[k] - backbone_before[k]).max() for k in after) == 0.0
        assert all(t.grad is None for _, t in model.backbone.parameters())
        deltas = [np.abs(t.data - encoder_before[n]).max()
                  for n, t in model.seg_encoder.parameters()]
        assert max(deltas) > 0.0


class TestPromptSet:
    def test_shallow_and_deep(self):
        rng = substream(50, "p")
        shallow = PromptSet(8, 3, rng)
        assert shallow.tokens.shape == (3, 8)
        deep = PromptSet(8, 3, rng, num_layers=4)
        assert deep.tokens is None
        assert len(deep.banks) == 4

    def test_zero_length(self):
        assert PromptSet(8, 0, substream(51, "p")).tokens is None
