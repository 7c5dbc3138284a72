"""Segmentation-conditioned prompt tuning and every baseline tuning mode.

The segmentation encoder turns a binarized map into l_s tokens: the map is
run through the ResNet stem and a 1x1 projector, pooled to an s by s grid
(l_s = s*s), flattened row-major, then each token gets its learnable
position embedding plus a shared learnable indicator vector so the
transformer can tell segmentation tokens from image tokens. The assembled
sequence is always ordered (cls, image, seg, extra); shallow prompt modes
park their learnable tokens in the extra region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .backbone import ViTBackbone, ViTConfig
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Conv2d, Linear, Params, ResNetStem, prefixed
from .tensor import Tensor
from .util import bilinear_resize, normalize_images, substream, truncated_normal


class SegMap:
    """A 2-d segmentation map whose entries are exactly -1 or +1.

    +1 marks foreground (the region of interest), -1 background.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"segmentation map must be 2-d, got shape {arr.shape}")
        if not np.isin(arr, (-1.0, 1.0)).all():
            raise ContractError("segmentation map entries must be exactly -1 or +1")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def foreground(self) -> np.ndarray:
        return self.values > 0

    def foreground_fraction(self) -> float:
        return float(self.foreground.mean())

    def __eq__(self, other) -> bool:
        return isinstance(other, SegMap) and np.array_equal(self.values, other.values)


def binarize(prob_map, threshold: float = 0.5) -> SegMap:
    """Threshold a probability map: entries >= threshold become foreground."""
    arr = np.asarray(prob_map, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(
            f"probability map entries must lie in [0,1], found range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return SegMap(np.where(arr >= threshold, 1.0, -1.0))


class TuningMode(str, Enum):
    FT = "ft"
    FT_CROP = "ft-crop"
    FT_CONCAT = "ft-concat"
    RESNET = "resnet"
    RESNET_CROP = "resnet-crop"
    RESNET_CONCAT = "resnet-concat"
    VPT = "vpt"
    VPT_DEEP = "vpt-deep"
    SEGPROMPT = "segprompt"
    SEGPROMPT_DEEP = "segprompt-deep"

    @property
    def uses_mask(self) -> bool:
        return self in (TuningMode.FT_CROP, TuningMode.FT_CONCAT,
                        TuningMode.RESNET_CROP, TuningMode.RESNET_CONCAT,
                        TuningMode.SEGPROMPT, TuningMode.SEGPROMPT_DEEP)

    @property
    def is_resnet(self) -> bool:
        return self in (TuningMode.RESNET, TuningMode.RESNET_CROP, TuningMode.RESNET_CONCAT)

    @property
    def is_finetune(self) -> bool:
        return self in (TuningMode.FT, TuningMode.FT_CROP, TuningMode.FT_CONCAT) or self.is_resnet

    @property
    def is_vpt(self) -> bool:
        return self in (TuningMode.VPT, TuningMode.VPT_DEEP)

    @property
    def is_segprompt(self) -> bool:
        return self in (TuningMode.SEGPROMPT, TuningMode.SEGPROMPT_DEEP)

    @property
    def is_deep(self) -> bool:
        return self in (TuningMode.VPT_DEEP, TuningMode.SEGPROMPT_DEEP)


@dataclass(frozen=True)
class ModelConfig:
    """Which tuning mode to build, with the token counts and ablation flags."""

    mode: TuningMode
    l_s: int = 49
    l_e: int = 2
    vpt_tokens: int = 8
    no_indicator: bool = False
    no_extra_tokens: bool = False

    def __post_init__(self):
        if (self.no_indicator or self.no_extra_tokens) and not self.mode.is_segprompt:
            raise ConfigurationError(
                f"ablation flags only apply to segprompt modes, not '{self.mode.value}'"
            )
        side = math.isqrt(self.l_s)
        if side * side != self.l_s:
            raise ConfigurationError(
                f"l_s={self.l_s} is not a perfect square; the pooled grid is s x s"
            )
        if self.l_e < 0 or self.vpt_tokens < 0:
            raise ConfigurationError("token counts must be non-negative")


@dataclass
class TokenSequence:
    """Tokens in (cls, image, seg, extra) order with per-position role labels."""

    tokens: Tensor
    roles: tuple[str, ...]

    ROLE_ORDER = ("cls", "image", "seg", "extra")

    def __len__(self) -> int:
        return len(self.roles)

    def role_indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]


def assemble(z_cls: Tensor, z_x: Tensor, z_s: Tensor | None = None,
             z_e: Tensor | None = None) -> TokenSequence:
    """Concatenate classification, image, segmentation and extra tokens.

    Accepts unbatched parts ([n, d]) or batched image tokens ([B, n, d]);
    unbatched trailing parts are broadcast across the batch.
    """
    if z_cls.ndim == 1:
        z_cls = T.reshape(z_cls, (1, z_cls.shape[0]))
    d = z_x.shape[-1]
    parts = [("cls", z_cls), ("image", z_x)]
    if z_s is not None and z_s.shape[-2] > 0:
        parts.append(("seg", z_s))
    if z_e is not None and z_e.shape[-2] > 0:
        parts.append(("extra", z_e))
    for role, p in parts:
        if p.shape[-1] != d:
            raise DimensionError(
                f"assemble: {role} tokens have dim {p.shape}, image tokens end in {d}"
            )
    batched = z_x.ndim == 3
    if batched:
        b = z_x.shape[0]
        parts = [
            (role, p if p.ndim == 3 else T.broadcast_to(
                T.reshape(p, (1,) + p.shape), (b,) + p.shape))
            for role, p in parts
        ]
    tokens = T.concat([p for _, p in parts], axis=1 if batched else 0)
    roles = tuple(role for role, p in parts for _ in range(p.shape[-2]))
    return TokenSequence(tokens, roles)


class PromptSet:
    """Extra learnable tokens: one shallow bank, or one bank per layer."""

    def __init__(self, dim: int, length: int, rng: np.random.Generator,
                 num_layers: int | None = None):
        self.length = length
        if num_layers is None:
            self.tokens = Tensor(truncated_normal(rng, (length, dim)), requires_grad=True) \
                if length > 0 else None
            self.banks: list[Tensor] | None = None
        else:
            self.tokens = None
            self.banks = [Tensor(truncated_normal(rng, (length, dim)), requires_grad=True)
                          for _ in range(num_layers)]

    def parameters(self) -> Params:
        if self.tokens is not None:
            return [("z_e", self.tokens)]
        if self.banks is not None:
            return [(f"banks.{i}", t) for i, t in enumerate(self.banks)]
        return []


class SegEncoder:
    """Map a segmentation map to l_s prompt tokens (stem, 1x1 projector,
    adaptive pool, learnable position embeddings, indicator vector)."""

    def __init__(self, vit_cfg: ViTConfig, l_s: int, rng: np.random.Generator,
                 stem_state: dict[str, np.ndarray] | None = None,
                 include_indicator: bool = True):
        d = vit_cfg.embed_dim
        self.side = math.isqrt(l_s)
        if self.side * self.side != l_s:
            raise ConfigurationError(f"l_s={l_s} is not a perfect square")
        self.l_s = l_s
        self.stem = ResNetStem(rng)
        feat_side = vit_cfg.image_size // self.stem.downsample
        if self.side > feat_side:
            raise ConfigurationError(
                f"l_s={l_s} needs a {self.side}x{self.side} pooled grid but the stem "
                f"emits only {feat_side}x{feat_side} at image size {vit_cfg.image_size}"
            )
        if stem_state is not None:
            own = dict(self.stem.parameters())
            if set(own) != set(stem_state):
                raise ConfigurationError("seg encoder stem state keys do not match")
            for name, t in own.items():
                t.data = np.ascontiguousarray(stem_state[name].copy())
        # zero-init projector: segmentation tokens start exactly at P_s + r
        # and the mask pathway only grows where gradients ask for it, so an
        # untrained encoder cannot inject per-sample noise into the prompts
        self.proj = Conv2d(self.stem.out_channels, d, 1, rng, bias=True)
        self.proj.weight.data[:] = 0.0
        self.p_s = Tensor(truncated_normal(rng, (l_s, d)), requires_grad=True)
        self.r = Tensor(truncated_normal(rng, (d,)), requires_grad=True) \
            if include_indicator else None

    def encode(self, masks: np.ndarray) -> Tensor:
        """Segmentation tokens for a [N,H,W] stack of {-1,+1} maps."""
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 3:
            raise DimensionError(f"seg encoder expects [N,H,W] maps, got {masks.shape}")
        # the stem expects 3 channels; the map is replicated across them
        x = Tensor(np.repeat(masks[:, None, :, :], 3, axis=1))
        feats = self.proj.forward(self.stem.forward(x))
        pooled = T.adaptive_avg_pool(feats, self.side, self.side)     # [N, d, s, s]
        n, d = pooled.shape[0], pooled.shape[1]
        m = T.reshape(T.transpose(pooled, (0, 2, 3, 1)), (n, self.l_s, d))
        z = T.add(m, self.p_s)
        if self.r is not None:
            z = T.add(z, self.r)
        return z

    def parameters(self) -> Params:
        out = prefixed("stem", self.stem.parameters())
        out += prefixed("proj", self.proj.parameters())
        out.append(("p_s", self.p_s))
        if self.r is not None:
            out.append(("r", self.r))
        return out


def encode_segmap(enc: SegEncoder, o: SegMap) -> Tensor:
    """Single-map convenience wrapper returning [l_s, d] tokens."""
    z = enc.encode(o.values[None])
    return T.reshape(z, z.shape[1:])


def crop_to_foreground(image: np.ndarray, mask: SegMap) -> np.ndarray:
    """Zero the background, crop the tight foreground bounding box and resize
    back to the input size. An empty foreground falls back to the full image."""
    if image.shape[-2:] != mask.values.shape:
        raise DimensionError(
            f"crop: image {image.shape} and mask {mask.values.shape} disagree"
        )
    fg = mask.foreground
    if not fg.any():
        return image.copy()
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    masked = image * fg[None, :, :]
    crop = masked[:, r0:r1, c0:c1]
    return bilinear_resize(crop, image.shape[-2], image.shape[-1])


def _passthrough_reducer(rng: np.random.Generator) -> Conv2d:
    # 4 -> 3 channel reduction that initially ignores the mask channel,
    # so the concat modes start at exactly the plain finetune behaviour
    reducer = Conv2d(4, 3, 1, rng, bias=True)
    w = np.zeros((3, 4, 1, 1))
    for i in range(3):
        w[i, i, 0, 0] = 1.0
    reducer.weight.data = w
    return reducer


class StoneClassifier:
    """One classification model per tuning mode, sharing the same parts.

    ViT modes need a (usually pretrained) backbone; resnet modes build their
    own stem. Construction decides trainability: finetune modes unlock the
    backbone, prompt modes freeze it.
    """

    def __init__(self, cfg: ModelConfig, vit_cfg: ViTConfig, seed: int,
                 backbone: ViTBackbone | None = None,
                 stem_state: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.vit_cfg = vit_cfg
        mode = cfg.mode
        rng = substream(seed, "init:model")
        self.backbone: ViTBackbone | None = None
        self.stem: ResNetStem | None = None
        self.head: Linear | None = None
        self.classifier: Linear | None = None
        self.reducer: Conv2d | None = None
        self.seg_encoder: SegEncoder | None = None
        self.prompts: PromptSet | None = None

        if mode.is_resnet:
            self.stem = ResNetStem(rng)
            if stem_state is not None:
                own = dict(self.stem.parameters())
                for name, t in own.items():
                    t.data = np.ascontiguousarray(stem_state[name].copy())
            self.head = Linear(self.stem.out_channels, vit_cfg.num_classes, rng, std=0.01)
        else:
            if backbone is None:
                raise ConfigurationError(f"mode '{mode.value}' needs a ViT backbone")
            if backbone.cfg != vit_cfg:
                raise ConfigurationError("backbone was built with a different ViT config")
            self.backbone = backbone
            self.backbone.set_trainable(mode.is_finetune)
            # near-zero head: early logits carry little random-projection
            # noise, yet gradients still reach everything upstream at step one
            self.classifier = Linear(vit_cfg.embed_dim, vit_cfg.num_classes, rng, std=0.01)

        if mode in (TuningMode.FT_CONCAT, TuningMode.RESNET_CONCAT):
            self.reducer = _passthrough_reducer(rng)

        if mode.is_segprompt:
            self.seg_encoder = SegEncoder(
                vit_cfg, cfg.l_s, rng, stem_state=stem_state,
                include_indicator=not cfg.no_indicator,
            )
            l_e = 0 if cfg.no_extra_tokens else cfg.l_e
            self.prompts = PromptSet(
                vit_cfg.embed_dim, l_e, rng,
                num_layers=vit_cfg.num_layers if mode.is_deep else None,
            )
        elif mode.is_vpt:
            self.prompts = PromptSet(
                vit_cfg.embed_dim, cfg.vpt_tokens, rng,
                num_layers=vit_cfg.num_layers if mode.is_deep else None,
            )

    # -- forward -------------------------------------------------------------

    def _mask_array(self, masks, n: int, hw: tuple[int, int]) -> np.ndarray:
        if masks is None:
            raise ContractError(
                f"mode '{self.cfg.mode.value}' requires a segmentation map for every image"
            )
        arr = np.stack([m.values if isinstance(m, SegMap) else np.asarray(m) for m in masks])
        if arr.shape != (n,) + hw:
            raise DimensionError(f"masks {arr.shape} do not match images {(n,) + hw}")
        return arr

    def forward(self, images: np.ndarray, masks=None) -> Tensor:
        """Logits for a batch of raw [N,3,H,W] images in [0,1]; masks are a
        sequence of SegMap, required exactly when the mode consumes them."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
            masks = [masks] if isinstance(masks, SegMap) else masks
        n, _, h, w = images.shape
        mode = self.cfg.mode
        mask_arr = self._mask_array(masks, n, (h, w)) if mode.uses_mask else None

        if mode in (TuningMode.FT_CROP, TuningMode.RESNET_CROP):
            images = np.stack([
                crop_to_foreground(images[i], SegMap(mask_arr[i])) for i in range(n)
            ])

        x = Tensor(normalize_images(images))
        if self.reducer is not None:
            stacked = T.concat([x, Tensor(mask_arr[:, None, :, :])], axis=1)
            x = self.reducer.forward(stacked)

        if mode.is_resnet:
            feats = self.stem.forward(x)
            pooled = T.adaptive_avg_pool(feats, 1, 1)
            flat = T.reshape(pooled, (n, self.stem.out_channels))
            return self.head.forward(flat)

        cls = self.backbone.cls_with_pos(batch=n)
        z_x = self.backbone.patchify(x)

        if mode in (TuningMode.FT, TuningMode.FT_CROP, TuningMode.FT_CONCAT):
            encoded = self.backbone.encode(assemble(cls, z_x))
        elif mode == TuningMode.VPT:
            encoded = self.backbone.encode(assemble(cls, z_x, None, self.prompts.tokens))
        elif mode == TuningMode.VPT_DEEP:
            base = assemble(cls, z_x)
            encoded = self.backbone.encode_with_layer_prompts(base, self.prompts.banks)
        elif mode == TuningMode.SEGPROMPT:
            z_s = self.seg_encoder.encode(mask_arr)
            encoded = self.backbone.encode(assemble(cls, z_x, z_s, self.prompts.tokens))
        else:  # SEGPROMPT_DEEP
            z_s = self.seg_encoder.encode(mask_arr)
            banks = []
            for bank in self.prompts.banks or [None] * self.vit_cfg.num_layers:
                if bank is None or bank.shape[0] == 0:
                    banks.append(z_s)
                else:
                    wide = T.broadcast_to(T.reshape(bank, (1,) + bank.shape),
                                          (n,) + bank.shape)
                    banks.append(T.concat([z_s, wide], axis=1))
            base = assemble(cls, z_x)
            encoded = self.backbone.encode_with_layer_prompts(base, banks)

        cls_out = T.reshape(T.slice_axis(encoded, 1, 0, 1), (n, self.vit_cfg.embed_dim))
        return self.classifier.forward(cls_out)

    # -- parameter bookkeeping -------------------------------------------------

    def trainable_parameters(self) -> Params:
        mode = self.cfg.mode
        out: Params = []
        if mode.is_resnet:
            out += prefixed("stem", self.stem.parameters())
            out += prefixed("head", self.head.parameters())
        elif mode.is_finetune:
            out += prefixed("backbone", self.backbone.parameters())
            out += prefixed("classifier", self.classifier.parameters())
        elif mode.is_vpt:
            out += prefixed("prompts", self.prompts.parameters())
            out += prefixed("classifier", self.classifier.parameters())
        else:
            out += prefixed("seg_encoder", self.seg_encoder.parameters())
            out += prefixed("prompts", self.prompts.parameters())
            out += prefixed("classifier", self.classifier.parameters())
        if self.reducer is not None:
            out += prefixed("reducer", self.reducer.parameters())
        return out

    def all_parameters(self) -> Params:
        out: Params = []
        if self.backbone is not None:
            out += prefixed("backbone", self.backbone.parameters())
        if self.stem is not None:
            out += prefixed("stem", self.stem.parameters())
        if self.head is not None:
            out += prefixed("head", self.head.parameters())
        if self.classifier is not None:
            out += prefixed("classifier", self.classifier.parameters())
        if self.reducer is not None:
            out += prefixed("reducer", self.reducer.parameters())
        if self.seg_encoder is not None:
            out += prefixed("seg_encoder", self.seg_encoder.parameters())
        if self.prompts is not None:
            out += prefixed("prompts", self.prompts.parameters())
        return out

    def parameter_counts(self) -> tuple[int, int]:
        """(trainable, frozen) element counts; they sum to the total."""
        trainable_names = {name for name, _ in self.trainable_parameters()}
        trainable = frozen = 0
        for name, t in self.all_parameters():
            if name in trainable_names:
                trainable += t.size
            else:
                frozen += t.size
        return trainable, frozen

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.all_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.all_parameters())
        if set(own) != set(state):
            raise ConfigurationError("model state keys do not match this configuration")
        for name, t in own.items():
            t.data = np.ascontiguousarray(state[name].copy())

    def backbone_state(self) -> dict[str, np.ndarray]:
        if self.backbone is None:
            return {}
        return self.backbone.state()


def trainable_parameters(model: StoneClassifier) -> Params:
    return model.trainable_parameters()


def forward(model: StoneClassifier, images: np.ndarray, masks=None) -> Tensor:
    return model.forward(images, masks)
