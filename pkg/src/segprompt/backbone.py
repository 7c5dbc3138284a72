"""Vision transformer backbone: patchify, encode, per-layer prompt injection,
and a rotation-prediction pretext stage that stands in for large-scale
pretraining at desk scale.

The backbone is the frozen half of every prompt-tuning mode. Prompt tokens
never receive backbone position embeddings; image tokens get theirs inside
patchify and the classification token carries slot 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import LayerNorm, Linear, MultiHeadAttention, Params, ResNetStem, cross_entropy, prefixed
from .optim import Adam, zero_grads
from .tensor import Tape, Tensor, backward
from .util import normalize_images, substream, truncated_normal


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def n_img(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    def to_meta(self) -> dict[str, str]:
        return {
            "vit.image_size": str(self.image_size),
            "vit.patch_size": str(self.patch_size),
            "vit.embed_dim": str(self.embed_dim),
            "vit.num_layers": str(self.num_layers),
            "vit.num_heads": str(self.num_heads),
            "vit.mlp_ratio": str(self.mlp_ratio),
            "vit.num_classes": str(self.num_classes),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "ViTConfig":
        return ViTConfig(
            image_size=int(meta["vit.image_size"]),
            patch_size=int(meta["vit.patch_size"]),
            embed_dim=int(meta["vit.embed_dim"]),
            num_layers=int(meta["vit.num_layers"]),
            num_heads=int(meta["vit.num_heads"]),
            mlp_ratio=float(meta["vit.mlp_ratio"]),
            num_classes=int(meta["vit.num_classes"]),
        )


class TransformerBlock:
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.num_heads, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn.forward(self.norm1.forward(x)))
        return T.add(x, self.fc2.forward(T.gelu(self.fc1.forward(self.norm2.forward(x)))))

    def parameters(self) -> Params:
        out = prefixed("norm1", self.norm1.parameters())
        out += prefixed("attn", self.attn.parameters())
        out += prefixed("norm2", self.norm2.parameters())
        out += prefixed("fc1", self.fc1.parameters())
        out += prefixed("fc2", self.fc2.parameters())
        return out


class ViTBackbone:
    """Patch projection, classification token, position table, L blocks."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.patch_proj = Linear(3 * cfg.patch_size ** 2, d, rng)
        self.cls_token = Tensor(truncated_normal(rng, (d,)), requires_grad=True)
        self.pos_embed = Tensor(truncated_normal(rng, (cfg.n_img + 1, d)), requires_grad=True)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(d)
        self.pretrained = False

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> Params:
        out: Params = prefixed("patch_proj", self.patch_proj.parameters())
        out.append(("cls_token", self.cls_token))
        out.append(("pos_embed", self.pos_embed))
        for i, blk in enumerate(self.blocks):
            out += prefixed(f"blocks.{i}", blk.parameters())
        out += prefixed("norm", self.norm.parameters())
        return out

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.parameters():
            t.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ConfigurationError(f"backbone state mismatch on keys {sorted(missing)}")
        for name, t in own.items():
            if t.data.shape != state[name].shape:
                raise DimensionError(
                    f"backbone param '{name}': shape {state[name].shape} != {t.data.shape}"
                )
            t.data = np.ascontiguousarray(state[name].copy())

    # -- forward pieces ------------------------------------------------------

    def patchify(self, img: Tensor) -> Tensor:
        """Split an image into non-overlapping patches, project to tokens and
        add the image-token position embeddings. Accepts [3,H,W] or [N,3,H,W]."""
        cfg = self.cfg
        batched = img.ndim == 4
        if img.ndim not in (3, 4) or img.shape[-3] != 3 or \
                img.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"patchify: expected 3x{cfg.image_size}x{cfg.image_size} image(s), got {img.shape}"
            )
        x = img if batched else T.reshape(img, (1,) + img.shape)
        n = x.shape[0]
        p = cfg.patch_size
        side = cfg.image_size // p
        x = T.reshape(x, (n, 3, side, p, side, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (n, side * side, 3 * p * p))
        tokens = self.patch_proj.forward(x)
        pos = T.slice_axis(self.pos_embed, 0, 1, cfg.n_img + 1)
        tokens = T.add(tokens, pos)
        return tokens if batched else T.reshape(tokens, tokens.shape[1:])

    def cls_with_pos(self, batch: int | None = None) -> Tensor:
        """The classification token with its slot-0 position embedding,
        shaped [1,d] or broadcast to [batch,1,d]."""
        d = self.cfg.embed_dim
        cls = T.add(T.reshape(self.cls_token, (1, d)), T.slice_axis(self.pos_embed, 0, 0, 1))
        if batch is None:
            return cls
        return T.broadcast_to(T.reshape(cls, (1, 1, d)), (batch, 1, d))

    def encode(self, tokens) -> Tensor:
        """Run the transformer over any token count; prompt tokens pass
        through the same blocks as image tokens."""
        x = getattr(tokens, "tokens", tokens)
        if x.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(
                f"encode: token dim {x.shape} != embed dim {self.cfg.embed_dim}"
            )
        for blk in self.blocks:
            x = blk.forward(x)
        return self.norm.forward(x)

    def encode_with_layer_prompts(self, tokens, per_layer_prompts: list[Tensor]) -> Tensor:
        """Deep prompting: per_layer_prompts[i] replaces the prompt slots at
        the sequence tail before block i (appended at block 0)."""
        x = getattr(tokens, "tokens", tokens)
        if len(per_layer_prompts) != len(self.blocks):
            raise DimensionError(
                f"need exactly {len(self.blocks)} per-layer prompt banks, got {len(per_layer_prompts)}"
            )
        if not per_layer_prompts or per_layer_prompts[0].shape[-2] == 0:
            return self.encode(x)
        n_base = x.shape[-2]
        batched = x.ndim == 3
        axis = 1 if batched else 0

        def fit(p: Tensor) -> Tensor:
            if batched and p.ndim == 2:
                l_p, d = p.shape
                return T.broadcast_to(T.reshape(p, (1, l_p, d)), (x.shape[0], l_p, d))
            return p

        for i, blk in enumerate(self.blocks):
            prompt = fit(per_layer_prompts[i])
            if i == 0:
                x = T.concat([x, prompt], axis=axis)
            else:
                x = T.concat([T.slice_axis(x, axis, 0, n_base), prompt], axis=axis)
            x = blk.forward(x)
        return self.norm.forward(x)


def build_backbone(cfg: ViTConfig, seed: int) -> ViTBackbone:
    return ViTBackbone(cfg, substream(seed, "init:backbone"))


# ---------------------------------------------------------------------------
# pretext pretraining (rotation prediction)


@dataclass
class PretextReport:
    epochs: int
    epoch_losses: list[float] = field(default_factory=list)
    holdout_accuracy: float = 0.0


def _rotation_batch(images: np.ndarray, rots: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for i, k in enumerate(rots):
        out[i] = np.rot90(images[i], int(k), axes=(1, 2))
    return out


def _split_holdout(samples) -> tuple[list, list]:
    vids = sorted({s.video_id for s in samples})
    if len(vids) > 1:
        held = vids[-1]
        return [s for s in samples if s.video_id != held], \
               [s for s in samples if s.video_id == held]
    cut = max(1, len(samples) // 4)
    return list(samples[:-cut]), list(samples[-cut:])


def _pretext_run(encode_cls, head: Linear, train_params: Params, samples,
                 epochs: int, batch_size: int, lr: float, seed: int) -> PretextReport:
    """Shared rotation-prediction loop; encode_cls maps a raw image batch to
    a [n, d] feature the linear head classifies into 4 rotation classes."""
    rng = substream(seed, "pretext:shuffle")
    train, held = _split_holdout(samples)
    opt = Adam(lr=lr)
    report = PretextReport(epochs=epochs)
    images = np.stack([s.image for s in train])
    for _ in range(epochs):
        order = rng.permutation(len(train))
        rots = rng.integers(0, 4, size=len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            sel = order[start:start + batch_size]
            xb = _rotation_batch(images[sel], rots[sel])
            yb = rots[sel]
            zero_grads(train_params)
            with Tape():
                feats = encode_cls(normalize_images(xb))
                loss = cross_entropy(head.forward(feats), yb)
                backward(loss)
            opt.step(train_params)
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))
    # held-out rotation accuracy, balanced over all four rotations
    correct = total = 0
    held_images = np.stack([s.image for s in held])
    for k in range(4):
        xb = _rotation_batch(held_images, np.full(len(held), k))
        feats = encode_cls(normalize_images(xb))
        preds = head.forward(feats).data.argmax(axis=1)
        correct += int((preds == k).sum())
        total += len(held)
    report.holdout_accuracy = correct / total
    return report


def pretext_pretrain(backbone: ViTBackbone, samples, epochs: int = 8, seed: int = 0,
                     batch_size: int = 16, lr: float = 0.001,
                     eval_video_ids: set[str] | None = None,
                     ckpt_path: str | Path | None = None) -> tuple[ViTBackbone, PretextReport]:
    """Train the backbone on 4-way rotation prediction, then freeze it.

    Raises ContractError when the pretext samples share a video with the
    evaluation set; the two must stay disjoint.
    """
    if not samples:
        raise ConfigurationError("pretext pretraining needs a non-empty sample set")
    if eval_video_ids:
        overlap = {s.video_id for s in samples} & set(eval_video_ids)
        if overlap:
            raise ContractError(
                f"pretext pretraining data overlaps evaluation videos {sorted(overlap)}"
            )
    backbone.set_trainable(True)
    d = backbone.cfg.embed_dim
    head = Linear(d, 4, substream(seed, "pretext:head"))
    params = backbone.parameters() + prefixed("pretext_head", head.parameters())

    def encode_cls(xb: np.ndarray) -> Tensor:
        x = Tensor(xb)
        tokens = T.concat([backbone.cls_with_pos(batch=xb.shape[0]),
                           backbone.patchify(x)], axis=1)
        encoded = backbone.encode(tokens)
        return T.reshape(T.slice_axis(encoded, 1, 0, 1), (xb.shape[0], d))

    report = _pretext_run(encode_cls, head, params, samples, epochs, batch_size, lr, seed)
    backbone.set_trainable(False)
    backbone.pretrained = True
    if ckpt_path is not None:
        save_pretrained(ckpt_path, backbone, meta={"pretext_accuracy": f"{report.holdout_accuracy:.6f}"})
    return backbone, report


def pretext_pretrain_stem(stem: ResNetStem, samples, epochs: int = 8, seed: int = 0,
                          batch_size: int = 16, lr: float = 0.001) -> tuple[ResNetStem, PretextReport]:
    """Rotation-pretrain the ResNet stem used by the seg encoder and the
    ResNet baselines; frozen-eligibility is decided by the tuning mode."""
    if not samples:
        raise ConfigurationError("pretext pretraining needs a non-empty sample set")
    for _, t in stem.parameters():
        t.requires_grad = True
    c = stem.out_channels
    head = Linear(c, 4, substream(seed, "pretext:stem_head"))
    params = prefixed("stem", stem.parameters()) + prefixed("stem_head", head.parameters())

    def encode_cls(xb: np.ndarray) -> Tensor:
        feats = stem.forward(Tensor(xb))
        pooled = T.adaptive_avg_pool(feats, 1, 1)
        return T.reshape(pooled, (xb.shape[0], c))

    report = _pretext_run(encode_cls, head, params, samples, epochs, batch_size, lr, seed)
    return stem, report


# ---------------------------------------------------------------------------
# pretrained bundle IO


@dataclass
class PretrainedBundle:
    vit_cfg: ViTConfig
    backbone_state: dict[str, np.ndarray]
    stem_state: dict[str, np.ndarray] | None
    meta: dict[str, str]

    def build_backbone(self) -> ViTBackbone:
        backbone = ViTBackbone(self.vit_cfg, substream(0, "init:backbone"))
        backbone.load_state(self.backbone_state)
        backbone.set_trainable(False)
        backbone.pretrained = True
        return backbone


def save_pretrained(path: str | Path, backbone: ViTBackbone,
                    stem: ResNetStem | None = None,
                    meta: dict[str, str] | None = None) -> None:
    named = {f"backbone.{k}": v for k, v in backbone.state().items()}
    if stem is not None:
        named.update({f"seg_stem.{k}": v.data.copy() for k, v in stem.parameters()})
    full_meta = dict(backbone.cfg.to_meta())
    if meta:
        full_meta.update(meta)
    save_checkpoint(path, named, full_meta)


def load_pretrained(path: str | Path) -> PretrainedBundle:
    named, meta = load_checkpoint(path)
    if "vit.image_size" not in meta:
        raise ConfigurationError(f"{path}: missing vit config block in checkpoint meta")
    cfg = ViTConfig.from_meta(meta)
    backbone_state = {k[len("backbone."):]: v for k, v in named.items() if k.startswith("backbone.")}
    stem_state = {k[len("seg_stem."):]: v for k, v in named.items() if k.startswith("seg_stem.")}
    return PretrainedBundle(cfg, backbone_state, stem_state or None, meta)
