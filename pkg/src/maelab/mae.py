"""Masked autoencoder: random patch masking, visible-only encoder, light decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import (
    VisionTransformer,
    VitConfig,
    block_forward,
    init_block,
    linear,
    patchify,
    sincos_pos_embed,
    unpatchify,
    xavier_uniform,
)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 2
    width: int = 512
    heads: int = 16
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"decoder depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ValueError(f"decoder width {self.width} not divisible by heads {self.heads}")


@dataclass
class MaskPlan:
    """Per-sample split of patch indices into kept (visible) and masked sets."""

    n_tokens: int
    keep_indices: np.ndarray  # [B, K]
    mask_indices: np.ndarray  # [B, N - K]
    mask_ratio: float

    @property
    def batch(self) -> int:
        return self.keep_indices.shape[0]

    @property
    def n_keep(self) -> int:
        return self.keep_indices.shape[1]

    def mask_matrix(self) -> np.ndarray:
        """[B, N] array with 1 at masked positions."""
        m = np.zeros((self.batch, self.n_tokens))
        m[np.arange(self.batch)[:, None], self.mask_indices] = 1
        return m

    @classmethod
    def all_visible(cls, n_tokens: int, batch: int) -> "MaskPlan":
        keep = np.tile(np.arange(n_tokens), (batch, 1))
        return cls(n_tokens, keep, np.zeros((batch, 0), dtype=np.intp), 0.0)

    @classmethod
    def from_keep(cls, n_tokens: int, keep: np.ndarray) -> "MaskPlan":
        keep = np.sort(np.atleast_2d(np.asarray(keep, dtype=np.intp)), axis=1)
        masked = np.stack([np.setdiff1d(np.arange(n_tokens), row) for row in keep])
        return cls(n_tokens, keep, masked.astype(np.intp), masked.shape[1] / n_tokens)


def keep_count(n_tokens: int, mask_ratio: float) -> int:
    # round half up: 196 tokens at 0.9 keep 20
    return int(np.floor(n_tokens * (1.0 - mask_ratio) + 0.5))


def make_mask_plan(n_tokens: int, mask_ratio: float, batch: int, rng: np.random.Generator) -> MaskPlan:
    """Uniform masking without replacement, drawn independently per sample."""
    if not 0 < mask_ratio < 1:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    k = keep_count(n_tokens, mask_ratio)
    if k < 1:
        raise ValueError(f"mask_ratio {mask_ratio} keeps no tokens out of {n_tokens}")
    order = np.argsort(rng.random((batch, n_tokens)), axis=1)
    keep = np.sort(order[:, :k], axis=1)
    masked = np.sort(order[:, k:], axis=1)
    return MaskPlan(n_tokens, keep, masked, mask_ratio)


def complementary_plans(n_tokens: int, k: int, rng: np.random.Generator, batch: int = 1) -> list[MaskPlan]:
    """``k`` plans whose visible sets partition the patches.

    Each patch is visible in exactly one plan and masked in the other k-1,
    so every patch gets predicted at least once when k >= 2.
    """
    if k < 2:
        raise ValueError("need at least two complementary plans")
    order = np.stack([rng.permutation(n_tokens) for _ in range(batch)])
    plans = []
    for chunk in np.array_split(np.arange(n_tokens), k):
        plans.append(MaskPlan.from_keep(n_tokens, order[:, chunk]))
    return plans


def patch_targets(images: np.ndarray, patch_size: int, normalize: bool) -> np.ndarray:
    target = patchify(images, patch_size)
    if normalize:
        mean = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mean) / np.sqrt(var + 1e-6)
    return target


class MaskedAutoencoder:
    """ViT encoder on visible patches plus a lightweight transformer decoder."""

    def __init__(
        self, cfg: VitConfig, dec: DecoderConfig = DecoderConfig(), seed: int = 0,
        dtype=np.float32, normalize_targets: bool = False,
    ):
        self.cfg = cfg
        self.dec = dec
        self.dtype = np.dtype(dtype)
        self.normalize_targets = normalize_targets
        rng = np.random.default_rng(seed)
        self.encoder = VisionTransformer(cfg, dtype=dtype, params=None)
        self.encoder.params = self.encoder._init(rng)
        self.decoder_params = self._init_decoder(rng)
        self.decoder_pos = sincos_pos_embed(cfg.grid, dec.width).astype(self.dtype)

    def _init_decoder(self, rng) -> dict:
        dec, dt = self.dec, self.dtype
        p: dict[str, Tensor] = {}
        p["decoder_embed.w"] = Tensor(xavier_uniform(rng, self.cfg.width, dec.width, dt), requires_grad=True)
        p["decoder_embed.b"] = Tensor(np.zeros(dec.width, dt), requires_grad=True)
        p["mask_token"] = Tensor((rng.standard_normal((1, 1, dec.width)) * 0.02).astype(dt), requires_grad=True)
        for i in range(dec.depth):
            init_block(p, f"decoder_blocks.{i}", dec.width, int(dec.width * dec.mlp_ratio), rng, dt)
        p["decoder_norm.w"] = Tensor(np.ones(dec.width, dt), requires_grad=True)
        p["decoder_norm.b"] = Tensor(np.zeros(dec.width, dt), requires_grad=True)
        p["decoder_pred.w"] = Tensor(xavier_uniform(rng, dec.width, self.cfg.patch_dim, dt), requires_grad=True)
        p["decoder_pred.b"] = Tensor(np.zeros(self.cfg.patch_dim, dt), requires_grad=True)
        return p

    def named_parameters(self) -> dict[str, Tensor]:
        """Encoder parameters (minus the unused classification head) and decoder parameters."""
        enc = {f"encoder.{k}": v for k, v in self.encoder.params.items() if not k.startswith("head.")}
        return {**enc, **self.decoder_params}

    def encode(self, images: np.ndarray, plan: MaskPlan, training=False, rng=None) -> Tensor:
        tokens = self.encoder.embed(images)
        visible = ad.gather(tokens, plan.keep_indices)
        return self.encoder.forward_tokens(visible, training, rng)

    def decode(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        p = self.decoder_params
        y = linear(latent, p, "decoder_embed")
        has_cls = self.cfg.pooling == "cls"
        cls = None
        if has_cls:
            cls, y = y[:, :1], y[:, 1:]
        full = ad.scatter(y, plan.keep_indices, plan.n_tokens)
        masked = plan.mask_matrix()[:, :, None].astype(self.dtype)
        full = full + ad.mask_mul(p["mask_token"], masked)
        full = full + Tensor(self.decoder_pos)
        if has_cls:
            full = ad.concat([cls, full], axis=1)
        for i in range(self.dec.depth):
            full = block_forward(full, p, f"decoder_blocks.{i}", self.dec.heads, 0.0, False, None, self.cfg.ln_eps)
        full = ad.layer_norm(full, p["decoder_norm.w"], p["decoder_norm.b"], self.cfg.ln_eps)
        pred = linear(full, p, "decoder_pred")
        if has_cls:
            pred = pred[:, 1:]
        return pred

    def forward(self, images, plan: MaskPlan, training=False, rng=None) -> tuple[Tensor, Tensor]:
        """Returns (patch predictions [B, N, p*p*C], masked-patch MSE)."""
        images = np.asarray(images, dtype=self.dtype)
        n = self.cfg.num_patches
        if images.shape[2] // self.cfg.patch_size * (images.shape[3] // self.cfg.patch_size) != plan.n_tokens:
            raise ValueError(f"plan covers {plan.n_tokens} tokens but images give a different patch count")
        if plan.batch != images.shape[0]:
            raise ValueError(f"plan batch {plan.batch} != image batch {images.shape[0]}")
        if plan.n_tokens != n:
            raise ValueError(f"plan covers {plan.n_tokens} tokens, model expects {n}")
        pred = self.decode(self.encode(images, plan, training, rng), plan)
        return pred, self.loss(pred, images, plan)

    def loss(self, pred: Tensor, images, plan: MaskPlan) -> Tensor:
        """Pixel MSE over the masked patches only; visible-patch pixels never enter it."""
        if plan.mask_indices.shape[1] == 0:
            return Tensor(np.zeros((), self.dtype))
        target = patch_targets(np.asarray(images, dtype=self.dtype), self.cfg.patch_size, self.normalize_targets)
        return ad.masked_mse(pred, target, plan.mask_indices)

    __call__ = forward

    def reconstruct(self, images, plan: MaskPlan) -> np.ndarray:
        """Images with masked patches replaced by predictions; visible patches copied."""
        images = np.asarray(images, dtype=self.dtype)
        with ad.no_grad():
            pred, _ = self.forward(images, plan)
        pred = pred.data.copy()
        patches = patchify(images, self.cfg.patch_size)
        if self.normalize_targets:
            mean = patches.mean(axis=-1, keepdims=True)
            std = np.sqrt(patches.var(axis=-1, keepdims=True) + 1e-6)
            pred = pred * std + mean
        out = patches.copy()
        rows = np.arange(plan.batch)[:, None]
        out[rows, plan.mask_indices] = pred[rows, plan.mask_indices]
        return unpatchify(out, self.cfg.patch_size, (images.shape[2] // self.cfg.patch_size,
                                                     images.shape[3] // self.cfg.patch_size), images.shape[1])


def reconstruct_image(mae: MaskedAutoencoder, image: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Single image [C, H, W] or batch [B, C, H, W]; output has the input's shape."""
    single = image.ndim == 3
    batch = image[None] if single else image
    out = mae.reconstruct(batch, plan)
    return out[0] if single else out


def masked_psnr(recon: np.ndarray, target: np.ndarray, plan: MaskPlan, patch_size: int, data_range: float) -> float:
    """PSNR in dB restricted to the masked patches of ``plan``."""
    a = patchify(np.asarray(recon, dtype=np.float64), patch_size)
    b = patchify(np.asarray(target, dtype=np.float64), patch_size)
    rows = np.arange(plan.batch)[:, None]
    mse = float(((a[rows, plan.mask_indices] - b[rows, plan.mask_indices]) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)
