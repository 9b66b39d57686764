"""Vanilla Vision Transformer built on the autodiff substrate.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``blocks.3.attn.qkv.w``) so that checkpoints, layer-wise LR decay and
weight-decay exemptions can all be driven by name.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

POOLINGS = ("avg", "cls")


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    width: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    num_classes: int = 14
    pooling: str = "avg"
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0 <= self.drop_path_rate < 1:
            raise ValueError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.width * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "vit_small_patch16": dict(width=384, depth=12, heads=6),
    "vit_base_patch16": dict(width=768, depth=12, heads=12),
    "vit_tiny_test": dict(image_size=32, patch_size=8, width=32, depth=2, heads=2),
    "vit_desk": dict(image_size=32, patch_size=4, width=32, depth=2, heads=2),
}


def preset(name: str, **overrides) -> VitConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return VitConfig(**{**PRESETS[name], **overrides})


def _block_param_count(width: int, hidden: int) -> int:
    ln = 2 * width
    qkv = width * 3 * width + 3 * width
    proj = width * width + width
    mlp = width * hidden + hidden + hidden * width + width
    return 2 * ln + qkv + proj + mlp


def param_count(cfg: VitConfig) -> int:
    """Number of trainable encoder parameters, counted from the config alone."""
    n = cfg.patch_dim * cfg.width + cfg.width
    if cfg.pooling == "cls":
        n += cfg.width
    n += cfg.depth * _block_param_count(cfg.width, cfg.mlp_hidden)
    n += 2 * cfg.width
    n += cfg.width * cfg.num_classes + cfg.num_classes
    return n


# -- patches and positions --------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, p*p*C], patches in row-major grid order."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int], chans: int) -> np.ndarray:
    b = patches.shape[0]
    rows, cols = grid
    p = patch_size
    x = patches.reshape(b, rows, cols, p, p, chans)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, chans, rows * p, cols * p)


def _sincos_1d(width: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(width // 2, dtype=np.float64) / (width / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid: tuple[int, int], width: int) -> np.ndarray:
    """Fixed 2D sine-cosine embeddings, shape [rows*cols, width].

    Half of the channels encode the row index and half the column index.
    """
    if width % 4:
        raise ValueError(f"sin-cos embedding width must be divisible by 4, got {width}")
    rows, cols = grid
    gy, gx = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(width // 2, gy), _sincos_1d(width // 2, gx)], axis=1)


# -- building blocks ---------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_block(params: dict, prefix: str, width: int, hidden: int, rng, dtype) -> None:
    def lin(name, fi, fo):
        params[f"{prefix}.{name}.w"] = Tensor(xavier_uniform(rng, fi, fo, dtype), requires_grad=True)
        params[f"{prefix}.{name}.b"] = Tensor(np.zeros(fo, dtype), requires_grad=True)

    for ln in ("norm1", "norm2"):
        params[f"{prefix}.{ln}.w"] = Tensor(np.ones(width, dtype), requires_grad=True)
        params[f"{prefix}.{ln}.b"] = Tensor(np.zeros(width, dtype), requires_grad=True)
    lin("attn.qkv", width, 3 * width)
    lin("attn.proj", width, width)
    lin("mlp.fc1", width, hidden)
    lin("mlp.fc2", hidden, width)


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth on a residual branch of shape [B, ...]."""
    if not 0 <= rate < 1:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if rate == 0 or not training:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return ad.mask_mul(x, mask)


def attention(x: Tensor, params: dict, prefix: str, heads: int, capture: dict | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = linear(x, params, f"{prefix}.qkv").reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (dh ** -0.5)
    attn = ad.softmax(scores, axis=-1)
    if capture is not None and prefix in capture:
        capture[prefix] = attn
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(out, params, f"{prefix}.proj")


def block_forward(
    x: Tensor, params: dict, prefix: str, heads: int, drop_rate: float,
    training: bool, rng, eps: float, capture: dict | None = None,
) -> Tensor:
    """Pre-norm transformer block: x + DP(MHSA(LN(x))), then x + DP(MLP(LN(x)))."""
    h = ad.layer_norm(x, params[f"{prefix}.norm1.w"], params[f"{prefix}.norm1.b"], eps)
    if capture is not None and f"{prefix}.norm1" in capture:
        capture[f"{prefix}.norm1"] = h
    x = x + drop_path(attention(h, params, f"{prefix}.attn", heads, capture), drop_rate, training, rng)
    h = ad.layer_norm(x, params[f"{prefix}.norm2.w"], params[f"{prefix}.norm2.b"], eps)
    h = linear(ad.gelu(linear(h, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return x + drop_path(h, drop_rate, training, rng)


def drop_path_schedule(depth: int, rate: float) -> list[float]:
    """Per-block rates ramping linearly from 0 to ``rate``."""
    if depth == 1:
        return [0.0]
    return [float(r) for r in np.linspace(0.0, rate, depth)]


# -- the encoder ---------------------------------------------------------------------

class VisionTransformer:
    """ViT encoder with a linear classification head."""

    def __init__(self, cfg: VitConfig, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init(np.random.default_rng(seed))
        self.pos_embed = sincos_pos_embed(cfg.grid, cfg.width).astype(self.dtype)

    def _init(self, rng: np.random.Generator) -> dict:
        cfg, dt = self.cfg, self.dtype
        p: dict[str, Tensor] = {}
        p["patch_embed.w"] = Tensor(xavier_uniform(rng, cfg.patch_dim, cfg.width, dt), requires_grad=True)
        p["patch_embed.b"] = Tensor(np.zeros(cfg.width, dt), requires_grad=True)
        if cfg.pooling == "cls":
            p["cls_token"] = Tensor((rng.standard_normal((1, 1, cfg.width)) * 0.02).astype(dt), requires_grad=True)
        for i in range(cfg.depth):
            init_block(p, f"blocks.{i}", cfg.width, cfg.mlp_hidden, rng, dt)
        p["norm.w"] = Tensor(np.ones(cfg.width, dt), requires_grad=True)
        p["norm.b"] = Tensor(np.zeros(cfg.width, dt), requires_grad=True)
        p["head.w"] = Tensor(np.zeros((cfg.width, cfg.num_classes), dt), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(cfg.num_classes, dt), requires_grad=True)
        return p

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_pos_embed(self, grid: tuple[int, int]) -> None:
        """Regenerate positional embeddings for a new patch grid (resolution change)."""
        self.pos_embed = sincos_pos_embed(grid, self.cfg.width).astype(self.dtype)

    def embed(self, images, use_pos: bool = True) -> Tensor:
        """Patch embedding plus positional embedding, [B, N, width]."""
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 4 or images.shape[1] != self.cfg.in_chans:
            raise ValueError(f"expected images [B, {self.cfg.in_chans}, H, W], got {images.shape}")
        patches = Tensor(patchify(images, self.cfg.patch_size))
        x = linear(patches, self.params, "patch_embed")
        if use_pos:
            if self.pos_embed.shape[0] != x.shape[1]:
                rows = images.shape[2] // self.cfg.patch_size
                self.set_pos_embed((rows, images.shape[3] // self.cfg.patch_size))
            x = x + Tensor(self.pos_embed)
        return x

    def forward_tokens(
        self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None,
        capture: dict | None = None,
    ) -> Tensor:
        """Run the transformer stack on embedded tokens; returns normed tokens.

        Adds the class token (if pooling uses one) in front of the sequence.
        """
        cfg = self.cfg
        if x.ndim != 3 or x.shape[-1] != cfg.width:
            raise ValueError(f"token width mismatch: expected [B, N, {cfg.width}], got {x.shape}")
        if cfg.pooling == "cls":
            cls = self.params["cls_token"]
            x = ad.concat([ad.mask_mul(cls, np.ones((x.shape[0], 1, 1), self.dtype)), x], axis=1)
        rates = drop_path_schedule(cfg.depth, cfg.drop_path_rate)
        for i in range(cfg.depth):
            x = block_forward(x, self.params, f"blocks.{i}", cfg.heads, rates[i], training, rng, cfg.ln_eps, capture)
        return ad.layer_norm(x, self.params["norm.w"], self.params["norm.b"], cfg.ln_eps)

    def pool(self, x: Tensor) -> Tensor:
        if self.cfg.pooling == "cls":
            return x[:, 0]
        return x.mean(axis=1)

    def forward_features(self, images, training=False, rng=None, use_pos=True, capture=None) -> Tensor:
        return self.pool(self.forward_tokens(self.embed(images, use_pos), training, rng, capture))

    def head(self, feats: Tensor) -> Tensor:
        return linear(feats, self.params, "head")

    def forward(self, images, training=False, rng=None, capture=None) -> Tensor:
        """Class logits [B, num_classes]."""
        return self.head(self.forward_features(images, training, rng, capture=capture))

    __call__ = forward

    def gradcam_layer(self) -> str:
        """First LayerNorm of the last block, the default Grad-CAM target."""
        return f"blocks.{self.cfg.depth - 1}.norm1"

    def forward_with_activation(self, images, layer: str | None = None):
        """Logits plus the recorded activation at ``layer``, patch tokens only."""
        layer = layer or self.gradcam_layer()
        capture = {layer: None}
        logits = self.forward(images, capture=capture)
        act = capture[layer]
        if act is None:
            raise KeyError(f"layer {layer!r} was not visited during forward")
        return logits, act, (1 if self.cfg.pooling == "cls" else 0)

    def with_config(self, **changes) -> "VisionTransformer":
        """Same parameters under a modified config (e.g. new drop-path rate)."""
        vit = VisionTransformer(replace(self.cfg, **changes), dtype=self.dtype, params=self.params)
        return vit
