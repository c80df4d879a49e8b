"""Toy vision transformer shared by the global and camouflage-expert branches.

Both branches run the *same* :class:`ViTEncoder` object, so they hold
references to one set of parameters. The global branch may interleave a
fusion step after every block; the expert branch never does.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, StructuralError
from .layers import block, init_block


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even (subspace split)")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim,
               self.num_heads, self.num_blocks, self.mlp_ratio) <= 0:
            raise ConfigError(f"encoder sizes must be positive: {asdict(self)}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenSequence:
    """(B, N+1, d) tokens at one encoder level; index 0 is the CLS token."""

    tokens: nx.Tensor
    level: int
    branch: str

    @property
    def cls(self):
        return self.tokens[:, 0, :]


def patchify(image, P):
    """Split (H, W, C) or (B, H, W, C) images into row-major P x P patches.

    Returns (N, P*P*C) or (B, N, P*P*C); each patch is flattened in (row, col,
    channel) order.
    """
    img = np.asarray(image.data if isinstance(image, nx.Tensor) else image, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    B, H, W, C = img.shape
    if H % P or W % P:
        raise ConfigError(f"patch size {P} does not divide image {H}x{W}")
    gh, gw = H // P, W // P
    out = img.reshape(B, gh, P, gw, P, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, P * P * C)
    return out[0] if single else out


def unpatchify(patches, P, H, W, C):
    p = np.asarray(patches, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    B = p.shape[0]
    gh, gw = H // P, W // P
    img = p.reshape(B, gh, gw, P, P, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)
    return img[0] if single else img


class ViTEncoder:
    def __init__(self, cfg, store, prefix="vit", group="vit"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        d, N = cfg.embed_dim, cfg.num_patches
        store.normal(f"{prefix}.patch.w", (cfg.patch_dim, d), group)
        store.zeros(f"{prefix}.patch.b", (d,), group)
        store.normal(f"{prefix}.cls", (1, d), group)
        store.normal(f"{prefix}.pos", (N + 1, d), group)
        for l in range(cfg.num_blocks):
            init_block(store, self.block_prefix(l), d, cfg.mlp_ratio * d, group)

    def block_prefix(self, l):
        return f"{self.prefix}.block{l}"

    def parameters(self):
        return [t for n, t in self.store.items() if n.startswith(self.prefix + ".")]

    def embed(self, patches):
        """Patch projection, CLS prepend and positional embedding -> level 0."""
        patches = np.asarray(patches, dtype=np.float64)
        B, N, _ = patches.shape
        s = self.store
        x = nx.linear(nx.Tensor(patches), s[f"{self.prefix}.patch.w"], s[f"{self.prefix}.patch.b"])
        cls = nx.take_rows(s[f"{self.prefix}.cls"], np.zeros((B, 1), dtype=np.int64))
        x = nx.concat([cls, x], axis=1)
        pos = nx.take_rows(s[f"{self.prefix}.pos"], np.broadcast_to(np.arange(N + 1), (B, N + 1)))
        return nx.add(x, pos)

    def block(self, x, l, trace=None):
        return block(x, self.store, self.block_prefix(l), self.cfg.num_heads, trace=trace)


def encode(encoder, images=None, *, patches=None, branch="global", expert_levels=None,
           fusion=None, confidence=None, trace=None):
    """Run one branch of the image tower.

    The expert branch returns the raw per-level sequences. The global branch,
    given ``expert_levels`` and a ``fusion`` module, applies the fusion step to
    the CLS token after every block. Returns ``(levels, final_cls)`` where
    ``levels[l]`` is the sequence after block ``l``.
    """
    cfg = encoder.cfg
    if patches is None:
        patches = patchify(images, cfg.patch_size)
    if branch == "expert" and expert_levels is not None:
        raise StructuralError("the expert branch does not consume expert levels")
    if expert_levels is not None and len(expert_levels) != cfg.num_blocks:
        raise StructuralError(
            f"expert branch has {len(expert_levels)} levels, global branch has {cfg.num_blocks}")
    if fusion is not None and expert_levels is None:
        raise StructuralError("fusion needs expert-branch levels")
    x = encoder.embed(patches)
    levels = []
    for l in range(cfg.num_blocks):
        x = encoder.block(x, l, trace=trace)
        if fusion is not None:
            x = fusion.step(x, expert_levels[l].tokens, confidence, l)
        levels.append(TokenSequence(x, l + 1, branch))
    return levels, x[:, 0, :]
