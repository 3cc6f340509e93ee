"""FrequencyBooster network: DiT backbone -> width bridge -> wide decoder -> fusion head.

Images are channels-last, ``(B, H, W, C)``. Token sequences are ``(B, L, width)``
in row-major patch order (top-left origin).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig


class InvalidClassError(ValueError):
    pass


@dataclass
class TokenSequence:
    data: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if self.data.shape[-2] != rows * cols:
            raise ValueError(
                f"token count {self.data.shape[-2]} does not match grid {rows}x{cols}"
            )

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def length(self) -> int:
        return self.data.shape[-2]


@dataclass
class ConditioningContext:
    t: Tensor
    class_id: Tensor
    c_s: TokenSequence | None = None


def patchify(images: Tensor, p: int) -> TokenSequence:
    """Split ``(..., H, W, C)`` into non-overlapping ``p x p`` patches, flattened as (py, px, c)."""
    *lead, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = images.reshape(*lead, rows, p, cols, p, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return TokenSequence(x.reshape(*lead, rows * cols, p * p * c), (rows, cols))


def unpatchify(tokens: TokenSequence, p: int, channels: int = 3) -> Tensor:
    if tokens.width != p * p * channels:
        raise ValueError(f"token width {tokens.width} != p*p*C = {p * p * channels}")
    rows, cols = tokens.grid
    *lead, _, _ = tokens.data.shape
    n = len(lead)
    x = tokens.data.reshape(*lead, rows, cols, p, p, channels)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, rows * p, cols * p, channels)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of ``t in [0, 1]`` (scaled by 1000) followed by a 2-layer MLP."""

    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    @staticmethod
    def sinusoid(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        args = 1000.0 * t[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(self.sinusoid(t, self.freq_dim))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, return_weights: bool = False):
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        weights = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(dh), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        out = self.drop(self.proj(out))
        return (out, weights) if return_weights else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(F.gelu(self.fc1(x), approximate="tanh")))


class AdaLNZeroBlock(nn.Module):
    """Pre-norm transformer block; (shift, scale, gate) for each sub-layer come from the
    conditioning vector, with the modulation layer zero-initialised so the block starts
    as the identity."""

    def __init__(self, dim: int, heads: int, cond_dim: int, mlp_ratio: float = 4.0,
                 dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dropout)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * dim))

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        mods = self.ada(c).unsqueeze(1).chunk(6, dim=-1)
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = mods
        x = x + gate_a * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_m * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


@dataclass
class ModelFeatures:
    x_pred: Tensor
    tapped: TokenSequence
    c_s: TokenSequence
    c_s_up: TokenSequence
    decoder_out: TokenSequence


class FrequencyBooster(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, nD, L = cfg.dit_dim, cfg.dec_dim, cfg.seq_len

        # backbone
        self.x_embed = nn.Linear(cfg.patch_dim, D)
        self.pos_embed = nn.Parameter(torch.zeros(1, L, D))
        self.t_embed = TimestepEmbedder(D, cfg.time_freq_dim)
        self.y_embed = nn.Embedding(cfg.num_classes + 1, D)  # last row: null class
        self.ctx_pos_embed = nn.Parameter(torch.zeros(1, cfg.n_class_tokens, D))
        self.dit_blocks = nn.ModuleList(
            AdaLNZeroBlock(D, cfg.heads, D, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.dit_depth)
        )
        # D -> nD, shared by decoder input injection and fusion
        self.bridge = nn.Linear(D, nD)
        # decoder
        self.dec_in = nn.Linear(cfg.patch_dim, nD)
        self.dec_t_embed = TimestepEmbedder(nD, cfg.time_freq_dim)
        self.dec_blocks = nn.ModuleList(
            AdaLNZeroBlock(nD, cfg.heads, nD, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.dec_depth)
        )
        # fusion head
        self.head_norm = nn.LayerNorm(nD, eps=1e-6)
        self.head = nn.Linear(nD, cfg.patch_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for emb in (self.pos_embed, self.ctx_pos_embed, self.y_embed.weight):
            nn.init.normal_(emb, std=0.02)
        for embedder in (self.t_embed, self.dec_t_embed):
            for layer in (embedder.mlp[0], embedder.mlp[2]):
                nn.init.normal_(layer.weight, std=0.02)
        for blk in (*self.dit_blocks, *self.dec_blocks):
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # -- helpers -----------------------------------------------------------

    def _context(self, t, class_id, batch: int, like: Tensor) -> ConditioningContext:
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if t.ndim == 0:
            t = t.expand(batch)
        labels = torch.as_tensor(class_id, dtype=torch.long, device=like.device)
        if labels.ndim == 0:
            labels = labels.expand(batch)
        if labels.shape != (batch,) or t.shape != (batch,):
            raise ValueError("t and class_id must be scalars or have one entry per batch element")
        if labels.device.type != "meta" and bool(((labels < 0) | (labels > self.cfg.null_class)).any()):
            raise InvalidClassError(
                f"class ids must lie in [0, {self.cfg.num_classes}] "
                f"({self.cfg.null_class} is the null class), got {labels.tolist()}"
            )
        return ConditioningContext(t=t, class_id=labels)

    def embed(self, z_tokens: TokenSequence) -> Tensor:
        if z_tokens.width != self.cfg.patch_dim:
            raise ValueError(f"expected patch width {self.cfg.patch_dim}, got {z_tokens.width}")
        return self.x_embed(z_tokens.data) + self.pos_embed

    # -- sub-operations ----------------------------------------------------

    def dit_forward(self, z_tokens: TokenSequence, ctx: ConditioningContext):
        """Return ``(c_s, tapped)``, both of width D and length L.

        In-context class tokens are prepended before block ``in_context_start_block``;
        ``tapped`` is the stream after ``irepa_tap_block`` blocks (0 = embedding output).
        """
        cfg = self.cfg
        L = z_tokens.length
        x = self.embed(z_tokens)
        y = self.y_embed(ctx.class_id)
        c = self.t_embed(ctx.t) + y
        tapped = x if cfg.irepa_tap_block == 0 else None
        for i, blk in enumerate(self.dit_blocks):
            if i == cfg.in_context_start_block and cfg.n_class_tokens:
                ctx_tokens = y[:, None, :] + self.ctx_pos_embed
                x = torch.cat([ctx_tokens, x], dim=1)
            x = blk(x, c)
            if i + 1 == cfg.irepa_tap_block:
                tapped = x[:, x.shape[1] - L:]
        c_s = x[:, x.shape[1] - L:]
        return TokenSequence(c_s, z_tokens.grid), TokenSequence(tapped, z_tokens.grid)

    def bridge_up(self, c_s: TokenSequence) -> TokenSequence:
        if c_s.width != self.cfg.dit_dim:
            raise ValueError(f"expected width {self.cfg.dit_dim}, got {c_s.width}")
        return TokenSequence(self.bridge(c_s.data), c_s.grid)

    def decoder_forward(self, z_tokens: TokenSequence, c_s_up: TokenSequence,
                        ctx: ConditioningContext) -> TokenSequence:
        if z_tokens.length != c_s_up.length:
            raise ValueError(f"length mismatch: {z_tokens.length} vs {c_s_up.length}")
        if c_s_up.width != self.cfg.dec_dim:
            raise ValueError(f"expected c_s_up width {self.cfg.dec_dim}, got {c_s_up.width}")
        h = self.dec_in(z_tokens.data) + c_s_up.data
        c = self.dec_t_embed(ctx.t)
        for blk in self.dec_blocks:
            h = blk(h, c)
        return TokenSequence(h, z_tokens.grid)

    def fuse_and_project(self, x_r: TokenSequence, c_s_up: TokenSequence) -> Tensor:
        fused = fuse(x_r, c_s_up)
        out = self.head(self.head_norm(fused.data))
        return unpatchify(TokenSequence(out, fused.grid), self.cfg.patch_size, self.cfg.channels)

    # -- full pass ---------------------------------------------------------

    def forward_features(self, z_t: Tensor, t, class_id) -> ModelFeatures:
        cfg = self.cfg
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (B, {expected}), got {tuple(z_t.shape)}")
        ctx = self._context(t, class_id, z_t.shape[0], z_t)
        z_tokens = patchify(z_t, cfg.patch_size)
        c_s, tapped = self.dit_forward(z_tokens, ctx)
        c_s_up = self.bridge_up(c_s)
        x_r = self.decoder_forward(z_tokens, c_s_up, ctx)
        x_pred = self.fuse_and_project(x_r, c_s_up)
        return ModelFeatures(x_pred=x_pred, tapped=tapped, c_s=c_s, c_s_up=c_s_up, decoder_out=x_r)

    def forward(self, z_t: Tensor, t, class_id):
        feats = self.forward_features(z_t, t, class_id)
        return feats.x_pred, feats.tapped

    def predict_x(self, z_t: Tensor, t, class_id) -> Tensor:
        return self.forward(z_t, t, class_id)[0]


def fuse(x_r: TokenSequence, c_s_up: TokenSequence) -> TokenSequence:
    if x_r.data.shape != c_s_up.data.shape:
        raise ValueError(
            f"fusion needs equal shapes, got {tuple(x_r.data.shape)} and {tuple(c_s_up.data.shape)}"
        )
    return TokenSequence(x_r.data + c_s_up.data, x_r.grid)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32,
                device: str | torch.device = "cpu") -> FrequencyBooster:
    """Construct a model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FrequencyBooster(cfg)
    return model.to(dtype=dtype, device=device)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
