"""Generator and discriminator networks for nephrographic-phase synthesis.

The generator is a conv encoder, a cascade of residual blocks that each fuse a
convolutional branch with a multi-head self-attention branch over a coarse
token grid, and a transposed-conv decoder. The discriminator is a four-layer
70x70 patch classifier conditioned on the two source phases.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, FormatError, NumericalError, ShapeError

CHECKPOINT_MAGIC = b"RNCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ResnctConfig:
    input_channels: int = 2      # non-contrast + urographic
    output_channels: int = 1     # nephrographic
    base_channels: int = 64
    bottleneck_blocks: int = 9
    transformer_dim: int = 768
    attention_heads: int = 12
    mlp_hidden_units: int = 3073
    token_grid: int = 16
    image_size: int = 256
    weight_tying: bool = True

    def __post_init__(self):
        if self.transformer_dim % self.attention_heads != 0:
            raise ConfigError(
                f"transformer_dim {self.transformer_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")
        if self.image_size % self.token_grid != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by token_grid {self.token_grid}"
            )
        if (self.image_size // 4) % self.token_grid != 0:
            raise ConfigError(
                f"bottleneck resolution {self.image_size // 4} not divisible by "
                f"token_grid {self.token_grid}"
            )

    @property
    def head_dim(self) -> int:
        return self.transformer_dim // self.attention_heads


class TransformerCore(nn.Module):
    """One pre-norm self-attention + MLP layer over token_grid^2 tokens with
    learned positional embeddings. Shared across blocks when tying weights."""

    def __init__(self, cfg: ResnctConfig):
        super().__init__()
        d = cfg.transformer_dim
        self.heads = cfg.attention_heads
        self.pos_embedding = nn.Parameter(torch.zeros(1, cfg.token_grid**2, d))
        self.norm_attn = nn.LayerNorm(d)
        self.attention = nn.MultiheadAttention(d, cfg.attention_heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_hidden_units),
            nn.GELU(),
            nn.Linear(cfg.mlp_hidden_units, d),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = tokens + self.pos_embedding
        normed = self.norm_attn(tokens)
        attended, _ = self.attention(normed, normed, normed, need_weights=False)
        tokens = tokens + attended
        return tokens + self.mlp(self.norm_mlp(tokens))

    def attention_weights(self, tokens: torch.Tensor) -> torch.Tensor:
        normed = self.norm_attn(tokens + self.pos_embedding)
        _, weights = self.attention(
            normed, normed, normed, need_weights=True, average_attn_weights=False
        )
        return weights


class MaftBlock(nn.Module):
    """Residual block fusing a local conv branch and a global self-attention
    branch: out = x + fuse(conv_branch(x), attention_branch(x))."""

    def __init__(self, cfg: ResnctConfig, channels: int, core: TransformerCore):
        super().__init__()
        self.token_grid = cfg.token_grid
        self.conv_branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )
        self.core = core
        self.embed = nn.Conv2d(channels, cfg.transformer_dim, 1)
        self.unembed = nn.Conv2d(cfg.transformer_dim, channels, 1)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        local = self.conv_branch(x)
        g = self.token_grid
        pooled = nn.functional.adaptive_avg_pool2d(x, (g, g))
        tokens = self.embed(pooled).flatten(2).transpose(1, 2)
        tokens = self.core(tokens)
        tokens = tokens.transpose(1, 2).reshape(x.shape[0], -1, g, g)
        global_map = self.unembed(
            nn.functional.interpolate(tokens, size=x.shape[2:], mode="bilinear",
                                      align_corners=False)
        )
        return x + self.fuse(torch.cat([local, global_map], dim=1))


class Generator(nn.Module):
    def __init__(self, cfg: ResnctConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.input_channels, c, 7, padding=3),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.ReLU(inplace=True),
        )
        shared = TransformerCore(cfg) if cfg.weight_tying else None
        self.maft = nn.ModuleList(
            MaftBlock(cfg, 4 * c, shared if cfg.weight_tying else TransformerCore(cfg))
            for _ in range(cfg.bottleneck_blocks)
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, cfg.output_channels, 7, padding=3),
            nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"expected batch of {self.cfg.input_channels}-channel images, got {tuple(x.shape)}"
            )
        if x.shape[2] != x.shape[3] or x.shape[2] % 4 != 0:
            raise ShapeError(f"spatial size must be square and divisible by 4, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite generator input")
        h = self.encoder(x)
        for block in self.maft:
            h = block(h)
        # tanh range [-1, 1] mapped affinely onto the unit interval.
        return (self.decoder(h) + 1.0) / 2.0


class Discriminator(nn.Module):
    """Four-layer stride-(2,2,2,1) patch classifier; 3x256x256 -> 1x30x30."""

    def __init__(self, cfg: ResnctConfig):
        super().__init__()
        self.in_channels = cfg.input_channels + cfg.output_channels
        c = cfg.base_channels
        self.layers = nn.Sequential(
            nn.Conv2d(self.in_channels, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1),
            nn.InstanceNorm2d(8 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected batch of {self.in_channels}-channel images, got {tuple(x.shape)}"
            )
        return self.layers(x)


def _initialize(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                m.weight.clamp_(-0.04, 0.04)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.MultiheadAttention):
            with torch.no_grad():
                m.in_proj_weight.normal_(0.0, 0.02, generator=generator)
                m.in_proj_weight.clamp_(-0.04, 0.04)
                m.in_proj_bias.zero_()
                m.out_proj.weight.normal_(0.0, 0.02, generator=generator)
                m.out_proj.weight.clamp_(-0.04, 0.04)
                m.out_proj.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_generator(cfg: ResnctConfig, seed: int) -> Generator:
    g = Generator(cfg)
    rng = torch.Generator().manual_seed(seed)
    _initialize(g, rng)
    return g


def build_discriminator(cfg: ResnctConfig, seed: int) -> Discriminator:
    d = Discriminator(cfg)
    rng = torch.Generator().manual_seed(seed)
    _initialize(d, rng)
    return d


_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def save_checkpoint(path, model: nn.Module, cfg: ResnctConfig,
                    epoch: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    """Versioned container: magic, uint32 length-prefixed JSON metadata, then
    per-tensor records (name, dtype, shape, little-endian payload). Accepts a
    module or a plain {name: tensor} mapping."""
    state = model.state_dict() if isinstance(model, nn.Module) else dict(model)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "epoch": epoch,
        "seed": seed,
        "tensor_count": len(state),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise FormatError(f"unsupported tensor dtype {dtype_name}")
        header = json.dumps(
            {"name": name, "dtype": dtype_name, "shape": list(arr.shape)}
        ).encode()
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        payload = np.ascontiguousarray(arr.astype(_DTYPES[dtype_name][1])).tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (metadata, {name: tensor}). Bit-exact with what was saved."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    pos = 4
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + meta_len])
    pos += meta_len
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('format_version')}")
    tensors = {}
    for _ in range(meta["tensor_count"]):
        (hdr_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        hdr = json.loads(raw[pos:pos + hdr_len])
        pos += hdr_len
        (payload_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        torch_dtype, np_dtype = _DTYPES[hdr["dtype"]]
        arr = np.frombuffer(raw[pos:pos + payload_len], dtype=np_dtype).reshape(hdr["shape"])
        pos += payload_len
        tensors[hdr["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    if pos != len(raw):
        raise FormatError("trailing bytes after last tensor record")
    return meta, tensors


def load_generator(path) -> tuple[Generator, dict]:
    meta, tensors = load_checkpoint(path)
    cfg = ResnctConfig(**meta["config"])
    g = Generator(cfg)
    g.load_state_dict(tensors)
    return g, meta
