"""Minimal CLIP-style vision transformer with an inspectable last layer.

Only what mask pooling needs: patch embedding, class token, positional
embedding, pre-norm transformer blocks, and the final layer-norm/projection.
The forward pass deliberately stops before the last block so the pooling
code can rerun that block with a mask-dependent attention bias.

Checkpoints are ``torch.save`` files holding ``{"config": ..., "state_dict":
...}``; :func:`convert_openai_visual` maps the visual tower of a standard
CLIP state dict onto this layout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    width: int = 768
    heads: int = 12
    layers: int = 12
    embed_dim: int = 512

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("patch size must divide image size")
        if self.width % self.heads:
            raise ValueError("heads must divide width")
        if self.layers < 1:
            raise ValueError("need at least one transformer block")


def quick_gelu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.in_proj = nn.Linear(width, 3 * width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, w = x.shape
        q, k, v = self.in_proj(x).chunk(3, dim=-1)
        head_dim = w // self.heads
        q = q.reshape(n, self.heads, head_dim).transpose(0, 1)
        k = k.reshape(n, self.heads, head_dim).transpose(0, 1)
        v = v.reshape(n, self.heads, head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, w)
        return self.out_proj(out)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp_fc = nn.Linear(width, 4 * width)
        self.mlp_proj = nn.Linear(4 * width, width)

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp_proj(quick_gelu(self.mlp_fc(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class VisionEncoder(nn.Module):
    """CLIP visual tower exposing the tokens entering its last block."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        width = config.width
        self.conv1 = nn.Conv2d(3, width, config.patch_size, config.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(width))
        self.positional_embedding = nn.Parameter(
            torch.zeros(config.grid * config.grid + 1, width)
        )
        self.ln_pre = nn.LayerNorm(width)
        self.blocks = nn.ModuleList(Block(width, config.heads) for _ in range(config.layers))
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, config.embed_dim))

    @property
    def last_block(self) -> Block:
        return self.blocks[-1]

    @torch.no_grad()
    def tokens_before_last_block(self, image: torch.Tensor) -> torch.Tensor:
        """Image tokens (class token dropped) entering the last block.

        ``image`` is a normalized (3, S, S) tensor with S equal to the
        configured input size; the result is (grid*grid, width).
        """
        if image.shape != (3, self.config.image_size, self.config.image_size):
            raise ValueError(
                f"expected (3, {self.config.image_size}, {self.config.image_size}) input, "
                f"got {tuple(image.shape)}"
            )
        x = self.conv1(image[None])  # (1, width, grid, grid)
        x = x.flatten(2).squeeze(0).T  # (grid*grid, width)
        x = torch.cat([self.class_embedding[None, :], x], dim=0)
        x = x + self.positional_embedding
        x = self.ln_pre(x)
        for block in self.blocks[:-1]:
            x = block(x)
        return x[1:].contiguous()

    def head_apply(self, tokens: torch.Tensor) -> torch.Tensor:
        """Final token-wise operations: residual MLP, layer norm, projection."""
        block = self.last_block
        tokens = tokens + block.mlp(block.ln_2(tokens))
        return self.ln_post(tokens) @ self.proj


def save_checkpoint(encoder: VisionEncoder, path: str | Path) -> None:
    torch.save(
        {"config": asdict(encoder.config), "state_dict": encoder.state_dict()}, path
    )


def load_checkpoint(path: str | Path) -> VisionEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "config" not in payload:
        raise ValueError(f"{path} is not an extractor checkpoint")
    encoder = VisionEncoder(EncoderConfig(**payload["config"]))
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    return encoder


_OPENAI_BLOCK_KEYS = {
    "ln_1.weight": "ln_1.weight",
    "ln_1.bias": "ln_1.bias",
    "attn.in_proj_weight": "attn.in_proj.weight",
    "attn.in_proj_bias": "attn.in_proj.bias",
    "attn.out_proj.weight": "attn.out_proj.weight",
    "attn.out_proj.bias": "attn.out_proj.bias",
    "ln_2.weight": "ln_2.weight",
    "ln_2.bias": "ln_2.bias",
    "mlp.c_fc.weight": "mlp_fc.weight",
    "mlp.c_fc.bias": "mlp_fc.bias",
    "mlp.c_proj.weight": "mlp_proj.weight",
    "mlp.c_proj.bias": "mlp_proj.bias",
}


def convert_openai_visual(
    state_dict: dict, image_size: int = 224, head_dim: int = 64
) -> VisionEncoder:
    """Build an encoder from the ``visual.*`` keys of a CLIP state dict."""
    visual = {k[len("visual."):]: v for k, v in state_dict.items() if k.startswith("visual.")}
    if "conv1.weight" not in visual:
        raise ValueError("state dict has no visual tower")
    width = visual["conv1.weight"].shape[0]
    patch = visual["conv1.weight"].shape[-1]
    layers = 1 + max(
        int(k.split(".")[2]) for k in visual if k.startswith("transformer.resblocks.")
    )
    config = EncoderConfig(
        image_size=image_size,
        patch_size=patch,
        width=width,
        heads=width // head_dim,
        layers=layers,
        embed_dim=visual["proj"].shape[1],
    )
    encoder = VisionEncoder(config)
    mapped = {
        "conv1.weight": visual["conv1.weight"],
        "class_embedding": visual["class_embedding"],
        "positional_embedding": visual["positional_embedding"],
        "ln_pre.weight": visual["ln_pre.weight"],
        "ln_pre.bias": visual["ln_pre.bias"],
        "ln_post.weight": visual["ln_post.weight"],
        "ln_post.bias": visual["ln_post.bias"],
        "proj": visual["proj"],
    }
    for i in range(layers):
        for theirs, ours in _OPENAI_BLOCK_KEYS.items():
            mapped[f"blocks.{i}.{ours}"] = visual[f"transformer.resblocks.{i}.{theirs}"]
    encoder.load_state_dict(mapped)
    encoder.eval()
    return encoder


def random_encoder(config: EncoderConfig, seed: int = 0) -> VisionEncoder:
    """Small randomly initialized encoder for tests and demos."""
    generator = torch.Generator().manual_seed(seed)
    encoder = VisionEncoder(config)
    state = encoder.state_dict()
    for key, tensor in state.items():
        if tensor.ndim >= 2:
            fan_in = tensor.shape[-1] if tensor.ndim == 2 else tensor[0].numel()
            state[key] = torch.randn(tensor.shape, generator=generator) / fan_in**0.5
        elif key.endswith("bias") or key == "class_embedding":
            state[key] = 0.02 * torch.randn(tensor.shape, generator=generator)
        elif "weight" in key:  # layer-norm gains
            state[key] = 1.0 + 0.02 * torch.randn(tensor.shape, generator=generator)
        else:
            state[key] = 0.02 * torch.randn(tensor.shape, generator=generator)
    encoder.load_state_dict(state)
    encoder.eval()
    return encoder
