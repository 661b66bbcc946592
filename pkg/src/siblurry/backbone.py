"""Frozen ViT feature extractor with deep prompting, plus the linear head.

Parameter names follow the timm ``VisionTransformer`` layout (``cls_token``,
``pos_embed``, ``patch_embed.proj``, ``blocks.{i}.attn.qkv`` ...), so a
ViT-B/16 state dict loads directly with :func:`load_pretrained`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class ContractError(ValueError):
    """Input or prompt shapes do not match the backbone spec."""


@dataclass(frozen=True)
class BackboneSpec:
    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    in_channels: int = 3
    image_size: int = 224
    # "image" -> [C, H, W] inputs through a conv patch embedding,
    # "vector" -> [input_dim] inputs split into input_dim // patch_size tokens
    input_kind: str = "image"
    input_dim: int = 0
    prompt_layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    prompt_length: int = 8
    pretrained: str | None = None
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)
    init_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_layers", tuple(sorted(set(self.prompt_layers))))
        bad = [l for l in self.prompt_layers if not 0 <= l < self.depth]
        if bad:
            raise ContractError(f"prompt layers {bad} outside [0, {self.depth})")
        if self.embed_dim % self.num_heads:
            raise ContractError("embed_dim must be divisible by num_heads")
        if self.input_kind == "vector" and (self.input_dim <= 0 or self.input_dim % self.patch_size):
            raise ContractError("vector input_dim must be a positive multiple of patch_size")
        if self.prompt_length < 0:
            raise ContractError("prompt_length must be >= 0")

    @property
    def num_patches(self) -> int:
        if self.input_kind == "vector":
            return self.input_dim // self.patch_size
        return (self.image_size // self.patch_size) ** 2

    @property
    def token_length(self) -> int:
        return self.num_patches + 1

    @property
    def prompting(self) -> bool:
        return bool(self.prompt_layers) and self.prompt_length > 0

    @property
    def prompt_shape(self) -> tuple[int, int, int]:
        return (len(self.prompt_layers), self.prompt_length, self.embed_dim)

    def to_dict(self) -> dict:
        return asdict(self)


def full_spec(**overrides) -> BackboneSpec:
    """ViT-B/16 at 224px, the full-scale profile."""
    return replace(BackboneSpec(), **overrides)


def toy_spec(input_dim: int = 64, **overrides) -> BackboneSpec:
    """Depth-2, width-64 random backbone for vector inputs."""
    base = BackboneSpec(
        depth=2, embed_dim=64, num_heads=4, mlp_ratio=2.0, patch_size=8, in_channels=1,
        input_kind="vector", input_dim=input_dim, prompt_layers=(0, 1), prompt_length=4,
        mean=(0.0,), std=(1.0,),
    )
    return replace(base, **overrides)


PROFILES = {"full": full_spec, "toy": toy_spec}


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B, N, 3, h, D // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VectorPatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x.reshape(x.shape[0], -1, self.patch_size))


class ImagePatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_channels: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)


class FrozenViT(nn.Module):
    """Pre-norm ViT; every parameter has ``requires_grad=False``."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        D = spec.embed_dim
        if spec.input_kind == "vector":
            self.patch_embed = VectorPatchEmbed(spec.patch_size, D)
        else:
            self.patch_embed = ImagePatchEmbed(spec.patch_size, spec.in_channels, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.token_length, D))
        self.blocks = nn.ModuleList(Block(D, spec.num_heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self.register_buffer("mean", torch.tensor(spec.mean).view(1, -1, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(spec.std).view(1, -1, 1, 1), persistent=False)
        self._random_init(spec.init_seed)
        if spec.pretrained:
            load_pretrained(self, spec.pretrained)
        self.requires_grad_(False)
        self.eval()

    def _random_init(self, seed: int) -> None:
        # fan-in scaled weights so a random backbone still mixes its inputs
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                elif name in ("cls_token", "pos_embed"):
                    p.copy_(0.1 * torch.randn(p.shape, generator=g))
                else:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))

    def train(self, mode: bool = True) -> "FrozenViT":
        # always in eval mode; there is no dropout but keep the contract explicit
        return super().train(False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        dtype = self.pos_embed.dtype
        spec = self.spec
        if spec.input_kind == "vector":
            if x.dim() != 2 or x.shape[1] != spec.input_dim:
                raise ContractError(f"expected [B, {spec.input_dim}] inputs, got {tuple(x.shape)}")
            return x.to(dtype)
        if x.dim() != 4 or x.shape[1] != spec.in_channels:
            raise ContractError(f"expected [B, {spec.in_channels}, H, W] inputs, got {tuple(x.shape)}")
        if x.dtype == torch.uint8:
            x = x.to(dtype) / 255.0
        else:
            x = x.to(dtype)
        if x.shape[-1] != spec.image_size or x.shape[-2] != spec.image_size:
            x = F.interpolate(x, size=(spec.image_size, spec.image_size), mode="bilinear", align_corners=False)
        return (x - self.mean.to(dtype)) / self.std.to(dtype)

    def _tokens(self, x: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.preprocess(x))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def extract_query(self, x: torch.Tensor) -> torch.Tensor:
        """Class-token feature of the prompt-free pass; never carries a graph."""
        with torch.no_grad():
            t = self._tokens(x)
            for blk in self.blocks:
                t = blk(t)
            return self.norm(t)[:, 0]

    def forward_with_prompts(self, x: torch.Tensor, prompts: torch.Tensor | None) -> torch.Tensor:
        """Class-token feature with prompt tokens inserted at each prompt layer.

        ``prompts`` is ``[n_layers, L_p, D]`` (shared) or ``[B, n_layers, L_p, D]``
        (per sample).  The tokens sit between the class token and the patches
        for the duration of one block and are dropped afterwards.
        """
        spec = self.spec
        if not spec.prompting or prompts is None:
            if spec.prompting:
                raise ContractError("prompts required for a prompting backbone")
            return self.extract_query(x)
        B = x.shape[0]
        if prompts.dim() == 3:
            prompts = prompts.unsqueeze(0).expand(B, -1, -1, -1)
        if tuple(prompts.shape) != (B, *spec.prompt_shape):
            raise ContractError(f"prompt shape {tuple(prompts.shape)} != {(B, *spec.prompt_shape)}")
        layer_slot = {l: i for i, l in enumerate(spec.prompt_layers)}
        t = self._tokens(x)
        Lp = spec.prompt_length
        for i, blk in enumerate(self.blocks):
            if i in layer_slot:
                p = prompts[:, layer_slot[i]].to(t.dtype)
                t = blk(torch.cat([t[:, :1], p, t[:, 1:]], dim=1))
                t = torch.cat([t[:, :1], t[:, 1 + Lp :]], dim=1)
            else:
                t = blk(t)
        return self.norm(t)[:, 0]

    def forward(self, x: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward_with_prompts(x, prompts)


def classify(h: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Bias-free linear head, ``W`` is ``[D, num_classes]``."""
    if h.shape[-1] != W.shape[0]:
        raise ContractError(f"feature width {h.shape[-1]} != head input {W.shape[0]}")
    return h @ W


def load_pretrained(model: FrozenViT, path: str | Path) -> None:
    """Load a timm-layout ViT state dict (``.pth``/``.pt`` or ``.npz`` of arrays).

    Classifier keys (``head.*``, ``fc_norm.*``) are ignored.  Any missing or
    mis-shaped backbone tensor is an error.
    """
    path = Path(path)
    if path.suffix == ".npz":
        import numpy as np

        with np.load(path) as z:
            state = {k: torch.from_numpy(z[k]) for k in z.files}
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "model" in state and isinstance(state["model"], dict):
            state = state["model"]
    state = {k: v for k, v in state.items() if not k.startswith(("head.", "fc_norm.", "pre_logits."))}
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise KeyError(f"checkpoint {path} lacks {missing[:5]}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ContractError(f"{k}: checkpoint shape {tuple(state[k].shape)} != {tuple(v.shape)}")
    model.load_state_dict({k: state[k] for k in own}, strict=True)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_backbone(profile: str = "toy", **overrides) -> FrozenViT:
    return FrozenViT(PROFILES[profile](**overrides))


class ModelState(nn.Module):
    """Frozen backbone + trainable head ``W`` (``[D, num_classes]``, no bias) + prompt pool."""

    def __init__(self, backbone: FrozenViT, num_classes: int, pool_size: int = 10, seed: int = 0):
        super().__init__()
        from .mvp_core import PromptPool

        self.backbone = backbone
        self.num_classes = num_classes
        g = torch.Generator().manual_seed(seed)
        D = backbone.spec.embed_dim
        dtype = backbone.pos_embed.dtype
        bound = 1.0 / math.sqrt(D)
        self.head = nn.Parameter(((2 * torch.rand(D, num_classes, generator=g) - 1) * bound).to(dtype))
        self.pool = PromptPool(pool_size, D, num_classes, backbone.spec.prompt_shape, generator=g).to(dtype)

    def trainable(self) -> dict[str, nn.Parameter]:
        return {"head": self.head, "keys": self.pool.keys, "prompts": self.pool.prompts, "masks": self.pool.masks}

    def backbone_hash(self) -> str:
        return parameter_hash(self.backbone)

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        torch.save(
            {
                "backbone_spec": {**self.backbone.spec.to_dict(), "pretrained": None},
                "num_classes": self.num_classes,
                "pool_size": self.pool.size,
                "state": self.state_dict(),
                "extra": extra or {},
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelState":
        try:
            ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
            spec_d = dict(ckpt["backbone_spec"])
            for k in ("prompt_layers", "mean", "std"):
                spec_d[k] = tuple(spec_d[k])
            backbone = FrozenViT(BackboneSpec(**spec_d))
            dtype = ckpt["state"]["head"].dtype
            model = cls(backbone.to(dtype), ckpt["num_classes"], pool_size=ckpt["pool_size"])
            model.load_state_dict(ckpt["state"], strict=True)
        except (KeyError, RuntimeError, TypeError, EOFError, OSError) as err:
            raise CheckpointError(f"cannot load checkpoint {path}: {err}") from err
        model.extra = ckpt.get("extra", {})
        return model


class CheckpointError(RuntimeError):
    pass
