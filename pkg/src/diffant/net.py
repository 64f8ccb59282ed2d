"""Conditional denoiser: observation encoder plus query-based latent decoder."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import ActionCodec

CKPT_MAGIC = b"diffant-ckpt-v1\n"
MASK_FILL = -1e9


@dataclass
class ModelConfig:
    input_dim: int = 2048
    num_classes: int = 49
    hidden_dim: int = 256
    decoder_dim: int = 1024
    encoder_layers: int = 4
    decoder_layers: int = 4
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    num_queries: int = 8
    mask_kind: str = "global"
    windows: tuple = (9, 33, 129, 513)
    multilabel: bool = False
    max_steps: int = 1000


@dataclass(frozen=True)
class AttentionMaskSpec:
    kind: str = "global"
    windows: tuple = ()

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "local":
            w = list(self.windows)
            if not w or any(x % 2 == 0 or x < 1 for x in w):
                raise ValueError("local windows must be positive odd sizes")
            if any(b < a for a, b in zip(w, w[1:])):
                raise ValueError("local windows must be nondecreasing with depth")

    def layer_mask(self, layer: int, length: int, device=None):
        """Boolean (L, L) mask, True where attention is blocked; None when global."""
        if self.kind == "global":
            return None
        w = self.windows[min(layer, len(self.windows) - 1)]
        idx = torch.arange(length, device=device)
        return (idx[:, None] - idx[None, :]).abs() > w // 2


def sinusoid(positions, dim: int, dtype=torch.float32):
    """Interleaved sin/cos encoding: [sin(p w_0), cos(p w_0), sin(p w_1), ...]."""
    positions = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * i / dim)
    out = torch.zeros(positions.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(positions * freqs)
    out[:, 1::2] = torch.cos(positions * freqs)[:, : dim // 2]
    return out.to(dtype)


class MultiheadAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.zero_values = False

    def forward(self, query, key, value, block=None, key_padding=None, need_weights=False):
        B, Lq, D = query.shape
        Lk = key.shape[1]
        h = self.heads
        q = self.q(query).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.k(key).view(B, Lk, h, D // h).transpose(1, 2)
        v = self.v(value).view(B, Lk, h, D // h).transpose(1, 2)
        if self.zero_values:
            v = torch.zeros_like(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if block is not None:
            scores = scores.masked_fill(block, MASK_FILL)
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], MASK_FILL)
        attn = scores.softmax(dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(B, Lq, D)
        out = self.out(out)
        return (out, attn) if need_weights else out


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_mult, dropout):
        super().__init__()
        self.attn = MultiheadAttention(dim, heads, dropout)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Dropout(dropout),
                                 nn.Linear(ffn_mult * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, block=None, key_padding=None, need_weights=False):
        out = self.attn(x, x, x, block, key_padding, need_weights)
        attn = None
        if need_weights:
            out, attn = out
        x = self.norm1(x + self.drop(out))
        x = self.norm2(x + self.drop(self.ffn(x)))
        return x, attn


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_mult, dropout):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, heads, dropout)
        self.cross_attn = MultiheadAttention(dim, heads, dropout)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Dropout(dropout),
                                 nn.Linear(ffn_mult * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, memory_padding=None):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, memory, key_padding=memory_padding)))
        return self.norm3(x + self.drop(self.ffn(x)))


@dataclass
class EncodedObservation:
    E: torch.Tensor
    frame_logits: torch.Tensor
    padding: torch.Tensor | None = None
    attention: list = field(default_factory=list)


class DiffAnt(nn.Module):
    """Encoder, step-aware decoder with action queries, and the action codec."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, Dp = cfg.hidden_dim, cfg.decoder_dim
        self.mask_spec = AttentionMaskSpec(cfg.mask_kind, tuple(cfg.windows) if cfg.mask_kind == "local" else ())
        self.input_proj = nn.Linear(cfg.input_dim, D)
        self.encoder = nn.ModuleList(EncoderLayer(D, cfg.heads, cfg.ffn_mult, cfg.dropout)
                                     for _ in range(cfg.encoder_layers))
        self.frame_head = nn.Linear(D, cfg.num_classes)
        self.memory_proj = nn.Linear(D, Dp) if D != Dp else nn.Identity()
        self.step_mlp = nn.Sequential(nn.Linear(Dp, Dp), nn.SiLU(), nn.Linear(Dp, Dp))
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, Dp) * 0.02)
        self.decoder = nn.ModuleList(DecoderLayer(Dp, cfg.heads, cfg.ffn_mult, cfg.dropout)
                                     for _ in range(cfg.decoder_layers))
        self.out_proj = nn.Linear(Dp, Dp)
        self.codec = ActionCodec(cfg.num_classes, Dp, multilabel=cfg.multilabel)

    @property
    def dtype(self):
        return self.queries.dtype

    def encode(self, feats, padding=None, need_weights=False) -> EncodedObservation:
        """Encode (B, L, K) features; ``padding`` is a (B, L) bool mask of padded frames."""
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        if feats.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"feature dim {feats.shape[-1]} != configured {self.cfg.input_dim}")
        L = feats.shape[1]
        x = self.input_proj(feats.to(self.dtype))
        x = x + sinusoid(torch.arange(L), x.shape[-1], x.dtype)
        attn = []
        for i, layer in enumerate(self.encoder):
            x, w = layer(x, self.mask_spec.layer_mask(i, L), padding, need_weights)
            if need_weights:
                attn.append(w)
        return EncodedObservation(x, self.frame_head(x), padding, attn)

    def step_embed(self, s):
        s = torch.as_tensor(s).reshape(-1)
        if torch.any((s < 0) | (s > self.cfg.max_steps)):
            raise ValueError(f"step outside [0, {self.cfg.max_steps}]")
        return self.step_mlp(sinusoid(s, self.cfg.decoder_dim, self.dtype))

    def denoise(self, z_s, s, enc: EncodedObservation):
        """Predict ẑ_0 for all M slots in one pass."""
        if z_s.shape[-2:] != self.queries.shape:
            raise ValueError(f"latent shape {tuple(z_s.shape[-2:])} != {tuple(self.queries.shape)}")
        squeeze = z_s.dim() == 2
        if squeeze:
            z_s = z_s.unsqueeze(0)
        B = z_s.shape[0]
        step = self.step_embed(s)
        if step.shape[0] == 1:
            step = step.expand(B, -1)
        x = z_s.to(self.dtype) + self.queries.unsqueeze(0) + step.unsqueeze(1)
        memory = self.memory_proj(enc.E)
        padding = enc.padding
        if memory.shape[0] != B:
            memory = memory.expand(B, -1, -1)
            if padding is not None:
                padding = padding.expand(B, -1)
        for layer in self.decoder:
            x = layer(x, memory, padding)
        out = self.out_proj(x)
        return out.squeeze(0) if squeeze else out

    def set_memory_ablation(self, flag: bool):
        """Test hook: replace every cross-attention value by zero."""
        for layer in self.decoder:
            layer.cross_attn.zero_values = flag


def save_checkpoint(model: DiffAnt, path, config_echo=None):
    """Write a self-describing archive: magic line, JSON header, raw little-endian float32."""
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        blob = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    cfg = asdict(model.cfg)
    cfg["windows"] = list(cfg["windows"])
    header = json.dumps({"model": cfg, "config": config_echo or {}, "tensors": tensors},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path):
    """Return (model, config_echo)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a diffant-ckpt-v1 archive")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    data = raw[pos + hlen:]
    mcfg = header["model"]
    mcfg["windows"] = tuple(mcfg["windows"])
    model = DiffAnt(ModelConfig(**mcfg))
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header["config"]
