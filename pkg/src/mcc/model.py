"""The MCC network: two patch-token encoders, fusion, and a query decoder.

Decoder queries never see each other. The mask in :func:`build_decoder_mask`
states the rule over the whole token sequence; :meth:`Decoder.forward`
realizes the same computation in factored form. Context tokens are run
once, then queries are decoded in fixed-size blocks, each query attending to
the per-layer context keys plus its own key. Every block has the same
shapes, so a query's result is bitwise independent of its neighbours.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from mcc import nn as ops
from mcc.geometry import NormalizationTransform, RgbdFrame, bin_color, unproject_map

CONDITIONING = ("detailed", "global")
DECODER_MODES = ("concat_attn", "cross_attn")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    enc_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    use_rgb: bool = True
    conditioning: str = "detailed"
    decoder_mode: str = "concat_attn"
    n_queries_train: int = 128
    tau: float = 0.1
    occupancy_threshold: float = 0.1
    object_range: float = 3.0  # queries in [-r, r]^3
    scene_range: float = 6.0  # x, y in [-r, r], z in (0, r]
    color_bins: int = 256
    mlp_ratio: float = 4.0
    patch_mlp_ratio: float = 2.0
    query_block: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ValueError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ValueError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if min(self.enc_layers, self.dec_layers, self.n_queries_train, self.query_block) < 1:
            raise ValueError("layer counts, n_queries_train and query_block must be at least 1")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 < self.occupancy_threshold < 1:
            raise ValueError(f"occupancy_threshold must lie in (0, 1), got {self.occupancy_threshold}")
        if not (self.object_range > 0 and self.scene_range > 0):
            raise ValueError("query ranges must be positive")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        if self.color_bins != 256:
            raise ValueError("color_bins is fixed at 256")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_enc(self) -> int:
        return self.n_patches + 1

    def query_bounds(self, mode: str):
        """(lo, hi) corners of the query region for ``mode``."""
        if mode == "object":
            r = self.object_range
            return np.full(3, -r), np.full(3, r)
        if mode == "scene":
            r = self.scene_range
            return np.array([-r, -r, 0.0]), np.array([r, r, r])
        raise ValueError(f"mode must be 'object' or 'scene', got {mode!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def desk(cls, **changes) -> "ModelConfig":
        return cls(**changes)

    @classmethod
    def paper(cls, **changes) -> "ModelConfig":
        base = dict(image_size=224, patch_size=16, enc_dim=768, enc_layers=12, enc_heads=12,
                    dec_dim=512, dec_layers=8, dec_heads=16, n_queries_train=550, query_block=256)
        base.update(changes)
        return cls(**base)


@dataclass
class EncoderOutput:
    R: torch.Tensor  # [B, N_enc, C]


@dataclass
class DecoderOutput:
    occupancy_logits: torch.Tensor  # [B, N_q]
    color_logits: torch.Tensor  # [B, N_q, 3, 256]


def build_decoder_mask(n_enc: int, n_q: int) -> np.ndarray:
    """Boolean attention mask over ``[cls, encoder tokens, queries]``.

    Every token may attend to cls and the encoder tokens; a query token
    additionally attends to itself and to no other query.
    """
    if n_enc < 1 or n_q < 1:
        raise ValueError(f"n_enc and n_q must be at least 1, got {n_enc}, {n_q}")
    n = 1 + n_enc + n_q
    mask = np.zeros((n, n), dtype=bool)
    mask[:, : 1 + n_enc] = True
    q = np.arange(1 + n_enc, n)
    mask[q, q] = True
    return mask


def _trunc_normal(shape, gen: torch.Generator, std: float = 0.02) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, gen: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(_trunc_normal((n_in, n_out), gen))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias, 1e-6)


class QKV(nn.Module):
    """Joint query/key/value projection with biases on queries and values only.

    A key bias shifts every logit of a softmax row equally, so it would have
    no effect and an identically zero gradient.
    """

    def __init__(self, dim: int, gen: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(_trunc_normal((dim, 3 * dim), gen))
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        return ops.linear(x, self.weight, bias).chunk(3, dim=-1)


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        hidden = int(round(dim * mlp_ratio))
        self.ln1 = LayerNorm(dim)
        self.qkv = QKV(dim, gen)
        self.out = Linear(dim, dim, gen)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, gen)
        self.fc2 = Linear(hidden, dim, gen)

    def project(self, x):
        return self.qkv(self.ln1(x))

    def mlp(self, x):
        return x + self.fc2(ops.gelu(self.fc1(self.ln2(x))))

    def forward(self, x, mask=None):
        q, k, v = self.project(x)
        x = x + self.out(ops.masked_attention(q, k, v, mask, self.heads))
        return self.mlp(x)


def _patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, H, W, c] -> [B, (H/p)(W/p), p*p, c], patches and pixels row-major."""
    b, h, w, c = x.shape
    x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p, c)


class PointPatchEmbed(nn.Module):
    """Per-pixel point tokens summarized by one transformer layer and a readout token."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        c = cfg.enc_dim
        self.p = cfg.patch_size
        self.point = Linear(3, c, gen)
        self.unknown = nn.Parameter(_trunc_normal((c,), gen))
        self.readout = nn.Parameter(_trunc_normal((c,), gen))
        self.block = Block(c, cfg.enc_heads, cfg.patch_mlp_ratio, gen)

    def forward(self, points, valid):
        b = points.shape[0]
        pts = _patchify(points, self.p)
        ok = _patchify(valid.unsqueeze(-1), self.p)
        # invalid pixels may hold NaN or garbage; zero them before the projection
        tok = torch.where(ok, self.point(torch.where(ok, pts, torch.zeros_like(pts))), self.unknown)
        n = tok.shape[1]
        tok = torch.cat([self.readout.expand(b, n, 1, -1), tok], dim=2)
        out = self.block(tok.reshape(b * n, tok.shape[2], -1))[:, 0]
        return out.reshape(b, n, -1)


class Tower(nn.Module):
    """Global token + positional embeddings + transformer stack + final norm."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        c = cfg.enc_dim
        self.token = nn.Parameter(_trunc_normal((c,), gen))
        self.pos = nn.Parameter(_trunc_normal((cfg.n_enc, c), gen))
        self.blocks = nn.ModuleList(Block(c, cfg.enc_heads, cfg.mlp_ratio, gen) for _ in range(cfg.enc_layers))
        self.norm = LayerNorm(c)

    def forward(self, tokens):
        b = tokens.shape[0]
        x = torch.cat([self.token.expand(b, 1, -1), tokens], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        c, d = cfg.enc_dim, cfg.dec_dim
        self.cfg = cfg
        self.query_embed = Linear(3, c, gen)
        self.cls = nn.Parameter(_trunc_normal((c,), gen))
        self.proj = Linear(c, d, gen)
        self.blocks = nn.ModuleList(Block(d, cfg.dec_heads, cfg.mlp_ratio, gen) for _ in range(cfg.dec_layers))
        self.norm = LayerNorm(d)
        self.occupancy = Linear(d, 1, gen)
        self.color = Linear(d, 3 * cfg.color_bins, gen)

    def _context(self, R):
        if self.cfg.conditioning == "global":
            R = R.mean(dim=1, keepdim=True)
        if self.cfg.decoder_mode == "cross_attn":
            return self.proj(R)
        return self.proj(torch.cat([self.cls.expand(R.shape[0], 1, -1), R], dim=1))

    def context_kv(self, R):
        """Per-layer (key, value) of the context tokens; queries never feed back into these."""
        ctx = self._context(R)
        kv = []
        for blk in self.blocks:
            q, k, v = blk.project(ctx)
            kv.append((k, v))
            if self.cfg.decoder_mode == "concat_attn":
                ctx = blk.mlp(ctx + blk.out(ops.masked_attention(q, k, v, None, blk.heads)))
        return kv

    def _heads(self, x):
        x = self.norm(x)
        occ = self.occupancy(x)[..., 0]
        col = self.color(x).reshape(*x.shape[:-1], 3, self.cfg.color_bins)
        return occ, col

    def decode_block(self, kv, queries):
        x = self.proj(self.query_embed(queries))
        cross = self.cfg.decoder_mode == "cross_attn"
        for blk, (kc, vc) in zip(self.blocks, kv):
            q, k, v = blk.project(x)
            if cross:
                a = ops.context_attention(q, kc, vc, blk.heads)
            else:
                a = ops.context_attention(q, kc, vc, blk.heads, k, v)
            x = blk.mlp(x + blk.out(a))
        return self._heads(x)

    def forward(self, R, queries, block: int | None = None, sigmoid: bool = False):
        """Decode in zero-padded blocks of ``block`` queries.

        Every block has the same shape, so a query's arithmetic does not depend
        on how many queries are decoded with it. ``sigmoid`` maps occupancy
        logits to σ inside the block for the same reason: elementwise kernels
        take different code paths for different tensor lengths.
        """
        block = block or self.cfg.query_block
        kv = self.context_kv(R)
        b, n, _ = queries.shape
        occs, cols = [], []
        for start in range(0, n, block):
            m = min(block, n - start)
            qb = queries.new_zeros(b, block, 3)
            qb[:, :m] = queries[:, start:start + m]
            occ, col = self.decode_block(kv, qb)
            if sigmoid:
                occ = torch.sigmoid(occ)
            occs.append(occ[:, :m])
            cols.append(col[:, :m])
        return torch.cat(occs, dim=1), torch.cat(cols, dim=1)

    def forward_dense(self, R, queries):
        """Reference decode over the full masked sequence (concat_attn only)."""
        if self.cfg.decoder_mode != "concat_attn":
            raise ValueError("the dense reference decoder covers concat_attn only")
        if self.cfg.conditioning == "global":
            R = R.mean(dim=1, keepdim=True)
        b, n_enc, n_q = R.shape[0], R.shape[1], queries.shape[1]
        x = torch.cat([self.cls.expand(b, 1, -1), R, self.query_embed(queries)], dim=1)
        x = self.proj(x)
        mask = torch.from_numpy(build_decoder_mask(n_enc, n_q))
        for blk in self.blocks:
            x = blk(x, mask)
        return self._heads(x[:, 1 + n_enc:])


class MCC(nn.Module):
    """Encoder towers, fusion and decoder. ``encode_calls`` counts encoder passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        c, p = cfg.enc_dim, cfg.patch_size
        self.xyz_embed = PointPatchEmbed(cfg, gen)
        self.xyz_tower = Tower(cfg, gen)
        if cfg.use_rgb:
            self.rgb_embed = Linear(3 * p * p, c, gen)
            self.rgb_tower = Tower(cfg, gen)
        self.fuse = Linear(2 * c if cfg.use_rgb else c, c, gen)
        self.decoder = Decoder(cfg, gen)
        self.encode_calls = 0

    @property
    def dtype(self):
        return self.fuse.weight.dtype

    def _check_inputs(self, image, points, valid):
        s = self.cfg.image_size
        if points.shape[1:] != (s, s, 3) or valid.shape[1:] != (s, s):
            raise ValueError(
                f"point map {tuple(points.shape)} / validity {tuple(valid.shape)} do not match "
                f"image_size {s}")
        if self.cfg.use_rgb and image.shape[1:] != (s, s, 3):
            raise ValueError(f"image {tuple(image.shape)} does not match image_size {s}")

    def patch_embed_rgb(self, image):
        p = self.cfg.patch_size
        return self.rgb_embed(_patchify(image, p).flatten(2))

    def patch_embed_xyz(self, points, valid):
        return self.xyz_embed(points, valid)

    def encode(self, image, points, valid) -> EncoderOutput:
        """image [B,S,S,3] in [0,1], points [B,S,S,3], valid [B,S,S] bool."""
        self._check_inputs(image, points, valid)
        self.encode_calls += 1
        xyz = self.xyz_tower(self.patch_embed_xyz(points, valid))
        if self.cfg.use_rgb:
            rgb = self.rgb_tower(self.patch_embed_rgb(image))
            return EncoderOutput(self.fuse(torch.cat([xyz, rgb], dim=-1)))
        return EncoderOutput(self.fuse(xyz))

    def decode(self, enc: EncoderOutput, queries, block: int | None = None, sigmoid: bool = False) -> DecoderOutput:
        """Occupancy logits (σ with ``sigmoid``) and color logits for every query."""
        if queries.dim() != 3 or queries.shape[-1] != 3:
            raise ValueError(f"queries must be [B, N, 3], got {tuple(queries.shape)}")
        if queries.shape[1] == 0:
            raise ValueError("decode needs at least one query")
        if queries.dtype == torch.float64 and not torch.isfinite(queries).all():
            raise ValueError("queries must be finite")
        return DecoderOutput(*self.decoder(enc.R, queries, block, sigmoid))

    def decode_dense(self, enc: EncoderOutput, queries) -> DecoderOutput:
        return DecoderOutput(*self.decoder.forward_dense(enc.R, queries))

    def forward(self, image, points, valid, queries) -> DecoderOutput:
        return self.decode(self.encode(image, points, valid), queries)

    @torch.no_grad()
    def predict(self, inputs: "ModelInputs", queries: np.ndarray, chunk_size: int = 2048,
                enc: EncoderOutput | None = None):
        """σ in [0, 1] and colors in [0, 1]^3 per query; encodes at most once.

        Returns (sigma [N], colors [N, 3], EncoderOutput) so callers can reuse R.
        """
        if chunk_size < 1:
            raise ValueError(f"chunk_size must be positive, got {chunk_size}")
        if enc is None:
            enc = self.encode(*inputs.tensors(self.dtype))
        q = torch.as_tensor(np.asarray(queries, dtype=np.float64).reshape(1, -1, 3), dtype=self.dtype)
        if q.shape[1] == 0:
            raise ValueError("predict needs at least one query")
        sig, col = [], []
        for start in range(0, q.shape[1], chunk_size):
            out = self.decode(enc, q[:, start:start + chunk_size], sigmoid=True)
            sig.append(out.occupancy_logits[0].double().numpy())
            col.append(out.color_logits[0].argmax(dim=-1).numpy())
        return np.concatenate(sig), bin_color(np.concatenate(col)), enc

    def parameter_dict(self) -> dict:
        return dict(self.named_parameters())

    def load_parameters(self, params: dict) -> None:
        """Copy named tensors in; names and shapes must match exactly."""
        own = self.parameter_dict()
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {missing}, unexpected {extra}")
        with torch.no_grad():
            for name, p in own.items():
                if tuple(params[name].shape) != tuple(p.shape):
                    raise ValueError(
                        f"parameter {name}: shape {tuple(params[name].shape)} vs {tuple(p.shape)}")
                p.copy_(params[name])


@dataclass
class ModelInputs:
    """Encoder inputs for one frame, in the normalized coordinate frame."""

    image: np.ndarray  # [S, S, 3]
    points: np.ndarray  # [S, S, 3], zeros where invalid
    valid: np.ndarray  # [S, S] bool

    def tensors(self, dtype=torch.float32):
        return (torch.as_tensor(self.image[None], dtype=dtype),
                torch.as_tensor(self.points[None], dtype=dtype),
                torch.as_tensor(self.valid[None]))


def stack_inputs(batch, dtype=torch.float32):
    return (torch.as_tensor(np.stack([b.image for b in batch]), dtype=dtype),
            torch.as_tensor(np.stack([b.points for b in batch]), dtype=dtype),
            torch.as_tensor(np.stack([b.valid for b in batch])))


def frame_inputs(frame: RgbdFrame, transform: NormalizationTransform, mode: str) -> ModelInputs:
    """Seen points of ``frame`` in the normalized query frame.

    Object mode works in normalized world coordinates, scene mode in
    normalized coordinates of the input camera.
    """
    if mode not in ("object", "scene"):
        raise ValueError(f"mode must be 'object' or 'scene', got {mode!r}")
    pts, valid = unproject_map(frame, to_world=(mode == "object"))
    pts = transform.apply(np.where(valid[..., None], pts, 0.0))
    pts[~valid] = 0.0
    return ModelInputs(np.asarray(frame.image, dtype=np.float64), pts, valid)
