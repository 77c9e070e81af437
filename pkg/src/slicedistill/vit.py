"""Vision Transformer encoder with class token and projection head.

Parameters live in a flat name -> float32 array dict so the optimizer,
EMA update, and checkpointing can treat them uniformly. Forward passes
wrap them into autodiff tensors on demand. Inputs of different sides
(96, 64, 224) share one parameter set: the positional grid is bilinearly
interpolated whenever the token grid differs from the reference grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._interp import axis_weights
from .autodiff import Tensor
from .errors import IndivisibleInput

ViTParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 1024
    depth: int = 24
    n_heads: int = 16
    mlp_ratio: float = 4.0
    head_hidden_dim: int = 2048
    head_bottleneck_dim: int = 256
    n_prototypes: int = 65536
    pos_side: int = 224

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.pos_side % self.patch_size != 0:
            raise ValueError(f"pos_side {self.pos_side} not divisible by patch {self.patch_size}")

    @property
    def pos_grid(self) -> int:
        return self.pos_side // self.patch_size

    @classmethod
    def vit_large(cls) -> "ViTConfig":
        return cls()

    @classmethod
    def desk_scale(cls) -> "ViTConfig":
        return cls(patch_size=8, embed_dim=64, depth=2, n_heads=4, mlp_ratio=4.0,
                   head_hidden_dim=128, head_bottleneck_dim=32, n_prototypes=256,
                   pos_side=96)


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator) -> ViTParams:
    d = cfg.embed_dim
    g = cfg.pos_grid
    hid = int(cfg.mlp_ratio * d)
    pin = cfg.patch_size * cfg.patch_size * 3

    def w(*shape):
        return (rng.normal(0.0, 0.02, size=shape)).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    p: ViTParams = {
        "patch_embed.w": w(pin, d),
        "patch_embed.b": zeros(d),
        "cls_token": w(d),
        "pos_cls": w(d),
        "pos_grid": w(g * g, d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        p[pre + "norm1.g"] = np.ones(d, dtype=np.float32)
        p[pre + "norm1.b"] = zeros(d)
        p[pre + "attn.qkv.w"] = w(d, 3 * d)
        p[pre + "attn.qkv.b"] = zeros(3 * d)
        p[pre + "attn.out.w"] = w(d, d)
        p[pre + "attn.out.b"] = zeros(d)
        p[pre + "norm2.g"] = np.ones(d, dtype=np.float32)
        p[pre + "norm2.b"] = zeros(d)
        p[pre + "mlp.fc1.w"] = w(d, hid)
        p[pre + "mlp.fc1.b"] = zeros(hid)
        p[pre + "mlp.fc2.w"] = w(hid, d)
        p[pre + "mlp.fc2.b"] = zeros(d)
    p["norm.g"] = np.ones(d, dtype=np.float32)
    p["norm.b"] = zeros(d)
    p["head.fc1.w"] = w(d, cfg.head_hidden_dim)
    p["head.fc1.b"] = zeros(cfg.head_hidden_dim)
    p["head.fc2.w"] = w(cfg.head_hidden_dim, cfg.head_bottleneck_dim)
    p["head.fc2.b"] = zeros(cfg.head_bottleneck_dim)
    p["head.prototypes"] = normalize_prototype_rows(w(cfg.n_prototypes, cfg.head_bottleneck_dim))
    return p


def param_names(cfg: ViTConfig) -> list[str]:
    names = ["patch_embed.w", "patch_embed.b", "cls_token", "pos_cls", "pos_grid"]
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        names += [pre + s for s in ("norm1.g", "norm1.b", "attn.qkv.w", "attn.qkv.b",
                                    "attn.out.w", "attn.out.b", "norm2.g", "norm2.b",
                                    "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b")]
    names += ["norm.g", "norm.b", "head.fc1.w", "head.fc1.b",
              "head.fc2.w", "head.fc2.b", "head.prototypes"]
    return names


def normalize_prototype_rows(protos: np.ndarray) -> np.ndarray:
    """Unit-norm rows; reapplied after every optimizer step."""
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    return (protos / np.maximum(norms, 1e-12)).astype(np.float32)


def copy_params(params: ViTParams) -> ViTParams:
    return {k: v.copy() for k, v in params.items()}


def wrap_params(params: ViTParams, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def patchify(view: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an (H, W, 3) view into raster-ordered flattened patches."""
    h, w, c = view.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise IndivisibleInput(f"view {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    blocks = view.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(gh * gw, p * p * c), dtype=np.float32)


def patchify_batch(views: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, c = views.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise IndivisibleInput(f"views {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    blocks = views.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(blocks.reshape(b, gh * gw, p * p * c))


def patchify_tensor(views: Tensor, patch_size: int) -> Tensor:
    """Differentiable patchify (used when gradients wrt the input image
    are needed, e.g. in the gradient audit)."""
    b, h, w, c = views.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise IndivisibleInput(f"views {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    t = views.reshape(b, gh, p, gw, p, c).transpose((0, 1, 3, 2, 4, 5))
    return t.reshape(b, gh * gw, p * p * c)


def _interp_pos_grid(pos: Tensor, src_grid: int, dst_grid: int, d: int) -> Tensor:
    """Bilinearly resample a (src^2, d) positional table to (dst^2, d).

    Expressed as two constant matmuls so the gradient reaches the table
    even when the training crop never matches the reference side.
    """
    if src_grid == dst_grid:
        return pos
    wy = Tensor(axis_weights(src_grid, dst_grid))
    t = pos.reshape(src_grid, src_grid * d)
    t = ad.matmul(wy, t)                                    # (dst, src*d)
    t = t.reshape(dst_grid, src_grid, d).transpose((1, 0, 2)).reshape(src_grid, dst_grid * d)
    t = ad.matmul(wy, t)                                    # (dst, dst*d)
    return t.reshape(dst_grid, dst_grid, d).transpose((1, 0, 2)).reshape(dst_grid * dst_grid, d)


def forward_features_batch(tokens, params: dict[str, Tensor],
                           cfg: ViTConfig, grid: int) -> tuple[Tensor, Tensor]:
    """Run the encoder on pre-patchified views.

    tokens: (B, N, patch^2*3) array or Tensor with N == grid^2. Returns
    (cls (B, D), patch tokens (B, N, D)) after the final norm.
    """
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens, dtype=np.asarray(tokens).dtype)
    b, n, _ = tokens.shape
    d = cfg.embed_dim
    nh = cfg.n_heads
    dh = d // nh

    x = ad.add(ad.matmul(tokens, params["patch_embed.w"]), params["patch_embed.b"])
    pos = _interp_pos_grid(params["pos_grid"], cfg.pos_grid, grid, d)
    x = ad.add(x, pos)                                       # (B, N, D)

    cls = ad.add(params["cls_token"], params["pos_cls"]).reshape(1, 1, d)
    cls = ad.broadcast_to(cls, (b, 1, d))
    x = ad.concat([cls, x], axis=1)                          # (B, M, D), M = N+1
    m = n + 1

    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h = ad.layer_norm(x, params[pre + "norm1.g"], params[pre + "norm1.b"])
        qkv = ad.add(ad.matmul(h, params[pre + "attn.qkv.w"]), params[pre + "attn.qkv.b"])
        qkv = qkv.reshape(b, m, 3, nh, dh).transpose((2, 0, 3, 1, 4))
        q, k, v = [t.reshape(b, nh, m, dh) for t in ad.split(qkv, 3, 0)]
        att = ad.softmax(ad.mul_scalar(ad.matmul(q, k.transpose((0, 1, 3, 2))), scale))
        ctx = ad.matmul(att, v).transpose((0, 2, 1, 3)).reshape(b, m, d)
        x = ad.add(x, ad.add(ad.matmul(ctx, params[pre + "attn.out.w"]),
                             params[pre + "attn.out.b"]))
        h2 = ad.layer_norm(x, params[pre + "norm2.g"], params[pre + "norm2.b"])
        h2 = ad.gelu(ad.add(ad.matmul(h2, params[pre + "mlp.fc1.w"]), params[pre + "mlp.fc1.b"]))
        h2 = ad.add(ad.matmul(h2, params[pre + "mlp.fc2.w"]), params[pre + "mlp.fc2.b"])
        x = ad.add(x, h2)

    x = ad.layer_norm(x, params["norm.g"], params["norm.b"])
    cls_out = ad.narrow(x, 1, 0, 1).reshape(b, d)
    patches = ad.narrow(x, 1, 1, n)
    return cls_out, patches


def forward_views(views: np.ndarray, params: dict[str, Tensor],
                  cfg: ViTConfig) -> tuple[Tensor, Tensor]:
    """Patchify (B, S, S, 3) views and run the encoder."""
    side = views.shape[1]
    if side % cfg.patch_size != 0:
        raise IndivisibleInput(f"side {side} not divisible by patch {cfg.patch_size}")
    tokens = patchify_batch(views, cfg.patch_size)
    return forward_features_batch(tokens, params, cfg, side // cfg.patch_size)


def forward_features(view: np.ndarray, params: ViTParams,
                     cfg: ViTConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single-view inference convenience; returns numpy (D,), (N, D)."""
    wrapped = wrap_params(params, requires_grad=False)
    cls, patches = forward_views(view[None], wrapped, cfg)
    return cls.data[0], patches.data[0]


def forward_head(cls_emb: Tensor, params: dict[str, Tensor]) -> Tensor:
    """cls embedding -> prototype logits via the projection head."""
    z = ad.gelu(ad.add(ad.matmul(cls_emb, params["head.fc1.w"]), params["head.fc1.b"]))
    z = ad.add(ad.matmul(z, params["head.fc2.w"]), params["head.fc2.b"])
    z = ad.l2_normalize(z)
    return ad.matmul(z, params["head.prototypes"].transpose((1, 0)))


def save_checkpoint(path, params: ViTParams, cfg: ViTConfig,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """VDCK tensor table plus a JSON config sidecar."""
    table = dict(params)
    if extra:
        table.update(extra)
    ad.save_tensors(path, table)
    Path(str(path) + ".json").write_text(json.dumps(asdict(cfg), indent=2))


def load_checkpoint(path) -> tuple[ViTParams, ViTConfig, dict[str, np.ndarray]]:
    """Returns (backbone+head params, config, any extra tensors)."""
    cfg = ViTConfig(**json.loads(Path(str(path) + ".json").read_text()))
    table = ad.load_tensors(path)
    names = set(param_names(cfg))
    params = {k: v for k, v in table.items() if k in names}
    extra = {k: v for k, v in table.items() if k not in names}
    return params, cfg, extra
