"""Frozen Vision Transformer with prompt-token insertion.

Sequence layout is ``[prompts, patch tokens, CLS]`` by default; ``cls_first``
switches to the conventional ``[CLS, prompts, patches]`` for cross-checks.
Prompts are latent vectors and receive no positional term here. Patch tokens
get ``e_pos[1 + j]`` for row-major patch index ``j``; the table is allocated
for ``r_max`` extra patch rows so images with appended prompt patches can be
embedded with their own positional entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import (BadCheckpoint, LayerOutOfRange, NoAttention, NotDivisible, ShapeMismatch,
                     TooManyPrompts)
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 32
    image_w: int = 32
    patch_size: int = 4
    embed_dim: int = 48
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    r_max: int = 2
    num_classes: int = 10
    cls_first: bool = False

    def __post_init__(self):
        s = self.patch_size
        if s <= 0 or self.image_h % s or self.image_w % s:
            raise NotDivisible(f"image {self.image_h}x{self.image_w} not divisible by patch size {s}")
        if self.embed_dim % self.heads:
            raise ShapeMismatch(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if 3 * s * s < self.embed_dim:
            raise ShapeMismatch(f"3*s^2={3 * s * s} < embed_dim={self.embed_dim}; prompt inversion needs 3s^2 >= C")
        if self.depth < 1 or self.r_max < 0:
            raise ValueError("depth must be >= 1 and r_max >= 0")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def max_prompts(self) -> int:
        return self.r_max * self.grid_w

    @property
    def pos_rows(self) -> int:
        return 1 + (self.grid_h + self.r_max) * self.grid_w

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeqLayout:
    cls_index: int
    prompt_indices: np.ndarray
    patch_indices: np.ndarray

    @property
    def length(self) -> int:
        return 1 + len(self.prompt_indices) + len(self.patch_indices)


@dataclass
class EncodeOutput:
    z: Tensor
    layout: SeqLayout
    attn: list[np.ndarray] | None = field(default=None)


def patchify(image, s: int) -> Tensor:
    """(3, H, W) -> (H'W', 3s^2), or batched (B, 3, H, W) -> (B, H'W', 3s^2).

    Patches are row-major over the grid; each row is the channel-major
    flattening of a 3 x s x s block.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeMismatch(f"patchify expects (3,H,W) or (B,3,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % s or w % s:
        raise NotDivisible(f"image {h}x{w} not divisible by patch size {s}")
    gh, gw = h // s, w // s
    out = x.reshape(b, c, gh, s, gw, s).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * s * s)
    return out.reshape(gh * gw, c * s * s) if single else out


class Block(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float):
        hidden = int(round(dim * mlp_ratio))
        self.ln1 = LayerNorm(dim)
        self.wq = Linear(rng, dim, dim, init="trunc_normal")
        self.wk = Linear(rng, dim, dim, init="trunc_normal")
        self.wv = Linear(rng, dim, dim, init="trunc_normal")
        self.proj = Linear(rng, dim, dim, init="trunc_normal")
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, hidden, init="trunc_normal")
        self.fc2 = Linear(rng, hidden, dim, init="trunc_normal")
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        return x.reshape(b, t, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, query_index: int | None = None) -> tuple[Tensor, np.ndarray]:
        """Pre-norm block. With ``query_index`` only that token's output row is computed."""
        b, t, c = x.shape
        h = self.ln1(x)
        if query_index is not None:
            x = x[:, query_index:query_index + 1, :]
            q = self.wq(h[:, query_index:query_index + 1, :])
            t = 1
        else:
            q = self.wq(h)
        att, probs = T.attention(self._split(q), self._split(self.wk(h)), self._split(self.wv(h)))
        att = att.transpose(0, 2, 1, 3).reshape(b, t, c)
        x = x + self.proj(att)
        x = x + self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return x, probs


class FrozenEncoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.embed_dim
        self.w_proj = Parameter(trunc_normal(rng, (config.patch_dim, c)))
        self.e_pos = Parameter(trunc_normal(rng, (config.pos_rows, c)))
        self.cls_token = Parameter(trunc_normal(rng, (c,)))
        self.blocks = [Block(rng, c, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        self.ln_f = LayerNorm(c)
        self.freeze()

    # -- input layer ------------------------------------------------------
    def embed(self, patches) -> Tensor:
        """Patch rows -> tokens: ``patches @ w_proj + e_pos[1 : 1 + P]``."""
        p = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.w_proj.dtype))
        if p.shape[-1] != self.config.patch_dim:
            raise ShapeMismatch(f"patch dim {p.shape[-1]} != {self.config.patch_dim}")
        n = p.shape[-2]
        if n > self.config.pos_rows - 1:
            raise TooManyPrompts(f"{n} patches exceed positional table ({self.config.pos_rows - 1})")
        if n % self.config.grid_w:
            raise NotDivisible(f"{n} patches do not fill rows of {self.config.grid_w}")
        return T.linear(p, self.w_proj) + self.e_pos[1:1 + n]

    def embed_image(self, image) -> Tensor:
        return self.embed(patchify(image, self.config.patch_size))

    # -- transformer ------------------------------------------------------
    def layout(self, k: int, n_patches: int) -> SeqLayout:
        if self.config.cls_first:
            return SeqLayout(0, np.arange(1, 1 + k), np.arange(1 + k, 1 + k + n_patches))
        return SeqLayout(k + n_patches, np.arange(k), np.arange(k, k + n_patches))

    def encode(self, prompts, x_v, collect_attn: bool = False) -> EncodeOutput:
        """Run the frozen transformer on ``[prompts; x_v; CLS]`` and return the CLS embedding.

        Accepts unbatched ``(K, C)`` / ``(P, C)`` inputs or batched ``(B, K, C)`` /
        ``(B, P, C)``. ``prompts`` may be ``None`` for K = 0.
        """
        x_v = x_v if isinstance(x_v, Tensor) else Tensor(np.asarray(x_v))
        single = x_v.ndim == 2
        if single:
            x_v = x_v.reshape((1,) + x_v.shape)
        bsz, n_patches, c = x_v.shape
        if c != self.config.embed_dim:
            raise ShapeMismatch(f"token dim {c} != {self.config.embed_dim}")
        parts = []
        k = 0
        if prompts is not None:
            prompts = prompts if isinstance(prompts, Tensor) else Tensor(np.asarray(prompts))
            if prompts.ndim == 2:
                prompts = prompts.reshape((1,) + prompts.shape)
            if prompts.shape[0] != bsz and prompts.shape[0] == 1:
                prompts = T.broadcast_to(prompts, (bsz,) + prompts.shape[1:])
            if prompts.shape[0] != bsz or prompts.shape[2] != c:
                raise ShapeMismatch(f"prompts {prompts.shape} vs tokens {x_v.shape}")
            k = prompts.shape[1]
            if k > self.config.max_prompts:
                raise TooManyPrompts(f"K={k} > r_max*W'={self.config.max_prompts}")
            if k:
                parts.append(prompts)
        cls_row = (self.cls_token.data + self.e_pos.data[0]).astype(x_v.dtype)
        cls = Tensor(np.broadcast_to(cls_row, (bsz, 1, c)).copy())
        parts.append(x_v)
        if self.config.cls_first:
            parts.insert(0, cls)
        else:
            parts.append(cls)
        x = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        layout = self.layout(k, n_patches)
        maps = [] if collect_attn else None
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            if i == last and maps is None:
                x, _ = blk(x, query_index=layout.cls_index)
                x = x[:, 0, :]
                break
            x, probs = blk(x)
            if maps is not None:
                maps.append(probs[0] if single else probs)
        else:
            x = x[:, layout.cls_index, :]
        z = self.ln_f(x)
        if single:
            z = z.reshape(c)
        return EncodeOutput(z=z, layout=layout, attn=maps)

    def forward_image(self, image, prompts=None, collect_attn: bool = False) -> EncodeOutput:
        return self.encode(prompts, self.embed_image(image), collect_attn)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict("enc."))

    def load_entries(self, entries: dict) -> None:
        arrays = {}
        for name, p in self.named_parameters():
            key = "enc." + name
            if key not in entries:
                raise BadCheckpoint(f"missing tensor {key!r}")
            if entries[key].data.shape != p.shape:
                raise BadCheckpoint(f"{key}: shape {entries[key].data.shape} != {p.shape}")
            arrays[key] = entries[key].data
        self.load_arrays(arrays, prefix="enc.")
        self.freeze()


def init_frozen(config: EncoderConfig, seed: int = 0, checkpoint_path=None) -> FrozenEncoder:
    """Seeded stand-in for pretrained weights; every parameter is frozen."""
    enc = FrozenEncoder(config, seed)
    if checkpoint_path is not None:
        enc.load_entries(checkpoint.load(checkpoint_path))
    return enc


def cls_attention(output: EncodeOutput, layer: int):
    """Head-averaged attention row of the CLS query at ``layer``.

    Returns ``(row, to_prompts, to_patches)``; arrays carry a leading batch
    axis when the encode call was batched.
    """
    if output.attn is None:
        raise NoAttention("encode was called with collect_attn=False")
    if not -len(output.attn) <= layer < len(output.attn):
        raise LayerOutOfRange(f"layer {layer} outside 0..{len(output.attn) - 1}")
    probs = output.attn[layer]
    lay = output.layout
    row = probs[..., lay.cls_index, :].mean(axis=-2)
    return row, row[..., lay.prompt_indices], row[..., lay.patch_indices]
