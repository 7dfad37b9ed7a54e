"""Prompt Generation Network: backbone -> K x N logits -> softmax mix of a token library.

Nothing in this module touches the frozen encoder; prompts depend only on the
image, the backbone/head weights and the library.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch, UnknownKind
from .nn import Conv2d, Linear, Module, trunc_normal
from .tensor import Parameter, Tensor

BACKBONES = ("mlp_center_crop", "resnet10", "resnet18")


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (..., C, H, W) with half-pixel centres and no antialiasing."""
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if (h, w) == (out_h, out_w):
        return images

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(images.dtype)

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    rows = images[..., y0, :] * (1 - wy)[:, None] + images[..., y1, :] * wy[:, None]
    return rows[..., x0] * (1 - wx) + rows[..., x1] * wx


def _as_batch(images) -> tuple[Tensor, bool]:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected (3,H,W) or (B,3,H,W) images, got {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# backbones


class MLPCenterCrop(Module):
    """Flattened central crop -> two ReLU hidden layers."""

    def __init__(self, rng: np.random.Generator, input_resolution: int = 32, crop: int = 10,
                 hidden: tuple[int, int] = (128, 128)):
        if crop > input_resolution:
            raise ShapeMismatch(f"crop {crop} larger than input {input_resolution}")
        self.input_resolution = input_resolution
        self.crop = crop
        self.in_dim = 3 * crop * crop
        self.fc1 = Linear(rng, self.in_dim, hidden[0])
        self.fc2 = Linear(rng, hidden[0], hidden[1])
        self.feature_dim = hidden[1]

    def __call__(self, x: Tensor) -> Tensor:
        r, c = self.input_resolution, self.crop
        off = (r - c) // 2
        crop = x[:, :, off:off + c, off:off + c].reshape(x.shape[0], self.in_dim)
        return T.relu(self.fc2(T.relu(self.fc1(crop))))


class BasicBlock(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, stride: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=stride, pad=1)
        # zero-init last conv: each block starts as identity (no batch norm here)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, stride=1, pad=1, zero_init=True)
        self.shortcut = Conv2d(rng, c_in, c_out, 1, stride=stride) if (stride != 1 or c_in != c_out) else None

    def __call__(self, x: Tensor) -> Tensor:
        out = self.conv2(T.relu(self.conv1(x)))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(out + skip)


class MiniResNet(Module):
    """conv 7x7/2 -> maxpool 3x3/2 -> four residual stages -> global average pool."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 128), blocks_per_stage: int = 1,
                 input_resolution: int = 32):
        self.input_resolution = input_resolution
        self.widths = tuple(widths)
        self.stem = Conv2d(rng, 3, widths[0], 7, stride=2, pad=3)
        blocks = []
        c_in = widths[0]
        for i, w in enumerate(widths):
            for j in range(blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(rng, c_in, w, stride))
                c_in = w
        self.blocks = blocks
        self.feature_dim = widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.max_pool2d(T.relu(self.stem(x)), 3, stride=2, pad=1)
        for blk in self.blocks:
            h = blk(h)
        return T.mean_pool(h)


def build_backbone(kind: str, input_resolution: int = 32, seed: int = 0, rng=None) -> Module:
    rng = rng if rng is not None else np.random.default_rng(seed)
    if kind == "mlp_center_crop":
        return MLPCenterCrop(rng, input_resolution)
    if kind == "resnet10":
        return MiniResNet(rng, (16, 32, 64, 128), 1, input_resolution)
    if kind == "resnet18":
        return MiniResNet(rng, (64, 128, 256, 512), 2, input_resolution)
    raise UnknownKind(f"unknown backbone {kind!r}; expected one of {BACKBONES}")


# ---------------------------------------------------------------------------
# heads and generators


class Head(Module):
    """Linear or one-hidden-layer MLP; the output layer starts at zero."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, kind: str = "linear"):
        if kind not in ("linear", "mlp"):
            raise UnknownKind(f"unknown head {kind!r}")
        self.kind = kind
        self.hidden = Linear(rng, d_in, d_in) if kind == "mlp" else None
        self.out = Linear(rng, d_in, d_out, init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        if self.hidden is not None:
            x = T.relu(self.hidden(x))
        return self.out(x)


class TokenLibrary(Module):
    def __init__(self, n: int, c: int, seed: int = 0, rng=None):
        if n < 1:
            raise ValueError("library size must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.L = Parameter(trunc_normal(rng, (n, c)), name="lib.L")

    @property
    def size(self) -> int:
        return self.L.shape[0]

    @property
    def dim(self) -> int:
        return self.L.shape[1]


class _ImageModel(Module):
    input_resolution: int

    def _prepare(self, images) -> tuple[Tensor, bool]:
        x, single = _as_batch(images)
        r = self.input_resolution
        if x.shape[2:] != (r, r):
            if x.requires_grad:
                raise ShapeMismatch(f"image {x.shape[2:]} must already be at {r}x{r}")
            x = Tensor(resize_bilinear(x.data, r, r))
        return x, single


class PromptGenerator(_ImageModel):
    """Backbone g_theta plus a head emitting K x N library logits per image."""

    def __init__(self, k: int, n: int, backbone: str = "mlp_center_crop", head: str = "linear",
                 input_resolution: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.k, self.n = k, n
        self.backbone_kind = backbone
        self.input_resolution = input_resolution
        self.backbone = build_backbone(backbone, input_resolution, rng=rng)
        self.head = Head(rng, self.backbone.feature_dim, k * n, head)

    def generate_logits(self, images) -> Tensor:
        x, single = self._prepare(images)
        logits = self.head(self.backbone(x)).reshape(x.shape[0], self.k, self.n)
        return logits.reshape(self.k, self.n) if single else logits


def combine(logits: Tensor, lib: TokenLibrary | Tensor) -> Tensor:
    """Row-wise softmax over library items, then mix library rows: (..., K, N) -> (..., K, C)."""
    L = lib.L if isinstance(lib, TokenLibrary) else lib
    if logits.shape[-1] != L.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs library {L.shape}")
    return T.matmul(T.softmax(logits, axis=-1), L)


def pgn_forward(gen: PromptGenerator, lib: TokenLibrary, images) -> Tensor:
    return combine(gen.generate_logits(images), lib)


class PGN(Module):
    """Generator and token library bundled as one prompt source."""

    kind = "pgn"

    def __init__(self, gen: PromptGenerator, lib: TokenLibrary):
        if gen.n != lib.size:
            raise ShapeMismatch(f"generator emits {gen.n} logits per prompt, library has {lib.size} rows")
        self.gen = gen
        self.lib = lib

    @classmethod
    def create(cls, k: int, n: int, c: int, backbone: str = "mlp_center_crop", head: str = "linear",
               input_resolution: int = 32, seed: int = 0) -> "PGN":
        gen = PromptGenerator(k, n, backbone, head, input_resolution, seed)
        lib = TokenLibrary(n, c, seed=seed + 7919)
        return cls(gen, lib)

    @property
    def k(self) -> int:
        return self.gen.k

    def __call__(self, images) -> Tensor:
        return pgn_forward(self.gen, self.lib, images)

    def named_checkpoint(self) -> dict[str, Parameter]:
        out = {"pgn." + n: p for n, p in self.gen.named_parameters()}
        out["lib.L"] = self.lib.L
        return out


class IIPBaseline(Module):
    """K learned constant prompts, identical for every image."""

    kind = "iip"

    def __init__(self, k: int, c: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.prompts = Parameter(trunc_normal(rng, (k, c)), name="iip.prompts")

    @property
    def k(self) -> int:
        return self.prompts.shape[0]

    def __call__(self, images) -> Tensor:
        x, single = _as_batch(images)
        if single:
            return self.prompts.reshape(self.prompts.shape)
        return T.broadcast_to(self.prompts.reshape((1,) + self.prompts.shape), (x.shape[0],) + self.prompts.shape)

    def named_checkpoint(self) -> dict[str, Parameter]:
        return {"pgn.iip.prompts": self.prompts}


class DirectHeadGenerator(_ImageModel):
    """Ablation: the head maps backbone features straight to K x C prompts (no library)."""

    kind = "direct"

    def __init__(self, k: int, c: int, backbone: str = "mlp_center_crop", input_resolution: int = 32,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.k_, self.c = k, c
        self.input_resolution = input_resolution
        self.backbone = build_backbone(backbone, input_resolution, rng=rng)
        self.head = Head(rng, self.backbone.feature_dim, k * c, "linear")

    @property
    def k(self) -> int:
        return self.k_

    def __call__(self, images) -> Tensor:
        x, single = self._prepare(images)
        out = self.head(self.backbone(x)).reshape(x.shape[0], self.k_, self.c)
        return out.reshape(self.k_, self.c) if single else out

    def named_checkpoint(self) -> dict[str, Parameter]:
        return {"pgn.direct." + n: p for n, p in self.named_parameters()}


def direct_head_forward(gen: DirectHeadGenerator, images) -> Tensor:
    return gen(images)


def build_prompt_source(kind: str, k: int, n: int, c: int, backbone: str = "mlp_center_crop",
                        head: str = "linear", input_resolution: int = 32, seed: int = 0) -> Module:
    if kind == "pgn":
        return PGN.create(k, n, c, backbone, head, input_resolution, seed)
    if kind == "iip":
        return IIPBaseline(k, c, seed)
    if kind == "direct":
        return DirectHeadGenerator(k, c, backbone, input_resolution, seed)
    raise UnknownKind(f"unknown prompt source {kind!r}")
