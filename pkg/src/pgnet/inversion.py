"""Prompt inversion: latent prompts -> RGB patches appended below the image.

A prompt ``h`` destined for appended slot ``j`` becomes the patch
``(h - e_pos[1 + H'W' + j]) @ pinv(w_proj)``. Embedding that patch on its
appended row adds the same positional entry back, so for a rank-C projection
the encoder sees exactly the latent prompt again.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FrozenEncoder, patchify
from .errors import NotDivisible, RankDeficient, ShapeMismatch, TooManyPrompts
from .tensor import Tensor

RANK_TOL = 1e-6

pinv_stats = {"computed": 0, "cache_hits": 0}
_cache: "weakref.WeakKeyDictionary[FrozenEncoder, Inverter]" = weakref.WeakKeyDictionary()


def compute_pinv(w_proj) -> np.ndarray:
    """Moore-Penrose pseudo-inverse (C x 3s^2) of a (3s^2 x C) projection via SVD in float64."""
    w = np.asarray(w_proj.data if isinstance(w_proj, Tensor) else w_proj)
    if not np.all(np.isfinite(w)):
        raise ValueError("projection matrix contains non-finite values")
    pinv_stats["computed"] += 1
    u, s, vt = np.linalg.svd(w.astype(np.float64), full_matrices=False)
    if s.size == 0 or s[-1] / s[0] < RANK_TOL:
        ratio = 0.0 if s.size == 0 else s[-1] / s[0]
        raise RankDeficient(f"projection is rank deficient (sigma_min/sigma_max = {ratio:.3e})")
    if w.shape[0] < w.shape[1]:
        raise RankDeficient(f"projection {w.shape} has fewer rows than channels; rank C unattainable")
    pinv = (vt.T / s) @ u.T
    return pinv.astype(w.dtype)


@dataclass
class Inverter:
    w_pinv: np.ndarray
    pos_slice: np.ndarray
    patch_size: int
    grid_w: int
    base_h: int

    @classmethod
    def from_encoder(cls, enc: FrozenEncoder) -> "Inverter":
        cfg = enc.config
        start = 1 + cfg.num_patches
        return cls(
            w_pinv=compute_pinv(enc.w_proj),
            pos_slice=enc.e_pos.data[start:start + cfg.max_prompts].copy(),
            patch_size=cfg.patch_size,
            grid_w=cfg.grid_w,
            base_h=cfg.image_h,
        )

    @property
    def max_prompts(self) -> int:
        return self.pos_slice.shape[0]

    def rows_for(self, k: int) -> int:
        if k % self.grid_w:
            raise NotDivisible(f"K={k} is not a multiple of the {self.grid_w} patches per row")
        if k > self.max_prompts:
            raise TooManyPrompts(f"K={k} exceeds {self.max_prompts} appended slots")
        return k // self.grid_w


def get_inverter(enc: FrozenEncoder) -> Inverter:
    """Inverter for ``enc``; the pseudo-inverse is computed once per encoder."""
    inv = _cache.get(enc)
    if inv is not None and inv.w_pinv.dtype == enc.w_proj.dtype:
        pinv_stats["cache_hits"] += 1
        return inv
    inv = Inverter.from_encoder(enc)
    _cache[enc] = inv
    return inv


def invert_prompts(prompts, inv: Inverter) -> np.ndarray:
    """(K, C) or (B, K, C) prompts -> (…, K, 3s^2) patch rows. Values are not clamped."""
    p = np.asarray(prompts.data if isinstance(prompts, Tensor) else prompts)
    k = p.shape[-2]
    inv.rows_for(k)
    if p.shape[-1] != inv.w_pinv.shape[0]:
        raise ShapeMismatch(f"prompt dim {p.shape[-1]} != {inv.w_pinv.shape[0]}")
    return (p - inv.pos_slice[:k]) @ inv.w_pinv


@dataclass
class CompositeImage:
    pixels: np.ndarray
    rows: int
    base_h: int

    @property
    def source(self) -> np.ndarray:
        return self.pixels[..., :self.base_h, :]


def compose(image, patches, s: int, grid_w: int) -> CompositeImage:
    """Tile patch rows (row-major, ``grid_w`` per row) below ``image``.

    Works on a single (3, H, W) image with (K, 3s^2) patches, or batched.
    """
    img = np.asarray(image)
    pat = np.asarray(patches)
    h, w = img.shape[-2:]
    k = pat.shape[-2] if pat.size else 0
    if w != grid_w * s:
        raise ShapeMismatch(f"image width {w} != {grid_w} x {s}")
    if k == 0:
        return CompositeImage(img.copy(), 0, h)
    if k % grid_w:
        raise NotDivisible(f"K={k} is not a multiple of {grid_w} patches per row")
    if pat.shape[-1] != 3 * s * s:
        raise ShapeMismatch(f"patch length {pat.shape[-1]} != {3 * s * s}")
    r = k // grid_w
    lead = pat.shape[:-2]
    tiles = pat.reshape(lead + (r, grid_w, 3, s, s))
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 2, nd, nd + 3, nd + 1, nd + 4)
    block = tiles.transpose(axes).reshape(lead + (3, r * s, grid_w * s)).astype(img.dtype)
    return CompositeImage(np.concatenate([img, block], axis=-2), r, h)


def composite_for(images, prompt_source, enc: FrozenEncoder, inv: Inverter | None = None) -> CompositeImage:
    """Client-side pipeline: prompts -> inverted patches -> composite image."""
    inv = inv or get_inverter(enc)
    with T.no_grad():
        prompts = prompt_source(images)
    patches = invert_prompts(prompts, inv)
    return compose(np.asarray(images, dtype=inv.w_pinv.dtype), patches, inv.patch_size, inv.grid_w)


def verify_equivalence(images, prompt_source, enc: FrozenEncoder, inv: Inverter | None = None,
                       dtype=None) -> float:
    """Max |z_latent - z_inverted| of the CLS embedding over the given image(s).

    ``dtype=np.float64`` runs both paths on float64 twins of the models (oracle mode).
    ``prompt_source=None`` is the zero-prompt case.
    """
    if dtype is not None and np.dtype(dtype) != enc.w_proj.dtype:
        enc = enc.astype(dtype)
        prompt_source = prompt_source.astype(dtype) if prompt_source is not None else None
        inv = None
    inv = inv or get_inverter(enc)
    images = np.asarray(images, dtype=enc.w_proj.dtype)
    with T.no_grad():
        x_v = enc.embed_image(images)
        if prompt_source is None:
            z_a = enc.encode(None, x_v).z.data
            z_b = enc.encode(None, enc.embed_image(images)).z.data
            return float(np.max(np.abs(z_a - z_b)))
        prompts = prompt_source(images)
        z_a = enc.encode(prompts, x_v).z.data
        comp = compose(images, invert_prompts(prompts, inv), inv.patch_size, inv.grid_w)
        z_b = enc.encode(None, enc.embed(patchify(comp.pixels, inv.patch_size))).z.data
    return float(np.max(np.abs(z_a - z_b)))
