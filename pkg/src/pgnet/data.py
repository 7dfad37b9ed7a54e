"""Datasets: a seeded synthetic suite and a byte-exact CIFAR binary reader.

Synthetic samples are fully determined by ``(spec, split, index)``. All
randomness comes from xoshiro256** whose state is filled by SplitMix64, so the
stream is reproducible in any language:

* SplitMix64: ``x += 0x9E3779B97F4A7C15; z = x; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)`` (all mod 2^64).
* xoshiro256**: ``out = rotl(s1 * 5, 7) * 9``, then the standard shift/xor/rotl(45) update.
* Uniform doubles are ``(next() >> 11) * 2^-53``.

The per-sample generator is seeded with ``splitmix64(seed ^ (split_tag << 56) ^ index)``
where ``split_tag`` is 1 for train and 2 for test.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BadLabel, BadLength, EmptyLoader, IndexOutOfRange

MASK64 = (1 << 64) - 1
CUE_MODES = ("global_hue", "texture", "layout")


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0."""

    def __init__(self, seed: int = 0, state: tuple[int, int, int, int] | None = None):
        if state is None:
            sm = seed & MASK64
            words = []
            for _ in range(4):
                sm, out = splitmix64(sm)
                words.append(out)
            state = tuple(words)
        if not any(state):
            raise ValueError("xoshiro state must not be all zero")
        self.s = list(w & MASK64 for w in state)

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.random() * n)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)])


# ---------------------------------------------------------------------------
# synthetic suite


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    num_domains: int = 1
    train_size: int = 5000
    test_size: int = 1000
    image_size: int = 32
    seed: int = 0
    cue_mode: str = "global_hue"

    def __post_init__(self):
        if self.cue_mode not in CUE_MODES:
            raise ValueError(f"cue_mode must be one of {CUE_MODES}")
        if self.num_classes < 1 or self.num_domains < 1:
            raise ValueError("num_classes and num_domains must be positive")

    def size(self, split: str) -> int:
        if split == "train":
            return self.train_size
        if split == "test":
            return self.test_size
        raise ValueError(f"unknown split {split!r}")


_SPLIT_TAG = {"train": 1, "test": 2}


def sample_rng(spec: SyntheticSpec, split: str, index: int) -> Xoshiro256:
    _, seed = splitmix64((spec.seed ^ (_SPLIT_TAG[split] << 56) ^ index) & MASK64)
    return Xoshiro256(seed)


def class_hue(spec: SyntheticSpec, label: int, domain: int) -> float:
    return (domain * spec.num_classes + label) / (spec.num_domains * spec.num_classes)


@lru_cache(maxsize=8)
def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _smooth_noise(rng: Xoshiro256, n: int, cells: int = 4) -> np.ndarray:
    coarse = rng.uniforms(3 * cells * cells).reshape(3, cells, cells) - 0.5
    idx = np.minimum((np.arange(n) * cells) // n, cells - 1)
    return coarse[:, idx][:, :, idx]


def _draw_distractors(img: np.ndarray, rng: Xoshiro256, domain: int, clear: float = 0.35) -> None:
    """Paint 4-6 large random-colour shapes centred outside a clear central disc.

    The disc of diameter ``clear * n`` keeps the middle of the image showing the
    background, while the shapes dominate the periphery (about half the area).
    Even domains get squares, odd domains get circles.
    """
    n = img.shape[-1]
    yy, xx = _grid(n)
    for _ in range(4 + rng.randint(3)):
        size = rng.uniform(0.40, 0.55) * n
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radius = rng.uniform(clear * n / 2 + size / 2, n / 2 + size / 4)
        cy, cx = n / 2 + radius * np.sin(angle), n / 2 + radius * np.cos(angle)
        color = np.array([rng.random(), rng.random(), rng.random()])
        if domain % 2 == 0:
            mask = (np.abs(yy - cy) < size / 2) & (np.abs(xx - cx) < size / 2)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < (size / 2) ** 2
        img[:, mask] = color[:, None]


def gen_synthetic(spec: SyntheticSpec, split: str, index: int) -> tuple[np.ndarray, int, int]:
    """Return ``(image[3,S,S] in [0,1], label, domain)`` for one sample.

    Labels cycle round-robin within each domain. The label is carried only by a
    global cue (background hue, background stripe texture, or marker
    position); random coloured shapes are class-irrelevant distractors.
    """
    n_split = spec.size(split)
    if not 0 <= index < n_split:
        raise IndexOutOfRange(f"index {index} outside [0, {n_split}) for {split}")
    domain = index % spec.num_domains
    label = (index // spec.num_domains) % spec.num_classes
    rng = sample_rng(spec, split, index)
    n = spec.image_size
    yy, xx = _grid(n)
    val = rng.uniform(0.5, 0.9)
    if spec.cue_mode == "global_hue":
        hue = class_hue(spec, label, domain) + rng.uniform(-0.02, 0.02)
        base = _hsv(hue, rng.uniform(0.5, 0.75), val)
        img = np.broadcast_to(base[:, None, None], (3, n, n)).copy()
    elif spec.cue_mode == "texture":
        k = spec.num_domains * spec.num_classes
        angle = np.pi * (domain * spec.num_classes + label) / k
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin((np.cos(angle) * xx + np.sin(angle) * yy) * (2 * np.pi / 6.0) + phase)
        tint = _hsv(rng.random(), 0.3, val)
        img = tint[:, None, None] * (0.6 + 0.4 * stripes[None])
    else:
        tint = _hsv(rng.random(), rng.uniform(0.2, 0.5), val)
        img = np.broadcast_to(tint[:, None, None], (3, n, n)).copy()
        k = spec.num_domains * spec.num_classes
        slot = domain * spec.num_classes + label
        side = int(np.ceil(np.sqrt(k)))
        cy = (slot // side + 0.5) * n / side
        cx = (slot % side + 0.5) * n / side
        mark = (yy - cy) ** 2 + (xx - cx) ** 2 < (0.3 * n / side) ** 2
        img[:, mark] = 1.0 - img[:, mark]
    img = img + 0.08 * _smooth_noise(rng, n)
    _draw_distractors(img, rng, domain)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label, domain


@dataclass
class ArrayDataset:
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.images[idx], self.labels[idx], self.domains[idx], self.num_classes)


@lru_cache(maxsize=16)
def make_dataset(spec: SyntheticSpec, split: str) -> ArrayDataset:
    n = spec.size(split)
    imgs = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    for i in range(n):
        imgs[i], labels[i], domains[i] = gen_synthetic(spec, split, i)
    imgs.setflags(write=False)
    return ArrayDataset(imgs, labels, domains, spec.num_classes)


def domain_dataset(spec: SyntheticSpec, split: str, domain: int) -> ArrayDataset:
    ds = make_dataset(spec, split)
    return ds.subset(np.flatnonzero(ds.domains == domain))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray


def iterate_batches(ds: ArrayDataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield :class:`Batch` objects; a seed gives a deterministic permutation."""
    n = len(ds)
    if n == 0:
        raise EmptyLoader("dataset is empty")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(ds.images[idx], ds.labels[idx], ds.domains[idx])


# ---------------------------------------------------------------------------
# CIFAR binary format

CIFAR_LAYOUT = {
    # variant: (label bytes, classes of the label used)
    "cifar10": (1, 10),
    "cifar100": (2, 100),
}
IMAGE_BYTES = 3072


@dataclass
class CifarDataset:
    images: np.ndarray
    labels: np.ndarray
    coarse_labels: np.ndarray | None = None

    def as_array_dataset(self, num_classes: int) -> ArrayDataset:
        return ArrayDataset(self.images, self.labels, np.zeros(len(self.labels), dtype=np.int64), num_classes)


def parse_cifar(raw: bytes, variant: str = "cifar10") -> CifarDataset:
    if variant not in CIFAR_LAYOUT:
        raise ValueError(f"unknown variant {variant!r}")
    nlab, nclass = CIFAR_LAYOUT[variant]
    rec = nlab + IMAGE_BYTES
    if len(raw) == 0 or len(raw) % rec:
        raise BadLength(f"{len(raw)} bytes is not a positive multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, nlab - 1].astype(np.int64)
    if labels.max() >= nclass:
        raise BadLabel(f"label {labels.max()} >= {nclass}")
    coarse = None
    if variant == "cifar100":
        coarse = arr[:, 0].astype(np.int64)
        if coarse.max() >= 20:
            raise BadLabel(f"coarse label {coarse.max()} >= 20")
    images = (arr[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return CifarDataset(images, labels, coarse)


def read_cifar(path: str | os.PathLike, variant: str = "cifar10") -> CifarDataset:
    with open(path, "rb") as f:
        return parse_cifar(f.read(), variant)


def encode_cifar(images: np.ndarray, labels, variant: str = "cifar10", coarse_labels=None) -> bytes:
    """Inverse of :func:`parse_cifar`; pixels are rounded to u8."""
    images = np.asarray(images)
    if images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records hold 3x32x32 images, got {images.shape[1:]}")
    px = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == "cifar100":
        coarse = np.zeros(len(images), np.uint8) if coarse_labels is None else np.asarray(coarse_labels, np.uint8)
        cols.insert(0, coarse[:, None])
    return np.concatenate(cols + [px], axis=1).tobytes()


def write_cifar(path: str | os.PathLike, images, labels, variant: str = "cifar10", coarse_labels=None) -> None:
    with open(path, "wb") as f:
        f.write(encode_cifar(images, labels, variant, coarse_labels))


CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}


def load_cifar_dir(root: str | os.PathLike, variant: str = "cifar10", split: str = "train") -> ArrayDataset:
    """Concatenate the standard binary batch files of one split found in ``root``."""
    if (variant, split) not in CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant/split {variant}/{split}")
    parts = [read_cifar(os.path.join(root, name), variant) for name in CIFAR_FILES[(variant, split)]]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return ArrayDataset(images, labels, np.zeros(len(labels), dtype=np.int64), CIFAR_LAYOUT[variant][1])
