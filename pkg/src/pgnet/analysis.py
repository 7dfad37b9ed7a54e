"""Post-hoc analyses: k-means + NMI feature similarity, CLS->prompt attention
statistics, token-library retrieval and parameter counting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ArrayDataset, Xoshiro256
from .encoder import cls_attention
from .errors import BadToken, LengthMismatch, NoPrompts, TooFewPoints
from .generator import PGN, DirectHeadGenerator, Head, IIPBaseline, TokenLibrary
from .nn import Module
from .training import PromptedModel


@dataclass
class Labeling:
    assignments: np.ndarray
    k: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300) -> Labeling:
    """Lloyd's algorithm with k-means++ seeding drawn from xoshiro256**.

    Stops when assignments no longer change. An emptied cluster is re-seeded
    with the point farthest from its current centre.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    m = len(x)
    if m < k or k < 1:
        raise TooFewPoints(f"cannot form {k} clusters from {m} points")
    rng = Xoshiro256(seed)
    centres = [x[int(rng.random() * m)]]
    closest = _sq_dists(x, centres[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.random() * m)
        else:
            r = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(closest), r, side="right")), m - 1)
        centres.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    c = np.array(centres)
    assign = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(x, c)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(m), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                c[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (assign == j).any():
                far = int(d[np.arange(m), assign].argmax())
                c[j] = x[far]
                assign[far] = j
    d = _sq_dists(x, c)
    history.append(float(d[np.arange(m), assign].sum()))
    return Labeling(assign.astype(np.int64), k, history)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """I(A;B) / mean(H(A), H(B)), natural log; 0 if either labeling has one cluster."""
    a = np.asarray(a.assignments if isinstance(a, Labeling) else a)
    b = np.asarray(b.assignments if isinstance(b, Labeling) else b)
    if a.shape != b.shape:
        raise LengthMismatch(f"labelings have lengths {a.shape} and {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    ha, hb = _entropy(joint.sum(1)), _entropy(joint.sum(0))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    n = joint.sum()
    nz = joint > 0
    outer = np.outer(joint.sum(1), joint.sum(0))
    mi = float((joint[nz] / n * np.log(joint[nz] * n / outer[nz])).sum())
    return float(min(max(mi / (0.5 * (ha + hb)), 0.0), 1.0))


@dataclass
class NmiReport:
    names: list[str]
    matrix: np.ndarray

    def get(self, a: str, b: str) -> float:
        return float(self.matrix[self.names.index(a), self.names.index(b)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + self.names)
            for name, row in zip(self.names, self.matrix):
                w.writerow([name] + [f"{v:.6f}" for v in row])


def embed_views(model: PromptedModel, ds: ArrayDataset, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Flattened PGN prompts, frozen-only CLS and prompted CLS for every image."""
    views = {"pgn": [], "frozen": [], "combined": []}
    enc = model.enc
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            imgs = ds.images[s:s + batch_size]
            x_v = enc.embed_image(imgs)
            prompts = model.source(imgs)
            views["pgn"].append(prompts.data.reshape(len(imgs), -1))
            views["frozen"].append(enc.encode(None, x_v).z.data)
            views["combined"].append(enc.encode(prompts, x_v).z.data)
    return {k: np.concatenate(v) for k, v in views.items()}


def nmi_study(model: PromptedModel, ds: ArrayDataset, seed: int = 0) -> NmiReport:
    """Cluster each view with k = number of classes and compare all pairs with ground truth."""
    views = embed_views(model, ds)
    k = ds.num_classes
    labelings = {"gt": ds.labels}
    for name in ("pgn", "frozen", "combined"):
        labelings[name] = kmeans(views[name], k, seed=seed).assignments
    names = list(labelings)
    mat = np.eye(len(names))
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            mat[i, j] = mat[j, i] = nmi(labelings[names[i]], labelings[names[j]])
    return NmiReport(names, mat)


@dataclass
class AttentionHistogram:
    values: np.ndarray  # (images, K)
    counts: np.ndarray
    edges: np.ndarray

    @property
    def variance(self) -> float:
        """Variance of all collected CLS->prompt attention values."""
        return float(self.values.var())

    @property
    def across_image_variance(self) -> float:
        """Per-prompt variance across images, averaged over prompt slots."""
        return float(self.values.var(axis=0).mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "count"])
            for left, c in zip(self.edges[:-1], self.counts):
                w.writerow([f"{left:.8g}", int(c)])


def attention_histogram(model: PromptedModel, ds: ArrayDataset, layer: int = -1, bins: int = 50,
                        batch_size: int = 256) -> AttentionHistogram:
    if model.source is None or model.source.k < 1:
        raise NoPrompts("model supplies no prompts")
    vals = []
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            imgs = ds.images[s:s + batch_size]
            out = model.enc.encode(model.source(imgs), model.enc.embed_image(imgs), collect_attn=True)
            vals.append(cls_attention(out, layer)[1])
    values = np.concatenate(vals).astype(np.float64)
    top = float(values.max()) if values.size and values.max() > 0 else 1.0
    counts, edges = np.histogram(values, bins=bins, range=(0.0, top))
    return AttentionHistogram(values, counts, edges)


def patch_attention_grid(model: PromptedModel, image, layer: int = -1) -> np.ndarray:
    """CLS->patch attention of one image reshaped to the patch grid."""
    cfg = model.enc.config
    with T.no_grad():
        prompts = model.source(image) if model.source is not None else None
        out = model.enc.encode(prompts, model.enc.embed_image(image), collect_attn=True)
    return cls_attention(out, layer)[2].reshape(cfg.grid_h, cfg.grid_w)


def token_topk(model: PromptedModel, ds: ArrayDataset, token_idx: int, m: int,
               batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Images whose max-over-slots softmax weight on library item ``token_idx`` is largest."""
    src = model.source
    if not isinstance(src, PGN):
        raise TypeError("token retrieval needs a PGN prompt source")
    if not 0 <= token_idx < src.lib.size:
        raise BadToken(f"token {token_idx} outside library of {src.lib.size}")
    scores = []
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            w = T.softmax(src.gen.generate_logits(ds.images[s:s + batch_size]), axis=-1).data
            scores.append(w[:, :, token_idx].max(axis=1))
    scores = np.concatenate(scores)
    order = np.argsort(-scores, kind="stable")[:m]
    return order, scores[order]


def token_usage(model: PromptedModel, ds: ArrayDataset) -> np.ndarray:
    """Mean softmax weight per (class, library item); shape (num_classes, N)."""
    src = model.source
    with T.no_grad():
        w = T.softmax(src.gen.generate_logits(ds.images), axis=-1).data.max(axis=1)
    return np.stack([w[ds.labels == c].mean(axis=0) for c in range(ds.num_classes)])


# ---------------------------------------------------------------------------
# parameter counting


def _count(module: Module | None) -> int:
    return 0 if module is None else int(sum(p.size for p in module.parameters() if not p.frozen))


def count_params(model: Module, scope: str = "total") -> int:
    """Exact trainable-parameter count for ``scope`` in
    {backbone, head, library, iip, classifier, total}."""
    source = model.source if isinstance(model, PromptedModel) else model
    classifier = model.classifier if isinstance(model, PromptedModel) else None
    scopes = {"backbone": 0, "head": 0, "library": 0, "iip": 0, "classifier": _count(classifier)}
    if isinstance(source, PGN):
        scopes["backbone"] = _count(source.gen.backbone)
        scopes["head"] = _count(source.gen.head)
        scopes["library"] = _count(source.lib)
    elif isinstance(source, DirectHeadGenerator):
        scopes["backbone"] = _count(source.backbone)
        scopes["head"] = _count(source.head)
    elif isinstance(source, IIPBaseline):
        scopes["iip"] = _count(source)
    if scope == "total":
        return sum(scopes.values())
    if scope == "prompt_source":
        return sum(v for k, v in scopes.items() if k != "classifier")
    if scope not in scopes:
        raise ValueError(f"unknown scope {scope!r}")
    return scopes[scope]


def head_param_table(feat_dim: int, c: int, ks=(1, 4, 8, 16, 64), library_factor: int = 8) -> list[dict]:
    """Trainable counts of the prompt head with a token library (N = factor*K) versus a
    direct K*C head, measured on instantiated modules."""
    rng = np.random.default_rng(0)
    rows = []
    for k in ks:
        n = library_factor * k
        tl = _count(Head(rng, feat_dim, k * n)) + _count(TokenLibrary(n, c, rng=rng))
        direct = _count(Head(rng, feat_dim, k * c))
        rows.append({"k": k, "n": n, "tl_head": tl, "direct_head": direct})
    return rows
