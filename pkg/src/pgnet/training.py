"""SGD with momentum, warmup + cosine schedule, and the train/eval loops."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import ArrayDataset, Batch, iterate_batches
from .encoder import FrozenEncoder
from .errors import BadCheckpoint, EmptyLoader, MissingGrad, OutOfRange
from .nn import Module
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class Schedule:
    lr_base: float = 0.1
    warmup_epochs: int = 10
    total_epochs: int = 100

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise OutOfRange("need 0 <= warmup_epochs < total_epochs")


def lr_at(sched: Schedule, epoch: float) -> float:
    """Linear warmup to ``lr_base``, then cosine decay reaching 0 at ``total_epochs``."""
    if not 0 <= epoch <= sched.total_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if epoch < sched.warmup_epochs:
        return sched.lr_base * epoch / sched.warmup_epochs
    if epoch == sched.total_epochs:
        return 0.0
    frac = (epoch - sched.warmup_epochs) / (sched.total_epochs - sched.warmup_epochs)
    return sched.lr_base * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    lr_base: float = 0.1
    momentum: float = 0.9
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0


def sgd_step(opt: OptimState, params: Iterable[Parameter], lr: float) -> None:
    """Heavy-ball update ``v <- m v + g; p <- p - lr v`` on trainable parameters only."""
    for p in params:
        if getattr(p, "frozen", False):
            continue
        if p.grad is None:
            raise MissingGrad(f"parameter {p.name or p.shape} has no gradient")
        v = opt.velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = opt.momentum * v + p.grad
        opt.velocity[id(p)] = v.astype(p.dtype, copy=False)
        p.data = p.data - p.dtype.type(lr) * opt.velocity[id(p)]
    opt.step += 1


class Classifier(Module):
    """Class-embedding rows; ``fixed`` keeps them frozen, ``trainable`` starts from them."""

    def __init__(self, num_classes: int, dim: int, mode: str = "fixed", seed: int = 0):
        if mode not in ("fixed", "trainable"):
            raise ValueError(f"classifier mode must be fixed or trainable, got {mode!r}")
        if num_classes > dim:
            raise ValueError(f"cannot draw {num_classes} orthonormal rows in {dim} dims")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        self.weight = Parameter(np.ascontiguousarray(q.T, dtype=np.float32), name="cls.weight", frozen=(mode == "fixed"))
        self.mode = mode

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def __call__(self, z: Tensor) -> Tensor:
        return T.matmul(z if z.ndim == 2 else z.reshape(1, -1), T.transpose(self.weight))


class PromptedModel(Module):
    """Frozen encoder + prompt source (PGN, IIP, direct head or none) + classifier."""

    def __init__(self, enc: FrozenEncoder, source: Module | None, classifier: Classifier):
        self.enc = enc
        self.source = source
        self.classifier = classifier

    def embed(self, images) -> Tensor:
        """CLS embedding of a (B, 3, H, W) batch."""
        with T.no_grad():
            x_v = self.enc.embed_image(np.asarray(images, dtype=self.enc.w_proj.dtype))
        prompts = self.source(images) if self.source is not None else None
        return self.enc.encode(prompts, x_v).z

    def logits(self, images) -> Tensor:
        return self.classifier(self.embed(images))

    def trainable(self) -> list[Parameter]:
        out = self.source.trainable_parameters() if self.source is not None else []
        return out + self.classifier.trainable_parameters()

    def checkpoint_tensors(self, include_source: bool = True) -> dict[str, Parameter]:
        """Checkpoint names: ``enc.*``, ``cls.weight`` and the source's ``pgn.*`` / ``lib.L``."""
        out = self.enc.state_dict("enc.")
        out["cls.weight"] = self.classifier.weight
        if include_source and self.source is not None:
            out.update(self.source.named_checkpoint())
        return out

    def save(self, path, include_source: bool = True) -> None:
        checkpoint.save(path, self.checkpoint_tensors(include_source))

    def load_entries(self, entries: dict) -> None:
        """Restore every tensor this model names; extra tensors are an error."""
        wanted = self.checkpoint_tensors()
        missing = sorted(set(wanted) - set(entries))
        extra = sorted(set(entries) - set(wanted))
        if missing or extra:
            raise BadCheckpoint(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in wanted.items():
            arr = entries[name].data
            if arr.shape != p.shape:
                raise BadCheckpoint(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.warmup, self.epochs)


def _epoch_seed(seed: int, epoch: int, tag: str = "") -> int:
    h = hashlib.sha256(f"{seed}:{epoch}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _train_on_batches(model: PromptedModel, batches: Iterable[Batch], opt: OptimState, sched: Schedule,
                      epoch: int, steps: int) -> dict:
    params = model.trainable()
    total_loss = 0.0
    correct = 0
    seen = 0
    for i, b in enumerate(batches):
        lr = lr_at(sched, min(epoch + i / steps, sched.total_epochs))
        for p in params:
            p.grad = None
        logits = model.logits(b.images)
        loss = T.cross_entropy_with_logits(logits, b.labels)
        loss.backward()
        sgd_step(opt, params, lr)
        n = len(b.labels)
        total_loss += float(loss.data) * n
        correct += int((logits.data.argmax(axis=1) == b.labels).sum())
        seen += n
    if seen == 0:
        raise EmptyLoader("no batches in epoch")
    opt.epoch = epoch + 1
    return {"loss": total_loss / seen, "acc": correct / seen, "lr": lr_at(sched, epoch)}


def train_epoch(model: PromptedModel, ds: ArrayDataset, opt: OptimState, sched: Schedule, epoch: int,
                batch_size: int = 64, seed: int = 0) -> dict:
    steps = math.ceil(len(ds) / batch_size)
    batches = iterate_batches(ds, batch_size, _epoch_seed(seed, epoch))
    return _train_on_batches(model, batches, opt, sched, epoch, steps)


def predict(model: PromptedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.logits(images[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def evaluate(model: PromptedModel, ds: ArrayDataset, batch_size: int = 256, label_offset: int = 0) -> float:
    """Top-1 accuracy; no tape is recorded."""
    if len(ds) == 0:
        raise EmptyLoader("evaluation set is empty")
    logits = predict(model, ds.images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == ds.labels + label_offset))


def fit(model: PromptedModel, train: ArrayDataset, test: ArrayDataset | None, cfg: TrainConfig,
        log=None) -> list[dict]:
    """Full run; returns one metrics row per epoch (eval_acc is None when skipped)."""
    sched = cfg.schedule()
    opt = OptimState(cfg.lr, cfg.momentum)
    rows = []
    for epoch in range(cfg.epochs):
        m = train_epoch(model, train, opt, sched, epoch, cfg.batch_size, cfg.seed)
        do_eval = test is not None and cfg.eval_every > 0 and (
            (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs)
        row = {"epoch": epoch, "lr": m["lr"], "train_loss": m["loss"], "train_acc": m["acc"],
               "eval_acc": evaluate(model, test) if do_eval else None}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "eval_acc"])
        for r in rows:
            ev = "" if r["eval_acc"] is None else f"{r['eval_acc']:.6f}"
            w.writerow([r["epoch"], f"{r['lr']:.8g}", f"{r['train_loss']:.8g}", f"{r['train_acc']:.6f}", ev])


# ---------------------------------------------------------------------------
# joint training over several datasets


def label_offsets(datasets: Sequence[ArrayDataset]) -> list[int]:
    return [int(x) for x in np.cumsum([0] + [d.num_classes for d in datasets])[:-1]]


def _joint_batches(datasets: Sequence[ArrayDataset], batch_size: int, seed: int):
    rng = np.random.default_rng(seed)
    offsets = label_offsets(datasets)
    total = sum(len(d) for d in datasets)
    for _ in range(math.ceil(total / batch_size)):
        which = rng.integers(0, len(datasets), size=batch_size)
        imgs, labels, doms = [], [], []
        for d_idx in range(len(datasets)):
            count = int((which == d_idx).sum())
            if count == 0:
                continue
            ds = datasets[d_idx]
            pick = rng.integers(0, len(ds), size=count)
            imgs.append(ds.images[pick])
            labels.append(ds.labels[pick] + offsets[d_idx])
            doms.append(np.full(count, d_idx))
        yield Batch(np.concatenate(imgs), np.concatenate(labels), np.concatenate(doms))


def train_joint(model: PromptedModel, train_sets: Sequence[ArrayDataset], test_sets: Sequence[ArrayDataset],
                cfg: TrainConfig) -> dict:
    """One model over the union of label spaces; each example's dataset is drawn uniformly.

    Returns ``{"history": [...], "per_dataset": [acc_0, acc_1, ...]}``.
    """
    if not train_sets or any(len(d) == 0 for d in train_sets):
        raise EmptyLoader("joint training needs non-empty datasets")
    total_classes = sum(d.num_classes for d in train_sets)
    if model.classifier.num_classes != total_classes:
        raise ValueError(f"joint head has {model.classifier.num_classes} outputs, need {total_classes}")
    sched = cfg.schedule()
    opt = OptimState(cfg.lr, cfg.momentum)
    steps = math.ceil(sum(len(d) for d in train_sets) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        batches = _joint_batches(train_sets, cfg.batch_size, _epoch_seed(cfg.seed, epoch, "joint"))
        m = _train_on_batches(model, batches, opt, sched, epoch, steps)
        history.append({"epoch": epoch, "lr": m["lr"], "train_loss": m["loss"], "train_acc": m["acc"],
                        "eval_acc": None})
    offsets = label_offsets(test_sets)
    per = [evaluate(model, ds, label_offset=off) for ds, off in zip(test_sets, offsets)]
    return {"history": history, "per_dataset": per}


def frozen_digest(module: Module) -> str:
    """SHA-256 over the bytes of every frozen parameter, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        if p.frozen:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
