"""Training loop: dynamically weighted BCE, Adam, plateau decay, checkpoints.

Each sample's loss is its mean-over-cells BCE scaled by a weight that grows
as the ground-truth visitation gets sparser; the batch loss is the mean of
the weighted per-sample losses.  Checkpoints capture parameters, batchnorm
buffers, optimizer moments, scheduler state, and RNG state, so a resumed run
reproduces the uninterrupted one bit-exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cunet import CUNetConfig, CUNetModel, build
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    w_max: float = 10.0
    clip_norm: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-5
    seed: int = 0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.w_max < 1:
            raise InvalidConfig("w_max must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise InvalidConfig("plateau_factor must be in (0,1)")
        if self.clip_norm <= 0:
            raise InvalidConfig("clip_norm must be positive")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "w_max": self.w_max,
            "clip_norm": self.clip_norm, "plateau_factor": self.plateau_factor,
            "plateau_patience": self.plateau_patience, "min_lr": self.min_lr,
            "seed": self.seed, "binarize_threshold": self.binarize_threshold,
        }


# ---------------------------------------------------------------------------
# loss


def visit_ratio(v_post) -> float:
    """Fraction of 1-cells in a binary grid."""
    arr = np.asarray(v_post)
    return float(arr.sum()) / arr.size


def sample_weight(r_u: float, w_max: float) -> float:
    """w_u = 1 + (w_max - 1)(1 - r_u): w_max for empty grids, 1 for full ones."""
    return 1.0 + (w_max - 1.0) * (1.0 - r_u)


def batch_weights(targets, w_max: float) -> np.ndarray:
    t = np.asarray(targets)
    b = t.shape[0]
    ratios = t.reshape(b, -1).sum(axis=1) / t[0].size
    return 1.0 + (w_max - 1.0) * (1.0 - ratios)


def weighted_bce_loss(pred: Tensor, target, w_max: float) -> Tensor:
    """Mean over samples of w_u times the per-sample mean-over-cells BCE."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {t.shape}")
    b = t.shape[0]
    n_cells = t[0].size
    weights = batch_weights(t, w_max).astype(pred.dtype)
    cellwise = ad.bce_elementwise(pred, t)
    per_sample = ad.mul_const(ad.sum_axis(ad.reshape(cellwise, (b, -1)), 1), 1.0 / n_cells)
    return ad.sum_all(ad.mul_const(per_sample, weights / b))


# ---------------------------------------------------------------------------
# optimization


def clip_gradients(params: dict[str, Tensor], clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    sq = 0.0
    for t in params.values():
        if t.grad is not None:
            sq += float((t.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(sq)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    # slight undershoot so float32 rounding cannot push the scaled norm
    # back above clip_norm
    scale = clip_norm / norm * (1.0 - 1e-6)
    for t in params.values():
        if t.grad is not None:
            t.grad = (t.grad * scale).astype(t.grad.dtype)
    return scale


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: dict[str, Tensor], lr: float):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Halve-on-stagnation learning-rate schedule with an improvement tolerance."""

    TOL = 1e-6

    def __init__(self, lr, factor, patience, min_lr):
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_epochs = 0
        self.stop = False  # patience elapsed again with lr already at the floor

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.TOL:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                if self.lr <= self.min_lr:
                    self.stop = True
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs,
                "factor": self.factor, "patience": self.patience,
                "min_lr": self.min_lr, "stop": self.stop}

    @classmethod
    def from_state(cls, s) -> "PlateauScheduler":
        sched = cls(s["lr"], s["factor"], s["patience"], s["min_lr"])
        sched.best = s["best"]
        sched.bad_epochs = s["bad_epochs"]
        sched.stop = bool(s.get("stop", False))
        return sched


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class ArrayDataset:
    """Float32 batches derived from IndividualSamples."""

    v_pre: np.ndarray   # [N,1,G,G]
    v_post: np.ndarray  # [N,1,G,G]
    sc: np.ndarray      # [N,K,G,G]
    sir: np.ndarray     # [N,K]
    user_ids: np.ndarray

    def __len__(self):
        return self.v_pre.shape[0]

    def batch(self, idx):
        return self.v_pre[idx], self.v_post[idx], self.sc[idx], self.sir[idx]


def samples_to_arrays(samples) -> ArrayDataset:
    v_pre = np.stack([s.v_pre.bitmap for s in samples])[:, None].astype(np.float32)
    v_post = np.stack([s.v_post.bitmap for s in samples])[:, None].astype(np.float32)
    sc = np.stack([s.sc.values for s in samples]).astype(np.float32)
    sir = np.stack([s.sir.values for s in samples]).astype(np.float32)
    uids = np.array([s.user_id for s in samples])
    return ArrayDataset(v_pre, v_post, sc, sir, uids)


def predict(model: CUNetModel, data: ArrayDataset, batch_size=32) -> np.ndarray:
    """Frozen-model probability maps for a whole dataset."""
    out = []
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        v_pre, _, sc, sir = data.batch(idx)
        out.append(model.forward(v_pre, sc, sir, training=False).data)
    return np.concatenate(out, axis=0)


def evaluate_loss(model: CUNetModel, data: ArrayDataset, w_max, batch_size=32) -> float:
    total, n = 0.0, 0
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        v_pre, v_post, sc, sir = data.batch(idx)
        pred = model.forward(v_pre, sc, sir, training=False)
        total += weighted_bce_loss(pred, v_post, w_max).item() * len(idx)
        n += len(idx)
    return total / n


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint_state(model, train_config, epoch, adam, scheduler, rng) -> dict:
    """Deep snapshot of everything a resumed run needs."""
    return {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "epoch": epoch,
        "params": {n: t.data.copy() for n, t in model.params.items()},
        "buffers": {n: a.copy() for n, a in model.buffers.items()},
        "adam_m": {n: a.copy() for n, a in adam.m.items()},
        "adam_v": {n: a.copy() for n, a in adam.v.items()},
        "adam_t": adam.t,
        "scheduler": scheduler.state(),
        "rng_state": rng.bit_generator.state,
    }


def save_checkpoint(ckpt: dict, directory) -> None:
    """Write manifest.json + weights.bin atomically (temp file + rename)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sections = []
    blobs = []
    offset = 0
    for section in ("params", "buffers", "adam_m", "adam_v"):
        for name, arr in ckpt[section].items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            sections.append({"section": section, "name": name,
                             "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    manifest = {
        "model_config": ckpt["model_config"],
        "train_config": ckpt["train_config"],
        "epoch": ckpt["epoch"],
        "adam_t": ckpt["adam_t"],
        "scheduler": ckpt["scheduler"],
        "rng_state": ckpt["rng_state"],
        "arrays": sections,
    }
    _atomic_write(directory / "weights.bin", b"".join(blobs))
    _atomic_write(directory / "manifest.json",
                  (json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n").encode())


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(directory) -> dict:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    raw = (directory / "weights.bin").read_bytes()
    ckpt = {
        "model_config": manifest["model_config"],
        "train_config": manifest["train_config"],
        "epoch": manifest["epoch"],
        "adam_t": manifest["adam_t"],
        "scheduler": manifest["scheduler"],
        "rng_state": manifest["rng_state"],
        "params": {}, "buffers": {}, "adam_m": {}, "adam_v": {},
    }
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, "<f4", size, entry["offset"]).reshape(shape).copy()
        ckpt[entry["section"]][entry["name"]] = arr
    return ckpt


def restore_model(ckpt: dict) -> CUNetModel:
    model = build(CUNetConfig(**ckpt["model_config"]))
    for name, arr in ckpt["params"].items():
        model.params[name].data = arr.astype(np.float32).copy()
    for name, arr in ckpt["buffers"].items():
        model.buffers[name][...] = arr
    return model


# ---------------------------------------------------------------------------
# fit


def train_one_step(model, v_pre, v_post, sc, sir, config, adam, lr):
    """forward -> weighted BCE -> backward -> clip -> Adam. Returns (loss, scale)."""
    model.zero_grad()
    pred = model.forward(v_pre, sc, sir, training=True)
    loss = weighted_bce_loss(pred, v_post, config.w_max)
    value = loss.item()
    loss.backward()
    scale = clip_gradients(model.params, config.clip_norm)
    adam.step(model.params, lr)
    return value, scale


def fit(model: CUNetModel, train_data: ArrayDataset, val_data: ArrayDataset,
        config: TrainConfig, resume: dict | None = None, log_path=None,
        progress=None):
    """Train with seeded shuffling.

    Returns (best checkpoint, final checkpoint, per-epoch log rows).  The
    best checkpoint is the state at the epoch with the lowest validation
    loss; the final checkpoint is the state when training ended.  Training
    stops early once the learning rate has reached its floor and the plateau
    patience elapses again.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise InvalidConfig("fit requires non-empty train and validation splits")

    if resume is not None:
        adam = Adam(model.params)
        adam.t = resume["adam_t"]
        adam.m = {n: a.copy() for n, a in resume["adam_m"].items()}
        adam.v = {n: a.copy() for n, a in resume["adam_v"].items()}
        scheduler = PlateauScheduler.from_state(resume["scheduler"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume["rng_state"]
        start_epoch = resume["epoch"]
    else:
        adam = Adam(model.params)
        scheduler = PlateauScheduler(config.learning_rate, config.plateau_factor,
                                     config.plateau_patience, config.min_lr)
        rng = np.random.default_rng(config.seed)
        start_epoch = 0

    best = None
    best_val = float("inf")
    log_rows = []
    step = start_epoch * ((len(train_data) + config.batch_size - 1) // config.batch_size)

    for epoch in range(start_epoch, config.max_epochs):
        order = rng.permutation(len(train_data))
        lr = scheduler.lr
        epoch_loss, clipped, n_steps = 0.0, 0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            v_pre, v_post, sc, sir = train_data.batch(idx)
            value, scale = train_one_step(model, v_pre, v_post, sc, sir, config, adam, lr)
            if not np.isfinite(value):
                raise NonFiniteLoss(step)
            epoch_loss += value
            clipped += scale < 1.0
            n_steps += 1
            step += 1
        val_loss = evaluate_loss(model, val_data, config.w_max)
        scheduler.step(val_loss)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / n_steps,
            "val_loss": val_loss,
            "lr": lr,
            "grad_clip_rate": clipped / n_steps,
        }
        log_rows.append(row)
        if progress:
            progress(row)
        if val_loss < best_val:
            best_val = val_loss
            best = checkpoint_state(model, config, epoch + 1, adam, scheduler, rng)
        if scheduler.stop:
            break

    final_epoch = log_rows[-1]["epoch"] + 1 if log_rows else start_epoch
    final = checkpoint_state(model, config, final_epoch, adam, scheduler, rng)
    if best is None:
        best = final
    if log_path is not None:
        write_epoch_log(log_rows, log_path)
    return best, final, log_rows


def write_epoch_log(rows, path) -> None:
    lines = ["epoch,train_loss,val_loss,lr,grad_clip_rate"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['train_loss']:.8f},{r['val_loss']:.8f},"
                     f"{r['lr']:.8g},{r['grad_clip_rate']:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
