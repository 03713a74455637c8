"""L1 objective, Adam, step-decay learning rate and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .datagen import _atomic_write, upsample_array
from .errors import ConfigError, DimensionError, TrainingAborted
from .u2net import ModelConfig, init_params, u2net_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 360
    batch_size: int = 16
    halve_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    clip_grad_norm: Optional[float] = None

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.halve_every < 1:
            raise ConfigError("batch_size and halve_every must be >= 1, epochs >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **changes):
        return replace(self, **changes)


def l1_loss(pred, target):
    """Mean over the batch of each sample's L1 norm of ``pred - target``."""
    target = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    batch = pred.shape[0] if pred.ndim == 4 else 1
    return T.scale(T.sum_all(T.abs_(T.sub(pred, target))), 1.0 / batch)


def lr_at(epoch, cfg: TrainConfig):
    """Staircase schedule: lr0 halved every ``halve_every`` epochs."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of every parameter, in place.

    ``grads`` maps names to arrays; a missing entry counts as zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingAborted(f"non-finite gradient for {name}: {bad} of {g.size} entries "
                                  f"(step {state.t + 1})")
    state.t += 1
    t = state.t
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * step).astype(p.data.dtype, copy=False)
    return state


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        return {k: g * factor for k, g in grads.items()}
    return grads


# -- data --------------------------------------------------------------------


@dataclass
class FusionArrays:
    """Stacked training arrays; ``BU`` is B upsampled once up front."""

    A: np.ndarray
    B: np.ndarray
    X: np.ndarray
    BU: np.ndarray

    def __len__(self):
        return self.A.shape[0]

    @classmethod
    def from_triples(cls, triples, dtype=np.float32):
        if not triples:
            raise ConfigError("dataset is empty")
        A = np.stack([t.A.data for t in triples]).astype(dtype)
        B = np.stack([t.B.data for t in triples]).astype(dtype)
        if any(t.X is None for t in triples):
            raise ConfigError("training needs ground truth for every sample")
        X = np.stack([t.X.data for t in triples]).astype(dtype)
        BU = upsample_array(B.astype(np.float64)).astype(dtype)
        return cls(A, B, X, BU)

    def take(self, idx):
        return self.A[idx], self.B[idx], self.X[idx], self.BU[idx]


# -- loop --------------------------------------------------------------------


@dataclass
class FitResult:
    params: dict
    history: list
    adam: AdamState
    checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None

    @property
    def losses(self):
        return [h[1] for h in self.history]


def history_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss", "lr"])
    for epoch, loss, lr in history:
        writer.writerow([epoch, repr(float(loss)), repr(float(lr))])
    return buf.getvalue()


def make_checkpoint(model_cfg, train_cfg, params, adam, rng, epoch, history, best_loss):
    tensors = {f"param/{k}": p.data for k, p in params.items()}
    for k in params:
        if k in adam.m:
            tensors[f"adam.m/{k}"] = adam.m[k]
            tensors[f"adam.v/{k}"] = adam.v[k]
    meta = {"epoch": epoch, "adam_t": adam.t, "history": [list(h) for h in history],
            "best_loss": best_loss}
    return ckpt_io.Checkpoint(model=model_cfg.to_dict(), train=train_cfg.to_dict(), meta=meta,
                              tensors=tensors, rng_state=rng.bit_generator.state)


def params_from_checkpoint(ck, model_cfg=None):
    model_cfg = model_cfg or ModelConfig.from_dict(ck.model)
    params = init_params(model_cfg.with_(zero_head=False))
    stored = ck.group("param")
    if set(stored) != set(params):
        missing, extra = set(params) - set(stored), set(stored) - set(params)
        raise ConfigError(f"checkpoint does not match model config (missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]})")
    for k, p in params.items():
        if stored[k].shape != p.shape:
            raise ConfigError(f"checkpoint tensor {k} has shape {stored[k].shape}, model expects {p.shape}")
        p.data = stored[k].astype(model_cfg.dtype).copy()
    return params


def fit(model_cfg: ModelConfig, data: FusionArrays, cfg: TrainConfig, out_dir=None,
        resume=None, params=None):
    """Train with seeded shuffling, per-batch Adam steps and per-epoch logging.

    ``resume`` is a checkpoint path; training continues from the epoch after
    the one it recorded, with parameters, moments and shuffle state restored.
    Checkpoints (``last.u2ck`` every ``checkpoint_every`` epochs and at the end,
    ``best.u2ck`` on a new best epoch loss) are only written when ``out_dir``
    is given.  A non-finite loss aborts without touching existing files.
    """
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    history, start, best = [], 0, math.inf
    if resume is not None:
        ck = ckpt_io.load(resume)
        params = params_from_checkpoint(ck, model_cfg)
        rng.bit_generator.state = ck.rng_state
        adam.t = ck.meta["adam_t"]
        adam.m = {k: v.copy() for k, v in ck.group("adam.m").items()}
        adam.v = {k: v.copy() for k, v in ck.group("adam.v").items()}
        history = [tuple(h) for h in ck.meta["history"]]
        start = ck.meta["epoch"] + 1
        best = ck.meta["best_loss"] if ck.meta["best_loss"] is not None else math.inf
    elif params is None:
        params = init_params(model_cfg)

    last_path = best_path = None
    n = len(data)
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            A, B, X, BU = data.take(idx)
            for p in params.values():
                p.grad = None
            loss = l1_loss(u2net_forward(A, B, params, model_cfg, BU=BU), X)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {adam.t + 1}"
                                      + (f"; last good checkpoint kept in {out_dir}" if out_dir else ""))
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            if cfg.clip_grad_norm is not None:
                grads = clip_by_global_norm(grads, cfg.clip_grad_norm)
            adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += value * len(idx)
        mean_loss = total / n
        history.append((epoch, mean_loss, lr))
        log.info("epoch %d  loss %.6g  lr %.3g", epoch, mean_loss, lr)

        if out_dir is not None:
            improved = mean_loss < best
            best = min(best, mean_loss)
            last_epoch = epoch == cfg.epochs - 1
            if improved or last_epoch or (epoch + 1) % cfg.checkpoint_every == 0:
                ck = make_checkpoint(model_cfg, cfg, params, adam, rng, epoch, history, best)
                if improved:
                    best_path = out_dir / "best.u2ck"
                    ckpt_io.save(ck, best_path)
                if last_epoch or (epoch + 1) % cfg.checkpoint_every == 0:
                    last_path = out_dir / "last.u2ck"
                    ckpt_io.save(ck, last_path)
                    _atomic_write(out_dir / "loss.csv", history_csv(history).encode())
        else:
            best = min(best, mean_loss)

    return FitResult(params, history, adam, last_path, best_path)
