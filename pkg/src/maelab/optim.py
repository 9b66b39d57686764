"""AdamW and LARS, warmup + cosine schedule, layer-wise learning-rate decay."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    momentum: float = 0.9
    eps: float = 1e-8
    # batch size the base_lr refers to; actual lr = base_lr * batch / ref_batch
    ref_batch: int = 2048
    exempt_bias_norm: bool = True

    def __post_init__(self):
        if self.kind not in ("adamw", "lars"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def scaled_lr(self, batch: int) -> float:
        return self.base_lr * batch / self.ref_batch


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: float = 20
    total_epochs: float = 800
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}")


PRETRAIN_OPTIM = OptimizerConfig("adamw", 1.5e-4, (0.9, 0.95), 0.05, ref_batch=2048)
PRETRAIN_SCHEDULE = ScheduleConfig(warmup_epochs=20, total_epochs=800, min_lr=0.0)
LINPROBE_OPTIM = OptimizerConfig("lars", 0.1, weight_decay=0.0, momentum=0.9, ref_batch=16384)
LINPROBE_SCHEDULE = ScheduleConfig(warmup_epochs=10, total_epochs=100, min_lr=0.0)
FINETUNE_SCHEDULE = ScheduleConfig(warmup_epochs=5, total_epochs=75, min_lr=1e-6)


def lr_at(step: int, schedule: ScheduleConfig, base_lr: float, min_lr: float | None = None) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine down to min_lr."""
    if step < 0:
        raise ValueError("step must be non-negative")
    min_lr = schedule.min_lr if min_lr is None else min_lr
    warm = schedule.warmup_epochs * schedule.steps_per_epoch
    total = schedule.total_epochs * schedule.steps_per_epoch
    if step < warm:
        return base_lr * step / warm
    if step >= total:
        return min_lr
    progress = (step - warm) / (total - warm)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- layer-wise decay ------------------------------------------------------------------

def layer_decay_multipliers(depth: int, decay: float) -> list[float]:
    """``decay ** (depth + 1 - g)`` for g = 0 (embeddings) .. depth + 1 (head)."""
    if decay <= 0 or decay > 1:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    return [decay ** (depth + 1 - g) for g in range(depth + 2)]


_BLOCK = re.compile(r"(?:^|\.)blocks\.(\d+)\.")


def layer_id(name: str, depth: int) -> int:
    """Group index of a parameter: 0 embeddings, i+1 for block i, depth+1 otherwise."""
    if name.startswith(("patch_embed", "cls_token", "pos_embed", "encoder.patch_embed", "encoder.cls_token")):
        return 0
    m = _BLOCK.search(name)
    if m and not name.startswith("decoder"):
        return int(m.group(1)) + 1
    return depth + 1


@dataclass
class LayerDecayPlan:
    decay: float
    depth: int
    groups: dict[str, int]

    @classmethod
    def build(cls, names, depth: int, decay: float) -> "LayerDecayPlan":
        return cls(decay, depth, {n: layer_id(n, depth) for n in names})

    def multiplier(self, name: str) -> float:
        return layer_decay_multipliers(self.depth, self.decay)[self.groups[name]]


def is_decay_exempt(name: str, param: Tensor | np.ndarray) -> bool:
    """Biases, norm scales and special tokens skip weight decay and LARS trust scaling."""
    data = param.data if isinstance(param, Tensor) else param
    return data.ndim == 1 or name.endswith(("cls_token", "mask_token"))


# -- single-tensor update rules ------------------------------------------------------

def adamw_update(p, g, m, v, step: int, lr: float, betas, eps: float, weight_decay: float) -> None:
    """In-place AdamW on arrays. ``step`` counts from 1."""
    b1, b2 = betas
    if weight_decay:
        p -= lr * weight_decay * p
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def lars_update(p, g, buf, lr: float, momentum: float, weight_decay: float, trust: bool = True) -> None:
    """In-place LARS: trust ratio ||p|| / ||g + wd p|| on the decayed gradient, then momentum."""
    d = g + weight_decay * p if weight_decay else g.copy()
    if trust:
        pn = float(np.linalg.norm(p))
        dn = float(np.linalg.norm(d))
        ratio = pn / dn if pn > 0 and dn > 0 else 1.0
        d = d * ratio
    buf *= momentum
    buf += d
    p -= lr * buf


class _Optimizer:
    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig, lr_scales: dict[str, float] | None = None,
                 frozen: set[str] | None = None):
        self.params = params
        self.cfg = cfg
        self.lr_scales = lr_scales or {}
        self.frozen = frozen or set()
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _grads(self):
        for name, t in self.params.items():
            if name in self.frozen or t.grad is None:
                continue
            if not np.all(np.isfinite(t.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            yield name, t

    def _wd(self, name, t) -> float:
        if self.cfg.exempt_bias_norm and is_decay_exempt(name, t):
            return 0.0
        return self.cfg.weight_decay

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step_count, dtype=np.float64)}
        for name, st in self.state.items():
            for k, arr in st.items():
                out[f"{name}::{k}"] = arr
        return out

    def load_state_dict(self, flat: dict[str, np.ndarray]) -> None:
        self.step_count = int(flat.get("step", 0))
        self.state = {}
        for key, arr in flat.items():
            if key == "step":
                continue
            name, k = key.rsplit("::", 1)
            self.state.setdefault(name, {})[k] = np.array(arr)


class AdamW(_Optimizer):
    def step(self, lr: float) -> None:
        self.step_count += 1
        b = self.cfg.betas
        for name, t in self._grads():
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
            adamw_update(t.data, t.grad, st["m"], st["v"], self.step_count,
                         lr * self.lr_scales.get(name, 1.0), b, self.cfg.eps, self._wd(name, t))


class LARS(_Optimizer):
    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, t in self._grads():
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"buf": np.zeros_like(t.data)}
            exempt = self.cfg.exempt_bias_norm and is_decay_exempt(name, t)
            lars_update(t.data, t.grad, st["buf"], lr * self.lr_scales.get(name, 1.0), self.cfg.momentum,
                        0.0 if exempt else self.cfg.weight_decay, trust=not exempt)


def make_optimizer(params: dict[str, Tensor], cfg: OptimizerConfig, lr_scales=None, frozen=None) -> _Optimizer:
    cls = AdamW if cfg.kind == "adamw" else LARS
    return cls(params, cfg, lr_scales, frozen)


def adamw_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig, lr_t: float) -> None:
    """Functional AdamW over name -> array dicts; ``state`` carries moments and ``step``."""
    state["step"] = state.get("step", 0) + 1
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        m = state.setdefault(f"{name}.m", np.zeros_like(p))
        v = state.setdefault(f"{name}.v", np.zeros_like(p))
        adamw_update(p, g, m, v, state["step"], lr_t, cfg.betas, cfg.eps, cfg.weight_decay)


def lars_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig, lr_t: float) -> None:
    """Functional LARS over name -> array dicts, honouring bias/norm exemptions."""
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        buf = state.setdefault(f"{name}.buf", np.zeros_like(p))
        exempt = cfg.exempt_bias_norm and is_decay_exempt(name, p)
        lars_update(p, g, buf, lr_t, cfg.momentum, 0.0 if exempt else cfg.weight_decay, trust=not exempt)
