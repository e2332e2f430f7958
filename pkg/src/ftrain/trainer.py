"""Workspace-based mixed-precision parameter update engine.

All parameters live in one contiguous binary16 buffer with symbolic
links (name -> offset, length); gradients mirror the layout. Each
optimizer step is a single pass over the whole workspace: widen to
binary32 in flight, update, narrow back with round-to-nearest-even. The
only persistent trainer state besides the two fp16 buffers is the fp32
optimizer moments, which is exactly 2*P fp32 elements less than the
fp32-master baseline keeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DuplicateName
from .numerics import narrow_f32, widen_f16


@dataclass
class OptimConfig:
    algorithm: str = "adam"      # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0        # sgd only
    loss_scale: float = 1.0      # static; power of two, >= 1

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.loss_scale < 1.0 or math.log2(self.loss_scale) != int(math.log2(self.loss_scale)):
            raise ConfigError("loss_scale must be a power of two >= 1")


@dataclass
class Link:
    name: str
    offset: int
    length: int
    shape: tuple


@dataclass
class StepReport:
    applied: bool
    nonfinite: int = 0


class Workspace:
    """Contiguous fp16 parameter/gradient region with symbolic links."""

    def __init__(self, links: list[Link], params16, grads16, algorithm: str):
        self.links = links
        self._by_name = {l.name: l for l in links}
        self.params16 = params16
        self.grads16 = grads16
        self.algorithm = algorithm
        n = params16.size
        self.m32 = np.zeros(n, dtype=np.float32)          # Adam m / SGD velocity
        self.v32 = np.zeros(n, dtype=np.float32) if algorithm == "adam" else None

    @property
    def n_elements(self) -> int:
        return int(self.params16.size)

    def resolve(self, name: str) -> tuple[int, int]:
        link = self._by_name[name]
        return link.offset, link.length

    def param_view(self, name: str) -> np.ndarray:
        link = self._by_name[name]
        return self.params16[link.offset:link.offset + link.length].reshape(link.shape)

    def grad_view(self, name: str) -> np.ndarray:
        link = self._by_name[name]
        return self.grads16[link.offset:link.offset + link.length].reshape(link.shape)

    def param_views(self) -> dict[str, np.ndarray]:
        return {l.name: self.param_view(l.name) for l in self.links}

    def grad_views(self) -> dict[str, np.ndarray]:
        return {l.name: self.grad_view(l.name) for l in self.links}

    def state_bytes(self) -> int:
        """Trainer-owned state: 2P fp16 plus the fp32 moments."""
        p = self.n_elements
        moments = (2 if self.algorithm == "adam" else 1) * p * 4
        return 2 * p * 2 + moments


def workspace_pack(named_params, algorithm: str = "adam") -> Workspace:
    """Narrow every parameter to fp16 and concatenate in registration order.

    After packing, the model reads and writes parameters and gradients
    only through the link-resolved views; no per-parameter copies exist.
    """
    links = []
    seen = set()
    offset = 0
    chunks = []
    for name, tensor in named_params:
        if name in seen:
            raise DuplicateName(f"parameter {name!r} registered twice")
        seen.add(name)
        arr = np.asarray(tensor)
        n = int(arr.size)
        links.append(Link(name=name, offset=offset, length=n, shape=tuple(arr.shape)))
        chunks.append(narrow_f32(arr.astype(np.float32).reshape(-1)))
        offset += n
    params16 = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float16)
    grads16 = np.zeros(offset, dtype=np.float16)
    return Workspace(links=links, params16=params16, grads16=grads16, algorithm=algorithm)


def zero_grads(ws: Workspace) -> Workspace:
    """Reset grads16 to the +0.0 bit pattern in one pass."""
    ws.grads16.fill(np.float16(0.0))
    return ws


def _unscaled_grads(ws: Workspace, cfg: OptimConfig):
    g32 = widen_f16(ws.grads16)
    if cfg.loss_scale != 1.0:
        g32 = g32 / np.float32(cfg.loss_scale)
    bad = int(np.size(g32) - np.isfinite(g32).sum())
    return g32, bad


def adam_step(ws: Workspace, cfg: OptimConfig, t: int) -> StepReport:
    """One batched Adam pass over the whole workspace.

    Widen, update in fp32 registers, narrow back (RNE). A non-finite
    unscaled gradient anywhere skips the step and leaves parameters and
    moments bit-identical.
    """
    if ws.algorithm != "adam":
        raise ConfigError("workspace was packed for a different algorithm")
    g32, bad = _unscaled_grads(ws, cfg)
    if bad:
        return StepReport(applied=False, nonfinite=bad)
    p32 = widen_f16(ws.params16)
    m, v = ws.m32, ws.v32
    m[:] = np.float32(cfg.beta1) * m + np.float32(1.0 - cfg.beta1) * g32
    v[:] = np.float32(cfg.beta2) * v + np.float32(1.0 - cfg.beta2) * (g32 * g32)
    m_hat = m / np.float32(1.0 - cfg.beta1 ** t)
    v_hat = v / np.float32(1.0 - cfg.beta2 ** t)
    p32 -= np.float32(cfg.lr) * (m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps_opt))
                                 + np.float32(cfg.weight_decay) * p32)
    ws.params16[:] = narrow_f32(p32)
    return StepReport(applied=True)


def sgd_step(ws: Workspace, cfg: OptimConfig) -> StepReport:
    """One batched momentum-SGD pass over the whole workspace."""
    if ws.algorithm != "sgd":
        raise ConfigError("workspace was packed for a different algorithm")
    g32, bad = _unscaled_grads(ws, cfg)
    if bad:
        return StepReport(applied=False, nonfinite=bad)
    p32 = widen_f16(ws.params16)
    vel = ws.m32
    if cfg.weight_decay:
        g32 = g32 + np.float32(cfg.weight_decay) * p32
    vel[:] = np.float32(cfg.momentum) * vel + g32
    p32 -= np.float32(cfg.lr) * vel
    ws.params16[:] = narrow_f32(p32)
    return StepReport(applied=True)


def optimizer_step(ws: Workspace, cfg: OptimConfig, t: int) -> StepReport:
    return adam_step(ws, cfg, t) if cfg.algorithm == "adam" else sgd_step(ws, cfg)
