"""Training driver: the four-stage loop at desk scale.

Stage 1/2 run the fused forward/backward against the planned arena,
stage 4 is one batched workspace update (gradient synchronization across
replicas is out of scope; the trainer consumes already-reduced
gradients). Arena plans are recorded per batch shape before training by
dry-running the model once per shape, so the training loop itself never
allocates temporary memory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import make_task
from .errors import DataError
from .memplan import PlannedArena, RecordingArena, TensorTag, classify, estimate_capacity
from .model import Batch, Transformer, _ViewSink
from .numerics import narrow_f32
from .trainer import OptimConfig, Workspace, optimizer_step, workspace_pack, zero_grads

EVAL_STEP_BASE = 1 << 30  # synthetic eval batches draw from a disjoint step range


@dataclass
class StepMetrics:
    step: int
    loss: float
    tokens: int
    accuracy: float
    tokens_per_sec: float
    arena_high_water: int
    skipped: bool
    nonfinite: int

    def as_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "tokens": self.tokens,
                "accuracy": self.accuracy, "tokens_per_sec": self.tokens_per_sec,
                "arena_high_water": self.arena_high_water, "skipped": self.skipped,
                "nonfinite": self.nonfinite}


class TrainingEngine:
    def __init__(self, run_cfg: RunConfig):
        self.cfg = run_cfg
        self.model = Transformer(run_cfg.model)
        self.task = make_task(run_cfg)
        t = run_cfg.train
        self.optim = OptimConfig(algorithm=t.algorithm, lr=t.lr, beta1=t.beta1,
                                 beta2=t.beta2, eps_opt=t.eps_opt,
                                 weight_decay=t.weight_decay, momentum=t.momentum,
                                 loss_scale=t.loss_scale)
        init = self.model.init_params(t.seed)
        self.ws: Workspace = workspace_pack(
            [(name, init[name]) for name in self.model.param_names], t.algorithm)
        self.pviews = self.ws.param_views()
        # fp32 gradient accumulators: permanent memory, laid out like the
        # workspace so the same links resolve both.
        self.grad_acc = np.zeros(self.ws.n_elements, dtype=np.float32)
        self.gviews = {l.name: self.grad_acc[l.offset:l.offset + l.length].reshape(l.shape)
                       for l in self.ws.links}
        self.applied_steps = 0
        self.skip_count = 0
        self.arena: PlannedArena | None = None
        self.capacity = 0
        self._strategy = None

    # -- arena setup ---------------------------------------------------------

    def _dummy_batch(self, b: int, l: int) -> Batch:
        filler = (self.cfg.data.pad_id + 2) % self.cfg.model.vocab
        tok = np.full((b, l), filler, dtype=np.int64)
        return Batch(src=tok, tgt_in=tok.copy(), tgt_out=tok.copy(),
                     src_len=np.full(b, l, dtype=np.int64), pad_id=self.cfg.data.pad_id)

    def _record_shape(self, key, batch: Batch, compute_grads: bool):
        rec = RecordingArena()
        self.model.forward_backward(
            self.pviews, batch, p_drop=self.cfg.train.p_drop if compute_grads else 0.0,
            alpha=self.cfg.train.alpha, seed=self.cfg.train.seed, step=0,
            arena=rec, compute_grads=compute_grads, strategy=self._strategy)
        return rec.finish()

    def setup_arena(self) -> int:
        """Dry-run every batch shape, size the arena once, register plans."""
        shapes = self.task.possible_shapes()
        if self.cfg.train.autotune:
            self._warm_softmax_autotune(shapes)
        recorded = {}
        for b, l in shapes:
            batch = self._dummy_batch(b, l)
            recorded[("train", b, l)] = self._record_shape(("train", b, l), batch, True)
            recorded[("eval", b, l)] = self._record_shape(("eval", b, l), batch, False)
        self.capacity = estimate_capacity(recorded.values())
        self.arena = PlannedArena(self.capacity)
        for key, lifetimes in recorded.items():
            self.arena.register_plan(key, lifetimes)
        return self.capacity

    def _warm_softmax_autotune(self, shapes) -> None:
        """Search strategies before training for every softmax shape we will hit."""
        from .kernels import select_softmax_strategy
        m = self.cfg.model
        for b, l in shapes:
            select_softmax_strategy(b * m.n_heads * l, l, autotune=True)  # attention rows
            select_softmax_strategy(b * l, m.vocab, autotune=True)        # criterion rows

    def memory_report(self) -> dict:
        tags = [TensorTag("params16", "parameter"), TensorTag("grads16", "gradient"),
                TensorTag("grad_acc32", "gradient"), TensorTag("moments", "moment"),
                TensorTag("arena", "intermediate")]
        kinds = classify(tags)
        p = self.ws.n_elements
        permanent_bytes = self.ws.state_bytes() + p * 4  # + fp32 grad accumulators
        return {"classes": kinds, "parameters": p,
                "permanent_bytes": permanent_bytes,
                "temporary_capacity_elements": self.capacity,
                "temporary_bytes": self.capacity * 4}

    # -- steps ---------------------------------------------------------------

    def _batch_key(self, batch: Batch, mode: str):
        return (mode, batch.src.shape[0], batch.src.shape[1])

    def train_step(self, step: int, trace=None) -> StepMetrics:
        t0 = time.perf_counter()
        tcfg = self.cfg.train
        batch = self.task.batch(step)
        key = self._batch_key(batch, "train")
        self.arena.begin(key)
        self.grad_acc.fill(0.0)
        sink = _ViewSink(self.gviews)
        # Non-finite values may flow through legally; the skip budget
        # decides their fate, so numpy's warnings are noise here.
        with np.errstate(invalid="ignore", over="ignore"):
            out = self.model.forward_backward(
                self.pviews, batch, p_drop=tcfg.p_drop, alpha=tcfg.alpha,
                seed=tcfg.seed, step=step, arena=self.arena, sink=sink,
                grad_scale=1.0, trace=trace, strategy=self._strategy)
        self.arena.end()

        skipped = False
        nonfinite = 0
        if not np.isfinite(out.loss_sum):
            skipped = True
        else:
            # Mean over tokens, then static loss scaling, folded in one pass.
            self.grad_acc *= np.float32(tcfg.loss_scale / max(out.token_count, 1))
            self.ws.grads16[:] = narrow_f32(self.grad_acc)
            report = optimizer_step(self.ws, self.optim, self.applied_steps + 1)
            if report.applied:
                self.applied_steps += 1
            else:
                skipped = True
                nonfinite = report.nonfinite
            zero_grads(self.ws)
        if skipped:
            self.skip_count += 1
        dt = time.perf_counter() - t0
        return StepMetrics(step=step, loss=out.loss_per_token, tokens=out.token_count,
                           accuracy=out.accuracy,
                           tokens_per_sec=out.token_count / dt if dt > 0 else 0.0,
                           arena_high_water=self.arena.high_water, skipped=skipped,
                           nonfinite=nonfinite)

    def evaluate(self, n_batches: int = 8) -> float:
        """Teacher-forced next-token accuracy on fresh batches, dropout off."""
        correct = 0
        total = 0
        for i in range(n_batches):
            batch = self.task.batch(EVAL_STEP_BASE + i)
            self.arena.begin(self._batch_key(batch, "eval"))
            out = self.model.forward_backward(
                self.pviews, batch, p_drop=0.0, alpha=self.cfg.train.alpha,
                seed=self.cfg.train.seed, step=EVAL_STEP_BASE + i, arena=self.arena,
                compute_grads=False, strategy=self._strategy)
            self.arena.end()
            correct += out.correct
            total += out.token_count
        return correct / max(total, 1)

    # -- checkpointing ---------------------------------------------------------

    def checkpoint_tensors(self) -> list[tuple[str, np.ndarray]]:
        tensors = [("params16", self.ws.params16), ("moments_m", self.ws.m32)]
        if self.ws.v32 is not None:
            tensors.append(("moments_v", self.ws.v32))
        tensors.append(("applied_steps", np.array([self.applied_steps], dtype=np.float32)))
        return tensors

    def save(self, path: str, step: int) -> None:
        ckpt.save_checkpoint(path, step, self.checkpoint_tensors())

    def restore(self, path: str) -> int:
        step, tensors = ckpt.load_checkpoint(path)
        if tensors["params16"].size != self.ws.n_elements:
            raise DataError("checkpoint parameter count does not match the model")
        self.ws.params16[:] = tensors["params16"]
        self.ws.m32[:] = tensors["moments_m"]
        if self.ws.v32 is not None:
            self.ws.v32[:] = tensors["moments_v"]
        self.applied_steps = int(tensors["applied_steps"][0])
        return step
