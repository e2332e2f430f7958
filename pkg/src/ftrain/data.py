"""Token data: synthetic tasks, file loading, length-bucketed batching.

Synthetic batches are a pure function of (seed, step) through the
counter RNG, so a resumed run regenerates exactly the batches an
uninterrupted run would have seen. Padded lengths are bucketed to
multiples of four so the set of batch shapes the arena must plan for is
small and enumerable before training.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .errors import DataError, ParseError, TokenOutOfRange
from .model import Batch
from .numerics import derive_seed, rand_uniform_array

LEN_BUCKET = 4


def load_token_file(path: str, vocab: int) -> list[list[int]]:
    """One sequence per line: whitespace-separated non-negative token ids."""
    seqs = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            ids = [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer token") from None
        if any(t < 0 for t in ids):
            raise ParseError(f"{path}:{lineno}: negative token id")
        if any(t >= vocab for t in ids):
            raise TokenOutOfRange(f"{path}:{lineno}: token id >= vocab ({vocab})")
        seqs.append(ids)
    return seqs


def _bucket_len(m: int, max_len: int) -> int:
    padded = -(-m // LEN_BUCKET) * LEN_BUCKET
    return padded if padded <= max_len else max(m, min(padded, max_len))


def bos_id(pad_id: int, vocab: int) -> int:
    return (pad_id + 1) % vocab


def payload_range(pad_id: int, vocab: int) -> list[int]:
    """Token ids usable as sequence content (everything but pad and bos)."""
    reserved = {pad_id, bos_id(pad_id, vocab)}
    return [t for t in range(vocab) if t not in reserved]


class SyntheticTask:
    """copy: target = source; reverse: target = reversed source."""

    def __init__(self, run_cfg: RunConfig):
        m, t, d = run_cfg.model, run_cfg.train, run_cfg.data
        if m.vocab < 4:
            raise DataError("synthetic tasks need vocab >= 4")
        self.task = d.task
        self.pad_id = d.pad_id
        self.bos = bos_id(d.pad_id, m.vocab)
        self.symbols = np.array(payload_range(d.pad_id, m.vocab))
        self.min_len = max(1, d.min_len)
        self.max_len = m.max_len
        self.batch_size = max(1, t.batch_tokens // m.max_len)
        self.seed = t.seed

    def possible_shapes(self) -> list[tuple[int, int]]:
        """All (B, L) batch shapes this task can emit, for arena planning."""
        buckets = sorted({_bucket_len(m, self.max_len)
                          for m in range(self.min_len, self.max_len + 1)})
        return [(self.batch_size, l) for l in buckets]

    def batch(self, step: int) -> Batch:
        b = self.batch_size
        span = self.max_len - self.min_len + 1
        lens = (rand_uniform_array(derive_seed(self.seed, step, 101), 0, b) * span).astype(int) + self.min_len
        lb = _bucket_len(int(lens.max()), self.max_len)
        u = rand_uniform_array(derive_seed(self.seed, step, 102), 0, b * lb)
        body = self.symbols[(u * len(self.symbols)).astype(int)].reshape(b, lb)
        src = np.full((b, lb), self.pad_id, dtype=np.int64)
        tgt_out = np.full((b, lb), self.pad_id, dtype=np.int64)
        tgt_in = np.full((b, lb), self.pad_id, dtype=np.int64)
        for i in range(b):
            l = int(lens[i])
            seq = body[i, :l]
            src[i, :l] = seq
            out = seq if self.task == "copy" else seq[::-1]
            tgt_out[i, :l] = out
            tgt_in[i, 0] = self.bos
            tgt_in[i, 1:l] = out[:l - 1]
        return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out,
                     src_len=lens.astype(np.int64), pad_id=self.pad_id)


class FileTask:
    """Copy objective over file sequences, precomputed bucketed batches."""

    def __init__(self, run_cfg: RunConfig):
        m, t, d = run_cfg.model, run_cfg.train, run_cfg.data
        self.pad_id = d.pad_id
        self.bos = bos_id(d.pad_id, m.vocab)
        seqs = load_token_file(d.path, m.vocab)
        seqs = [s[:m.max_len] for s in seqs if s]
        if not seqs:
            raise DataError(f"no usable sequences in {d.path}")
        self.batches = self._assemble(seqs, t.batch_tokens, m.max_len)

    def _assemble(self, seqs, batch_tokens, max_len) -> list[Batch]:
        order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
        batches = []
        group: list[list[int]] = []
        for idx in order:
            s = seqs[idx]
            lb = _bucket_len(max(len(x) for x in group + [s]), max_len)
            if group and (len(group) + 1) * lb > batch_tokens:
                batches.append(self._build(group, max_len))
                group = []
            group.append(s)
        if group:
            batches.append(self._build(group, max_len))
        return batches

    def _build(self, group, max_len) -> Batch:
        b = len(group)
        lb = _bucket_len(max(len(s) for s in group), max_len)
        src = np.full((b, lb), self.pad_id, dtype=np.int64)
        tgt_out = np.full((b, lb), self.pad_id, dtype=np.int64)
        tgt_in = np.full((b, lb), self.pad_id, dtype=np.int64)
        lens = np.zeros(b, dtype=np.int64)
        for i, s in enumerate(group):
            l = len(s)
            lens[i] = l
            src[i, :l] = s
            tgt_out[i, :l] = s
            tgt_in[i, 0] = self.bos
            tgt_in[i, 1:l] = s[:l - 1]
        return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out, src_len=lens,
                     pad_id=self.pad_id)

    def possible_shapes(self) -> list[tuple[int, int]]:
        return sorted({(b.src.shape[0], b.src.shape[1]) for b in self.batches})

    def batch(self, step: int) -> Batch:
        return self.batches[step % len(self.batches)]


def make_task(run_cfg: RunConfig):
    if run_cfg.data.task == "file":
        return FileTask(run_cfg)
    return SyntheticTask(run_cfg)
