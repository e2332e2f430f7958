#!/usr/bin/env python3
"""Train the tiny encoder-decoder on the synthetic copy task.

Reproduces the end-to-end experiment: 2 encoder + 2 decoder layers,
d_model 32, vocab 32, max length 16, 2000 steps. Prints line-delimited
JSON metrics and the final teacher-forced accuracy.

    python scripts/train_copy_task.py [--steps N] [--seed S] [--reverse]
"""

import argparse
import json
import time

from ftrain.config import RunConfig
from ftrain.engine import TrainingEngine


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reverse", action="store_true", help="reverse task instead of copy")
    ap.add_argument("--p-drop", type=float, default=0.0)
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.train.steps = args.steps
    cfg.train.seed = args.seed
    cfg.train.p_drop = args.p_drop
    if args.reverse:
        cfg.data.task = "reverse"

    engine = TrainingEngine(cfg)
    capacity = engine.setup_arena()
    print(json.dumps({"event": "setup", "arena_capacity_elements": capacity,
                      "parameters": engine.ws.n_elements}))
    t0 = time.time()
    for step in range(cfg.train.steps):
        metrics = engine.train_step(step)
        if step % 100 == 0 or step == cfg.train.steps - 1:
            print(json.dumps({"event": "metrics", **metrics.as_dict()}), flush=True)
    accuracy = engine.evaluate()
    print(json.dumps({"event": "final", "final_accuracy": accuracy,
                      "wall_seconds": round(time.time() - t0, 1),
                      "arena_high_water": engine.arena.high_water,
                      "arena_reallocs": engine.arena.realloc_count}))


if __name__ == "__main__":
    main()
