#!/usr/bin/env python3
"""Sweep the self-attention-backward memory plan over model shapes.

For each (B, H, L, N) prints the planned peak, the naive unshared peak,
and the savings ratio, then renders the reuse-column diagram for one
shape.
"""

import argparse

from ftrain.memplan import (PlanShape, attention_backward_lifetimes,
                            naive_attention_backward_peak, plan, render_plan_diagram)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 8])
    ap.add_argument("--hidden", type=int, nargs="+", default=[64, 256, 1024])
    ap.add_argument("--length", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--heads", type=int, nargs="+", default=[4, 16])
    args = ap.parse_args()

    print(f"{'B':>4} {'H':>6} {'L':>4} {'N':>3} {'peak':>12} {'naive':>12} {'ratio':>6}")
    for b in args.batch:
        for h in args.hidden:
            for l in args.length:
                for n in args.heads:
                    shape = PlanShape(b, h, l, n)
                    peak = plan(attention_backward_lifetimes(shape)).peak
                    naive = naive_attention_backward_peak(shape)
                    print(f"{b:>4} {h:>6} {l:>4} {n:>3} {peak:>12} {naive:>12} "
                          f"{naive / peak:>6.2f}")

    shape = PlanShape(args.batch[0], args.hidden[0], args.length[0], args.heads[0])
    print()
    print(render_plan_diagram(plan(attention_backward_lifetimes(shape))))


if __name__ == "__main__":
    main()
