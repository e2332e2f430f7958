#!/usr/bin/env python3
"""Fused-vs-unfused timing table on this machine.

Timings are platform measurements with no pass/fail gate; parity between
the fused result and the unfused composition is checked on every entry.
"""

import argparse

from ftrain.bench import run_benchmarks


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()

    results = run_benchmarks(rows=args.rows, cols=args.cols, threads=args.threads)
    print(f"{'op':<28} {'fused ms':>10} {'unfused ms':>11} {'speedup':>8} {'parity':>9}")
    for r in results:
        print(f"{r['op']:<28} {r['fused_mean_s_t1'] * 1e3:>10.3f} "
              f"{r['unfused_mean_s_t1'] * 1e3:>11.3f} {r['speedup_t1']:>8.2f} "
              f"{r['parity_rel_err']:>9.1e}")
    key = f"speedup_t{args.threads}"
    if key != "speedup_t1" and key in results[0]:
        print(f"\nwith {args.threads} worker threads:")
        for r in results:
            print(f"{r['op']:<28} {r[key]:>8.2f}x")


if __name__ == "__main__":
    main()
