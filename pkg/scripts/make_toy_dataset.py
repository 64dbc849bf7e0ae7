#!/usr/bin/env python3
"""Emit a synthetic text/sequence corpus as jsonl for desk-scale experiments."""

import argparse

from protdat.data import synthetic_records, write_jsonl


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-len", type=int, default=16)
    ap.add_argument("--max-len", type=int, default=64)
    ap.add_argument("--out", default="toy.jsonl")
    args = ap.parse_args()
    records = synthetic_records(args.n, seed=args.seed, min_len=args.min_len, max_len=args.max_len)
    write_jsonl(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")


if __name__ == "__main__":
    main()
