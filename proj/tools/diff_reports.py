#!/usr/bin/env python3
"""Compare two `freqhead analyze` report.json files field by field.

Usage: diff_reports.py A/report.json B/report.json [--all]

Numeric fields print both values and B - A; the per-bin curve is shown as a
table of geometric means. Fields that are equal are hidden unless --all.
"""

import argparse
import json
import math
import sys


def flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for key, value in obj.items():
            if key == "curve":
                continue
            yield from flatten(value, f"{prefix}{key}.")
    else:
        yield prefix.rstrip("."), obj


def fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return json.dumps(v)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("a")
    parser.add_argument("b")
    parser.add_argument("--all", action="store_true", help="also print equal fields")
    args = parser.parse_args()

    with open(args.a) as f:
        a = json.load(f)
    with open(args.b) as f:
        b = json.load(f)

    fa, fb = dict(flatten(a)), dict(flatten(b))
    rows = []
    for key in list(fa) + [k for k in fb if k not in fa]:
        va, vb = fa.get(key), fb.get(key)
        if va == vb and not args.all:
            continue
        delta = ""
        if isinstance(va, (int, float)) and isinstance(vb, (int, float)) and not isinstance(va, bool):
            delta = fmt(float(vb) - float(va))
        rows.append((key, fmt(va), fmt(vb), delta))

    width = max([len(r[0]) for r in rows] + [5])
    print(f"{'field':<{width}}  {'A':>14}  {'B':>14}  {'B - A':>12}")
    for key, va, vb, delta in rows:
        print(f"{key:<{width}}  {va:>14}  {vb:>14}  {delta:>12}")

    ca, cb = a.get("curve", []), b.get("curve", [])
    if ca and cb:
        if len(ca) != len(cb) or any(x["lower"] != y["lower"] for x, y in zip(ca, cb)):
            print("\ncurves use different bin edges; per-bin comparison skipped")
        else:
            print(f"\n{'bin':>3}  {'freq range':>23}  {'count':>6}  {'geo_mean A':>11}  {'geo_mean B':>11}  {'log B/A':>8}")
            for i, (x, y) in enumerate(zip(ca, cb)):
                ga, gb = x["geo_mean"], y["geo_mean"]
                ratio = f"{math.log(gb / ga):.3f}" if ga and gb else ""
                ga_s = f"{ga:.4g}" if ga is not None else "-"
                gb_s = f"{gb:.4g}" if gb is not None else "-"
                print(f"{i:>3}  {x['lower']:>11.3g}-{x['upper']:<11.3g}  {x['count']:>6}  {ga_s:>11}  {gb_s:>11}  {ratio:>8}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
