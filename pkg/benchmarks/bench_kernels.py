"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--vehicles 13] [--steps 5000]
"""
import argparse

from lanebench import kernels
from lanebench.bench import run_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vehicles", type=int, default=13)
    ap.add_argument("--steps", type=int, default=5000)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}; vehicles: {args.vehicles}")
    for name, rate in run_all(args.vehicles, args.steps).items():
        unit = "frames/s" if name.startswith("raster") else "substeps/s"
        print(f"{name:<22} {rate:>12,.0f} {unit}")


if __name__ == "__main__":
    main()
