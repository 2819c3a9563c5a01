"""Uniform-size simulation on phantoms with the five validation-case geometries.

Usage: python3 scripts/run_simulation.py [--shape ellipsoid|sphere]
"""
import argparse

from znet.metrics import format_simulation, simulate_uniform
from znet.preprocess import METHODS, VALIDATION_GEOMETRIES, PhantomParams, phantom_mask
from znet.volume import Volume


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shape", default="ellipsoid", choices=["ellipsoid", "sphere"])
    ap.add_argument("--radius-mm", type=float, default=20.0)
    args = ap.parse_args()
    params = PhantomParams(radius_mm=args.radius_mm)
    cases = [(f"Case{k:02d}", Volume(phantom_mask(dims, sp, args.shape, params), sp, "mask"))
             for k, (dims, sp) in VALIDATION_GEOMETRIES.items()]
    table = simulate_uniform(cases, METHODS)
    for method, row in table.items():
        print(method, " ".join(f"{cid}={v:.2f}" for cid, v in row["cases"].items()))
    print(format_simulation(table), end="")


if __name__ == "__main__":
    main()
