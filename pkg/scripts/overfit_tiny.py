"""Overfit a small Z-net on a handful of synthetic disk slices and print the loss curve."""
import argparse

from znet.model import ZNet, ZNetConfig
from znet.preprocess import disk_slices
from znet.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base", type=int, default=32)
    ap.add_argument("--slices", type=int, default=4)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    x, y = disk_slices(args.slices, size=32, noise=args.noise, seed=args.seed)
    cfg = ZNetConfig(depth=args.depth, base_channels=args.base, input_size=(32, 32))
    res = train(ZNet(cfg, seed=args.seed), x, y,
                TrainConfig(batch_size=min(4, args.slices), epochs=args.steps, max_steps=args.steps,
                            seed=args.seed))
    for step, _, loss in res.steps[::20] + res.steps[-1:]:
        print(f"{step:4d} {loss:.5f}")


if __name__ == "__main__":
    main()
