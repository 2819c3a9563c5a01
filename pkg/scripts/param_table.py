"""Per-level trainable parameter counts, Z-net vs the U-net baseline."""
import argparse

from znet.model import ZNetConfig, level_param_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--depth", type=int, default=5)
    ap.add_argument("--base", type=int, default=32)
    args = ap.parse_args()
    z = level_param_table(ZNetConfig(depth=args.depth, base_channels=args.base))
    u = dict(level_param_table(ZNetConfig(depth=args.depth, base_channels=args.base, arch="unet")))
    print(f"{'level':<8}{'znet':>12}{'unet':>12}")
    for name, n in z:
        print(f"{name:<8}{n:>12}{u[name]:>12}")
    print(f"{'total':<8}{sum(n for _, n in z):>12}{sum(u.values()):>12}")


if __name__ == "__main__":
    main()
