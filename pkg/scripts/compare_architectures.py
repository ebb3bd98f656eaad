"""Train HED-3D and I2I-3D on the same phantoms and budget, then benchmark both on a held-out set."""

import argparse

from i2i3d.experiments import compare_architectures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=4)
    ap.add_argument("--test", type=int, default=20)
    ap.add_argument("--iterations", default="0,600,400")
    ap.add_argument("--base-lr", type=float, default=3e-6)
    ap.add_argument("--seeds", default="0", help="comma-separated seeds")
    args = ap.parse_args()
    its = tuple(int(v) for v in args.iterations.split(","))
    for seed in (int(s) for s in args.seeds.split(",")):
        res = compare_architectures(args.train, args.test, its, args.base_lr, seed)
        for name, s in res.items():
            print(f"seed {seed}  {name:6s} ODS {s.ods:.4f}  OIS {s.ois:.4f}  AP {s.ap:.4f}")


if __name__ == "__main__":
    main()
