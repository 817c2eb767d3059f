"""Controller search with the deterministic surrogate oracle; prints the top architectures."""
import argparse

from multistage.nas import SearchSpace, flops, search, space_size, surrogate_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budget", type=int, default=128)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    space = SearchSpace()
    print(f"space size {space_size(space):,}")
    res = search(space, surrogate_oracle, args.budget, args.k, args.seed)
    for arch, r in res.top:
        ops = "".join("C" if s.operator == "conv" else "T" for s in arch.stages)
        print(f"reward {r:.4f} flops {flops(arch, 64):,} ops {ops} channels {[s.channels for s in arch.stages]}")


if __name__ == "__main__":
    main()
