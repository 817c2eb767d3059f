"""Probe accuracy and depth RMSE of the amateur, expert and generalist over several seeds."""
import argparse

import numpy as np

from multistage.pipeline import PipelineConfig, evaluate_stages, run_upstream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    rows = {}
    for seed in args.seeds:
        cfg = PipelineConfig(seed=seed)
        models = run_upstream(cfg)
        for rep in evaluate_stages(models, cfg):
            name = rep.protocol.split(":")[0]
            rows.setdefault(name, []).append(rep.metrics)
            print(f"seed {seed} {name:10s} acc {rep.metrics['probe_accuracy']:.4f} "
                  f"depth {rep.metrics['depth_rmse']:.4f}", flush=True)
    print("median over seeds")
    for name, ms in rows.items():
        acc = np.median([m["probe_accuracy"] for m in ms])
        rmse = np.median([m["depth_rmse"] for m in ms])
        print(f"  {name:10s} acc {acc:.4f} depth {rmse:.4f}")


if __name__ == "__main__":
    main()
