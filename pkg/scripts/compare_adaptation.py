"""Multi-stage fine-tune vs plain fine-tune on a percentage-shot split, from an expert backbone."""
import argparse

import numpy as np

from multistage.pipeline import PipelineConfig, compare_adaptation, run_amateur, run_expert


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--percent", type=float, default=0.1)
    args = ap.parse_args()
    res = []
    for seed in args.seeds:
        cfg = PipelineConfig(seed=seed)
        amateur = run_amateur(cfg)
        init = {f"backbone.{k}": v for k, v in amateur.state_dict().items()}
        expert = run_expert(cfg, "classification", init)
        r = compare_adaptation(expert.backbone, cfg, percent=args.percent)
        res.append(r)
        print(f"seed {seed} mf {r['mf']:.4f} plain {r['plain']:.4f}", flush=True)
    print(f"median mf {np.median([r['mf'] for r in res]):.4f} plain {np.median([r['plain'] for r in res]):.4f}")


if __name__ == "__main__":
    main()
