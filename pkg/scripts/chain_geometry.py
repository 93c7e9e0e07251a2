"""Inter-class cosine similarity of source features with and without the chain-contrastive term.

    python scripts/chain_geometry.py --seeds 0 1 2 3 4 [--config cfg.json]
"""

import argparse
from pathlib import Path

import numpy as np

from sfada import config as C
from sfada import harness, nets
from sfada.source import class_similarity_matrix, pretrain_source


def geometry(cfg: C.RunConfig, chain_weight: float) -> np.ndarray:
    data = cfg.to_dict()
    data["source"]["chain_weight"] = chain_weight
    cfg = C.from_dict(data)
    source, _ = harness.make_data(cfg)
    model = pretrain_source(source, cfg.source, cfg.stream("train.source"), cfg.stream("init.source"))
    return class_similarity_matrix(nets.encode(model.encoder, source.X), source.y, source.n_classes)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    base = C.load(args.config) if args.config else C.RunConfig()
    np.set_printoptions(precision=3, suppress=True)
    for seed in args.seeds:
        cfg = C.apply_overrides(base, seed=seed)
        for name, w in (("ce+chain", base.source.chain_weight or 1.0), ("ce-only", 0.0)):
            S = geometry(cfg, w)
            K = len(S)
            adj = np.mean([S[i, i + 1] for i in range(K - 1)])
            print(f"seed {seed} {name:8s} adjacent {adj:.3f} ends {S[0, K - 1]:.3f} "
                  f"{'ordered' if adj > S[0, K - 1] else 'not ordered'}")
            print(S)


if __name__ == "__main__":
    main()
