#!/usr/bin/env python3
"""Record oracle answers for the stub host.

Runs one deterministic reconstruction with the ground-truth oracle and saves
every predictor response as a wire payload file, so the frontend host can
replay the run over the stdio protocol:

    python scripts/record_answers.py --scene grid --views 8 --seed 1 --out answers/
    node frontend/dist/src/host.js --mode stub --answers answers/
"""

import argparse

from treereg.predictor import OracleNoiseConfig, OraclePredictor, RecordingPredictor
from treereg.registration import plan_registration, reconstruct
from treereg.scene_sim import make_scene
from treereg.view_graph import SimilarityMatrix


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="grid")
    ap.add_argument("--views", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--sigma-rot", type=float, default=0.0)
    ap.add_argument("--sigma-point", type=float, default=0.0)
    ap.add_argument("--compress", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    _, _, gt = make_scene(args.scene, args.views, args.seed)
    plan = plan_registration(SimilarityMatrix(gt.overlap),
                             compression_k=args.compress)
    noise = OracleNoiseConfig(sigma_rot=args.sigma_rot,
                              sigma_point=args.sigma_point, seed=args.seed)
    recorder = RecordingPredictor(OraclePredictor(gt, noise), args.out)
    result = reconstruct(plan, recorder, gt.images)
    print(f"recorded {result.init_pair_calls} init_pair and "
          f"{result.predict_calls} predict answers in {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
