"""Train an NPT (or its no-ABD ablation) on a duplication-task variant.

    python3 scripts/duplication.py --variant plain --out runs/dup
"""
import argparse
import json
import time
from pathlib import Path

from npt.analysis import parametric_ablation
from npt.experiments import DuplicationSetup, duplication_config, score_duplication
from npt.model import save_checkpoint
from npt.train import build_model, fit


def main():
    ap = argparse.ArgumentParser(description="Train on a duplication-task variant")
    ap.add_argument("--variant", default="plain", choices=("plain", "random_features", "add_one", "both"))
    ap.add_argument("--steps", type=int, default=16000)
    ap.add_argument("--ablate", action="store_true", help="replace every ABD layer by the identity")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    setup = DuplicationSetup(variant=args.variant)
    config = duplication_config(total_steps=args.steps, seed=args.seed)
    if args.ablate:
        config = parametric_ablation(config)
    test = setup.test_table()
    model = build_model(setup.train_table(0), config)
    t0 = time.time()

    def log(record):
        scores = score_duplication(model, setup, test)
        print(json.dumps({**record, **scores, "seconds": round(time.time() - t0, 1)}), flush=True)

    fit(model, setup.train_table, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.nptc")
    result = {"variant": args.variant, "ablate": args.ablate, "steps": args.steps,
              **score_duplication(model, setup, test)}
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result))


if __name__ == "__main__":
    main()
