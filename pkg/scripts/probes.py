"""Corruption, deletion and intervention probes on a duplication-task checkpoint.

    python3 scripts/duplication.py --out runs/dup
    python3 scripts/probes.py --checkpoint runs/dup/checkpoint.nptc --out runs/dup
"""
import argparse
import json
from pathlib import Path

import numpy as np

from npt.analysis import corruption_eval, corruption_report, deletion_probe, intervene_target
from npt.experiments import DuplicationSetup
from npt.masking import build_task_masks
from npt.model import load_checkpoint
from npt.tensor import DeterministicRng
from npt.train import mask_config


def main():
    ap = argparse.ArgumentParser(description="Probe a duplication-task model")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--variant", default="plain")
    ap.add_argument("--points", type=int, default=80, help="test rows for the deletion probe")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    model, config = load_checkpoint(args.checkpoint)
    setup = DuplicationSetup(variant=args.variant)
    test = setup.test_table()
    n = setup.n

    corruption = corruption_eval(model, test)
    print(f"corruption: RMSE {corruption.clean_metric:.4f} -> {corruption.corrupted_metric:.4f}")

    deletion = deletion_probe(model, test, max_points=args.points)
    print(f"deletion kept vs random: {deletion.kept_vs_random}")

    rows = np.r_[0:32, n:n + 32]
    x, m = build_task_masks(test.subset(rows), mask_config(config), DeterministicRng(0, 9), model.stats,
                            training=False)
    j = model.schema.single_target()
    values = model.stats.mean[j] + model.stats.std[j] * np.linspace(-3.0, 3.0, 13)
    sweeps = {}
    for q in range(8):
        preds = intervene_target(model, x, m.bits, 32 + q, q, values)
        sweeps[q] = {"corr": float(np.corrcoef(values, preds)[0, 1]), "predictions": preds.tolist()}
        print(f"intervention row {q}: corr {sweeps[q]['corr']:.4f}")

    deletion.corruption = corruption_report(corruption)
    report = deletion.to_dict()
    report["intervention"] = {"values": values.tolist(), "rows": sweeps}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probes.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
