"""Train NPT on Boston housing with a single 0.7/0.2/0.1 split and report test RMSE.

    python3 scripts/fetch_boston.py --out data/boston
    python3 scripts/boston.py --data data/boston
"""
import argparse
import json
import time
from pathlib import Path

from npt.data import TEST, VAL, load_csv, split_rows
from npt.model import RunConfig
from npt.train import build_model, evaluate, fit

# NPT-Small-like, scaled to CPU: full-dataset batch, flat LR for half of training
CONFIG = dict(layers=4, heads=4, embed_dim=32, dropout=0.1, lr=1e-3, flat_fraction=0.5,
              batch_size=0, total_steps=2000, eval_every=250, p_feature=0.15, p_target=1.0)


def main():
    ap = argparse.ArgumentParser(description="Boston housing regression")
    ap.add_argument("--data", default="data/boston")
    ap.add_argument("--config", help="JSON overrides for the RunConfig")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = dict(CONFIG, seed=args.seed)
    if args.config:
        cfg.update(json.loads(Path(args.config).read_text()))
    data = Path(args.data)
    table = load_csv(data / "data.csv", data / "schema.json")
    table = table.with_roles(split_rows(table.n, (0.7, 0.2, 0.1), seed=args.seed))
    model = build_model(table, RunConfig(**cfg))
    t0 = time.time()

    def log(record):
        test = evaluate(model, table, score_roles=(TEST,))
        val = evaluate(model, table, score_roles=(VAL,))
        print(json.dumps({"step": record["step"], "train_loss": round(record["train_loss"], 4),
                          "val_rmse": round(val["rmse"], 3), "test_rmse": round(test["rmse"], 3),
                          "seconds": round(time.time() - t0, 1)}), flush=True)

    fit(model, table, log=log)


if __name__ == "__main__":
    main()
