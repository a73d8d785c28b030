"""Write the Boston housing table as data.csv + schema.json.

The CSV ships inside scikit-learn wheels up to 1.1; pass one with --csv,
or let the script pull the 1.1.3 wheel through pip.

    python3 scripts/fetch_boston.py --out data/boston
"""
import argparse
import csv
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from npt.data import DataTable, save_csv
from npt.embedding import CATEGORICAL, CONTINUOUS, AttributeSchema, Column

MEMBER = "sklearn/datasets/data/boston_house_prices.csv"


def raw_csv_text(csv_path) -> str:
    if csv_path:
        return Path(csv_path).read_text()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "scikit-learn==1.1.3", "--no-deps",
                        "--only-binary", ":all:", "--python-version", "3.10",
                        "--platform", "manylinux2014_x86_64", "--timeout", "120", "-d", tmp], check=True)
        wheel = next(Path(tmp).glob("*.whl"))
        return zipfile.ZipFile(wheel).read(MEMBER).decode()


def main():
    ap = argparse.ArgumentParser(description="Convert the Boston housing CSV")
    ap.add_argument("--csv", help="an existing boston_house_prices.csv")
    ap.add_argument("--out", default="data/boston")
    args = ap.parse_args()

    lines = raw_csv_text(args.csv).splitlines()
    rows = list(csv.reader(lines[1:]))
    header, body = rows[0], [r for r in rows[1:] if r]
    values = np.array(body, dtype=np.float64)
    columns = []
    for name in header:
        if name == "CHAS":
            columns.append(Column(name, CATEGORICAL, categories=["0", "1"]))
        else:
            columns.append(Column(name, CONTINUOUS, is_target=name == "MEDV"))
    chas = header.index("CHAS")
    values[:, chas] = values[:, chas].astype(int)
    table = DataTable(values, AttributeSchema(columns), np.array(["train"] * len(body), dtype=object))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(table, out / "data.csv", out / "schema.json")
    print(f"wrote {table.n} rows to {out / 'data.csv'}")


if __name__ == "__main__":
    main()
