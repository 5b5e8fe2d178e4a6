"""Rebuild the vendored CSVs under data/ from wheels published on PyPI.

The Telco customer churn table ships inside ``evalml`` and the UCI Adult
training split ships inside ``responsibly``. Both wheels are downloaded
without dependencies and only the data members are extracted.

    python scripts/fetch_datasets.py [--out data]
"""

from __future__ import annotations

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]

SOURCES = {
    "evalml==0.84.0": "evalml/demos/data/churn.csv",
    "responsibly==0.1.2": "responsibly/dataset/adult/adult.data",
}


def _download(requirement: str, dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", requirement, "-d", str(dest)],
        check=True,
    )
    return next(dest.glob("*.whl"))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = parser.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        for requirement, member in SOURCES.items():
            wheel = _download(requirement, Path(tmp) / requirement.split("==")[0])
            raw = zipfile.ZipFile(wheel).read(member)
            if member.endswith("churn.csv"):
                (args.out / "telco_churn.csv").write_bytes(raw)
            else:
                frame = pd.read_csv(io.BytesIO(raw), header=None, names=ADULT_COLUMNS,
                                    skipinitialspace=True)
                frame.to_csv(args.out / "adult.csv", index=False)
    print(f"wrote {sorted(p.name for p in args.out.glob('*.csv'))} to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
