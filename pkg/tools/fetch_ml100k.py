"""Materialise MovieLens-100K in its canonical ``u.data`` / ``u.user`` / ``u.item`` layout.

The sandbox cannot reach grouplens.org, but the RecBole wheel on PyPI ships the
full ML-100K dump as "atomic" files.  This script downloads that wheel with pip
and rewrites the three files in the original MovieLens format so that
``sideshill.load_dataset(path, "ml100k")`` can read them.

    python tools/fetch_ml100k.py data/ml-100k
"""
import glob
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/ml-100k"


def _rows(text):
    lines = text.splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def convert(wheel, dest):
    dest.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        inter = _rows(zf.read(PREFIX + ".inter").decode("utf-8"))
        users = _rows(zf.read(PREFIX + ".user").decode("utf-8"))
        items = _rows(zf.read(PREFIX + ".item").decode("utf-8"))

    with open(dest / "u.data", "w", encoding="latin-1") as fh:
        for u, i, r, t in inter:
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(dest / "u.user", "w", encoding="latin-1") as fh:
        for u, age, gender, occ, zipcode in users:
            fh.write(f"{u}|{age}|{gender}|{occ}|{zipcode}\n")
    with open(dest / "u.item", "w", encoding="latin-1", errors="replace") as fh:
        for row in items:
            iid, title, year = row[0], row[1], row[2]
            classes = row[3].split() if len(row) > 3 else []
            flags = "|".join("1" if g in classes else "0" for g in GENRES)
            date = f"01-Jan-{year}" if year.strip().isdigit() else ""
            fh.write(f"{iid}|{title}|{date}|||{flags}\n")


def main(argv):
    dest = Path(argv[1] if len(argv) > 1 else "data/ml-100k")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-d", tmp],
            check=True,
        )
        convert(glob.glob(f"{tmp}/*.whl")[0], dest)
    print(f"wrote ML-100K to {dest}")


if __name__ == "__main__":
    main(sys.argv)
