#!/usr/bin/env python3
"""Fetch the regression benchmarks into data/ and write data/manifest.json.

Boston and Concrete come from the rdatasets wheel (pip mirror). The others are
pulled from the UCI archive when it is reachable.
"""
import argparse
import warnings
import glob
import io
import json
import lzma
import pickle
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

import pandas as pd

UCI = {
    "energy": ("https://archive.ics.uci.edu/static/public/242/energy+efficiency.zip", "ENB2012_data.xlsx"),
    "yacht": ("https://archive.ics.uci.edu/static/public/243/yacht+hydrodynamics.zip", "yacht_hydrodynamics.data"),
    "wine": ("https://archive.ics.uci.edu/static/public/186/wine+quality.zip", "winequality-red.csv"),
}

# name -> (rows, cols) of the feature matrix
SHAPES = {
    "boston": (506, 13),
    "concrete": (1030, 8),
    "energy": (768, 8),
    "yacht": (308, 6),
    "wine": (1599, 11),
}


def rdatasets_frame(member):
    wheels = glob.glob(str(Path(tempfile.gettempdir()) / "rdatasets-wheel" / "rdatasets-*.whl"))
    if not wheels:
        dest = Path(tempfile.gettempdir()) / "rdatasets-wheel"
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(dest), "rdatasets"],
                       check=True)
        wheels = glob.glob(str(dest / "rdatasets-*.whl"))
    with zipfile.ZipFile(wheels[0]) as z:
        df = pickle.loads(lzma.decompress(z.read(f"rdatasets/_data/{member}.pkl.compress")))
    return df.drop(columns=["rownames"], errors="ignore")


def fetch_uci(name):
    url, inner = UCI[name]
    with urllib.request.urlopen(url, timeout=20) as r:
        payload = r.read()
    with zipfile.ZipFile(io.BytesIO(payload)) as z:
        raw = z.read(inner)
    if name == "energy":
        df = pd.read_excel(io.BytesIO(raw)).iloc[:, :9]  # X1..X8, Y1 (heating load)
    elif name == "yacht":
        df = pd.read_csv(io.BytesIO(raw), sep=r"\s+", header=None)
    else:
        df = pd.read_csv(io.BytesIO(raw), sep=";")
    return df.dropna()


def load(name):
    if name == "boston":
        return rdatasets_frame("MASS/Boston")  # label medv is last
    if name == "concrete":
        df = rdatasets_frame("modeldata/concrete")
        return df[[c for c in df.columns if c != "compressive_strength"] + ["compressive_strength"]]
    return fetch_uci(name)


def main():
    warnings.simplefilter("ignore", DeprecationWarning)
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"datasets": {}}
    missing = []
    for name, (rows, cols) in SHAPES.items():
        manifest["datasets"][name] = {"path": f"{name}.csv", "label_column": -1, "rows": rows, "cols": cols}
        try:
            df = load(name)
        except Exception as e:  # network or archive failures leave the entry unresolved
            missing.append(name)
            print(f"{name}: unavailable ({e})", file=sys.stderr)
            continue
        if df.shape != (rows, cols + 1):
            raise SystemExit(f"{name}: got shape {df.shape}, expected {(rows, cols + 1)}")
        df.to_csv(out / f"{name}.csv", index=False)
        print(f"{name}: {rows} x {cols} -> {out / (name + '.csv')}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if missing:
        print("missing: " + ", ".join(missing), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
