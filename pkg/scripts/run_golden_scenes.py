#!/usr/bin/env python3
"""Simulate the bundled golden scenes and check their trajectory hashes.

Each golden scene is run with deterministic kernels and the sha256 of the
resulting trajectory file is compared against scenes/golden_hashes.json.
Exit status is nonzero if any hash differs.
"""

import argparse
import hashlib
import json
import sys
import tempfile
from pathlib import Path

from mphys.cli import main as cli_main

ROOT = Path(__file__).resolve().parent.parent
SCENES = ROOT / "scenes"


def run(scene_name: str, out_dir: Path) -> str:
    out = out_dir / scene_name
    code = cli_main([
        "simulate", "--scene", str(SCENES / f"{scene_name}.json"),
        "--out", str(out), "--deterministic",
    ])
    if code != 0:
        raise SystemExit(f"{scene_name}: simulate exited with {code}")
    return hashlib.sha256((out / "trajectory.mphy").read_bytes()).hexdigest()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--update", action="store_true",
                        help="rewrite golden_hashes.json with the observed hashes")
    args = parser.parse_args()

    expected = json.loads((SCENES / "golden_hashes.json").read_text())
    observed = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name in expected:
            observed[name] = run(name, Path(tmp))
            status = "ok" if observed[name] == expected[name] else "MISMATCH"
            print(f"{name}: {observed[name]} [{status}]")

    if args.update:
        (SCENES / "golden_hashes.json").write_text(
            json.dumps(observed, indent=2) + "\n"
        )
        print("golden_hashes.json updated")
        return 0
    return 0 if observed == expected else 1


if __name__ == "__main__":
    sys.exit(main())
