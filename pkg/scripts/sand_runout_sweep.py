#!/usr/bin/env python3
"""Sweep the sand friction angle and measure column collapse runout.

Runs the bundled sand column scene for several friction angles and prints
the mean final horizontal distance of the grains from the column axis.
Steeper internal friction should give shorter runout.
"""

import argparse
from dataclasses import replace

import numpy as np

from mphys.mpm import simulate
from mphys.scene import parse_scene_file


def runout(scene, theta: float) -> float:
    mats = {0: replace(scene.materials[0], theta_fric=theta)}
    traj = simulate(replace(scene, materials=mats))
    x = traj.positions[-1]
    cx, cy, _ = scene.sources[0].center
    return float(np.hypot(x[:, 0] - cx, x[:, 1] - cy).mean())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", default="scenes/sand_runout.json")
    parser.add_argument("--angles", type=float, nargs="+",
                        default=[27.0, 36.0, 45.0])
    args = parser.parse_args()

    scene = parse_scene_file(args.scene)
    for theta in args.angles:
        print(f"theta = {theta:5.1f} deg  mean runout = {runout(scene, theta):.4f}")


if __name__ == "__main__":
    main()
