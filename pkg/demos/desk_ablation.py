"""Desk-profile bunny runs behind the end-to-end checks: with and without
touches, without hull pruning, and with five views.

    python demos/desk_ablation.py work/ablation [variant ...]

Each line reports wall time, object Chamfer distance and image metrics.
The 'touch' variant prints the values recorded in tests/golden/desk_bunny.json.
"""
import json
import sys
import time

from vtsplat.pipeline import PipelineConfig, Workspace, run_all


def variants(root):
    shared = f"{root}/touch/data/manifest.json"
    return {
        "touch": ({}, False),
        "no_touch": ({"dataset": shared}, True),
        "no_prune": ({"dataset": shared, "train": {"hull_pruning": False}}, True),
        "five_views": ({"oracle": {"n_views": 5}}, True),
    }


def main(root, names):
    table = variants(root)
    for name in names or table:
        overrides, no_touch = table[name]
        cfg = PipelineConfig.for_profile("desk", **overrides)
        t = time.perf_counter()
        report = run_all(Workspace(f"{root}/{name}", cfg), no_touch=no_touch)
        print(f"{name:11s} {time.perf_counter() - t:6.0f} s  CD {report.chamfer_mm:.4f} mm  "
              f"{json.dumps(report.summary())}  gaussians {report.n_gaussians}  config {cfg.hash()}", flush=True)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "work/ablation", sys.argv[2:])
