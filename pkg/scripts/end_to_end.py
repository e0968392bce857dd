"""Run the full pipeline on many seeded reference fields and score it against truth.

    python scripts/end_to_end.py --seeds 100
"""

import argparse
import time

import numpy as np

from emitterloc.pipeline import PipelineConfig, run_pipeline
from emitterloc.synthesis import reference_field_scene, render_field


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--rotation", type=float, default=0.0, help="scene rotation in degrees")
    ap.add_argument("--pitch-nm", type=float, default=50_000.0)
    args = ap.parse_args()

    start = time.perf_counter()
    z, sigmas, missing = [], [], 0
    for seed in range(args.seeds):
        scene = reference_field_scene(seed, rotation_deg=args.rotation, pitch_nm=args.pitch_nm)
        cfg = PipelineConfig(tuple((round(m.x), round(m.y)) for m in scene.marks), args.pitch_nm)
        res = run_pipeline(cfg, render_field(scene))

        marks = scene.truth_positions("marks")
        truth = (scene.truth_positions("emitters") - marks.mean(axis=0)) * scene.nanometers_per_pixel / 1000
        truth[:, 1] *= -1
        th = np.deg2rad(args.rotation)
        truth = truth @ np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]).T  # back to the mark frame

        recs = [r for r in res.records if r.converged]
        missing += len(truth) - len(recs)
        if not recs:
            continue
        pos = np.array([(r.x_um, r.y_um) for r in recs])
        for t in truth:
            r = recs[int(np.argmin(np.hypot(*(pos - t).T)))]
            z.append(((r.x_um - t[0]) * 1000 / r.dx_nm, (r.y_um - t[1]) * 1000 / r.dy_nm))
            sigmas += [r.dx_nm, r.dy_nm]
    z = np.array(z)
    inside = np.mean(np.all(np.abs(z) <= 3, axis=1))
    print(f"fields: {args.seeds}  emitters scored: {len(z)}  missing: {missing}")
    print(f"within 3 sigma: {100 * inside:.1f}%")
    print(f"normalized error std (x, y): {z[:, 0].std():.3f}, {z[:, 1].std():.3f}")
    print(f"combined sigma: min {min(sigmas):.2f}  mean {np.mean(sigmas):.2f}  max {max(sigmas):.2f} nm")
    print(f"elapsed: {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
