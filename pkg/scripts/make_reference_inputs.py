"""Write a reference scene, its rendered image and a matching pipeline config.

    python scripts/make_reference_inputs.py --seed 0 --out-dir out/
    emitterloc locate --image out/field.pgm --config out/config.json --out-prefix out/result
"""

import argparse
import json
from pathlib import Path

from emitterloc.image_model import save_pgm
from emitterloc.pipeline import PipelineConfig
from emitterloc.synthesis import reference_field_scene, render_field


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rotation", type=float, default=0.0)
    ap.add_argument("--pitch-nm", type=float, default=50_000.0)
    ap.add_argument("--out-dir", type=Path, default=Path("reference_inputs"))
    args = ap.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    scene = reference_field_scene(args.seed, rotation_deg=args.rotation, pitch_nm=args.pitch_nm)
    cfg = PipelineConfig(tuple((round(m.x), round(m.y)) for m in scene.marks), args.pitch_nm)
    (args.out_dir / "scene.json").write_text(scene.to_json() + "\n")
    (args.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    save_pgm(render_field(scene), args.out_dir / "field.pgm")
    print(f"wrote scene.json, config.json and field.pgm to {args.out_dir}")


if __name__ == "__main__":
    main()
