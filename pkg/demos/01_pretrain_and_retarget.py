"""Pre-train on two synthetic humanoids, then retarget a clip and score it.

    python demos/01_pretrain_and_retarget.py [--steps 200]
"""
import argparse

from semretarget import (TrainConfig, evaluate, make_synthetic_character, make_synthetic_motion,
                         pretrain, retarget)

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=60)
args = ap.parse_args()

slim = make_synthetic_character(seed=0, name="slim")
broad = make_synthetic_character(seed=1, name="broad", proportions={"torso_radius": 0.2})
print(f"{slim.name}: height {slim.height:.2f} m, {slim.mesh.n_vertices} vertices")
print(f"{broad.name}: height {broad.height:.2f} m, {broad.mesh.n_vertices} vertices")

# unpaired data: each character only ever sees its own clips
clips = [[make_synthetic_motion(c.skeleton, frames=128, seed=10 * i + j) for j in range(4)]
         for i, c in enumerate((slim, broad))]
cfg = TrainConfig(stage="pretrain", epochs=1000, max_steps=args.steps, seed=0)
res = pretrain([slim, broad], clips, cfg)
first, last = res.step_losses[0], res.step_losses[-1]
for key in ("rec", "cyc", "jdm"):
    print(f"{key:>4}: {first[key]:10.1f} -> {last[key]:10.1f}")

clip = make_synthetic_motion(slim.skeleton, frames=32, seed=99)
out = retarget(res.model, clip, slim, broad)
print(f"retargeted {out.frames} frames onto {broad.name}")

report = evaluate(res.model, slim, broad, [clip], image_size=64)
print(f"MSE {report.mse_global:.4f}  local {report.mse_local:.4f}  "
      f"pen {report.pen_percent:.2f}%  SCL {report.scl:.3f}  FID {report.fid:.3f}")
