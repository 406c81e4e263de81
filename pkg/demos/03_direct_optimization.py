"""Repair an arm-in-torso pose by optimising joint angles directly.

    python demos/03_direct_optimization.py
"""
import torch

from semretarget import TrainConfig, direct_optimize, make_synthetic_character, make_synthetic_motion
from semretarget.training import PairContext

src = make_synthetic_character(seed=0, name="a")
tgt = make_synthetic_character(seed=1, name="fat", proportions={"torso_radius": 0.2, "shoulder_gap": 0.0})
cfg = TrainConfig(stage="finetune", image_size=32, direct_iters=100)

pose = make_synthetic_motion(tgt.skeleton, frames=4, seed=3, poses=["arms_in"] * 3)
reference = make_synthetic_motion(src.skeleton, frames=4, seed=3, poses=["arms_in"] * 3).numpy()
ctx = PairContext(src, tgt, cfg, dtype=torch.float64)
E_ref = ctx.source_embeddings(torch.as_tensor(reference.rot6d[::4]),
                              torch.as_tensor(reference.root_pos[::4]))

res = direct_optimize(pose, tgt, E_ref, cfg)
for it in range(0, len(res.losses), 10):
    print(f"iter {it:3d}  loss {res.losses[it]:9.4f}  best {res.best_losses[it]:9.4f}")
print(f"best iterate {res.best_iteration}, loss {res.best_losses[-1]:.4f}")
