"""Fine-tune a pre-trained model for one character pair.

The target has a wide torso and no shoulder gap, so a plain retarget pushes
its arms into the body. Fine-tuning trades off penetration against semantic
consistency of the rendered silhouettes.

    python demos/02_finetune_pair.py [--epochs 25]
"""
import argparse
import copy

import torch

from semretarget import (TrainConfig, finetune, make_synthetic_character, make_synthetic_motion,
                         pretrain)
from semretarget.training import PairContext, retarget_tensors

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=5)
ap.add_argument("--pretrain-steps", type=int, default=60)
args = ap.parse_args()

src = make_synthetic_character(seed=0, name="a")
tgt = make_synthetic_character(seed=1, name="fat", proportions={"torso_radius": 0.2, "shoulder_gap": 0.0})
clips = [[make_synthetic_motion(c.skeleton, frames=128, seed=10 * i + j) for j in range(4)]
         for i, c in enumerate((src, tgt))]
base = pretrain([src, tgt], clips, TrainConfig(epochs=1000, max_steps=args.pretrain_steps)).model

clip = make_synthetic_motion(src.skeleton, frames=64, seed=100,
                             poses=["arms_in", "arms_down", "arms_in", "hands_front"])
cfg = TrainConfig(stage="finetune", image_size=32, epochs=args.epochs)
ctx = PairContext(src, tgt, cfg)


def scores(model):
    r6 = torch.as_tensor(clip.rot6d, dtype=torch.float32)
    rp = torch.as_tensor(clip.root_pos, dtype=torch.float32)
    with torch.no_grad():
        o6, op = retarget_tensors(model, ctx, r6, rp)
        verts, T = ctx.skin(ctx.tgt, o6, op)
        pen = float(ctx.target_pen(verts, T)) / clip.frames
        E_b = ctx.render_embed(ctx.tgt, ctx.tgt_cams, verts[::4])
        E_a = ctx.source_embeddings(r6[::4], rp[::4])
    return pen, float(((E_a - E_b) ** 2).sum(-1).mean())


print("before:          pen %.4f  SCL %.3f" % scores(base))
full = finetune(copy.deepcopy(base), src, tgt, [clip], cfg,
                on_epoch=lambda e, entry: print(f"  epoch {e:2d} lambda_p {entry['lambda_effective']['pen']:5.2f}"
                                                f"  {entry['losses']}"))
print("full objective:  pen %.4f  SCL %.3f" % scores(full.model))
geo = finetune(copy.deepcopy(base), src, tgt, [clip],
               TrainConfig(stage="finetune", image_size=32, epochs=args.epochs, weights={"sem": 0.0}))
print("penetration only: pen %.4f  SCL %.3f" % scores(geo.model))
