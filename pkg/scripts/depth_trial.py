"""Quick depth-learning trial: stages 1-2 on a small dataset, with
foreground/background loss splits and train-vs-eval AbsRel diagnostics."""

import argparse
import time

import numpy as np
import torch

torch.set_num_threads(1)

from gensup.config import RunConfig
from gensup.dataset import load_dataset
from gensup.depth_head import normalize_depth, sample_depth
from gensup.flow import denormalize_from_unit, flow_interpolate
from gensup.model import JointModel, desk_model_config
from gensup.rng import RngStream
from gensup.trainer import BatchBuilder, recipe_stages, run_stage
from gensup.vocab import Vocabulary


def absrel(model, scenes, steps=20, seed=123):
    errs = []
    with torch.no_grad():
        for i, e in enumerate(scenes):
            img = torch.from_numpy(e.rgb).unsqueeze(0)
            c = model.connector(model.backbone.forward_visual(img))
            gen = sample_depth(model.depth_head, c, steps, RngStream(seed, f"eval/{i}"))
            tgt = normalize_depth(torch.from_numpy(e.depth_target()))
            pred = denormalize_from_unit(gen[0], tgt.d_min, tgt.d_max)
            gt = torch.from_numpy(e.depth_target())
            fg = torch.from_numpy(e.foreground_target())
            if fg.any():
                errs.append(((pred - gt).abs() / gt)[fg].mean().item())
    return float(np.mean(errs))


def fg_bg_loss(model, scenes, seed=9):
    """Velocity-error split at t=0.5 over foreground/background pixels."""
    fg_errs, bg_errs = [], []
    rng = RngStream(seed, "diag")
    with torch.no_grad():
        for i, e in enumerate(scenes[:16]):
            img = torch.from_numpy(e.rgb).unsqueeze(0)
            c = model.connector(model.backbone.forward_visual(img))
            tgt = normalize_depth(torch.from_numpy(e.depth_target())).depth_norm.unsqueeze(0)
            fs = flow_interpolate(tgt, torch.tensor([0.5]), rng=rng.child(str(i)))
            pred = model.depth_head(fs.x_t, 0.5, c)
            err = (pred - fs.target_velocity) ** 2
            fg = torch.from_numpy(e.foreground_target()).unsqueeze(0)
            fg_errs.append(err[fg].mean().item())
            bg_errs.append(err[~fg].mean().item())
    return float(np.mean(fg_errs)), float(np.mean(bg_errs))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="/tmp/ds120")
    ap.add_argument("--s1", type=int, default=200)
    ap.add_argument("--s2", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = load_dataset(args.data)
    vocab = Vocabulary.from_file(ds.root / "vocab.txt")
    train, evals = ds.split()
    builder = BatchBuilder(train, vocab)
    model = JointModel(desk_model_config(len(vocab)))
    model.init_parameters(args.seed)
    state = model.build_state()

    from dataclasses import replace
    stages = recipe_stages(RunConfig(seed=args.seed))
    s1 = replace(stages[0], steps=args.s1)
    s2 = replace(stages[1], steps=args.s2)

    t0 = time.time()
    r1, _ = run_stage(model, state, builder, s1, seed=args.seed, global_offset=0)
    print("stage1 flow %.3f -> %.3f (%.0fs)" % (
        r1[0]["flow_loss"], np.mean([r["flow_loss"] for r in r1[-20:]]), time.time() - t0))
    t0 = time.time()
    r2, _ = run_stage(model, state, builder, s2, seed=args.seed, global_offset=args.s1)
    print("stage2 flow %.3f -> %.3f (%.0fs)" % (
        np.mean([r["flow_loss"] for r in r2[:20]]), np.mean([r["flow_loss"] for r in r2[-20:]]),
        time.time() - t0))
    fg, bg = fg_bg_loss(model, train)
    print("velocity err at t=.5  train fg=%.4f bg=%.4f" % (fg, bg))
    print("AbsRel train=%.4f eval=%.4f" % (absrel(model, train[:19]), absrel(model, evals)))


if __name__ == "__main__":
    main()
