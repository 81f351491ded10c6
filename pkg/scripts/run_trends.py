"""Reproduce the trend experiments: supervision-target ablation, feature
probe, and the VLA depth-joint vs depth-frozen comparison.

Assumes a dataset and a trained desk recipe already exist (see
scripts/run_pipeline.py or the README). Heavy: several hours on CPU.
"""

import argparse
from pathlib import Path

import torch

torch.set_num_threads(torch.get_num_threads())

from gensup.ablation import run_ablation, run_probe
from gensup.config import RunConfig
from gensup.params import load_checkpoint, load_into_state
from gensup.model import JointModel, config_from_meta
from gensup.trainer import run_recipe
from gensup.vla import run_vla_training, rollout_policy, write_rollout_csv, _vocab_for


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--recipe", required=True, help="out dir of a desk-scale depth recipe")
    ap.add_argument("--out", default="runs/trends")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)

    base = RunConfig(data_dir=args.data, scale="ablation")
    report = run_ablation(base, seeds, out_dir=out / "ablation", log_every=200)
    for mode in ("depth", "rgb", "e2e"):
        print(f"{mode}: spatial={report.mean(mode, 'spatial_acc'):.3f} "
              f"dist={report.mean(mode, 'dist_acc'):.3f}")

    sft_cfg = RunConfig(data_dir=args.data, out_dir=str(out / "sft"), mode="sft")
    sft = run_recipe(sft_cfg, log_every=500)
    probe_cfg = RunConfig(data_dir=args.data)
    run_probe(Path(args.recipe) / "stage3.ckpt", sft.checkpoints["final"], probe_cfg,
              seeds, out_dir=out / "probe", log_every=400)

    for variant in ("joint", "nodepth"):
        for seed in seeds:
            cfg = RunConfig(data_dir=args.data, seed=seed)
            vdir = out / f"vla-{variant}-{seed}"
            res = run_vla_training(cfg, Path(args.recipe) / "stage3.ckpt", vdir,
                                   variant=variant, log_every=500)
            ckpt = load_checkpoint(res.checkpoint)
            model = JointModel(config_from_meta(ckpt.meta))
            state = model.build_state()
            load_into_state(ckpt, state)
            vocab = _vocab_for(cfg, ckpt.require_meta("vocab_sha256"))
            summary = rollout_policy(model, vocab, [10_000_000 + i for i in range(100)],
                                     sampler_steps=10)
            write_rollout_csv(vdir / "rollout.csv", summary)
            print(f"vla[{variant} seed {seed}]: success={summary.success_rate:.3f} "
                  f"progress={summary.mean_progress:.3f}")


if __name__ == "__main__":
    main()
