"""Single command-line entry point.

Subcommands: gen-data, train, eval, ablate, probe, rollout, plot. Every
command resolves a RunConfig (defaults + optional --config file + --set
overrides), writes the resolved config into its output directory, and
exits 0 only when all validations pass.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_resolved


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--json-summary", default=None, help="write a machine-readable summary here")


def _resolve(args) -> RunConfig:
    return load_config(args.config, args.sets)


def _summary(args, payload: dict) -> None:
    if args.json_summary:
        Path(args.json_summary).write_text(json.dumps(payload, indent=1, sort_keys=True))


def cmd_gen_data(args) -> int:
    from .dataset import build_dataset
    mix = {}
    if args.mix:
        for part in args.mix.split(","):
            k, v = part.split("=")
            mix[k.strip()] = float(v)
    manifest = build_dataset(args.scenes, args.seed, args.out, mix=mix)
    print(f"wrote {manifest['n_scenes']} scenes, {manifest['total_records']} records -> {args.out}")
    for task, n in sorted(manifest["counts"].items()):
        print(f"  {task}: {n}")
    _summary(args, manifest)
    return 0


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .trainer import run_recipe, recipe_stages
    from .params import load_checkpoint
    cfg = _resolve(args)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    cfg.validate()
    if args.stage != "all":
        return _train_single_stage(cfg, int(args.stage), args)
    result = run_recipe(cfg, log_every=args.log_every)
    print(f"recipe done -> {result.checkpoints['final']}")
    _summary(args, {"checkpoints": {k: str(v) for k, v in result.checkpoints.items()},
                    "batch_stream_sha": result.batch_stream_sha})
    return 0


def _train_single_stage(cfg: RunConfig, stage_id: int, args) -> int:
    """Run one stage, resuming from the previous stage's checkpoint in out_dir."""
    from .dataset import load_dataset
    from .model import JointModel, config_from_meta
    from .params import load_checkpoint, load_into_state, save_checkpoint
    from .trainer import BatchBuilder, recipe_stages, run_stage, write_report
    from .vocab import Vocabulary
    if cfg.mode not in ("depth", "rgb"):
        print(f"--stage applies to staged modes only (mode={cfg.mode})", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg, out)
    dataset = load_dataset(cfg.data_dir)
    vocab = Vocabulary.from_file(dataset.root / "vocab.txt")
    stages = {s.stage_id: s for s in recipe_stages(cfg)}
    if stage_id not in stages:
        print(f"unknown stage {stage_id}", file=sys.stderr)
        return 2
    from .model import desk_model_config, config_to_meta
    channels = 3 if cfg.mode == "rgb" else 1
    model_cfg = desk_model_config(len(vocab), channels=channels, dim=cfg.dim,
                                  layers=cfg.layers, heads=cfg.heads)
    model = JointModel(model_cfg)
    model.init_parameters(cfg.seed)
    state = model.build_state()
    offset = 0
    if stage_id > 1:
        prev = out / f"stage{stage_id - 1}.ckpt"
        if not prev.exists():
            print(f"stage {stage_id} needs {prev} from the previous stage", file=sys.stderr)
            return 2
        ckpt = load_checkpoint(prev)
        if ckpt.meta.get("vocab_sha256") != vocab.sha256():
            print("vocabulary hash mismatch with previous-stage checkpoint", file=sys.stderr)
            return 2
        load_into_state(ckpt, state)
        for k in range(1, stage_id):
            s = stages[k].steps
            offset += s if isinstance(s, int) else 0
    train_scenes, _ = dataset.split(cfg.eval_frac)
    builder = BatchBuilder(train_scenes, vocab, channels=channels)
    records, _ = run_stage(model, state, builder, stages[stage_id], cfg.seed, offset,
                           grad_clip=cfg.grad_clip, log_every=args.log_every)
    path = out / f"stage{stage_id}.ckpt"
    from .model import config_to_meta as _ctm
    save_checkpoint(state, path, meta={"vocab_sha256": vocab.sha256(), "seed": str(cfg.seed),
                                       "mode": cfg.mode, "scale": cfg.scale,
                                       "stage": str(stage_id), **_ctm(model_cfg)})
    write_report(out / f"stage{stage_id}_report.csv", records)
    print(f"stage {stage_id} done -> {path}")
    _summary(args, {"checkpoint": str(path)})
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .evaluation import eval_depth, eval_qa, write_qa_csv
    from .model import JointModel
    from .params import file_hash, load_checkpoint, load_into_state
    from .model import config_from_meta
    from .vocab import Vocabulary
    cfg = _resolve(args)
    if args.data:
        cfg.data_dir = args.data
    dataset = load_dataset(cfg.data_dir)
    vocab = Vocabulary.from_file(dataset.root / "vocab.txt")
    ckpt = load_checkpoint(args.checkpoint)
    model = JointModel(config_from_meta(ckpt.meta))
    state = model.build_state()
    load_into_state(ckpt, state)
    _, eval_scenes = dataset.split(cfg.eval_frac)
    qa = eval_qa(model, eval_scenes, vocab, expected_vocab_sha=ckpt.meta.get("vocab_sha256"))
    print(f"{'task':12s} {'n':>5s} {'acc':>7s} {'chance':>7s}")
    for task in sorted(qa.per_task):
        d = qa.per_task[task]
        print(f"{task:12s} {d['n']:5d} {d['accuracy']:7.3f} {d['chance']:7.3f}")
    payload = {"qa": qa.per_task, "checkpoint_sha": file_hash(args.checkpoint),
               "manifest_sha": file_hash(Path(cfg.data_dir) / "manifest.txt")}
    if model.cfg.depth.channels == 1:
        depth = eval_depth(model, eval_scenes, steps=cfg.sampler_steps)
        print(f"depth: AbsRel={depth.abs_rel:.4f} RMSE={depth.rmse:.4f} over {depth.n_scenes} scenes")
        payload["depth"] = {"abs_rel": depth.abs_rel, "rmse": depth.rmse}
    if args.out:
        save_resolved(cfg, args.out)
        write_qa_csv(Path(args.out) / "qa_eval.csv", qa,
                     meta={"checkpoint_sha": payload["checkpoint_sha"],
                           "manifest_sha": payload["manifest_sha"]})
    if args.dump_depth:
        from .evaluation import export_depth_maps
        export_depth_maps(model, eval_scenes[:args.dump_depth_n], args.dump_depth,
                          steps=cfg.sampler_steps)
        print(f"wrote {min(args.dump_depth_n, len(eval_scenes))} generated depth maps "
              f"(PFM + bounds sidecars) -> {args.dump_depth}")
    _summary(args, payload)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    cfg = _resolve(args)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    cfg.scale = args.scale
    modes = tuple(m.strip() for m in args.modes.split(","))
    seeds = _parse_seeds(args.seeds)
    report = run_ablation(cfg, seeds, modes=modes, log_every=args.log_every)
    print(f"{'mode':8s} {'spatial':>8s} {'dist':>8s} {'absrel':>8s}")
    for mode in modes:
        print(f"{mode:8s} {report.mean(mode, 'spatial_acc'):8.3f} "
              f"{report.mean(mode, 'dist_acc'):8.3f} {report.mean(mode, 'abs_rel'):8.3f}")
    _summary(args, {m: {"spatial": report.mean(m, "spatial_acc"),
                        "dist": report.mean(m, "dist_acc")} for m in modes})
    return 0


def cmd_probe(args) -> int:
    from .ablation import run_probe
    cfg = _resolve(args)
    if args.data:
        cfg.data_dir = args.data
    seeds = _parse_seeds(args.seeds)
    results = run_probe(args.a, args.b, cfg, seeds, out_dir=args.out, log_every=args.log_every)
    by_ckpt: dict[str, list[float]] = {}
    for r in results:
        by_ckpt.setdefault(r.checkpoint, []).append(r.abs_rel)
    for name, vals in by_ckpt.items():
        print(f"{name}: probe AbsRel mean {sum(vals)/len(vals):.4f} over {len(vals)} seeds")
    _summary(args, {name: sum(v)/len(v) for name, v in by_ckpt.items()})
    return 0


def cmd_rollout(args) -> int:
    from .model import JointModel, config_from_meta
    from .params import load_checkpoint, load_into_state
    from .vla import rollout_policy, write_rollout_csv, _vocab_for
    cfg = _resolve(args)
    if args.data:
        cfg.data_dir = args.data
    seeds = _parse_seeds(args.seeds)
    ckpt = load_checkpoint(args.checkpoint)
    model = JointModel(config_from_meta(ckpt.meta))
    state = model.build_state()
    load_into_state(ckpt, state)
    vocab = _vocab_for(cfg, ckpt.require_meta("vocab_sha256"))
    log_dir = Path(args.out) / "episodes" if args.out else None
    summary = rollout_policy(model, vocab, [EVAL_SEED_BASE + s for s in seeds],
                             horizon=cfg.rollout_horizon, sampler_steps=args.sampler_steps,
                             log_dir=log_dir)
    print(f"success_rate={summary.success_rate:.3f} mean_progress={summary.mean_progress:.3f} "
          f"over {len(summary.per_episode)} episodes")
    if args.out:
        save_resolved(cfg, args.out)
        write_rollout_csv(Path(args.out) / "rollout.csv", summary)
    _summary(args, {"success_rate": summary.success_rate,
                    "mean_progress": summary.mean_progress})
    return 0


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; `pip install gensup[plot]`", file=sys.stderr)
        return 2
    import csv as _csv
    rows = list(_csv.DictReader(open(args.report)))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("ce_loss", "flow_loss", "total_loss", "action_loss"):
        if key in rows[0] and any(r.get(key) not in ("", "nan") for r in rows):
            vals = [float(r[key]) if r[key] not in ("", "nan") else float("nan") for r in rows]
            ax.plot(steps, vals, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


EVAL_SEED_BASE = 10_000_000


def _parse_seeds(spec: str) -> list[int]:
    """"0,1,2" or "0..99" (inclusive range)."""
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s.strip() != ""]


def _config_key_help() -> str:
    from dataclasses import fields
    lines = ["config keys (for --config files and --set overrides; 0 = scale default):"]
    cfg = RunConfig()
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        lines.append(f"  {f.name}={getattr(cfg, f.name)}")
    lines.append("  (alias: lambda -> lam)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gensup", description=__doc__,
                                 epilog=_config_key_help(),
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="synthesize a scene/QA dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mix", default="", help="task weights, e.g. count=2,rel_dist=3")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the training recipe")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log-every", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (QA accuracy + depth metrics)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--dump-depth", default=None, metavar="DIR",
                   help="export generated depth maps as PFM with bounds sidecars")
    p.add_argument("--dump-depth-n", type=int, default=8)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="depth vs rgb vs e2e comparison")
    p.add_argument("--modes", default="depth,rgb,e2e")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--scale", default="ablation")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log-every", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("probe", help="frozen-backbone feature probe on two checkpoints")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log-every", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("rollout", help="closed-loop policy evaluation in the toy env")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", default="0..99")
    p.add_argument("--sampler-steps", type=int, default=10)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("plot", help="plot loss curves from a report CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default="losses.png")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # non-zero exit with a message, not a stack dump
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
