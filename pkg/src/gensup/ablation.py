"""Supervision-target ablation and the frozen-backbone feature probe.

The ablation trains the depth-target recipe, the RGB-regeneration variant,
and the single-phase end-to-end variant on identical data, seeds, and step
budgets, then compares spatial-QA accuracy. The probe freezes a trained
backbone, fits a fresh connector + generator on its features (stages 1-2
only), and reports held-out AbsRel: lower means the features carry more
scene structure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig, dump_config
from .dataset import LoadedDataset, load_dataset
from .evaluation import eval_depth, eval_qa
from .model import JointModel, config_from_meta, desk_model_config
from .params import file_hash, load_checkpoint, load_into_state
from .qa import DISTANCE_TASKS, SPATIAL_TASKS
from .trainer import BatchBuilder, RecipeResult, run_recipe, run_stage, recipe_stages
from .vocab import Vocabulary

ABLATION_MODES = ("depth", "rgb", "e2e")


@dataclass
class AblationRow:
    mode: str
    seed: int
    spatial_acc: float
    dist_acc: float
    count_acc: float
    rel_dist_acc: float
    abs_rel: float
    batch_stream_sha: str
    checkpoint_sha: str


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)
    config_diffs: dict[str, str] = field(default_factory=dict)

    def mean(self, mode: str, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if r.mode == mode]
        return sum(vals) / len(vals) if vals else float("nan")


def _config_diff(base: str, other: str) -> str:
    base_lines = dict(l.split("=", 1) for l in base.splitlines())
    out = []
    for line in other.splitlines():
        k, v = line.split("=", 1)
        if base_lines.get(k) != v:
            out.append(f"{k}: {base_lines.get(k)} -> {v}")
    return "; ".join(out) if out else "(identical)"


def run_ablation(base_cfg: RunConfig, seeds, modes=ABLATION_MODES,
                 out_dir: str | Path | None = None,
                 dataset: LoadedDataset | None = None, log_every: int = 0) -> AblationReport:
    """Train every (mode, seed) pair under identical budgets and data."""
    out = Path(out_dir or base_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(base_cfg.data_dir)
    vocab = Vocabulary.from_file(dataset.root / "vocab.txt")
    report = AblationReport()
    base_dump = None
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        for seed in seeds:
            cfg = replace(base_cfg, mode=mode, seed=int(seed),
                          out_dir=str(out / f"{mode}-seed{seed}"))
            dump = dump_config(cfg)
            if base_dump is None:
                base_dump = dump
                report.config_diffs[f"{mode}-seed{seed}"] = "(baseline)"
            else:
                report.config_diffs[f"{mode}-seed{seed}"] = _config_diff(base_dump, dump)
            result = run_recipe(cfg, dataset=dataset, log_every=log_every)
            row = _evaluate_run(cfg, result, dataset, vocab)
            report.rows.append(row)
            if log_every:
                print(f"[ablate] {mode} seed {seed}: spatial={row.spatial_acc:.3f} "
                      f"dist={row.dist_acc:.3f} absrel={row.abs_rel:.3f}")
    _write_ablation_csv(out / "ablation.csv", report)
    return report


def _evaluate_run(cfg: RunConfig, result: RecipeResult, dataset: LoadedDataset,
                  vocab: Vocabulary) -> AblationRow:
    ckpt = load_checkpoint(result.checkpoints["final"])
    model = JointModel(config_from_meta(ckpt.meta))
    state = model.build_state()
    load_into_state(ckpt, state)
    _, eval_scenes = dataset.split(cfg.eval_frac)
    qa = eval_qa(model, eval_scenes, vocab, expected_vocab_sha=ckpt.meta.get("vocab_sha256"))
    abs_rel = float("nan")
    if model.cfg.depth.channels == 1:
        abs_rel = eval_depth(model, eval_scenes, steps=cfg.sampler_steps).abs_rel
    return AblationRow(
        mode=cfg.mode, seed=cfg.seed,
        spatial_acc=qa.mean_accuracy(SPATIAL_TASKS),
        dist_acc=qa.mean_accuracy(DISTANCE_TASKS),
        count_acc=qa.accuracy("count"),
        rel_dist_acc=qa.accuracy("rel_dist"),
        abs_rel=abs_rel,
        batch_stream_sha=result.batch_stream_sha,
        checkpoint_sha=file_hash(result.checkpoints["final"]),
    )


def _write_ablation_csv(path: Path, report: AblationReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "seed", "spatial_acc", "dist_acc", "count_acc",
                    "rel_dist_acc", "abs_rel", "batch_stream_sha", "checkpoint_sha"])
        for r in report.rows:
            w.writerow([r.mode, r.seed, f"{r.spatial_acc:.4f}", f"{r.dist_acc:.4f}",
                        f"{r.count_acc:.4f}", f"{r.rel_dist_acc:.4f}", f"{r.abs_rel:.4f}",
                        r.batch_stream_sha[:16], r.checkpoint_sha[:16]])
        for name, diff in report.config_diffs.items():
            w.writerow([f"#config-diff {name}", diff])


# ---------------------------------------------------------------------------
# feature probe

@dataclass
class ProbeResult:
    checkpoint: str
    seed: int
    abs_rel: float


def probe_features(ckpt_path: str | Path, dataset: LoadedDataset, probe_seed: int,
                   base_cfg: RunConfig, log_every: int = 0) -> ProbeResult:
    """Freeze the checkpoint's backbone, train a fresh connector + generator
    (stages 1-2 of the recipe), report held-out AbsRel of the probe."""
    ckpt = load_checkpoint(ckpt_path)
    src_cfg = config_from_meta(ckpt.meta)
    model_cfg = desk_model_config(src_cfg.backbone.vocab_size, channels=1,
                                  dim=src_cfg.backbone.dim, layers=src_cfg.backbone.layers,
                                  heads=src_cfg.backbone.heads)
    if (model_cfg.backbone.dim, model_cfg.backbone.layers) != (src_cfg.backbone.dim, src_cfg.backbone.layers):
        raise ValueError("probe checkpoints must share the backbone architecture")
    model = JointModel(model_cfg)
    model.init_parameters(probe_seed)
    state = model.build_state()
    load_into_state(ckpt, state, groups=["backbone"])
    vocab = Vocabulary.from_file(dataset.root / "vocab.txt")
    train_scenes, eval_scenes = dataset.split(base_cfg.eval_frac)
    builder = BatchBuilder(train_scenes, vocab, channels=1)
    cfg = replace(base_cfg, mode="depth", seed=probe_seed)
    offset = 0
    for stage in recipe_stages(cfg)[:2]:
        records, _ = run_stage(model, state, builder, stage, seed=probe_seed,
                               global_offset=offset, grad_clip=cfg.grad_clip,
                               log_every=log_every)
        offset += len(records)
    res = eval_depth(model, eval_scenes, steps=cfg.sampler_steps)
    return ProbeResult(checkpoint=str(ckpt_path), seed=probe_seed, abs_rel=res.abs_rel)


def run_probe(ckpt_a: str | Path, ckpt_b: str | Path, base_cfg: RunConfig, seeds,
              out_dir: str | Path | None = None, dataset: LoadedDataset | None = None,
              log_every: int = 0) -> list[ProbeResult]:
    if dataset is None:
        dataset = load_dataset(base_cfg.data_dir)
    results = []
    for path in (ckpt_a, ckpt_b):
        for seed in seeds:
            results.append(probe_features(path, dataset, int(seed), base_cfg, log_every=log_every))
            if log_every:
                r = results[-1]
                print(f"[probe] {Path(r.checkpoint).name} seed {r.seed}: absrel={r.abs_rel:.4f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "probe.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["checkpoint", "seed", "abs_rel"])
            for r in results:
                w.writerow([r.checkpoint, r.seed, f"{r.abs_rel:.4f}"])
    return results
