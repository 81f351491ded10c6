"""Progressive three-stage training recipe.

Stage 1 aligns the connector (flow loss, everything else frozen), stage 2
warms up connector + depth generator, stage 3 unfreezes the backbone and
trains jointly on cross-entropy plus the weighted flow objective. The
"e2e" mode collapses the recipe into one joint phase from scratch with the
same total budget; "sft" is the equal-budget text-only baseline.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_resolved
from .dataset import DEPTH_TARGET_SIZE, LoadedDataset, SceneEntry, load_dataset
from .depth_head import normalize_depth
from .model import JointModel, PAD_ID, config_to_meta, desk_model_config
from .optim import OptimizerConfig, clip_grads_, lr_at, optimizer_step
from .params import ModelState, save_checkpoint, state_hashes
from .rng import RngStream
from .vocab import Vocabulary

REPORT_HEADER = ("step", "stage", "lr", "ce_loss", "flow_loss", "total_loss", "elapsed_s", "seed")

STAGE_TRAINABLE = {1: ("connector",), 2: ("connector", "depth_head"),
                   3: ("backbone", "connector", "depth_head")}
STAGE_LOSSES = {1: ("FLOW",), 2: ("FLOW",), 3: ("CE", "FLOW")}

PAPER_CONSTANTS = {
    "lr": (1e-3, 1e-4, 1e-5),
    "steps": (500, 4000, "one_epoch"),
    "batch": 128,
    "weight_decay": 0.1,
    "warmup": (0.0, 0.0, 0.03),
    "schedule": "cosine",
}
DESK_CONSTANTS = {
    "lr": (1e-3, 2e-3, 5e-4),
    "steps": (200, 1000, 1500),
    "batch": 16,
    "weight_decay": 0.1,
    "warmup": (0.0, 0.0, 0.03),
    "schedule": "cosine",
}
ABLATION_CONSTANTS = {**DESK_CONSTANTS, "steps": (80, 400, 600)}

SCALE_CONSTANTS = {"paper": PAPER_CONSTANTS, "desk": DESK_CONSTANTS, "ablation": ABLATION_CONSTANTS}


class TrainingDiverged(RuntimeError):
    pass


def stratified_times(batch_size: int, rng: RngStream) -> torch.Tensor:
    """Per-sample timesteps, marginally U(0,1), stratified across the batch.

    Unbiased for the uniform-t flow objective with lower estimator variance.
    """
    offsets = rng.torch_uniform((batch_size,))
    strata = torch.from_numpy(rng.shuffled(batch_size)).to(torch.float32)
    return (strata + offsets) / batch_size


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    trainable: tuple[str, ...]
    losses: tuple[str, ...]
    steps: int | str
    batch_size: int
    optimizer: OptimizerConfig
    lam: float


def stage_config(stage_id: int, scale: str = "paper", lam: float = 0.1) -> StageConfig:
    if stage_id not in (1, 2, 3):
        raise ValueError(f"unknown stage {stage_id}")
    if scale not in SCALE_CONSTANTS:
        raise ValueError(f"unknown scale {scale!r}")
    c = SCALE_CONSTANTS[scale]
    peak = c["lr"][stage_id - 1]
    return StageConfig(
        stage_id=stage_id,
        trainable=STAGE_TRAINABLE[stage_id],
        losses=STAGE_LOSSES[stage_id],
        steps=c["steps"][stage_id - 1],
        batch_size=c["batch"],
        optimizer=OptimizerConfig(peak_lr=peak, end_lr=peak / 10.0, schedule=c["schedule"],
                                  weight_decay=c["weight_decay"],
                                  warmup_ratio=c["warmup"][stage_id - 1]),
        lam=lam if stage_id == 3 else 1.0,
    )


def _cfg_stage(runcfg: RunConfig, stage_id: int) -> StageConfig:
    base = stage_config(stage_id, runcfg.scale, lam=runcfg.lam)
    steps = getattr(runcfg, f"stage{stage_id}_steps") or base.steps
    lr = getattr(runcfg, f"stage{stage_id}_lr") or base.optimizer.peak_lr
    batch = runcfg.batch_size or base.batch_size
    opt = OptimizerConfig(peak_lr=lr, end_lr=lr / 10.0, schedule=base.optimizer.schedule,
                          weight_decay=base.optimizer.weight_decay,
                          warmup_ratio=base.optimizer.warmup_ratio)
    return StageConfig(stage_id=stage_id, trainable=base.trainable, losses=base.losses,
                       steps=steps, batch_size=batch, optimizer=opt, lam=base.lam)


def recipe_stages(runcfg: RunConfig) -> list[StageConfig]:
    """Stage list for a mode.

    e2e = the joint stage only, from scratch (no connector/generator warm-up),
    with the stage-3 budget, so the understanding model's CE budget matches
    the staged recipe. sft = the same phase with the flow objective removed.
    """
    staged = [_cfg_stage(runcfg, k) for k in (1, 2, 3)]
    if runcfg.mode in ("depth", "rgb"):
        return staged
    last = staged[2]
    if runcfg.mode == "e2e":
        return [last]
    if runcfg.mode == "sft":
        return [StageConfig(stage_id=3, trainable=("backbone",), losses=("CE",),
                            steps=last.steps, batch_size=last.batch_size,
                            optimizer=last.optimizer, lam=0.0)]
    raise ValueError(f"unknown mode {runcfg.mode!r}")


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    images: torch.Tensor        # (B, H, W, 3)
    tokens: torch.Tensor        # (B, L) long
    targets: torch.Tensor       # (B, L) long
    target_mask: torch.Tensor   # (B, L) float
    flow_targets: torch.Tensor  # (B, S, S[, C]) normalized
    flow_weights: torch.Tensor  # (B,)
    record_ids: np.ndarray


class BatchBuilder:
    """Pre-tokenized records over loaded scenes; samples batches by stream."""

    def __init__(self, scenes: list[SceneEntry], vocab: Vocabulary, channels: int = 1):
        self.vocab = vocab
        self.channels = channels
        self.images = torch.from_numpy(np.stack([s.rgb for s in scenes]))
        flow = []
        self.bounds: list[tuple[float, float]] = []
        for s in scenes:
            if channels == 1:
                tgt = normalize_depth(torch.from_numpy(s.depth_target()))
                flow.append(tgt.depth_norm)
                self.bounds.append((tgt.d_min, tgt.d_max))
            else:
                size = DEPTH_TARGET_SIZE
                f = s.rgb.shape[0] // size
                pooled = s.rgb.reshape(size, f, size, f, 3).mean(axis=(1, 3))
                flow.append(torch.from_numpy(pooled * 2.0 - 1.0))
                self.bounds.append((0.0, 1.0))
        self.flow_targets = torch.stack(flow)
        self.rows: list[np.ndarray] = []
        self.sep_pos: list[int] = []
        self.scene_of: list[int] = []
        self.has_flow: list[bool] = []
        for si, s in enumerate(scenes):
            for rec in s.records:
                prompt = vocab.encode(rec.prompt)
                answer = vocab.encode(rec.answer)
                row = prompt + [vocab.sep_id] + answer + [vocab.eos_id]
                self.rows.append(np.asarray(row, dtype=np.int64))
                self.sep_pos.append(len(prompt))
                self.scene_of.append(si)
                self.has_flow.append(True)

    @property
    def n_records(self) -> int:
        return len(self.rows)

    def batch(self, idx: np.ndarray) -> Batch:
        rows = [self.rows[i] for i in idx]
        L = max(len(r) for r in rows)
        B = len(rows)
        tokens = np.full((B, L), PAD_ID, dtype=np.int64)
        targets = np.full((B, L), PAD_ID, dtype=np.int64)
        mask = np.zeros((B, L), dtype=np.float32)
        for b, r in enumerate(rows):
            tokens[b, :len(r)] = r
            targets[b, :len(r) - 1] = r[1:]
            mask[b, self.sep_pos[int(idx[b])]:len(r) - 1] = 1.0
        scene_idx = np.asarray([self.scene_of[i] for i in idx])
        return Batch(
            images=self.images[scene_idx],
            tokens=torch.from_numpy(tokens),
            targets=torch.from_numpy(targets),
            target_mask=torch.from_numpy(mask),
            flow_targets=self.flow_targets[scene_idx],
            flow_weights=torch.tensor([1.0 if self.has_flow[i] else 0.0 for i in idx]),
            record_ids=np.asarray(idx),
        )

    def sample(self, stream: RngStream, batch_size: int) -> Batch:
        idx = stream.integers(0, self.n_records, batch_size)
        return self.batch(idx)


# ---------------------------------------------------------------------------
# steps and stages

def train_step(model: JointModel, state: ModelState, batch: Batch, cfg: StageConfig,
               step: int, total_steps: int, noise_rng: RngStream,
               grad_clip: float = 1.0) -> dict:
    t0 = time.perf_counter()
    for g in state.unfrozen():
        for p in g.tensors.values():
            p.grad = None
    ce = flow = None
    h_o = None
    if "CE" in cfg.losses:
        ce, hidden = model.ce_and_hidden(batch.images, batch.tokens, batch.targets, batch.target_mask)
        h_o = hidden.h_o
    if "FLOW" in cfg.losses:
        B = batch.flow_targets.shape[0]
        t = stratified_times(B, noise_rng)
        noise = noise_rng.torch_normal(tuple(batch.flow_targets.shape))
        flow = model.depth_flow_loss(batch.flow_targets, t, noise, h_o=h_o,
                                     images=batch.images, weights=batch.flow_weights)
    total = torch.zeros(())
    if ce is not None:
        total = total + ce
    if flow is not None:
        total = total + cfg.lam * flow
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at stage {cfg.stage_id} step {step}: "
            f"ce={None if ce is None else float(ce.detach())} "
            f"flow={None if flow is None else float(flow.detach())}")
    total.backward()
    grads = {}
    for g in state.unfrozen():
        grads[g.name] = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                         for n, p in g.tensors.items()}
    clip_grads_(grads, grad_clip)
    lr = lr_at(cfg.optimizer, step, total_steps)
    optimizer_step(state, grads, cfg.optimizer, step, lr=lr)
    return {
        "step": step, "stage": cfg.stage_id, "lr": lr,
        "ce_loss": float(ce.detach()) if ce is not None else math.nan,
        "flow_loss": float(flow.detach()) if flow is not None else math.nan,
        "total_loss": float(total.detach()), "elapsed_s": time.perf_counter() - t0,
    }


def resolve_steps(steps: int | str, n_records: int, batch_size: int) -> int:
    if isinstance(steps, int):
        return steps
    if steps == "one_epoch":
        return max(1, math.ceil(n_records / batch_size))
    raise ValueError(f"unresolvable steps spec {steps!r}")


@dataclass
class RecipeResult:
    out_dir: Path
    checkpoints: dict[str, Path]
    report_path: Path
    records: list[dict]
    hashes_before: dict[int, dict[str, str]] = field(default_factory=dict)
    hashes_after: dict[int, dict[str, str]] = field(default_factory=dict)
    batch_stream_sha: str = ""


def run_stage(model: JointModel, state: ModelState, builder: BatchBuilder, cfg: StageConfig,
              seed: int, global_offset: int, grad_clip: float = 1.0,
              log_every: int = 0, digest=None) -> tuple[list[dict], str]:
    """Run one stage; returns per-step records and the batch-index stream hash.

    Passing a shared `digest` accumulates the record-id stream across stages,
    so runs with different stage groupings but identical supervision streams
    hash identically (the ablation controlled-variable check).
    """
    state.set_trainable(cfg.trainable)
    state.reset_moments()
    total = resolve_steps(cfg.steps, builder.n_records, cfg.batch_size)
    batch_stream = RngStream(seed, "batches")
    noise_stream = RngStream(seed, "train-noise")
    records = []
    if digest is None:
        digest = hashlib.sha256()
    for step in range(1, total + 1):
        g = global_offset + step
        batch = builder.sample(batch_stream.child(str(g)), cfg.batch_size)
        digest.update(batch.record_ids.astype(np.int64).tobytes())
        rec = train_step(model, state, batch, cfg, step, total, noise_stream.child(str(g)),
                         grad_clip=grad_clip)
        rec["seed"] = seed
        records.append(rec)
        if log_every and (step % log_every == 0 or step == total):
            print(f"  stage {cfg.stage_id} step {step}/{total} "
                  f"ce={rec['ce_loss']:.4f} flow={rec['flow_loss']:.4f} lr={rec['lr']:.2e}")
    return records, digest.hexdigest()


def write_report(path: Path, records: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_HEADER)
        w.writeheader()
        for rec in records:
            w.writerow({k: rec.get(k, "") for k in REPORT_HEADER})


def run_recipe(runcfg: RunConfig, dataset: LoadedDataset | None = None,
               log_every: int = 0) -> RecipeResult:
    """Full training pipeline for the configured mode; fully seed-deterministic."""
    runcfg.validate()
    out = Path(runcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(runcfg, out)
    if dataset is None:
        dataset = load_dataset(runcfg.data_dir)
    vocab = Vocabulary.from_file(dataset.root / "vocab.txt")
    if vocab.sha256() != dataset.vocab_sha256:
        raise RuntimeError("vocabulary file does not match the dataset manifest hash")
    train_scenes, _ = dataset.split(runcfg.eval_frac)
    channels = 3 if runcfg.mode == "rgb" else 1
    builder = BatchBuilder(train_scenes, vocab, channels=channels)
    model_cfg = desk_model_config(len(vocab), channels=channels, dim=runcfg.dim,
                                  layers=runcfg.layers, heads=runcfg.heads)
    model = JointModel(model_cfg)
    model.init_parameters(runcfg.seed)
    state = model.build_state()
    meta = {"vocab_sha256": vocab.sha256(), "seed": str(runcfg.seed),
            "mode": runcfg.mode, "scale": runcfg.scale, **config_to_meta(model_cfg)}
    result = RecipeResult(out_dir=out, checkpoints={}, report_path=out / "report.csv", records=[])
    init_path = out / "init.ckpt"
    save_checkpoint(state, init_path, meta={**meta, "stage": "0"})
    result.checkpoints["init"] = init_path
    # single-phase modes align their global step indices with the staged
    # recipe's joint phase, so every mode's joint phase consumes the
    # identical record stream (the ablation controlled-variable contract)
    offset = 0
    if runcfg.mode in ("e2e", "sft"):
        warmup = [_cfg_stage(runcfg, 1).steps, _cfg_stage(runcfg, 2).steps]
        offset = sum(s for s in warmup if isinstance(s, int))
    joint_digest = hashlib.sha256()
    for cfg in recipe_stages(runcfg):
        result.hashes_before[cfg.stage_id] = state_hashes(state)
        digest = joint_digest if "CE" in cfg.losses else None
        records, sha = run_stage(model, state, builder, cfg, runcfg.seed, offset,
                                 grad_clip=runcfg.grad_clip, log_every=log_every,
                                 digest=digest)
        result.hashes_after[cfg.stage_id] = state_hashes(state)
        offset += len(records)
        result.records.extend(records)
        path = out / f"stage{cfg.stage_id}.ckpt"
        save_checkpoint(state, path, meta={**meta, "stage": str(cfg.stage_id)})
        result.checkpoints[f"stage{cfg.stage_id}"] = path
    result.checkpoints["final"] = result.checkpoints[f"stage{recipe_stages(runcfg)[-1].stage_id}"]
    result.batch_stream_sha = joint_digest.hexdigest()
    write_report(result.report_path, result.records)
    (out / "batch_stream.sha").write_text(result.batch_stream_sha + "\n")
    return result
