"""VLA fine-tuning and closed-loop evaluation in the toy environment.

Expert demonstrations come from the scripted planner; each training item is
one episode frame: the rendered observation, the instruction, the next
H actions (normalized), and the frame's depth target. The joint variant
optimizes action + lambda * depth flow end to end; the depth-frozen
variant (lambda = 0) trains only backbone and action expert.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .action_expert import denormalize_actions, extract_kv, normalize_actions, predict_chunk
from .config import RunConfig, save_resolved
from .dataset import DEPTH_TARGET_SIZE
from .depth_head import normalize_depth
from .model import JointModel, PAD_ID, config_from_meta, config_to_meta, desk_model_config
from .optim import OptimizerConfig, clip_grads_, lr_at, optimizer_step
from .params import ModelState, load_checkpoint, load_into_state, save_checkpoint
from .rng import RngStream
from .toyenv import EPISODE_HORIZON, env_reset, env_step, render_env, run_episode, observation_text
from .trainer import TrainingDiverged, stratified_times
from .vocab import Vocabulary

VLA_REPORT_HEADER = ("step", "lr", "action_loss", "flow_loss", "total_loss",
                     "heldout_mse", "elapsed_s", "seed")
EVAL_ENV_SEED_BASE = 10_000_000  # rollout env seeds; disjoint from training episodes


def episode_seed_for(global_seed: int, index: int) -> int:
    import hashlib
    digest = hashlib.sha256(f"vla:{global_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:6], "big")


@dataclass
class VlaData:
    images: torch.Tensor       # (N, 64, 64, 3)
    tokens: list[np.ndarray]   # instruction token rows
    chunks: torch.Tensor       # (N, H, 3) normalized
    depth_norm: torch.Tensor   # (N, S, S)

    @property
    def n_items(self) -> int:
        return len(self.tokens)


def build_vla_data(n_episodes: int, seed: int, horizon: int, vocab: Vocabulary) -> VlaData:
    images, tokens, chunks, depths = [], [], [], []
    for i in range(n_episodes):
        ep_seed = episode_seed_for(seed, i)
        ep = run_episode(ep_seed)
        acts = normalize_actions(torch.from_numpy(ep.actions).float())
        for s in range(len(ep.actions)):
            instr = np.asarray(vocab.encode(observation_text(ep.states[s])), dtype=np.int64)
            sample = render_env(ep.states[s], ep_seed)
            chunk = torch.full((horizon, 3), -1.0)
            chunk[:, :2] = 0.0
            take = min(horizon, len(ep.actions) - s)
            chunk[:take] = acts[s:s + take]
            f = sample.depth.shape[0] // DEPTH_TARGET_SIZE
            pooled = sample.depth.reshape(DEPTH_TARGET_SIZE, f, DEPTH_TARGET_SIZE, f).mean(axis=(1, 3))
            images.append(torch.from_numpy(sample.rgb))
            tokens.append(instr)
            chunks.append(chunk)
            depths.append(normalize_depth(torch.from_numpy(pooled)).depth_norm)
    return VlaData(images=torch.stack(images), tokens=tokens,
                   chunks=torch.stack(chunks), depth_norm=torch.stack(depths))


def _batch(data: VlaData, idx: np.ndarray):
    rows = [data.tokens[i] for i in idx]
    L = max(len(r) for r in rows)
    toks = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    for b, r in enumerate(rows):
        toks[b, :len(r)] = r
    return (data.images[idx], torch.from_numpy(toks), data.chunks[idx], data.depth_norm[idx])


def vla_train_step(model: JointModel, state: ModelState, batch, lam: float,
                   cfg: OptimizerConfig, step: int, total_steps: int,
                   noise_rng: RngStream, grad_clip: float = 1.0) -> dict:
    images, tokens, chunks, depth_norm = batch
    t0 = time.perf_counter()
    for g in state.unfrozen():
        for p in g.tensors.values():
            p.grad = None
    hidden, _ = model.backbone.forward(images, tokens, PAD_ID)
    cond = extract_kv(hidden)
    B = chunks.shape[0]
    t_act = stratified_times(B, noise_rng)
    eps_act = noise_rng.torch_normal(tuple(chunks.shape))
    action = model.action_loss(cond, chunks, t_act, eps_act)
    flow = None
    total = action
    if lam > 0:
        t_d = stratified_times(B, noise_rng)
        eps_d = noise_rng.torch_normal(tuple(depth_norm.shape))
        flow = model.depth_flow_loss(depth_norm, t_d, eps_d, h_o=hidden.h_o)
        total = action + lam * flow
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite VLA loss at step {step}: "
                               f"action={float(action.detach())} flow={flow}")
    total.backward()
    grads = {g.name: {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                      for n, p in g.tensors.items()} for g in state.unfrozen()}
    clip_grads_(grads, grad_clip)
    lr = lr_at(cfg, step, total_steps)
    optimizer_step(state, grads, cfg, step, lr=lr)
    return {"step": step, "lr": lr, "action_loss": float(action.detach()),
            "flow_loss": float(flow.detach()) if flow is not None else math.nan,
            "total_loss": float(total.detach()), "elapsed_s": time.perf_counter() - t0}


@torch.no_grad()
def heldout_action_mse(model: JointModel, data: VlaData, idx: np.ndarray,
                       steps: int = 10, seed: int = 77) -> float:
    errs = []
    for lo in range(0, len(idx), 32):
        sel = idx[lo:lo + 32]
        images, tokens, chunks, _ = _batch(data, sel)
        hidden, _ = model.backbone.forward(images, tokens, PAD_ID)
        cond = extract_kv(hidden)
        pred = predict_chunk(model.action_expert, cond, steps, RngStream(seed, f"ho/{lo}"))
        errs.append(float(((pred - chunks) ** 2).mean()))
    return float(np.mean(errs))


@dataclass
class VlaResult:
    out_dir: Path
    checkpoint: Path
    report_path: Path
    records: list[dict] = field(default_factory=list)


def run_vla_training(runcfg: RunConfig, stage3_ckpt: str | Path, out_dir: str | Path,
                     variant: str = "joint", log_every: int = 0) -> VlaResult:
    """Fine-tune from a stage-3 checkpoint; variant 'nodepth' freezes the
    depth pathway and drops the flow term (the lambda = 0 ablation)."""
    if variant not in ("joint", "nodepth"):
        raise ValueError(f"unknown variant {variant!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(runcfg, out)
    ckpt = load_checkpoint(stage3_ckpt)
    base_cfg = config_from_meta(ckpt.meta)
    if base_cfg.depth.channels != 1:
        raise ValueError("VLA fine-tuning expects a depth-mode checkpoint")
    vocab_sha = ckpt.require_meta("vocab_sha256")
    model_cfg = desk_model_config(base_cfg.backbone.vocab_size, with_expert=True,
                                  dim=base_cfg.backbone.dim, layers=base_cfg.backbone.layers,
                                  heads=base_cfg.backbone.heads, horizon=runcfg.horizon,
                                  layerwise=runcfg.layerwise)
    model = JointModel(model_cfg)
    model.init_parameters(runcfg.seed)
    state = model.build_state()
    load_into_state(ckpt, state, groups=["backbone", "connector", "depth_head"])
    vocab = _vocab_for(runcfg, vocab_sha)
    data = build_vla_data(runcfg.vla_episodes, runcfg.seed, runcfg.horizon, vocab)
    held = build_vla_data(runcfg.vla_eval_episodes, runcfg.seed + 991, runcfg.horizon, vocab)
    held_idx = RngStream(runcfg.seed, "vla-held").choice(held.n_items, min(64, held.n_items))
    lam = runcfg.lam if variant == "joint" else 0.0
    trainable = ("backbone", "connector", "depth_head", "action_expert") if variant == "joint" \
        else ("backbone", "action_expert")
    state.set_trainable(trainable)
    state.reset_moments()
    opt = OptimizerConfig(peak_lr=runcfg.vla_lr, end_lr=runcfg.vla_lr / 10.0, schedule="linear",
                          weight_decay=0.1, warmup_ratio=0.03)
    batch_stream = RngStream(runcfg.seed, "vla-batches")
    noise_stream = RngStream(runcfg.seed, "vla-noise")
    records = []
    total = runcfg.vla_steps
    for step in range(1, total + 1):
        idx = batch_stream.child(str(step)).integers(0, data.n_items, runcfg.vla_batch)
        batch = _batch(data, idx)
        rec = vla_train_step(model, state, batch, lam, opt, step, total,
                             noise_stream.child(str(step)), grad_clip=runcfg.grad_clip)
        rec["seed"] = runcfg.seed
        if step % 100 == 0 or step == total:
            rec["heldout_mse"] = heldout_action_mse(model, held, held_idx)
            if log_every:
                print(f"  vla[{variant}] step {step}/{total} action={rec['action_loss']:.4f} "
                      f"heldout_mse={rec['heldout_mse']:.4f}")
        records.append(rec)
    ckpt_path = out / "vla.ckpt"
    save_checkpoint(state, ckpt_path, meta={
        "vocab_sha256": vocab_sha, "seed": str(runcfg.seed), "mode": f"vla-{variant}",
        "scale": runcfg.scale, **config_to_meta(model_cfg)})
    report = out / "vla_report.csv"
    with open(report, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=VLA_REPORT_HEADER)
        w.writeheader()
        for rec in records:
            w.writerow({k: rec.get(k, "") for k in VLA_REPORT_HEADER})
    return VlaResult(out_dir=out, checkpoint=ckpt_path, report_path=report, records=records)


def _vocab_for(runcfg: RunConfig, expected_sha: str) -> Vocabulary:
    from .qa import build_vocabulary
    path = Path(runcfg.data_dir) / "vocab.txt"
    vocab = Vocabulary.from_file(path) if path.exists() else build_vocabulary()
    if vocab.sha256() != expected_sha:
        raise RuntimeError("vocabulary hash mismatch with the checkpoint")
    return vocab


# ---------------------------------------------------------------------------
# closed-loop rollout

@dataclass
class RolloutSummary:
    success_rate: float
    mean_progress: float
    per_episode: list[dict]


def rollout_policy(model: JointModel, vocab: Vocabulary, seeds, horizon: int = EPISODE_HORIZON,
                   sampler_steps: int = 10, policy: str = "model",
                   rng_seed: int = 55, log_dir: str | Path | None = None) -> RolloutSummary:
    """Execute chunks open-loop, re-planning at chunk boundaries.

    policy: "model" | "random" | "expert". With log_dir, each episode writes
    a per-step CSV of (state, action, sub-task index).
    """
    results = []
    chunk_h = model.cfg.expert.horizon if model.cfg.expert else 8
    rand = RngStream(rng_seed, "random-policy")
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        state = env_reset(int(seed))
        chunk = None
        steps_log = []
        for t in range(horizon):
            if state.success:
                break
            if policy == "expert":
                from .toyenv import scripted_expert_action
                action = scripted_expert_action(state)
            elif policy == "random":
                action = rand.child(f"{seed}/{t}").uniform(-1.0, 1.0, (3,))
                action = denormalize_actions(torch.from_numpy(action)).numpy()
            else:
                k = t % chunk_h
                if k == 0:
                    sample = render_env(state, int(seed))
                    instr = vocab.encode(observation_text(state))
                    with torch.no_grad():
                        images = torch.from_numpy(sample.rgb).unsqueeze(0)
                        tokens = torch.tensor([instr], dtype=torch.long)
                        hidden, _ = model.backbone.forward(images, tokens, PAD_ID)
                        cond = extract_kv(hidden)
                        norm = predict_chunk(model.action_expert, cond, sampler_steps,
                                             RngStream(rng_seed, f"roll/{seed}/{t}"))
                    chunk = denormalize_actions(norm[0]).numpy()
                action = chunk[k]
            if log_dir is not None:
                steps_log.append((state, np.asarray(action, dtype=float)))
            state = env_step(state, action)
        if log_dir is not None:
            _write_episode_log(log_dir / f"episode_{int(seed)}.csv", steps_log, state)
        results.append({"seed": int(seed), "success": int(state.success),
                        "progress": state.progress, "steps": state.step_count})
    return RolloutSummary(
        success_rate=float(np.mean([r["success"] for r in results])),
        mean_progress=float(np.mean([r["progress"] for r in results])),
        per_episode=results)


def _write_episode_log(path: Path, steps, final_state) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "eff_x", "eff_y", "obj_x", "obj_y", "held",
                    "dx", "dy", "gripper", "subtask_index"])
        for state, action in steps:
            w.writerow([state.step_count,
                        f"{state.effector[0]:.5f}", f"{state.effector[1]:.5f}",
                        f"{state.object_xy[0]:.5f}", f"{state.object_xy[1]:.5f}",
                        int(state.held), f"{action[0]:.5f}", f"{action[1]:.5f}",
                        f"{action[2]:.5f}", state.completed])
        w.writerow([final_state.step_count, f"{final_state.effector[0]:.5f}",
                    f"{final_state.effector[1]:.5f}", f"{final_state.object_xy[0]:.5f}",
                    f"{final_state.object_xy[1]:.5f}", int(final_state.held),
                    "", "", "", final_state.completed])


def write_rollout_csv(path: str | Path, summary: RolloutSummary) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "success", "progress", "steps"])
        for r in summary.per_episode:
            w.writerow([r["seed"], r["success"], f"{r['progress']:.3f}", r["steps"]])
        w.writerow(["#success_rate", f"{summary.success_rate:.4f}", "", ""])
        w.writerow(["#mean_progress", f"{summary.mean_progress:.4f}", "", ""])
