"""Analysis harness: compounding-error curves, matched ablation runs,
attention-pattern dumps, and aggregation FLOPs tables.

Every artifact is written as CSV (plus PNG heatmaps/curves rendered off-screen)
and is reproducible byte-for-byte from (checkpoint, seed, config).
"""

from __future__ import annotations

import copy
import csv
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from mawm.aggregator import PERCEIVER, SELF_ATTENTION, flops_estimate
from mawm.buffer import ReplayBuffer, StepRecord, random_policy, run_episodes
from mawm.imagination import replay_segment
from mawm.trainer import Trainer, build_world_model

PNG_METADATA = {"Software": "mawm"}

ABLATION_AXES = (
    "centralized_vs_decentralized",
    "aggregation_on_off",
    "vq_vs_bins",
    "perceiver_vs_selfattn",
)


# -- compounding error --------------------------------------------------------


def collect_policy_episodes(trainer: Trainer, n_episodes, mode="sample"):
    """Roll real episodes with the trainer's current policy (acting on
    reconstructed observation stacks, like execution)."""
    from mawm.behavior import act

    env = trainer.cfg.env.make(
        int(np.random.SeedSequence((trainer.cfg.seed, 0xC0DE)).generate_state(1)[0])
    )
    stack_n = trainer.cfg.behavior.stack
    trainer.world_model.eval()

    def policy_fn(obs, avail):
        nonlocal stack
        recon = trainer.world_model.tok.reconstruct(
            torch.from_numpy(np.asarray(obs, dtype=np.float32))
        )
        if stack is None:
            stack = recon.unsqueeze(1).repeat(1, stack_n, 1)
        else:
            stack = torch.cat([stack[:, 1:], recon.unsqueeze(1)], dim=1)
        with torch.no_grad():
            actions, _ = act(
                trainer.policy,
                stack.flatten(1),
                torch.from_numpy(avail),
                mode=mode,
                generator=trainer.act_gen,
            )
        return actions.numpy()

    episodes = []
    for _ in range(n_episodes):
        stack = None
        episodes.extend(run_episodes(env, policy_fn, 1))
    return episodes


def compounding_error(world_model, episodes, horizon, n_segments=1000, seed=0, batch=64):
    """Mean absolute prediction error per horizon step.

    Rolls the world model forward from segment starts using the recorded
    actions and compares reconstructions against the real observations.
    Returns per-step arrays: mean/std over segments of the per-dimension L1
    error, shapes (horizon, n_agents, obs_dim), plus the overall per-step
    mean.
    """
    max_pred = world_model.window - 1
    if horizon > max_pred:
        raise ValueError(f"horizon {horizon} exceeds the decodable window ({max_pred})")
    windows = []
    for ep in episodes:
        arr = ep if isinstance(ep, dict) else _records_to_arrays(ep)
        length = arr["reward"].shape[0]
        for s in range(length - horizon):
            windows.append((arr, s))
    if not windows:
        raise ValueError("no segment long enough for the requested horizon")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(windows), size=n_segments)
    gen = torch.Generator().manual_seed(seed)

    errs = []
    world_model.eval()
    for lo in range(0, n_segments, batch):
        chunk = picks[lo : lo + batch]
        obs = np.stack(
            [windows[i][0]["obs"][:, windows[i][1] : windows[i][1] + horizon + 1] for i in chunk]
        )
        acts = np.stack(
            [windows[i][0]["actions"][:, windows[i][1] : windows[i][1] + horizon + 1] for i in chunk]
        )
        obs_t = torch.from_numpy(obs.astype(np.float32))
        act_t = torch.from_numpy(acts.astype(np.int64))
        pred = replay_segment(world_model, obs_t, act_t, horizon=horizon, greedy=True, generator=gen)
        true = obs_t[:, :, 1 : horizon + 1]
        errs.append((pred - true).abs().permute(0, 2, 1, 3).numpy())  # (B, T, n, D)
    errs = np.concatenate(errs)
    return {
        "mean": errs.mean(axis=0),
        "std": errs.std(axis=0),
        "per_step_mean": errs.mean(axis=(0, 2, 3)),
        "n_segments": n_segments,
    }


def write_error_report(result, out_dir, name="compounding_error"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    T, n, D = result["mean"].shape
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "agent", "dim", "mean_l1", "std_l1"])
        for t in range(T):
            for i in range(n):
                for d in range(D):
                    w.writerow(
                        [t + 1, i, d, f"{result['mean'][t, i, d]:.6g}", f"{result['std'][t, i, d]:.6g}"]
                    )
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i in range(n):
        ax.plot(
            np.arange(1, T + 1),
            result["mean"][:, i].mean(axis=-1),
            marker="o",
            label=f"agent {i}",
        )
    ax.set_xlabel("prediction step")
    ax.set_ylabel("mean L1 error per obs dim")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{name}.png", metadata=PNG_METADATA)
    plt.close(fig)
    return csv_path


def _records_to_arrays(records):
    return {
        "obs": np.stack([r.obs for r in records], axis=1),
        "actions": np.stack([r.actions for r in records], axis=1),
        "reward": np.array([r.reward for r in records], dtype=np.float32),
    }


# -- ablations -----------------------------------------------------------------


def _arm_configs(axis, base_cfg):
    arms = {}
    if axis == "aggregation_on_off":
        on = copy.deepcopy(base_cfg)
        on.aggregator.kind = "perceiver"
        off = copy.deepcopy(base_cfg)
        off.aggregator.kind = "none"
        arms = {"aggregation_on": on, "aggregation_off": off}
    elif axis == "vq_vs_bins":
        vq = copy.deepcopy(base_cfg)
        vq.tokenizer.kind = "vq"
        bins = copy.deepcopy(base_cfg)
        bins.tokenizer.kind = "bins"
        arms = {"vq": vq, "bins": bins}
    elif axis == "centralized_vs_decentralized":
        dec = copy.deepcopy(base_cfg)
        dec.dynamics.centralized = False
        cen = copy.deepcopy(base_cfg)
        cen.dynamics.centralized = True
        cen.aggregator.kind = "none"
        arms = {"decentralized": dec, "centralized": cen}
    elif axis == "perceiver_vs_selfattn":
        per = copy.deepcopy(base_cfg)
        per.aggregator.kind = "perceiver"
        sa = copy.deepcopy(base_cfg)
        sa.aggregator.kind = "self_attention"
        arms = {"perceiver": per, "self_attention": sa}
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; pick one of {ABLATION_AXES}")
    return arms


def _check_budgets(arms):
    budgets = {
        name: (cfg.schedule.total_env_steps, cfg.schedule.world_model_updates,
               cfg.schedule.tokenizer_updates)
        for name, cfg in arms.items()
    }
    if len(set(budgets.values())) != 1:
        raise ValueError(f"mismatched budgets across arms: {budgets}")


def _collect_shared_buffer(cfg, seed, n_transitions):
    env = cfg.env.make(int(np.random.SeedSequence((seed, 0xAB1)).generate_state(1)[0]))
    buf = ReplayBuffer(capacity=max(n_transitions * 2, 1000))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAB2)).generate_state(1)[0])
    policy = random_policy(rng)
    while len(buf) < n_transitions:
        for records in run_episodes(env, policy, 1):
            for r in records:
                buf.append(r)
    return buf


def teacher_forced_onestep_error(world_model, batch):
    """Mean per-dimension L1 of greedy teacher-forced next-step predictions,
    decoded to observation space. Comparable across tokenizers and layouts."""
    wm = world_model
    wm.eval()
    with torch.no_grad():
        obs, actions, pad = batch["obs"], batch["actions"], batch["pad"]
        B, n, S, _ = obs.shape
        tokens = wm.tok.encode(obs)
        if wm.centralized:
            seq_tokens = tokens.permute(0, 2, 1, 3).reshape(B, S, -1)
            seq_actions = actions.permute(0, 2, 1).reshape(B, S, n)
            feats = None
        else:
            feats = wm.features_for_segments(tokens, actions)
            seq_tokens = tokens.flatten(0, 1)
            seq_actions = actions.flatten(0, 1).unsqueeze(-1)
            feats = None if feats is None else feats.flatten(0, 1)
        h = wm.dynamics(seq_tokens, seq_actions, feats)
        logits = wm.dynamics.token_logits_at(h, S)
        pred_tokens = logits.argmax(dim=-1)  # (B*, S-1, T_o)
        if wm.centralized:
            pred_tokens = pred_tokens.view(B, S - 1, n, -1).permute(0, 2, 1, 3)
        else:
            pred_tokens = pred_tokens.view(B, n, S - 1, -1)
        pred_obs = wm.decode_tokens(pred_tokens)
        true_obs = obs[:, :, 1:]
        valid = ~pad[:, 1:]
        err = (pred_obs - true_obs).abs().mean(dim=(0, 1, 3))
        return float(err[valid.any(dim=0)].mean())


def run_ablation(
    axis,
    base_cfg,
    seeds=(0, 1, 2),
    collect_transitions=3000,
    wm_updates=200,
    eval_every=25,
    multi_step=5,
    out_dir=None,
    arms=None,
):
    """Train matched world-model runs differing only on one axis.

    For each seed a shared random-policy buffer is collected once and both
    arms train on it with identical budgets; curves record dynamics-loss
    components, teacher-forced one-step L1 error, self-conditioned
    ``multi_step``-step L1 error (decentralized arms), per-update seconds,
    and cumulative wall-clock (tokenizer training included).
    """
    arms = arms or _arm_configs(axis, base_cfg)
    _check_budgets(arms)
    rows = []
    for seed in seeds:
        buf = _collect_shared_buffer(base_cfg, seed, collect_transitions)
        for arm_name, arm_cfg in arms.items():
            rows.extend(
                _train_arm(
                    axis, arm_name, arm_cfg, seed, buf, wm_updates, eval_every, multi_step
                )
            )
    if out_dir:
        _write_ablation_report(axis, rows, out_dir)
    return rows


def _train_arm(axis, arm_name, cfg, seed, buf, wm_updates, eval_every, multi_step):
    cfg = copy.deepcopy(cfg)
    cfg.seed = seed
    trainer = Trainer(cfg)
    trainer.buffer = buf  # shared data across arms
    eval_batch = trainer.segment_batch(
        min(32, cfg.dynamics.batch_size * 2), cfg.dynamics.horizon
    )
    rows = []
    clock = 0.0
    t0 = time.monotonic()
    trainer.train_tokenizer()
    clock += time.monotonic() - t0
    for u in range(1, wm_updates + 1):
        t0 = time.monotonic()
        batch = trainer.segment_batch(cfg.dynamics.batch_size, cfg.dynamics.horizon)
        parts = trainer.world_model_update(batch)
        dt = time.monotonic() - t0
        clock += dt
        if u % eval_every == 0 or u == wm_updates:
            row = {
                "axis": axis,
                "arm": arm_name,
                "seed": seed,
                "update": u,
                "wall_clock": clock,
                "seconds_per_update": dt,
                "loss_total": float(parts["total"]),
                "loss_token_ce": float(parts["token_ce"]),
                "one_step_l1": teacher_forced_onestep_error(
                    trainer.world_model, eval_batch
                ),
            }
            if not cfg.dynamics.centralized:
                err = compounding_error(
                    trainer.world_model,
                    trainer.buffer.episodes()[:50],
                    horizon=multi_step,
                    n_segments=64,
                    seed=seed,
                )
                row[f"multi_step_l1_{multi_step}"] = float(
                    err["per_step_mean"][-1]
                )
            rows.append(row)
            trainer.world_model.train()
    return rows


def _write_ablation_report(axis, rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r})
    with open(out_dir / f"ablation_{axis}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    # final-metric table: mean +/- std across seeds at the last update
    last_update = max(r["update"] for r in rows)
    finals = {}
    for r in rows:
        if r["update"] == last_update:
            finals.setdefault(r["arm"], []).append(r)
    with open(out_dir / f"ablation_{axis}_final.csv", "w", newline="") as f:
        w = csv.writer(f)
        metrics = [k for k in keys if k not in ("axis", "arm", "seed", "update")]
        w.writerow(["arm"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for arm, rs in sorted(finals.items()):
            row = [arm]
            for m in metrics:
                vals = [r[m] for r in rs if m in r]
                row += (
                    [f"{np.mean(vals):.6g}", f"{np.std(vals):.6g}"] if vals else ["", ""]
                )
            w.writerow(row)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for arm in sorted({r["arm"] for r in rows}):
        pts = [(r["wall_clock"], r["loss_total"]) for r in rows if r["arm"] == arm]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=arm)
    ax.set_xlabel("cumulative wall-clock (s)")
    ax.set_ylabel("dynamics loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"ablation_{axis}.png", metadata=PNG_METADATA)
    plt.close(fig)


def time_to_threshold(rows, arm, metric, threshold):
    """Earliest cumulative wall-clock at which an arm's metric fell to or
    below the threshold, per seed; None where never reached."""
    out = {}
    for seed in sorted({r["seed"] for r in rows if r["arm"] == arm}):
        hit = None
        for r in sorted(
            (r for r in rows if r["arm"] == arm and r["seed"] == seed),
            key=lambda r: r["update"],
        ):
            if metric in r and r[metric] <= threshold:
                hit = r["wall_clock"]
                break
        out[seed] = hit
    return out


# -- attention dumps -------------------------------------------------------------


def dump_attention(world_model, batch, out_dir=None):
    """Capture causal attention maps from the dynamics transformer and
    cross-attention maps from the Perceiver on one teacher-forced batch.

    Returns {"dynamics": (layers, B*, heads, L, L), "cross": (B*S, heads,
    n, n*(K+1)) or None}; writes .npz plus per-layer heatmap PNGs.
    """
    wm = world_model
    wm.eval()
    captures = []
    for block in wm.dynamics.blocks:
        block.attn.capture = []
        captures.append(block.attn.capture)
    cross_capture = None
    if wm.aggregator is not None and hasattr(wm.aggregator, "cross"):
        cross_capture = wm.aggregator.cross.capture = []
    try:
        with torch.no_grad():
            obs, actions = batch["obs"], batch["actions"]
            tokens = wm.tok.encode(obs)
            if wm.centralized:
                seq_tokens = tokens.permute(0, 2, 1, 3).flatten(2)
                seq_actions = actions.permute(0, 2, 1)
                feats = None
            else:
                feats = wm.features_for_segments(tokens, actions)
                seq_tokens = tokens.flatten(0, 1)
                seq_actions = actions.flatten(0, 1).unsqueeze(-1)
                feats = None if feats is None else feats.flatten(0, 1)
            wm.dynamics(seq_tokens, seq_actions, feats)
        dyn_maps = torch.stack([c[-1] for c in captures]).numpy()
        cross_maps = cross_capture[-1].numpy() if cross_capture else None
    finally:
        for block in wm.dynamics.blocks:
            block.attn.capture = None
        if wm.aggregator is not None and hasattr(wm.aggregator, "cross"):
            wm.aggregator.cross.capture = None
    result = {"dynamics": dyn_maps, "cross": cross_maps}
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            out_dir / "attention_maps.npz",
            dynamics=dyn_maps,
            **({"cross": cross_maps} if cross_maps is not None else {}),
        )
        for layer in range(dyn_maps.shape[0]):
            _heatmap_grid(
                dyn_maps[layer, 0],
                out_dir / f"dynamics_layer{layer}.png",
                f"causal attention, layer {layer}",
            )
        if cross_maps is not None:
            _heatmap_grid(
                cross_maps[0], out_dir / "perceiver_cross.png", "perceiver cross-attention"
            )
    return result


def _heatmap_grid(maps, path, title):
    heads = maps.shape[0]
    cols = min(heads, 4)
    rows = (heads + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.5 * rows), squeeze=False)
    for h in range(heads):
        ax = axes[h // cols][h % cols]
        m = maps[h]
        im = ax.imshow(m / max(m.max(), 1e-9), cmap="viridis", aspect="auto")
        ax.set_title(f"head {h}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    for h in range(heads, rows * cols):
        axes[h // cols][h % cols].axis("off")
    fig.suptitle(title, fontsize=10)
    fig.colorbar(im, ax=[a for row in axes for a in row], shrink=0.8)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)


# -- FLOPs table -----------------------------------------------------------------


def flops_report(n_list=(2, 3, 5, 9), tokens_per_obs=16, dim=256, out_dir=None, **kwargs):
    """Perceiver vs self-attention aggregation cost for each agent count."""
    rows = []
    for n in n_list:
        p = flops_estimate(PERCEIVER, n, tokens_per_obs, dim, **kwargs)
        s = flops_estimate(SELF_ATTENTION, n, tokens_per_obs, dim, **kwargs)
        rows.append(
            {
                "n_agents": n,
                "perceiver_gflops": p / 1e9,
                "self_attention_gflops": s / 1e9,
                "ratio": s / p,
            }
        )
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "flops.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
        with open(out_dir / "flops.md", "w") as f:
            f.write("| agents | perceiver GFLOPs | self-attention GFLOPs | ratio |\n")
            f.write("|---|---|---|---|\n")
            for r in rows:
                f.write(
                    f"| {r['n_agents']} | {r['perceiver_gflops']:.3f} | "
                    f"{r['self_attention_gflops']:.3f} | {r['ratio']:.2f} |\n"
                )
    return rows
