"""Command-line entry points.

Subcommands: env-rollout, tokenizer-train, train, eval, imagine, and the
analysis family (analyze error | ablate | attention | flops). Run
``mawm <subcommand> --help`` for flags.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from mawm import analysis
from mawm.buffer import random_policy, read_episode_log, run_episodes, write_episode_log
from mawm.envs import make_env
from mawm.tokenizer import VQTokenizer
from mawm.trainer import (
    Trainer,
    desk_coop_switch_config,
    desk_coupled_chain_config,
    load_config,
)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mawm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("env-rollout", help="log random-policy episodes")
    p.add_argument("--env", default="coop-switch")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=5)
    p.add_argument("--state-dim", type=int, default=4)
    p.add_argument("--episode-limit", type=int, default=50)
    p.set_defaults(func=cmd_env_rollout)

    p = sub.add_parser("tokenizer-train", help="train a VQ tokenizer on episode logs")
    p.add_argument("--data", required=True, help="episode log file or directory")
    p.add_argument("--codebook", type=int, default=512)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--code-dim", type=int, default=128)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--updates", type=int, default=500)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="tokenizer.pt")
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--config", help="TOML run config; defaults to the desk preset")
    p.add_argument("--preset", choices=["coop-switch", "coupled-chain"], default="coop-switch")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, help="override the env-step budget")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--greedy", action="store_true", default=True)
    p.add_argument("--sample", dest="greedy", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("imagine", help="dump imagined rollouts from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--rollouts", type=int, default=64)
    p.add_argument("--dump", required=True)
    p.set_defaults(func=cmd_imagine)

    p = sub.add_parser("analyze", help="analysis reports")
    asub = p.add_subparsers(dest="analysis", required=True)

    pe = asub.add_parser("error", help="compounding-error curves")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--episodes", type=int, default=20)
    pe.add_argument("--segments", type=int, default=1000)
    pe.add_argument("--horizon", type=int, default=5)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_analyze_error)

    pa = asub.add_parser("ablate", help="matched ablation runs")
    pa.add_argument("--axis", required=True, choices=analysis.ABLATION_AXES)
    pa.add_argument("--env", default="coupled-chain")
    pa.add_argument("--agents", type=int, default=3)
    pa.add_argument("--state-dim", type=int, default=4)
    pa.add_argument("--seeds", type=int, default=3)
    pa.add_argument("--updates", type=int, default=200)
    pa.add_argument("--collect", type=int, default=3000)
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_analyze_ablate)

    pt = asub.add_parser("attention", help="attention-pattern dump")
    pt.add_argument("--ckpt", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_analyze_attention)

    pf = asub.add_parser("flops", help="aggregation FLOPs table")
    pf.add_argument("--agents", default="2,3,5,9")
    pf.add_argument("--tokens", type=int, default=16)
    pf.add_argument("--dim", type=int, default=256)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_analyze_flops)

    args = parser.parse_args(argv)
    return args.func(args)


def cmd_env_rollout(args):
    kwargs = {}
    if args.env == "coop-switch":
        kwargs["grid_size"] = args.grid_size
    else:
        kwargs["state_dim"] = args.state_dim
    env = make_env(
        args.env,
        n_agents=args.agents,
        seed=args.seed,
        episode_limit=args.episode_limit,
        **kwargs,
    )
    rng = np.random.default_rng(args.seed)
    episodes = run_episodes(env, random_policy(rng), args.episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.env}-seed{args.seed}.jsonl"
    write_episode_log(path, episodes)
    steps = sum(len(e) for e in episodes)
    print(f"wrote {len(episodes)} episodes ({steps} steps) to {path}")
    return 0


def cmd_tokenizer_train(args):
    data = Path(args.data)
    files = sorted(data.glob("*.jsonl")) if data.is_dir() else [data]
    if not files:
        raise SystemExit(f"no episode logs under {data}")
    obs = []
    for f in files:
        for ep in read_episode_log(f):
            obs.extend(r.obs for r in ep)
    obs = torch.from_numpy(np.concatenate(obs).astype(np.float32))
    torch.manual_seed(args.seed)
    tok = VQTokenizer(
        obs.shape[-1],
        n_codes=args.codebook,
        n_tokens=args.tokens,
        code_dim=args.code_dim,
        hidden=args.hidden,
    )
    tok.init_codes(obs[: max(args.batch, 4 * args.codebook)])
    opt = torch.optim.AdamW(tok.parameters(), lr=args.lr)
    rng = np.random.default_rng(args.seed)
    used = set()
    for u in range(args.updates):
        idx = rng.integers(len(obs), size=min(args.batch, len(obs)))
        total, parts, tokens, z_e = tok.loss(obs[idx])
        opt.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(tok.parameters(), 10.0)
        opt.step()
        tok.ema_update(z_e, tokens)
        used.update(torch.unique(tokens).tolist())
        if (u + 1) % max(args.updates // 10, 1) == 0:
            print(
                f"update {u + 1}: loss={float(total):.4f} "
                f"recon={float(parts['recon']):.4f} util={len(used) / tok.n_codes:.2%}"
            )
            used.clear()
    torch.save(
        {"version": 1, "kind": "vq", "obs_dim": obs.shape[-1], "state": tok.state_dict()},
        args.out,
    )
    print(f"saved tokenizer to {args.out}")
    return 0


def _build_trainer(args):
    if args.config:
        cfg = load_config(args.config)
    elif args.preset == "coop-switch":
        cfg = desk_coop_switch_config(seed=args.seed or 0)
    else:
        cfg = desk_coupled_chain_config(seed=args.seed or 0)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps:
        cfg.schedule.total_env_steps = args.steps
    return Trainer(cfg, out_dir=args.out)


def cmd_train(args):
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, out_dir=args.out)
    else:
        trainer = _build_trainer(args)
    result = trainer.run()
    print(json.dumps(result))
    return 0


def cmd_eval(args):
    trainer = Trainer.from_checkpoint(args.ckpt)
    result = trainer.evaluate(episodes=args.episodes, greedy=args.greedy)
    print(
        f"success rate {result['success_rate']:.2f} over {args.episodes} episodes; "
        f"return {result['mean_return']:.3f} +/- {result['std_return']:.3f}"
    )
    return 0


def cmd_imagine(args):
    from mawm.imagination import imagine

    trainer = Trainer.from_checkpoint(args.ckpt)
    horizon = args.horizon or trainer.cfg.dynamics.horizon
    obs, avail = trainer.buffer.sample_initial_states(args.rollouts, trainer.np_rng)
    rollout = imagine(
        trainer.world_model,
        trainer.policy,
        torch.from_numpy(obs.astype(np.float32)),
        torch.from_numpy(avail),
        horizon=horizon,
        n_stack=trainer.cfg.behavior.stack,
        generator=trainer.imag_gen,
    )
    out = Path(args.dump)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out / "rollouts.npz",
        obs=rollout.obs.numpy(),
        actions=rollout.actions.numpy(),
        rewards=rollout.rewards.numpy(),
        discounts=rollout.discounts.numpy(),
        cont_probs=rollout.cont_probs.numpy(),
        avail=rollout.avail.numpy(),
        alive=rollout.alive.numpy(),
    )
    print(f"dumped {args.rollouts} rollouts x {horizon} steps to {out / 'rollouts.npz'}")
    return 0


def cmd_analyze_error(args):
    trainer = Trainer.from_checkpoint(args.ckpt)
    episodes = analysis.collect_policy_episodes(trainer, args.episodes)
    result = analysis.compounding_error(
        trainer.world_model,
        episodes,
        horizon=args.horizon,
        n_segments=args.segments,
        seed=trainer.cfg.seed,
    )
    path = analysis.write_error_report(result, args.out)
    print(f"wrote {path}")
    return 0


def cmd_analyze_ablate(args):
    cfg = (
        desk_coupled_chain_config(state_dim=args.state_dim, n_agents=args.agents)
        if args.env == "coupled-chain"
        else desk_coop_switch_config()
    )
    rows = analysis.run_ablation(
        args.axis,
        cfg,
        seeds=tuple(range(args.seeds)),
        collect_transitions=args.collect,
        wm_updates=args.updates,
        out_dir=args.out,
    )
    print(f"wrote ablation report for {args.axis} ({len(rows)} rows) to {args.out}")
    return 0


def cmd_analyze_attention(args):
    trainer = Trainer.from_checkpoint(args.ckpt)
    batch = trainer.segment_batch(
        min(8, trainer.cfg.dynamics.batch_size), trainer.cfg.dynamics.horizon
    )
    analysis.dump_attention(trainer.world_model, batch, out_dir=args.out)
    print(f"wrote attention maps to {args.out}")
    return 0


def cmd_analyze_flops(args):
    n_list = tuple(int(x) for x in args.agents.split(","))
    rows = analysis.flops_report(
        n_list, tokens_per_obs=args.tokens, dim=args.dim, out_dir=args.out
    )
    for r in rows:
        print(
            f"n={r['n_agents']}: perceiver {r['perceiver_gflops']:.3f} GFLOPs, "
            f"self-attention {r['self_attention_gflops']:.3f} GFLOPs"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
