"""Command-line entry points: gen | train | eval | rollout | optimize |
eval-policy | serve. Every command that involves randomness takes --seed;
failures print one machine-parsable `error: ...` line and exit nonzero.
MOBITWIN_DATA is the default data root when --data is omitted."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path


def _data_dirs(args) -> list[str]:
    if getattr(args, "data", None):
        return list(args.data)
    env = os.environ.get("MOBITWIN_DATA")
    if env:
        return [env]
    raise ValueError("no data directory: pass --data or set MOBITWIN_DATA")


def cmd_gen(args) -> int:
    from .physics import ScenarioConfig, generate_scenario

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    n_maps = int(raw.pop("n_maps", 1))
    base_seed = args.seed if args.seed is not None else raw.get("seed", 0)
    for i in range(n_maps):
        d = dict(raw)
        d["seed"] = int(base_seed) + i
        d.pop("map_id", None)
        cfg = ScenarioConfig.from_dict(d)
        out = generate_scenario(cfg, args.out)
        print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    from .data import fit_normalization, prepare_maps, split_maps
    from .fstcore import ModelConfig
    from .netcore import discover_datasets, load_dataset
    from .training import TrainConfig, train

    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    tc = raw.get("train", {})
    if args.seed is not None:
        tc["seed"] = args.seed
    train_cfg = TrainConfig(**tc)
    datasets = [load_dataset(d) for root in _data_dirs(args) for d in discover_datasets(root)]
    train_ds, val_ds, _ = split_maps(datasets, seed=train_cfg.seed)
    spec = fit_normalization(train_ds)
    result = train(
        model_cfg,
        prepare_maps(train_ds, spec),
        prepare_maps(val_ds, spec),
        train_cfg,
        spec,
        args.out,
    )
    print(f"wrote {result.checkpoint} (best val loss {result.best_val_loss:.4f}, digest {result.digest[:12]})")
    return 0


def cmd_eval(args) -> int:
    from .data import prepare_maps
    from .fstcore import load_checkpoint
    from .netcore import discover_datasets, load_dataset
    from .training import evaluate

    model, spec, _ = load_checkpoint(args.ckpt)
    datasets = [load_dataset(d) for root in _data_dirs(args) for d in discover_datasets(root)]
    maps = prepare_maps(datasets, spec)
    report = evaluate(model, maps, spec, horizon_mode=args.mode)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text)
        print(f"wrote {args.report}")
    else:
        print(text)
    return 0


def cmd_rollout(args) -> int:
    from .service import RolloutBody, load_server_state, rollout_payload

    state = load_server_state(args.ckpt, _data_dirs(args))
    overrides = json.loads(Path(args.overrides).read_text()) if args.overrides else []
    map_id = args.map or sorted(state.maps)[0]
    body = RolloutBody(map_id=map_id, start_t=args.start, k_rounds=args.k, overrides=overrides)
    payload = rollout_payload(state, body)
    Path(args.out).write_text(json.dumps(payload, sort_keys=True))
    print(f"wrote {args.out}")
    return 0


def cmd_optimize(args) -> int:
    import torch

    from .data import prepare_map
    from .fstcore import load_checkpoint
    from .netcore import load_dataset
    from .rlopt import (
        LoadBalanceTask,
        PolicyConfig,
        WorldModelEnv,
        make_balance_task,
        ppo_train,
    )

    task_spec = json.loads(Path(args.task).read_text())
    model, spec, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(task_spec["map_dir"])
    pm = prepare_map(ds, spec)
    neighbors = {c.id: ds.graph.neighbors(c.id) for c in ds.graph.cells}
    task = make_balance_task(
        ds.traffic.values,
        neighbors,
        shift_fraction=task_spec.get("shift_fraction", 0.35),
        lambda_delta=task_spec.get("lambda_delta", 0.01),
    )
    pc = PolicyConfig(**task_spec.get("ppo", {}))
    if args.seed is not None:
        pc.seed = args.seed
    env = WorldModelEnv(model, spec, pm, task, episode_len=task_spec.get("episode_len", 96))
    result = ppo_train(env, pc)
    torch.save(
        {
            "state_dict": result.policy.state_dict(),
            "obs_dim": env.obs_dim,
            "act_dim": env.act_dim,
            "policy_config": asdict(pc),
            "task": {k: v for k, v in task_spec.items()},
            "curve": result.curve,
        },
        args.out,
    )
    print(f"wrote {args.out} (last mean return {result.curve[-1]['mean_return']:.3f})")
    return 0


def cmd_eval_policy(args) -> int:
    import torch

    from .data import prepare_map
    from .fstcore import load_checkpoint
    from .netcore import load_dataset
    from .rlopt import (
        ActorCritic,
        PolicyConfig,
        RandomPolicy,
        WorldModelEnv,
        ZeroPolicy,
        evaluate_policy,
        make_balance_task,
    )

    blob = torch.load(args.policy, weights_only=False)
    task_spec = blob["task"]
    model, spec, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(task_spec["map_dir"])
    pm = prepare_map(ds, spec)
    neighbors = {c.id: ds.graph.neighbors(c.id) for c in ds.graph.cells}
    task = make_balance_task(
        ds.traffic.values,
        neighbors,
        shift_fraction=task_spec.get("shift_fraction", 0.35),
        lambda_delta=task_spec.get("lambda_delta", 0.01),
    )
    pc = PolicyConfig(**blob["policy_config"])
    policy = ActorCritic(blob["obs_dim"], blob["act_dim"], pc)
    policy.load_state_dict(blob["state_dict"])
    env = WorldModelEnv(model, spec, pm, task, episode_len=task_spec.get("episode_len", 96))
    seeds = list(range(args.seeds))
    report = evaluate_policy(
        {
            "learned": policy,
            "zero_action": ZeroPolicy(env.act_dim),
            "random_action": RandomPolicy(env.act_dim, task.delta_bound, seed=0),
        },
        env,
        seeds,
    )
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text)
        print(f"wrote {args.report}")
    else:
        print(text)
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    host, _, port = args.bind.partition(":")
    serve(args.ckpt, _data_dirs(args), host=host or "127.0.0.1", port=int(port or 8700))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobitwin", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenario datasets")
    g.add_argument("--config", help="scenario config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the world model")
    t.add_argument("--data", nargs="+")
    t.add_argument("--config", help="JSON with {model: {...}, train: {...}}")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", nargs="+")
    e.add_argument("--mode", choices=["oneshot", "rollout"], default="oneshot")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="run a (counterfactual) rollout")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", nargs="+")
    r.add_argument("--map", help="map id (default: first)")
    r.add_argument("--k", type=int, default=1)
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--overrides", help="JSON list of {cell_id, channel, t_start, t_end, value}")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    o = sub.add_parser("optimize", help="train a PPO load-balancing policy in the world model")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--task", required=True, help="task JSON with map_dir etc")
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int, default=None)
    o.set_defaults(func=cmd_optimize)

    ep = sub.add_parser("eval-policy", help="steady-state RMSE vs baselines")
    ep.add_argument("--policy", required=True)
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--seeds", type=int, default=5)
    ep.add_argument("--report")
    ep.set_defaults(func=cmd_eval_policy)

    s = sub.add_parser("serve", help="serve the rollout HTTP API")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", nargs="+")
    s.add_argument("--bind", default="127.0.0.1:8700")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
