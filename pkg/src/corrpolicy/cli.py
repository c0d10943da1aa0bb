"""Command-line pipeline: gen-data, pretrain, train, eval, inspect, bench-fk.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import corrnet, dataset as ds, diffpolicy, obsbuild, se3kin, toyenv
from .config import ConfigError, RunConfig
from .nncore import CheckpointError
from .seeding import component_rng

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _episode_seed(seed: int, index: int) -> int:
    return (seed << 20) + index


def _run_expert_episode(env, ep_seed: int, max_steps: int, tail: int):
    rows = {name: [] for name in obsbuild.STREAM_ORDER}
    state = env.reset(ep_seed)
    tail_left = tail
    steps = 0
    while steps < max_steps:
        obs = env.observe(state)
        arm, hand = env.expert_action(state)
        rows["object_pc"].append(obs.obj_pc)
        rows["hand_pc"].append(obs.hand_pc)
        rows["arm_state"].append(obs.arm_state)
        rows["hand_state"].append(obs.hand_state)
        rows["arm_action"].append(arm)
        rows["hand_action"].append(hand)
        rows["object_pose"].append(env.object_pose_row(state))
        state = env.step(state, arm, hand)
        steps += 1
        if env.success(state):
            if tail_left == 0:
                break
            tail_left -= 1
    pack = obsbuild.EpisodePack(
        task="planar-push",
        dt=env.dt,
        n_points=env.n_points,
        arm_dim=env.arm_dim,
        hand_dim=env.hand_dim,
        streams={k: np.stack(v).astype(np.float32) for k, v in rows.items()},
    )
    return pack, env.success(state)


def cmd_gen_data(args) -> int:
    config = RunConfig.load(args.config)
    if args.env != "planar-push":
        print(f"unknown environment {args.env!r}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env = toyenv.PlanarPushEnv(
        toyenv.build_toy_model(n_points=config.n_points, gamma=config.gamma, theta=config.theta)
    )
    entries = []
    for i in range(args.episodes):
        ep_seed = _episode_seed(args.seed, i)
        pack, success = _run_expert_episode(env, ep_seed, config.max_steps, config.episode_tail)
        name = f"ep_{i:04d}{ds.EPISODE_SUFFIX}"
        obsbuild.write_episode(pack, out / name)
        entries.append({"file": name, "seed": ep_seed, "steps": pack.steps, "success": bool(success)})
        print(f"episode {i}: steps={pack.steps} success={success}")
    manifest = {
        "task": "planar-push",
        "seed": args.seed,
        "dt": env.dt,
        "n_points": config.n_points,
        "arm_dim": env.arm_dim,
        "hand_dim": env.hand_dim,
        "episodes": entries,
    }
    (out / ds.MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(entries)} episodes to {out}")
    return EXIT_OK


def _write_metrics_csv(path, rows, columns):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else str(v)


def cmd_pretrain(args) -> int:
    config = RunConfig.load(args.config)
    data = ds.DemoDataset.from_dir(args.data)
    train_set, held_set = data.split(config.holdout_fraction)
    pack = data.packs[0]
    enc_config = config.encoder_config(pack.arm_dim, pack.hand_dim)
    if args.resume:
        params, opt_state, normalizer, enc_config, manifest = corrnet.load_encoder_checkpoint(args.resume)
        start_epoch = manifest["epoch"]
        seed = manifest["seed"]
    else:
        params, opt_state, start_epoch, seed = None, None, 0, args.seed
        normalizer = obsbuild.fit_normalizer(train_set.packs)
    params, opt, metrics, summary = corrnet.pretrain_encoder(
        train_set,
        held_set,
        normalizer,
        enc_config,
        epochs=config.pretrain_epochs,
        batch_size=config.pretrain_batch,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        seed=seed,
        subset_points=config.pretrain_subset,
        frame_stride=config.pretrain_stride,
        params=params,
        opt_state=opt_state,
        start_epoch=start_epoch,
    )
    corrnet.save_encoder_checkpoint(
        args.out, params, opt, normalizer, enc_config, config.pretrain_epochs, seed, summary
    )
    _write_metrics_csv(
        str(args.out) + ".metrics.csv", metrics, ["epoch", "loss", "contact_mse", "coordination_mse"]
    )
    for row in metrics:
        print(f"epoch {row['epoch']}: loss={row['loss']:.5f} contact={row['contact_mse']:.5f} coord={row['coordination_mse']:.5f}")
    print(
        "held-out contact mse {:.5f} -> {:.5f}, pearson {:.3f} -> {:.3f}".format(
            summary["held_contact_mse_before"],
            summary["held_contact_mse_after"],
            summary["held_contact_pearson_before"],
            summary["held_contact_pearson_after"],
        )
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    data = ds.DemoDataset.from_dir(args.data)
    pack = data.packs[0]
    policy_config = config.policy_config(pack.arm_dim, pack.hand_dim)
    if args.encoder:
        enc_params, _, normalizer, enc_config, _ = corrnet.load_encoder_checkpoint(args.encoder)
    else:
        enc_config = config.encoder_config(pack.arm_dim, pack.hand_dim)
        enc_params = corrnet.init_encoder_params(enc_config, component_rng(args.seed, "init"))
        normalizer = obsbuild.fit_normalizer(data.packs)
    settings = config.train_settings(freeze_encoder=args.freeze_encoder)
    den_params, enc_params, metrics = diffpolicy.train_policy(
        data, normalizer, enc_params, enc_config, policy_config, settings, args.seed
    )
    bundle = diffpolicy.PolicyBundle(
        enc_params=enc_params,
        den_params=den_params,
        enc_config=enc_config,
        policy_config=policy_config,
        schedule=diffpolicy.make_schedule(policy_config.diffusion_steps, policy_config.schedule),
        normalizer=normalizer,
    )
    diffpolicy.save_policy_checkpoint(
        args.out, bundle, args.seed, extra={"pretrained": bool(args.encoder), "frozen_encoder": args.freeze_encoder}
    )
    _write_metrics_csv(str(args.out) + ".metrics.csv", metrics, ["phase", "epoch", "loss"])
    for row in metrics:
        print(f"{row['phase']} {row['epoch']}: loss={row['loss']:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    bundle = diffpolicy.load_policy_checkpoint(args.policy)
    env = toyenv.PlanarPushEnv(
        toyenv.build_toy_model(n_points=bundle.enc_config.n_points, gamma=config.gamma, theta=config.theta)
    )
    rows = []
    wall_total = 0.0
    steps_total = 0
    for i in range(args.episodes):
        ep_seed = _episode_seed(args.seed, i)
        record = diffpolicy.rollout_policy(
            env,
            bundle.enc_params,
            bundle.enc_config,
            bundle.den_params,
            bundle.policy_config,
            bundle.schedule,
            bundle.normalizer,
            seed=ep_seed,
            max_steps=config.max_steps,
        )
        rows.append({"episode": i, "seed": ep_seed, "success": int(record.success), "steps": record.steps})
        wall_total += record.wall_seconds
        steps_total += record.steps
        print(f"episode {i}: success={record.success} steps={record.steps} rate={record.step_rate:.1f}/s")
    fraction = float(np.mean([r["success"] for r in rows])) if rows else 0.0
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write("episode,seed,success,steps\n")
        for r in rows:
            fh.write(f"{r['episode']},{r['seed']},{r['success']},{r['steps']}\n")
        fh.write(f"# success_fraction,{fraction:.4f}\n")
    # Wall-clock figures go to a sidecar so the report itself stays byte-deterministic.
    timing = {
        "episodes": args.episodes,
        "env_steps": steps_total,
        "wall_seconds": wall_total,
        "steps_per_second": steps_total / wall_total if wall_total > 0 else None,
    }
    Path(str(args.report) + ".timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    print(f"success fraction: {fraction:.4f} ({sum(r['success'] for r in rows)}/{len(rows)})")
    if wall_total > 0:
        print(f"policy step rate: {steps_total / wall_total:.2f} env steps/s")
    return EXIT_OK


def cmd_inspect(args) -> int:
    config = RunConfig.load(args.config)
    pack = obsbuild.read_episode(args.episode)
    if not 0 <= args.step < pack.steps:
        print(f"step {args.step} out of range (episode has {pack.steps})", file=sys.stderr)
        return EXIT_DATA
    contact = ds.contact_targets(pack, args.step, config.gamma, config.theta)
    obj = pack.streams["object_pc"][args.step]
    hand = pack.streams["hand_pc"][args.step]
    predicted = None
    if args.encoder:
        from dataclasses import replace

        from .nncore import Tensor

        enc_params, _, normalizer, enc_config, _ = corrnet.load_encoder_checkpoint(args.encoder)
        frame = ds.normalized_frame(pack, args.step, normalizer)
        feats = corrnet.encode_observation(
            {k: Tensor(v.data) for k, v in enc_params.items()},
            replace(enc_config, n_points=pack.n_points),
            Tensor(frame["obj_pc"][None]),
            Tensor(frame["hand_pc"][None]),
            Tensor(frame["arm_state"][None]),
            Tensor(frame["hand_state"][None]),
        )
        predicted = corrnet.predict_contact(feats.phi_h, feats.phi_o, enc_params).data[0]
        r = float(np.corrcoef(predicted, contact)[0, 1])
        print(f"predicted-vs-true contact pearson r = {r:.4f}")
    with open(f"{args.out}_object.csv", "w", encoding="utf-8") as fh:
        fh.write("x,y,z,contact" + (",predicted\n" if predicted is not None else "\n"))
        for i in range(pack.n_points):
            row = f"{obj[i,0]:.6f},{obj[i,1]:.6f},{obj[i,2]:.6f},{contact[i]:.6f}"
            if predicted is not None:
                row += f",{predicted[i]:.6f}"
            fh.write(row + "\n")
    with open(f"{args.out}_hand.csv", "w", encoding="utf-8") as fh:
        fh.write("x,y,z\n")
        for i in range(pack.n_points):
            fh.write(f"{hand[i,0]:.6f},{hand[i,1]:.6f},{hand[i,2]:.6f}\n")
    print(f"wrote {args.out}_object.csv and {args.out}_hand.csv (step {args.step})")
    return EXIT_OK


def cmd_bench_fk(args) -> int:
    per_link = max(1, (2 * args.points) // args.links)
    links = []
    joints = []
    rng = component_rng(args.seed, "bench")
    for i in range(args.links):
        links.append(se3kin.Link(f"link{i}", "cylinder", (0.02, 0.1)))
        if i:
            axis = np.zeros(3)
            axis[i % 3] = 1.0
            joints.append(
                se3kin.Joint(
                    "revolute" if i % 2 else "prismatic",
                    axis,
                    i - 1,
                    se3kin.Pose(np.array([1.0, 0, 0, 0]), np.array([0.05, 0.0, 0.02])),
                    (-1.5, 1.5),
                )
            )
    chain = se3kin.KinematicChain(tuple(links), tuple(joints))
    samples = [se3kin.sample_link_surface(l, per_link, seed=i) for i, l in enumerate(chain.links)]
    print(f"bench-fk: links={args.links} samples/link={per_link} output_points={args.points} seconds={args.seconds}")
    q = se3kin.JointVector.clamp(chain, rng.uniform(-1, 1, chain.n_joints))
    se3kin.fk_pointcloud(chain, q, samples, n_points=args.points)  # warmup
    calls = 0
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < args.seconds:
        q = se3kin.JointVector.clamp(chain, rng.uniform(-1, 1, chain.n_joints))
        se3kin.fk_pointcloud(chain, q, samples, n_points=args.points)
        calls += 1
    rate = calls / (time.perf_counter() - t0)
    print(f"fk_pointcloud rate: {rate:.2f} calls/s")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="corrpolicy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstration episodes")
    p.add_argument("--env", default="planar-push")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contact/coordination pretraining of the encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="train the diffusion policy")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", default=None, help="pretrained encoder checkpoint (omit for random init)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-encoder", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run seeded evaluation rollouts")
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="dump clouds and contact maps for one step")
    p.add_argument("--episode", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("bench-fk", help="measure fk_pointcloud throughput")
    p.add_argument("--links", type=int, default=20)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_fk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, obsbuild.EpisodeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
