"""Command-line harness: simulate one episode, run learning, or self-check.

Exit codes: 0 success, 1 check or solve failure, 2 usage error (bad flags,
missing or invalid config).  All output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from shipmpc import check as check_mod
from shipmpc.config import RunConfig, write_json_atomic, write_text_atomic
from shipmpc.learner import (
    EpisodeLog,
    LearningAbortedError,
    LearningTrace,
    learn,
    run_episode,
)
from shipmpc.mission import dock_distance
from shipmpc.dynamics import VesselState
from shipmpc.nlp import NlpError

CSV_HEADER = "k,x,y,psi,u,v,r,f1,f2,f3,alpha2,alpha3,L,branch"
_ACTION_COLS = (0, 1, 2, 4, 5)  # skip the fixed alpha1 entry


def episode_to_csv(episode: EpisodeLog) -> str:
    """Trajectory CSV with K+1 data rows; floats use full repr round-trip.

    Rows 0..K-1 carry the state, the executed action, the stage cost, and the
    branch flag (1 = docking); row K is the final state with empty action
    fields.
    """
    lines = [CSV_HEADER]
    k_len = episode.length
    for k in range(k_len):
        s = episode.states[k]
        a = episode.actions[k]
        fields = (
            [str(k)]
            + [repr(float(x)) for x in s]
            + [repr(float(a[c])) for c in _ACTION_COLS]
            + [repr(float(episode.costs[k])), str(int(episode.branch_flags[k]))]
        )
        lines.append(",".join(fields))
    s = episode.states[k_len]
    lines.append(
        ",".join([str(k_len)] + [repr(float(x)) for x in s] + [""] * 7)
    )
    return "\n".join(lines) + "\n"


def trace_to_jsonl(trace: LearningTrace) -> str:
    lines = [json.dumps(rec.to_json_dict(), sort_keys=True) for rec in trace.records]
    return "\n".join(lines) + ("\n" if lines else "")


def _load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return RunConfig.from_file(path)


def cmd_simulate(config: RunConfig, seed: int, out_dir: str) -> int:
    """One episode under the configured initial parameters, no exploration."""
    rng = np.random.default_rng(seed)
    try:
        episode = run_episode(
            config.theta0,
            config.ocp_spec,
            config.solver,
            config.learning,
            rng,
            record_sensitivity=False,
            explore=False,
        )
    except NlpError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    csv_path = os.path.join(out_dir, "trajectory.csv")
    write_text_atomic(csv_path, episode_to_csv(episode))
    final_state = VesselState.from_array(episode.states[episode.length])
    pose_err = dock_distance(final_state, config.mission)
    flag = " (truncated)" if episode.truncated else ""
    print(f"K={episode.length}{flag}")
    print(f"terminal_pose_error={pose_err!r}")
    print(f"J={episode.j_value!r}")
    print(f"trajectory written to {csv_path}")
    return 0


def cmd_learn(
    config: RunConfig,
    seed: Optional[int],
    out_dir: str,
    steps: Optional[int],
    episodes: Optional[int],
) -> int:
    """Full learning run; writes the JSON-lines trace and per-episode CSVs."""
    learn_cfg = config.learning
    if seed is not None:
        learn_cfg.seed = seed
    if steps is not None:
        learn_cfg.max_learning_steps = steps
    if episodes is not None:
        learn_cfg.episodes_per_step = episodes
    aborted = False
    try:
        trace = learn(
            config.theta0, config.ocp_spec, config.solver, learn_cfg,
            keep_episodes=True,
        )
    except LearningAbortedError as exc:
        print(f"learning aborted: {exc}", file=sys.stderr)
        trace = exc.trace
        aborted = True

    write_text_atomic(os.path.join(out_dir, "trace.jsonl"), trace_to_jsonl(trace))
    ep_dir = os.path.join(out_dir, "episodes")
    for rec in trace.records:
        if not rec.episodes:
            continue
        for i, ep in enumerate(rec.episodes):
            name = f"step{rec.step:03d}_ep{i:02d}.csv"
            write_text_atomic(os.path.join(ep_dir, name), episode_to_csv(ep))
    theta = trace.final_theta
    write_json_atomic(
        os.path.join(out_dir, "theta_final.json"),
        {
            "theta_l": theta.theta_l.tolist(),
            "theta_eta": theta.theta_eta.tolist(),
            "theta_nu": theta.theta_nu.tolist(),
            "theta_a": theta.theta_a.tolist(),
            "theta_d": theta.theta_d,
            "theta_g": theta.theta_g,
        },
    )
    if trace.records:
        first, last = trace.records[0], trace.records[-1]
        print(f"learning steps recorded: {len(trace.records)}")
        print(f"J: {first.j_mean!r} -> {last.j_mean!r}")
        print(f"grad_norm: {first.grad_norm!r} -> {last.grad_norm!r}")
    print(f"outputs written to {out_dir}")
    return 1 if aborted else 0


def cmd_check(config: RunConfig, seed: int, corrupt_gradient: bool) -> int:
    """Run the verification battery and print one pass/fail line per check."""
    results = check_mod.run_battery(config, seed, corrupt_gradient=corrupt_gradient)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shipmpc",
        description="Vessel freight-mission simulator with MPC policy learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override RNG seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--verbose", action="store_true", help="enable solver logging")

    p_sim = sub.add_parser("simulate", help="run one episode under theta0")
    add_common(p_sim)
    p_learn = sub.add_parser("learn", help="run the learning loop")
    add_common(p_learn)
    p_learn.add_argument("--steps", type=int, default=None, help="learning steps override")
    p_learn.add_argument("--episodes", type=int, default=None, help="episodes per step override")
    p_check = sub.add_parser("check", help="run the verification battery")
    add_common(p_check)
    p_check.add_argument(
        "--corrupt-gradient",
        action="store_true",
        help="internal test hook: inject a gradient error and expect failure",
    )
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.verbose or config.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        config.solver.verbose = True
    out_dir = args.out if args.out is not None else config.output_dir
    seed = args.seed

    if args.command == "simulate":
        return cmd_simulate(config, seed if seed is not None else 0, out_dir)
    if args.command == "learn":
        return cmd_learn(config, seed, out_dir, args.steps, args.episodes)
    if args.command == "check":
        return cmd_check(
            config, seed if seed is not None else 0, args.corrupt_gradient
        )
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
