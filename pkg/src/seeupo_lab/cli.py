"""Command line entry point: ``seeupo-lab <subcommand>``.

Relative output paths resolve against ``$SEEUPO_LAB_OUTPUT_DIR`` when it
is set, else the working directory. Every file is written atomically and
contains no timestamps, so repeated runs produce identical bytes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .envs import (MdpShape, SpecError, TreeBanditShape, TreeBanditSpec, build_degradation_mdp,
                   generate_finite_mdp, generate_tree_bandit, spec_from_json, spec_to_json)
from .advantage import grae_batch
from .policy import TabularSoftmaxPolicy
from .report import csv_text, json_text, write_atomic
from .rng import make_rng
from .seeupo import ORDERS, run_seeupo
from .suites import CHECKS, SEEUPO_ITERATIONS, order_compare, run_checks, seeupo_suite
from .theory import backward_induction, brute_force_optimal, degradation_reference_policy
from .updates import ALGORITHMS, BatchSource, UpdateConfig, _normalize_joint, ppu_objective, run_algorithm

OUTPUT_DIR_VAR = "SEEUPO_LAB_OUTPUT_DIR"
ORDER_SCHEMA = "seeupo_lab.order_compare/1"
NORM_SCHEMA = "seeupo_lab.norm_compare/1"


class UsageError(Exception):
    pass


def output_path(path: str) -> str:
    if os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUTPUT_DIR_VAR, os.getcwd()), path)


def _actions_arg(text: str | None):
    if text is None:
        return None
    parts = [int(x) for x in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def _env_from_dict(d: dict, base_dir: str):
    """An env is either {"path": file} or a generator description {"kind": ..., "seed": ..., ...}."""
    if "path" in d:
        path = d["path"] if os.path.isabs(d["path"]) else os.path.join(base_dir, d["path"])
        if not os.path.exists(path):
            raise UsageError(f"environment file not found: {path}")
        with open(path) as fh:
            return spec_from_json(fh.read())
    kind = d.get("kind", "tree")
    if kind == "degradation":
        return build_degradation_mdp()
    shape_args = {k: tuple(v) if isinstance(v, list) and k != "actions" else v for k, v in d.items()
                  if k not in ("kind", "seed")}
    if kind == "tree":
        return generate_tree_bandit(int(d.get("seed", 0)), TreeBanditShape(**shape_args))
    if kind == "mdp":
        return generate_finite_mdp(int(d.get("seed", 0)), MdpShape(**shape_args))
    raise UsageError(f"unknown environment kind {kind!r}")


# ---------------------------------------------------------------- commands


def cmd_gen_env(args) -> int:
    if args.kind == "tree":
        shape = TreeBanditShape(num_states=args.states, horizon=args.turns,
                                actions=_actions_arg(args.actions) or 2, early_stop_prob=args.early_stop)
        spec = generate_tree_bandit(args.seed, shape)
    elif args.kind == "mdp":
        shape = MdpShape(num_states=args.states, num_actions=int(args.actions or 2), horizon=args.turns,
                         discount=args.discount)
        spec = generate_finite_mdp(args.seed, shape)
    else:
        spec = build_degradation_mdp()
    path = output_path(args.out)
    write_atomic(path, spec_to_json(spec))
    print(f"wrote {path}")
    if isinstance(spec, TreeBanditSpec):
        print(f"paths: {spec.num_paths}")
        if args.oracle:
            print(f"J*: {backward_induction(spec).j_star!r}")
    elif args.oracle:
        print("J*: oracle applies to tree bandits only")
    return 0


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    env = _env_from_dict(cfg.get("env", {}), os.path.dirname(os.path.abspath(args.config)))
    algorithm = cfg.get("algorithm", "SeeUPO")
    update = UpdateConfig(**cfg.get("update", {}))
    mode = cfg.get("mode", "exact")
    iterations = int(cfg.get("iterations", 100))
    seed = int(cfg.get("seed", 0))
    B, G = int(cfg.get("B", 8)), int(cfg.get("G", 8))
    if algorithm == "SeeUPO":
        if not isinstance(env, TreeBanditSpec):
            raise UsageError("SeeUPO needs a tree bandit environment")
        if cfg.get("order", "reverse") not in ORDERS:
            raise UsageError(f"order must be one of {ORDERS}")
    elif algorithm not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {algorithm!r}")
    init = cfg.get("init", "zero")
    if isinstance(env, TreeBanditSpec):
        policy = TabularSoftmaxPolicy.for_tree_bandit(env, init=init, seed=seed)
    elif init == "reference":
        if cfg.get("env", {}).get("kind") != "degradation":
            raise UsageError("init 'reference' applies to the degradation environment")
        policy = degradation_reference_policy(env)
    else:
        policy = TabularSoftmaxPolicy.for_mdp(env, init=init, seed=seed)
    j_star = backward_induction(env).j_star if isinstance(env, TreeBanditSpec) else None
    try:
        if algorithm == "SeeUPO":
            report = run_seeupo(env, policy, update, iterations, cfg.get("order", "reverse"), mode, seed, B, G,
                                j_star, bool(cfg.get("check_m", False)), record_advantages=True)
        else:
            report = run_algorithm(algorithm, env, policy, update, iterations, seed, mode, B, G, j_star,
                                   record_advantages=True)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = output_path(args.out_dir)
    write_atomic(os.path.join(out_dir, "report.csv"), report.to_csv())
    write_atomic(os.path.join(out_dir, "report.json"), report.to_json())
    write_atomic(os.path.join(out_dir, "advantages.csv"), report.advantages_csv())
    write_atomic(os.path.join(out_dir, "policy.json"), policy.snapshot().to_json())
    s = report.summary()
    print(f"{algorithm}: J {s['initial_J']:.6f} -> {s['final_J']:.6f}"
          + ("" if s["final_gap"] is None else f" (gap to J* {s['final_gap']:.3g})"))
    return 0


def cmd_verify(args) -> int:
    names = list(CHECKS) if args.all or not args.checks else args.checks
    results = run_checks(names)
    for r in results:
        print(r.line() + (f" {r.seconds:.2f}s" if args.timings else ""))
    card = {"schema": "seeupo_lab.scorecard/1", "passed": all(r.passed for r in results),
            "checks": {r.name: r.to_dict() for r in results}}
    path = output_path(args.out)
    write_atomic(path, json_text(card))
    print(f"scorecard: {path}")
    return 0 if card["passed"] else 1


def cmd_oracle(args) -> int:
    with open(args.spec) as fh:
        spec = spec_from_json(fh.read())
    if not isinstance(spec, TreeBanditSpec):
        raise UsageError("the optimal-value oracle applies to tree bandits")
    tree = backward_induction(spec)
    out = {"J_star": tree.j_star,
           "optimal_paths": {str(s): list(tree.optimal_path(s)) for s in range(spec.num_initial_states)}}
    if args.brute_force:
        out["J_star_brute_force"] = brute_force_optimal(spec)[0]
        out["agree"] = out["J_star_brute_force"] == tree.j_star
    print(json_text(out), end="")
    return 0


def cmd_order_compare(args) -> int:
    rows = order_compare(args.iterations)
    cols = ["instance", "order", "J_star", "final_J", "gap", "max_decrease"]
    write_atomic(output_path(args.out), csv_text(ORDER_SCHEMA, cols, rows))
    print(f"{'instance':>8s} {'reverse':>10s} {'natural':>10s} {'random':>10s} {'J*':>10s}")
    by = {}
    for r in rows:
        by.setdefault(r["instance"], {})[r["order"]] = r
    for i, d in sorted(by.items()):
        print(f"{i:8d} " + " ".join(f"{d[o]['final_J']:10.6f}" for o in ORDERS) + f" {d['reverse']['J_star']:10.6f}")
    return 0


def _argmax_agreement(spec, policy, config, seed, candidates: int = 32) -> bool:
    """Whether raw and batch-normalized advantages pick the same best candidate under the clipped objective."""
    batch = BatchSource(spec, policy, "sampled", 8, 8, seed).batch(policy, 0)
    raw = grae_batch(batch)
    norm, _, _ = _normalize_joint(batch, raw, "batch")
    rng = make_rng(seed, "norm_candidates")
    scores_raw, scores_norm = [], []
    for _ in range(candidates):
        cand = policy.copy()
        cand.add_to_logits(rng.normal(0, 0.3, size=policy.logits.shape))
        scores_raw.append(ppu_objective(batch, raw, cand, policy, config.clip_epsilon))
        scores_norm.append(ppu_objective(batch, norm, cand, policy, config.clip_epsilon))
    return int(np.argmax(scores_raw)) == int(np.argmax(scores_norm))


def cmd_norm_compare(args) -> int:
    rows = []
    for i, spec in enumerate(seeupo_suite()[: args.instances]):
        j_star = backward_induction(spec).j_star
        row = {"instance": i, "J_star": j_star}
        for mode in ("none", "batch"):
            cfg = UpdateConfig(learning_rate=args.learning_rate, normalization=mode)
            pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
            rep = run_seeupo(spec, pol, cfg, args.iterations, "reverse", "sampled", i, 8, 8, j_star)
            row[f"final_J_{mode}"] = rep.returns[-1]
        row["argmax_agree"] = _argmax_agreement(spec, TabularSoftmaxPolicy.for_tree_bandit(spec),
                                                UpdateConfig(), i)
        rows.append(row)
    cols = ["instance", "J_star", "final_J_none", "final_J_batch", "argmax_agree"]
    write_atomic(output_path(args.out), csv_text(NORM_SCHEMA, cols, rows))
    for r in rows:
        print(f"{r['instance']:3d} none {r['final_J_none']:.6f} batch {r['final_J_batch']:.6f} "
              f"J* {r['J_star']:.6f} argmax_agree {int(r['argmax_agree'])}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seeupo-lab", description="Tabular sequential-update policy optimization lab.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", help="generate an environment spec (JSON)")
    g.add_argument("--kind", choices=("tree", "mdp", "degradation"), default="tree")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--turns", type=int, default=2, help="tree turns or MDP horizon")
    g.add_argument("--states", type=int, default=1, help="initial states (tree) or states (mdp)")
    g.add_argument("--actions", default=None, help="actions per turn: one int or a comma list")
    g.add_argument("--early-stop", type=float, default=0.0, help="probability a tree prefix ends early")
    g.add_argument("--discount", type=float, default=1.0)
    g.add_argument("--oracle", action="store_true", help="print J* from backward induction")
    g.add_argument("--out", default="env.json")
    g.set_defaults(func=cmd_gen_env)

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--out-dir", default="run")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run numbered checks and write a JSON scorecard")
    v.add_argument("checks", nargs="*", metavar="CHECK",
                   help=f"any of: {', '.join(CHECKS)}")
    v.add_argument("--all", action="store_true")
    v.add_argument("--out", default="scorecard.json")
    v.add_argument("--timings", action="store_true", help="print wall time per check (never written to files)")
    v.set_defaults(func=cmd_verify)

    o = sub.add_parser("oracle", help="optimal value of a tree bandit spec")
    o.add_argument("spec")
    o.add_argument("--brute-force", action="store_true", help="cross-check by exhaustive enumeration")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("order-compare", help="final J per update order on the SeeUPO suite")
    c.add_argument("--iterations", type=int, default=SEEUPO_ITERATIONS)
    c.add_argument("--out", default="order_compare.csv")
    c.set_defaults(func=cmd_order_compare)

    n = sub.add_parser("norm-compare", help="batch normalization on/off in sampled mode")
    n.add_argument("--iterations", type=int, default=100)
    n.add_argument("--instances", type=int, default=10)
    n.add_argument("--learning-rate", type=float, default=1.0)
    n.add_argument("--out", default="norm_compare.csv")
    n.set_defaults(func=cmd_norm_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SpecError, FileNotFoundError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
