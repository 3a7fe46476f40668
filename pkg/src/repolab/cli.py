"""``repolab`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 validation/configuration, 4 a numeric
check failed, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import theory
from .analysis import RunResult, emit_summary, fit_scaling_law, margin_proxy, read_summary, summary_rows, win_rate
from .config import MissingSeedError, RunConfig, parse_overrides
from .datagen import load_dataset, save_dataset
from .errors import ConfigError, DegenerateFitError, InvalidInputError, ParseError, RepoLabError
from .experiment import EVAL_STREAM, build_task, eval_prompts
from .losses import KINDS
from .paramio import load_params, save_params
from .policy import fit_sft
from .trainer import GammaSchedule, read_metrics, train, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4, 5
CHECK_FAMILIES = ("sigmoid", "envelope", "argmin", "underestimation", "gradcheck")


class UsageError(RepoLabError):
    pass


# flag aliases for common io keys
ALIASES = {"data": "io.data", "init_params": "io.init_params", "ref_params": "io.ref_params",
           "policy_a": "io.policy_a", "policy_b": "io.policy_b", "gammas": "sweep.gammas"}


def _global_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", help="master seed (mandatory for data and training)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    parser = argparse.ArgumentParser(prog="repolab", description=__doc__.splitlines()[0], parents=[parent])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[parent], help="generate a synthetic preference dataset")

    p = sub.add_parser("train", parents=[parent], help="train one policy")
    p.add_argument("--data")
    p.add_argument("--init-params", dest="init_params")
    p.add_argument("--ref-params", dest="ref_params", help="reference policy file, or 'init'")
    p.add_argument("--sft", action="store_true", help="fit SFT on the winners before preference training")

    p = sub.add_parser("sweep-gamma", parents=[parent], help="independent runs over a list of gamma values")
    p.add_argument("--data")
    p.add_argument("--init-params", dest="init_params")
    p.add_argument("--ref-params", dest="ref_params")
    p.add_argument("--gammas", help="comma-separated gamma values")
    p.add_argument("--sft", action="store_true")

    p = sub.add_parser("verify", parents=[parent], help="run the numerical theory checks")
    p.add_argument("--check", action="append", choices=CHECK_FAMILIES, help="restrict to a check family")
    p.add_argument("--tolerance", type=float, help="override the continuous-deviation tolerances")
    p.add_argument("--cases", type=int, default=20, help="random cases per loss kind for gradcheck")

    p = sub.add_parser("fit-scaling", parents=[parent], help="fit R(d) = d (alpha - beta log d) to run outputs")
    p.add_argument("paths", nargs="+", help="summary.csv files or run directories")

    p = sub.add_parser("eval-winrate", parents=[parent], help="gold-reward win rate of policy A over policy B")
    p.add_argument("--data")
    p.add_argument("--policy-a", dest="policy_a")
    p.add_argument("--policy-b", dest="policy_b")
    return parser


def _resolve_config(args, extra: List[str]) -> RunConfig:
    overrides = parse_overrides(extra)
    for attr, key in ALIASES.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "sft", False):
        overrides["sft.enabled"] = "true"
    return RunConfig.load(args.config, overrides)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _require(cfg: RunConfig, key: str) -> str:
    val = cfg[key]
    if val is None:
        raise ConfigError(f"{key} is required (flag --{key.split('.', 1)[1].replace('_', '-')})")
    if not Path(val).exists():
        raise ConfigError(f"{key}: {val} does not exist")
    return val


def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec = cfg.task_spec()
    out = _out_dir(args)
    if args.dry_run:
        print(f"gen-data: configuration valid (n={spec.n}, seed={spec.seed})")
        return EXIT_OK
    task = build_task(spec)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "dataset.jsonl", task.meta, task.dataset)
    save_params(out / "sampler.params", task.sampler)
    (out / "config.txt").write_text(cfg.dump())
    print(f"wrote {len(task.dataset)} records to {out / 'dataset.jsonl'}")
    return EXIT_OK


def _load_training_inputs(cfg: RunConfig):
    train_cfg = cfg.train_config()
    data_path = _require(cfg, "io.data")
    init_path = _require(cfg, "io.init_params")
    ref_spec = cfg["io.ref_params"]
    if train_cfg.loss.needs_reference and ref_spec is None:
        raise ConfigError(f"loss {train_cfg.loss.kind} needs a reference policy (--ref-params PATH or 'init')")
    if not train_cfg.loss.needs_reference and ref_spec is not None:
        raise ConfigError(f"loss {train_cfg.loss.kind} is reference-free; drop --ref-params")
    if ref_spec not in (None, "init") and not Path(ref_spec).exists():
        raise ConfigError(f"io.ref_params: {ref_spec} does not exist")
    return train_cfg, data_path, init_path, ref_spec


def _prepare(cfg, data_path, init_path, ref_spec):
    meta, dataset = load_dataset(data_path)
    init = load_params(init_path)
    if (init.vocab_size, init.class_count) != (meta.vocab_size, meta.class_count):
        raise ConfigError("initial policy does not match the dataset vocabulary / class count")
    if cfg["sft.enabled"]:
        init = fit_sft(init, dataset, cfg["sft.epochs"], cfg["sft.lr"])
    ref = None
    if ref_spec == "init":
        ref = init
    elif ref_spec is not None:
        ref = load_params(ref_spec)
    return meta, dataset, init, ref


def cmd_train(args, cfg: RunConfig) -> int:
    train_cfg, data_path, init_path, ref_spec = _load_training_inputs(cfg)
    out = _out_dir(args)
    if args.dry_run:
        print(f"train: configuration valid ({train_cfg.loss.kind}, gamma schedule {train_cfg.gamma_schedule})")
        return EXIT_OK
    meta, dataset, init, ref = _prepare(cfg, data_path, init_path, ref_spec)
    final, stats = train(train_cfg, dataset, init, ref)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.jsonl", stats)
    save_params(out / "init.params", init)
    save_params(out / "final.params", final)
    (out / "config.txt").write_text(cfg.dump())
    print(f"trained {len(stats)} steps; final m_dataset={stats[-1].m_dataset!r}")
    return EXIT_OK


def _dedupe(gammas):
    seen, out = set(), []
    for g in gammas:
        if g in seen:
            print(f"warning: duplicate gamma {g} ignored", file=sys.stderr)
            continue
        seen.add(g)
        out.append(g)
    return out


def _sweep_one(job):
    """Worker: one gamma run; returns a RunResult or raises."""
    run_id, gamma, train_cfg, meta, dataset, init, ref, run_dir, n_prompts, samples, seed = job
    cfg = replace(train_cfg, loss=replace(train_cfg.loss, gamma=gamma), schedule=GammaSchedule.constant(gamma))
    final, stats = train(cfg, dataset, init, ref)
    wr = win_rate(final, init, eval_prompts(meta.class_count, n_prompts), meta.gold, samples,
                  seed * 1000 + EVAL_STREAM, meta.max_len, meta.end_token).win_rate
    run_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(run_dir / "metrics.jsonl", stats)
    save_params(run_dir / "final.params", final)
    (run_dir / "winrate.json").write_text(json.dumps({"win_rate": wr, "d": margin_proxy(stats)}, sort_keys=True))
    return RunResult(run_id, cfg, stats, wr)


def cmd_sweep_gamma(args, cfg: RunConfig) -> int:
    train_cfg, data_path, init_path, ref_spec = _load_training_inputs(cfg)
    gammas = _dedupe(cfg["sweep.gammas"])
    if not gammas:
        raise ConfigError("need at least one gamma value")
    for g in gammas:
        replace(train_cfg.loss, gamma=g)  # validates the range per loss kind
    out = _out_dir(args)
    if args.dry_run:
        print(f"sweep-gamma: configuration valid ({len(gammas)} runs)")
        return EXIT_OK
    meta, dataset, init, ref = _prepare(cfg, data_path, init_path, ref_spec)
    jobs = [(f"run{i:03d}", g, train_cfg, meta, dataset, init, ref, out / f"run{i:03d}", cfg["eval.prompts"],
             cfg["eval.samples_per_prompt"], train_cfg.seed) for i, g in enumerate(gammas)]
    results, failures = [], []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [(job[0], job[1], pool.submit(_sweep_one, job)) for job in jobs]
            for run_id, g, fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - a failed run must not sink the sweep
                    failures.append((run_id, g, exc))
    else:
        for job in jobs:
            try:
                results.append(_sweep_one(job))
            except Exception as exc:  # noqa: BLE001
                failures.append((job[0], job[1], exc))
    for run_id, g, exc in failures:
        print(f"run {run_id} (gamma={g}) failed: {exc}", file=sys.stderr)
    if not results:
        raise InvalidInputError("every sweep run failed")
    save_params(out / "init.params", init)
    summary, _ = emit_summary(results, out)
    for row in summary_rows(results):
        print(f"{row['run_id']} gamma={row['gamma_start']:.3f} m_D={row['final_m_dataset']:.4f} "
              f"filter={row['final_filter_frac']:.3f} d={row['d']:.4f} win_rate={row['win_rate']:.4f}")
    print(f"summary: {summary}")
    return EXIT_OK if not failures else EXIT_VALIDATION


def run_checks(families, tolerance: Optional[float] = None, cases: int = 20) -> List[theory.TheoryReport]:
    grid = [(a, b) for a in (0.5, 1.0, 2.0) for b in (0.5, 1.0, 2.0)]
    reports = []
    if "sigmoid" in families:
        margins = np.linspace(-1.0, 2.0, 3001)
        reports.append(theory.sigmoid_limit_check(0.4, [10, 100, 1000, 1e4], margins, 0.01,
                                                  theory.SIGMOID_TOL if tolerance is None else tolerance))
    if "envelope" in families:
        for a, b in grid:
            reports.append(theory.envelope_check(a, b, 1e-3, theory.ENVELOPE_TOL if tolerance is None else tolerance))
    if "argmin" in families:
        reports.extend(theory.argmin_check(a, b, 1e-3) for a, b in grid)
    if "underestimation" in families:
        reports.append(theory.underestimation_check(np.linspace(0.01, 10.0, 1000)))
    if "gradcheck" in families:
        reports.extend(theory.gradcheck_battery(KINDS, cases, seed=0,
                                                tolerance=theory.GRADCHECK_TOL if tolerance is None else tolerance))
    return reports


def cmd_verify(args, cfg: RunConfig) -> int:
    families = tuple(args.check) if args.check else CHECK_FAMILIES
    if args.dry_run:
        print(f"verify: would run {', '.join(families)}")
        return EXIT_OK
    reports = run_checks(families, args.tolerance, args.cases)
    records = [r.to_record() for r in reports]
    for rec in records:
        status = "PASS" if rec["pass"] else "FAIL"
        print(f"{status} {rec['name']}: deviation={rec['deviation']:.3e} tolerance={rec['tolerance']:.3e} ({rec['grid']})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    ok = all(rec["pass"] for rec in records)
    print(f"{sum(r['pass'] for r in records)}/{len(records)} checks passed")
    return EXIT_OK if ok else EXIT_CHECK


def _scaling_points(paths):
    points = []
    for p in map(Path, paths):
        if p.is_dir():
            wr = json.loads((p / "winrate.json").read_text())["win_rate"]
            d = margin_proxy(read_metrics(p / "metrics.jsonl"))
            points.append((d, wr - 0.5))
        elif p.is_file():
            points.extend((row["d"], row["win_rate"] - 0.5) for row in read_summary(p))
        else:
            raise FileNotFoundError(str(p))
    return points


def cmd_fit_scaling(args, cfg: RunConfig) -> int:
    points = _scaling_points(args.paths)
    usable = [(d, r) for d, r in points if d > 0]
    if len(usable) < 2:
        raise InvalidInputError(f"need at least 2 runs with positive d, got {len(usable)}")
    if args.dry_run:
        print(f"fit-scaling: {len(usable)} usable runs")
        return EXIT_OK
    fit = fit_scaling_law(usable)
    print(f"alpha={fit.alpha!r} beta={fit.beta!r} rss={fit.rss!r} n_points={fit.n_points}")
    return EXIT_OK


def cmd_eval_winrate(args, cfg: RunConfig) -> int:
    data_path = _require(cfg, "io.data")
    a_path, b_path = _require(cfg, "io.policy_a"), _require(cfg, "io.policy_b")
    seed = cfg.require_seed()
    if args.dry_run:
        print("eval-winrate: configuration valid")
        return EXIT_OK
    meta, _ = load_dataset(data_path)
    report = win_rate(load_params(a_path), load_params(b_path), eval_prompts(meta.class_count, cfg["eval.prompts"]),
                      meta.gold, cfg["eval.samples_per_prompt"], seed, meta.max_len, meta.end_token)
    print(json.dumps({"wins": report.wins, "ties": report.ties, "total": report.total,
                      "win_rate": report.win_rate}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep-gamma": cmd_sweep_gamma,
    "verify": cmd_verify,
    "fit-scaling": cmd_fit_scaling,
    "eval-winrate": cmd_eval_winrate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args, extra)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, MissingSeedError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidInputError, ParseError, DegenerateFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
