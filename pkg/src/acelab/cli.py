"""Command-line experiment runner.

Subcommands: ``train``, ``eval``, ``sweep-alpha``, ``ablate-modulation`` and
``verify-theory``.  Configuration is a plain ``key = value`` file whose keys
are the :class:`~acelab.trainer.TrainerConfig` fields; any field can also be
set with ``--<field-name>`` on the command line (flag > file > default).

Exit codes: 0 success, 1 usage or config error, 2 failed check, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from acelab import theory
from acelab.env import TaskSpec, _check_compatible, load_tasks
from acelab.experiments import build_tasks, initial_policy
from acelab.io import load_policy, save_policy, save_tensor
from acelab.metrics import (
    DEFAULT_KS,
    MetricsRecord,
    checkpoint_metrics,
    metrics_csv,
    pass_at_k_eval,
    record_to_dict,
)
from acelab.policy import snapshot
from acelab.trainer import TrainerConfig, eval_rng, train

log = logging.getLogger("acelab")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "ACELAB_OUT"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_ALPHAS = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config -------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(" ", "").split(",") if x)


def _field_parser(annotation: str):
    base = annotation.replace(" ", "")
    optional = base.endswith("|None")
    base = base.removesuffix("|None")
    conv = {
        "int": int,
        "float": float,
        "str": str,
        "bool": _parse_bool,
        "tuple[int,...]": _parse_ints,
    }[base]
    if not optional:
        return conv
    return lambda raw: None if raw.strip().lower() in ("", "none", "null") else conv(raw)


FIELD_PARSERS = {f.name: _field_parser(str(f.type)) for f in fields(TrainerConfig)}


def parse_value(key: str, raw: str):
    if key not in FIELD_PARSERS:
        raise UsageError(f"{key}: unknown config key")
    try:
        return FIELD_PARSERS[key](raw)
    except ValueError as exc:
        raise UsageError(f"{key}: cannot parse {raw!r} ({exc})") from None


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def format_config(config: TrainerConfig) -> str:
    lines = []
    for f in fields(TrainerConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> TrainerConfig:
    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    for f in fields(TrainerConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            values[f.name] = parse_value(f.name, raw)
    try:
        return TrainerConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def resolve_seeds(args, config: TrainerConfig, default: Sequence[int] | None = None) -> list[int]:
    if args.seeds:
        try:
            seeds = list(_parse_ints(args.seeds))
        except ValueError:
            raise UsageError(f"--seeds: cannot parse {args.seeds!r}") from None
        if not seeds:
            raise UsageError("--seeds: empty list")
        return seeds
    if default is not None and getattr(args, "cfg_seed", None) is None:
        return list(default)
    return [config.seed]


def output_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "acelab_out")) / command


# --- artifacts ------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_manifest(out: Path, command: list[str], config, seeds, started: str) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "output_dir": str(out),
        "started": started,
        "finished": _now(),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    _dump_json(manifest, path)
    return path


def _final_record(config, params, ref, tasks, records) -> MetricsRecord:
    if records and records[-1].step == config.steps:
        return records[-1]
    return checkpoint_metrics(
        params,
        ref,
        tasks,
        config.steps,
        eval_rng(config.seed, config.steps),
        n=config.eval_samples,
        ks=config.eval_ks,
        normalize_confidence=config.normalize_confidence,
        entropy_samples=config.entropy_samples,
        temperature=config.temperature,
    )


def _one_run(config: TrainerConfig):
    tasks = build_tasks(config)
    init = initial_policy(config, tasks)
    ref = snapshot(init)
    params, records = train(config, tasks, init, ref)
    final = _final_record(config, params, ref, tasks, records)
    return params, records, final


def _run_all(configs: Sequence[TrainerConfig], workers: int):
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one_run, configs))
    return [_one_run(c) for c in configs]


def _spread(values) -> dict:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        if v is None:
            return "NA"
        return repr(v) if isinstance(v, float) else str(v)

    lines = [",".join(columns)]
    lines += [",".join(fmt(r.get(c)) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def _summary_row(final: MetricsRecord, ks) -> dict:
    kmax = max(k for k in ks if k in final.pass_at_k)
    return {
        "pass@1": final.pass_at_k.get(1),
        f"pass@{kmax}": final.pass_at_k[kmax],
        "mean_reward": final.mean_reward,
        "oef": final.oef,
        "entropy": final.entropy,
        "distinct_correct": final.distinct_correct,
    }


# --- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    config = resolve_config(args)
    seeds = resolve_seeds(args, config)
    out = output_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    configs = [replace(config, seed=s) for s in seeds]
    results = _run_all(configs, args.workers)
    per_seed = {}
    for cfg, (params, records, final) in zip(configs, results):
        d = out / f"seed_{cfg.seed}"
        d.mkdir(exist_ok=True)
        (d / "metrics.csv").write_text(metrics_csv(records, cfg.eval_ks))
        save_policy(params, d / "checkpoint.acepol")
        per_seed[str(cfg.seed)] = record_to_dict(final)
        _dump_json(per_seed[str(cfg.seed)], d / "summary.json")
    (out / "config.txt").write_text(format_config(config))
    finals = list(per_seed.values())
    summary = {
        "algorithm": config.algorithm,
        "seeds": seeds,
        "final": per_seed,
        "across_seeds": {
            key: _spread(f[key] for f in finals)
            for key in ("mean_reward", "oef", "mean_overconfidence", "entropy", "kl_to_ref", "distinct_correct")
        },
    }
    _dump_json(summary, out / "summary.json")
    write_manifest(out, sys.argv, format_config(config), seeds, started)
    print(f"wrote {len(seeds)} run(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    try:
        ks = _parse_ints(args.ks) if args.ks else tuple(DEFAULT_KS)
    except ValueError:
        raise UsageError(f"--ks: cannot parse {args.ks!r}") from None
    n = args.n
    if not ks or min(ks) < 1 or n < max(ks):
        raise UsageError(f"--n: need n >= max(ks) (n={n}, ks={list(ks)})")
    try:
        params = load_policy(args.checkpoint)
    except ValueError as exc:
        raise OSError(f"{args.checkpoint}: unreadable checkpoint ({exc})") from None
    tasks: list[TaskSpec] = load_tasks(args.tasks) if args.tasks else build_tasks(config)
    try:
        for t in tasks:
            _check_compatible(t, params)
    except ValueError as exc:
        raise UsageError(f"checkpoint does not fit the tasks: {exc}") from None
    out = output_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    rng = np.random.default_rng([config.seed, 4])
    table = pass_at_k_eval(tasks, params, n, ks, rng, config.temperature)
    rows = [{"k": k, "pass_at_k": table[k]} for k in ks]
    (out / "pass_at_k.csv").write_text(_table(rows, ["k", "pass_at_k"]))
    write_manifest(out, sys.argv, format_config(config), [config.seed], started)
    for r in rows:
        print(f"pass@{r['k']}\t{r['pass_at_k']:.4f}")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    config = resolve_config(args)
    try:
        alphas = _parse_floats(args.alphas) if args.alphas is not None else DEFAULT_ALPHAS
    except ValueError:
        raise UsageError(f"--alphas: cannot parse {args.alphas!r}") from None
    if not alphas:
        raise UsageError("--alphas: empty list")
    seeds = resolve_seeds(args, config, DEFAULT_SEEDS)
    algorithm = "ace_dapo" if config.is_dapo else "ace_grpo"
    out = output_dir(args, "sweep-alpha")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    configs = [replace(config, algorithm=algorithm, alpha=a, seed=s) for a in alphas for s in seeds]
    results = _run_all(configs, args.workers)
    rows = []
    for cfg, (_, _, final) in zip(configs, results):
        rows.append({"alpha": cfg.alpha, "seed": cfg.seed, **_summary_row(final, cfg.eval_ks)})
    columns = list(rows[0])
    (out / "sweep.csv").write_text(_table(rows, columns))
    summary = {
        str(a): {c: _spread(r[c] for r in rows if r["alpha"] == a) for c in columns[2:]} for a in alphas
    }
    _dump_json(summary, out / "summary.json")
    write_manifest(out, sys.argv, format_config(config), seeds, started)
    print(_table(rows, columns), end="")
    return EXIT_OK


ABLATION_VARIANTS = ("baseline", "softplus", "relu")


def cmd_ablate_modulation(args) -> int:
    config = resolve_config(args)
    seeds = resolve_seeds(args, config, DEFAULT_SEEDS)
    base_alg, ace_alg = ("dapo", "ace_dapo") if config.is_dapo else ("grpo", "ace_grpo")
    variants = {
        "baseline": dict(algorithm=base_alg),
        "softplus": dict(algorithm=ace_alg, modulation_kind="softplus"),
        "relu": dict(algorithm=ace_alg, modulation_kind="relu"),
    }
    out = output_dir(args, "ablate-modulation")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    jobs = [(s, v, replace(config, seed=s, **variants[v])) for s in seeds for v in ABLATION_VARIANTS]
    results = _run_all([j[2] for j in jobs], args.workers)
    rows = []
    for (seed, variant, cfg), (_, records, final) in zip(jobs, results):
        d = out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        (d / f"{variant}.csv").write_text(metrics_csv(records, cfg.eval_ks))
        rows.append({"seed": seed, "variant": variant, **_summary_row(final, cfg.eval_ks)})
    columns = list(rows[0])
    (out / "ablation.csv").write_text(_table(rows, columns))
    summary = {
        v: {c: _spread(r[c] for r in rows if r["variant"] == v) for c in columns[2:]} for v in ABLATION_VARIANTS
    }
    _dump_json(summary, out / "summary.json")
    write_manifest(out, sys.argv, format_config(config), seeds, started)
    print(_table(rows, columns), end="")
    return EXIT_OK


def _write_failure(out: Path, failure: dict) -> None:
    _dump_json(failure, out / "failure.json")
    inst = failure.get("instance")
    if inst is not None:
        params, ref, _, _ = theory.instance_from_payload(inst)
        save_policy(params, out / "failure_params.acepol")
        save_policy(ref, out / "failure_ref.acepol")


def cmd_verify_theory(args) -> int:
    out = output_dir(args, "verify-theory")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    seed = args.seed if args.seed is not None else 0
    if args.replay:
        failure = json.loads(Path(args.replay).read_text())
        if "instance" not in failure:
            raise UsageError("--replay: file holds no decomposition instance")
        res = theory.decomposition_check(
            *theory.instance_from_payload(failure["instance"]),
            drop_residual=failure.get("drop_residual", False),
        )
        report, failure = {"replay": args.replay, "passed": res["passed"], "checks": [res]}, None
        if not res["passed"]:
            failure = {"check": res}
    else:
        if args.n_samples < theory.MIN_MC_SAMPLES:
            raise UsageError(f"--n-samples: need >= {theory.MIN_MC_SAMPLES}")
        report, failure = theory.run_suite(
            seed=seed,
            instances=args.instances,
            n_samples=args.n_samples,
            inject_fault=args.inject_fault,
            fail_fast=not args.keep_going,
        )
    _dump_json(report, out / "report.json")
    if failure is not None:
        _write_failure(out, failure)
    if args.dump_tensors and not args.replay:
        params, ref, task, alpha = theory.random_instance(seed * 100003)
        rep = theory.verify_decomposition(params, ref, task, alpha)
        save_tensor(rep.delta_grad, out / "delta_grad.acepol")
        save_tensor(rep.reg_grad, out / "reg_grad.acepol")
        save_tensor(rep.residual, out / "residual.acepol")
    write_manifest(out, sys.argv, None, [seed], started)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"verify-theory: {status} ({len(report['checks'])} checks) -> {out}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


# --- parser ---------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seeds", help="comma-separated seed list (overrides --seed)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    g = p.add_argument_group("config overrides")
    for f in fields(TrainerConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acelab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run per seed")
    _add_config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pass@k table for a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="task file (default: dataset from config)")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--ks", help="comma-separated k values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="train across an alpha grid")
    _add_config_args(p)
    p.add_argument("--alphas", help="comma-separated alpha values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("ablate-modulation", help="baseline vs softplus vs relu")
    _add_config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_modulation)

    p = sub.add_parser("verify-theory", help="numerical checks of the gradient identities")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--n-samples", type=int, default=10**6)
    p.add_argument("--inject-fault", action="store_true", help="drop the residual term (must fail)")
    p.add_argument("--keep-going", action="store_true", help="run every check after a failure")
    p.add_argument("--replay", help="re-run a serialized failing instance")
    p.add_argument("--dump-tensors", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_theory)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"acelab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"acelab: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"acelab: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
