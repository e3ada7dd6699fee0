"""``cecs`` command line: gen, train, eval, verify, bench.

Exit codes: 0 success, 2 config/usage, 3 data/IO, 4 numeric, 5 verification.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CECSError, ConfigError, DataError, UsageError, VerificationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

METHODS = ("popularity", "egreedy", "preference", "independent", "cecs")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args):
    """Config file < CECS_SEED < command-line flags."""
    from .config import env_seed, load_config

    cfg = load_config(getattr(args, "config", None))
    seed = env_seed()
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        cfg = cfg.with_seed(seed)
    gen = {k: getattr(args, k) for k in ("impressions", "gamma") if getattr(args, k, None) is not None}
    if gen:
        cfg = replace(cfg, generator=replace(cfg.generator, **gen))
    tr = {k: getattr(args, k) for k in ("epochs", "lr", "batch_size") if getattr(args, k, None) is not None}
    if tr:
        try:
            cfg = replace(cfg, train=replace(cfg.train, **tr))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "d_dim", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, d_dim=args.d_dim))
    return cfg


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _data_config(data: Path, args):
    """The config stored by ``gen`` next to the logs, unless --config is given."""
    if getattr(args, "config", None) is None and (data / "config.json").is_file():
        args.config = str(data / "config.json")
    return _resolve(args)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .data import gen_world, save_world, simulate_logs, split_counts, write_log

    cfg = _resolve(args)
    out = _out_dir(args)
    world = gen_world(cfg.generator)
    logs = list(simulate_logs(world))
    n_train, n_test = split_counts(len(logs))
    save_world(out / "world.json", world)
    write_log(out / "train.jsonl", logs[:n_train])
    write_log(out / "test.jsonl", logs[n_train:])
    cfg.save(out / "config.json")
    print(f"wrote {len(logs)} impressions ({n_train} train / {n_test} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .baselines import independent_fit
    from .bench import split_train_val
    from .data import read_log
    from .training import fit, save_checkpoint

    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out_dir(args)
    train = read_log(_need(data / "train.jsonl", "training log"))
    tr, val = split_train_val(train)
    if args.model == "independent":
        mc = cfg.model_config("independent")
        model, history = independent_fit(tr, val, mc, cfg.train, log=print)
        params = model.params
    else:
        mc = cfg.model_config("cecs", args.ablate)
        params, history = fit(tr, val, mc, cfg.train, log=print)
    name = args.name or args.model
    save_checkpoint(params, mc, out / f"{name}.ckpt.json")
    history.save(out / f"{name}.history.jsonl")
    cfg.save(out / "config.json")
    print(f"best epoch {history.best_epoch}; checkpoint {out / f'{name}.ckpt.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .baselines import FeedbackStats
    from .bench import strategy_selector
    from .data import load_world, read_log
    from .metrics import evaluate, format_table, reports_json
    from .training import build_model, load_checkpoint, predict_log

    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out_dir(args)
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise UsageError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
    world = None
    if args.oracle:
        if not (data / "world.json").is_file():
            raise UsageError(f"--oracle needs the world file, missing: {data / 'world.json'}")
        world = load_world(data / "world.json")
    test = read_log(_need(data / "test.jsonl", "test log"))
    stats = None
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out
    weights = cfg.metric_weights()
    reports = []
    for m in methods:
        if m in ("popularity", "egreedy", "preference"):
            if stats is None:
                stats = FeedbackStats.from_log(read_log(_need(data / "train.jsonl", "training log")))
            selector = strategy_selector(m, stats, cfg.seed, args.epsilon)
        else:
            params, mc = load_checkpoint(_need(ckpt_dir / f"{m}.ckpt.json", f"{m} checkpoint"))
            model = build_model(mc, params)
            selector = lambda imps, model=model: predict_log(model, imps)
        reports.append(evaluate(m, selector, test, weights, world=world, oracle=args.oracle))
    (out / "report.json").write_text(reports_json(reports), encoding="utf-8")
    table = format_table(reports, oracle=args.oracle)
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(args.inject_fault)
    failed = [r for r in results if not r.passed]
    if args.json:
        print(json.dumps({"passed": not failed, "checks": [r.to_dict() for r in results]}, indent=2))
    else:
        for r in results:
            tag = "PASS" if r.passed else "FAIL"
            print(f"{tag}  {r.name}: {r.observed}" + ("" if r.passed else f" (expected {r.expected})"))
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        (_out_dir(args) / "verify.json").write_text(
            json.dumps([r.to_dict() for r in results], indent=2) + "\n", encoding="utf-8")
    if failed:
        raise VerificationError(", ".join(r.name for r in failed))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import ABLATIONS_DEFAULT, run_bench, write_bench
    from .metrics import format_table

    cfg = _resolve(args)
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    ablations = [a.strip() for a in (args.ablations or ",".join(ABLATIONS_DEFAULT)).split(",")]
    result = run_bench(cfg, seeds, ablations, log=print)
    write_bench(result, out)
    cfg.save(out / "config.json")
    print(format_table(result.table1, oracle=True), end="")
    print(format_table(result.table2, oracle=True), end="")
    for name, c in result.checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: observed {c['observed']:.4f}, expected {c['expected']}")
    if args.strict and not result.passed:
        raise VerificationError("benchmark orderings not reproduced")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cecs", description="Combinatorial creative selection on synthetic click logs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data: bool = False):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed and CECS_SEED")
        if data:
            sp.add_argument("--data", required=True, help="directory written by 'cecs gen'")

    g = sub.add_parser("gen", help="generate a world and train/test click logs")
    common(g)
    g.add_argument("--impressions", type=int)
    g.add_argument("--gamma", type=float)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train CECS (or an ablation) or the independent baseline")
    common(t, data=True)
    t.add_argument("--model", choices=("cecs", "independent"), default="cecs")
    t.add_argument("--ablate", choices=("none", "no-cei", "no-ces", "both"), default=None)
    t.add_argument("--name", help="checkpoint name (default: the model kind)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--d-dim", dest="d_dim", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score strategies and checkpoints on the test log")
    common(e, data=True)
    e.add_argument("--method", default=",".join(METHODS), help=f"comma list from {', '.join(METHODS)}")
    e.add_argument("--checkpoints", help="directory holding <method>.ckpt.json (default: --out)")
    e.add_argument("--oracle", action="store_true", help="also score against the enumerated best combination")
    e.add_argument("--epsilon", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="gradient, normalization, metric and oracle self-checks")
    v.add_argument("--json", action="store_true")
    v.add_argument("--out", help="optional directory for verify.json")
    v.add_argument("--inject-fault", dest="inject_fault", choices=("gru_update_gate_sign",),
                   help="corrupt a backward rule to confirm the checks catch it")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="multi-seed strategy comparison and ablation grid")
    common(b)
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--ablations", help="comma list from none,no-cei,no-ces,both")
    b.add_argument("--impressions", type=int)
    b.add_argument("--gamma", type=float)
    b.add_argument("--epochs", type=int)
    b.add_argument("--strict", action="store_true", help="exit nonzero when an ordering check fails")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CECSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
