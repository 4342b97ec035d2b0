"""``padcl`` command line: gen-data, train, eval, verify.

Exit codes: 0 ok, 1 verification failure, 2 usage or config error, 3 IO
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, synthdata, trainer
from .config import ABLATIONS, MODES, TrainConfig, parse, render
from .encoders import ConfigError
from .metrics import EvalReport
from .numcore import NumericalError
from .numcore.checkpoint import CheckpointError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _defaults_help() -> str:
    return "defaults (toy profile):\n" + "\n".join("  " + ln for ln in render(TrainConfig.for_profile()).splitlines())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="padcl", description="Rehearsal-free domain-incremental face PAD.")
    ap.add_argument("--version", action="version", version=f"padcl {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset tree and manifest")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help=f"one of: {', '.join(synthdata.PRESETS)}")
    src.add_argument("--spec", type=Path, help="INI file, one [section] per domain with DomainSpec fields")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train over a manifest's domain sequence",
                       epilog=_defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", type=Path, help="experiment config file; omitted keys keep profile defaults")
    t.add_argument("--data", type=Path, required=True, help="dataset root with manifest.txt")
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--mode", choices=MODES, help="overrides [train] mode")
    t.add_argument("--ablate", action="append", default=[], choices=ABLATIONS, metavar="NAME",
                   help=f"disable a component; repeatable ({', '.join(ABLATIONS)})")
    t.add_argument("--jt-ref", type=Path, help="joint-training run directory for the delta_m column")
    t.add_argument("--threshold", default="eer", help="eer (default) or fixed:<v>")

    e = sub.add_parser("eval", help="evaluate a checkpoint on test splits")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--domains", help="comma-separated domain names (default: all in the manifest)")
    e.add_argument("--threshold", default="eer", help="eer (default) or fixed:<v>")
    e.add_argument("--out", type=Path, help="directory for eval.report.{csv,txt} and eval.scores.csv")
    e.add_argument("--oracle-routing", action="store_true", help="force each seen domain's own prompts")
    e.add_argument("--jt-ref", type=Path, help="joint-training run directory for the delta_m column")
    e.add_argument("--jobs", type=int, default=1, help="domains evaluated in parallel")

    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.add_argument("--suite", default="all", choices=("grad", "sewc", "metrics", "all"))
    return ap


# ---------------------------------------------------------------- commands

def _specs_from_file(path: Path) -> list[synthdata.DomainSpec]:
    import configparser
    import dataclasses

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise UsageError(f"malformed spec file: {exc}") from exc
    types = {f.name: f.type for f in dataclasses.fields(synthdata.DomainSpec)}
    specs = []
    for name in cp.sections():
        kw = {}
        for key, raw in cp[name].items():
            if key not in types or key == "name":
                raise UsageError(f"[{name}]: unknown DomainSpec field {key!r}")
            typ = str(types[key])
            try:
                if "tuple" in typ:
                    kw[key] = tuple(float(x) if "float" in typ else int(x) for x in raw.split(","))
                elif typ == "int":
                    kw[key] = int(raw)
                elif typ == "float":
                    kw[key] = float(raw)
                else:
                    kw[key] = raw.strip() or None
            except ValueError as exc:
                raise UsageError(f"[{name}] {key}: bad value {raw!r}") from exc
        if "seed" not in kw:
            raise UsageError(f"[{name}]: seed is required")
        specs.append(synthdata.DomainSpec(name, **kw))
    if not specs:
        raise UsageError("spec file defines no domains")
    return specs


def cmd_gen_data(args) -> int:
    if args.preset is not None:
        if args.preset not in synthdata.PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; valid presets: {', '.join(synthdata.PRESETS)}")
        specs = synthdata.preset(args.preset)
    else:
        specs = _specs_from_file(args.spec)
    for s in specs:
        try:
            s.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = args.out
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: {out} is not empty (use --force to overwrite)", file=sys.stderr)
            return EXIT_IO
        shutil.rmtree(out)
    names = synthdata.write_tree(out, specs)
    print(f"wrote {len(names)} domains to {out}: {' '.join(names)}")
    return EXIT_OK


def _load_jt_ref(path: Path | None) -> EvalReport | None:
    if path is None:
        return None
    reports = sorted(path.glob("step*.report.csv"), key=lambda p: int(p.name[4:].split(".")[0]))
    if not reports:
        raise FileNotFoundError(f"no step*.report.csv in {path}")
    return EvalReport.from_csv(reports[-1].read_text())


def cmd_train(args) -> int:
    cfg = parse(args.config.read_text()) if args.config else TrainConfig.for_profile()
    if args.mode:
        cfg.mode = args.mode
    for name in args.ablate:
        cfg.apply_ablation(name)
    cfg.validate()
    if args.threshold != "eer":
        trainer.parse_threshold(args.threshold)
    domains = synthdata.load_sequence(args.data)
    jt_ref = _load_jt_ref(args.jt_ref)
    try:
        res = trainer.train_sequence(domains, cfg, args.out, jt_ref=jt_ref, threshold=args.threshold)
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}; partial artifacts kept in {args.out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(res.reports[-1].to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.threshold != "eer":
        trainer.parse_threshold(args.threshold)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    state = trainer.load_checkpoint(args.ckpt)
    names = synthdata.read_manifest(args.data)
    wanted = names if args.domains is None else [d.strip() for d in args.domains.split(",") if d.strip()]
    seen_names = set(state.domain_names)
    tests = []
    for name in wanted:
        # seen domains keep their training id; anything else gets id 0 (never routed to)
        did = state.domain_names.index(name) + 1 if name in seen_names else 0
        _, test = synthdata.load_domain(args.data, name, did)
        tests.append(test)
    if args.oracle_routing and any(t.domain == 0 for t in tests):
        raise UsageError("--oracle-routing needs seen domains only")
    step = len(state.domain_names)

    def one(test):
        return trainer.evaluate(state, [test], step, args.threshold, oracle_routing=args.oracle_routing,
                                seen=seen_names)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        parts = list(pool.map(one, tests))
    report = EvalReport(step, [r for rep, _ in parts for r in rep.rows], tag=state.cfg.ablation_tag)
    slog = trainer.ScoreLog()
    for _, part in parts:
        for name in ("domain", "index", "label", "score", "true_id", "routed_id"):
            getattr(slog, name).extend(getattr(part, name))
    jt_ref = _load_jt_ref(args.jt_ref)
    if jt_ref is not None:
        report.delta_m = trainer.delta_m_against(report, jt_ref)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.report.csv").write_text(report.to_csv())
        (args.out / "eval.report.txt").write_text(report.to_text())
        (args.out / "eval.scores.csv").write_text(slog.to_csv())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.ok]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
