"""Command line: ``diagrobust {synth,perturb,eval,report}``.

Every command writes its outputs and a ``run.json`` provenance file into
``--out`` and exits 0 only when nothing failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .amcv import OrchestratorConfig, ResolutionMode, evaluate
from .backend import (
    BackendConfig,
    BackendError,
    CachedBackend,
    ConfigError,
    ConstantBackend,
    HttpBackend,
    OracleBackend,
    ReplayCache,
    RetryPolicy,
)
from .dataset import ManifestError, augment, load_augmented, load_manifest, synth_generate
from .metrics import MalformedLogError, NoGradableQuestionsError
from .perturb import DEFAULT_TABLE, IntensityTable, InvalidConfigError
from .report import write_reports

log = logging.getLogger("diagrobust")


def write_provenance(out_dir, command: str, config: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": __version__, "config": config}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    records = synth_generate(args.count, args.seed, args.out)
    write_provenance(args.out, "synth", {"count": args.count, "seed": args.seed, "out": str(args.out)})
    print(f"wrote {len(records)} questions to {args.out}")
    return 0


def _load_table(path):
    if path is None:
        return DEFAULT_TABLE
    return IntensityTable.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_perturb(args) -> int:
    table = _load_table(args.table)
    questions = load_manifest(args.manifest)
    manifest = augment(
        questions,
        master_seed=args.seed,
        n_views=args.views,
        table=table,
        out_dir=args.out,
        base_dir=Path(args.manifest).parent,
        workers=args.workers,
    )
    write_provenance(
        args.out,
        "perturb",
        {
            "manifest": str(args.manifest),
            "views": args.views,
            "seed": args.seed,
            "intensity_table": table.to_dict(),
        },
    )
    for failure in manifest.failures:
        print(f"error: {failure['id']}: {failure['error']}", file=sys.stderr)
    print(f"augmented {len(manifest.entries)} questions into {args.out}")
    return 1 if manifest.failures else 0


def build_backend(args, questions, transport=None):
    if args.backend == "oracle":
        inner = OracleBackend(questions, max_in_flight=args.max_in_flight)
    elif args.backend == "stub":
        inner = ConstantBackend(args.stub_answer, max_in_flight=args.max_in_flight)
    elif args.backend == "http":
        if not args.endpoint or not args.model:
            raise ConfigError("--backend http needs --endpoint and --model")
        cfg = BackendConfig(
            endpoint_url=args.endpoint,
            model_name=args.model,
            api_key_env_var=args.api_key_env,
            max_in_flight=args.max_in_flight,
            retry=RetryPolicy(max_attempts=args.max_attempts),
            timeout_ms=args.timeout_ms,
        )
        inner = HttpBackend(cfg, transport=transport)
    else:
        inner = None
    if args.model and inner is not None and args.backend != "http":
        inner.model_name = args.model
    if args.cache_dir is None:
        if inner is None:
            raise ConfigError("--backend replay needs --cache-dir")
        return inner
    if inner is None and not args.model:
        raise ConfigError("--backend replay needs --model (the cached model name)")
    return CachedBackend(ReplayCache(args.cache_dir), inner, model_name=args.model or None, max_in_flight=args.max_in_flight)


def cmd_eval(args, transport=None) -> int:
    manifest = load_augmented(args.manifest)
    cfg = OrchestratorConfig(tau=args.tau, n_views=manifest.n_views, resolution_mode=args.mode)
    backend = build_backend(args, [e.question for e in manifest.entries], transport=transport)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {
        "manifest": str(args.manifest),
        "backend": args.backend,
        "model_name": backend.model_name,
        "endpoint": args.endpoint,
        "api_key_env": args.api_key_env,
        "max_in_flight": args.max_in_flight,
        "orchestrator": {"tau": cfg.tau, "n_views": cfg.n_views, "resolution_mode": cfg.resolution_mode.value},
        "master_seed": manifest.master_seed,
        "intensity_table": manifest.table.to_dict(),
        "cache_dir": None if args.cache_dir is None else str(args.cache_dir),
    }
    write_provenance(out, "eval", run_config)
    results = evaluate(manifest, backend, cfg, out / "answers.jsonl", question_workers=args.workers)
    if isinstance(backend, CachedBackend):
        log.info("replay cache: %d hits, %d misses", backend.hits, backend.misses)
    failed = [a for a in results if a.failed]
    for a in failed:
        print(f"error: {a.question_id}: {a.error}", file=sys.stderr)
    if results and len(failed) == len(results):
        print(f"error: all {len(results)} questions failed at the backend", file=sys.stderr)
    calls = [a.total_calls for a in results if not a.failed]
    if calls:
        print(f"evaluated {len(calls)} questions, {min(calls)}-{max(calls)} calls per question")
    return 1 if failed else 0


def _named_log(spec: str):
    name, sep, path = spec.partition("=")
    if not sep:
        return Path(spec).parent.name or spec, spec
    return name, path


def cmd_report(args) -> int:
    logs = [_named_log(s) for s in args.log]
    if not logs and args.ablation is None:
        raise ConfigError("report needs at least one --log or --ablation")
    write_reports(args.out, logs, ablation_log=args.ablation)
    write_provenance(args.out, "report", {"logs": [list(x) for x in logs], "ablation": args.ablation})
    print(f"wrote reports to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diagrobust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic bar-chart questions")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("perturb", help="write perturbed views for a question manifest")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines question manifest")
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--table", type=Path, help="JSON intensity table (default: built-in)")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="run multi-view inference over an augmented manifest")
    p.add_argument("--manifest", type=Path, required=True, help="augmented manifest.json or its directory")
    p.add_argument("--backend", choices=["http", "oracle", "stub", "replay"], required=True)
    p.add_argument("--mode", choices=[m.value for m in ResolutionMode], default="full_amcv")
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--max-in-flight", type=int, default=8)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--timeout-ms", type=float, default=60_000.0)
    p.add_argument("--stub-answer", default="A")
    p.add_argument("--workers", type=int, default=4, help="questions evaluated concurrently")

    p = sub.add_parser("report", help="compute metrics and render tables from answer logs")
    p.add_argument("--log", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--ablation", help="full_amcv log to re-resolve into the three ablation rows")
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None, *, transport=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "perturb":
            return cmd_perturb(args)
        if args.command == "eval":
            return cmd_eval(args, transport=transport)
        return cmd_report(args)
    except (InvalidConfigError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NoGradableQuestionsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, MalformedLogError, BackendError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
