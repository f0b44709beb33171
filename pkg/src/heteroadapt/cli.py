"""Command-line entry point: generate data, train, run experiments.

Every command writes its outputs plus a plain-text manifest (config
snapshot, input hashes, seed list, version, duration) into `--out`.
Validation failures print one `error: ...` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import (
    MultiSourceTask,
    SynthSpec,
    generate_synthetic_domains,
    load_domain_file,
    save_domain_file,
    split_target,
    standardize,
)
from .errors import ConfigError, ParseError, ShapeError
from .experiments import (
    ABLATION_VARIANTS,
    default_task,
    export_embeddings,
    run_ablation,
    run_noise_detection,
    run_source_sweep,
    write_summary_csvs,
)
from .training import TrainConfig, train

DEFAULT_SWEEP_DIMS = "100:1000:100,target=2000"


class _Parser(argparse.ArgumentParser):
    """Argparse that reports failures in the machine-parsable error format."""

    def error(self, message):
        self.exit(2, f"error: {message}\n")


def parse_dims(text: str) -> tuple[tuple[int, ...], int]:
    """`100:1000:100,target=2000` -> source dims (inclusive ranges), target dim."""
    source_dims: list[int] = []
    target = None
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.startswith("target="):
            if target is not None:
                raise ConfigError("only one target= entry is allowed in --dims")
            target = int(item.split("=", 1)[1])
        elif ":" in item:
            parts = [int(p) for p in item.split(":")]
            if len(parts) != 3:
                raise ConfigError(f"range must be start:stop:step, got {item!r}")
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise ConfigError(f"bad range {item!r}")
            source_dims.extend(range(start, stop + 1, step))
        else:
            source_dims.append(int(item))
    if target is None:
        raise ConfigError("--dims needs a target=<dim> entry")
    if not source_dims:
        raise ConfigError("--dims needs at least one source dimension")
    return tuple(source_dims), target


def parse_seeds(text: str) -> tuple[int, ...]:
    """`0..4` (inclusive), `0,2,5`, or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"seed range {text!r} is empty")
        return tuple(range(lo, hi + 1))
    return tuple(int(p) for p in text.split(",") if p.strip())


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _config_entries(config: TrainConfig) -> dict:
    return {f"config.{f.name}": getattr(config, f.name) for f in fields(config)}


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--beta", type=float, default=0.03)
    parser.add_argument("--tau", type=float, default=0.004)
    parser.add_argument("--dc", type=int, default=256, help="shared subspace width")
    parser.add_argument("--hidden", type=int, default=256)
    parser.add_argument("--lr-fg", type=float, default=0.004)
    parser.add_argument("--lr-d", type=float, default=0.001)
    parser.add_argument("--iters", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lg", choices=["l1", "l2", "off", "tied"], default="l1")
    parser.add_argument(
        "--weighting", choices=["conditional", "ones"], default="conditional"
    )
    parser.add_argument("--leaky-slope", type=float, default=0.01)
    parser.add_argument("--eval-stride", type=int, default=1)


def _config_from_args(args) -> TrainConfig:
    config = TrainConfig(
        beta=args.beta,
        tau=args.tau,
        d_c=args.dc,
        hidden=args.hidden,
        lr_fg=args.lr_fg,
        lr_d=args.lr_d,
        iterations=args.iters,
        seed=args.seed,
        lg_norm=args.lg,
        weighting=args.weighting,
        leaky_slope=args.leaky_slope,
        eval_stride=args.eval_stride,
    )
    config.validate()
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    source_dims, target_dim = parse_dims(args.dims)
    spec = SynthSpec(
        source_dims=source_dims,
        target_dim=target_dim,
        classes=args.classes,
        latent_dim=args.latent_dim,
        samples_per_class=args.per_class,
        target_labeled_per_class=args.target_labeled_per_class,
        target_unlabeled=args.target_unlabeled,
        spread=args.spread,
        noise=args.noise,
        seed=args.seed,
        standardize=not args.no_standardize,
    )
    out = _out_dir(args)
    domains = generate_synthetic_domains(spec)
    paths = []
    for domain, dim in zip(domains[:-1], source_dims):
        paths.append(out / f"{domain.name}_d{dim}.txt")
        save_domain_file(domain, paths[-1])
    target_path = out / f"target_d{target_dim}.txt"
    save_domain_file(domains[-1], target_path)
    paths.append(target_path)
    entries = {
        "command": "synth",
        "version": __version__,
        "dims": args.dims,
        **{f"spec.{f.name}": getattr(spec, f.name) for f in fields(spec)},
    }
    for p in paths:
        entries[f"sha256.{p.name}"] = _sha256(p)
    entries["duration_seconds"] = f"{time.time() - started:.3f}"
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(paths)} domain files to {out}")
    return 0


# -- train ----------------------------------------------------------------------


def _load_task(args) -> tuple[MultiSourceTask, dict]:
    provenance = {}
    sources = []
    for i, path in enumerate(args.source):
        domain = load_domain_file(path)
        if domain.labels is None:
            raise ConfigError(f"source file {path} has no labels")
        if args.standardize:
            domain = standardize(domain)
        sources.append(domain)
        provenance[f"source_{i}"] = path
        provenance[f"sha256.source_{i}"] = _sha256(Path(path))
    target = load_domain_file(args.target)
    if target.labels is None:
        raise ConfigError(f"target file {args.target} has no labels to split")
    if args.standardize:
        target = standardize(target)
    provenance["target"] = args.target
    provenance["sha256.target"] = _sha256(Path(args.target))
    labeled, unlabeled = split_target(target, args.labeled_per_class, args.seed)
    task = MultiSourceTask.build(tuple(sources), labeled, unlabeled)
    provenance["labeled_per_class"] = args.labeled_per_class
    return task, provenance


def write_trace_csv(path: Path, trace, num_sources: int) -> None:
    k = num_sources
    header = ["iter", "loss_fg", "loss_lg", "loss_dg_inv", "loss_d"]
    header += [f"delta_{i + 1}" for i in range(k)]
    header += [f"w_{i + 1}" for i in range(k)]
    header += ["acc_target"]
    lines = [",".join(header)]
    for r in trace.records:
        row = [str(r.iteration), repr(r.loss_fg), repr(r.loss_lg),
               repr(r.loss_dg_inverted), repr(r.loss_d)]
        row += [repr(v) for v in r.deltas]
        row += [repr(v) for v in r.weights]
        row.append(repr(r.target_accuracy))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    started = time.time()
    config = _config_from_args(args)
    task, provenance = _load_task(args)
    out = _out_dir(args)
    trace = train(task, config)
    write_trace_csv(out / "trace.csv", trace, task.num_sources)
    if args.export_embeddings:
        export_embeddings(trace.final_params, task, out / "embeddings.txt",
                          config.leaky_slope)
    entries = {
        "command": "train",
        "version": __version__,
        **_config_entries(config),
        **provenance,
        "final_accuracy": repr(trace.final_accuracy),
        "duration_seconds": f"{time.time() - started:.3f}",
    }
    write_manifest(out / "manifest.txt", entries)
    print(f"final_accuracy={trace.final_accuracy!r}")
    return 0


# -- experiment -------------------------------------------------------------------


def _experiment_task(args) -> tuple[MultiSourceTask, dict]:
    if args.source:
        if not args.target:
            raise ConfigError("--target is required when --source files are given")
        return _load_task(args)
    task = default_task(seed=args.task_seed)
    return task, {"data": f"builtin synthetic default task (seed {args.task_seed})"}


def cmd_experiment(args) -> int:
    started = time.time()
    config = _config_from_args(args)
    seeds = parse_seeds(args.seeds)
    out = _out_dir(args)
    entries = {
        "command": f"experiment {args.mode}",
        "version": __version__,
        **_config_entries(config),
        "seeds": ",".join(str(s) for s in seeds),
        "jobs": args.jobs,
    }

    if args.mode == "ablate":
        task, provenance = _experiment_task(args)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        for v in variants:
            if v not in ABLATION_VARIANTS:
                raise ConfigError(
                    f"unknown variant {v!r}; choose from {sorted(ABLATION_VARIANTS)}"
                )
        summaries = run_ablation(task, variants, seeds, config, jobs=args.jobs)
        write_summary_csvs(out / "runs.csv", out / "aggregate.csv", "ablate", summaries)
        entries.update(provenance)
        entries["variants"] = ",".join(variants)
    elif args.mode == "noise":
        task, provenance = _experiment_task(args)
        result = run_noise_detection(task, args.noise_dim, seeds, config, jobs=args.jobs)
        write_summary_csvs(out / "runs.csv", out / "aggregate.csv", "noise",
                           [result.summary])
        k1 = result.final_weights.shape[1]
        lines = [",".join(
            ["seed"] + [f"w_{i + 1}" for i in range(k1)] + [f"delta_{i + 1}" for i in range(k1)]
        )]
        for row_seed, w_row, d_row in zip(seeds, result.final_weights, result.final_deltas):
            lines.append(",".join(
                [str(row_seed)]
                + [repr(float(v)) for v in w_row]
                + [repr(float(v)) for v in d_row]
            ))
        (out / "noise_weights.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        entries.update(provenance)
        entries["noise_dim"] = args.noise_dim
    else:  # sweep
        source_dims, target_dim = parse_dims(args.dims)
        spec = SynthSpec(
            source_dims=source_dims,
            target_dim=target_dim,
            classes=args.classes,
            latent_dim=args.latent_dim,
            samples_per_class=args.per_class,
            target_labeled_per_class=args.target_labeled_per_class,
            target_unlabeled=args.target_unlabeled,
            spread=args.spread,
            noise=args.noise,
            seed=args.task_seed,
        )
        ns_values = [int(v) for v in args.ns.split(",") if v.strip()]
        summaries = run_source_sweep(spec, ns_values, seeds, config, jobs=args.jobs)
        write_summary_csvs(out / "runs.csv", out / "aggregate.csv", "sweep", summaries)
        entries["dims"] = args.dims
        entries["ns"] = args.ns

    entries["duration_seconds"] = f"{time.time() - started:.3f}"
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote experiment outputs to {out}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="heteroadapt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[], help="generate synthetic domain files")
    synth.add_argument("--dims", required=True,
                       help="source dims and target, e.g. 100:1000:100,target=2000")
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--per-class", type=int, default=100)
    synth.add_argument("--latent-dim", type=int, default=10)
    synth.add_argument("--target-labeled-per-class", type=int, default=3)
    synth.add_argument("--target-unlabeled", type=int, default=500)
    synth.add_argument("--spread", type=float, default=0.5)
    synth.add_argument("--noise", type=float, default=0.1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--no-standardize", action="store_true")
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train on domain files and emit a trace")
    tr.add_argument("--source", action="append", default=[], required=True)
    tr.add_argument("--target", required=True)
    tr.add_argument("--labeled-per-class", type=int, default=3)
    tr.add_argument("--standardize", action="store_true")
    tr.add_argument("--export-embeddings", action="store_true")
    tr.add_argument("--out", required=True)
    _add_model_flags(tr)
    tr.set_defaults(func=cmd_train)

    exp = sub.add_parser("experiment", help="run ablations, noise detection, or sweeps")
    exp.add_argument("mode", choices=["ablate", "noise", "sweep"])
    exp.add_argument("--seeds", default="0..9")
    exp.add_argument("--variants", default=",".join(sorted(ABLATION_VARIANTS)))
    exp.add_argument("--ns", default="0,2,4,6,8,10")
    exp.add_argument("--noise-dim", type=int, default=20)
    exp.add_argument("--jobs", type=int, default=1)
    exp.add_argument("--source", action="append", default=[])
    exp.add_argument("--target")
    exp.add_argument("--labeled-per-class", type=int, default=3)
    exp.add_argument("--standardize", action="store_true")
    exp.add_argument("--task-seed", type=int, default=0)
    exp.add_argument("--dims", default=DEFAULT_SWEEP_DIMS)
    exp.add_argument("--classes", type=int, default=3)
    exp.add_argument("--per-class", type=int, default=100)
    exp.add_argument("--latent-dim", type=int, default=10)
    exp.add_argument("--target-labeled-per-class", type=int, default=3)
    exp.add_argument("--target-unlabeled", type=int, default=500)
    exp.add_argument("--spread", type=float, default=0.5)
    exp.add_argument("--noise", type=float, default=0.1)
    exp.add_argument("--out", required=True)
    _add_model_flags(exp)
    exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
