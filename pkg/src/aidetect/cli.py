"""Command-line entry point: ``aidetect <subcommand> [flags]``.

Exit status is 0 on success, 1 for invalid input or flags, 2 when a file
cannot be read or written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import agents, dataset, experiment, landscape
from .encoding import FORMULATIONS
from .models import ARCHITECTURES, HEADS, ModelSpec, build_model, param_count
from .nn.checkpoint import save_checkpoint
from .nn.gradcheck import grad_check

SEED_ENV = "AIDETECT_SEED"
EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

# expected counts by architecture and input channels; only the first two rows gate the exit code
TABLE1 = {
    "lenet5": {1: 58_484, 3: 59_084, 5: 59_684},
    "sb_resnet18": {1: 151_362, 3: 157_634, 5: 163_906},
    "resnet18": {1: 11_683_240, 3: 11_689_512, 5: 11_695_784},
}


class UsageError(Exception):
    """Bad flags or flag combinations; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def stage_seed(seed: int, stage: str) -> int:
    """Derive a per-stage seed so one ``--seed`` reproduces a whole pipeline."""
    tag = int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:4], "little")
    return int(np.random.SeedSequence(seed, spawn_key=(tag,)).generate_state(1)[0])


def parse_arch(text: str) -> str:
    arch = text.strip().lower().replace("+", "_").replace("-", "_")
    if arch not in ARCHITECTURES:
        raise argparse.ArgumentTypeError(
            f"unknown architecture {text!r}; choose from lenet5, resnet18, sb-resnet18, optionally with a +lstm suffix"
        )
    return arch


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str, jobs: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"master seed; falls back to ${SEED_ENV}, then 0")
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; explicit flags win")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    if jobs:
        p.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1, help="worker processes")


def _hp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", type=parse_arch, required=True, help="lenet5, resnet18 or sb-resnet18, +lstm for fusion")
    p.add_argument("--head", choices=sorted(HEADS), default="two_way", help="output head width")
    p.add_argument("--epochs", type=_positive_int, default=None, help="training epochs (default: per architecture)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: tuned per architecture)")
    p.add_argument("--weight-decay", type=float, default=None, help="L2 weight decay (default: tuned)")
    p.add_argument("--scheduler", type=_on_off, default=None, help="linear learning-rate decay, on or off (default: tuned)")
    p.add_argument("--dropout", type=float, default=0.0, help="dropout on the series branch output (fusion only)")
    p.add_argument("--batch-size", type=_positive_int, default=32, help="mini-batch size")
    p.add_argument("--lstm-hidden", type=_positive_int, default=32, help="LSTM hidden size")
    p.add_argument("--fusion-hidden", type=_positive_int, default=64, help="fusion MLP hidden width")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="aidetect", description="Detect assisted search trials from dial-tuning trajectories.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-landscapes", help="generate height maps", formatter_class=fmt)
    _common(p, "output JSONL of height maps")
    p.add_argument("--count", type=_positive_int, default=100, help="maps per peak count")
    p.add_argument("--peaks", type=int, nargs="+", choices=(1, 4), default=[1, 4], help="peak counts to generate")
    p.add_argument("--min-prominence", type=float, default=2.0, help="minimum prominence of every peak")

    p = sub.add_parser("simulate", help="simulate solo and aided trajectories", formatter_class=fmt)
    _common(p, "output JSONL of trajectories", jobs=True)
    p.add_argument("--participants", type=_positive_int, default=398, help="simulated participants (4 trials each)")
    p.add_argument("--landscapes-out", type=Path, default=None, help="where to write the landscapes (default: <out stem>.maps.jsonl)")
    p.add_argument("--min-prominence", type=float, default=2.0, help="minimum prominence of every peak")
    defaults = agents.AgentConfig()
    for f in fields(agents.AgentConfig):
        p.add_argument(
            f"--{f.name.replace('_', '-')}",
            type=type(getattr(defaults, f.name)),
            default=getattr(defaults, f.name),
            help=f"agent parameter {f.name}",
        )

    p = sub.add_parser("encode", help="encode trajectories into a tensor pack", formatter_class=fmt)
    _common(p, "output tensor pack")
    p.add_argument("--formulation", choices=FORMULATIONS, required=True, help="image formulation")
    p.add_argument("--corpus", type=Path, required=True, help="trajectory JSONL")
    p.add_argument("--landscapes", type=Path, required=True, help="height-map JSONL")
    p.add_argument("--wrap-distance", type=_on_off, default=True, help="wrapped distances for move classification, on or off")

    p = sub.add_parser("trim", help="drop the interaction-count tails of a pack", formatter_class=fmt)
    _common(p, "output tensor pack")
    p.add_argument("--pack", type=Path, required=True, help="input tensor pack")
    p.add_argument("--fraction", type=float, default=0.025, help="fraction dropped from each tail")

    p = sub.add_parser("split", help="write train/test index splits", formatter_class=fmt)
    _common(p, "output JSON of index splits")
    p.add_argument("--pack", type=Path, required=True, help="input tensor pack")
    p.add_argument("--subset", choices=dataset.SUBSETS, default="all", help="peak-count subset")
    p.add_argument("--kfold", type=int, default=0, help="number of folds; 0 writes a single 80/20 split")

    p = sub.add_parser("train", help="train one model on one split", formatter_class=fmt)
    _common(p, "output directory for the checkpoint and curves")
    p.add_argument("--pack", type=Path, required=True, help="input tensor pack")
    p.add_argument("--subset", choices=dataset.SUBSETS, default="all", help="peak-count subset")
    p.add_argument("--split", type=Path, default=None, help="split JSON from 'split' (default: a fresh seeded 80/20 split)")
    p.add_argument("--fold", type=int, default=0, help="which split to use from a k-fold split file")
    _hp_flags(p)

    p = sub.add_parser("protocol", help="repeated-split evaluation", formatter_class=fmt)
    _common(p, "output directory for the report", jobs=True)
    p.add_argument("--pack", type=Path, required=True, help="input tensor pack (already trimmed)")
    p.add_argument("--subset", choices=dataset.SUBSETS, default="all", help="peak-count subset")
    p.add_argument("--trials", type=_positive_int, default=100, help="number of random splits")
    p.add_argument("--shuffle-labels", action="store_true", help="permutation control: shuffle labels first")
    _hp_flags(p)

    p = sub.add_parser("tune", help="grid search with k-fold cross-validation", formatter_class=fmt)
    _common(p, "output JSON with the chosen hyperparameters", jobs=True)
    p.add_argument("--pack", type=Path, required=True, help="input tensor pack (already trimmed)")
    p.add_argument("--subset", choices=dataset.SUBSETS, default="all", help="peak-count subset")
    p.add_argument("--k", type=int, default=10, help="cross-validation folds")
    p.add_argument("--grid", type=Path, default=None, help="JSON grid {name: [values]} (default: the 18-cell grid)")
    _hp_flags(p)

    p = sub.add_parser("report", help="merge protocol summaries into one report", formatter_class=fmt)
    _common(p, "output directory")
    p.add_argument("--inputs", type=Path, nargs="+", required=True, help="summary.json files from 'protocol'")

    p = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=None, help=f"master seed; falls back to ${SEED_ENV}, then 0")
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; explicit flags win")
    p.add_argument("--arch", type=parse_arch, required=True, help="architecture to check")
    p.add_argument("--channels", type=int, choices=(1, 3, 5), default=1, help="input channels")
    p.add_argument("--batch", type=_positive_int, default=2, help="random samples in the batch")
    p.add_argument("--max-entries", type=int, default=20, help="entries probed per tensor; 0 probes all")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum allowed relative error")

    p = sub.add_parser("audit-params", help="compare parameter counts with the reference table", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=None, help=f"master seed; falls back to ${SEED_ENV}, then 0")
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; explicit flags win")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _load_config(path: Path, sub: argparse.ArgumentParser, command: str) -> dict:
    try:
        overrides = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest for a in sub._actions}
    converted = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"config key {key!r} is not a flag of {command}")
        converted[dest] = value
    return converted


def parse(argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` act as defaults that explicit flags override."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is not None and command is not None:
        sub = _subparser(parser, command)
        converted = _load_config(known.config, sub, command)
        for action in sub._actions:
            if action.dest in converted:
                action.required = False
        sub.set_defaults(**converted)
    args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else 0
        except ValueError as exc:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from exc
    return args


# -- run log ------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_run_log(args: argparse.Namespace, extra: dict | None = None) -> Path | None:
    """Record the resolved configuration next to the outputs; timestamps live only here."""
    out = getattr(args, "out", None)
    if out is None:
        return None
    target = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    record = {
        "command": args.command,
        "config": {k: _jsonable(v) for k, v in sorted(vars(args).items())},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    target.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return target


# -- subcommands --------------------------------------------------------------


def _load_subset(path: Path, subset: str) -> dataset.Corpus:
    corpus = dataset.load_pack(path)
    return corpus if subset == "all" else corpus.filter_subset(subset)


def _spec(args, corpus: dataset.Corpus | None = None, channels: int | None = None) -> ModelSpec:
    if corpus is not None:
        channels = corpus.images.shape[1]
    return ModelSpec(args.arch, channels, args.head, args.lstm_hidden, args.fusion_hidden, args.dropout)


def _hyperparams(args, spec: ModelSpec, seed: int) -> experiment.Hyperparams:
    hp = experiment.default_hyperparams(spec, seed)
    changes = {"batch_size": args.batch_size, "dropout": args.dropout}
    for name in ("epochs", "lr", "weight_decay", "scheduler"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    return replace(hp, **changes)


def cmd_gen_landscapes(args) -> dict:
    params = landscape.GeneratorParams(min_prominence=args.min_prominence)
    base = stage_seed(args.seed, "gen-landscapes")
    maps = []
    for peaks in args.peaks:
        for i in range(args.count):
            maps.append(landscape.generate(experiment.derive_seed(base, peaks, i), peaks, params))
    landscape.save_landscapes(maps, args.out)
    return {"maps": len(maps)}


def cmd_simulate(args) -> dict:
    cfg = agents.AgentConfig(**{f.name: getattr(args, f.name) for f in fields(agents.AgentConfig)})
    params = landscape.GeneratorParams(min_prominence=args.min_prominence)
    logs, maps = agents.generate_corpus(args.participants, cfg, stage_seed(args.seed, "simulate"), params, args.jobs)
    maps_out = args.landscapes_out or args.out.with_name(args.out.name.split(".")[0] + ".maps.jsonl")
    agents.save_logs(logs, args.out)
    landscape.save_landscapes(maps, maps_out)
    args.landscapes_out = maps_out
    return {"trajectories": len(logs), "landscapes_out": str(maps_out), "agent_config": asdict(cfg)}


def cmd_encode(args) -> dict:
    logs = agents.load_logs(args.corpus)
    maps = landscape.load_landscapes(args.landscapes)
    prov = {"corpus": args.corpus.name, "landscapes": args.landscapes.name}
    corpus = dataset.build_corpus(logs, maps, args.formulation, args.wrap_distance, prov)
    dataset.save_pack(corpus, args.out)
    return {"samples": len(corpus)}


def cmd_trim(args) -> dict:
    corpus = dataset.trim_corpus(dataset.load_pack(args.pack), args.fraction)
    dataset.save_pack(corpus, args.out)
    return {"samples": len(corpus)}


def cmd_split(args) -> dict:
    corpus = _load_subset(args.pack, args.subset)
    seed = stage_seed(args.seed, "split")
    if args.kfold:
        splits = dataset.kfold(len(corpus), args.kfold, seed)
    else:
        splits = [dataset.split_80_20(len(corpus), seed)]
    payload = {
        "subset": args.subset,
        "n": len(corpus),
        "seed": seed,
        "splits": [{"train": s.train.tolist(), "test": s.test.tolist()} for s in splits],
    }
    args.out.write_text(json.dumps(payload, sort_keys=True) + "\n")
    return {"splits": len(splits)}


def _read_split(path: Path, fold: int, n: int) -> dataset.SplitSpec:
    payload = json.loads(path.read_text())
    if payload.get("n") != n:
        raise UsageError(f"split file covers {payload.get('n')} samples but the corpus has {n}")
    if not 0 <= fold < len(payload["splits"]):
        raise UsageError(f"--fold {fold} out of range for {len(payload['splits'])} splits")
    s = payload["splits"][fold]
    return dataset.SplitSpec(np.asarray(s["train"], dtype=np.int64), np.asarray(s["test"], dtype=np.int64), payload.get("seed"))


def cmd_train(args) -> dict:
    corpus = _load_subset(args.pack, args.subset)
    spec = _spec(args, corpus)
    seed = stage_seed(args.seed, "train")
    if args.split is not None:
        split = _read_split(args.split, args.fold, len(corpus))
    else:
        split = dataset.split_80_20(len(corpus), experiment.derive_seed(seed, 0))
    hp = _hyperparams(args, spec, experiment.derive_seed(seed, 1))
    args.out.mkdir(parents=True, exist_ok=True)
    result, model = experiment.train_model(spec, corpus, split, hp)
    save_checkpoint(model, args.out / "model.aidw")
    trial = {
        "architecture": spec.architecture,
        "hyperparams": asdict(hp),
        "test_acc": result.test_acc.tolist(),
        "test_loss": result.test_loss.tolist(),
        "train_acc": result.train_acc,
        "split": {"train": split.train.tolist(), "test": split.test.tolist()},
        "norm_mean": result.stats.mean.tolist(),
        "norm_std": result.stats.std.tolist(),
    }
    (args.out / "trial.json").write_text(json.dumps(trial, indent=1, sort_keys=True) + "\n")
    print(f"final test accuracy {result.test_acc[-1]:.4f}, best {result.test_acc.max():.4f}")
    return {"best_test_acc": float(result.test_acc.max())}


def cmd_protocol(args) -> dict:
    corpus = dataset.load_pack(args.pack)
    spec = _spec(args, corpus)
    seed = stage_seed(args.seed, "protocol")
    if args.shuffle_labels:
        corpus = experiment.shuffle_labels(corpus, experiment.derive_seed(seed, 99))
    hp = _hyperparams(args, spec, seed)
    report = experiment.run_protocol(spec, corpus, args.subset, args.trials, hp, seed, args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    experiment.emit_report([report], args.out)
    print(
        f"{spec.architecture} {corpus.formulation}/{args.subset}: best averaged accuracy "
        f"{report.best_acc:.4f} ({report.best_std:.4f}) at epoch {report.best_epoch + 1}"
    )
    return {"best_acc": report.best_acc, "best_epoch": report.best_epoch}


def cmd_tune(args) -> dict:
    corpus = _load_subset(args.pack, args.subset)
    spec = _spec(args, corpus)
    seed = stage_seed(args.seed, "tune")
    grid = None
    if args.grid is not None:
        grid = {k: tuple(v) for k, v in json.loads(args.grid.read_text()).items()}
        unknown = set(grid) - {f.name for f in fields(experiment.Hyperparams)}
        if unknown:
            raise UsageError(f"grid names unknown hyperparameters: {sorted(unknown)}")
    result = experiment.grid_search(spec, corpus, grid, args.k, _hyperparams(args, spec, seed), seed, args.jobs)
    payload = {
        "best": asdict(result.best),
        "runs": result.runs,
        "scores": [{"lr": k[0], "weight_decay": k[1], "scheduler": k[2], "dropout": k[3], "score": v}
                   for k, v in sorted(result.scores.items())],
    }
    args.out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(json.dumps(payload["best"], sort_keys=True))
    return {"runs": result.runs}


def cmd_report(args) -> dict:
    reports = []
    for path in args.inputs:
        reports.extend(experiment.load_summary(path))
    args.out.mkdir(parents=True, exist_ok=True)
    experiment.emit_report(reports, args.out)
    return {"reports": len(reports)}


def cmd_gradcheck(args) -> dict:
    seed = stage_seed(args.seed, "gradcheck")
    spec = ModelSpec(args.arch, args.channels)
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((args.batch, args.channels, 24, 24))
    series = rng.choice([-1.0, 0.0, 1.0], size=(args.batch, 126))
    labels = np.arange(args.batch) % 2
    report = grad_check(build_model(spec, seed), images, series, labels, max_entries=args.max_entries or None, seed=seed)
    for name, err in report.per_param.items():
        print(f"{name:<48s} {err:.3e}")
    ok = report.max_rel_error < args.tolerance
    print(f"max relative error {report.max_rel_error:.3e} over {report.checked} entries: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise ValidationFailed("gradient check exceeded tolerance")
    return {}


def audit_rows() -> list[tuple[str, int, int, int]]:
    rows = []
    for arch, expected in TABLE1.items():
        for c, want in expected.items():
            if arch == "resnet18":
                spec = ModelSpec(arch, c, head="thousand_way")
            else:
                spec = ModelSpec(arch, c)
            rows.append((arch, c, want, param_count(build_model(spec))))
    return rows


def cmd_audit_params(args) -> dict:
    rows = audit_rows()
    print(f"{'architecture':<14s}" + "".join(f"{'C=' + str(c):>14s}" for c in (1, 3, 5)))
    bad = []
    for arch in TABLE1:
        cells = [r for r in rows if r[0] == arch]
        line = f"{arch:<14s}"
        for _, c, want, got in cells:
            mark = "" if want == got else "*"
            line += f"{got:>13,d}{mark or ' '}"
            if want != got and arch != "resnet18":
                bad.append((arch, c, want, got))
        print(line)
    print("(resnet18 counted with the thousand-way head; * marks a mismatch)")
    if bad:
        for arch, c, want, got in bad:
            print(f"mismatch: {arch} C={c} expected {want:,d}, built {got:,d}", file=sys.stderr)
        raise ValidationFailed("parameter counts differ from the reference table")
    return {}


class ValidationFailed(Exception):
    pass


COMMANDS = {
    "gen-landscapes": cmd_gen_landscapes,
    "simulate": cmd_simulate,
    "encode": cmd_encode,
    "trim": cmd_trim,
    "split": cmd_split,
    "train": cmd_train,
    "protocol": cmd_protocol,
    "tune": cmd_tune,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "audit-params": cmd_audit_params,
}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        extra = COMMANDS[args.command](args)
        write_run_log(args, extra)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ValidationFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, dataset.PackError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
