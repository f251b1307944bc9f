"""Command-line interface: ``tfadv {gen,train,attack,transfer,report,run}``.

Exit codes: 0 success, 2 usage error, 3 I/O or file-format error,
4 numerical failure. Data summaries go to stdout; the effective
configuration of every command and all diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .attacks import AttackConfig
from .errors import ConfigError, DegenerateInputError, FormatError
from .evaluation import (ALL_METHODS, TRAIN_LR, ExperimentPlan, TransferMatrix, run_matrix,
                         run_plan)
from .render import receive
from .stds import StdsConfig
from .waveforms import CLASS_NAMES, WaveformConfig, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise argparse.ArgumentTypeError(f"range {text!r} must satisfy lo <= hi")
    return lo, hi


def _classes(text: str) -> tuple[int, ...]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok.isdigit() and int(tok) < len(CLASS_NAMES):
            out.append(int(tok))
        elif tok in CLASS_NAMES:
            out.append(CLASS_NAMES.index(tok))
        else:
            raise argparse.ArgumentTypeError(
                f"unknown class {tok!r}; valid: {', '.join(CLASS_NAMES)} or 0-2")
    if len(set(out)) != len(out):
        raise argparse.ArgumentTypeError("duplicate classes")
    return tuple(out)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    d, s = AttackConfig(), StdsConfig()
    p.add_argument("--method", required=True, choices=ALL_METHODS)
    p.add_argument("--data", required=True, type=Path, help="dataset directory to attack")
    p.add_argument("--eps", type=float, default=d.epsilon, help="L-inf budget, 0-255 units")
    p.add_argument("--alpha", type=float, default=d.alpha, help="step size, 0-255 units")
    p.add_argument("--iters", type=_positive_int, default=d.iterations)
    p.add_argument("--mu", type=float, default=d.mu, help="momentum decay")
    p.add_argument("--p", type=float, default=d.di_probability, help="DI probability")
    p.add_argument("--ti-size", type=int, default=d.ti_size)
    p.add_argument("--ti-sigma", type=float, default=d.ti_sigma)
    p.add_argument("--lr", type=float, default=s.lr, help="STDS step size")
    p.add_argument("--stds-iters", type=_positive_int, default=s.iterations)
    p.add_argument("--max-noise", type=float, default=None,
                   help="STDS bound on ||noise|| / ||signal||")
    p.add_argument("--limit", type=_positive_int, default=None,
                   help="attack at most this many samples, balanced over classes")
    p.add_argument("--figures", type=_nonneg_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker threads for independent attack cells")
    common.add_argument("--format", choices=("ppm", "png"), default="ppm",
                        help="image format for figures")
    ap = argparse.ArgumentParser(prog="tfadv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    add = lambda name, text: sub.add_parser(name, help=text, parents=[common])  # noqa: E731

    g = add("gen", "synthesise a labelled waveform dataset")
    g.add_argument("--classes", type=_classes, default=(0, 1, 2))
    g.add_argument("--per-class", type=_positive_int, default=300)
    g.add_argument("--snr", type=_range, default=(-10.0, 10.0), help="lo:hi in dB")
    g.add_argument("--split", type=_nonneg_int, default=0,
                   help="stream id; use different values for train and test sets")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)

    t = add("train", "train one classifier")
    t.add_argument("--arch", required=True, choices=nn.ARCH_IDS)
    t.add_argument("--data", required=True, type=Path, help="training dataset directory")
    t.add_argument("--test", type=Path, default=None, help="test dataset directory")
    t.add_argument("--epochs", type=_nonneg_int, default=20)
    t.add_argument("--lr", type=float, default=None, help="default depends on --arch")
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, type=Path, help="weight file to write")

    a = add("attack", "white-box attack on one model")
    a.add_argument("--model", required=True, type=Path)
    _add_attack_flags(a)

    x = add("transfer", "craft on a source model, score on victims")
    x.add_argument("--source", required=True, type=Path)
    x.add_argument("--victims", required=True, type=Path, nargs="+")
    _add_attack_flags(x)

    r = add("report", "render a results matrix as a text table")
    r.add_argument("--results", required=True, type=Path,
                   help="run directory, its results/ directory, or a matrix CSV")
    r.add_argument("--out", type=Path, default=None, help="also write the table here")

    f = add("run", "execute the full default experiment plan")
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--per-class", type=_positive_int, default=300)
    f.add_argument("--test-per-class", type=_positive_int, default=100)
    f.add_argument("--epochs", type=_nonneg_int, default=20)
    f.add_argument("--attacks", default=",".join(ALL_METHODS))
    f.add_argument("--limit", type=_positive_int, default=None)
    f.add_argument("--seed", type=int, default=1, help="dataset seed")
    return ap


def _echo(command: str, cfg: dict) -> None:
    print(f"effective config: {json.dumps({'command': command, **cfg}, sort_keys=True)}",
          file=sys.stderr)


def _cmd_gen(args) -> int:
    cfg = WaveformConfig(snr_range_db=args.snr)
    try:
        cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from e
    _echo("gen", {"classes": list(args.classes), "per_class": args.per_class,
                  "snr": list(args.snr), "split": args.split, "seed": args.seed,
                  "out": str(args.out)})
    ds = generate_dataset(args.per_class, cfg, args.seed, args.split, args.classes)
    save_dataset(ds, args.out, {"split": args.split})
    counts = {CLASS_NAMES[c]: int(np.sum(ds.labels == c)) for c in args.classes}
    print(f"wrote {len(ds)} records to {args.out} {json.dumps(counts)}")
    return EXIT_OK


def _load_images(path):
    ds = load_dataset(path)
    x = ds.samples()
    return x, receive(x), ds.labels


def _cmd_train(args) -> int:
    lr = TRAIN_LR.get(args.arch, 0.01) if args.lr is None else args.lr
    if lr < 0:
        raise UsageError("--lr must be >= 0")
    _echo("train", {"arch": args.arch, "data": str(args.data), "test": str(args.test),
                    "epochs": args.epochs, "lr": lr, "batch": args.batch, "seed": args.seed,
                    "out": str(args.out)})
    _, x_tr, y_tr = _load_images(args.data)
    model = nn.init_model(args.arch, args.seed)
    model, hist = nn.train(model, x_tr, y_tr, epochs=args.epochs, lr=lr, batch=args.batch,
                           seed=args.seed,
                           log=lambda e, h: print(f"epoch {e + 1}: loss {h.loss[-1]:.4f}",
                                                  file=sys.stderr))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    nn.save(model, args.out)
    model = nn.load(args.out)  # report on the weights as stored
    print(f"{args.arch} train accuracy {100 * nn.accuracy(model, x_tr, y_tr):.2f}%")
    if args.test is not None:
        _, x_te, y_te = _load_images(args.test)
        print(f"{args.arch} test accuracy {100 * nn.accuracy(model, x_te, y_te):.2f}%")
    return EXIT_OK


def _attack_plan(args, source: str, victims: list[str]):
    try:
        acfg = AttackConfig(epsilon=args.eps, alpha=args.alpha, iterations=args.iters,
                            mu=args.mu, di_probability=args.p, ti_size=args.ti_size,
                            ti_sigma=args.ti_sigma, seed=args.seed)
        scfg = StdsConfig(lr=args.lr, iterations=args.stds_iters, max_noise_l2=args.max_noise)
        models = tuple(dict.fromkeys([source, *victims]))
        return ExperimentPlan(args.out, models=models, sources=(source,), victims=tuple(victims),
                              attacks=(args.method,), attack=acfg, stds=scfg,
                              attack_samples=args.limit, figures_per_cell=args.figures,
                              image_format=args.format, threads=args.threads)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def _run_attack(args, source_path: Path, victim_paths: list[Path]) -> int:
    loaded, ids = {}, {}
    for p in [source_path, *victim_paths]:
        m = nn.load(p)
        if m.arch.id in loaded and loaded[m.arch.id][0] != p:
            raise UsageError(f"two weight files for architecture {m.arch.id}")
        loaded[m.arch.id] = (p, m)
        ids[p] = m.arch.id
    src = ids[source_path]
    victims = list(dict.fromkeys(ids[p] for p in victim_paths))
    plan = _attack_plan(args, src, victims)
    keys = ("attacks", "sources", "victims", "attack", "stds", "window", "attack_samples")
    _echo(args.command, {**{k: plan.echo()[k] for k in keys}, "data": str(args.data),
                         "out": str(args.out), "figures": args.figures, "format": args.format,
                         "weights": {k: str(v[0]) for k, v in loaded.items()}})
    x_sig, x_img, y = _load_images(args.data)
    matrix = run_matrix(plan, {k: v[1] for k, v in loaded.items()}, x_sig, y, images=x_img)
    for (method, s, v), c in matrix.entries.items():
        kind = "self" if s == v else "transfer"
        print(f"{method} {s}->{v} {kind} success {c.rate:.2f}% "
              f"({c.successes}/{c.eligible} eligible) mean l2 {c.mean_l2:.2f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    p = args.results
    if p.is_dir():
        p = p / "matrix.csv" if (p / "matrix.csv").is_file() else p / "results" / "matrix.csv"
    _echo("report", {"results": str(args.results), "out": str(args.out)})
    table = TransferMatrix.read(p).table()
    sys.stdout.write(table)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table)
    return EXIT_OK


def _cmd_run(args) -> int:
    attacks = tuple(a for a in args.attacks.split(",") if a)
    try:
        plan = ExperimentPlan(args.out, train_per_class=args.per_class,
                              test_per_class=args.test_per_class, data_seed=args.seed,
                              epochs=args.epochs, attacks=attacks, attack_samples=args.limit,
                              image_format=args.format, threads=args.threads)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    _echo("run", {**plan.echo(), "out": str(args.out)})
    report = run_plan(plan)
    for arch, acc in report.accuracy.items():
        print(f"{arch} test accuracy {100 * acc:.2f}%")
    sys.stdout.write(report.matrix.table())
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "report": _cmd_report, "run": _cmd_run,
             "attack": lambda a: _run_attack(a, a.model, [a.model]),
             "transfer": lambda a: _run_attack(a, a.source, a.victims)}


def _attach_ranges(argv):
    """Let ``--snr -10:10`` through: argparse would read ``-10:10`` as a flag."""
    out, it = [], iter(argv)
    for tok in it:
        if tok == "--snr":
            out.append("--snr=" + next(it, ""))
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _attach_ranges(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors itself
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"tfadv {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as e:
        print(f"tfadv {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, DegenerateInputError, np.linalg.LinAlgError) as e:
        print(f"tfadv {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
