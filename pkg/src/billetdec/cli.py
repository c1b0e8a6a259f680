"""Command line front end.

Subcommands: gen (synthetic dataset), train (frame classifier), decode (one
strip image or lattice file), eval (manifest evaluation, optionally the
full method ablation).  A key=value INI file can predefine any flag; flags
given on the command line win.  Exit codes: 0 success, 2 bad input or
usage, 1 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import traceback
from pathlib import Path


from . import ctc, figures, harness, synthgen
from .core import DEFAULT_SYMBOLS, Alphabet
from .model import (
    TrainConfig,
    classify_frames,
    classify_strip,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .rules import load_rules
from .tta import AdaptConfig, write_trajectory

logger = logging.getLogger("billetdec")

DEFAULT_RULES = Path(__file__).parent / "data" / "billet11.rules"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _apply_config(parser: argparse.ArgumentParser, section) -> None:
    """Turn one INI section into parser defaults, converting types to match
    each flag."""
    known = {a.dest: a for a in parser._actions}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"config key {key!r} matches no flag")
        action = known[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            value = _parse_bool(raw)
        elif action.type is int:
            value = int(raw)
        elif action.type is float:
            value = float(raw)
        else:
            value = raw
        parser.set_defaults(**{key: value})


# ---- subcommands ----


def cmd_gen(args: argparse.Namespace) -> None:
    rules = load_rules(args.rules_file)
    entries = synthgen.gen_dataset(
        rules,
        args.count,
        args.out,
        domain=args.domain,
        alphabet=Alphabet(args.alphabet),
        seed=args.seed,
    )
    damaged = sum(e.damage_flags.count("1") for e in entries)
    print(
        f"wrote {len(entries)} {args.domain} strips to {args.out} "
        f"({damaged} damaged characters)"
    )


def cmd_train(args: argparse.Namespace) -> None:
    frames, labels, alphabet = synthgen.read_frames(args.frames)
    params = init_params(alphabet, seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    train(params, frames, labels, cfg)
    save_checkpoint(params, args.out)
    # quick frame-level sanity number on the training data itself
    correct = 0
    for lo in range(0, len(frames), 512):
        probs = classify_frames(params, frames[lo : lo + 512, None, :, :])
        correct += int((probs.argmax(axis=1) == labels[lo : lo + 512]).sum())
    print(
        f"saved checkpoint to {args.out} "
        f"(train frame accuracy {correct / len(frames):.4f})"
    )


def _sniff(path: Path) -> str:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic[:2] == b"P5":
        return "pgm"
    if magic in (ctc.BINARY_MAGIC, ctc.TEXT_MAGIC.encode("ascii")):
        return "lattice"
    raise ValueError(f"{path}: neither a PGM image nor a lattice file")


def cmd_decode(args: argparse.Namespace) -> None:
    source = Path(args.input)
    kind = _sniff(source)
    if kind == "pgm":
        if not args.ckpt:
            raise ValueError("decoding an image needs --ckpt")
        params = load_checkpoint(args.ckpt)
        strip = synthgen.read_pgm(source)
        lattice = classify_strip(params, strip[None, :, :])
    else:
        lattice = ctc.read_lattice(source)

    use_rules = args.rules if args.rules is not None else args.rules_file is not None
    rules = None
    if use_rules:
        if not args.rules_file:
            raise ValueError("--rules needs a schema via --rules-file")
        rules = load_rules(args.rules_file)
    opts = ctc.DecodeOptions(
        min_run=args.min_run, repair_enabled=args.repair, rules_enabled=use_rules
    )
    result = ctc.decode(lattice, rules, opts)
    print(result.text)
    record = {
        "text": result.text,
        "chars": [
            {
                "symbol": c.symbol,
                "frame": c.source_frame,
                "provenance": c.provenance.value,
            }
            for c in result.chars
        ],
        "unresolved": list(result.unresolved),
        "mean_entropy": lattice.mean_entropy(),
    }
    print(json.dumps(record, separators=(",", ":")))


def cmd_eval(args: argparse.Namespace) -> None:
    rules = load_rules(args.rules_file) if args.rules_file else None
    adapt = AdaptConfig(
        lr=args.tta_lr,
        optimizer=args.tta_optimizer,
        mode=args.tta_mode,
        steps_per_batch=args.tta_steps,
    )
    cfg = harness.AblationConfig(
        batch_strips=args.batch_size, min_run=args.min_run, adapt=adapt
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ablation:
        reports, trajectory = harness.run_ablation(
            args.ckpt, args.manifest, rules, cfg
        )
        entropy_source = reports[0].records
    else:
        report, trajectory = harness.evaluate(
            args.ckpt,
            args.manifest,
            rules,
            with_tta=args.tta,
            with_prior=args.prior,
            cfg=cfg,
        )
        reports = [report]
        entropy_source = report.records

    harness.write_reports(reports, out)
    if len(entropy_source) >= args.bins:
        ee = harness.entropy_error_report(entropy_source, args.bins)
        harness.write_entropy_error(ee, out / "entropy_error.csv")
        figures.save_entropy_error_figure(ee, out / "entropy_error.png")
    if trajectory:
        write_trajectory(trajectory, out / "trajectory.csv")
        figures.save_trajectory_figure(trajectory, out / "trajectory.png")
    figures.save_ablation_figure(reports, out / "ablation.png")
    for rep in reports:
        print(
            f"{rep.label}: exact match {rep.exact_match:.4f}, "
            f"mean edit distance {rep.mean_edit_distance:.4f}"
        )


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="billetdec",
        description="Billet number recognition: synthesis, training, "
        "decoding and evaluation.",
    )
    parser.add_argument(
        "--config", default=None, help="INI file with one section per subcommand"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--rules-file", default=str(DEFAULT_RULES))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--alphabet", default=DEFAULT_SYMBOLS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the frame classifier")
    p.add_argument("--frames", required=True, help="frames.bin from gen")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode one strip image or lattice")
    p.add_argument("input", help="PGM strip or lattice file (LAT1/LATB)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--rules-file", default=None)
    p.add_argument("--repair", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--rules", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--min-run", type=int, default=3)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rules-file", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--tta", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--prior", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--batch-size", type=int, default=64, help="strips per batch")
    p.add_argument("--tta-lr", type=float, default=1e-3)
    p.add_argument("--tta-optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--tta-mode", choices=("continual", "episodic"), default="continual")
    p.add_argument("--tta-steps", type=int, default=1)
    p.add_argument("--min-run", type=int, default=harness.AblationConfig.min_run)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.config:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(args.config):
                raise ValueError(f"config file {args.config} not found")
            sub_actions = next(
                a for a in parser._actions
                if isinstance(a, argparse._SubParsersAction)
            )
            if args.command in cp:
                _apply_config(sub_actions.choices[args.command], cp[args.command])
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        except (ValueError, OSError, configparser.Error) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    logger.info("resolved config: %s", json.dumps(resolved, default=str))
    try:
        args.func(args)
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
