"""Command-line entry point: phantom, pretrain-vae, train, predict, evaluate, dvh, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .constraints import ConstraintTableError, compliance_report, load_constraint_table
from .evaluation import dvh, evaluate_case, summarize, write_dvh_csv, write_report, _safe
from .phantom import PhantomSpec, desk_spec, generate_phantom
from .training import (
    TrainConfig, TrainingError, load_config, load_pipeline, load_vae, predict, pretrain_vae, train_diffusion,
)
from .volumes import SITES, TECHNIQUES, Case, ContainerError, load_case, save_case

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code for unknown/invalid flags
EXIT_MISSING_INPUT = 3
EXIT_BAD_CHECKPOINT = 4
EXIT_BAD_DATA = 5
EXIT_TRAINING = 6

log = logging.getLogger("dosediff")


class MissingInput(FileNotFoundError):
    pass


def _triple(text):
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 integers, got {text!r}")
    return tuple(parts)


def _existing_dir(path):
    p = Path(path)
    if not p.is_dir():
        raise MissingInput(f"missing input directory: {p}")
    return p


def _load_cases(data_dir):
    root = _existing_dir(data_dir)
    if (root / "manifest.json").exists():
        return [load_case(root)]
    dirs = sorted(d for d in root.iterdir() if (d / "manifest.json").exists())
    if not dirs:
        raise MissingInput(f"no case containers under {root}")
    return [load_case(d) for d in dirs]


def _constraints(path):
    if path is not None and not Path(path).exists():
        raise MissingInput(f"missing constraint table: {path}")
    return load_constraint_table(path)


def _train_config(args, stage):
    flags = dict(
        stage=stage, desk=args.desk_scale, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, max_steps=args.max_steps, patch=args.patch_size, overlap=args.patch_overlap,
    )
    if stage == "diffusion":
        flags.update(steps=args.steps, beta_start=args.beta_start, beta_end=args.beta_end,
                     lambda_cond=args.lambda_cond, val_fraction=args.val_fraction)
    if args.config is not None:
        if not Path(args.config).exists():
            raise MissingInput(f"missing config file: {args.config}")
        return load_config(args.config, **flags)
    return TrainConfig(**{k: v for k, v in flags.items() if v is not None})


# ---------------------------------------------------------------- commands

def cmd_phantom(args):
    out = Path(args.out_dir)
    for i in range(args.count):
        seed = args.seed + i
        if args.desk_scale:
            spec = desk_spec(args.site, seed, technique=args.technique)
        else:
            spec = PhantomSpec(site=args.site, seed=seed, technique=args.technique)
        case = generate_phantom(spec)
        save_case(case, out / case.id)
        print(out / case.id)
    return EXIT_OK


def cmd_pretrain_vae(args):
    args.stage = "vae"
    return cmd_train(args)


def cmd_train(args):
    cases = _load_cases(args.data_dir)
    cfg = _train_config(args, args.stage)
    out = Path(args.out)
    if cfg.stage == "vae":
        _, history = pretrain_vae(cases, cfg, out=out)
    else:
        if args.vae is None:
            raise MissingInput("diffusion training needs --vae (a pretrained VAE checkpoint)")
        vae, _ = load_vae(args.vae)
        specs = _constraints(args.constraints)
        _, history = train_diffusion(cases, vae, cfg, out=out, specs=specs, resume=args.resume)
    history.write(out / "history.tsv")
    print(out)
    return EXIT_OK


def cmd_predict(args):
    pipe = load_pipeline(_existing_dir(args.checkpoint))
    out = Path(args.out_dir)
    for case in _load_cases(args.data_dir):
        dose = predict(pipe, case, args.seed)
        pred = Case(case.id, case.ct, case.structures, dose, case.technique, case.site, case.prescription,
                    dict(case.extra, predicted_seed=args.seed))
        save_case(pred, out / case.id)
        print(out / case.id)
    return EXIT_OK


def cmd_evaluate(args):
    specs = _constraints(args.constraints)
    refs = {c.id: c for c in _load_cases(args.ref_dir)}
    preds = _load_cases(args.pred_dir)
    out = Path(args.out)
    reports = []
    for pred in preds:
        if pred.id not in refs:
            raise MissingInput(f"no reference case for prediction {pred.id!r}")
        report = evaluate_case(pred, refs[pred.id], specs)
        write_report(report, out, pred, args.bin_width)
        reports.append(report)
    summary = summarize(reports)
    with (out / "summary.tsv").open("w", encoding="utf-8") as fh:
        fh.write("metric\tmean\n")
        for k, v in summary.items():
            fh.write(f"{k}\t{v:.6g}\n")
    print(out / "summary.tsv")
    return EXIT_OK


def cmd_dvh(args):
    case = _load_cases(args.case)[0]
    if case.dose is None:
        raise ValueError(f"case {case.id!r} has no dose")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dose = case.dose.to_gy()
    for s in case.structures:
        if s.mask.any():
            write_dvh_csv(dvh(dose, s.mask, args.bin_width, s.name), out / f"{case.id}_dvh_{_safe(s.name)}.csv")
    print(out)
    return EXIT_OK


def cmd_report(args):
    specs = _constraints(args.constraints)
    rows = []
    for case in _load_cases(args.data_dir):
        if case.dose is None:
            raise ValueError(f"case {case.id!r} has no dose")
        rep = compliance_report(case.dose.to_gy(), case.structures, specs)
        for r in rep.results:
            rows.append(f"{case.id}\t{r.spec.label}\t{r.achieved:.6g}\t{r.limit:.6g}\t{int(r.passed)}")
        rows.append(f"{case.id}\tcompliance_rate\t{rep.rate:.6g}\t\t")
    text = "case\tconstraint\tachieved\tlimit\tpassed\n" + "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _training_flags(p, diffusion):
    p.add_argument("--data-dir", required=True, help="directory of case containers")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file mirroring TrainConfig; its values override flags")
    p.add_argument("--desk-scale", action="store_true", help="reduced defaults: T=100, small ladders")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int, help="cap on optimizer steps (overrides --epochs)")
    p.add_argument("--patch-size", type=_triple, help="VAE tile size, e.g. 32 or 32,32,32")
    p.add_argument("--patch-overlap", type=_triple, help="VAE tile overlap, e.g. 8")
    if diffusion:
        p.add_argument("--stage", choices=("vae", "diffusion"), default="diffusion")
        p.add_argument("--vae", help="pretrained VAE checkpoint (diffusion stage)")
        p.add_argument("--resume", help="diffusion checkpoint to continue from")
        p.add_argument("--steps", type=int, help="diffusion steps T")
        p.add_argument("--beta-start", type=float)
        p.add_argument("--beta-end", type=float)
        p.add_argument("--lambda-cond", type=float)
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--constraints", help="constraint table (default: built-in)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dosediff", description="Latent-diffusion dose prediction on phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    p.add_argument("--site", choices=SITES, default="lung")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--technique", choices=TECHNIQUES, default="IMRT")
    p.add_argument("--desk-scale", action="store_true", help="32^3 grid at 5 mm")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain-vae", help="pretrain the VAE (same as train --stage vae)")
    _training_flags(p, diffusion=False)
    p.set_defaults(func=cmd_pretrain_vae)

    p = sub.add_parser("train", help="train the VAE or the diffusion model")
    _training_flags(p, diffusion=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sample dose predictions for cases")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compare predictions against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--constraints")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=0.1, help="DVH bin width in Gy")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dvh", help="write DVH CSVs for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=0.1)
    p.set_defaults(func=cmd_dvh)

    p = sub.add_parser("report", help="constraint compliance of case doses")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--constraints")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    lines = ["flags by command:"]
    for name, sp in sub.choices.items():
        opts = sorted({o for a in sp._actions for o in a.option_strings if o.startswith("--") and o != "--help"})
        lines.append(f"  {name}: {' '.join(opts)}")
    parser.epilog = "\n".join(lines)
    parser.formatter_class = argparse.RawDescriptionHelpFormatter
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        code, msg = EXIT_MISSING_INPUT, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_BAD_CHECKPOINT, f"incompatible checkpoint: {exc}"
    except TrainingError as exc:
        code, msg = EXIT_TRAINING, f"training failed: {exc}"
    except (ContainerError, ConstraintTableError, ValueError) as exc:
        code, msg = EXIT_BAD_DATA, str(exc)
    sys.stderr.write(json.dumps({"error": msg, "exit_code": code}) + "\n")
    return code


def main():
    sys.exit(run())
