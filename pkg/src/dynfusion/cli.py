"""``dynfusion`` command line: synth, extract, train, eval, params, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or contract
failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from . import __version__
from . import branches, dsp
from . import gradcheck as gc
from .checkpoint import Checkpoint
from .data import (TASK_NAMES, TASKS, SynthConfig, Tokenizer, generate_synthetic, load_manifest,
                   read_wav)
from .errors import (ConfigError, ContractError, DataError, InvalidInputError, NumericError,
                     ShapeError, StageOrderError)
from .fusion import FusionModel
from .train import (STAGES, TaskSystem, TrainPlan, branch_embeddings, checkpoint_name,
                    default_model_config, evaluate_ensemble, evaluate_system, new_system,
                    prepare_task_examples, run_stage, write_history)

log = logging.getLogger("dynfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILURE = 0, 1, 2, 3
STAMP_NAME = "run_config.json"

# (acoustic, semantic, feature label, modalities zeroed at inference)
ABLATIONS = (
    ("Yes", "No", "Waveform", ("tf", "s")),
    ("Yes", "No", "Mel", ("t", "s")),
    ("No", "Yes", "Text", ("t", "tf")),
    ("Yes", "Yes", "Text & Waveform", ("tf",)),
    ("Yes", "Yes", "Text & Mel", ("t",)),
    ("Yes", "Yes", "Text & Mel & Waveform", ()),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------- argument helpers

def _stage_value(text: str) -> tuple[int, str]:
    stage, sep, value = text.partition("=")
    if not sep or stage not in ("1", "2", "3"):
        raise argparse.ArgumentTypeError(f"expected STAGE=VALUE with STAGE in 1..3, got {text!r}")
    return int(stage), value


def _lr_override(text: str) -> tuple[int, tuple]:
    stage, value = _stage_value(text)
    try:
        rates = tuple(float(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad learning rates {value!r}") from None
    if len(rates) == 1:
        rates = rates * 3
    if len(rates) != 3 or min(rates) <= 0:
        raise argparse.ArgumentTypeError("give one or three positive learning rates")
    return stage, rates


def _batch_override(text: str) -> tuple[int, int]:
    stage, value = _stage_value(text)
    if not value.isdigit() or int(value) <= 0:
        raise argparse.ArgumentTypeError(f"bad batch size {value!r}")
    return stage, int(value)


def _bounded_int(low: int, high: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
        if not low <= v <= high:
            raise argparse.ArgumentTypeError(f"must lie in [{low}, {high}]")
        return v
    return parse


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def _tasks(sel: str) -> tuple[int, ...]:
    return TASKS if sel == "all" else (int(sel),)


def _stages(sel: str) -> tuple[int, ...]:
    return STAGES if sel == "all" else (int(sel),)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path, required=True)
    data.add_argument("--task", choices=["0", "1", "2", "all"], default="all")
    data.add_argument("--feature", choices=["mel", "mfcc"], default="mel",
                      help="time-frequency branch input")

    parser = _Parser(prog="dynfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--subjects", type=_bounded_int(2, 100000), default=600)
    p.add_argument("--audio-informativeness", type=_fraction, default=1.0)
    p.add_argument("--text-informativeness", type=_fraction, default=1.0)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--balance", type=_fraction, default=0.5)

    p = sub.add_parser("extract", parents=[common, data], help="write feature matrices per recording")
    p.add_argument("--kind", choices=["mel", "mfcc", "power"], help="defaults to --feature")
    p.add_argument("--format", choices=["csv", "bin"], default="csv")

    p = sub.add_parser("train", parents=[common, data], help="run the three-stage training")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--max-epochs", type=_bounded_int(1, 200))
    p.add_argument("--patience", type=_bounded_int(1, 200))
    p.add_argument("--lr", type=_lr_override, action="append", default=[], metavar="STAGE=LR[,LR,LR]")
    p.add_argument("--batch-size", type=_batch_override, action="append", default=[], metavar="STAGE=N")

    p = sub.add_parser("eval", parents=[common, data], help="evaluate task systems and the ensemble")
    p.add_argument("--checkpoints", type=Path, help="directory with stage-3 checkpoints (default: --out)")
    p.add_argument("--split", choices=["internal_val", "dev"], default="dev")
    p.add_argument("--ablate", action="store_true", help="also write the modality ablation table")
    p.add_argument("--untrained", action="store_true", help="evaluate freshly initialised systems")

    p = sub.add_parser("params", parents=[common], help="report parameter counts")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=_bounded_int(1, 1000), default=20)
    p.add_argument("--model-instances", type=_bounded_int(1, 100), default=2)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


# ---------------------------------------------------------------- shared output

def _stamp(args: argparse.Namespace, extra: dict | None = None) -> None:
    """Write the resolved configuration beside the outputs."""
    if args.out is None:
        return
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    cfg["version"] = __version__
    cfg.update(extra or {})
    with open(args.out / STAMP_NAME, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=list)


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = _require_out(args)
    cfg = SynthConfig(n_subjects=args.subjects, balance=args.balance,
                      audio_informativeness=args.audio_informativeness,
                      text_informativeness=args.text_informativeness,
                      seconds=args.seconds, noise=args.noise, seed=args.seed)
    manifest = generate_synthetic(cfg, out)
    _stamp(args)
    print(f"wrote {len(manifest)} recordings for {cfg.n_subjects} subjects to {out}")
    for split, n in manifest.counts()["split"].items():
        print(f"  {split}: {n} recordings")
    return EXIT_OK


def cmd_extract(args) -> int:
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    kind = args.kind or args.feature
    written = 0
    for task in _tasks(args.task):
        for rec in manifest.select(task=task):
            feats = dsp.extract(read_wav(manifest.audio_file(rec)), kind)
            path = out / f"{rec.id}.{feats.kind}.{args.format}"
            path.parent.mkdir(parents=True, exist_ok=True)
            if args.format == "csv":
                dsp.write_feature_csv(feats, path)
            else:
                dsp.write_feature_bin(feats, path)
            written += 1
    _stamp(args, {"feature_config": dsp.config_dict(dsp.FeatureConfig())})
    print(f"wrote {written} feature files to {out}")
    return EXIT_OK


def _plan(args) -> TrainPlan:
    plan = TrainPlan(seed=args.seed)
    for stage, rates in args.lr:
        plan.lr[stage] = rates
    for stage, size in args.batch_size:
        plan.batch_size[stage] = size
    if args.max_epochs is not None:
        plan.max_epochs = args.max_epochs
    if args.patience is not None:
        plan.patience = args.patience
    return TrainPlan(**plan.to_dict())


def _load_system(directory: Path, task: int, stage: int) -> TaskSystem:
    path = directory / checkpoint_name(task, stage)
    if not path.exists():
        raise StageOrderError(f"missing {path.name} in {directory}: run stage {stage} for task {task} first")
    return TaskSystem.from_checkpoint(Checkpoint.load(path))


def cmd_train(args) -> int:
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    plan = _plan(args)
    stages = _stages(args.stage)
    _stamp(args, {"plan": plan.to_dict()})
    for task in _tasks(args.task):
        if stages[0] == 1:
            tokenizer = Tokenizer.from_manifest(manifest)
            system = new_system(task, default_model_config(tokenizer, args.feature), plan.seed, tokenizer)
        else:
            system = _load_system(out, task, stages[0] - 1)
            tokenizer = Tokenizer(system.tokenizer_chars)
        examples = prepare_task_examples(manifest, task, tokenizer, system.model.cfg.feature)
        for stage in stages:
            rows = run_stage(stage, system, examples["train"], examples["internal_val"], plan)
            system.to_checkpoint(stage).save(out / checkpoint_name(task, stage))
            write_history(rows, out / f"task{task}_stage{stage}_history.csv")
            best = max((r for r in rows if r["split"] == "internal_val"), key=lambda r: r["accuracy"])
            print(f"task {task} ({TASK_NAMES[task]}) stage {stage}: {len(rows) // 2} epochs, "
                  f"best internal_val accuracy {best['accuracy']:.3f}")
        if 3 in system.completed:
            w = system.model.fusion.values()
            print(f"task {task} fusion weights: w_t={w['t']:.4f} w_tf={w['tf']:.4f} w_s={w['s']:.4f}")
    return EXIT_OK


def _eval_systems(args, manifest) -> dict:
    tasks = _tasks(args.task)
    if args.untrained:
        tokenizer = Tokenizer.from_manifest(manifest)
        cfg = default_model_config(tokenizer, args.feature)
        return {t: new_system(t, cfg, args.seed, tokenizer) for t in tasks}
    directory = args.checkpoints or args.out
    if directory is None:
        raise ConfigError("eval needs --checkpoints or --out")
    return {t: _load_system(directory, t, 3) for t in tasks}


def cmd_eval(args) -> int:
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    systems = _eval_systems(args, manifest)
    examples = {}
    for task, system in systems.items():
        examples[task] = prepare_task_examples(manifest, task, Tokenizer(system.tokenizer_chars),
                                               system.model.cfg.feature)[args.split]
    _stamp(args)

    rows, predictions = [], []
    header = ["system", "accuracy", "n", "tp", "tn", "fp", "fn"]
    for task, system in systems.items():
        m = evaluate_system(system, examples[task])
        c = m.confusion
        rows.append([f"Task {task} ({TASK_NAMES[task]})", m.accuracy, m.n, c["tp"], c["tn"], c["fp"], c["fn"]])
        predictions += [[f"task{task}", *p] for p in m.predictions]
    combined = set(systems) == set(TASKS)
    if combined:
        m = evaluate_ensemble(systems, examples)
        c = m.confusion
        rows.append(["Combined", m.accuracy, m.n, c["tp"], c["tn"], c["fp"], c["fn"]])
        predictions += [["combined", *p] for p in m.predictions]
    _write_csv(out / "table_accuracy.csv", header, rows)
    _write_csv(out / "predictions.csv", ["system", "id", "p_at_risk", "predicted", "label"], predictions)
    for r in rows:
        print(f"{r[0]:<14} accuracy {r[1]:.4f} (n={r[2]})")

    importance = []
    for task, system in systems.items():
        emb = branch_embeddings(system, examples[task])
        w = system.model.fusion.values()
        imp = system.model.modality_importance(emb)
        importance.append([task, w["t"], w["tf"], w["s"], imp["t"], imp["tf"], imp["s"]])
    _write_csv(out / "modality_importance.csv",
               ["task", "w_t", "w_tf", "w_s", "importance_t", "importance_tf", "importance_s"], importance)

    if args.ablate:
        if not combined:
            raise ConfigError("--ablate evaluates the three-task ensemble; use --task all")
        ablation = []
        for acoustic, semantic, label, drop in ABLATIONS:
            m = evaluate_ensemble(systems, examples, drop=drop)
            ablation.append([acoustic, semantic, label, m.accuracy, m.n])
            print(f"ablation {label:<22} accuracy {m.accuracy:.4f}")
        _write_csv(out / "table_ablation.csv", ["acoustic", "semantic", "feature", "accuracy", "n"], ablation)
    return EXIT_OK


def params_report() -> list[tuple[str, float]]:
    """(label, value) pairs printed by ``dynfusion params``."""
    time_full = branches.count_fullscale_params("time", "full")
    time_small = branches.count_fullscale_params("time", "lightweight")
    text_full = branches.count_fullscale_params("semantic", "full")
    text_small = branches.count_fullscale_params("semantic", "lightweight")
    systems = {s: branches.count_system_params(s)["total"]
               for s in ("baseline", "baseline_lightweight", "proposed")}
    desk = FusionModel(default_model_config(Tokenizer([]))).initialize(0)
    return [
        ("time_encoder_24_layers", time_full),
        ("time_encoder_4_layers", time_small),
        ("time_encoder_reduction", branches.reduction(time_small, time_full)),
        ("text_encoder_12_layers", text_full),
        ("text_encoder_1_layer", text_small),
        ("text_encoder_reduction", branches.reduction(text_small, text_full)),
        ("baseline_total", systems["baseline"]),
        ("baseline_lightweight_total", systems["baseline_lightweight"]),
        ("proposed_total", systems["proposed"]),
        ("proposed_over_baseline", systems["proposed"] / systems["baseline"]),
        ("desk_model_analytic", desk.param_count()),
        ("desk_model_instantiated", desk.num_elements()),
    ]


def cmd_params(args) -> int:
    report = params_report()
    for label, value in report:
        text = f"{value:.4f}" if isinstance(value, float) else f"{value:,}"
        print(f"{label:<28} {text}")
    values = dict(report)
    if values["desk_model_analytic"] != values["desk_model_instantiated"]:
        raise ContractError("analytic parameter count disagrees with the instantiated model")
    if args.out is not None:
        _write_csv(args.out / "params.csv", ["quantity", "value"], [list(r) for r in report])
        _stamp(args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt:
        with gc.corrupted_backward(args.corrupt):
            results = gc.run_suite(args.instances, args.model_instances, args.seed)
    else:
        results = gc.run_suite(args.instances, args.model_instances, args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = f"  ({r.skipped}/{r.probed} probes skipped at kinks)" if r.skipped else ""
        print(f"{status} {r.kind:<6} {r.name:<18} max rel error {r.max_error:.3e} < {r.threshold:.0e}{note}")
    if args.out is not None:
        _write_csv(args.out / "gradcheck.csv",
                   ["kind", "name", "max_error", "threshold", "instances", "probed", "skipped", "passed"],
                   [[r.kind, r.name, r.max_error, r.threshold, r.instances, r.probed, r.skipped, r.passed]
                    for r in results])
        _stamp(args)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
            "params": cmd_params, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ContractError, ShapeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
