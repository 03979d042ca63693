"""Command-line front end: ``advtune <subcommand> -c CONFIG [--set a.b=v ...]``.

Run directory layout::

    <out>/config.yaml          canonical config of the last invocation
    <out>/metrics.jsonl        append-only training metrics
    <out>/standard/*.ckpt      standard-phase checkpoints (last, best)
    <out>/robust/*.ckpt        robust-phase checkpoints
    <out>/reports/*.jsonl      one record per evaluated cell
    <out>/curves/*.csv|png     series and static plots
    <out>/report.txt           rendered tables
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import (
    AttackBudget,
    attack_success,
    calibrate_attack_strength,
    dra,
    fgsm,
    pgd,
    run_attack,
    save_attack_archive,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import DATA_ENV, ConfigError, ExperimentConfig, to_unit, to_unit_list
from .data import CORRUPTIONS, MNIST_FILES, AugmentPolicy, LabeledDataset, load_cifar10, load_cifar10c, load_mnist
from .evaluation import ablation_p_sweep, corruption_eval, evaluate_robustness, r_separation
from .metrics import MetricsLog
from .models import ModelSpec, build_model
from .reporting import (
    atomic_write,
    fmt,
    plot_series,
    read_jsonl,
    read_series_csv,
    render_table,
    replace_records,
    write_series_csv,
)
from .training import AttackSpec, EpsilonSchedule, TrainPlan, finetune_robust, train_standard

log = logging.getLogger("advtune")

HELP = {
    "train-standard": "train on clean data (standard phase)",
    "finetune-robust": "adversarially fine-tune the standard checkpoint (robust phase)",
    "attack": "run the configured attack on the test split and archive examples",
    "evaluate": "PGD robust accuracy over eval.eps_list",
    "calibrate": "pair PGD and DRA budgets of equal robust accuracy",
    "ablate-p": "DRA success rate versus the significant fraction p",
    "corruption-eval": "accuracy on CIFAR-10-C corruptions",
    "r-sep": "smallest inter-class distance of the training split",
    "report": "render tables and plots from the run's reports",
    "run": "standard phase, robust phase, evaluation and report in one go",
}
SUBCOMMANDS = (
    "train-standard", "finetune-robust", "attack", "evaluate", "calibrate",
    "ablate-p", "corruption-eval", "r-sep", "report", "run",
)
PHASE_LABELS = {"standard": "vanilla", "robust": "dra-finetuned"}


class CLIError(RuntimeError):
    """A user-facing failure with an actionable message (exit status 1)."""


# --------------------------------------------------------------------------- run directory


@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of a run directory through an O_EXCL lock file."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock.read_text().strip() if lock.exists() else "?"
        raise CLIError(f"{out} is locked by another run (pid {owner}); delete {lock} if that run is gone")
    with os.fdopen(fd, "w") as f:
        f.write(str(os.getpid()))
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------- wiring helpers


def _find_dir(root: Path, subdirs, marker: str) -> Path:
    for sub in subdirs:
        d = root / sub if sub else root
        if (d / marker).exists() or (d / (marker + ".gz")).exists():
            return d
    raise CLIError(f"no dataset files ({marker}) under {root}; set dataset.root or ${DATA_ENV}")


def load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    ds_cfg = cfg["dataset"]
    root = cfg.data_root()
    if ds_cfg["name"] == "mnist":
        d = _find_dir(root, ["", "mnist", "MNIST", "MNIST/raw"], MNIST_FILES["train"][0])
        data = load_mnist(d, split)
    else:
        d = _find_dir(root, ["", "cifar-10-batches-bin", "cifar10"], "test_batch.bin")
        data = load_cifar10(d, split)
    limit = ds_cfg["train_limit" if split == "train" else "test_limit"]
    if limit is not None and limit < len(data):
        data = data.subset(np.arange(limit))
    return data


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    spec = ModelSpec.for_dataset(cfg["model"]["architecture"], cfg["dataset"]["name"])
    if not cfg["model"]["normalize"]:
        spec = ModelSpec(spec.architecture, spec.input_shape, spec.class_count)
    return spec


def new_model(cfg: ExperimentConfig):
    dtype = getattr(torch, cfg["model"]["dtype"])
    return build_model(model_spec(cfg), seed=cfg["seed"], dtype=dtype)


def l1_factor(cfg: ExperimentConfig) -> float:
    """Multiplier turning a configured DRA epsilon into the total L1 budget."""
    if cfg["attack"]["kind"] != "dra" or cfg["attack"]["l1_scale"] == "total":
        return 1.0
    return float(np.prod(model_spec(cfg).input_shape))


def attack_spec(cfg: ExperimentConfig) -> AttackSpec:
    a = cfg["attack"]
    return AttackSpec(
        kind=a["kind"],
        epsilon=to_unit(a["epsilon"]) * l1_factor(cfg),
        iterations=a["iterations"],
        step_size=to_unit(a["step_size"]),
        random_start=a["random_start"],
        p=a["p"],
    )


def epsilon_schedule(cfg: ExperimentConfig) -> EpsilonSchedule:
    r, k = cfg["robust"], l1_factor(cfg)
    if r["schedule"] is None:
        if r.get("epochs") is None:
            raise ConfigError(["robust: give either robust.epochs or robust.schedule"])
        return EpsilonSchedule.constant(to_unit(cfg["attack"]["epsilon"]) * k, r["epochs"])
    s = r["schedule"]
    sched = EpsilonSchedule(to_unit(s["start"]) * k, to_unit(s["end"]) * k, s["decay_epochs"], s.get("tail_epochs", 0))
    if r.get("epochs") is not None and r["epochs"] != sched.total_epochs:
        raise ConfigError([f"robust.epochs={r['epochs']} disagrees with schedule total {sched.total_epochs}"])
    return sched


def train_plan(cfg: ExperimentConfig, phase: str) -> TrainPlan:
    p = cfg[phase]
    return TrainPlan(
        epochs=p.get("epochs") or 0,
        lr=p["lr"],
        momentum=p["momentum"],
        weight_decay=p["weight_decay"],
        batch_size=p["batch_size"],
        lr_milestones=tuple(p["lr_milestones"]),
        lr_gamma=p["lr_gamma"],
        phase=phase,
        replay=tuple(p.get("replay", (1.0, 1.0))),
        replay_mode=p.get("replay_mode", "combined"),
        attack=attack_spec(cfg) if phase == "robust" else AttackSpec("none"),
        augment=AugmentPolicy() if cfg["dataset"]["augment"] else AugmentPolicy.disabled(),
        seed=cfg["seed"],
        robust_eval_every=cfg["eval"]["robust_every"],
        max_steps=p["max_steps"],
    )


def eval_budget(cfg: ExperimentConfig) -> AttackBudget | None:
    e = cfg["eval"]
    eps = to_unit(e["train_eps"]) if e["train_eps"] else max(to_unit_list(e["eps_list"]))
    if eps == 0:
        return None
    return AttackBudget(eps, "l_inf", e["iterations"], eps * e["step_fraction"], e["random_start"])


def eps_label(value: float, unit: str) -> str:
    return f"{value:g}/255" if unit == "per255" else f"{value:g}"


def ckpt_path(out: Path, phase: str, which: str = "last") -> Path:
    return out / phase / f"{which}.ckpt"


def load_model_from(path: Path, cfg: ExperimentConfig):
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as exc:
        raise CLIError(str(exc)) from exc
    spec_d = ckpt.extra.get("model_spec")
    spec = ModelSpec.from_dict(spec_d) if spec_d else model_spec(cfg)
    model = build_model(spec, seed=cfg["seed"], dtype=getattr(torch, cfg["model"]["dtype"]))
    model.load_state_dict(ckpt.parameters)
    return model, ckpt


def models_to_evaluate(args, cfg, out: Path) -> list[tuple[str, object, Checkpoint]]:
    if args.checkpoint:
        model, ckpt = load_model_from(Path(args.checkpoint), cfg)
        return [(args.label or PHASE_LABELS.get(ckpt.phase, ckpt.phase), model, ckpt)]
    phases = [args.phase] if getattr(args, "phase", None) else ["standard", "robust"]
    found = []
    for phase in phases:
        path = ckpt_path(out, phase)
        if path.exists():
            model, ckpt = load_model_from(path, cfg)
            found.append((args.label or PHASE_LABELS[phase], model, ckpt))
    if not found:
        raise CLIError(f"no checkpoint in {out}/{{standard,robust}}; train first or pass --checkpoint")
    return found


@contextmanager
def _setup(cfg: ExperimentConfig):
    """Seed torch and, for deterministic configs, force deterministic kernels for the call."""
    previous = torch.are_deterministic_algorithms_enabled()
    torch.manual_seed(cfg["seed"])
    torch.use_deterministic_algorithms(bool(cfg["deterministic"]) or previous)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


# --------------------------------------------------------------------------- subcommands


def cmd_train_standard(args, cfg, out):
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    model = new_model(cfg)
    metrics = MetricsLog(out / "metrics.jsonl", cfg["name"], cfg.fingerprint)
    resume = _resume(args, out, "standard", cfg, metrics)
    ckpt, margin, history = train_standard(
        model, train, train_plan(cfg, "standard"), margin_data=test,
        eval_data=test, eval_budget=eval_budget(cfg), metrics=metrics,
        checkpoint_dir=out / "standard", fingerprint=cfg.fingerprint,
        extra={"model_spec": model_spec(cfg).to_dict()}, resume=resume, stop_after=args.stop_after,
    )
    acc = history[-1].clean_accuracy if history else None
    print(f"standard phase: {ckpt.epoch} epochs, test accuracy {fmt(acc)}%, margin {margin:.4f}")
    return 0


def _resume(args, out, phase, cfg, metrics) -> Checkpoint | None:
    if not args.resume:
        return None
    path = ckpt_path(out, phase)
    if not path.exists():
        raise CLIError(f"--resume: no {phase} checkpoint at {path}")
    ckpt = load_checkpoint(path)
    if ckpt.fingerprint != cfg.fingerprint:
        raise CLIError(f"--resume: checkpoint fingerprint {ckpt.fingerprint[:12]} != config {cfg.fingerprint[:12]}")
    metrics.truncate_after(ckpt.epoch - 1, phase)
    return ckpt


def cmd_finetune_robust(args, cfg, out):
    start = Path(args.start) if args.start else ckpt_path(out, "standard")
    if not start.exists():
        raise CLIError(
            f"robust fine-tuning needs a standard-phase checkpoint, none found at {start}. "
            f"Run `advtune train-standard -c <config>` first or pass --from PATH."
        )
    theta_std = load_checkpoint(start)
    if theta_std.phase != "standard":
        raise CLIError(f"{start} is a {theta_std.phase!r} checkpoint; fine-tuning starts from 'standard'")
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    model = new_model(cfg)
    metrics = MetricsLog(out / "metrics.jsonl", cfg["name"], cfg.fingerprint)
    resume = _resume(args, out, "robust", cfg, metrics)
    ckpt, history = finetune_robust(
        model, theta_std, train, epsilon_schedule(cfg), train_plan(cfg, "robust"),
        solver=cfg["robust"]["solver"], eta_lambda=cfg["robust"]["eta_lambda"],
        eval_data=test, eval_budget=eval_budget(cfg), metrics=metrics,
        checkpoint_dir=out / "robust", fingerprint=cfg.fingerprint, resume=resume,
        stop_after=args.stop_after, extra={"model_spec": model_spec(cfg).to_dict()},
    )
    last = history[-1] if history else None
    print(f"robust phase: {ckpt.epoch} epochs, test accuracy {fmt(last and last.clean_accuracy)}%, "
          f"robust {fmt(last and last.robust_accuracy)}%")
    return 0


def cmd_attack(args, cfg, out):
    test = load_split(cfg, "test")
    spec = attack_spec(cfg)
    records = []
    for label, model, ckpt in models_to_evaluate(args, cfg, out):
        budget = spec.budget()
        gen = torch.Generator().manual_seed(cfg["seed"])
        mask_rule = cfg["attack"]["mask_rule"]

        def attack(x, y):
            if spec.kind == "dra":
                return dra(model, x, y, budget.epsilon, budget.significant_fraction, budget.iterations,
                           mask_rule=mask_rule)
            if spec.kind == "fgsm":
                return fgsm(model, x, y, budget.epsilon)
            return pgd(model, x, y, budget, gen)

        res = attack_success(model, test, attack)
        n = min(len(test), args.archive_count)
        batch = attack(torch.from_numpy(test.images[:n]).to(model.dtype), torch.from_numpy(test.labels[:n]))
        (out / "attacks").mkdir(exist_ok=True)
        save_attack_archive(out / "attacks" / f"{label}-{spec.kind}.npz", batch)
        records.append({"label": label, "attack": spec.kind, "budget": budget.to_dict(), **res})
        print(f"{label}: {spec.kind} eps={budget.epsilon:.4g} robust accuracy {fmt(res['robust_accuracy'])}% "
              f"success on correct {fmt(res['success_rate_on_correct'])}%")
    for rec in records:
        replace_records(out / "reports" / "attack.jsonl", "label", rec["label"], [rec])
    return 0


def cmd_evaluate(args, cfg, out):
    test = load_split(cfg, "test")
    e = cfg["eval"]
    eps = to_unit_list(e["eps_list"])
    labels = [eps_label(v, e["eps_list"]["unit"]) for v in e["eps_list"]["values"]]
    for label, model, ckpt in models_to_evaluate(args, cfg, out):
        rep = evaluate_robustness(model, test, eps, e["iterations"], e["step_fraction"], e["random_start"],
                                  seed=cfg["seed"], fingerprint=ckpt.fingerprint, label=label)
        records = rep.to_records()
        for rec, lab in zip(records, labels):
            rec["epsilon_label"] = lab
        replace_records(out / "reports" / "robustness.jsonl", "label", label, records)
        print(render_table(["Model", "Natural"] + [f"PGD {lab}" for lab in labels],
                           [[label, fmt(rep.natural_accuracy)] + [fmt(c.robust_accuracy) for c in rep.cells]]))
    return 0


def cmd_calibrate(args, cfg, out):
    c = cfg["eval"]["calibrate"]
    test = load_split(cfg, "test")
    if c["limit"] is not None and c["limit"] < len(test):
        test = test.subset(np.arange(c["limit"]))
    e = cfg["eval"]
    k = float(np.prod(model_spec(cfg).input_shape)) if cfg["attack"]["l1_scale"] == "per_pixel" else 1.0
    p, T = cfg["attack"]["p"], cfg["attack"]["iterations"]
    for label, model, _ in models_to_evaluate(args, cfg, out):
        gen = torch.Generator().manual_seed(cfg["seed"])

        def make_pgd(eps):
            b = AttackBudget(eps, "l_inf", e["iterations"], eps * e["step_fraction"], e["random_start"])
            return lambda x, y: pgd(model, x, y, b, gen)

        def make_dra(eps):
            return lambda x, y: run_attack(model, x, y, AttackBudget.dra(eps * k, p, T))

        cal = calibrate_attack_strength(
            model, test, (make_pgd, to_unit_list(c["pgd_grid"])), (make_dra, to_unit_list(c["dra_grid"])),
            c["tolerance"],
        )
        recs = [{"label": label, **m.__dict__} for m in cal.matches]
        replace_records(out / "reports" / "calibration.jsonl", "label", label, recs)
        write_series_csv(out / "curves" / f"calibration-{label}-pgd.csv",
                         {"epsilon": [a for a, _ in cal.reference_curve], "robust_accuracy": [b for _, b in cal.reference_curve]})
        write_series_csv(out / "curves" / f"calibration-{label}-dra.csv",
                         {"epsilon": [a for a, _ in cal.candidate_curve], "robust_accuracy": [b for _, b in cal.candidate_curve]})
        print(render_table(["PGD eps", "PGD acc", "DRA eps", "DRA acc", "status"],
                           [[f"{m.reference_epsilon:.4g}", fmt(m.reference_accuracy),
                             "-" if m.candidate_epsilon is None else f"{m.candidate_epsilon:.4g}",
                             fmt(m.candidate_accuracy), m.status] for m in cal.matches], title=label))
    return 0


def cmd_ablate_p(args, cfg, out):
    a = cfg["eval"]["ablation"]
    test = load_split(cfg, "test")
    if a["limit"] is not None and a["limit"] < len(test):
        test = test.subset(np.arange(a["limit"]))
    if args.phase is None and not args.checkpoint:
        args.phase = "standard"
    eps = (to_unit(a["epsilon"]) * l1_factor(cfg)) if a["epsilon"] else attack_spec(cfg).epsilon
    for label, model, _ in models_to_evaluate(args, cfg, out):
        curve = ablation_p_sweep(model, test, eps, a["iterations"], a["p_list"])
        recs = [{"label": label, **r} for r in curve.to_records()]
        replace_records(out / "reports" / "ablation_p.jsonl", "label", label, recs)
        csv_path = out / "curves" / f"ablation_p-{label}.csv"
        write_series_csv(csv_path, {"p": curve.p_values, "retained_pixels": curve.retained_pixels,
                                    "success_rate": curve.error_rate,
                                    "success_rate_on_correct": curve.success_rate_on_correct})
        plot_series(csv_path.with_suffix(".png"), curve.p_values, {label: curve.error_rate},
                    "significant fraction p", "attack success rate", f"DRA eps={eps:.4g}, T={a['iterations']}")
        print(render_table(["p", "pixels", "success", "success on correct"],
                           [[f"{r['p']:.4g}", r["retained_pixels"], fmt(r["error_rate"]),
                             fmt(r["success_rate_on_correct"])] for r in recs], title=label))
    return 0


def cmd_corruption_eval(args, cfg, out):
    c = cfg["eval"]["corruptions"]
    if cfg["dataset"]["name"] != "cifar10":
        raise CLIError("corruption-eval needs dataset.name: cifar10")
    root = Path(c["root"]) if c["root"] else cfg.data_root() / "CIFAR-10-C"
    if not (root / "labels.npy").exists():
        raise CLIError(f"no CIFAR-10-C arrays under {root}; set eval.corruptions.root")
    unknown = [n for n in c["names"] if n not in CORRUPTIONS]
    if unknown:
        raise CLIError(f"unsupported corruptions {unknown}; choose from {CORRUPTIONS}")
    for label, model, _ in models_to_evaluate(args, cfg, out):
        sets = (load_cifar10c(root, n, s) for n in c["names"] for s in c["severities"])
        table = corruption_eval(model, sets)
        recs = [{"label": label, **r} for r in table.to_records()]
        replace_records(out / "reports" / "corruption.jsonl", "label", label, recs)
        print(render_table(["Model"] + list(table.mean), [[label] + [fmt(v) for v in table.mean.values()]]))
    return 0


def cmd_r_sep(args, cfg, out):
    r = cfg["eval"]["r_sep"]
    train = load_split(cfg, "train")
    est = r_separation(train, r["metric"], r["subsample"], cfg["seed"])
    rec = {"label": "train", "metric": est.metric, "distance": est.distance, "r": est.r, "pair": list(est.pair),
           "pair_labels": list(est.pair_labels), "samples": est.samples, "degenerate": est.degenerate}
    replace_records(out / "reports" / "r_sep.jsonl", "label", "train", [rec])
    note = " (duplicate images with different labels)" if est.degenerate else ""
    print(f"2r = {est.distance:.6g} ({est.metric}, {est.samples} samples){note}")
    return 0


def build_report(out: Path) -> str:
    reports = out / "reports"
    sections = []
    rob = read_jsonl(reports / "robustness.jsonl")
    if rob:
        eps_cols = sorted({(r["epsilon"], r.get("epsilon_label", f"{r['epsilon']:g}")) for r in rob})
        rows = []
        for label in dict.fromkeys(r["label"] for r in rob):
            mine = {r["epsilon"]: r for r in rob if r["label"] == label}
            nat = next(iter(mine.values()))["natural_accuracy"]
            rows.append([label, fmt(nat)] + [fmt(mine[e]["robust_accuracy"]) if e in mine else "-" for e, _ in eps_cols])
        sections.append(render_table(["Model", "Natural"] + [f"PGD {lab}" for _, lab in eps_cols], rows,
                                     "Robust accuracy (%), PGD l_inf, all test samples"))
    abl = read_jsonl(reports / "ablation_p.jsonl")
    if abl:
        rows = [[r["label"], f"{r['p']:.4g}", r["retained_pixels"], fmt(r["error_rate"]),
                 fmt(r["success_rate_on_correct"])] for r in abl]
        sections.append(render_table(["Model", "p", "pixels", "success", "success on correct"], rows,
                                     "DRA success rate (%) versus significant fraction p"))
        for csv_path in sorted((out / "curves").glob("ablation_p-*.csv")):
            s = read_series_csv(csv_path)
            plot_series(csv_path.with_suffix(".png"), s["p"], {csv_path.stem[len("ablation_p-"):]: s["success_rate"]},
                        "significant fraction p", "attack success rate")
    cor = read_jsonl(reports / "corruption.jsonl")
    if cor:
        names = list(dict.fromkeys(r["corruption"] for r in cor))
        rows = []
        for label in dict.fromkeys(r["label"] for r in cor):
            means = {r["corruption"]: r["accuracy"] for r in cor if r["label"] == label and r["severity"] == "mean"}
            rows.append([label] + [fmt(means.get(n)) for n in names])
        sections.append(render_table(["Model"] + names, rows, "Corruption accuracy (%), mean over severities"))
    cal = read_jsonl(reports / "calibration.jsonl")
    if cal:
        rows = [[r["label"], f"{r['reference_epsilon']:.4g}", fmt(r["reference_accuracy"]),
                 "-" if r["candidate_epsilon"] is None else f"{r['candidate_epsilon']:.4g}",
                 fmt(r["candidate_accuracy"]), r["status"]] for r in cal]
        sections.append(render_table(["Model", "PGD eps", "PGD acc", "DRA eps", "DRA acc", "status"], rows,
                                     "Attack strength calibration"))
    att = read_jsonl(reports / "attack.jsonl")
    if att:
        rows = [[r["label"], r["attack"], f"{r['budget']['epsilon']:.4g}", fmt(r["natural_accuracy"]),
                 fmt(r["robust_accuracy"]), fmt(r["success_rate_on_correct"])] for r in att]
        sections.append(render_table(["Model", "attack", "eps", "natural", "robust", "success on correct"], rows,
                                     "Configured attack"))
    sep = read_jsonl(reports / "r_sep.jsonl")
    if sep:
        rows = [[r["metric"], f"{r['distance']:.6g}", f"{r['r']:.6g}", r["samples"], r["degenerate"]] for r in sep]
        sections.append(render_table(["metric", "2r", "r", "samples", "degenerate"], rows, "Class separation"))
    if not sections:
        raise CLIError(f"nothing to report in {out}: no reports/*.jsonl records found")
    return "\n".join(sections)


def cmd_report(args, cfg, out):
    text = build_report(out)
    atomic_write(out / "report.txt", text)
    print(text, end="")
    return 0


def cmd_run(args, cfg, out):
    steps = {
        "standard": cmd_train_standard,
        "robust": cmd_finetune_robust,
        "evaluate": cmd_evaluate,
        "ablate-p": cmd_ablate_p,
        "report": cmd_report,
    }
    for step in args.steps.split(","):
        if step not in steps:
            raise CLIError(f"unknown run step {step!r}; choose from {', '.join(steps)}")
        rc = steps[step](args, cfg, out)
        if rc:
            return rc
    return 0


COMMANDS = {
    "train-standard": cmd_train_standard,
    "finetune-robust": cmd_finetune_robust,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "ablate-p": cmd_ablate_p,
    "corruption-eval": cmd_corruption_eval,
    "r-sep": cmd_r_sep,
    "report": cmd_report,
    "run": cmd_run,
}


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advtune", description="Adversarial fine-tuning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.set_defaults(resume=False, stop_after=None, start=None, checkpoint=None, label=None, phase=None)
        p.add_argument("-c", "--config", required=True, help="preset name (mnist-paper, cifar10-paper) or YAML file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. --set attack.p=0.5 (repeatable)")
        p.add_argument("-o", "--out", help="run directory (same as --set output_dir=...)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-standard", "finetune-robust", "run"):
            p.add_argument("--resume", action="store_true", help="continue from the phase's last checkpoint")
            p.add_argument("--stop-after", type=int, default=None, metavar="EPOCHS",
                           help="stop once this many epochs are complete")
        if name in ("finetune-robust", "run"):
            p.add_argument("--from", dest="start", help="standard-phase checkpoint to start from")
        if name in ("attack", "evaluate", "calibrate", "ablate-p", "corruption-eval"):
            p.add_argument("--checkpoint", help="evaluate this checkpoint instead of the run's own")
            p.add_argument("--label", help="row label for --checkpoint")
            p.add_argument("--phase", choices=("standard", "robust"), help="only this phase's checkpoint")
        if name == "attack":
            p.add_argument("--archive-count", type=int, default=256, help="images stored in the .npz archive")
        if name == "run":
            p.add_argument("--steps", default="standard,robust,evaluate,report",
                           help="comma-separated steps: standard, robust, evaluate, ablate-p, report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={args.out}")
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
    except ConfigError as exc:
        print(f"advtune: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["output_dir"])
    if args.command == "report" and not any((out / "reports").glob("*.jsonl")):
        print(f"advtune: nothing to report in {out}: no reports/*.jsonl records found", file=sys.stderr)
        return 1
    try:
        with run_lock(out), _setup(cfg):
            if args.command != "report":
                atomic_write(out / "config.yaml", cfg.to_yaml())
            return COMMANDS[args.command](args, cfg, out)
    except (CLIError, ConfigError, CheckpointError) as exc:
        print(f"advtune: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
