"""
Config-driven command line: one pipeline per subcommand.

    advtrust <train|adv-train|ddb-vs-steps|band-sweep|score|distill>
             --config PATH [--threads N] [--out DIR]

Every ``cmd_*`` function is importable and returns the dict of files it
wrote.  Each run also writes ``<command>_manifest.json`` carrying the hash
of the resolved config, so a report can be traced back to its inputs.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import nn
from .attacks import steps_profile, write_steps_profile
from .config import ExperimentConfig, load_config, parse_config
from .data import load_cifar10, per_class_head, split, stratified_partition, synth_shapes
from .distill import distill, write_distill_log
from .errors import AdvTrustError, ConfigError, DegeneratePartitionError, PreconditionError, UndefinedMetricError
from .reports import config_hash, write_csv, write_json
from .spectral import band_sweep_accuracy, flipping_frequencies
from .training import accuracy, adversarial_train, load_model, save_model, train, write_train_log
from .vulnerability import (
    fit_normalization,
    flagging_accuracy,
    kmeans2,
    raw_factors,
    score_profiles,
    write_profiles,
)

log = logging.getLogger("advtrust")

COMMANDS = ("train", "adv-train", "ddb-vs-steps", "band-sweep", "score", "distill")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

STEPS_SUMMARY_COLUMNS = ("attack_kind", "n_samples", "success_rate", "rank_correlation")
BAND_SWEEP_COLUMNS = ("band_index", "cumulative_direction", "accuracy", "n_samples")
HF_COLUMNS = ("class", "n_samples", "clean_accuracy", "avg_hf_band_req")
FLAGGING_COLUMNS = (
    "score", "status", "n_samples", "n_flagged", "n_flagged_wrong", "flagging_accuracy",
    "non_trust_centroid", "trust_centroid",
)
COMPARISON_COLUMNS = (
    "budget", "strategy", "temperature", "lam", "n_transfer", "student_acc", "teacher_acc",
)


def as_config(cfg, out=None):
    """Accept an :class:`ExperimentConfig`, a mapping or a path; ``out`` overrides output_dir."""
    if isinstance(cfg, ExperimentConfig):
        pass
    elif isinstance(cfg, dict):
        cfg = parse_config(cfg)
    else:
        cfg = load_config(cfg)
    if out is not None:
        cfg.output_dir = str(out)
    return cfg


def experiment_hash(cfg):
    """Hash of the resolved config; the output directory is not part of an experiment's identity."""
    doc = {k: v for k, v in cfg.raw.items() if k != "output_dir"}
    return config_hash(doc)


def load_splits(cfg):
    """``(train, calibration, test)`` datasets for the config's dataset block."""
    d = cfg.dataset
    if d.kind == "synth_shapes":
        full = synth_shapes(
            p=d.classes, n_per_class=d.n_per_class, side=d.side, seed=cfg.seed,
            lf_strength=d.lf_strength, hf_strength=d.hf_strength, noise=d.noise,
        )
        return split(full, tuple(d.splits), seed=cfg.seed)
    train_ds = load_cifar10(d.dir, "train")
    test_full = load_cifar10(d.dir, "test")
    if d.train_per_class:
        train_ds = per_class_head(train_ds, d.train_per_class, seed=cfg.seed)
    if d.test_per_class:
        test_full = per_class_head(test_full, d.test_per_class, seed=cfg.seed)
    cal_share = d.splits[1] / (d.splits[1] + d.splits[2])
    cal, test = stratified_partition(
        test_full, (cal_share, 1.0 - cal_share), seed=cfg.seed, names=("calibration", "test"),
    )
    return train_ds, cal, test


def _split_by_name(cfg, name):
    train_ds, cal, test = load_splits(cfg)
    return {"train": train_ds, "calibration": cal, "test": test}[name]


def _manifest(cfg, command, outputs, extra=None):
    doc = {
        "command": command,
        "config_hash": experiment_hash(cfg),
        "seed": cfg.seed,
        "outputs": sorted(Path(p).name for p in outputs.values()),
    }
    if extra:
        doc.update(extra)
    path = cfg.out / f"{command.replace('-', '_')}_manifest.json"
    write_json(path, doc)
    outputs["manifest"] = path
    return outputs


def _model_spec(cfg, dataset, block=None):
    return (block or cfg.model).build(tuple(dataset.sample_shape), dataset.num_classes)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    train_ds, _, test = load_splits(cfg)
    net, epochs = train(_model_spec(cfg, train_ds), train_ds, cfg.train.config(cfg.seed))
    outputs = {"model": cfg.out / "model.advt", "log": cfg.out / "train_log.csv"}
    save_model(outputs["model"], net)
    write_train_log(outputs["log"], epochs)
    return _manifest(cfg, "train", outputs, {"test_accuracy": accuracy(net, test.images, test.labels)})


def cmd_adv_train(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    train_ds, _, test = load_splits(cfg)
    tcfg = cfg.train.config(cfg.seed, adversarial=cfg.attack.adv_cfg)
    net, epochs = adversarial_train(_model_spec(cfg, train_ds), train_ds, tcfg)
    outputs = {"model": cfg.out / "model_robust.advt", "log": cfg.out / "adv_train_log.csv"}
    save_model(outputs["model"], net)
    write_train_log(outputs["log"], epochs)
    return _manifest(
        cfg, "adv-train", outputs, {"test_accuracy": accuracy(net, test.images, test.labels)}
    )


def cmd_ddb_vs_steps(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    net = load_model(cfg.resolve(cfg.attack.model_file))
    test = _split_by_name(cfg, "test")
    if len(test) == 0:
        raise PreconditionError("ddb-vs-steps needs a non-empty test split")
    outputs, summary = {}, []
    for kind in cfg.attack.kinds:
        prof = steps_profile(
            net, test.images, cfg.attack.for_kind(kind), labels=test.labels,
            sample_ids=test.ids, threads=threads,
        )
        path = cfg.out / f"ddb_vs_steps_{kind}.csv"
        write_steps_profile(path, prof)
        outputs[kind] = path
        summary.append({
            "attack_kind": kind,
            "n_samples": len(test),
            "success_rate": float(np.mean(prof.success)),
            "rank_correlation": prof.rank_correlation,
        })
        log.info("%s: rank correlation %.3f", kind, prof.rank_correlation)
    outputs["summary"] = cfg.out / "ddb_vs_steps_summary.csv"
    write_csv(outputs["summary"], summary, STEPS_SUMMARY_COLUMNS)
    return _manifest(cfg, "ddb-vs-steps", outputs)


def _sweep_rows(net, images, labels):
    return [
        {"band_index": j, "cumulative_direction": "high_to_low", "accuracy": acc,
         "n_samples": int(images.shape[0])}
        for j, acc in band_sweep_accuracy(net, images, labels)
    ]


def cmd_band_sweep(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    net = load_model(cfg.resolve(cfg.spectral.model_file))
    ds = _split_by_name(cfg, cfg.spectral.split)
    if len(ds) == 0:
        raise PreconditionError("band-sweep needs a non-empty split")
    outputs = {"sweep": cfg.out / "band_sweep.csv"}
    write_csv(outputs["sweep"], _sweep_rows(net, ds.images, ds.labels), BAND_SWEEP_COLUMNS)

    preds = np.atleast_1d(nn.predict(net, ds.images))
    F = flipping_frequencies(net, ds.images)
    hf_rows = []
    for c in range(ds.num_classes):
        mask = ds.labels == c
        if not mask.any():
            continue
        keep = mask & (preds == ds.labels) if cfg.spectral.correct_only else mask
        path = cfg.out / f"band_sweep_class{c}.csv"
        write_csv(path, _sweep_rows(net, ds.images[mask], ds.labels[mask]), BAND_SWEEP_COLUMNS)
        outputs[f"sweep_class{c}"] = path
        hf_rows.append({
            "class": c,
            "n_samples": int(keep.sum()),
            "clean_accuracy": float(np.mean(preds[mask] == c)),
            "avg_hf_band_req": float(F[keep].mean()) if keep.any() else math.nan,
        })
    outputs["hf"] = cfg.out / "hf_band_requirement.csv"
    write_csv(outputs["hf"], hf_rows, HF_COLUMNS)
    return _manifest(cfg, "band-sweep", outputs, {"correct_only": cfg.spectral.correct_only})


def _flagging_row(name, scores, ids, preds, labels):
    row = {"score": name, "n_samples": int(scores.shape[0])}
    try:
        part = kmeans2(scores, ids)
        row.update(
            non_trust_centroid=part.non_trust_centroid, trust_centroid=part.trust_centroid,
            n_flagged=int((~part.trust).sum()),
            n_flagged_wrong=int((preds[~part.trust] != labels[~part.trust]).sum()),
        )
        row["flagging_accuracy"] = flagging_accuracy(part, preds, labels)
        row["status"] = "ok"
    except (DegeneratePartitionError, UndefinedMetricError) as exc:
        part = None
        row["status"] = "undefined"
        log.warning("flagging accuracy for %s undefined: %s", name, exc)
    row.setdefault("n_flagged", 0)
    row.setdefault("n_flagged_wrong", 0)
    for col in FLAGGING_COLUMNS:
        row.setdefault(col, math.nan)
    return row, part


def cmd_score(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    net = load_model(cfg.resolve(cfg.trust.model_file))
    _, cal, test = load_splits(cfg)
    if len(test) == 0:
        raise PreconditionError("score needs a non-empty test split")
    attack = cfg.attack.for_kind(cfg.trust.ddb_attack)
    cal_raw = raw_factors(net, cal.images, attack, cal.labels, cal.ids, threads=threads)
    stats = fit_normalization(cal_raw)
    profiles = score_profiles(
        raw_factors(net, test.images, attack, test.labels, test.ids, threads=threads), stats
    )
    preds = np.atleast_1d(nn.predict(net, test.images))

    flag_rows, parts = [], {}
    for name in ("d_hat", "F_hat", "T"):
        scores = np.array([getattr(p, name) for p in profiles], dtype=np.float64)
        row, parts[name] = _flagging_row(name, scores, test.ids, preds, test.labels)
        flag_rows.append(row)
    t_part = parts["T"]
    if t_part is not None:
        for p, trusted in zip(profiles, t_part.trust):
            p.cluster = "trust" if trusted else "non_trust"

    outputs = {
        "profiles": cfg.out / "profiles.csv",
        "calibration_profiles": cfg.out / "calibration_profiles.csv",
        "normalization": cfg.out / "normalization.json",
        "partition": cfg.out / "partition.json",
        "flagging": cfg.out / "flagging.csv",
        "summary": cfg.out / "score_summary.json",
    }
    write_profiles(outputs["profiles"], profiles)
    write_profiles(outputs["calibration_profiles"], score_profiles(cal_raw, stats))
    stats.save(outputs["normalization"])
    write_json(outputs["partition"], t_part.to_dict() if t_part is not None else {"status": "undefined"})
    write_csv(outputs["flagging"], flag_rows, FLAGGING_COLUMNS)

    by_score = {r["score"]: r["flagging_accuracy"] for r in flag_rows}
    defined = {k: v for k, v in by_score.items() if not math.isnan(v)}
    summary = {
        "config_hash": experiment_hash(cfg),
        "ddb_attack": cfg.trust.ddb_attack,
        "n_test": len(test),
        "n_calibration": len(cal),
        "test_accuracy": float(np.mean(preds == test.labels)),
        "n_censored": int(sum(p.censored for p in profiles)),
        "flagging_accuracy": {k: (None if math.isnan(v) else v) for k, v in by_score.items()},
        # the ordering is reported for inspection, never enforced
        "T_highest": bool("T" in defined and defined["T"] >= max(defined.values())),
    }
    write_json(outputs["summary"], summary)
    return _manifest(cfg, "score", outputs)


def cmd_distill(cfg, threads=1, out=None):
    cfg = as_config(cfg, out)
    teacher = load_model(cfg.resolve(cfg.distill.teacher_file))
    train_ds, _, test = load_splits(cfg)
    attack = cfg.attack.for_kind(cfg.distill.ddb_attack)
    raws = raw_factors(teacher, train_ds.images, attack, train_ds.labels, train_ds.ids, threads=threads)
    profiles = score_profiles(raws, fit_normalization(raws))
    student_spec = _model_spec(cfg, train_ds, cfg.distill.student_block)
    teacher_acc = accuracy(teacher, test.images, test.labels)

    outputs = {"profiles": cfg.out / "distill_profiles.csv"}
    write_profiles(outputs["profiles"], profiles)
    rows = []
    for budget in cfg.distill.budgets:
        for strategy in cfg.distill.strategies:
            dcfg = cfg.distill.config(budget, strategy, cfg.seed)
            student, epochs, transfer = distill(teacher, student_spec, train_ds, profiles, dcfg, val=test)
            tag = f"{strategy}_b{budget}"
            paths = {
                f"student_{tag}": cfg.out / f"student_{tag}.advt",
                f"transfer_{tag}": cfg.out / f"transfer_{tag}.json",
                f"log_{tag}": cfg.out / f"distill_log_{tag}.csv",
            }
            save_model(paths[f"student_{tag}"], student)
            transfer.save(paths[f"transfer_{tag}"])
            write_distill_log(paths[f"log_{tag}"], epochs)
            outputs.update(paths)
            rows.append({
                "budget": budget, "strategy": strategy, "temperature": dcfg.temperature,
                "lam": dcfg.lam, "n_transfer": int(transfer.ids.shape[0]),
                "student_acc": accuracy(student, test.images, test.labels),
                "teacher_acc": teacher_acc,
            })
            log.info("distill %s budget %d: student acc %.3f", strategy, budget, rows[-1]["student_acc"])
    outputs["comparison"] = cfg.out / "distill_comparison.csv"
    write_csv(outputs["comparison"], rows, COMPARISON_COLUMNS)
    return _manifest(cfg, "distill", outputs)


HANDLERS = {
    "train": cmd_train,
    "adv-train": cmd_adv_train,
    "ddb-vs-steps": cmd_ddb_vs_steps,
    "band-sweep": cmd_band_sweep,
    "score": cmd_score,
    "distill": cmd_distill,
}


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="advtrust", description=__doc__.strip().splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--threads", type=_positive_int, default=1, help="cap on attack fan-out")
    parser.add_argument("--out", help="output directory, overrides output_dir in the config")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(levelname)s: %(message)s",
    )
    try:
        cfg = as_config(args.config, args.out)
        outputs = HANDLERS[args.command](cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"advtrust: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdvTrustError, OSError) as exc:
        print(f"advtrust: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for key in sorted(outputs):
        print(f"{key}\t{outputs[key]}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
