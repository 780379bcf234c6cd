"""Command-line interface.

Subcommands: gen-synthetic, pretrain, search, simulate, fed-server,
fed-client, evaluate. Every command seeds all randomness from --seed and
writes a RunManifest next to its outputs. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from . import data as D
from .errors import FedharError
from .fedavg import FedConfig, run_cross_validation
from .metrics import fold_summary
from .model import ModelConfig, init_model
from .training import SearchSpace, TrainConfig, evaluate, random_search, train
from .util import append_jsonl, atomic_write_json, derive_seed
from .wire import (DEFAULT_PORT, client_loop, load_checkpoint, save_checkpoint,
                   server_loop, standardizer_path)

log = logging.getLogger(__name__)

# Desk-scale defaults; the full-scale protocol values live in the README.
DESK_EPOCHS = 50
DESK_BUDGET = 8
DESK_LOCAL_EPOCHS = 20


@dataclass
class RunManifest:
    """What a command ran with; written next to its outputs."""

    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started_at: str = ""
    wall_ms: float = 0.0
    package_version: str = __version__

    def write(self, path: str) -> None:
        atomic_write_json(path, self.__dict__)


def _manifest_for(args, command: str, config: dict, inputs, outputs) -> RunManifest:
    return RunManifest(
        command=command,
        argv=list(args._argv),
        config=config,
        seed=getattr(args, "seed", 0),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        started_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _nonnegative(kind):
    def parse(text):
        value = kind(text)
        if value < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return value
    return parse


def _load_records(path: str) -> list[D.SubjectRecord]:
    if os.path.isdir(path):
        return D.load_subject_dir(path)
    return [D.parse_extrasensory_csv(path)]


def _subject_subset(records, wanted_ids):
    by_id = {r.subject_id: r for r in records}
    missing = [s for s in wanted_ids if s not in by_id]
    if missing:
        raise FedharError(f"subjects missing from data: {missing}")
    return [by_id[s] for s in wanted_ids]


def _model_config_from_args(args, n_features: int, n_labels: int) -> ModelConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)

    def pick(flag, key, default):
        value = getattr(args, flag, None)
        if value is not None:
            return value
        return file_cfg.get(key, default)

    return ModelConfig(
        n_features=n_features,
        n_labels=n_labels,
        transformers_layers=pick("layers", "transformers_layers", 4),
        hidden_size=pick("hidden", "hidden_size", 384),
        n_positions=pick("n_positions", "n_positions", 128),
        n_heads=pick("n_heads", "n_heads", None),
        dropout=pick("dropout", "dropout", 0.1),
        seed=args.seed,
    )


def _client_windows_for_fold(records, fold_subjects, standardizer, n_positions, seed):
    """Standardize, window, and 80/20-split each fold subject's data."""
    clients = {}
    for rec in _subject_subset(records, fold_subjects):
        standardized = D.apply_standardizer(rec, standardizer)
        windows = D.make_windows(standardized, n_positions)
        train_w, test_w = D.split_train_test(windows, 0.8, seed)
        clients[rec.subject_id] = (train_w, test_w)
    return clients


# ------------------------------------------------------------- commands

def cmd_gen_synthetic(args) -> int:
    spec = D.SyntheticSpec(
        n_subjects=args.subjects,
        minutes_per_subject=args.minutes,
        n_features=args.features,
        n_labels=args.labels,
        alpha=args.alpha,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    started = time.monotonic()
    records = D.gen_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for rec in records:
        path = os.path.join(args.out, f"{rec.subject_id}.csv")
        D.write_subject_csv(rec, path)
        outputs.append(path)
    manifest = _manifest_for(args, "gen-synthetic", spec.__dict__, [], outputs)
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(records)} subjects to {args.out}")
    return 0


def cmd_make_folds(args) -> int:
    started = time.monotonic()
    records = _load_records(args.data)
    plan = D.build_fold_plan([r.subject_id for r in records], args.seed,
                             n_folds=args.n_folds)
    plan.save(args.out)
    manifest = _manifest_for(args, "make-folds", {"n_folds": args.n_folds},
                             [args.data], [args.out])
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(f"{args.out}.manifest.json")
    print(f"{args.n_folds} folds of {len(plan.folds[0])} subjects -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.monotonic()
    records = _load_records(args.data)
    if args.fold_plan:
        plan = D.FoldPlan.load(args.fold_plan)
        records = _subject_subset(records, plan.base_subjects[args.fold])
    standardizer = D.fit_standardizer(records)
    standardized = [D.apply_standardizer(r, standardizer) for r in records]

    mc = _model_config_from_args(args, standardized[0].features.shape[1],
                                 standardized[0].labels.shape[1])
    windows = []
    for rec in standardized:
        windows.extend(D.make_windows(rec, mc.n_positions))
    train_w, _test_w = D.split_train_test(windows, 0.8, args.seed)
    tc = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                     batch_size=args.batch_size, seed=derive_seed(args.seed, "pretrain"))
    log.info("pretraining on %d windows (%d subjects)", len(train_w), len(standardized))
    weights, history = train(init_model(mc), train_w, tc)

    save_checkpoint(args.out, weights)
    standardizer.save(standardizer_path(args.out))
    history_path = f"{args.out}.history.json"
    atomic_write_json(history_path, {"loss": history})
    manifest = _manifest_for(
        args, "pretrain",
        {"model": mc.to_dict(), "train": tc.__dict__},
        [args.data] + ([args.fold_plan] if args.fold_plan else []),
        [args.out, standardizer_path(args.out), history_path],
    )
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(f"{args.out}.manifest.json")
    print(f"checkpoint written to {args.out} (final loss {history[-1]:.4f})")
    return 0


def cmd_search(args) -> int:
    started = time.monotonic()
    records = _load_records(args.data)
    if args.fold_plan:
        plan = D.FoldPlan.load(args.fold_plan)
        records = _subject_subset(records, plan.base_subjects[args.fold])
    standardizer = D.fit_standardizer(records)
    standardized = [D.apply_standardizer(r, standardizer) for r in records]

    space = SearchSpace()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        best, trials = random_search(
            space, args.budget, standardized, args.seed,
            epochs=args.epochs, batch_size=args.batch_size,
            on_trial=lambda t: append_jsonl(fh, t.to_json_dict()),
        )
    if best is None:
        print("no trial produced a defined validation score", file=sys.stderr)
        return 1
    best_path = args.best_out or f"{args.out}.best.json"
    atomic_write_json(best_path, {"trial": best.index, "params": best.params,
                                  "val_mean_ba": best.val_mean_ba})
    manifest = _manifest_for(
        args, "search",
        {"budget": args.budget, "epochs": args.epochs, "batch_size": args.batch_size,
         "space": space.__dict__},
        [args.data], [args.out, best_path],
    )
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(f"{args.out}.manifest.json")
    print(f"best trial {best.index}: val mean BA {best.val_mean_ba:.4f} "
          f"with {best.params}")
    return 0


def cmd_simulate(args) -> int:
    started = time.monotonic()
    records = _load_records(args.data)
    plan = D.FoldPlan.load(args.fold_plan)
    folds = ([int(f) for f in args.folds.split(",")] if args.folds
             else list(range(plan.n_folds)))

    base_weights = {}
    standardizers = {}
    for k in folds:
        ckpt = os.path.join(args.base_ckpt_dir, f"base_fold{k}.ckpt")
        if not os.path.exists(ckpt):
            raise FedharError(f"missing base checkpoint {ckpt}")
        base_weights[k] = load_checkpoint(ckpt)
        standardizers[k] = D.Standardizer.load(standardizer_path(ckpt))

    min_clients = args.min_clients or min(len(plan.folds[k]) for k in folds)
    config = FedConfig(
        rounds=args.rounds,
        min_available_clients=min_clients,
        local_epochs=args.local_epochs,
        batch_size=args.batch_size,
        local_lr=args.local_lr,
        seed=args.seed,
    )

    os.makedirs(args.out, exist_ok=True)
    label_names = records[0].label_names

    def data_for_fold(k: int):
        return _client_windows_for_fold(
            records, plan.folds[k], standardizers[k],
            base_weights[k].config.n_positions, args.seed)

    audit_path = os.path.join(args.out, "audit.jsonl")
    with open(audit_path, "w", encoding="utf-8") as audit_fh:
        results = run_cross_validation(
            plan, data_for_fold, base_weights, config,
            audit=lambda e: append_jsonl(audit_fh, e),
            label_names=label_names, folds=folds,
        )

    outputs = [audit_path]
    fold_means = []
    all_client_bas = []
    for res in results:
        path = os.path.join(args.out, f"fold{res.fold}.json")
        atomic_write_json(path, res.to_json_dict())
        outputs.append(path)
        fold_means.append({"fold": res.fold,
                           "mean_ba": res.final_report.summary["mean"],
                           "base_mean_ba": res.base_report.summary["mean"]})
        all_client_bas.extend(c.mean_ba for c in res.final_report.clients)

    means_path = os.path.join(args.out, "fold_means.json")
    atomic_write_json(means_path, {"folds": fold_means})
    summary_path = os.path.join(args.out, "summary.json")
    atomic_write_json(summary_path, {
        "mean_ba_overall": float(sum(all_client_bas) / len(all_client_bas)),
        "best_fold_mean": max(f["mean_ba"] for f in fold_means),
        "best_client": max(all_client_bas),
    })
    outputs += [means_path, summary_path]

    manifest = _manifest_for(args, "simulate",
                             {"fed": config.__dict__, "folds": folds},
                             [args.data, args.fold_plan, args.base_ckpt_dir], outputs)
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(os.path.join(args.out, "manifest.json"))
    for f in fold_means:
        print(f"fold {f['fold']}: base mean BA {f['base_mean_ba']:.4f} -> "
              f"federated {f['mean_ba']:.4f}")
    return 0


def cmd_fed_server(args) -> int:
    started = time.monotonic()
    base = load_checkpoint(args.base_ckpt)
    config = FedConfig(
        rounds=args.rounds,
        min_available_clients=args.clients,
        local_epochs=args.local_epochs,
        batch_size=args.batch_size,
        local_lr=args.local_lr,
        seed=args.seed,
        round_timeout_s=args.timeout,
    )
    os.makedirs(args.out, exist_ok=True)
    audit_path = os.path.join(args.out, "audit.jsonl")
    with open(audit_path, "w", encoding="utf-8") as audit_fh:
        result = server_loop(
            args.bind, args.port, base, config, fold=args.fold,
            expected_clients=args.clients,
            accept_timeout=args.accept_timeout,
            audit=lambda e: append_jsonl(audit_fh, e),
        )
    report_path = os.path.join(args.out, f"fold{args.fold}.json")
    atomic_write_json(report_path, result.to_json_dict())
    final_ckpt = os.path.join(args.out, f"final_fold{args.fold}.ckpt")
    save_checkpoint(final_ckpt, result.final_weights)
    # carry the base standardizer along so `evaluate` works on the final ckpt
    base_stdz = standardizer_path(args.base_ckpt)
    if os.path.exists(base_stdz):
        shutil.copyfile(base_stdz, standardizer_path(final_ckpt))
    manifest = _manifest_for(args, "fed-server", {"fed": config.__dict__},
                             [args.base_ckpt], [report_path, final_ckpt, audit_path])
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"federation finished: mean BA {result.final_report.summary['mean']:.4f}")
    return 0


def cmd_fed_client(args) -> int:
    weights = load_checkpoint(args.base_ckpt)
    stdz_file = args.standardizer or standardizer_path(args.base_ckpt)
    standardizer = D.Standardizer.load(stdz_file)
    record = D.parse_extrasensory_csv(args.data)
    standardized = D.apply_standardizer(record, standardizer)
    windows = D.make_windows(standardized, weights.config.n_positions)
    train_w, test_w = D.split_train_test(windows, 0.8, args.seed)
    client_id = args.client_id or record.subject_id
    rounds = client_loop(
        args.server, args.port, client_id, weights.config,
        train_w, test_w, label_names=record.label_names,
    )
    print(f"client {client_id} finished {rounds} rounds")
    return 0


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    weights = load_checkpoint(args.ckpt)
    stdz_file = args.standardizer or standardizer_path(args.ckpt)
    standardizer = D.Standardizer.load(stdz_file)
    records = _load_records(args.data)
    reports = []
    for rec in records:
        standardized = D.apply_standardizer(rec, standardizer)
        windows = D.make_windows(standardized, weights.config.n_positions)
        if args.split_seed is not None:
            _train_w, windows = D.split_train_test(windows, 0.8, args.split_seed)
        reports.append(evaluate(weights, windows, rec.subject_id, rec.label_names))
    report = fold_summary(reports, fold=args.fold)
    atomic_write_json(args.out, report.to_json_dict())
    manifest = _manifest_for(args, "evaluate", {"ckpt": args.ckpt},
                             [args.ckpt, args.data], [args.out])
    manifest.wall_ms = (time.monotonic() - started) * 1e3
    manifest.write(f"{args.out}.manifest.json")
    print(f"mean BA over {len(reports)} subjects: {report.summary['mean']:.4f}")
    return 0


# -------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedhar",
        description="Federated multi-label activity recognition on per-minute "
                    "sensor features.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a non-IID synthetic cohort")
    p.add_argument("--out", required=True, help="output directory for subject CSVs")
    p.add_argument("--subjects", type=_positive(int), default=60)
    p.add_argument("--minutes", type=_positive(int), default=240)
    p.add_argument("--features", type=_positive(int), default=D.EXTRASENSORY_FEATURES)
    p.add_argument("--labels", type=_positive(int), default=D.EXTRASENSORY_LABELS)
    p.add_argument("--alpha", type=_positive(float), default=0.2,
                   help="Dirichlet concentration; smaller = more skewed subjects")
    p.add_argument("--noise-std", type=_nonnegative(float), default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("make-folds", help="partition subjects into client folds")
    p.add_argument("--data", required=True, help="subject CSV directory")
    p.add_argument("--out", required=True, help="fold plan JSON path")
    p.add_argument("--n-folds", type=_positive(int), default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_folds)

    p = sub.add_parser("pretrain", help="centralized base-model training")
    p.add_argument("--data", required=True, help="subject CSV directory (or one file)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--fold-plan", help="restrict to a fold's base subjects")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config", help="JSON file with model/training fields")
    p.add_argument("--layers", type=_positive(int))
    p.add_argument("--hidden", type=_positive(int))
    p.add_argument("--n-positions", type=_positive(int))
    p.add_argument("--n-heads", type=_positive(int))
    p.add_argument("--dropout", type=_nonnegative(float))
    p.add_argument("--epochs", type=_positive(int), default=DESK_EPOCHS)
    p.add_argument("--lr", type=_positive(float), default=4e-5)
    p.add_argument("--batch-size", type=_positive(int), default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="trial log (JSON lines)")
    p.add_argument("--best-out", help="best-config JSON (default <out>.best.json)")
    p.add_argument("--fold-plan")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--budget", type=_positive(int), default=DESK_BUDGET)
    p.add_argument("--epochs", type=_positive(int), default=DESK_EPOCHS)
    p.add_argument("--batch-size", type=_positive(int), default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("simulate", help="in-process federated cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--fold-plan", required=True)
    p.add_argument("--base-ckpt-dir", required=True,
                   help="directory holding base_fold{k}.ckpt files")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", help="comma list of folds to run (default: all)")
    p.add_argument("--rounds", type=_positive(int), default=4)
    p.add_argument("--local-epochs", type=_positive(int), default=DESK_LOCAL_EPOCHS)
    p.add_argument("--local-lr", type=_positive(float), default=1e-3)
    p.add_argument("--batch-size", type=_positive(int), default=64)
    p.add_argument("--min-clients", type=_positive(int))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fed-server", help="drive federation over TCP")
    p.add_argument("--base-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--port", type=_positive(int), default=DEFAULT_PORT)
    p.add_argument("--clients", type=_positive(int), default=12,
                   help="clients to wait for before starting")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--rounds", type=_positive(int), default=4)
    p.add_argument("--local-epochs", type=_positive(int), default=DESK_LOCAL_EPOCHS)
    p.add_argument("--local-lr", type=_positive(float), default=1e-3)
    p.add_argument("--batch-size", type=_positive(int), default=64)
    p.add_argument("--timeout", type=_positive(float),
                   help="per-round collection timeout in seconds")
    p.add_argument("--accept-timeout", type=_positive(float), default=120.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fed_server)

    p = sub.add_parser("fed-client", help="join a federation as one subject")
    p.add_argument("--server", required=True)
    p.add_argument("--port", type=_positive(int), default=DEFAULT_PORT)
    p.add_argument("--subject-data", "--data", dest="data", required=True,
                   help="this subject's CSV")
    p.add_argument("--base-ckpt", required=True,
                   help="base checkpoint (model config + standardizer sidecar)")
    p.add_argument("--standardizer", help="override the sidecar path")
    p.add_argument("--client-id")
    p.add_argument("--seed", type=int, default=0,
                   help="must match the server's --seed for the 80/20 split")
    p.set_defaults(func=cmd_fed_client)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on subject data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--standardizer")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--split-seed", type=int,
                   help="apply the 80/20 split and score only the test side")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    logging.basicConfig(level=os.environ.get("FEDHAR_LOG", "WARNING"),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(argv)
    try:
        return args.func(args)
    except FedharError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
