"""Command-line surface: generate, train, eval, ablate, stats, gradcheck.

Every command writes a manifest (full merged config plus SHA-256 of each
input file) next to its outputs, so a run is reproducible from the manifest
alone. Configuration precedence: CLI flags > --config JSON file > defaults.
Exit codes: 0 success, 1 validation/usage error, 2 runtime or numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, GeneratorConfig, Vocab, generate_cohort, load_dataset,
                   load_vocab, save_dataset, save_vocab, split_dataset,
                   stats_new_drug_histogram, stats_similarity_by_interval)
from .gradcheck import run_suite
from .metrics import AGGREGATION_MODES, evaluate
from .model import VARIANTS, Hyper, ModelState, build_model, predict
from .training import Adam, TrainConfig, TrainingDiverged, train


class UsageError(ValueError):
    """Command-line validation failure (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "package": f"medrec {__version__}",
    }
    _write_json(out_dir / "manifest.json", manifest)


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {config_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {config_path}: expected a JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"--config {config_path}: unknown key {key!r}")
            merged[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated ratios, got {text!r}")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad ratio list {text!r}") from None
    return ratios  # range/sum validated by split_dataset


def _hyper_from(cfg: dict) -> Hyper:
    hyper = Hyper(dim=int(cfg["dim"]), split_n=int(cfg["split_n"]),
                  state_size=int(cfg["state_size"]), alpha_loss=float(cfg["alpha_loss"]),
                  delta=float(cfg["delta"]), variant=str(cfg["variant"]))
    try:
        hyper.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return hyper


def _add_model_flags(parser: _Parser) -> None:
    parser.add_argument("--dim", type=int, help="embedding width (default 64)")
    parser.add_argument("--split-n", type=int, dest="split_n",
                        help="recent-visit split point N (default 2)")
    parser.add_argument("--state-size", type=int, dest="state_size",
                        help="state width of the selective scan (default 16)")
    parser.add_argument("--alpha-loss", type=float, dest="alpha_loss",
                        help="weight of the BCE term (default 0.7)")
    parser.add_argument("--delta", type=float, help="decision threshold (default 0.5)")
    parser.add_argument("--variant", choices=VARIANTS, help="model variant (default full)")


_MODEL_DEFAULTS = {"dim": 64, "split_n": 2, "state_size": 16,
                   "alpha_loss": 0.7, "delta": 0.5, "variant": "full"}


# -- generate ---------------------------------------------------------------


def _cmd_generate(args) -> int:
    defaults = {
        "patients": 1000, "seed": 0, "out": None, "mean_visits": 2.37,
        "max_visits": 29, "num_diagnoses": 1958, "num_procedures": 1430,
        "num_medications": 131, "new_drug_ratio": 0.30, "similarity_decay": 0.004,
    }
    cfg = _merge_config(defaults, args)
    if not cfg["out"]:
        raise UsageError("--out is required")
    gen = GeneratorConfig(
        num_patients=int(cfg["patients"]), mean_visits=float(cfg["mean_visits"]),
        max_visits=int(cfg["max_visits"]), num_diagnoses=int(cfg["num_diagnoses"]),
        num_procedures=int(cfg["num_procedures"]), num_medications=int(cfg["num_medications"]),
        target_new_drug_ratio=float(cfg["new_drug_ratio"]),
        similarity_decay_rate=float(cfg["similarity_decay"]), seed=int(cfg["seed"]),
    )
    try:
        gen.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    records = generate_cohort(gen)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "cohort.jsonl", records)
    save_vocab(out / "vocab.json", gen.vocab())
    _write_manifest(out, "generate", cfg, [])

    visits = [len(r.visits) for r in records]
    print("cohort summary")
    rows = [
        ("# of patients", f"{len(records)}"),
        ("# of visits", f"{sum(visits)}"),
        ("avg. # of visit per patient", f"{np.mean(visits):.2f}"),
        ("max. # of visit", f"{max(visits)}"),
        ("# of diagnosis codes", f"{gen.num_diagnoses}"),
        ("# of procedure codes", f"{gen.num_procedures}"),
        ("# of medication codes", f"{gen.num_medications}"),
    ]
    for label, value in rows:
        print(f"  {label:<30s} {value}")
    print(f"wrote {out / 'cohort.jsonl'}")
    return 0


# -- train -------------------------------------------------------------------


def _load_data(cfg) -> tuple[Vocab, list]:
    if not cfg.get("data"):
        raise UsageError("--data is required")
    if not cfg.get("vocab"):
        raise UsageError("--vocab is required")
    vocab = load_vocab(cfg["vocab"])
    records = load_dataset(cfg["data"], vocab, on_error="raise")
    if not records:
        raise DataError(f"{cfg['data']}: dataset is empty")
    return vocab, records


def _save_train_checkpoint(path, model: ModelState, opt: Adam, extra_meta: dict) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays.update(opt.state_arrays())
    save_checkpoint(path, arrays, {**model.meta(), **extra_meta})


def _save_model_checkpoint(path, state: dict, meta: dict) -> None:
    save_checkpoint(path, {f"model/{k}": v for k, v in state.items()}, meta)


def _model_from_checkpoint(path) -> tuple[ModelState, dict, dict]:
    arrays, meta = load_checkpoint(path)
    hyper = Hyper.from_obj(meta["hyper"])
    vocab = Vocab(**meta["vocab"])
    model = build_model(hyper, vocab, seed=int(meta.get("seed", 0)))
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items()
                           if k.startswith("model/")})
    return model, arrays, meta


def _cmd_train(args) -> int:
    defaults = {
        "data": None, "vocab": None, "out": None, "epochs": 30, "lr": 1e-3,
        "seed": 0, "split_ratios": "0.8,0.1,0.1", "resume": None,
        "no_shuffle": False, **_MODEL_DEFAULTS,
    }
    cfg = _merge_config(defaults, args)
    if not cfg["out"]:
        raise UsageError("--out is required")
    vocab, records = _load_data(cfg)
    ratios = _parse_ratios(cfg["split_ratios"])
    train_recs, val_recs, test_recs = split_dataset(records, ratios, int(cfg["seed"]))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "split-train.jsonl", train_recs)
    save_dataset(out / "split-val.jsonl", val_recs)
    save_dataset(out / "split-test.jsonl", test_recs)

    tc = TrainConfig(epochs=int(cfg["epochs"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]),
                     shuffle=not bool(cfg["no_shuffle"]))
    start_epoch = 1
    optimizer = None
    if cfg["resume"]:
        model, arrays, meta = _model_from_checkpoint(cfg["resume"])
        optimizer = Adam(model.named_parameters(), lr=tc.lr, beta1=tc.beta1,
                         beta2=tc.beta2, eps=tc.eps)
        optimizer.load_state_arrays(arrays)
        start_epoch = int(meta.get("epochs_done", 0)) + 1
    else:
        model = build_model(_hyper_from(cfg), vocab, int(cfg["seed"]))

    log_path = out / "log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def log_fn(row):
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
        result, opt = train(model, train_recs, tc, val_records=val_recs,
                            optimizer=optimizer, start_epoch=start_epoch, log_fn=log_fn)

    extra = {"epochs_done": result.epochs_done, "best_epoch": result.best_epoch,
             "best_val_jaccard": result.best_val_jaccard, "seed": int(cfg["seed"])}
    _save_train_checkpoint(out / "checkpoint.bin", model, opt, extra)
    _save_model_checkpoint(out / "best.bin", result.best_state,
                           {**model.meta(), "best_epoch": result.best_epoch,
                            "seed": int(cfg["seed"])})
    _write_manifest(out, "train", cfg, [cfg["data"], cfg["vocab"]])
    last_val = [h for h in result.history if h["split"] == "validation"]
    if last_val:
        print(f"best epoch {result.best_epoch} (validation jaccard {result.best_val_jaccard:.4f})")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'best.bin'}")
    return 0


# -- eval ---------------------------------------------------------------------


def _print_metric_table(title: str, rows: list[tuple[str, dict]]) -> None:
    print(title)
    header = f"  {'':<14s} {'Jaccard (%)':>12s} {'PRAUC (%)':>12s} {'F1 (%)':>12s}"
    print(header)
    for label, metrics in rows:
        print(f"  {label:<14s} {100 * metrics['jaccard']:>12.2f} "
              f"{100 * metrics['prauc']:>12.2f} {100 * metrics['f1']:>12.2f}")


def _cmd_eval(args) -> int:
    defaults = {"data": None, "vocab": None, "checkpoint": None,
                "aggregation": "patient-mean", "out": None}
    cfg = _merge_config(defaults, args)
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    if cfg["aggregation"] not in AGGREGATION_MODES:
        raise UsageError(f"--aggregation must be one of {AGGREGATION_MODES}")
    model, _, _ = _model_from_checkpoint(cfg["checkpoint"])
    if cfg.get("vocab"):
        vocab = load_vocab(cfg["vocab"])
        if vocab != model.vocab:
            raise UsageError(f"vocab file {cfg['vocab']} disagrees with checkpoint vocab")
    if not cfg.get("data"):
        raise UsageError("--data is required")
    records = load_dataset(cfg["data"], model.vocab, on_error="raise")
    report = evaluate(records, lambda r: predict(model, r), mode=cfg["aggregation"])
    _print_metric_table(
        f"evaluation on {cfg['data']} ({report.visits_evaluated} visits)",
        [(mode, report.by_mode[mode]) for mode in AGGREGATION_MODES],
    )
    if cfg["out"]:
        _write_json(cfg["out"], report.to_obj())
        out_dir = Path(cfg["out"]).parent
        _write_manifest(out_dir, "eval", cfg, [cfg["data"], cfg["checkpoint"]])
        print(f"wrote {cfg['out']}")
    return 0


# -- ablate --------------------------------------------------------------------


def _cmd_ablate(args) -> int:
    defaults = {
        "data": None, "vocab": None, "out": None, "seeds": "0,1,2,3,4",
        "epochs": 5, "lr": 1e-3, "split_seed": 0, "split_ratios": "0.8,0.1,0.1",
        **_MODEL_DEFAULTS,
    }
    cfg = _merge_config(defaults, args)
    if not cfg["out"]:
        raise UsageError("--out is required")
    try:
        seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s != ""]
    except ValueError:
        raise UsageError(f"bad --seeds list {cfg['seeds']!r}") from None
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    vocab, records = _load_data(cfg)
    ratios = _parse_ratios(cfg["split_ratios"])
    train_recs, val_recs, test_recs = split_dataset(records, ratios, int(cfg["split_seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    runs = []
    for seed in seeds:
        for variant in VARIANTS:
            hyper = _hyper_from({**cfg, "variant": variant})
            model = build_model(hyper, vocab, seed)
            tc = TrainConfig(epochs=int(cfg["epochs"]), lr=float(cfg["lr"]), seed=seed)
            result, _ = train(model, train_recs, tc, val_records=val_recs)
            model.load_state_dict(result.best_state)
            report = evaluate(test_recs, lambda r: predict(model, r), mode="patient-mean")
            runs.append({"variant": variant, "seed": seed,
                         "best_epoch": result.best_epoch,
                         "test": {"jaccard": report.jaccard, "prauc": report.prauc,
                                  "f1": report.f1}})
            print(f"  [{variant:<8s} seed {seed}] test jaccard {report.jaccard:.4f} "
                  f"prauc {report.prauc:.4f} f1 {report.f1:.4f}")

    summary = {}
    for variant in VARIANTS:
        vals = {m: [r["test"][m] for r in runs if r["variant"] == variant]
                for m in ("jaccard", "prauc", "f1")}
        summary[variant] = {m: {"mean": float(np.mean(v)), "std": float(np.std(v))}
                            for m, v in vals.items()}
    margins = {
        "full_minus_no-arm": summary["full"]["jaccard"]["mean"] - summary["no-arm"]["jaccard"]["mean"],
        "full_minus_no-ptl": summary["full"]["jaccard"]["mean"] - summary["no-ptl"]["jaccard"]["mean"],
    }

    print(f"ablation over seeds {seeds} ({len(test_recs)} test patients)")
    print(f"  {'variant':<10s} {'Jaccard (%)':>16s} {'PRAUC (%)':>16s} {'F1 (%)':>16s}")
    for variant in VARIANTS:
        s = summary[variant]
        cells = [f"{100 * s[m]['mean']:.2f}±{100 * s[m]['std']:.2f}"
                 for m in ("jaccard", "prauc", "f1")]
        print(f"  {variant:<10s} {cells[0]:>16s} {cells[1]:>16s} {cells[2]:>16s}")
    print(f"  margin full - no-arm: {100 * margins['full_minus_no-arm']:+.2f} (Jaccard pts)")
    print(f"  margin full - no-ptl: {100 * margins['full_minus_no-ptl']:+.2f} (Jaccard pts)")

    _write_json(out / "ablate.json",
                {"config": cfg, "runs": runs, "summary": summary, "margins": margins})
    _write_manifest(out, "ablate", cfg, [cfg["data"], cfg["vocab"]])
    print(f"wrote {out / 'ablate.json'}")
    return 0


# -- stats ----------------------------------------------------------------------


def _cmd_stats(args) -> int:
    defaults = {"data": None, "vocab": None, "out": None, "bins": 10, "bucket_width": 30}
    cfg = _merge_config(defaults, args)
    vocab, records = _load_data(cfg)
    try:
        new_drugs = stats_new_drug_histogram(records, int(cfg["bins"]))
        similarity = stats_similarity_by_interval(records, int(cfg["bucket_width"]))
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    print(f"new-drug proportion: mean {new_drugs.mean_all:.3f} over all prescriptions, "
          f"{new_drugs.mean_repeat:.3f} over repeat visits "
          f"({new_drugs.repeat_visits} repeat / {new_drugs.first_visits} first)")
    shown = similarity.buckets[:12]
    for b in shown:
        print(f"  interval [{b.interval_lo:>4d},{b.interval_hi:>4d}) "
              f"mean jaccard {b.mean:.3f}  (n={b.count})")
    if len(similarity.buckets) > len(shown):
        print(f"  ... {len(similarity.buckets) - len(shown)} more buckets")
    if cfg["out"]:
        _write_json(cfg["out"], {"new_drugs": new_drugs.to_obj(),
                                 "similarity": similarity.to_obj()})
        _write_manifest(Path(cfg["out"]).parent, "stats", cfg, [cfg["data"], cfg["vocab"]])
        print(f"wrote {cfg['out']}")
    return 0


# -- gradcheck ---------------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    defaults = {"seed": 0, "trials": 100}
    cfg = _merge_config(defaults, args)
    results = run_suite(seed=int(cfg["seed"]), trials=int(cfg["trials"]))
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" (worst {r.worst_param})" if not r.passed else ""
        print(f"[{status}] {r.name:<24s} max rel err {r.max_rel_err:.3e}{extra}")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} gradient check(s) failed")
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


# -- entry point ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="medrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, help="master seed (default 0)")

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--mean-visits", type=float, dest="mean_visits")
    p.add_argument("--max-visits", type=int, dest="max_visits")
    p.add_argument("--num-diagnoses", type=int, dest="num_diagnoses")
    p.add_argument("--num-procedures", type=int, dest="num_procedures")
    p.add_argument("--num-medications", type=int, dest="num_medications")
    p.add_argument("--new-drug-ratio", type=float, dest="new_drug_ratio")
    p.add_argument("--similarity-decay", type=float, dest="similarity_decay")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a model variant")
    common(p)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split-ratios", dest="split_ratios")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--no-shuffle", action="store_const", const=True, dest="no_shuffle")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--aggregation", choices=AGGREGATION_MODES)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all model variants")
    common(p)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split-seed", type=int, dest="split_seed")
    p.add_argument("--split-ratios", dest="split_ratios")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("stats", help="dataset novelty and similarity statistics")
    common(p)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--bins", type=int)
    p.add_argument("--bucket-width", type=int, dest="bucket_width")
    p.add_argument("--out", help="stats JSON path")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, CheckpointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
