"""Command-line entry point.

    flowconvert gen-data  --config CFG --out DIR [--seed N] [--force]
    flowconvert train     --config CFG --corpus DIR --out DIR --stage STAGE [--seed N]
    flowconvert convert   --config CFG --corpus DIR --checkpoints DIR --out DIR
                          [--requests FILE] [--force]
    flowconvert evaluate  --config CFG --corpus DIR --checkpoints DIR
                          --converted DIR --out DIR
    flowconvert check     --run DIR

Exit codes: 0 success, 2 configuration error, 3 dependency/ordering error,
4 numeric or training failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .arrayio import load_arrays, save_arrays
from .attention import train_attention
from .checkpoint import (load_bundle, load_classifiers, require_stage, save_classifiers,
                         save_stage, stage_path)
from .config import RunConfig
from .corpus import generate_corpus, load_corpus, save_corpus
from .duration import train_duration_model
from .errors import (ConfigurationError, ContractError, FlowConvertError, NumericError,
                     StageOrderingError, TrainingDivergedError, UnknownIdError)
from .evaluation import (ScoredConversion, assemble_report, evaluate_systems, score_conversion,
                         train_classifiers, write_report)
from .flow import train_flow
from .pipeline import make_request, run_requests

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORDERING = 3
EXIT_NUMERIC = 4


def _load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        cfg.validate()
        return cfg
    return RunConfig.from_file(args.config, seed_override=getattr(args, "seed", None))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise ConfigurationError(f"{out} already contains a corpus; pass --force to overwrite")
    corpus = generate_corpus(cfg.corpus, cfg.seed)
    save_corpus(corpus, out, force=True)
    print(f"wrote corpus with {len(corpus.utterances)} utterances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = ["flow", "duration", "attention", "classifiers"] if args.stage == "all" else [args.stage]

    for stage in stages:
        if stage == "flow":
            result = train_flow(corpus, cfg, cfg.seed)
            save_stage(out, "flow", {"stack": result.stack, "flow": result.flow}, cfg,
                       extra={"steps": cfg.train_flow.steps,
                              "initial_nll": result.initial_nll,
                              "final_nll": result.final_nll},
                       loss_history=result.loss_history)
            print(f"flow: initial nll {result.initial_nll:.4f} -> final {result.final_nll:.4f}")
        elif stage == "duration":
            result = train_duration_model(corpus, cfg, cfg.seed)
            save_stage(out, "duration", {"duration": result.model}, cfg,
                       extra={"steps": cfg.train_duration.steps,
                              "heldout_mae": result.heldout_mae,
                              "heldout_mean_duration": result.heldout_mean_duration},
                       loss_history=result.loss_history)
            print(f"duration: held-out MAE {result.heldout_mae:.3f} frames "
                  f"(mean true {result.heldout_mean_duration:.3f})")
        elif stage == "attention":
            require_stage(out, "flow", "attention")
            bundle = load_bundle(out, cfg, corpus, need=("flow",))
            result = train_attention(corpus, bundle.stack, bundle.flow, cfg, cfg.seed)
            save_stage(out, "attention", {"attention": result.block}, cfg,
                       extra={"steps": cfg.train_attention.steps,
                              "heldout_denoise_mse": result.heldout_denoise_mse,
                              "heldout_corrupt_mse": result.heldout_corrupt_mse,
                              "mean_entropy": result.mean_entropy},
                       loss_history=result.loss_history)
            print(f"attention: denoise mse {result.heldout_denoise_mse:.4f} "
                  f"vs corrupted {result.heldout_corrupt_mse:.4f}; "
                  f"mean attention entropy {result.mean_entropy:.3f}")
        elif stage == "classifiers":
            classifiers = train_classifiers(corpus, cfg, cfg.seed)
            save_classifiers(out, classifiers, cfg)
            print("classifiers: trained accent/speaker/phoneme proxies")
        else:
            raise ConfigurationError(f"unknown stage {stage!r}")
    return EXIT_OK


def _default_requests(cfg: RunConfig, corpus) -> list[list[str]]:
    rows = []
    for u in sorted(corpus.split("test"), key=lambda u: u.utterance_id):
        for target in sorted(corpus.accents):
            if target == u.accent_id:
                continue
            for mode in cfg.eval.modes:
                rows.append([u.utterance_id, target, mode])
    return rows


def cmd_convert(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    bundle = load_bundle(args.checkpoints, cfg, corpus)
    out = Path(args.out)
    results_path = out / "conversions.json"
    if results_path.exists() and not args.force:
        raise ConfigurationError(f"{out} already contains conversions; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    if args.requests:
        manifest = json.loads(Path(args.requests).read_text())
        rows = manifest["rows"]
    else:
        rows = _default_requests(cfg, corpus)

    statuses = []
    n_ok = 0
    for utterance_id, target_accent, mode in rows:
        name = f"{utterance_id}__to_{target_accent}__{mode}"
        try:
            request = make_request(corpus, utterance_id, target_accent, mode)
        except (ContractError, UnknownIdError) as exc:
            statuses.append({"utterance_id": utterance_id, "target_accent": target_accent,
                             "mode": mode, "status": "error", "error": f"{type(exc).__name__}: {exc}"})
            continue
        (req, result, error), = run_requests([request], bundle)
        if error is not None:
            statuses.append({"utterance_id": utterance_id, "target_accent": target_accent,
                             "mode": mode, "status": "error", "error": error})
            continue
        save_arrays(
            out / f"{name}.fca",
            {
                "mel": result.mel.frames,
                "phonemes": np.asarray(result.target_phoneme_seq.phonemes, dtype=np.int64),
                "durations": np.asarray(result.target_phoneme_seq.durations, dtype=np.int64),
            },
            meta={
                "kind": "converted",
                "utterance_id": utterance_id,
                "target_accent": target_accent,
                "mode": mode,
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
                "diagnostics": {k: v for k, v in result.diagnostics.items()
                                if isinstance(v, (int, float, str))},
            },
        )
        statuses.append({"utterance_id": utterance_id, "target_accent": target_accent,
                         "mode": mode, "status": "ok", "file": f"{name}.fca"})
        n_ok += 1

    results_path.write_text(json.dumps(
        {"kind": "conversions", "config_hash": cfg.config_hash(), "seed": cfg.seed,
         "rows": statuses},
        sort_keys=True, indent=1) + "\n")
    print(f"converted {n_ok}/{len(rows)} rows into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    classifiers = load_classifiers(args.checkpoints, cfg, corpus)
    converted_dir = Path(args.converted)

    files = sorted(converted_dir.glob("*.fca"))
    if not files:
        raise ContractError(f"no converted utterances (*.fca) found in {converted_dir}")

    rows: list[ScoredConversion] = []
    skipped: list[dict] = []
    results_path = converted_dir / "conversions.json"
    if results_path.exists():
        for row in json.loads(results_path.read_text())["rows"]:
            if row["status"] != "ok":
                skipped.append({"utterance_id": row["utterance_id"],
                                "target_accent": row["target_accent"],
                                "mode": row["mode"], "error": row["error"]})

    for path in files:
        arrays, meta = load_arrays(path)
        utterance = corpus.utterance(meta["utterance_id"])
        rows.append(score_conversion(corpus, classifiers, utterance,
                                     meta["target_accent"], meta["mode"], arrays["mel"]))

    modes = [m for m in cfg.eval.modes if any(r.mode == m for r in rows)]
    report = assemble_report(corpus, classifiers, rows, skipped, modes,
                             cfg.eval.alpha, cfg.config_hash(), cfg.seed)
    write_report(report, args.out)
    print(f"wrote evaluation report for {len(rows)} conversions to {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    """Provenance check: every artifact under --run must carry the same
    config hash and seed."""
    run_dir = Path(args.run)
    seen: dict[str, tuple] = {}
    for manifest in run_dir.rglob("manifest.json"):
        data = json.loads(manifest.read_text())
        if "seed" in data:
            seen[str(manifest)] = (data.get("config_hash", "-"), data["seed"])
    for report in run_dir.rglob("report.json"):
        data = json.loads(report.read_text())
        seen[str(report)] = (data["config_hash"], data["seed"])
    for container in run_dir.rglob("*.fca"):
        _, meta = load_arrays(container)
        if "config_hash" in meta:
            seen[str(container)] = (meta["config_hash"], meta["seed"])
    if not seen:
        raise ContractError(f"no flowconvert artifacts found under {run_dir}")
    seeds = {v[1] for v in seen.values()}
    hashes = {v[0] for v in seen.values() if v[0] != "-"}
    for path, (chash, seed) in sorted(seen.items()):
        print(f"{path}: config_hash={chash} seed={seed}")
    if len(seeds) > 1 or len(hashes) > 1:
        raise ContractError(
            f"inconsistent provenance: seeds {sorted(seeds)}, config hashes {sorted(hashes)}"
        )
    print(f"provenance consistent across {len(seen)} artifacts")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowconvert",
                                     description="flow-based accent conversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train model stages")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="all",
                   choices=["flow", "duration", "attention", "classifiers", "all"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="run batch accent conversion")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--requests", default=None,
                   help="JSON manifest with rows [utterance_id, target_accent, mode]; "
                        "defaults to the full test split under all configured modes")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="score converted utterances and write the report")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--converted", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check", help="verify provenance consistency of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderingError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDERING
    except (TrainingDivergedError, NumericError) as exc:
        print(f"numeric/training error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, UnknownIdError, FlowConvertError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
