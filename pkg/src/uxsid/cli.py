"""Command-line pipeline: one binary, one subcommand per pipeline stage.

Metrics go to stdout as JSON, human logs to stderr. Every subcommand
takes its randomness from --seed, and every run drops a manifest next to
its outputs recording the arguments, seed, input checksums, output paths
and wall-clock timings, enough to re-run the step exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import baselines, model as model_mod, serving, sidgen, synthdata, trainer


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(anchor_path, subcommand, args, seed, inputs, outputs, timings):
    manifest = {
        "subcommand": subcommand,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": seed,
        "build": f"uxsid {__version__}",
        "inputs": {str(p): _sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": [str(p) for p in outputs],
        "timings_s": timings,
    }
    if os.path.isdir(anchor_path):
        path = os.path.join(anchor_path, "manifest.json")
    else:
        path = str(anchor_path) + ".manifest.json"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require(path, what: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what}: {path}")
    return path


def _load_pipeline(args, need_codebook: bool = True):
    """Dataset plus codebook plus SID attachment, the common setup."""
    data_dir = _require(args.data, "missing data directory")
    dataset = synthdata.load_dataset(data_dir)
    cb = None
    if need_codebook:
        cb = sidgen.load_codebook(_require(args.codebook, "missing codebook"))
        synthdata.attach_sids(dataset, cb)
    return dataset, cb


def _model_config(args, dataset, cb, seed: int | None) -> model_mod.ModelConfig:
    raw = {}
    if getattr(args, "config", None):
        with open(_require(args.config, "missing config"), "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    overrides = {
        "n_items": dataset.n_items,
        "n_users": max(dataset.sequences) + 1,
        "n_sids": cb.per_level,
    }
    if seed is not None:
        overrides["seed"] = seed
    if getattr(args, "epochs", None):
        overrides["n_epochs"] = args.epochs
    return model_mod.ModelConfig.from_dict(raw, **overrides)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    with open(_require(args.config, "missing config"), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = synthdata.WorldConfig(**raw)
    except TypeError as exc:
        raise ValueError(f"bad world config: {exc}") from exc
    dataset = synthdata.generate(cfg)
    outputs = synthdata.save_dataset(dataset, args.out)
    _write_manifest(args.out, "gen-data", args, cfg.seed, [args.config], outputs,
                    {"total": time.perf_counter() - t0})
    _log(f"wrote {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} "
         f"train/val/test examples to {args.out}")
    print(json.dumps({"n_items": dataset.n_items, "n_users": cfg.n_users,
                      "bayes_auc": dataset.meta["bayes_auc"]}, sort_keys=True))
    return 0


def _cmd_train_codebook(args) -> int:
    t0 = time.perf_counter()
    vectors = sidgen.load_content_vectors(_require(args.input, "missing input"))
    cb = sidgen.train_codebooks(
        vectors, args.levels, args.codewords,
        sidgen.CodebookTrainConfig(max_iter=args.max_iter, tol=args.tol, seed=args.seed),
    )
    sidgen.save_codebook(cb, args.out)
    _write_manifest(args.out, "train-codebook", args, args.seed, [args.input],
                    [args.out], {"total": time.perf_counter() - t0})
    mean_sq = [i / len(vectors) for i in cb.inertia]
    _log(f"codebook {cb.levels}x{cb.per_level}x{cb.dim}, mean sq residual by level: "
         + " ".join(f"{m:.4f}" for m in mean_sq))
    print(json.dumps({"levels": cb.levels, "codewords": cb.per_level,
                      "mean_sq_residual": mean_sq}, sort_keys=True))
    return 0


def _cmd_encode(args) -> int:
    t0 = time.perf_counter()
    cb = sidgen.load_codebook(_require(args.codebook, "missing codebook"))
    vectors = sidgen.load_content_vectors(_require(args.input, "missing input"))
    with open(args.out, "w", encoding="utf-8") as fh:
        for cv in vectors:
            sid = sidgen.encode(cb, cv.z)
            fh.write(json.dumps({"item_id": cv.item_id, "sids": list(sid)},
                                sort_keys=True, separators=(",", ":")) + "\n")
    _write_manifest(args.out, "encode", args, args.seed, [args.codebook, args.input],
                    [args.out], {"total": time.perf_counter() - t0})
    print(json.dumps({"encoded": len(vectors)}, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    dataset, cb = _load_pipeline(args)
    cfg = _model_config(args, dataset, cb, args.seed)
    result = trainer.train(dataset, cfg, log_path=str(args.out) + ".log.csv",
                           verbose=args.verbose)
    model_mod.save_checkpoint(result.model, args.out)
    _write_manifest(args.out, "train", args, cfg.seed,
                    [os.path.join(args.data, "items.jsonl"),
                     os.path.join(args.data, "interactions.jsonl"),
                     args.codebook] + ([args.config] if args.config else []),
                    [args.out, str(args.out) + ".log.csv"],
                    {"total": time.perf_counter() - t0})
    last = result.log[-1] if result.log else {}
    print(json.dumps({"epochs": len(result.log), "diverged": result.diverged,
                      "stopped_early": result.stopped_early,
                      "final_val_auc": last.get("val_auc", None)}, sort_keys=True))
    return 0 if not result.diverged else 1


def _cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    dataset, _ = _load_pipeline(args)
    model = model_mod.load_checkpoint(_require(args.model, "missing model"))
    split = {"train": dataset.train, "val": dataset.val, "test": dataset.test}[args.split]
    split = [ex for ex in split if len(ex.seq)]
    metrics = trainer.evaluate(model, split, seq_sids_by_user=dataset.seq_sids,
                               recall_k=args.k)
    out = {"auc": metrics["auc"], "uauc": metrics["uauc"], "wuauc": metrics["wuauc"],
           f"int_r_at_{args.k}": metrics["int_r_at_k"], "split": args.split,
           "n": metrics["n"]}
    print(json.dumps(out, sort_keys=True))
    _log(f"evaluated {metrics['n']} examples in {time.perf_counter() - t0:.1f}s")
    return 0


def _cmd_precompute(args) -> int:
    t0 = time.perf_counter()
    dataset, _ = _load_pipeline(args)
    model = model_mod.load_checkpoint(_require(args.model, "missing model"))
    universe = serving.default_sid_universe(dataset)
    store = serving.precompute(model, dataset.sequences, universe, threads=args.threads)
    serving.save_store(store, args.out)
    _write_manifest(args.out, "precompute", args, args.seed,
                    [args.model, args.codebook], [args.out],
                    {"total": time.perf_counter() - t0})
    print(json.dumps({"entries": len(store), "collisions": store.collisions},
                     sort_keys=True))
    return 0


def _cmd_parity(args) -> int:
    t0 = time.perf_counter()
    dataset, _ = _load_pipeline(args)
    model = model_mod.load_checkpoint(_require(args.model, "missing model"))
    store = serving.load_store(_require(args.store, "missing store"))
    universe = serving.default_sid_universe(dataset)
    pairs = [(uid, sid) for uid in sorted(universe) for sid in universe[uid]]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    take = min(args.sample, len(pairs))
    chosen = [pairs[i] for i in rng.choice(len(pairs), size=take, replace=False)]
    report = serving.parity_check(store, model, dataset.sequences, chosen)
    print(json.dumps({"max_abs_deviation": report.max_abs_deviation,
                      "n_checked": report.n_checked, "passed": report.passed},
                     sort_keys=True))
    _log(f"parity over {report.n_checked} pairs in {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


def _cmd_bench_latency(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    if args.model:
        model = model_mod.load_checkpoint(args.model)
    else:
        cfg = model_mod.ModelConfig(n_items=3200, n_users=100, n_sids=64, seed=args.seed)
        model = model_mod.UxsidModel(cfg)
        _log("no --model given, benchmarking a freshly initialized model")
    rows = serving.latency_benchmark(model, lengths, n_impressions=args.impressions,
                                     retrieve_n=args.retrieve, seed=args.seed)
    lines = ["length,mean_ns,p99_ns,model"]
    for row in rows:
        lines.append(f"{row.length},{row.mean_ns:.0f},{row.p99_ns:.0f},{row.model}")
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        _write_manifest(args.out, "bench-latency", args, args.seed,
                        [args.model] if args.model else [], [args.out], {})
    else:
        print(csv_text, end="")
    return 0


def _cmd_compare_baselines(args) -> int:
    t0 = time.perf_counter()
    dataset, cb = _load_pipeline(args)
    cfg = _model_config(args, dataset, cb, args.seed)
    lengths = [int(x) for x in args.lengths.split(",")]
    kinds = tuple(args.models.split(","))
    rows = baselines.scaling_curves(dataset, cfg, lengths, kinds=kinds,
                                    verbose=args.verbose)
    lines = ["model,length,auc,uauc,wuauc,int_r_at_k"]
    for row in rows:
        cells = [row["model"], str(row["length"])]
        for key in ("auc", "uauc", "wuauc", "int_r_at_k"):
            cells.append("" if row[key] is None else f"{row[key]:.6f}")
        lines.append(",".join(cells))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(args.out, "compare-baselines", args, cfg.seed,
                    [args.codebook], [args.out], {"total": time.perf_counter() - t0})
    _log(f"wrote {len(rows)} curve points to {args.out}")
    return 0


def _cmd_refresh(args) -> int:
    t0 = time.perf_counter()
    dataset, _ = _load_pipeline(args)
    model = model_mod.load_checkpoint(_require(args.model, "missing model"))
    universe = serving.default_sid_universe(dataset)
    store = serving.precompute(model, dataset.sequences, universe, threads=args.threads)
    tmp = str(args.store) + ".tmp"
    serving.save_store(store, tmp)
    os.replace(tmp, args.store)  # atomic swap
    _write_manifest(args.store, "refresh", args, args.seed,
                    [args.model, args.codebook], [args.store],
                    {"total": time.perf_counter() - t0})
    print(json.dumps({"entries": len(store)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uxsid", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("UXSID_THREADS", "1")))
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate a synthetic world")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-codebook", help="train residual k-means codebooks")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--codewords", type=int, default=256)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_train_codebook)

    p = sub.add_parser("encode", help="encode items to semantic IDs")
    p.add_argument("--codebook", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="metrics on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--k", type=int, default=50)
    common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("precompute", help="fill the embedding store")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_precompute)

    p = sub.add_parser("parity", help="online-offline parity check")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--sample", type=int, default=1000)
    common(p)
    p.set_defaults(func=_cmd_parity)

    p = sub.add_parser("bench-latency", help="constant-cost online contract")
    p.add_argument("--model", default=None)
    p.add_argument("--lengths", default="1000,10000")
    p.add_argument("--impressions", type=int, default=10000)
    p.add_argument("--retrieve", type=int, default=100)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=_cmd_bench_latency)

    p = sub.add_parser("compare-baselines", help="AUC versus history length")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lengths", default="100,500,2000")
    p.add_argument("--models", default="uxsid,din_trunc,sim_hard,sim_soft")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_compare_baselines)

    p = sub.add_parser("refresh", help="rebuild the store and swap atomically")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    common(p)
    p.set_defaults(func=_cmd_refresh)
    return parser


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
