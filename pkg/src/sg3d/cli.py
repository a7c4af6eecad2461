"""Command-line pipeline: generate, train, predict, eval, experiment.

Every artifact embeds the config hash and tool version. Exit codes:
0 ok, 2 config error, 3 data error, 4 numeric abort.
Log level comes from SGF_LOG_LEVEL (error|warn|info|debug).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericError, Sg3dError
from .metrics import (EvalConfig, PredictionDump, ScenePrediction, dump_from_jsonl,
                      dump_to_jsonl, evaluate, report_rows, report_to_csv)
from .reasoning import ModelConfig, ModelState, forward_scene, prepare_scene
from .scene import Vocabulary, load_scene_file, save_scene_file
from .synthetic import WorldConfig, generate_dataset, manifest_to_json, provider_from_manifest
from .training import Checkpoint, TrainConfig, train

log = logging.getLogger("sg3d")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("SGF_LOG_LEVEL", "info").lower()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"SGF_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _build_dataclass(cls, values: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**values)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    unknown = set(cfg) - {"world", "model", "train", "eval", "experiment"}
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {sorted(unknown)}")
    return cfg


def world_config(cfg: dict, seed: int | None) -> WorldConfig:
    wc = _build_dataclass(WorldConfig, dict(cfg.get("world", {})), "world config")
    if seed is not None:
        wc.seed = seed
    wc.validate()
    return wc


def model_config(cfg: dict, manifest: dict) -> ModelConfig:
    values = dict(cfg.get("model", {}))
    wc = manifest["world_config"]
    values.setdefault("n_obj", wc["n_obj"])
    values.setdefault("n_rel", wc["n_rel"])
    values.setdefault("d_vis", wc["d_vis"])
    values.setdefault("d_emb", wc["d_emb"])
    mc = _build_dataclass(ModelConfig, values, "model config")
    if mc.n_obj != wc["n_obj"] or mc.n_rel != wc["n_rel"]:
        raise ConfigError("model vocabulary sizes disagree with the dataset manifest")
    mc.validate()
    return mc


def train_config(cfg: dict, args) -> TrainConfig:
    values = dict(cfg.get("train", {}))
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    if getattr(args, "vlsat", None) is not None:
        values["vlsat"] = args.vlsat
    tc = _build_dataclass(TrainConfig, values, "train config")
    tc.validate()
    return tc


def eval_config(cfg: dict, args) -> EvalConfig:
    values = dict(cfg.get("eval", {}))
    for key in ("object_ks", "predicate_ks", "triplet_ks", "recall_ks"):
        if key in values:
            values[key] = tuple(values[key])
    if getattr(args, "k_list", None):
        values["recall_ks"] = tuple(int(k) for k in args.k_list.split(","))
    return _build_dataclass(EvalConfig, values, "eval config")


# ---------------------------------------------------------------------------
# dataset I/O helpers


def write_dataset(out: Path, samples, vocab: Vocabulary, manifest: dict, extra_config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["config_hash"] = config_hash(manifest["world_config"] | extra_config)
    manifest["tool_version"] = __version__
    save_scene_file(out / "train.jsonl", [s for s in samples if s.split == "train"])
    save_scene_file(out / "validation.jsonl", [s for s in samples if s.split == "validation"])
    (out / "manifest.json").write_text(manifest_to_json(manifest), encoding="utf-8")


def read_manifest(dataset_dir: Path) -> dict:
    path = dataset_dir / "manifest.json"
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def read_dataset(dataset_dir: Path, strict: bool = True):
    manifest = read_manifest(dataset_dir)
    vocab = Vocabulary(object_names=manifest["object_names"],
                       predicate_names=manifest["predicate_names"],
                       predicate_train_frequency=manifest["predicate_train_frequency"])
    if vocab.content_hash() != manifest["vocab_hash"]:
        raise DataError("manifest vocabulary hash mismatch")
    samples = []
    for split in ("train", "validation"):
        path = dataset_dir / f"{split}.jsonl"
        if path.exists():
            samples.extend(load_scene_file(path, vocab, strict=strict))
    return samples, vocab, manifest


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    wc = world_config(cfg, args.seed)
    samples, vocab, manifest = generate_dataset(wc)
    out = Path(args.out)
    write_dataset(out, samples, vocab, manifest, {})
    audit = manifest["separability_audit"]
    log.info("generated %d scenes (%d train) into %s", len(samples),
             sum(1 for s in samples if s.split == "train"), out)
    log.info("predicate train frequencies: %s", manifest["predicate_train_frequency"])
    for p, r in audit.items():
        log.info("separability of predicate %s: geometry %.3f, with latent %.3f",
                 p, r["geometry_balanced_accuracy"], r["latent_balanced_accuracy"])
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset_dir = Path(args.dataset)
    samples, vocab, manifest = read_dataset(dataset_dir, strict=args.strict)
    mc = model_config(cfg, manifest)
    tc = train_config(cfg, args)
    provider = provider_from_manifest(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        if resume.vocab_hash != vocab.content_hash():
            raise DataError("checkpoint vocabulary hash does not match the dataset")

    log_path = out / "train_log.jsonl"
    mode = "oracle-assisted" if tc.vlsat else "baseline"
    log.info("training %s model for %d epochs on %d scenes", mode, tc.epochs,
             sum(1 for s in samples if s.split == "train"))
    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as fh:
        def hook(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d: lr %.6f total %.6f", record["epoch"], record["lr"],
                     record["loss_total"])

        model, optimizer, logs = train(samples, vocab, provider, mc, tc,
                                       resume=resume, log_hook=hook)
    ck = Checkpoint.capture(model, optimizer, tc, next_epoch=tc.epochs,
                            vocab_hash=vocab.content_hash(),
                            extra={"config_hash": config_hash(asdict(tc) | asdict(mc)),
                                   "tool_version": __version__})
    ck.save(out / "checkpoint.json")
    log.info("wrote %s", out / "checkpoint.json")
    return 0


def _predict_scene(model: ModelState, sample) -> ScenePrediction:
    prepared = prepare_scene(sample)
    result = forward_scene(model, prepared, "3d")
    logits = result.obj_logits_3d.data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    obj_probs = e / e.sum(axis=1, keepdims=True)
    if result.pred_logits_3d is not None:
        pl = result.pred_logits_3d.data
        pred_probs = np.where(pl >= 0, 1.0 / (1.0 + np.exp(-np.abs(pl))),
                              np.exp(-np.abs(pl)) / (1.0 + np.exp(-np.abs(pl))))
    else:
        pred_probs = np.zeros((0, model.cfg.n_rel))
    return ScenePrediction(scene_id=sample.scene_id, object_probs=obj_probs,
                           predicate_probs=pred_probs,
                           gt_objects=prepared.gt_objects,
                           gt_predicate_rows=prepared.gt_pred_rows.astype(np.uint8))


def predict_dump(model: ModelState, samples, vocab_hash: str, cfg_hash: str,
                 workers: int = 1) -> PredictionDump:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda s: _predict_scene(model, s), samples))
    else:
        scenes = [_predict_scene(model, s) for s in samples]
    return PredictionDump(scenes=scenes, n_obj=model.cfg.n_obj, n_rel=model.cfg.n_rel,
                          vocab_hash=vocab_hash, config_hash=cfg_hash)


def cmd_predict(args) -> int:
    dataset_dir = Path(args.dataset)
    samples, vocab, manifest = read_dataset(dataset_dir, strict=args.strict)
    ck = Checkpoint.load(args.checkpoint)
    if ck.vocab_hash != vocab.content_hash():
        raise DataError("checkpoint vocabulary hash does not match the dataset")
    model, _, _ = ck.restore()
    chosen = [s for s in samples if s.split == args.split]
    if not chosen:
        raise DataError(f"no scenes in split {args.split!r}")
    dump = predict_dump(model, chosen, vocab.content_hash(),
                        ck.payload.get("extra", {}).get("config_hash", ""), args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predictions.jsonl"
    path.write_text(dump_to_jsonl(dump, tool_version=__version__), encoding="utf-8")
    log.info("wrote %s (%d scenes)", path, len(dump.scenes))
    return 0


def _splits_from_manifest(manifest: dict) -> dict[str, set[int]]:
    return {name: set(v) for name, v in manifest["predicate_splits"].items()}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ec = eval_config(cfg, args)
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    dump = dump_from_jsonl(Path(args.dump).read_text(encoding="utf-8"))
    if dump.vocab_hash and dump.vocab_hash != manifest["vocab_hash"]:
        raise DataError("dump vocabulary hash does not match the manifest")
    train_triplets = {tuple(t) for t in manifest["train_triplets"]}
    report = evaluate(dump, predicate_splits=_splits_from_manifest(manifest),
                      train_triplets=train_triplets, cfg=ec)
    report["tool_version"] = __version__
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1), encoding="utf-8")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    log.info("wrote %s and report.csv (%d rows)", out / "report.json", len(report_rows(report)))
    return 0


# ---------------------------------------------------------------------------
# experiment harness


def _metric_or_none(report: dict, path: list):
    node = report
    for key in path:
        if node is None:
            return None
        node = node.get(key) if isinstance(node, dict) else None
    return node


EXPERIMENT_HEADLINES = [
    ("object A@1", ["object", "A", 1]),
    ("predicate mA@1", ["predicate", "mA", 1]),
    ("predicate mA@3", ["predicate", "mA", 3]),
    ("tail mA@1", ["splits", "tail", 1]),
    ("triplet A@50", ["triplet", "A", 50]),
    ("triplet mA@50", ["triplet", "mA", 50]),
    ("unseen A@50", ["seen_unseen", "unseen", 50]),
    ("sgcls R@20 (gc)", ["sgcls", "with_constraint", "R", 20]),
    ("predcls R@20 (gc)", ["predcls", "with_constraint", "R", 20]),
]


def run_experiment_seed(base_dir: Path, seed: int, cfg: dict, args) -> dict:
    """generate -> train both models -> predict -> eval, for one seed."""
    wc = world_config(cfg, seed)
    samples, vocab, manifest = generate_dataset(wc)
    seed_dir = base_dir / f"seed_{seed}"
    write_dataset(seed_dir / "dataset", samples, vocab, manifest, {})
    manifest = read_manifest(seed_dir / "dataset")
    provider = provider_from_manifest(manifest)
    mc = model_config(cfg, manifest)
    splits = _splits_from_manifest(manifest)
    train_triplets = {tuple(t) for t in manifest["train_triplets"]}
    ec = eval_config(cfg, args)
    val = [s for s in samples if s.split == "validation"]

    results = {}
    for mode in ("baseline", "vlsat"):
        tc = train_config(cfg, args)
        tc.vlsat = mode == "vlsat"
        log.info("seed %d: training %s", seed, mode)
        model, optimizer, logs = train(samples, vocab, provider, mc, tc)
        mode_dir = seed_dir / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        with open(mode_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in logs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        ck = Checkpoint.capture(model, optimizer, tc, tc.epochs, vocab.content_hash(),
                                extra={"config_hash": config_hash(asdict(tc) | asdict(mc)),
                                       "tool_version": __version__})
        ck.save(mode_dir / "checkpoint.json")
        dump = predict_dump(model, val, vocab.content_hash(),
                            config_hash(asdict(tc) | asdict(mc)), args.workers)
        (mode_dir / "predictions.jsonl").write_text(dump_to_jsonl(dump, __version__), encoding="utf-8")
        report = evaluate(dump, predicate_splits=splits, train_triplets=train_triplets, cfg=ec)
        (mode_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1),
                                              encoding="utf-8")
        results[mode] = report
    return results


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    exp = dict(cfg.get("experiment", {}))
    unknown = set(exp) - {"seeds"}
    if unknown:
        raise ConfigError(f"experiment config: unknown keys {sorted(unknown)}")
    seeds = exp.get("seeds", [7, 11, 23])
    if args.seed is not None:
        seeds = [args.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_seed = {}
    for seed in seeds:
        per_seed[seed] = run_experiment_seed(out, seed, cfg, args)

    table = []
    means = {"baseline": {}, "vlsat": {}}
    for name, path in EXPERIMENT_HEADLINES:
        for mode in ("baseline", "vlsat"):
            vals = [_metric_or_none(per_seed[s][mode], path) for s in seeds]
            vals = [v for v in vals if v is not None]
            means[mode][name] = sum(vals) / len(vals) if vals else None
        table.append(name)

    lines = []
    header = f"{'metric':22s} " + " ".join(f"{f'seed {s}':>17s}" for s in seeds) + f" {'mean':>17s}"
    sub = f"{'':22s} " + " ".join(f"{'base':>8s} {'vlsat':>8s}" for _ in seeds) + f" {'base':>8s} {'vlsat':>8s}"
    lines.append(header)
    lines.append(sub)
    for name, path in EXPERIMENT_HEADLINES:
        row = f"{name:22s} "
        for s in seeds:
            b = _metric_or_none(per_seed[s]["baseline"], path)
            v = _metric_or_none(per_seed[s]["vlsat"], path)
            row += f"{(100 * b if b is not None else float('nan')):8.2f} "
            row += f"{(100 * v if v is not None else float('nan')):8.2f} "
        mb, mv = means["baseline"][name], means["vlsat"][name]
        row += f"{(100 * mb if mb is not None else float('nan')):8.2f} "
        row += f"{(100 * mv if mv is not None else float('nan')):8.2f}"
        lines.append(row)
    print("\n".join(lines))

    for headline in ("tail mA@1", "unseen A@50"):
        mb, mv = means["baseline"][headline], means["vlsat"][headline]
        if mb is not None and mv is not None:
            print(f"mean {headline}: oracle-assisted {100 * mv:.2f} vs baseline {100 * mb:.2f} "
                  f"(delta {100 * (mv - mb):+.2f})")

    summary = {
        "tool_version": __version__,
        "seeds": seeds,
        "headline_means": means,
        "per_seed": {str(s): per_seed[s] for s in seeds},
        "table": lines,
    }
    (out / "comparison.json").write_text(json.dumps(summary, sort_keys=True, indent=1),
                                         encoding="utf-8")
    log.info("wrote %s", out / "comparison.json")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sg3d",
                                     description="3D scene graph prediction with oracle-assisted training")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--strict", action="store_true", default=True)
        p.add_argument("--no-strict", dest="strict", action="store_false")
        p.add_argument("--workers", type=int, default=1)
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory")

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    common(g)

    t = sub.add_parser("train", help="train a model")
    common(t, dataset=True)
    t.add_argument("--vlsat", dest="vlsat", action="store_true", default=None,
                   help="train with the oracle branch (default)")
    t.add_argument("--no-vlsat", dest="vlsat", action="store_false",
                   help="train the 3D-only baseline")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("predict", help="dump 3D-branch predictions")
    common(p, dataset=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation"))

    e = sub.add_parser("eval", help="evaluate a prediction dump")
    common(e)
    e.add_argument("--dump", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--k-list", default=None, help="comma-separated recall k values")

    x = sub.add_parser("experiment", help="baseline-vs-oracle-assisted comparison")
    common(x)
    x.add_argument("--k-list", default=None)
    x.add_argument("--epochs", type=int, default=None)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except (DataError, OSError) as e:
        log.error("data error: %s", e)
        return 3
    except NumericError as e:
        log.error("numeric abort: %s", e)
        return 4
    except Sg3dError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
