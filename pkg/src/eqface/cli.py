"""Command-line entry point: gen, train, extract, eval.

Science parameters live in a plain-text config file (`key = value`, '#'
comments, unknown keys rejected); command-line flags override config values.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error. The
environment variable EQFACE_SEED supplies the seed when the config omits it.
"""

import argparse
import os
import sys

import numpy as np

from . import aggregate, evaluation, synthgen, trainer
from .errors import EQFaceError
from .loss import LossConfig
from .model import forward, init_params, load_checkpoint, save_checkpoint
from .synthgen import GenConfig


class ConfigError(Exception):
    """Bad key, bad value or missing required key; maps to exit code 2."""


def _parse_int_list(text: str):
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _parse_float_list(text: str):
    text = text.strip()
    return tuple(float(v) for v in text.split(",") if v.strip()) if text else ()


def _parse_noise_levels(text: str):
    levels = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            sigma, frac = part.split(":")
            levels.append((float(sigma), float(frac)))
        except ValueError as exc:
            raise ConfigError(
                f"bad noise_levels entry {part!r}, expected sigma:fraction") from exc
    if not levels:
        raise ConfigError("noise_levels is empty")
    return tuple(levels)


def _parse_bool(text: str):
    v = text.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (parser, default); None default means "must be provided when required"
KEYS = {
    # dataset
    "n_classes": (int, None),
    "samples_per_class": (int, None),
    "d_in": (int, 32),
    "d": (int, 16),
    "noise_levels": (_parse_noise_levels, None),
    "seed": (int, None),
    "split_ref_ids": (int, 0),
    "split_ref_per_id": (int, 0),
    "split_query_per_id": (int, 0),
    "split_disturb_ids": (int, 0),
    "split_seed": (int, None),
    # model
    "hidden": (int, 64),
    "quality_hidden": (int, 0),  # 0 means d // 4
    # loss
    "m1": (float, 1.0),
    "m2": (float, 0.3),
    "m3": (float, 0.2),
    "scale": (float, 64.0),
    # training
    "batch_size": (int, 32),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "step1_epochs": (int, 30),
    "step1_lr": (float, 0.1),
    "step1_decay_epochs": (_parse_int_list, (10, 20)),
    "step2_epochs": (int, 15),
    "step2_lr": (float, 0.01),
    "step2_decay_epochs": (_parse_int_list, (5, 10)),
    "step3_epochs": (int, 30),
    "step3_lr": (float, 0.1),
    "step3_decay_epochs": (_parse_int_list, (10, 20)),
    "iterations": (int, 2),
    "step3_restart": (str, "continue"),
    "qwdf_threshold": (float, None),
    "quality_head_only": (_parse_bool, False),
    # aggregation / evaluation
    "f_th": (float, 0.5),
    "s_th": (float, 0.3),
    "frame_cap": (int, 0),  # 0 means unlimited stream length per identity
    "far_targets": (_parse_float_list, (1e-4, 1e-3, 1e-2)),
    "rank_ns": (_parse_int_list, (1, 5)),
}

REQUIRED = {
    "gen": ("n_classes", "samples_per_class", "noise_levels", "seed"),
    "train": ("seed",),
    "extract": (),
    "eval": (),
}


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser, _ = KEYS[key]
            try:
                values[key] = parser(value)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return values


def load_run_config(path, command: str, overrides=None) -> dict:
    """Config values with defaults applied and required keys enforced."""
    cfg = {key: default for key, (_, default) in KEYS.items()}
    if path:
        cfg.update(parse_config_file(path))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["seed"] is None and os.environ.get("EQFACE_SEED"):
        cfg["seed"] = int(os.environ["EQFACE_SEED"])
    for key in REQUIRED[command]:
        if cfg[key] is None:
            raise ConfigError(f"missing required key {key!r} for {command}")
    if cfg["split_seed"] is None:
        cfg["split_seed"] = cfg["seed"]
    return cfg


def _require_absent(path, force: bool) -> None:
    if not force and os.path.exists(path):
        raise ConfigError(f"output {path} exists (use --force to overwrite)")


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config, "gen")
    gen_cfg = GenConfig(n_classes=cfg["n_classes"],
                        samples_per_class=cfg["samples_per_class"],
                        d_in=cfg["d_in"], d=cfg["d"],
                        noise_levels=cfg["noise_levels"], seed=cfg["seed"])
    gen_cfg.validate()
    if not gen_cfg.quality_learnable:
        print("warning: single noise level; quality has no learnable target",
              file=sys.stderr)
    _require_absent(args.out, args.force)
    samples, _ = synthgen.generate(gen_cfg)
    synthgen.save_dataset_csv(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")

    if cfg["split_ref_ids"] > 0:
        ref, query = synthgen.split_reference_query(
            samples, cfg["split_ref_ids"], cfg["split_ref_per_id"],
            cfg["split_query_per_id"], cfg["split_disturb_ids"], cfg["split_seed"])
        base = args.out[:-4] if args.out.endswith(".csv") else args.out
        for part, name in ((ref, f"{base}.ref.csv"), (query, f"{base}.query.csv")):
            _require_absent(name, args.force)
            synthgen.save_dataset_csv(part, name)
            print(f"wrote {len(part)} samples to {name}")
    return 0


def _pipeline_config(cfg: dict) -> trainer.PipelineConfig:
    seed = cfg["seed"]
    common = dict(momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                  batch_size=cfg["batch_size"])
    return trainer.PipelineConfig(
        step1=trainer.OptimConfig(lr0=cfg["step1_lr"], total_epochs=cfg["step1_epochs"],
                                  decay_epochs=cfg["step1_decay_epochs"],
                                  seed=seed, **common),
        step2=trainer.OptimConfig(lr0=cfg["step2_lr"], total_epochs=cfg["step2_epochs"],
                                  decay_epochs=cfg["step2_decay_epochs"],
                                  seed=seed + 1, **common),
        step3=trainer.OptimConfig(lr0=cfg["step3_lr"], total_epochs=cfg["step3_epochs"],
                                  decay_epochs=cfg["step3_decay_epochs"],
                                  seed=seed + 2, **common),
        loss=LossConfig(m1=cfg["m1"], m2=cfg["m2"], m3=cfg["m3"], scale=cfg["scale"]),
        iterations=cfg["iterations"],
        step3_restart=cfg["step3_restart"],
        qwdf_threshold=cfg["qwdf_threshold"],
        quality_head_only=cfg["quality_head_only"],
        seed=seed,
    )


def cmd_train(args) -> int:
    overrides = {"iterations": args.iterations}
    if args.quality_head_only:
        overrides["quality_head_only"] = True
    cfg = load_run_config(args.config, "train", overrides)
    samples = synthgen.load_dataset_csv(args.data)
    d_in = samples[0].x.shape[0]
    n_classes = max(s.label for s in samples) + 1
    pcfg = _pipeline_config(cfg)

    if args.init:
        params = load_checkpoint(args.init)
    else:
        if cfg["quality_head_only"]:
            raise ConfigError("--quality-head-only needs --init with a baseline checkpoint")
        params = init_params(d_in, cfg["hidden"], cfg["d"], n_classes, seed=cfg["seed"],
                             quality_hidden=cfg["quality_hidden"] or None)

    def persist(tag, p):
        save_checkpoint(p, f"{args.out}.{tag}")

    result = trainer.run_pipeline(samples, params, pcfg, on_step=persist)
    save_checkpoint(result.params, args.out)
    for it, table in result.quality_tables.items():
        trainer.save_quality_table(table, f"{args.out}.iter{it}.quality.csv")
    trainer.save_training_log(result.log_rows, f"{args.out}.log.csv")
    print(f"pipeline done: {' -> '.join(result.step_sequence)}; checkpoint at {args.out}")
    return 0


def extract_records(params, samples) -> list:
    """Eval-mode features for all samples, ordered per identity occurrence."""
    records = []
    seen: dict[int, int] = {}
    for start in range(0, len(samples), 512):
        chunk = samples[start:start + 512]
        fwd = forward(params, np.stack([s.x for s in chunk]), mode="eval")
        for sample, f, s_val in zip(chunk, fwd.f, fwd.s):
            order = seen.get(sample.label, 0)
            seen[sample.label] = order + 1
            records.append(aggregate.FeatureRecord(
                f=f, s=float(s_val), identity=sample.label, order=order))
    return records


def cmd_extract(args) -> int:
    load_run_config(args.config, "extract")
    params = load_checkpoint(args.ckpt)
    samples = synthgen.load_dataset_csv(args.data)
    records = extract_records(params, samples)
    aggregate.save_features_csv(records, args.out)
    print(f"wrote {len(records)} feature rows to {args.out}")
    return 0


def _group_by_identity(records):
    groups: dict[int, list] = {}
    for r in records:
        groups.setdefault(r.identity, []).append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: r.order)
    return groups


def aggregate_gallery(records, mode: str, f_th: float, s_th: float,
                      frame_cap: int = 0):
    """Per-identity template per mode; mode 'none' keeps individual entries."""
    if mode == "none":
        return records
    templates = []
    for identity, recs in sorted(_group_by_identity(records).items()):
        if frame_cap > 0:
            recs = recs[:frame_cap]
        if mode == "qwfa":
            fused = aggregate.qwfa(recs)
        elif mode == "qwfaf":
            fused = aggregate.qwfaf(recs, s_th)
        elif mode == "progressive":
            fused = aggregate.progressive_aggregate(recs, f_th, s_th)
        else:
            raise ConfigError(f"unknown aggregation mode {mode!r}")
        templates.append((identity, fused))
    return templates


def evaluate_features(refs, queries, mode, f_th, s_th, far_targets, rank_ns,
                      frame_cap=0, with_roc=False):
    """Aggregate the reference side, then compute the requested metrics.

    The ROC has one point per distinct score, which gets large on big
    matrices; it is only built when asked for.
    """
    gallery = aggregate_gallery(refs, mode, f_th, s_th, frame_cap)
    sim = evaluation.similarity_matrix(gallery, queries)
    gt = sim.same_identity
    far_points = evaluation.tar_at_far(sim, gt, far_targets)
    ranks = evaluation.rank_n(sim, rank_ns)
    roc = evaluation.roc_curve(sim, gt) if with_roc else None
    return sim, far_points, ranks, roc


def cmd_eval(args) -> int:
    overrides = {"f_th": args.f_th, "s_th": args.s_th}
    cfg = load_run_config(args.config, "eval", overrides)
    refs = aggregate.load_features_csv(args.ref)
    queries = aggregate.load_features_csv(args.query)
    if refs[0].f.shape != queries[0].f.shape:
        raise EQFaceError("reference and query feature dimensions differ")

    sim, far_points, ranks, roc = evaluate_features(
        refs, queries, args.mode, cfg["f_th"], cfg["s_th"],
        cfg["far_targets"], cfg["rank_ns"], cfg["frame_cap"],
        with_roc=bool(args.roc))

    rows = []
    for p in far_points:
        op = f"{p.far_target:.17g}"
        rows.append(("tar_at_far", op, p.tar))
        rows.append(("far_threshold", op, p.threshold))
        rows.append(("far_achieved", op, p.achieved_far))
        rows.append(("far_achievable", op, 1.0 if p.achievable else 0.0))
        if not p.achievable:
            print(f"note: FAR target {p.far_target:g} unachievable with "
                  f"{sim.values.size} pairs; reporting the FAR-0 floor",
                  file=sys.stderr)
    for n, acc in ranks:
        rows.append(("rank_accuracy", str(n), acc))
    rows.append(("genuine_pairs", "", float(sim.same_identity.sum())))
    rows.append(("impostor_pairs", "", float((~sim.same_identity).sum())))
    evaluation.write_metrics_csv(rows, args.out)
    if args.roc:
        evaluation.write_roc_csv(roc, args.roc)
    for p in far_points:
        print(f"tar@far<={p.far_target:g}: {p.tar:.4f} (threshold {p.threshold:.4f})")
    for n, acc in ranks:
        print(f"rank-{n}: {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqface",
                                     description="quality-aware embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the training pipeline on a dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--quality-head-only", action="store_true")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract features + qualities to CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="aggregate templates and compute metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--ref", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--mode", choices=("none", "qwfa", "qwfaf", "progressive"),
                   default="none")
    p.add_argument("--f-th", type=float, default=None)
    p.add_argument("--s-th", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--roc", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except EQFaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
