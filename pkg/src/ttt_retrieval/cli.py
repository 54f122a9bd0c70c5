"""Command-line front end: gen, pretrain, ttt, eval, compare.

Each command reads a JSON config (all fields optional), applies dotted-path
overrides from the command line, echoes the fully resolved config into the
output directory, and writes machine-readable outputs there. Exit codes:
0 success, 2 config problems, 3 checkpoint problems, 4 divergence,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import (
    ExperimentConfig,
    apply_override,
    config_from_dict,
    config_to_dict,
    load_config,
    make_ttt_config,
    resolve_effective,
    save_config,
)
from .datagen import (
    DatasetManifest,
    generate_dataset,
    load_manifest,
    load_samples,
    make_ucdr_split,
    save_manifest,
)
from .errors import CheckpointError, ConfigError, DivergenceError, Error
from .model import ModelDims, init_params, load_checkpoint, save_checkpoint
from .optimizer import pretrain, run_ttt, strip_labels
from .report import render_ap_histogram, render_compare_chart, render_loss_curve
from .retrieval import evaluate_protocol
from .ssl_tasks import generate_permutation_set, save_permutations


def _echo_config(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    save_config(resolve_effective(cfg), os.path.join(cfg.out, "effective_config.json"))


def _manifest_path(cfg: ExperimentConfig) -> str:
    if cfg.dataset.manifest:
        return cfg.dataset.manifest
    return os.path.join(cfg.out, "dataset", "manifest.json")


def _load_dataset(cfg: ExperimentConfig) -> tuple[DatasetManifest, str]:
    path = _manifest_path(cfg)
    manifest = load_manifest(path)
    return manifest, os.path.dirname(os.path.abspath(path))


def _clip_k(k: int, gallery_size: int, mode: str) -> int:
    if k > gallery_size:
        print(f"warning: k={k} exceeds {mode} gallery size {gallery_size}; "
              f"clipping", file=sys.stderr)
        return gallery_size
    return k


def cmd_gen(cfg: ExperimentConfig) -> None:
    ds_dir = os.path.join(cfg.out, "dataset")
    d = cfg.dataset
    manifest = generate_dataset(ds_dir, n_classes=d.n_classes,
                                n_domains=d.n_domains, per_cell=d.per_cell,
                                image_size=d.image_size, seed=cfg.dataset_seed())
    manifest = make_ucdr_split(manifest, unseen_fraction=d.unseen_fraction,
                               holdout_domain=d.holdout_domain,
                               gallery_domain=d.gallery_domain,
                               seed=cfg.split_seed())
    save_manifest(manifest, os.path.join(ds_dir, "manifest.json"))
    _echo_config(cfg)
    print(os.path.join(ds_dir, "manifest.json"))


def cmd_pretrain(cfg: ExperimentConfig) -> None:
    manifest, root = _load_dataset(cfg)
    train = load_samples(manifest, root, "train")
    seen = sorted(manifest.seen_class_ids)
    class_index = {c: i for i, c in enumerate(seen)}
    pairs = [(s.image, class_index[s.class_id]) for s in train]

    in_dim = train[0].image.flat().size
    dims = ModelDims(in_dim=in_dim, hidden=cfg.model.hidden,
                     embed_dim=cfg.model.embed_dim, head_k=cfg.model.head_k,
                     n_classes=len(seen))
    params = init_params(cfg.pretrain_seed(), dims)
    trained = pretrain(params, pairs, epochs=cfg.pretrain.epochs,
                       lr=cfg.pretrain.lr, seed=cfg.pretrain_seed(),
                       batch_size=cfg.pretrain.batch_size)
    os.makedirs(cfg.out, exist_ok=True)
    ckpt = os.path.join(cfg.out, "pretrained.ckpt")
    save_checkpoint(trained, ckpt)
    _echo_config(cfg)
    print(ckpt)


def cmd_ttt(cfg: ExperimentConfig, checkpoint: str) -> None:
    params = load_checkpoint(checkpoint)
    manifest, root = _load_dataset(cfg)
    pool = strip_labels(load_samples(manifest, root, "test_query"))
    ttt_cfg = make_ttt_config(cfg)

    os.makedirs(cfg.out, exist_ok=True)
    perms = None
    if ttt_cfg.task.kind == "jigsaw":
        perms = generate_permutation_set(size=ttt_cfg.task.k, seed=ttt_cfg.seed)
        save_permutations(perms, os.path.join(cfg.out, "permutations.txt"))

    adapted, trace = run_ttt(params, pool, ttt_cfg, perms=perms)
    ckpt = os.path.join(cfg.out, "adapted.ckpt")
    save_checkpoint(adapted, ckpt)
    trace.to_csv(os.path.join(cfg.out, "trace.csv"))
    render_loss_curve(trace, os.path.join(cfg.out, "trace.png"),
                      title=f"{ttt_cfg.task.kind} adaptation loss")
    _echo_config(cfg)
    print(ckpt)


def _eval_sets(cfg: ExperimentConfig):
    manifest, root = _load_dataset(cfg)
    seen = set(manifest.seen_class_ids)
    queries_all = load_samples(manifest, root, "test_query")
    queries = [s for s in queries_all if s.class_id not in seen]
    gallery = load_samples(manifest, root, "test_gallery")
    return manifest, queries_all, queries, gallery, seen


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> None:
    params = load_checkpoint(checkpoint)
    _, _, queries, gallery, seen = _eval_sets(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    for mode in cfg.eval.modes:
        if mode == "non_generalized":
            size = sum(1 for s in gallery if s.class_id not in seen)
        else:
            size = len(gallery)
        k = _clip_k(cfg.eval.k, size, mode)
        report = evaluate_protocol(params, queries, gallery, mode, seen, k=k,
                                   workers=cfg.eval.workers,
                                   metric=cfg.eval.metric)
        report.to_json(os.path.join(cfg.out, f"metrics_{mode}.json"))
        render_ap_histogram(report,
                            os.path.join(cfg.out, f"metrics_{mode}.png"))
        print(f"{mode}: mAP@{k}={report.map_at_k:.6f} "
              f"Prec@{k}={report.prec_at_k:.6f}")
    _echo_config(cfg)


def cmd_compare(cfg: ExperimentConfig, checkpoint: str) -> None:
    """Baseline vs each adaptation variant, all from the same checkpoint."""
    params = load_checkpoint(checkpoint)
    _, queries_all, queries, gallery, seen = _eval_sets(cfg)
    pool = strip_labels(queries_all)
    mode = cfg.eval.modes[0]
    if mode == "non_generalized":
        size = sum(1 for s in gallery if s.class_id not in seen)
    else:
        size = len(gallery)
    k = _clip_k(cfg.eval.k, size, mode)

    baseline = evaluate_protocol(params, queries, gallery, mode, seen, k=k,
                                 workers=cfg.eval.workers,
                                 metric=cfg.eval.metric)
    compare: dict = {
        "protocol": mode,
        "k": k,
        "baseline": {"map_at_k": baseline.map_at_k,
                     "prec_at_k": baseline.prec_at_k},
    }
    for kind in ("rotnet", "jigsaw", "barlow"):
        variant_cfg = make_ttt_config(cfg, kind=kind)
        perms = None
        if kind == "jigsaw":
            perms = generate_permutation_set(size=variant_cfg.task.k,
                                             seed=variant_cfg.seed)
        adapted, _ = run_ttt(params, pool, variant_cfg, perms=perms)
        report = evaluate_protocol(adapted, queries, gallery, mode, seen, k=k,
                                   workers=cfg.eval.workers,
                                   metric=cfg.eval.metric)
        compare[f"ttt_{kind}"] = {
            "map_at_k": report.map_at_k,
            "prec_at_k": report.prec_at_k,
            "delta_map": report.map_at_k - baseline.map_at_k,
            "delta_prec": report.prec_at_k - baseline.prec_at_k,
        }

    os.makedirs(cfg.out, exist_ok=True)
    out_json = os.path.join(cfg.out, "compare.json")
    with open(out_json, "w") as f:
        json.dump(compare, f, indent=2)
        f.write("\n")
    render_compare_chart(compare, os.path.join(cfg.out, "compare.png"))
    _echo_config(cfg)
    print(out_json)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="master seed (sections without their own seed use it)")
    p.add_argument("--out", default=argparse.SUPPRESS,
                   help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttt-retrieval",
        description="Self-supervised test-time training for cross-domain "
                    "embedding retrieval on a synthetic benchmark.")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate the synthetic dataset and split")
    sub.add_parser("pretrain", help="train the supervised starting checkpoint")
    for name, help_text in (("ttt", "adapt a checkpoint on the unlabeled "
                                    "query set"),
                            ("eval", "retrieval metrics for a checkpoint"),
                            ("compare", "baseline vs every adaptation "
                                        "variant")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
    for p in sub.choices.values():
        _add_common(p)
    return parser


def _collect_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn leftover --section.leaf tokens into (path, raw value) pairs."""
    out = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument {token!r}")
        body = token[2:]
        if "=" in body:
            path, raw = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override {token!r} is missing a value")
            path, raw = body, extras[i + 1]
            i += 2
        out.append((path, raw))
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = _collect_overrides(extras)
        if getattr(args, "config", None):
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig()
        if overrides:
            data = config_to_dict(cfg)
            for path, raw in overrides:
                apply_override(data, path, raw)
            cfg = config_from_dict(data)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "out", None):
            cfg.out = args.out

        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "ttt":
            cmd_ttt(cfg, args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "compare":
            cmd_compare(cfg, args.checkpoint)
        return 0
    except ConfigError as e:
        print(f"error: ConfigError: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"error: CheckpointError: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: DivergenceError: {e}", file=sys.stderr)
        return 4
    except Error as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
