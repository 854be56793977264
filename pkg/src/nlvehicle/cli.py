"""``nlvehicle`` command-line entry point.

Every subcommand reads the shared YAML config (``--config``), lets flags
override it, and writes ``provenance_<command>.json`` next to its outputs.
Failures print one line ``ERROR <category> <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .augment import AugmentationError, augment_manifest
from .config import ConfigError, PipelineConfig, load_config
from .dataset import AnnotationError, dump_json, load_manifest, load_queries, save_manifest
from .motion import FrameError, VideoCache, save_image
from .translate import BacktranslationCache, HttpTranslator, StubTranslator, TranslationError

log = logging.getLogger("nlvehicle")

COMMANDS = ("synth-data", "motion", "augment", "train", "embed", "rank", "eval", "report")


class UsageError(ValueError):
    pass


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_provenance(out_dir: Path, command: str, cfg: PipelineConfig, **extra) -> None:
    record = {
        "command": command,
        "config_sha256": cfg.digest(),
        "code_version": code_version(),
        "seed": cfg.seed,
        **extra,
    }
    dump_json(record, out_dir / f"provenance_{command}.json")


def _set(obj, attr: str, value) -> None:
    if value is not None:
        setattr(obj, attr, value)


def _rebuild(cfg: PipelineConfig) -> PipelineConfig:
    # re-run validation and seed/stride propagation after flag overrides
    try:
        return PipelineConfig(
            seed=cfg.seed,
            paths=cfg.paths,
            dataset=dataclasses.replace(cfg.dataset, scene=dataclasses.replace(cfg.dataset.scene)),
            motion=cfg.motion,
            augment=cfg.augment,
            model=dataclasses.replace(cfg.model),
            train=dataclasses.replace(cfg.train),
            eval=cfg.eval,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _data_path(cfg: PipelineConfig, value: str | None, default: str) -> Path:
    return Path(value) if value is not None else Path(cfg.paths.data_root) / default


# subcommands


def cmd_synth_data(args, cfg: PipelineConfig) -> int:
    from .synthetic import generate_synthetic_scene

    scene = cfg.dataset.scene
    _set(scene, "num_vehicles", args.num_tracks)
    _set(scene, "noise_seed", args.noise_seed)
    if args.motion_twins:
        scene.motion_twins = True
    cfg = _rebuild(cfg)
    out = Path(args.out or cfg.paths.data_root)
    result = generate_synthetic_scene(cfg.dataset.scene, cfg.seed, out)
    write_provenance(out, "synth-data", cfg, tracks=len(result.manifest.tracks))
    print(f"wrote {len(result.manifest.tracks)} tracks to {out}")
    return 0


def cmd_motion(args, cfg: PipelineConfig) -> int:
    _set(cfg.motion, "stride", args.stride)
    _set(cfg.motion, "bg_sample_stride", args.bg_sample_stride)
    cfg = _rebuild(cfg)
    if cfg.motion.stride < 1 or cfg.motion.bg_sample_stride < 1:
        raise UsageError("strides must be >= 1")
    ann = _data_path(cfg, args.annotations, cfg.dataset.annotations)
    root = Path(args.data_root) if args.data_root else ann.parent
    manifest = load_manifest(ann, split_tag="test_gallery", data_root=root)
    out = Path(args.out)
    videos = VideoCache(root, cfg.motion.bg_sample_stride)
    ids = args.tracks or manifest.track_ids()
    for tid in ids:
        if tid not in manifest.tracks:
            raise AnnotationError(f"unknown track id {tid!r}")
        track = manifest.tracks[tid]
        save_image(videos.background(track), out / f"{tid}_bg.png")
        save_image(videos.motion_image(track, cfg.motion.stride).image, out / f"{tid}_motion.png")
    write_provenance(out, "motion", cfg, annotations=str(ann), tracks=len(ids))
    print(f"wrote {len(ids)} motion images to {out}")
    return 0


def cmd_augment(args, cfg: PipelineConfig) -> int:
    opts = cfg.augment.options
    if args.no_backtranslation:
        opts.enable_backtranslation = False
    if args.no_subjects:
        opts.enable_subject_strengthening = False
    _set(opts, "pivot_lang", args.pivot)
    _set(cfg.augment, "client", args.client)
    cfg = _rebuild(cfg)
    ann = _data_path(cfg, args.annotations, cfg.dataset.annotations)
    out = Path(args.out) if args.out else ann.parent / cfg.augment.output
    manifest = load_manifest(ann, data_root=args.data_root)
    if cfg.augment.client == "stub":
        client = StubTranslator(seed=cfg.seed)
    elif cfg.augment.client == "http":
        client = HttpTranslator()
    else:
        raise ConfigError(f"unknown translation client {cfg.augment.client!r}")
    cache = BacktranslationCache(args.cache) if args.cache else None
    augmented = augment_manifest(manifest, opts, cfg.seed, client, cache=cache, jobs=args.jobs)
    save_manifest(augmented, out)
    write_provenance(out.parent, "augment", cfg, annotations=str(ann), output=str(out))
    n = sum(len(v) for v in augmented.augmented.values())
    print(f"wrote {n} sentences for {len(augmented.augmented)} tracks to {out}")
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .model import Vocab
    from .training import fit, prepare_pool

    _set(cfg.train, "epochs", args.epochs)
    _set(cfg.train, "batch_size", args.batch_size)
    _set(cfg.train, "lr", args.lr)
    _set(cfg.model, "image_size", args.image_size)
    _set(cfg.model, "streams", args.streams)
    cfg = _rebuild(cfg)
    ann = _data_path(cfg, args.annotations, cfg.dataset.annotations)
    root = Path(args.data_root) if args.data_root else ann.parent
    out = Path(args.out or cfg.paths.output_root)
    manifest = load_manifest(ann, data_root=root)
    cache_dir = Path(args.cache_dir) if args.cache_dir else None
    pool = prepare_pool(
        manifest,
        root,
        cfg.model.image_size,
        cfg.train.motion_stride,
        cfg.train.bg_sample_stride,
        cfg.train.use_augmented,
        cfg.train.merge_duplicates,
        cache_dir,
    )
    vocab = Vocab.build(s for group in pool.sentences for s in group)
    state = fit(cfg.train, cfg.model, pool, vocab, out, resume=args.resume, stop_after=args.stop_after)
    write_provenance(out, "train", cfg, annotations=str(ann), steps=state.step)
    print(f"trained {state.step} steps; checkpoint {out / cfg.train.checkpoint_path}")
    return 0


def cmd_embed(args, cfg: PipelineConfig) -> int:
    from .retrieval import embed_gallery, embed_query, save_embeddings
    from .training import load_checkpoint

    _set(cfg.eval, "num_frames", args.num_frames)
    _set(cfg.eval, "normalize", args.normalize)
    if args.all_frames:
        cfg.eval.all_frames = True
    cfg = _rebuild(cfg)
    state = load_checkpoint(args.checkpoint)
    ann = _data_path(cfg, args.annotations, cfg.dataset.annotations)
    root = Path(args.data_root) if args.data_root else ann.parent
    manifest = load_manifest(ann, split_tag="test_gallery", data_root=root)
    qpath = _data_path(cfg, args.queries, cfg.dataset.queries)
    groups = load_queries(qpath)
    n = None if cfg.eval.all_frames else cfg.eval.num_frames
    gallery = embed_gallery(
        state.model, manifest, root, n, cfg.motion.stride, cfg.motion.bg_sample_stride, cfg.eval.normalize
    )
    queries = [embed_query(state.model, g, state.vocab) for g in groups]
    out = Path(args.out)
    save_embeddings(out, gallery, queries, normalized=True)
    write_provenance(out.parent, "embed", cfg, checkpoint=str(args.checkpoint), output=str(out))
    print(f"embedded {len(gallery)} tracks and {len(queries)} queries to {out}")
    return 0


def _load_scores(paths: Sequence[str]):
    from .retrieval import load_embeddings, score_matrix

    matrices, q_ids, t_ids = [], None, None
    for p in paths:
        gallery, queries, _ = load_embeddings(p)
        gq = [q.query_id for q in queries]
        gt = [g.track_id for g in gallery]
        if q_ids is not None and (gq != q_ids or gt != t_ids):
            raise UsageError(f"{p}: query/track ids differ from {paths[0]}")
        q_ids, t_ids = gq, gt
        matrices.append(score_matrix(queries, gallery))
    return matrices, q_ids, t_ids


def cmd_rank(args, cfg: PipelineConfig) -> int:
    from .retrieval import ensemble_scores, rank_all, write_submission

    matrices, q_ids, t_ids = _load_scores(args.embeddings)
    if len(matrices) == 1 and args.weights is None:
        scores = matrices[0]
    else:
        weights = args.weights or [1.0] * len(matrices)
        if len(weights) != len(matrices):
            raise UsageError(f"{len(weights)} weights for {len(matrices)} embedding archives")
        scores = ensemble_scores(matrices, weights)
    ranked = rank_all(scores, q_ids, t_ids)
    out = Path(args.out)
    write_submission(ranked, out)
    write_provenance(out.parent, "rank", cfg, embeddings=list(args.embeddings), weights=args.weights)
    print(f"ranked {len(t_ids)} tracks for {len(q_ids)} queries to {out}")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    from .retrieval import mrr, read_submission, write_mrr_report

    ranked = read_submission(args.submission)
    truth = json.loads(Path(args.truth).read_text())
    report = mrr(ranked, truth)
    if args.out:
        out = Path(args.out)
        write_mrr_report(report, out)
        write_provenance(out.parent, "eval", cfg, submission=str(args.submission))
    print(f"MRR {report.mrr:.4f}")
    return 0


def cmd_report(args, cfg: PipelineConfig) -> int:
    from . import report
    from .retrieval import mrr, rank_all
    from .training import read_metrics

    out = Path(args.out)
    written = []
    if args.metrics:
        rows = read_metrics(args.metrics)
        if not rows:
            raise UsageError(f"{args.metrics}: no metric rows")
        written.append(report.write_table(report.summarize_metrics(rows), out / "summary.csv"))
        written.append(report.plot_loss_curves(rows, out / "loss_curves.png"))
        written.append(report.plot_temperature(rows, out / "temperature.png"))
    if args.embeddings:
        if not args.truth:
            raise UsageError("--embeddings requires --truth")
        truth = json.loads(Path(args.truth).read_text())
        (scores,), q_ids, t_ids = _load_scores([args.embeddings])
        pos, neg = report.split_scores(scores, q_ids, t_ids, truth)
        written.append(report.plot_score_distribution(pos, neg, out / "score_distribution.png"))
        result = mrr(rank_all(scores, q_ids, t_ids), truth)
        written.append(report.plot_rank_histogram(result.ranks, out / "rank_histogram.png"))
        stats = [
            {"pairs": "matching", "n": len(pos), "mean": float(np.mean(pos)), "std": float(np.std(pos))},
            {"pairs": "non-matching", "n": len(neg), "mean": float(np.mean(neg)), "std": float(np.std(neg))},
        ]
        written.append(report.write_table(stats, out / "scores.csv"))
        print(f"MRR {result.mrr:.4f}")
    if not written:
        raise UsageError("nothing to report: pass --metrics and/or --embeddings")
    write_provenance(out, "report", cfg, files=[p.name for p in written])
    for p in written:
        print(p)
    return 0


# parser


def _common(deflt) -> argparse.ArgumentParser:
    # accepted both before and after the subcommand name
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=deflt, help="YAML pipeline config")
    p.add_argument("--jobs", type=int, default=deflt, help="worker parallelism cap")
    p.add_argument("--deterministic", action="store_true", default=deflt, help="deterministic kernels, one thread")
    p.add_argument("--seed", type=int, default=deflt, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true", default=deflt)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlvehicle", parents=[_common(None)], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    common = _common(argparse.SUPPRESS)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    p = add("synth-data", "render a synthetic scene with annotations and queries")
    p.add_argument("--out", help="output directory (default: paths.data_root)")
    p.add_argument("--num-tracks", type=int)
    p.add_argument("--motion-twins", action="store_true", help="pairs differing only in motion")
    p.add_argument("--noise-seed", type=int, help="re-shoot the same scene with fresh sensor noise")
    p.set_defaults(func=cmd_synth_data)

    p = add("motion", "write background and motion images per track")
    p.add_argument("--annotations")
    p.add_argument("--data-root", help="directory frame paths are relative to")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--bg-sample-stride", type=int)
    p.add_argument("--tracks", nargs="+", help="subset of track ids")
    p.set_defaults(func=cmd_motion)

    p = add("augment", "back-translate and subject-strengthen descriptions")
    p.add_argument("--annotations")
    p.add_argument("--data-root")
    p.add_argument("--out")
    p.add_argument("--client", choices=("stub", "http"))
    p.add_argument("--pivot")
    p.add_argument("--cache", help="JSON back-translation cache file")
    p.add_argument("--no-backtranslation", action="store_true")
    p.add_argument("--no-subjects", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = add("train", "train the retrieval model")
    p.add_argument("--annotations", help="annotation file; an augmented one adds its sentence pools")
    p.add_argument("--data-root")
    p.add_argument("--out", help="run directory (default: paths.output_root)")
    p.add_argument("--cache-dir", help="motion-image cache")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--streams", choices=("dual", "local"))
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = add("embed", "embed gallery tracks and queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations")
    p.add_argument("--queries")
    p.add_argument("--data-root")
    p.add_argument("--out", required=True, help="embedding archive (.npz)")
    p.add_argument("--num-frames", type=int)
    p.add_argument("--all-frames", action="store_true")
    p.add_argument("--normalize", choices=("post", "pre"))
    p.set_defaults(func=cmd_embed)

    p = add("rank", "rank gallery tracks for every query")
    p.add_argument("--embeddings", nargs="+", required=True, help="one or more archives to ensemble")
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--out", required=True, help="submission file (.json)")
    p.set_defaults(func=cmd_rank)

    p = add("eval", "score a submission with MRR")
    p.add_argument("--submission", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="MRR report file")
    p.set_defaults(func=cmd_eval)

    p = add("report", "summary tables and figures from a metrics log and/or embeddings")
    p.add_argument("--metrics")
    p.add_argument("--embeddings")
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _category(exc: BaseException) -> str:
    from .training import CheckpointError, NonFiniteLossError

    table = (
        (ConfigError, "config"),
        (UsageError, "usage"),
        (AnnotationError, "annotation"),
        (FrameError, "frame"),
        (CheckpointError, "checkpoint"),
        ((TranslationError, AugmentationError), "augment"),
        (NonFiniteLossError, "numeric"),
        ((FileNotFoundError, IsADirectoryError, PermissionError), "io"),
        ((KeyError, ValueError), "validation"),
    )
    for types, name in table:
        if isinstance(exc, types):
            return name
    return "internal"


def _configure_runtime(args) -> None:
    import torch

    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif args.jobs:
        torch.set_num_threads(args.jobs)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.jobs = args.jobs or 1
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg = _rebuild(cfg)
        _configure_runtime(args)
        return args.func(args, cfg)
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, KeyError) and exc.args:
            msg = str(exc.args[0])
        print(f"ERROR {_category(exc)} {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
