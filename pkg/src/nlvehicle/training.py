"""Batch sampling, optimization loop, metrics log and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, detect_duplicate_description_groups, duplicate_label_map
from .losses import BatchEmbeddings, LossWeights, total_loss
from .model import EncoderConfig, RetrievalModel, Vocab, encode_batch
from .motion import DEFAULT_STRIDE, VideoCache, crop_vehicle, render_motion_image, resize

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "nlvehicle-checkpoint/1"
METRIC_COLUMNS = ("step", "l_local", "l_global", "l_fusion", "l_instance", "l_barlow", "tau")
IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


class NonFiniteLossError(FloatingPointError):
    def __init__(self, components: dict[str, float]):
        super().__init__(f"non-finite loss, components: {components}")
        self.components = components


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-3
    text_lr_multiplier: float = 0.1
    optimizer: str = "adamw"
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 10
    min_lr_ratio: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    use_augmented: bool = True
    merge_duplicates: bool = False
    motion_stride: int = DEFAULT_STRIDE
    bg_sample_stride: int = 1
    seed: int = 0
    checkpoint_path: str = "checkpoint.pt"
    metrics_path: str = "metrics.csv"
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.text_lr_multiplier <= 1:
            raise ValueError("text_lr_multiplier must lie in (0, 1]")
        min_batch = 2 if self.weights.barlow > 0 else 1
        if self.batch_size < min_batch:
            raise ValueError(f"batch_size must be >= {min_batch}")

    def to_dict(self) -> dict:
        return asdict(self)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) image in [0, 1] -> standardized (3, H, W) float32 tensor."""
    x = (np.asarray(image, dtype=np.float64) - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(x.transpose(2, 0, 1).astype(np.float32))


@dataclass
class TrackPool:
    """Preprocessed training material: per-track crops, motion image and sentences."""

    track_ids: list[str]
    crops: list[torch.Tensor]  # (n_boxes, 3, S, S) per track
    motions: torch.Tensor  # (n_tracks, 3, S, S)
    sentences: list[list[str]]
    class_index: list[int]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def prepare_pool(
    manifest: DatasetManifest,
    root: str | Path,
    image_size: int,
    stride: int = DEFAULT_STRIDE,
    bg_sample_stride: int = 1,
    use_augmented: bool = True,
    merge_duplicates: bool = False,
    cache_dir: str | Path | None = None,
) -> TrackPool:
    videos = VideoCache(root, bg_sample_stride)
    ids = manifest.track_ids()
    crops, motions, sentences = [], [], []
    for tid in ids:
        track = manifest.tracks[tid]
        frames = videos.track_frames(track)
        crops.append(torch.stack([image_to_tensor(crop_vehicle(frames[b.frame_index], b, image_size)) for b in track.boxes]))
        motion = None
        cache_file = Path(cache_dir) / f"{tid}_motion_s{stride}.npy" if cache_dir else None
        if cache_file is not None and cache_file.exists():
            motion = np.load(cache_file)
        if motion is None:
            motion = render_motion_image(videos.background(track), frames, track, stride).image
            if cache_file is not None:
                cache_file.parent.mkdir(parents=True, exist_ok=True)
                np.save(cache_file, motion)
        motions.append(image_to_tensor(resize(motion, image_size, image_size)))
        sentences.append(manifest.sentence_pool(tid) if use_augmented else list(manifest.descriptions[tid].sentences))
    if merge_duplicates:
        classes = detect_duplicate_description_groups(manifest.descriptions[t] for t in ids)
        rep = duplicate_label_map(classes)
        names = sorted(set(rep.values()))
        labels = [names.index(rep[t]) for t in ids]
    else:
        names, labels = list(ids), list(range(len(ids)))
    return TrackPool(list(ids), crops, torch.stack(motions), sentences, labels, names)


@dataclass
class TrainSample:
    track_id: str
    crop: torch.Tensor
    motion: torch.Tensor
    sentence: str
    class_index: int


def sample_batch(pool: TrackPool, batch_size: int, rng: np.random.Generator) -> list[TrainSample]:
    """``batch_size`` samples with pairwise distinct class indices.

    Per sampled track: one uniformly random box crop, the track's motion image
    and one uniformly random sentence from its pool.
    """
    if batch_size > pool.num_classes:
        raise ValueError(f"batch size {batch_size} exceeds {pool.num_classes} classes")
    by_class: dict[int, list[int]] = {}
    for i, c in enumerate(pool.class_index):
        by_class.setdefault(c, []).append(i)
    classes = rng.choice(pool.num_classes, size=batch_size, replace=False)
    out = []
    for c in classes:
        members = by_class[int(c)]
        i = members[int(rng.integers(len(members)))]
        crops = pool.crops[i]
        sents = pool.sentences[i]
        out.append(
            TrainSample(
                pool.track_ids[i],
                crops[int(rng.integers(len(crops)))],
                pool.motions[i],
                sents[int(rng.integers(len(sents)))],
                int(c),
            )
        )
    return out


def collate(batch: Sequence[TrainSample], vocab: Vocab, max_len: int):
    crops = torch.stack([s.crop for s in batch])
    motions = torch.stack([s.motion for s in batch])
    tokens = encode_batch([s.sentence for s in batch], vocab, max_len)
    labels = torch.tensor([s.class_index for s in batch], dtype=torch.long)
    return crops, motions, tokens, labels


def forward_batch(model: RetrievalModel, crops, motions, tokens, labels) -> BatchEmbeddings:
    vis = model.dual_stream_forward(crops, motions if model.global_backbone is not None else None)
    _, z_t = model.text_forward(tokens)
    return BatchEmbeddings(vis.z_local, vis.z_global, vis.z_fusion, z_t, labels)


def make_optimizer(model: RetrievalModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = model.param_groups(cfg.lr, cfg.text_lr_multiplier)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


def make_scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int):
    def factor(step: int) -> float:
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        span = max(1, total_steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def train_step(
    model: RetrievalModel,
    optimizer: torch.optim.Optimizer,
    batch: Sequence[TrainSample],
    vocab: Vocab,
    weights: LossWeights,
    scheduler=None,
) -> dict[str, float]:
    """One gradient step on every trainable parameter; returns the component log."""
    model.train()
    inputs = collate(batch, vocab, model.config.max_len)
    emb = forward_batch(model, *inputs)
    loss, components = total_loss(emb, model.tau, model.w_shared.weight, weights)
    if not math.isfinite(float(loss.detach())):
        raise NonFiniteLossError(components)
    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        optimizer.step()
        model.clamp_tau()
    if scheduler is not None:
        scheduler.step()
    components["tau"] = float(model.tau.detach())
    components["total"] = float(loss.detach())
    return components


@dataclass
class TrainState:
    model: RetrievalModel
    vocab: Vocab
    class_names: list[str]
    optimizer: torch.optim.Optimizer | None = None
    scheduler: object | None = None
    step: int = 0
    rng: np.random.Generator | None = None
    train_config: TrainConfig | None = None
    # optimizer/scheduler state dicts of a loaded checkpoint, applied by fit()
    pending: dict = field(default_factory=dict, repr=False)


def build_model(enc: EncoderConfig, seed: int) -> RetrievalModel:
    torch.manual_seed(seed)
    return RetrievalModel(enc)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "encoder_config": state.model.config.to_dict(),
        "vocab": list(state.vocab.itos),
        "class_names": list(state.class_names),
        "model": state.model.state_dict(),
        "step": state.step,
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "scheduler": state.scheduler.state_dict() if state.scheduler is not None else None,
        "rng": state.rng.bit_generator.state if state.rng is not None else None,
        "train_config": state.train_config.to_dict() if state.train_config is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> TrainState:
    """Restore model, vocab and (when present) optimizer/scheduler/RNG state."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # truncated or foreign files raise assorted errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        found = payload.get("schema") if isinstance(payload, dict) else None
        raise CheckpointError(f"checkpoint schema {found!r} != {CHECKPOINT_SCHEMA!r}")
    try:
        enc = EncoderConfig(**payload["encoder_config"])
    except ValueError as exc:
        raise CheckpointError(f"invalid encoder config in {path}: {exc}") from exc
    model = RetrievalModel(enc)
    model.load_state_dict(payload["model"])
    vocab = Vocab(payload["vocab"][2:])
    state = TrainState(model, vocab, list(payload["class_names"]), step=int(payload["step"]))
    if payload.get("train_config") is not None:
        state.train_config = TrainConfig(**payload["train_config"])
    if payload.get("rng") is not None:
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = payload["rng"]
    state.pending = {k: payload[k] for k in ("optimizer", "scheduler") if payload.get(k) is not None}
    return state


class MetricsLog:
    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append or not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def truncate_to(self, step: int) -> None:
        """Drop rows after ``step`` (used when resuming from an older checkpoint)."""
        rows = read_metrics(self.path)
        with self.path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                if r["step"] <= step:
                    w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])

    def append(self, step: int, components: dict[str, float]) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([step] + [_fmt(components[c]) for c in METRIC_COLUMNS[1:]])


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, int) else repr(float(v))


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def steps_per_epoch(pool: TrackPool, batch_size: int) -> int:
    return max(1, pool.num_classes // batch_size)


def fit(
    cfg: TrainConfig,
    enc: EncoderConfig,
    pool: TrackPool,
    vocab: Vocab,
    out_dir: str | Path = ".",
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainState:
    """Train on ``pool`` for ``cfg.epochs`` epochs.

    Checkpoints go to ``out_dir/cfg.checkpoint_path`` every
    ``cfg.checkpoint_every`` steps and at the end; ``stop_after`` halts after
    that many total steps (the checkpoint is still written), which together with
    ``resume`` reproduces an uninterrupted run.
    """
    out_dir = Path(out_dir)
    ckpt_path = out_dir / cfg.checkpoint_path
    total_steps = cfg.epochs * steps_per_epoch(pool, cfg.batch_size)
    if resume and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        model = state.model
        opt = make_optimizer(model, cfg)
        sched = make_scheduler(opt, cfg, total_steps)
        if "optimizer" in state.pending:
            opt.load_state_dict(state.pending.pop("optimizer"))
        if "scheduler" in state.pending:
            sched.load_state_dict(state.pending.pop("scheduler"))
        state.optimizer, state.scheduler, state.train_config = opt, sched, cfg
        metrics = MetricsLog(out_dir / cfg.metrics_path, append=True)
        metrics.truncate_to(state.step)
        log.info("resumed from %s at step %d", ckpt_path, state.step)
    else:
        enc = EncoderConfig(**{**enc.to_dict(), "vocab_size": len(vocab), "num_tracks": pool.num_classes})
        model = build_model(enc, cfg.seed)
        opt = make_optimizer(model, cfg)
        sched = make_scheduler(opt, cfg, total_steps)
        state = TrainState(model, vocab, pool.class_names, opt, sched, 0, np.random.default_rng(cfg.seed), cfg)
        metrics = MetricsLog(out_dir / cfg.metrics_path)
    limit = total_steps if stop_after is None else min(total_steps, stop_after)
    while state.step < limit:
        batch = sample_batch(pool, cfg.batch_size, state.rng)
        components = train_step(model, opt, batch, vocab, cfg.weights, sched)
        state.step += 1
        metrics.append(state.step, components)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, ckpt_path)
    save_checkpoint(state, ckpt_path)
    model.eval()
    return state
