"""Track/query embedding, cosine ranking, MRR, score ensembling and submissions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, DescriptionGroup, TrackRecord, dump_json
from .model import EMBED_DIM, RetrievalModel, Vocab, encode_batch
from .motion import DEFAULT_STRIDE, VideoCache, crop_vehicle, render_motion_image, resize
from .training import image_to_tensor

ARCHIVE_SCHEMA = "nlvehicle-embeddings/1"


@dataclass
class GalleryEmbedding:
    track_id: str
    vector: np.ndarray


@dataclass
class QueryEmbedding:
    query_id: str
    vector: np.ndarray


@dataclass
class RankedList:
    query_id: str
    track_ids: list[str]


@dataclass
class MRRReport:
    mrr: float | Fraction
    ranks: dict[str, int]


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def sample_box_indices(n_boxes: int, num_frames: int | None) -> list[int]:
    """Up to ``num_frames`` evenly spaced box positions (all when None)."""
    if num_frames is None or num_frames >= n_boxes:
        return list(range(n_boxes))
    return sorted({int(round(x)) for x in np.linspace(0, n_boxes - 1, num_frames)})


@torch.no_grad()
def embed_track(
    model: RetrievalModel,
    track: TrackRecord,
    frames: Mapping[int, np.ndarray],
    background: np.ndarray,
    num_frames: int | None = 8,
    stride: int = DEFAULT_STRIDE,
    normalize: str = "post",
) -> GalleryEmbedding:
    """Average the fusion embedding over sampled frames of a track.

    The motion image is per-track and so shared by every sampled frame.
    ``normalize="post"`` L2-normalizes only the mean; ``"pre"`` also
    normalizes each frame embedding before averaging.
    """
    model.eval()
    size = model.config.image_size
    motion = render_motion_image(background, frames, track, stride).image
    picks = sample_box_indices(len(track.boxes), num_frames)
    crops = torch.stack(
        [image_to_tensor(crop_vehicle(frames[track.boxes[i].frame_index], track.boxes[i], size)) for i in picks]
    )
    motions = image_to_tensor(resize(motion, size, size))[None].expand(len(picks), -1, -1, -1)
    z = model.dual_stream_forward(crops, motions if model.global_backbone is not None else None).z_fusion
    z = z.double().numpy()
    if normalize == "pre":
        z = z / np.linalg.norm(z, axis=1, keepdims=True)
    elif normalize != "post":
        raise ValueError(f"unknown normalize mode {normalize!r}")
    return GalleryEmbedding(track.track_id, _unit(z.mean(0)))


@torch.no_grad()
def embed_sentences(model: RetrievalModel, sentences: Sequence[str], vocab: Vocab) -> np.ndarray:
    model.eval()
    _, z_t = model.text_forward(encode_batch(sentences, vocab, model.config.max_len))
    return z_t.double().numpy()


def embed_query(model: RetrievalModel, group: DescriptionGroup, vocab: Vocab) -> QueryEmbedding:
    """Normalized mean of the text embeddings of the group's sentences."""
    z = embed_sentences(model, group.sentences, vocab)
    return QueryEmbedding(group.group_id, _unit(z.mean(0)))


def embed_gallery(
    model: RetrievalModel,
    manifest: DatasetManifest,
    root: str | Path,
    num_frames: int | None = 8,
    stride: int = DEFAULT_STRIDE,
    bg_sample_stride: int = 1,
    normalize: str = "post",
) -> list[GalleryEmbedding]:
    videos = VideoCache(root, bg_sample_stride)
    out = []
    for tid in manifest.track_ids():
        track = manifest.tracks[tid]
        out.append(
            embed_track(model, track, videos.track_frames(track), videos.background(track), num_frames, stride, normalize)
        )
    return out


def score_matrix(queries: Sequence[QueryEmbedding], gallery: Sequence[GalleryEmbedding]) -> np.ndarray:
    """Cosine similarity, shape (len(queries), len(gallery))."""
    Q = np.stack([_unit(q.vector) for q in queries])
    G = np.stack([_unit(g.vector) for g in gallery])
    return Q @ G.T


def rank_scores(query_id: str, scores: np.ndarray, track_ids: Sequence[str]) -> RankedList:
    """Order by descending score, ascending track id on ties."""
    ids = np.asarray(track_ids)
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return RankedList(query_id, [str(ids[i]) for i in order])


def rank(query: QueryEmbedding, gallery: Sequence[GalleryEmbedding]) -> RankedList:
    if not gallery:
        raise ValueError("empty gallery")
    scores = score_matrix([query], gallery)[0]
    return rank_scores(query.query_id, scores, [g.track_id for g in gallery])


def rank_all(scores: np.ndarray, query_ids: Sequence[str], track_ids: Sequence[str]) -> list[RankedList]:
    return [rank_scores(q, row, track_ids) for q, row in zip(query_ids, scores)]


def mrr(ranked_lists: Sequence[RankedList], ground_truth: Mapping[str, str], exact: bool = False) -> MRRReport:
    """Mean over queries of 1 / (1-based rank of the ground-truth track).

    With ``exact=True`` the mean is a ``Fraction``.
    """
    if not ranked_lists:
        raise ValueError("no ranked lists")
    ranks = {}
    for rl in ranked_lists:
        if rl.query_id not in ground_truth:
            raise KeyError(f"no ground truth for query {rl.query_id!r}")
        target = ground_truth[rl.query_id]
        try:
            ranks[rl.query_id] = rl.track_ids.index(target) + 1
        except ValueError:
            raise KeyError(f"query {rl.query_id!r}: ground-truth track {target!r} not ranked") from None
    total = sum(Fraction(1, r) for r in ranks.values()) / len(ranks)
    return MRRReport(total if exact else float(total), ranks)


def ensemble_scores(score_matrices: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Row-wise min-max normalize each matrix, then take the weighted mean.

    Constant rows normalize to zeros.
    """
    if not score_matrices or len(score_matrices) != len(weights):
        raise ValueError("need one weight per score matrix")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    shape = np.shape(score_matrices[0])
    acc = np.zeros(shape)
    for m, wk in zip(score_matrices, w):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != shape:
            raise ValueError(f"score matrix shape {m.shape} != {shape}")
        lo = m.min(axis=1, keepdims=True)
        span = m.max(axis=1, keepdims=True) - lo
        acc += wk * np.divide(m - lo, span, out=np.zeros_like(m), where=span > 0)
    return acc / w.sum()


def write_submission(ranked_lists: Sequence[RankedList], path: str | Path) -> None:
    dump_json({rl.query_id: list(rl.track_ids) for rl in ranked_lists}, path)


def read_submission(path: str | Path) -> list[RankedList]:
    payload = json.loads(Path(path).read_text())
    return [RankedList(q, list(payload[q])) for q in sorted(payload)]


def save_embeddings(
    path: str | Path,
    gallery: Sequence[GalleryEmbedding],
    queries: Sequence[QueryEmbedding],
    normalized: bool = True,
) -> None:
    header = {"schema": ARCHIVE_SCHEMA, "dim": EMBED_DIM, "normalized": normalized}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            gallery_ids=np.array([g.track_id for g in gallery], dtype=str),
            gallery=np.stack([g.vector for g in gallery]).astype(np.float64) if gallery else np.zeros((0, EMBED_DIM)),
            query_ids=np.array([q.query_id for q in queries], dtype=str),
            queries=np.stack([q.vector for q in queries]).astype(np.float64) if queries else np.zeros((0, EMBED_DIM)),
        )


def load_embeddings(path: str | Path) -> tuple[list[GalleryEmbedding], list[QueryEmbedding], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("schema") != ARCHIVE_SCHEMA or header.get("dim") != EMBED_DIM:
            raise ValueError(f"{path}: unsupported embedding archive header {header}")
        gallery = [GalleryEmbedding(str(i), v) for i, v in zip(data["gallery_ids"], data["gallery"])]
        queries = [QueryEmbedding(str(i), v) for i, v in zip(data["query_ids"], data["queries"])]
    return gallery, queries, header


def write_mrr_report(report: MRRReport, path: str | Path) -> None:
    dump_json({"mrr": float(report.mrr), "ranks": report.ranks}, path)
