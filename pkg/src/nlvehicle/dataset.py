"""Track/query annotation I/O, duplicate-description detection and splitting.

Annotation files follow the NL-retrieval challenge layout::

    {track_id: {"frames": [relative paths], "boxes": [[x, y, w, h], ...],
                "nl": [three sentences]}}

Query files map ``query_id -> [three sentences]``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

SPLIT_TAGS = ("train", "val", "test_gallery", "test_query")
PROVENANCE_TAGS = ("original", "backtranslated", "subject_prefixed", "subject_summary")


class AnnotationError(ValueError):
    """Raised for malformed or invalid annotation content."""


@dataclass(frozen=True)
class FrameRef:
    video_id: str
    frame_index: int
    image_path: str


@dataclass(frozen=True)
class BoundingBox:
    frame_index: int
    x: int
    y: int
    w: int
    h: int

    def validate(self, frame_size: tuple[int, int] | None = None) -> None:
        if self.frame_index < 0:
            raise AnnotationError(f"negative frame index {self.frame_index}")
        if self.w <= 0 or self.h <= 0:
            raise AnnotationError(f"non-positive box extent w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise AnnotationError(f"negative box origin x={self.x} y={self.y}")
        if frame_size is not None:
            width, height = frame_size
            if self.x + self.w > width or self.y + self.h > height:
                raise AnnotationError(
                    f"box {self.as_list()} exceeds frame {width}x{height}"
                )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class TrackRecord:
    track_id: str
    video_id: str
    boxes: tuple[BoundingBox, ...]
    frames: tuple[FrameRef, ...]

    def __post_init__(self):
        if not self.boxes:
            raise AnnotationError(f"track {self.track_id}: no boxes")
        indices = [b.frame_index for b in self.boxes]
        if any(b >= a for a, b in zip(indices[1:], indices[:-1])):
            raise AnnotationError(f"track {self.track_id}: frame indices not strictly increasing")
        known = {f.frame_index for f in self.frames}
        missing = [i for i in indices if i not in known]
        if missing:
            raise AnnotationError(f"track {self.track_id}: boxes reference missing frames {missing}")

    def frame_for(self, frame_index: int) -> FrameRef:
        for f in self.frames:
            if f.frame_index == frame_index:
                return f
        raise KeyError(frame_index)


@dataclass(frozen=True)
class DescriptionGroup:
    group_id: str
    sentences: tuple[str, str, str]

    def __post_init__(self):
        sentences = tuple(s.strip() for s in self.sentences)
        if len(sentences) != 3:
            raise AnnotationError(
                f"group {self.group_id}: expected 3 sentences, got {len(sentences)}"
            )
        if any(not s for s in sentences):
            raise AnnotationError(f"group {self.group_id}: empty sentence")
        object.__setattr__(self, "sentences", sentences)


@dataclass
class DatasetManifest:
    tracks: dict[str, TrackRecord]
    descriptions: dict[str, DescriptionGroup]
    split_tag: str = "train"
    # Optional augmented sentence pools: track_id -> [(text, provenance), ...]
    augmented: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise AnnotationError(f"unknown split tag {self.split_tag!r}")
        if self.split_tag == "train" and set(self.tracks) != set(self.descriptions):
            raise AnnotationError("train manifest: description keys differ from track keys")

    def track_ids(self) -> list[str]:
        return sorted(self.tracks)

    def sentence_pool(self, track_id: str) -> list[str]:
        if track_id in self.augmented:
            return [text for text, _ in self.augmented[track_id]]
        return list(self.descriptions[track_id].sentences)


_DIGITS = re.compile(r"(\d+)")


def _frame_index_from_path(path: str, position: int) -> int:
    digits = _DIGITS.findall(Path(path).stem)
    return int(digits[-1]) if digits else position


def _video_id_from_path(path: str) -> str:
    parent = Path(path).parent.as_posix()
    return parent if parent not in ("", ".") else "video"


def image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) of an image file, reading only its header."""
    with Image.open(path) as im:
        return im.size


def _parse_track(
    track_id: str,
    entry: object,
    root: Path | None,
    frame_size: tuple[int, int] | Callable[[str], tuple[int, int] | None] | None,
) -> tuple[TrackRecord, DescriptionGroup | None, list[tuple[str, str]] | None]:
    if not isinstance(entry, Mapping):
        raise AnnotationError(f"track {track_id}: record is not a mapping")
    try:
        frame_paths = list(entry["frames"])
        raw_boxes = list(entry["boxes"])
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"track {track_id}: missing or malformed key {exc}") from None
    if len(frame_paths) != len(raw_boxes):
        raise AnnotationError(
            f"track {track_id}: {len(frame_paths)} frames but {len(raw_boxes)} boxes"
        )
    frames, boxes = [], []
    for pos, (fp, raw) in enumerate(zip(frame_paths, raw_boxes)):
        if not isinstance(fp, str):
            raise AnnotationError(f"track {track_id}: frame path {fp!r} is not a string")
        try:
            x, y, w, h = (int(round(float(v))) for v in raw)
        except (TypeError, ValueError):
            raise AnnotationError(f"track {track_id}: malformed box {raw!r}") from None
        idx = _frame_index_from_path(fp, pos)
        frames.append(FrameRef(_video_id_from_path(fp), idx, fp))
        boxes.append(BoundingBox(idx, x, y, w, h))

    size = None
    if callable(frame_size):
        size = frame_size(frame_paths[0])
    elif frame_size is not None:
        size = frame_size
    elif root is not None and (root / frame_paths[0]).exists():
        size = image_size(root / frame_paths[0])
    for b in boxes:
        try:
            b.validate(size)
        except AnnotationError as exc:
            raise AnnotationError(f"track {track_id}: {exc}") from None

    order = np.argsort([b.frame_index for b in boxes], kind="stable")
    boxes = [boxes[i] for i in order]
    frames = [frames[i] for i in order]
    video_ids = {f.video_id for f in frames}
    if len(video_ids) != 1:
        raise AnnotationError(f"track {track_id}: frames span several videos {sorted(video_ids)}")
    try:
        record = TrackRecord(track_id, video_ids.pop(), tuple(boxes), tuple(frames))
    except AnnotationError:
        raise
    group = pool = None
    if "nl" in entry:
        nl = [str(s) for s in entry["nl"]]
        if "nl_provenance" in entry:
            prov = [str(p) for p in entry["nl_provenance"]]
            if len(prov) != len(nl):
                raise AnnotationError(f"track {track_id}: nl_provenance length mismatch")
            bad = set(prov) - set(PROVENANCE_TAGS)
            if bad:
                raise AnnotationError(f"track {track_id}: unknown provenance {sorted(bad)}")
            pool = [(s.strip(), p) for s, p in zip(nl, prov)]
            nl = [s for s, p in zip(nl, prov) if p == "original"]
        group = DescriptionGroup(track_id, tuple(nl))
    return record, group, pool


def _read_json(path: Path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from None


def load_manifest(
    path: str | Path,
    split_tag: str = "train",
    frame_size: tuple[int, int] | None = None,
    data_root: str | Path | None = None,
) -> DatasetManifest:
    """Load a track annotation file into a manifest.

    Frame paths are resolved against ``data_root`` (default: the file's
    directory). Box bounds are checked against ``frame_size`` when given,
    otherwise against the first frame image of each track if it exists.
    """
    path = Path(path)
    root = Path(data_root) if data_root is not None else path.parent
    payload = _read_json(path)
    if not isinstance(payload, Mapping):
        raise AnnotationError(f"{path}: top level must be a mapping of track ids")
    tracks, descriptions, augmented = {}, {}, {}
    for track_id in sorted(payload):
        record, group, pool = _parse_track(track_id, payload[track_id], root, frame_size)
        tracks[track_id] = record
        if group is not None:
            descriptions[track_id] = group
        if pool is not None:
            augmented[track_id] = pool
    return DatasetManifest(tracks, descriptions, split_tag, augmented)


def load_tracks(path: str | Path, **kwargs) -> list[TrackRecord]:
    """Track records of an annotation file, sorted by track id."""
    manifest = load_manifest(path, split_tag="test_gallery", **kwargs)
    return [manifest.tracks[k] for k in manifest.track_ids()]


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    out = {}
    for track_id in manifest.track_ids():
        track = manifest.tracks[track_id]
        entry = {
            "frames": [track.frame_for(b.frame_index).image_path for b in track.boxes],
            "boxes": [b.as_list() for b in track.boxes],
        }
        if track_id in manifest.augmented:
            entry["nl"] = [t for t, _ in manifest.augmented[track_id]]
            entry["nl_provenance"] = [p for _, p in manifest.augmented[track_id]]
        elif track_id in manifest.descriptions:
            entry["nl"] = list(manifest.descriptions[track_id].sentences)
        out[track_id] = entry
    return out


def dump_json(payload: object, path: str | Path) -> None:
    """Write JSON with sorted keys so identical payloads give identical bytes."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    dump_json(manifest_to_dict(manifest), path)


def load_queries(path: str | Path) -> list[DescriptionGroup]:
    payload = _read_json(Path(path))
    if not isinstance(payload, Mapping):
        raise AnnotationError(f"{path}: top level must be a mapping of query ids")
    groups = []
    for query_id in sorted(payload):
        sentences = payload[query_id]
        if isinstance(sentences, str) or not isinstance(sentences, Sequence):
            raise AnnotationError(f"query {query_id}: expected a list of sentences")
        groups.append(DescriptionGroup(query_id, tuple(str(s) for s in sentences)))
    return groups


def save_queries(groups: Iterable[DescriptionGroup], path: str | Path) -> None:
    dump_json({g.group_id: list(g.sentences) for g in groups}, path)


def _normalize_sentence(text: str) -> str:
    return " ".join(text.lower().split())


def detect_duplicate_description_groups(groups: Iterable[DescriptionGroup]) -> list[list[str]]:
    """Partition group ids into classes of identical sentence multisets.

    Sentences are compared after lowercasing and whitespace collapsing; order
    within a group is ignored. Classes are sorted internally and by first id.
    """
    classes: dict[tuple[str, ...], list[str]] = {}
    for g in groups:
        key = tuple(sorted(_normalize_sentence(s) for s in g.sentences))
        classes.setdefault(key, []).append(g.group_id)
    return sorted((sorted(ids) for ids in classes.values()), key=lambda c: c[0])


def duplicate_label_map(classes: Sequence[Sequence[str]]) -> dict[str, str]:
    """Map every group id to the representative (first) id of its class."""
    return {gid: cls[0] for cls in classes for gid in cls}


def _subset(manifest: DatasetManifest, ids: Iterable[str], tag: str) -> DatasetManifest:
    ids = list(ids)
    return DatasetManifest(
        {k: manifest.tracks[k] for k in ids},
        {k: manifest.descriptions[k] for k in ids if k in manifest.descriptions},
        tag,
        {k: manifest.augmented[k] for k in ids if k in manifest.augmented},
    )


def split(
    manifest: DatasetManifest, fractions: Sequence[float], seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic disjoint (train, val) split by track."""
    if len(fractions) != 2 or any(f < 0 for f in fractions):
        raise ValueError(f"expected two non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = manifest.track_ids()
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    train_ids = sorted(ids[i] for i in perm[:n_train])
    val_ids = sorted(ids[i] for i in perm[n_train:])
    return _subset(manifest, train_ids, "train"), _subset(manifest, val_ids, "val")
