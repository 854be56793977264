"""Background averaging, trajectory compositing and motion-image rendering.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset import BoundingBox, TrackRecord

DEFAULT_STRIDE = 4


class FrameError(ValueError):
    pass


@dataclass
class MotionImage:
    image: np.ndarray
    source_track_id: str
    stride: int


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def video_frame_paths(video_dir: str | Path) -> list[Path]:
    """All PNG/JPEG frames of a video directory in filename order."""
    exts = {".png", ".jpg", ".jpeg"}
    return sorted(p for p in Path(video_dir).iterdir() if p.suffix.lower() in exts)


def compute_background(frames: Iterable[np.ndarray], sample_stride: int = 1) -> np.ndarray:
    """Pixelwise mean of every ``sample_stride``-th frame, accumulated in float64.

    Only one running sum is kept, so memory does not grow with the frame count.
    """
    if sample_stride < 1:
        raise ValueError(f"sample_stride must be >= 1, got {sample_stride}")
    total = None
    count = 0
    for i, frame in enumerate(frames):
        if i % sample_stride:
            continue
        frame = np.asarray(frame, dtype=np.float64)
        if total is None:
            if frame.ndim != 3 or frame.shape[2] != 3:
                raise FrameError(f"frame {i}: expected (H, W, 3), got {frame.shape}")
            total = np.zeros_like(frame)
        elif frame.shape != total.shape:
            raise FrameError(f"frame {i}: shape {frame.shape} differs from {total.shape}")
        total += frame
        count += 1
    if count == 0:
        raise FrameError("no frames to average")
    return np.clip(total / count, 0.0, 1.0)


def paste_indices(n_boxes: int, stride: int) -> list[int]:
    """Box positions pasted at a given stride; the last box is always included."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    idx = list(range(0, n_boxes, stride))
    if idx[-1] != n_boxes - 1:
        idx.append(n_boxes - 1)
    return idx


def _frame(frames: Mapping[int, np.ndarray], box: BoundingBox, track_id: str) -> np.ndarray:
    try:
        return frames[box.frame_index]
    except KeyError:
        raise FrameError(f"track {track_id}: frame {box.frame_index} not available") from None


def _paste(canvas: np.ndarray, frames: Mapping[int, np.ndarray], track: TrackRecord, stride: int) -> np.ndarray:
    for i in paste_indices(len(track.boxes), stride):
        b = track.boxes[i]
        src = _frame(frames, b, track.track_id)
        if src.shape != canvas.shape:
            raise FrameError(f"track {track.track_id}: frame {b.frame_index} shape {src.shape} != {canvas.shape}")
        canvas[b.y : b.y + b.h, b.x : b.x + b.w] = src[b.y : b.y + b.h, b.x : b.x + b.w]
    return canvas


def compose_trajectory(frames: Mapping[int, np.ndarray], track: TrackRecord, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Zero image with the track's box crops overwritten in chronological order."""
    first = _frame(frames, track.boxes[0], track.track_id)
    return _paste(np.zeros_like(np.asarray(first, dtype=np.float64)), frames, track, stride)


def render_motion_image(
    background: np.ndarray,
    frames: Mapping[int, np.ndarray],
    track: TrackRecord,
    stride: int = DEFAULT_STRIDE,
) -> MotionImage:
    """Paste the time-spaced vehicle crops onto the averaged background."""
    canvas = np.array(background, dtype=np.float64, copy=True)
    return MotionImage(_paste(canvas, frames, track, stride), track.track_id, stride)


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def crop_vehicle(frame: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Crop ``box`` (clipped to the frame) and resize it to a square."""
    H, W = frame.shape[:2]
    x0, y0 = max(box.x, 0), max(box.y, 0)
    x1, y1 = min(box.x + box.w, W), min(box.y + box.h, H)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise FrameError(f"degenerate box {box.as_list()} in frame {W}x{H}")
    return resize(frame[y0:y1, x0:x1], out_size, out_size)


class VideoCache:
    """Loads frames and per-video backgrounds for tracks stored under ``root``."""

    def __init__(self, root: str | Path, bg_sample_stride: int = 1):
        self.root = Path(root)
        self.bg_sample_stride = bg_sample_stride
        self._backgrounds: dict[str, np.ndarray] = {}

    def background(self, track: TrackRecord) -> np.ndarray:
        if track.video_id not in self._backgrounds:
            paths = video_frame_paths(self.root / track.video_id)
            self._backgrounds[track.video_id] = compute_background(
                (load_image(p) for p in paths), self.bg_sample_stride
            )
        return self._backgrounds[track.video_id]

    def track_frames(self, track: TrackRecord) -> dict[int, np.ndarray]:
        return {f.frame_index: load_image(self.root / f.image_path) for f in track.frames}

    def motion_image(self, track: TrackRecord, stride: int = DEFAULT_STRIDE) -> MotionImage:
        return render_motion_image(self.background(track), self.track_frames(track), track, stride)
