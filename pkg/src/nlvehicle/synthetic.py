"""Deterministic synthetic traffic scenes with templated descriptions.

Each vehicle gets its own fixed-camera video: a static background (road,
optional landmark) with a colored shape driving along one of four motion
patterns. Frames are written as PNG; tracks, queries and ground truth are
written in the challenge annotation layout.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    BoundingBox,
    DatasetManifest,
    DescriptionGroup,
    FrameRef,
    TrackRecord,
    dump_json,
    save_manifest,
    save_queries,
)

log = logging.getLogger(__name__)

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.25, 0.90),
    "green": (0.10, 0.70, 0.20),
    "white": (0.96, 0.96, 0.96),
    "black": (0.05, 0.05, 0.05),
    "yellow": (0.95, 0.85, 0.10),
}
VEHICLE_TYPES = ("sedan", "SUV", "truck", "van")
MOTIONS = ("straight", "left", "right", "stop")
LANDMARKS = ("traffic light", "parking lot", "building", "tree")

# Words that must appear (case-insensitively, as whole words) in any sentence
# describing the attribute.
MOTION_TOKENS: dict[str, tuple[str, ...]] = {
    "straight": ("straight",),
    "left": ("left",),
    "right": ("right",),
    "stop": ("stop", "stops", "stopping"),
}
ATTRIBUTE_WORDS = frozenset(
    [c for c in COLORS]
    + [t.lower() for t in VEHICLE_TYPES]
    + [w for ws in MOTION_TOKENS.values() for w in ws]
)

_MOTION_PHRASES = {
    "straight": ("goes straight", "drives straight ahead", "keeps going straight"),
    "left": ("turns left", "makes a left turn", "is turning left"),
    "right": ("turns right", "makes a right turn", "is turning right"),
    "stop": ("stops", "comes to a stop", "is stopping"),
}
_TEMPLATES = (
    "A {color} {vtype} {motion}{where}.",
    "{Color} {vtype} {motion}{where}.",
    "The {color} {vtype} {motion}{where}.",
)
_WHERE = ("near the {lm}", "next to the {lm}", "by the {lm}")


@dataclass
class SceneConfig:
    frame_width: int = 128
    frame_height: int = 96
    num_frames: int = 24
    num_vehicles: int = 32
    colors: tuple[str, ...] = tuple(COLORS)
    vehicle_types: tuple[str, ...] = VEHICLE_TYPES
    motions: tuple[str, ...] = MOTIONS
    landmarks: tuple[str, ...] = LANDMARKS
    landmark_mention_prob: float = 0.5
    # Generate pairs sharing appearance and background, differing only in motion.
    motion_twins: bool = False
    noise_std: float = 0.02
    # Re-rendering with another noise_seed keeps the scene and redraws sensor noise.
    noise_seed: int = 0
    vehicle_width: tuple[int, int] = (16, 22)
    vehicle_height: tuple[int, int] = (11, 15)

    def __post_init__(self):
        for name in ("colors", "vehicle_types", "motions", "landmarks"):
            setattr(self, name, tuple(getattr(self, name)))
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors {sorted(unknown)}")
        if set(self.vehicle_types) - set(VEHICLE_TYPES):
            raise ValueError(f"unknown vehicle types {self.vehicle_types}")
        if set(self.motions) - set(MOTIONS):
            raise ValueError(f"unknown motions {self.motions}")
        if self.motion_twins and (self.num_vehicles % 2 or len(self.motions) < 2):
            raise ValueError("motion_twins needs an even vehicle count and >= 2 motions")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")


@dataclass(frozen=True)
class VehicleSpec:
    track_id: str
    color: str
    vehicle_type: str
    motion: str
    landmark: str | None
    width: int
    height: int
    base_gray: float
    start_x: float
    lane_y: float
    speed: float
    turn_at: float
    sentences: tuple[str, str, str] = field(default=("", "", ""))


@dataclass
class SyntheticScene:
    manifest: DatasetManifest
    queries: list[DescriptionGroup]
    truth: dict[str, str]
    vehicles: dict[str, VehicleSpec]
    root: Path


def mentions(sentence: str, words: tuple[str, ...] | str) -> bool:
    if isinstance(words, str):
        words = (words,)
    tokens = set(re.findall(r"[a-z]+", sentence.lower()))
    return any(w.lower() in tokens for w in words)


def _describe(v: VehicleSpec, rng: np.random.Generator, mention_prob: float) -> tuple[str, str, str]:
    phrase_order = rng.permutation(3)
    template_order = rng.permutation(3)
    out = []
    for k in range(3):
        where = ""
        if v.landmark is not None and rng.random() < mention_prob:
            where = " " + _WHERE[int(rng.integers(len(_WHERE)))].format(lm=v.landmark)
        text = _TEMPLATES[template_order[k]].format(
            color=v.color,
            Color=v.color.capitalize(),
            vtype=v.vehicle_type,
            motion=_MOTION_PHRASES[v.motion][phrase_order[k]],
            where=where,
        )
        out.append(text)
    return tuple(out)


def _trajectory(v: VehicleSpec, cfg: SceneConfig) -> list[tuple[float, float]]:
    """Top-left box corner per frame following the vehicle's motion pattern."""
    pts = []
    x, y = v.start_x, v.lane_y
    for t in range(cfg.num_frames):
        pts.append((x, y))
        if v.motion == "straight":
            x += v.speed
        elif v.motion == "stop":
            # decelerate to a halt
            x += v.speed * max(0.0, 1.0 - t / (0.45 * cfg.num_frames))
        else:
            if x < v.turn_at:
                x += v.speed
            else:
                y += (-v.speed if v.motion == "left" else v.speed) * 0.8
                x += v.speed * 0.15
    return pts


def _vehicle_mask(vtype: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2, (h - 1) / 2
    if vtype == "sedan":
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    if vtype == "SUV":
        return np.ones((h, w), bool)
    if vtype == "truck":
        # cargo box plus a lower cab at the front
        mask = np.zeros((h, w), bool)
        mask[:, : int(0.7 * w)] = True
        mask[h // 3 :, int(0.7 * w) :] = True
        return mask
    # van: trapezoid tapering toward the front
    return xx <= (w - 1) - (1 - yy / max(h - 1, 1)) * 0.45 * w


def _background(v: VehicleSpec, cfg: SceneConfig) -> np.ndarray:
    H, W = cfg.frame_height, cfg.frame_width
    bg = np.full((H, W, 3), v.base_gray, dtype=np.float64)
    # asphalt bands: horizontal road plus a vertical cross street
    road_top = int(v.lane_y - 6)
    bg[max(road_top, 0) : min(road_top + v.height + 12, H), :] = v.base_gray * 0.7
    bg[:, int(v.turn_at) - 4 : int(v.turn_at) + v.width + 16] = v.base_gray * 0.7
    lw, lh = W // 5, H // 5
    if v.landmark == "traffic light":
        bg[2 : 2 + lh, 3 : 3 + lw // 3] = 0.1
        for k, col in enumerate([(0.9, 0.1, 0.1), (0.9, 0.8, 0.1), (0.1, 0.8, 0.2)]):
            y0 = 3 + k * lh // 3
            bg[y0 : y0 + max(lh // 4, 1), 4 : 2 + lw // 3] = col
    elif v.landmark == "parking lot":
        bg[2 : 2 + lh, 2 : 2 + lw] = 0.35
        for k in range(0, lw, 4):
            bg[2 : 2 + lh, 2 + k] = 0.95
    elif v.landmark == "building":
        bg[1 : 1 + lh, 2 : 2 + lw] = (0.6, 0.4, 0.3)
        bg[3 : lh - 1 : 3, 4 : lw : 3] = (0.9, 0.9, 0.6)
    elif v.landmark == "tree":
        yy, xx = np.mgrid[0:H, 0:W]
        bg[((xx - lw / 2 - 2) ** 2 + (yy - lh / 2 - 2) ** 2) <= (lh / 2) ** 2] = (0.1, 0.45, 0.1)
    return bg


def _sample_vehicles(cfg: SceneConfig, rng: np.random.Generator) -> list[VehicleSpec]:
    W, H = cfg.frame_width, cfg.frame_height
    appearance = list(itertools.product(cfg.colors, cfg.vehicle_types))
    n = cfg.num_vehicles

    def geometry():
        return dict(
            width=int(rng.integers(cfg.vehicle_width[0], cfg.vehicle_width[1] + 1)),
            height=int(rng.integers(cfg.vehicle_height[0], cfg.vehicle_height[1] + 1)),
            base_gray=float(rng.uniform(0.45, 0.6)),
            start_x=float(rng.uniform(1, 0.08 * W)),
            lane_y=float(rng.uniform(0.42 * H, 0.5 * H)),
            speed=float(rng.uniform(0.026, 0.030) * W * 24 / cfg.num_frames),
            turn_at=float(rng.uniform(0.4 * W, 0.5 * W)),
        )

    def landmark():
        if not cfg.landmarks:
            return None
        return cfg.landmarks[int(rng.integers(len(cfg.landmarks)))]

    specs = []
    width = len(str(max(n - 1, 1)))
    if cfg.motion_twins:
        picks = rng.permutation(len(appearance))
        for pair in range(n // 2):
            color, vtype = appearance[picks[pair % len(appearance)]]
            geo, lm = geometry(), landmark()
            m1, m2 = rng.choice(len(cfg.motions), size=2, replace=False)
            for motion in (cfg.motions[m1], cfg.motions[m2]):
                tid = f"t{len(specs):0{width}d}"
                specs.append(VehicleSpec(tid, color, vtype, motion, lm, **geo))
        return specs
    combos = list(itertools.product(cfg.colors, cfg.vehicle_types, cfg.motions))
    # distinct attribute combinations whenever the vocabulary allows it
    picks = rng.permutation(len(combos))
    for i in range(n):
        color, vtype, motion = combos[picks[i % len(combos)]]
        tid = f"t{i:0{width}d}"
        specs.append(VehicleSpec(tid, color, vtype, motion, landmark(), **geometry()))
    return specs


def generate_synthetic_scene(cfg: SceneConfig, seed: int, out_dir: str | Path) -> SyntheticScene:
    """Render a synthetic scene to ``out_dir`` and return its manifest.

    Writes ``frames/<video>/<index>.png``, ``tracks.json``, ``queries.json``,
    ``truth.json`` and ``scene.json`` (ground-truth attributes). Output is
    byte-identical for a fixed ``(cfg, seed)``.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    specs = _sample_vehicles(cfg, rng)
    mention_prob = 0.0 if cfg.motion_twins else cfg.landmark_mention_prob
    specs = [
        VehicleSpec(**{**asdict(v), "sentences": _describe(v, rng, mention_prob)}) for v in specs
    ]
    W, H = cfg.frame_width, cfg.frame_height
    tracks, descriptions = {}, {}
    for v in specs:
        video_id = f"frames/{v.track_id}"
        (out_dir / video_id).mkdir(parents=True, exist_ok=True)
        bg = _background(v, cfg)
        mask = _vehicle_mask(v.vehicle_type, v.width, v.height)
        color = np.array(COLORS[v.color])
        noise_rng = np.random.default_rng([seed, cfg.noise_seed, int(v.track_id[1:])])
        boxes, frames, clipped = [], [], False
        for t, (x, y) in enumerate(_trajectory(v, cfg)):
            frame = bg.copy()
            xi, yi = int(round(x)), int(round(y))
            inside = 0 <= xi and 0 <= yi and xi + v.width <= W and yi + v.height <= H
            if inside and not clipped:
                region = frame[yi : yi + v.height, xi : xi + v.width]
                region[mask] = color
            else:
                clipped = True
            if cfg.noise_std > 0:
                frame = frame + noise_rng.normal(0.0, cfg.noise_std, frame.shape)
            path = f"{video_id}/{t:06d}.png"
            u8 = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(u8).save(out_dir / path, optimize=False)
            if inside and not clipped:
                frames.append(FrameRef(video_id, t, path))
                boxes.append(BoundingBox(t, xi, yi, v.width, v.height))
        if clipped:
            log.warning("track %s leaves the frame; trajectory clipped to %d boxes", v.track_id, len(boxes))
        if not boxes:
            raise ValueError(f"track {v.track_id} never fully inside the frame")
        tracks[v.track_id] = TrackRecord(v.track_id, video_id, tuple(boxes), tuple(frames))
        descriptions[v.track_id] = DescriptionGroup(v.track_id, v.sentences)

    manifest = DatasetManifest(tracks, descriptions, "train")
    queries = [DescriptionGroup(f"q{tid[1:]}", descriptions[tid].sentences) for tid in sorted(tracks)]
    truth = {f"q{tid[1:]}": tid for tid in sorted(tracks)}
    save_manifest(manifest, out_dir / "tracks.json")
    save_queries(queries, out_dir / "queries.json")
    dump_json(truth, out_dir / "truth.json")
    dump_json(
        {
            "config": asdict(cfg),
            "seed": seed,
            "vehicles": {
                v.track_id: {
                    "color": v.color,
                    "type": v.vehicle_type,
                    "motion": v.motion,
                    "landmark": v.landmark,
                }
                for v in specs
            },
        },
        out_dir / "scene.json",
    )
    return SyntheticScene(manifest, queries, truth, {v.track_id: v for v in specs}, out_dir)
