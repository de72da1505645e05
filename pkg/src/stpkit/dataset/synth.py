"""Deterministic doorway-scene generator with ground-truth annotations.

Each frame shows k doorway rectangles on a textured wall. A doorway is an
outer ring (whose color encodes its position in the frame) around a constant
interior fill. Exactly one doorway is the main transition:

- local-cue frames: interiors get distinct luminances; the brightest wins.
- global-cue frames: all interiors share one exact luminance and a bright
  beacon glyph is rendered on the wall beside the designated doorway. The
  winner is the doorway nearest the beacon, so only whole-frame context can
  identify it; crops of the candidates are indistinguishable by brightness.

Generation is bit-deterministic given (config, seed): every frame derives its
own rng from a seed sequence, and PNG encoding is canonical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import save_image_png
from .manifest import save_manifest
from .types import Box, DatasetManifest, FrameRecord, StpAnnotation, SynthConfig

# Ring thickness of the doorway frame, in pixels; interiors are boxes inset by
# this amount. Tests and oracles that measure interior luminance rely on it.
RING_PX = 4

# Interior gray used by every doorway in global-cue frames (exact equality is
# what makes a brightness oracle tie there).
GLOBAL_CUE_INTERIOR = 128

_PLACEMENT_RETRIES = 200


class SynthesisError(Exception):
    pass


def interior_box(box: Box) -> Box:
    """The constant-fill region inside a doorway's ring."""
    return Box(box.x1 + RING_PX, box.y1 + RING_PX, box.x2 - RING_PX, box.y2 - RING_PX)


def _wall(size: int, style: str, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, size, dtype=np.float32)[None, :]
    ys = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None]
    img = np.empty((size, size, 3), dtype=np.float32)
    if style == "stone":
        img[..., 0] = 40.0 + 170.0 * xs
        img[..., 1] = 40.0 + 170.0 * ys
        img[..., 2] = 80.0
        rows = (np.arange(size) // 12) % 2 == 0
        img[rows, :, :] += 10.0
    else:  # ember
        img[..., 0] = 120.0 - 60.0 * ys
        img[..., 1] = 30.0 + 40.0 * xs * ys
        img[..., 2] = 60.0 + 140.0 * xs
        cols = (np.arange(size) // 14) % 2 == 0
        img[:, cols, :] += 12.0
    if noise_level > 0:
        img += rng.uniform(-45.0 * noise_level, 45.0 * noise_level, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 255.0)


def _ring_color(cx: float, cy: float, size: int) -> np.ndarray:
    # position-coded: red tracks x, green tracks y, blue is a constant marker
    return np.array([30.0 + 195.0 * cx / size, 30.0 + 195.0 * cy / size, 240.0], dtype=np.float32)


def _boxes_overlap(a: Box, b: Box, pad: float) -> bool:
    return not (
        a.x2 + pad <= b.x1 or b.x2 + pad <= a.x1 or a.y2 + pad <= b.y1 or b.y2 + pad <= a.y1
    )


def _place_doorways(size: int, k: int, rng: np.random.Generator) -> list[Box]:
    pad = max(8.0, size / 24.0)
    margin = max(4, size // 32)
    boxes: list[Box] = []
    for _ in range(k):
        for attempt in range(_PLACEMENT_RETRIES):
            w = int(rng.integers(round(0.10 * size), round(0.18 * size) + 1))
            h = int(rng.integers(round(0.16 * size), round(0.28 * size) + 1))
            x1 = int(rng.integers(margin, size - margin - w + 1))
            y1 = int(rng.integers(margin, size - margin - h + 1))
            cand = Box(float(x1), float(y1), float(x1 + w), float(y1 + h))
            if all(not _boxes_overlap(cand, b, pad) for b in boxes):
                boxes.append(cand)
                break
        else:
            return []
    return boxes


def _place_beacon(
    size: int, target: Box, others: list[Box], rng: np.random.Generator
) -> tuple[int, int, int] | None:
    """Pick (x, y, side_len) for the beacon glyph hugging the target doorway."""
    s = max(10, round(size / 16))
    gap = max(4, size // 48)
    cx, cy = target.center
    candidates = [
        (int(round(cx - s / 2)), int(round(target.y1 - gap - s))),  # above
        (int(round(cx - s / 2)), int(round(target.y2 + gap))),  # below
        (int(round(target.x1 - gap - s)), int(round(cy - s / 2))),  # left
        (int(round(target.x2 + gap)), int(round(cy - s / 2))),  # right
    ]
    order = rng.permutation(4)
    for idx in order:
        x, y = candidates[idx]
        if x < 1 or y < 1 or x + s >= size - 1 or y + s >= size - 1:
            continue
        glyph = Box(float(x), float(y), float(x + s), float(y + s))
        if any(_boxes_overlap(glyph, b, 2.0) for b in others):
            continue
        bx, by = glyph.center
        d_target = (bx - cx) ** 2 + (by - cy) ** 2
        rival = min(
            ((bx - b.center[0]) ** 2 + (by - b.center[1]) ** 2 for b in others),
            default=float("inf"),
        )
        if d_target < rival:
            return x, y, s
    return None


def _render_frame(
    cfg: SynthConfig, rng: np.random.Generator
) -> tuple[np.ndarray, list[Box], int] | None:
    size = cfg.image_size
    img = _wall(size, cfg.style, cfg.noise_level, rng)
    k = int(rng.integers(cfg.doorways_min, cfg.doorways_max + 1))
    boxes = _place_doorways(size, k, rng)
    if not boxes:
        return None
    global_cue = bool(rng.random() < cfg.global_cue_fraction)

    if global_cue:
        interiors = [GLOBAL_CUE_INTERIOR] * k
        mstp = int(rng.integers(0, k))
        others = [b for i, b in enumerate(boxes) if i != mstp]
        beacon = _place_beacon(size, boxes[mstp], others, rng)
        if beacon is None:
            return None
        bx, by, s = beacon
        img[by : by + s, bx : bx + s] = np.array([255.0, 210.0, 40.0], dtype=np.float32)
    else:
        values = rng.choice(np.arange(50, 216), size=k, replace=False)
        interiors = [int(v) for v in values]
        mstp = int(np.argmax(values))

    for box, fill in zip(boxes, interiors):
        x1, y1, x2, y2 = (int(box.x1), int(box.y1), int(box.x2), int(box.y2))
        img[y1:y2, x1:x2] = _ring_color(*box.center, size)
        inner = interior_box(box)
        img[int(inner.y1) : int(inner.y2), int(inner.x1) : int(inner.x2)] = float(fill)

    return np.clip(img, 0.0, 255.0) / 255.0, boxes, mstp


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Render the corpus under out_dir/images and write out_dir/manifest.json."""
    bad = cfg.violations()
    if bad:
        raise SynthesisError("; ".join(bad))
    out_dir = Path(out_dir)
    frames: list[FrameRecord] = []
    for i in range(cfg.num_frames):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        rendered = None
        for _ in range(_PLACEMENT_RETRIES):
            rendered = _render_frame(cfg, rng)
            if rendered is not None:
                break
        if rendered is None:
            raise SynthesisError(f"doorway placement failed for frame index {i}; config too crowded")
        image, boxes, mstp = rendered
        frame_id = f"{cfg.game}-{i:05d}"
        rel_path = f"images/{frame_id}.png"
        save_image_png(image, out_dir / rel_path)
        frames.append(
            FrameRecord(
                frame_id=frame_id,
                image_path=rel_path,
                width=cfg.image_size,
                height=cfg.image_size,
                game=cfg.game,
                annotations=[
                    StpAnnotation(box=b, is_mstp=(j == mstp)) for j, b in enumerate(boxes)
                ],
            )
        )
    manifest = DatasetManifest(
        frames=frames,
        provenance=(
            f"synthetic doorway scenes: style={cfg.style} size={cfg.image_size} "
            f"k={cfg.doorways_min}..{cfg.doorways_max} global_cue={cfg.global_cue_fraction} "
            f"noise={cfg.noise_level} seed={seed}"
        ),
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
