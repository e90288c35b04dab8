"""Procedural clip and frame renderers for desk-scale training and evaluation.

Frames are float arrays in [-1, 1] with anti-aliased shapes so object
centroids move smoothly. The same renderers back the synthetic pre-training
sets, the procedural gateway backend, and the scripted-fixture builders, so
keyframes and training clips share one visual vocabulary.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

WHITE = (1.0, 1.0, 1.0)
RED = (1.0, -1.0, -1.0)
GREEN = (-1.0, 1.0, -1.0)
BLUE = (-1.0, -1.0, 1.0)


def blank_frame(size: int, bg: float | tuple = -1.0) -> np.ndarray:
    frame = np.empty((size, size, 3), dtype=np.float64)
    frame[:] = np.asarray(bg, dtype=np.float64)
    return frame


def _paint(frame: np.ndarray, coverage: np.ndarray, color) -> np.ndarray:
    color = np.asarray(color, dtype=np.float64)
    return frame * (1.0 - coverage[..., None]) + color * coverage[..., None]


def draw_square(frame: np.ndarray, cy: float, cx: float, half: float, color) -> np.ndarray:
    """Axis-aligned square with analytically anti-aliased edges."""
    size = frame.shape[0]
    coords = np.arange(size, dtype=np.float64)
    cov_y = np.clip(np.minimum(coords + 0.5, cy + half) - np.maximum(coords - 0.5, cy - half), 0.0, 1.0)
    cov_x = np.clip(np.minimum(coords + 0.5, cx + half) - np.maximum(coords - 0.5, cx - half), 0.0, 1.0)
    return _paint(frame, np.outer(cov_y, cov_x), color)


def draw_disk(frame: np.ndarray, cy: float, cx: float, radius: float, color) -> np.ndarray:
    """Disk with a one-pixel anti-aliased rim."""
    size = frame.shape[0]
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return _paint(frame, coverage, color)


def render_ball_scene(
    size: int,
    drop_frac: float,
    x_frac: float = 0.5,
    radius_frac: float = 0.12,
    ball_color=WHITE,
    bg: float = -0.85,
    ground_level: float = 0.88,
    ground_color: float = -0.35,
) -> np.ndarray:
    """A ball above a ground strip; drop_frac 0 = top of frame, 1 = resting.

    The vertical position interpolates linearly between the top of the sky and
    contact with the ground strip.
    """
    if not 0.0 <= drop_frac <= 1.0:
        raise ValidationError("drop_frac must lie in [0, 1]")
    frame = blank_frame(size, bg)
    ground_row = ground_level * (size - 1)
    frame[int(np.ceil(ground_row)):, :, :] = ground_color
    radius = radius_frac * size
    cy = radius + drop_frac * (ground_row - 2.0 * radius)
    return draw_disk(frame, cy, x_frac * (size - 1), radius, ball_color)


def moving_square_clip(frames: int, size: int, direction: str, color, half: float = 4.0) -> np.ndarray:
    """Square traversing the frame along one axis."""
    lo, hi = 3.0 + half, size - 4.0 - half
    center = size / 2.0 - 0.5
    clip = np.empty((frames, size, size, 3), dtype=np.float64)
    for f in range(frames):
        u = f / max(frames - 1, 1)
        pos = lo + u * (hi - lo)
        if direction == "right":
            cy, cx = center, pos
        elif direction == "left":
            cy, cx = center, hi - u * (hi - lo)
        elif direction == "down":
            cy, cx = pos, center
        elif direction == "up":
            cy, cx = hi - u * (hi - lo), center
        else:
            raise ValidationError(f"unknown direction {direction!r}")
        clip[f] = draw_square(blank_frame(size), cy, cx, half, color)
    return clip


def falling_ball_clip(frames: int, size: int, descending: bool = True, **scene_kwargs) -> np.ndarray:
    """Ball descending onto (or rising from) the ground strip."""
    clip = np.empty((frames, size, size, 3), dtype=np.float64)
    for f in range(frames):
        u = f / max(frames - 1, 1)
        drop = u if descending else 1.0 - u
        clip[f] = render_ball_scene(size, drop, **scene_kwargs)
    return clip


def make_moving_square_set(frames: int = 16, size: int = 32) -> list[tuple[np.ndarray, str]]:
    """The fixed synthetic pre-training set: four colored squares, one per
    direction, with direction words in the captions."""
    return [
        (moving_square_clip(frames, size, "right", RED), "a red square sliding right across the frame"),
        (moving_square_clip(frames, size, "left", GREEN), "a green square sliding left across the frame"),
        (moving_square_clip(frames, size, "down", WHITE), "a white square falling down the frame"),
        (moving_square_clip(frames, size, "up", BLUE), "a blue square rising up the frame"),
    ]


def make_scene_set(frames: int = 16, size: int = 32) -> list[tuple[np.ndarray, str]]:
    """Pre-training mix for the end-to-end pipeline: ball scenes plus the
    moving squares, captioned with the same vocabulary the procedural
    backend uses."""
    clips = [
        (falling_ball_clip(frames, size, descending=True),
         "a bright ball falling from high in the sky down to the ground"),
        (falling_ball_clip(frames, size, descending=False),
         "a bright ball rising up from the ground into the sky"),
    ]
    clips.extend(make_moving_square_set(frames, size))
    return clips


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float frame to 8-bit pixels."""
    return np.clip(np.round((np.clip(frame, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_uint8` up to quantization."""
    return image.astype(np.float64) / 127.5 - 1.0
