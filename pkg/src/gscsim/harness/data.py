"""Procedural subjects: three parametric shape families rendered in two styles.

The cloud style is the reference look; the edge style shifts the palette,
thickens the outline and drops interior details. That gap is what the
alignment stages have to close.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..nn import Vocab, tokenize

CATEGORIES = ("humanoid", "animaloid", "buildingoid")
COLORS = ("red", "green", "blue", "yellow")
TEXTURES = ("plain", "striped", "dotted")
BACKGROUNDS = ("light", "dark")
STYLES = ("cloud", "edge")

VOCAB = Vocab(CATEGORIES + COLORS + TEXTURES + BACKGROUNDS)

PALETTES = {
    "cloud": {"red": (0.85, 0.15, 0.15), "green": (0.15, 0.7, 0.2), "blue": (0.15, 0.3, 0.9),
              "yellow": (0.95, 0.85, 0.1)},
    "edge": {"red": (0.75, 0.35, 0.55), "green": (0.45, 0.75, 0.55), "blue": (0.35, 0.55, 0.75),
             "yellow": (0.8, 0.65, 0.35)},
}
BACKGROUND_LEVELS = {"light": 0.85, "dark": 0.15}


@dataclass(frozen=True)
class SubjectSpec:
    category: str
    color: str
    texture: str = "plain"
    background: str = "light"

    def __post_init__(self):
        for value, allowed in ((self.category, CATEGORIES), (self.color, COLORS), (self.texture, TEXTURES),
                               (self.background, BACKGROUNDS)):
            if value not in allowed:
                raise ValueError(f"{value!r} is not one of {allowed}")

    @property
    def prompt(self) -> str:
        return f"{self.category} {self.color} {self.texture} {self.background}"

    def tokens(self) -> list[int]:
        return tokenize(self.prompt, VOCAB)


@dataclass(frozen=True)
class StyleParams:
    palette: str
    outline: int
    details: bool


STYLE_PARAMS = {"cloud": StyleParams("cloud", 1, True), "edge": StyleParams("edge", 2, False)}

# one subject per category, used by the alignment experiments
SUBJECTS = (
    SubjectSpec("humanoid", "red", "striped", "light"),
    SubjectSpec("animaloid", "blue", "dotted", "dark"),
    SubjectSpec("buildingoid", "yellow", "plain", "light"),
)


def all_specs() -> list[SubjectSpec]:
    return [SubjectSpec(*combo) for combo in itertools.product(CATEGORIES, COLORS, TEXTURES, BACKGROUNDS)]


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect(yy, xx, y0, y1, x0, x1):
    return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)


def _shape(category: str, yy, xx, cy, cx, s):
    """Body mask and detail mask for a shape centred at (cy, cx) with scale s."""
    if category == "humanoid":
        head = _ellipse(yy, xx, cy - 8 * s, cx, 3.5 * s, 3.5 * s)
        torso = _rect(yy, xx, cy - 4.5 * s, cy + 4 * s, cx - 4 * s, cx + 4 * s)
        legs = _rect(yy, xx, cy + 4 * s, cy + 11 * s, cx - 3.5 * s, cx - 1 * s) | \
            _rect(yy, xx, cy + 4 * s, cy + 11 * s, cx + 1 * s, cx + 3.5 * s)
        body = head | torso | legs
        detail = _ellipse(yy, xx, cy - 8.5 * s, cx - 1.4 * s, 0.8, 0.8) | _ellipse(yy, xx, cy - 8.5 * s, cx + 1.4 * s, 0.8, 0.8)
    elif category == "animaloid":
        torso = _ellipse(yy, xx, cy, cx, 4.5 * s, 8 * s)
        head = _ellipse(yy, xx, cy - 5 * s, cx + 8 * s, 3.2 * s, 3.2 * s)
        legs = np.zeros_like(torso)
        for dx in (-5.5, -2.5, 2.5, 5.5):
            legs |= _rect(yy, xx, cy + 2 * s, cy + 9 * s, cx + (dx - 0.9) * s, cx + (dx + 0.9) * s)
        body = torso | head | legs
        detail = _ellipse(yy, xx, cy - 5.5 * s, cx + 9 * s, 0.8, 0.8)
    else:
        walls = _rect(yy, xx, cy - 3 * s, cy + 10 * s, cx - 8 * s, cx + 8 * s)
        roof = (yy >= cy - 11 * s) & (yy < cy - 3 * s) & (np.abs(xx - cx) <= (yy - (cy - 11 * s)) * 1.1)
        body = walls | roof
        detail = np.zeros_like(body)
        for wy in (0.0, 5.0):
            for wx in (-4.5, 0.0, 4.5):
                detail |= _rect(yy, xx, cy + (wy - 1.2) * s, cy + (wy + 1.2) * s, cx + (wx - 1.2) * s,
                                cx + (wx + 1.2) * s)
    return body, detail & body


def _dilate(mask: np.ndarray, width: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(width):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def render(spec: SubjectSpec, style: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (3, size, size) image in [0, 1]; position and scale jitter come from ``rng``."""
    if style not in STYLE_PARAMS:
        raise ValueError(f"style must be one of {STYLES}")
    params = STYLE_PARAMS[style]
    k = size / 32.0
    cy = size / 2 + rng.uniform(-2, 2) * k
    cx = size / 2 + rng.uniform(-2, 2) * k
    if spec.category == "animaloid":
        cx -= 1.5 * k
    s = rng.uniform(0.9, 1.1) * k
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    body, detail = _shape(spec.category, yy, xx, cy, cx, s)

    bg = BACKGROUND_LEVELS[spec.background]
    img = np.full((size, size, 3), bg)
    fill = np.array(PALETTES[params.palette][spec.color])
    shade = np.ones((size, size))
    if spec.texture == "striped":
        shade = np.where(((yy + xx) // 3) % 2 == 0, 1.0, 0.55)
    elif spec.texture == "dotted":
        shade = np.where((yy % 4 < 2) & (xx % 4 < 2), 0.5, 1.0)
    img[body] = fill * shade[body][:, None]
    outline_color = 1.0 - bg if spec.background == "dark" else 0.05
    ring = _dilate(body, params.outline) & ~body
    img[ring] = outline_color
    if params.details:
        img[detail] = outline_color
    return np.clip(img.transpose(2, 0, 1), 0.0, 1.0)


def synth_dataset(specs, style: str, count: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """``count`` renders cycling through ``specs``; returns images (N, 3, s, s) and prompt tokens (N, 4)."""
    specs = list(specs)
    if count < 1 or not specs:
        raise ValueError("need at least one spec and count >= 1")
    images = np.empty((count, 3, size, size))
    tokens = np.empty((count, 4), dtype=np.int64)
    for i in range(count):
        spec = specs[i % len(specs)]
        rng = np.random.default_rng([int(seed), i])
        images[i] = render(spec, style, rng, size)
        tokens[i] = spec.tokens()
    return images, tokens
