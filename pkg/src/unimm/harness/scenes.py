"""Procedural shape scenes with captions that parse back to the exact object list."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..latents import MediaSample
from ..training import GenSample, StorySample, UndSample

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.1),
}
CELLS = ("top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom", "bottom-right")
MOTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
NUMBERS = ("none", "one", "two", "three", "four")
RADIUS_FRAC = 0.125  # object half-extent as a fraction of the shorter canvas side


class CaptionError(ValueError):
    """Caption does not follow the scene grammar."""


@dataclass(frozen=True)
class ShapeObject:
    shape: str
    color: str
    cell: int  # 0..8, row-major over a 3x3 grid
    size: float = 1.0

    def phrase(self) -> str:
        return f"{self.color} {self.shape} {CELLS[self.cell]}"


@dataclass
class ShapeScene:
    objects: list
    height: int = 32
    width: int = 32

    def __post_init__(self):
        self.objects = sorted(self.objects, key=lambda o: o.cell)
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("at most one object per grid cell")

    @property
    def caption(self) -> str:
        return " and ".join(o.phrase() for o in self.objects)

    def render(self, offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        return render(self.objects, self.height, self.width, offset)


def cell_center(cell: int, height: int, width: int) -> tuple[float, float]:
    r, c = divmod(cell, 3)
    cy = float(round((2 * r + 1) * height / 6))
    cx = float(round((2 * c + 1) * width / 6))
    return cy, cx


def cell_bounds(cell: int, height: int, width: int) -> tuple[int, int, int, int]:
    r, c = divmod(cell, 3)
    return (round(r * height / 3), round((r + 1) * height / 3), round(c * width / 3), round((c + 1) * width / 3))


def radius(height: int, width: int, size: float = 1.0) -> float:
    return RADIUS_FRAC * min(height, width) * size


def shape_mask(shape: str, cy: float, cx: float, height: int, width: int, size: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    r = radius(height, width, size)
    if shape == "square":
        return (np.abs(dx) <= r - 0.5) & (np.abs(dy) <= r - 0.5)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # apex up, base at the bottom of the bounding box
        return (dy >= -r) & (dy <= r - 0.5) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ValueError(f"unknown shape {shape}")


def render(objects, height: int = 32, width: int = 32, offset=(0.0, 0.0)) -> np.ndarray:
    img = np.zeros((height, width, 3))
    for o in objects:
        cy, cx = cell_center(o.cell, height, width)
        m = shape_mask(o.shape, cy + offset[0], cx + offset[1], height, width, o.size)
        img[m] = COLORS[o.color]
    return img


def parse_caption(caption: str) -> list[ShapeObject]:
    """Inverse of ``ShapeScene.caption``."""
    if not caption.strip():
        raise CaptionError("empty caption")
    objs = []
    for phrase in caption.split(" and "):
        words = phrase.split(" ")
        if len(words) != 3:
            raise CaptionError(f"bad phrase {phrase!r}")
        color, shape, cell = words
        if color not in COLORS or shape not in SHAPES or cell not in CELLS:
            raise CaptionError(f"bad phrase {phrase!r}")
        objs.append(ShapeObject(shape, color, CELLS.index(cell)))
    cells = [o.cell for o in objs]
    if cells != sorted(cells) or len(set(cells)) != len(cells):
        raise CaptionError("objects must be listed in increasing, distinct cell order")
    return objs


def random_scene(rng: np.random.Generator, max_objects: int = 2, height: int = 32, width: int = 32) -> ShapeScene:
    n = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(9, size=n, replace=False)
    objs = [ShapeObject(SHAPES[int(rng.integers(3))], list(COLORS)[int(rng.integers(4))], int(c)) for c in cells]
    return ShapeScene(objs, height, width)


# -- videos ---------------------------------------------------------------------------

@dataclass
class ToyVideoScene:
    scene: ShapeScene
    motion: str
    frames: int = 5

    @property
    def caption(self) -> str:
        return f"{self.scene.caption} moving {self.motion}"

    def render(self) -> np.ndarray:
        dy, dx = MOTIONS[self.motion]
        return np.stack([self.scene.render((k * dy, k * dx)) for k in range(self.frames)])


def _motion_fits(scene: ShapeScene, motion: str, frames: int) -> bool:
    dy, dx = MOTIONS[motion]
    shift = frames - 1
    r = radius(scene.height, scene.width)
    for o in scene.objects:
        cy, cx = cell_center(o.cell, scene.height, scene.width)
        cy, cx = cy + dy * shift, cx + dx * shift
        if cy - r < 0 or cy + r > scene.height or cx - r < 0 or cx + r > scene.width:
            return False
    return True


def random_video(rng: np.random.Generator, frames: int = 5, max_objects: int = 2,
                 height: int = 32, width: int = 32) -> ToyVideoScene:
    while True:
        scene = random_scene(rng, max_objects, height, width)
        ok = [m for m in MOTIONS if _motion_fits(scene, m, frames)]
        if ok:
            return ToyVideoScene(scene, ok[int(rng.integers(len(ok)))], frames)


# -- datasets --------------------------------------------------------------------------------

def question_answer(scene: ShapeScene, rng: np.random.Generator) -> str:
    if rng.random() < 0.25:
        return f"q: how many? a: {NUMBERS[len(scene.objects)]}"
    cell = int(rng.integers(9))
    hit = [o for o in scene.objects if o.cell == cell]
    answer = f"{hit[0].color} {hit[0].shape}" if hit else "nothing"
    return f"q: {CELLS[cell]}? a: {answer}"


@dataclass
class Dataset:
    kind: str
    samples: list
    scenes: list = field(default_factory=list)


def gen_dataset(kind: str, n: int, seed: int, max_objects: int = 2, height: int = 32, width: int = 32,
                frames: int = 5) -> Dataset:
    """Seeded procedural samples of one stream kind (und, gen, video, interleaved)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, ("und", "gen", "video", "interleaved").index(kind)])
    samples, scenes = [], []
    for _ in range(n):
        if kind == "video":
            v = random_video(rng, frames, max_objects, height, width)
            samples.append(GenSample(v.caption, MediaSample("video", v.render())))
            scenes.append(v)
            continue
        if kind == "interleaved":
            story = [random_scene(rng, max_objects, height, width) for _ in range(int(rng.integers(2, 4)))]
            samples.append(story_sample(story))
            scenes.append(story)
            continue
        scene = random_scene(rng, max_objects, height, width)
        scenes.append(scene)
        media = MediaSample.image(scene.render())
        if kind == "gen":
            samples.append(GenSample(scene.caption, media))
        elif kind == "und":
            samples.append(UndSample(media, question_answer(scene, rng)))
        else:
            raise ValueError(f"unknown dataset kind {kind}")
    return Dataset(kind, samples, scenes)


def story_sample(scenes: list[ShapeScene]) -> StorySample:
    segs: list = []
    for k, sc in enumerate(scenes):
        segs.append(f"first {sc.caption}." if k == 0 else f" then {sc.caption}.")
        segs.append(MediaSample.image(sc.render()))
    segs.append(" the end.")
    return StorySample(segs)


def perturb_caption(scene: ShapeScene, rng: np.random.Generator) -> str:
    """A caption that differs from the scene in exactly one attribute."""
    objs = list(scene.objects)
    i = int(rng.integers(len(objs)))
    o = objs[i]
    free = [c for c in range(9) if c not in {p.cell for p in objs}]
    choice = int(rng.integers(4))
    if choice == 0:
        objs[i] = replace(o, color=[c for c in COLORS if c != o.color][int(rng.integers(3))])
    elif choice == 1:
        objs[i] = replace(o, shape=[s for s in SHAPES if s != o.shape][int(rng.integers(2))])
    elif choice == 2 and free:
        objs[i] = replace(o, cell=free[int(rng.integers(len(free)))])
    elif free and (len(objs) == 1 or rng.random() < 0.5):
        objs.append(ShapeObject(SHAPES[int(rng.integers(3))], list(COLORS)[int(rng.integers(4))],
                                free[int(rng.integers(len(free)))]))
    else:
        objs.pop(i)
        if not objs:
            objs = [replace(o, color=[c for c in COLORS if c != o.color][0])]
    return ShapeScene(objs, scene.height, scene.width).caption
