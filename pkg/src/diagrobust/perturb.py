"""Degradation kernels and per-question view plans.

Five kernels (Gaussian noise, salt-and-pepper, motion blur, local occlusion,
slight rotation), each at three intensity levels, all pure functions of
``(image, parameter, RandomStream)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .image import Image, RandomStream, derive_stream

__all__ = [
    "DEFAULT_TABLE",
    "DegenerateInputError",
    "IntensityLevel",
    "IntensityTable",
    "InvalidConfigError",
    "PerturbationKind",
    "PerturbationSpec",
    "ViewPlan",
    "ZERO_TABLE",
    "apply_perturbation",
    "build_view_plan",
    "kernel_gaussian_noise",
    "kernel_motion_blur",
    "kernel_occlusion",
    "kernel_rotation",
    "kernel_salt_pepper",
    "line_kernel_offsets",
    "motion_blur_at_angle",
    "occlusion_rectangle",
    "rotate",
]

MIN_VIEWS = 5
MAX_VIEWS = 15
DEFAULT_VIEWS = 10

OCCLUSION_FILL = (128, 128, 128)
ROTATION_FILL = (255, 255, 255)


class DegenerateInputError(ValueError):
    """The image is too small for the requested kernel parameters."""


class InvalidConfigError(ValueError):
    pass


class PerturbationKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SALT_PEPPER = "salt_pepper"
    MOTION_BLUR = "motion_blur"
    OCCLUSION = "occlusion"
    ROTATION = "rotation"


class IntensityLevel(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


KINDS = tuple(PerturbationKind)
LEVELS = tuple(IntensityLevel)


@dataclass(frozen=True)
class IntensityTable:
    """Kernel parameter per (kind, level).

    Units: gaussian sigma in gray levels, salt-pepper hit probability,
    motion-blur length in pixels (odd), occlusion area fraction, rotation
    magnitude in degrees.
    """

    params: dict = field(default_factory=dict)
    validate: bool = True

    def __post_init__(self):
        table = {}
        for kind in KINDS:
            row = self.params.get(kind, self.params.get(kind.value))
            if row is None:
                raise InvalidConfigError(f"intensity table is missing kind {kind.value!r}")
            table[kind] = {
                level: row.get(level, row.get(level.value)) for level in LEVELS
            }
            if any(v is None for v in table[kind].values()):
                raise InvalidConfigError(f"intensity row {kind.value!r} needs low/medium/high")
            values = [table[kind][lv] for lv in LEVELS]
            if self.validate and not values[0] < values[1] < values[2]:
                raise InvalidConfigError(
                    f"{kind.value} parameters must strictly increase low→high, got {values}"
                )
        object.__setattr__(self, "params", table)

    def get(self, kind, level):
        return self.params[PerturbationKind(kind)][IntensityLevel(level)]

    def to_dict(self) -> dict:
        return {k.value: {lv.value: v for lv, v in row.items()} for k, row in self.params.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "IntensityTable":
        return cls(params=data)

    @classmethod
    def uniform(cls, values: dict) -> "IntensityTable":
        """Table whose three levels share one value per kind (no ordering check)."""
        return cls(
            params={k: {lv: values[k] for lv in LEVELS} for k in values},
            validate=False,
        )


DEFAULT_TABLE = IntensityTable(
    params={
        PerturbationKind.GAUSSIAN_NOISE: {"low": 10.0, "medium": 20.0, "high": 35.0},
        PerturbationKind.SALT_PEPPER: {"low": 0.02, "medium": 0.05, "high": 0.10},
        PerturbationKind.MOTION_BLUR: {"low": 5, "medium": 9, "high": 15},
        PerturbationKind.OCCLUSION: {"low": 0.05, "medium": 0.10, "high": 0.20},
        PerturbationKind.ROTATION: {"low": 2.0, "medium": 5.0, "high": 8.0},
    }
)

# Every kernel is the identity at these parameters.
ZERO_TABLE = IntensityTable.uniform(
    {
        PerturbationKind.GAUSSIAN_NOISE: 0.0,
        PerturbationKind.SALT_PEPPER: 0.0,
        PerturbationKind.MOTION_BLUR: 1,
        PerturbationKind.OCCLUSION: 0.0,
        PerturbationKind.ROTATION: 0.0,
    }
)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    intensity: IntensityLevel
    master_seed: int
    question_id: str
    view_index: int

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        object.__setattr__(self, "intensity", IntensityLevel(self.intensity))
        if self.view_index < 1:
            raise ValueError("view_index 0 is reserved for the clean image")

    @property
    def lineage(self) -> tuple:
        return (self.master_seed, self.question_id, self.view_index)

    def stream(self) -> RandomStream:
        return derive_stream(*self.lineage)

    def to_dict(self) -> dict:
        return {
            "view_index": self.view_index,
            "kind": self.kind.value,
            "intensity": self.intensity.value,
            "lineage": {
                "master_seed": self.master_seed,
                "question_id": self.question_id,
                "view_index": self.view_index,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PerturbationSpec":
        lin = data["lineage"]
        return cls(
            kind=data["kind"],
            intensity=data["intensity"],
            master_seed=int(lin["master_seed"]),
            question_id=lin["question_id"],
            view_index=int(lin["view_index"]),
        )


@dataclass(frozen=True)
class ViewPlan:
    question_id: str
    specs: tuple

    @property
    def n_views(self) -> int:
        return len(self.specs)

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "views": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, data: dict) -> "ViewPlan":
        return cls(
            question_id=data["question_id"],
            specs=tuple(PerturbationSpec.from_dict(v) for v in data["views"]),
        )


def build_view_plan(question_id: str, master_seed: int, n_views: int = DEFAULT_VIEWS) -> ViewPlan:
    """Coverage-first plan over the 5x3 (kind, level) grid.

    One level is drawn for each kind (kinds visited in a shuffled order), then
    the remaining views are drawn without replacement from the unused cells.
    The plan stream uses lineage view index 0, which no kernel ever consumes.
    """
    if not MIN_VIEWS <= n_views <= MAX_VIEWS:
        raise InvalidConfigError(
            f"n_views must be in [{MIN_VIEWS}, {MAX_VIEWS}] (5 kinds x 3 levels), got {n_views}"
        )
    rng = derive_stream(master_seed, question_id, 0)
    cells = []
    for k in rng.permutation(len(KINDS)):
        cells.append((KINDS[k], LEVELS[rng.integers(len(LEVELS))]))
    unused = [(k, lv) for k in KINDS for lv in LEVELS if (k, lv) not in cells]
    for i in rng.permutation(len(unused))[: n_views - len(KINDS)]:
        cells.append(unused[i])
    specs = tuple(
        PerturbationSpec(kind, level, master_seed, question_id, idx)
        for idx, (kind, level) in enumerate(cells, start=1)
    )
    return ViewPlan(question_id=question_id, specs=specs)


# Kernels ------------------------------------------------------------------------


def _to_image(values: np.ndarray) -> Image:
    return Image(np.clip(np.rint(values), 0, 255).astype(np.uint8))


def kernel_gaussian_noise(img: Image, sigma: float, rng: RandomStream) -> Image:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    noise = rng.normal(img.array.shape) * sigma
    return _to_image(img.array.astype(np.float64) + noise)


def kernel_salt_pepper(img: Image, p: float, rng: RandomStream) -> Image:
    if not 0 <= p <= 1:
        raise ValueError("p must be in [0, 1]")
    n = img.width * img.height
    hit = rng.random(n) < p
    white = rng.random(n) < 0.5
    out = img.array.copy().reshape(n, 3)
    out[hit & white] = 255
    out[hit & ~white] = 0
    return Image(out.reshape(img.array.shape))


def line_kernel_offsets(length: int, angle_deg: float) -> list[tuple[int, int]]:
    """``(dy, dx)`` cells of a length-``length`` line through the origin.

    The line is stepped one pixel at a time along its dominant axis, so it
    always covers exactly ``length`` distinct cells and is point-symmetric.
    """
    half = (length - 1) // 2
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cells = []
    for k in range(-half, half + 1):
        if abs(c) >= abs(s):
            dx, dy = k, -k * s / c
        else:
            dx, dy = k * c / s, -k
        cells.append((int(np.rint(dy)), int(np.rint(dx))))
    return cells


def motion_blur_at_angle(img: Image, length: int, angle_deg: float) -> Image:
    """Mean over a line kernel with edge-replicated borders."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"blur length must be a positive odd integer, got {length}")
    if length > min(img.width, img.height):
        raise DegenerateInputError(
            f"blur length {length} exceeds image extent {img.width}x{img.height}"
        )
    if length == 1:
        return img
    half = (length - 1) // 2
    padded = np.pad(img.array.astype(np.int32), ((half, half), (half, half), (0, 0)), mode="edge")
    h, w = img.height, img.width
    acc = np.zeros((h, w, 3), dtype=np.int32)
    for dy, dx in line_kernel_offsets(length, angle_deg):
        acc += padded[half + dy : half + dy + h, half + dx : half + dx + w]
    return _to_image(acc / length)


def kernel_motion_blur(img: Image, length: int, rng: RandomStream) -> Image:
    """Line blur at an angle drawn uniformly from [0, 180) degrees."""
    angle = rng.uniform(0.0, 180.0)
    return motion_blur_at_angle(img, int(length), angle)


def occlusion_rectangle(width: int, height: int, area_fraction: float, rng: RandomStream):
    """Rectangle ``(x0, y0, w, h)`` covering ``round(area_fraction*W*H)`` pixels.

    Aspect ratio w/h is drawn uniformly from [0.5, 2.0]; the position is
    uniform over all placements that fit. Returns ``None`` for zero area.
    """
    if not 0 <= area_fraction < 1:
        raise ValueError("area_fraction must be in [0, 1)")
    if area_fraction == 0:
        return None
    if width < 4 or height < 4:
        raise DegenerateInputError(f"occlusion needs an image of at least 4x4, got {width}x{height}")
    target = round(area_fraction * width * height)
    if target < 1:
        raise DegenerateInputError(
            f"area fraction {area_fraction} rounds to an empty rectangle on {width}x{height}"
        )
    aspect = rng.uniform(0.5, 2.0)
    h = min(height, max(1, round(math.sqrt(target / aspect))))
    w = min(width, max(1, round(target / h)))
    if w == width:
        h = min(height, max(1, round(target / w)))
    x0 = rng.integers(width - w + 1)
    y0 = rng.integers(height - h + 1)
    return (x0, y0, w, h)


def kernel_occlusion(img: Image, area_fraction: float, rng: RandomStream) -> Image:
    rect = occlusion_rectangle(img.width, img.height, area_fraction, rng)
    if rect is None:
        return img
    x0, y0, w, h = rect
    out = img.array.copy()
    out[y0 : y0 + h, x0 : x0 + w] = OCCLUSION_FILL
    return Image(out)


def rotate(img: Image, angle_deg: float, fill=ROTATION_FILL) -> Image:
    """Rotate about the image centre with bilinear sampling on a fixed canvas.

    Positive angles turn the content counter-clockwise on screen. Samples
    outside the source read ``fill``.
    """
    if angle_deg == 0:
        return img
    h, w = img.height, img.width
    src = np.empty((h + 2, w + 2, 3), dtype=np.float64)
    src[...] = np.asarray(fill, dtype=np.float64)
    src[1:-1, 1:-1] = img.array
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output (x, y) samples the source at R(-theta) in image coords (y down)
    dx, dy = xs - cx, ys - cy
    sx = c * dx - s * dy + cx + 1.0
    sy = s * dx + c * dy + cy + 1.0
    sx = np.clip(sx, 0.0, w + 1.0)
    sy = np.clip(sy, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x0 + 1] * fx
    bottom = src[y0 + 1, x0] * (1 - fx) + src[y0 + 1, x0 + 1] * fx
    return _to_image(top * (1 - fy) + bottom * fy)


def kernel_rotation(img: Image, max_degrees: float, rng: RandomStream) -> Image:
    """Rotate by ``±max_degrees``; the sign is drawn from ``rng``."""
    if not 0 <= max_degrees < 45:
        raise ValueError("max_degrees must be in [0, 45)")
    sign = -1.0 if rng.random() < 0.5 else 1.0
    return rotate(img, sign * max_degrees)


_KERNELS = {
    PerturbationKind.GAUSSIAN_NOISE: kernel_gaussian_noise,
    PerturbationKind.SALT_PEPPER: kernel_salt_pepper,
    PerturbationKind.MOTION_BLUR: kernel_motion_blur,
    PerturbationKind.OCCLUSION: kernel_occlusion,
    PerturbationKind.ROTATION: kernel_rotation,
}


def apply_perturbation(img: Image, spec: PerturbationSpec, table: IntensityTable = DEFAULT_TABLE) -> Image:
    param = table.get(spec.kind, spec.intensity)
    return _KERNELS[spec.kind](img, param, spec.stream())
