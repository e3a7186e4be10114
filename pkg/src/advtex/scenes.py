"""Synthetic person scenes: backgrounds, silhouettes, clothing rendering.

Scenes are simple enough to train a small detector in seconds but carry the
structure the benchmark needs: a skin-toned head over a clothed body, capture
metadata (view angle, camera distance), and a clothing region that can wear an
arbitrary texture differentiably.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from .core import BoundingBox, FrameTruth, LabeledBox, PERSON

SCENE_SIZE = 128


def _u(rng: torch.Generator, lo: float, hi: float) -> float:
    return float(torch.empty(1).uniform_(lo, hi, generator=rng))


@dataclass(frozen=True)
class PersonGeometry:
    """Placement and proportions of one rendered person."""

    cx: float
    y0: float
    height: float
    width: float
    skin: tuple[float, float, float]
    angle_deg: float
    distance_m: float

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.cx - self.width / 2.0, self.y0, self.cx + self.width / 2.0, self.y0 + self.height)

    @property
    def head_radius(self) -> float:
        return 0.11 * self.height

    @property
    def clothing_rect(self) -> tuple[float, float, float, float]:
        """Bounding rect (x0, y0, x1, y1) of the clothed body (torso + legs)."""
        top = self.y0 + 2.0 * self.head_radius + 1.0
        return (self.cx - self.width / 2.0, top, self.cx + self.width / 2.0, self.y0 + self.height)


@dataclass(frozen=True)
class Scene:
    """A background plus person placements; rendering adds the clothing."""

    background: torch.Tensor  # (S, S, 3)
    persons: tuple[PersonGeometry, ...]
    angle_deg: float | None = None
    distance_m: float | None = None

    @property
    def size(self) -> int:
        return int(self.background.shape[0])

    def truth(self, image_id: str) -> FrameTruth:
        boxes = tuple(LabeledBox(p.box, PERSON) for p in self.persons)
        return FrameTruth(image_id, boxes, angle_deg=self.angle_deg, distance_m=self.distance_m)


def _coord_grid(size: int) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(size, dtype=torch.float32) + 0.5
    return torch.meshgrid(ys, ys.clone(), indexing="ij")


def _ellipse_alpha(size: int, cx: float, cy: float, ax: float, ay: float) -> torch.Tensor:
    gy, gx = _coord_grid(size)
    d = torch.sqrt(((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2)
    return ((1.0 - d) * min(ax, ay)).clamp(0.0, 1.0)


def _rect_alpha(size: int, x0: float, y0: float, x1: float, y1: float) -> torch.Tensor:
    gy, gx = _coord_grid(size)
    fx = torch.minimum(gx - x0, x1 - gx).clamp(0.0, 1.0)
    fy = torch.minimum(gy - y0, y1 - gy).clamp(0.0, 1.0)
    return fx * fy


def synth_background(size: int, rng: torch.Generator) -> torch.Tensor:
    """Cool-toned gradient with a few soft distractor shapes and mild noise."""

    def cool() -> torch.Tensor:
        return torch.tensor([_u(rng, 0.20, 0.50), _u(rng, 0.30, 0.62), _u(rng, 0.35, 0.70)])

    c00, c01, c10, c11 = cool(), cool(), cool(), cool()
    t = torch.linspace(0.0, 1.0, size)
    gy, gx = torch.meshgrid(t, t.clone(), indexing="ij")
    gy, gx = gy.unsqueeze(-1), gx.unsqueeze(-1)
    img = (1 - gy) * ((1 - gx) * c00 + gx * c01) + gy * ((1 - gx) * c10 + gx * c11)

    for _ in range(int(torch.randint(2, 5, (1,), generator=rng))):
        color = torch.tensor([_u(rng, 0.25, 0.60), _u(rng, 0.30, 0.60), _u(rng, 0.30, 0.65)])
        cx, cy = _u(rng, 0, size), _u(rng, 0, size)
        if _u(rng, 0, 1) < 0.5:
            a = _ellipse_alpha(size, cx, cy, _u(rng, 6, 22), _u(rng, 6, 22))
        else:
            w, h = _u(rng, 8, 30), _u(rng, 8, 30)
            a = _rect_alpha(size, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        img = img * (1 - a.unsqueeze(-1)) + color * a.unsqueeze(-1)

    img = img + 0.015 * torch.randn((size, size, 3), generator=rng)
    return img.clamp(0.0, 1.0)


def width_factor(angle_deg: float) -> float:
    """Apparent body width vs. view angle: frontal widest, profile narrowest."""
    return 0.55 + 0.45 * abs(math.cos(math.radians(angle_deg)))


def person_height(distance_m: float) -> float:
    """Pinhole scaling of apparent height with camera distance."""
    return 140.0 / distance_m


def sample_person(
    rng: torch.Generator,
    size: int,
    angle_deg: float | None = None,
    distance_m: float | None = None,
    near_edge: bool = False,
) -> PersonGeometry:
    angle = _u(rng, -180.0, 180.0) if angle_deg is None else float(angle_deg)
    dist = _u(rng, 2.0, 5.0) if distance_m is None else float(distance_m)
    hp = min(person_height(dist), 0.68 * size)
    wp = hp * 0.40 * width_factor(angle)
    lo, hi = (0.02 * size, 0.98 * size) if near_edge else (0.12 * size, 0.88 * size)
    cx = _u(rng, lo + wp / 2.0, hi - wp / 2.0)
    y0 = _u(rng, 0.03 * size, size - hp - 0.03 * size)
    skin = (_u(rng, 0.72, 0.93), _u(rng, 0.52, 0.72), _u(rng, 0.38, 0.56))
    return PersonGeometry(cx=cx, y0=y0, height=hp, width=wp, skin=skin, angle_deg=angle, distance_m=dist)


def sample_scene(
    rng: torch.Generator,
    size: int = SCENE_SIZE,
    n_persons: tuple[int, int] = (1, 2),
    angle_deg: float | None = None,
    distance_m: float | None = None,
    near_edge: bool = False,
) -> Scene:
    """Background plus 1..n non-overlapping person placements."""
    bg = synth_background(size, rng)
    n = int(torch.randint(n_persons[0], n_persons[1] + 1, (1,), generator=rng))
    persons: list[PersonGeometry] = []
    for _ in range(n):
        for _attempt in range(12):
            g = sample_person(rng, size, angle_deg, distance_m, near_edge)
            if all(_box_iou(g.box, q.box) < 0.05 for q in persons):
                persons.append(g)
                break
    return Scene(bg, tuple(persons), angle_deg=angle_deg, distance_m=distance_m)


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def random_clothing(rng: torch.Generator, size: tuple[int, int] = (24, 24), cells: int = 5) -> torch.Tensor:
    """Smooth random clothing texture: low-res color noise, bilinearly upsampled."""
    base = torch.rand((1, 3, cells, cells), generator=rng) * 0.75 + 0.1
    up = F.interpolate(base, size=size, mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0).clamp(0.0, 1.0)


def person_alphas(size: int, g: PersonGeometry) -> tuple[torch.Tensor, torch.Tensor]:
    """(skin_alpha, clothing_alpha) masks on the scene grid."""
    r = g.head_radius
    head = _ellipse_alpha(size, g.cx, g.y0 + r + 0.5, r, r)
    x0, top, x1, y1 = g.clothing_rect
    torso_bottom = g.y0 + 0.62 * g.height
    torso = _ellipse_alpha(size, g.cx, (top + torso_bottom) / 2.0, (x1 - x0) / 2.0, (torso_bottom - top) / 2.0)
    leg_w = 0.60 * (x1 - x0)
    legs = _rect_alpha(size, g.cx - leg_w / 2.0, torso_bottom - 1.0, g.cx + leg_w / 2.0, y1)
    cloth = torch.maximum(torso, legs)
    skin = (head * (1.0 - cloth)).clamp(0.0, 1.0)
    return skin, cloth


def _clothing_canvas(
    size: int,
    rect: tuple[float, float, float, float],
    texture: torch.Tensor,
    tile: bool,
) -> torch.Tensor:
    """Spread a texture over the clothing rect; zero elsewhere.

    Stretch mode resizes the texture to the rect (bilinear); tile mode repeats
    it at native resolution with toroidal wrap. Both are differentiable in the
    texture pixels.
    """
    x0, y0, x1, y1 = rect
    rx0, ry0 = int(math.floor(x0)), int(math.floor(y0))
    rx1, ry1 = int(math.ceil(x1)), int(math.ceil(y1))
    rx0, ry0 = max(rx0, 0), max(ry0, 0)
    rx1, ry1 = min(rx1, size), min(ry1, size)
    rh, rw = ry1 - ry0, rx1 - rx0
    canvas = torch.zeros((size, size, 3), dtype=texture.dtype)
    if rh < 1 or rw < 1:
        return canvas
    if tile:
        th, tw = int(texture.shape[0]), int(texture.shape[1])
        rows = torch.arange(rh) % th
        cols = torch.arange(rw) % tw
        piece = texture[rows][:, cols]
    else:
        src = texture.permute(2, 0, 1).unsqueeze(0)
        piece = F.interpolate(src, size=(rh, rw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    canvas[ry0:ry1, rx0:rx1] = piece
    return canvas


def render_person(
    image: torch.Tensor,
    g: PersonGeometry,
    clothing: torch.Tensor | None = None,
    rng: torch.Generator | None = None,
    tile: bool = False,
) -> torch.Tensor:
    """Composite one person onto the image; differentiable in `clothing`.

    This is the built-in billboard renderer: the clothing texture is mapped
    onto the body's bounding rect and masked by the body silhouette.
    """
    size = int(image.shape[0])
    if clothing is None:
        if rng is None:
            raise ValueError("random clothing requires a generator")
        rect = g.clothing_rect
        clothing = random_clothing(rng, (max(int(rect[3] - rect[1]), 2), max(int(rect[2] - rect[0]), 2)))
    skin, cloth = person_alphas(size, g)
    canvas = _clothing_canvas(size, g.clothing_rect, clothing.to(image.dtype), tile)
    cloth = cloth.to(image.dtype).unsqueeze(-1)
    skin = skin.to(image.dtype).unsqueeze(-1)
    out = image * (1 - cloth) + canvas * cloth
    skin_color = torch.tensor(g.skin, dtype=image.dtype)
    out = out * (1 - skin) + skin_color * skin
    return out.clamp(0.0, 1.0)


def render_scene(
    scene: Scene,
    clothing: torch.Tensor | list[torch.Tensor | None] | None = None,
    rng: torch.Generator | None = None,
    tile: bool = False,
    renderer=None,
) -> torch.Tensor:
    """Render every person; `clothing` may be shared, per-person, or random (None)."""
    image = scene.background
    draw = renderer if renderer is not None else render_person
    for idx, g in enumerate(scene.persons):
        c = clothing[idx] if isinstance(clothing, list) else clothing
        image = draw(image, g, c, rng=rng, tile=tile)
    return image


def occlude_person(image: torch.Tensor, g: PersonGeometry, rng: torch.Generator, frac: tuple[float, float] = (0.1, 0.3)) -> torch.Tensor:
    """Benign occluder: a smooth random square over the body, sized like a patch."""
    d = g.box.diagonal
    edge = _u(rng, frac[0], frac[1]) * d
    edge = min(edge, 0.9 * min(image.shape[0], image.shape[1]))
    x0, y0, x1, y1 = g.clothing_rect
    cx = _u(rng, min(x0 + edge / 2, g.cx), max(x1 - edge / 2, g.cx))
    cy = _u(rng, min(y0 + edge / 2, (y0 + y1) / 2), max(y1 - edge / 2, (y0 + y1) / 2))
    tex = random_clothing(rng, (max(int(edge), 2), max(int(edge), 2)), cells=4)
    alpha = _rect_alpha(int(image.shape[0]), cx - edge / 2, cy - edge / 2, cx + edge / 2, cy + edge / 2)
    canvas = torch.zeros_like(image)
    rx0, ry0 = max(int(cx - edge / 2) - 1, 0), max(int(cy - edge / 2) - 1, 0)
    rx1 = min(rx0 + tex.shape[1] + 2, image.shape[1])
    ry1 = min(ry0 + tex.shape[0] + 2, image.shape[0])
    th, tw = ry1 - ry0, rx1 - rx0
    src = tex.permute(2, 0, 1).unsqueeze(0)
    piece = F.interpolate(src, size=(th, tw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    canvas[ry0:ry1, rx0:rx1] = piece
    a = alpha.unsqueeze(-1)
    return (image * (1 - a) + canvas * a).clamp(0.0, 1.0)
