"""Small 2D geometry kernel used by the LiDAR model and collision checks.

The scalar kernels (``ray_circle_distance``, ``rect_circle_overlaps``) are
numba-compiled so the environment and the training loop can call them from
jitted code; the value types and wrappers below are for Python callers.
Tangent contact counts as a hit in both tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from numba import njit

__all__ = [
    "Vec2",
    "Circle",
    "Rect",
    "Ray",
    "ray_circle_intersect",
    "rect_circle_overlap",
    "ray_circle_distance",
    "rect_circle_overlaps",
]


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite vector ({self.x}, {self.y})")

    def __add__(self, other: Vec2) -> Vec2:
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Vec2) -> Vec2:
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, k: float) -> Vec2:
        return Vec2(self.x * k, self.y * k)

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


@dataclass(frozen=True)
class Circle:
    center: Vec2
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"circle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle given by its center and half extents."""

    center: Vec2
    half_width: float
    half_height: float

    def __post_init__(self):
        if not (self.half_width > 0 and self.half_height > 0):
            raise ValueError("rectangle half extents must be positive")


@dataclass(frozen=True)
class Ray:
    origin: Vec2
    direction: Vec2

    def __post_init__(self):
        if abs(self.direction.norm() - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")

    @classmethod
    def from_angle(cls, origin: Vec2, angle: float) -> Ray:
        """Ray at ``angle`` radians counterclockwise from +y."""
        return cls(origin, Vec2(-math.sin(angle), math.cos(angle)))


@njit(cache=True, nogil=True)
def ray_circle_distance(ox, oy, dx, dy, cx, cy, r):
    """Distance along a unit ray to a circle boundary, ``inf`` on a miss.

    From inside the circle the forward exit distance is returned.
    """
    fx = ox - cx
    fy = oy - cy
    b = fx * dx + fy * dy
    c = fx * fx + fy * fy - r * r
    disc = b * b - c
    if disc < 0.0:
        return math.inf
    sq = math.sqrt(disc)
    t_far = -b + sq
    if t_far < 0.0:
        return math.inf
    t_near = -b - sq
    if t_near >= 0.0:
        return t_near
    return t_far


@njit(cache=True, nogil=True)
def rect_circle_overlaps(rx, ry, hw, hh, cx, cy, r):
    """Closed axis-aligned rectangle vs closed disk."""
    qx = min(max(cx, rx - hw), rx + hw)
    qy = min(max(cy, ry - hh), ry + hh)
    ddx = cx - qx
    ddy = cy - qy
    return ddx * ddx + ddy * ddy <= r * r


def ray_circle_intersect(ray: Ray, circle: Circle) -> float | None:
    t = ray_circle_distance(
        ray.origin.x, ray.origin.y, ray.direction.x, ray.direction.y,
        circle.center.x, circle.center.y, circle.radius,
    )
    return None if math.isinf(t) else t


def rect_circle_overlap(rect: Rect, circle: Circle) -> bool:
    return bool(rect_circle_overlaps(
        rect.center.x, rect.center.y, rect.half_width, rect.half_height,
        circle.center.x, circle.center.y, circle.radius,
    ))
