"""Eye-in-hand rendering of the shape-sorting scene.

The camera sits ``camera_offset`` above the tool centre point, looks straight
down and turns with the tool yaw. Its image axes relative to the tool frame
are x_cam = -x_tool, y_cam = +y_tool, z_cam = -z_tool (pointing at the table).
Pieces, the sorter box and the two fingers are extruded convex polygons,
rasterized with a per-pixel depth test.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..demomodel import Frame, Gripper
from .config import SimConfig
from .dynamics import object_polygon
from .state import SimState, Status

TABLE = -1
BOX = 100
FINGER = 101

FINGER_SIZE = (0.012, 0.008)  # along tool x, tool y
FINGER_HEIGHT = 0.05
FINGER_GAP = {Gripper.OPEN: 0.034, Gripper.CLOSED: 0.027}


@dataclass(frozen=True)
class Camera:
    center: np.ndarray  # world position
    yaw: float

    @property
    def axes(self) -> np.ndarray:
        """Rows are the camera x, y, z axes in world coordinates."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[-c, -s, 0.0], [-s, c, 0.0], [0.0, 0.0, -1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.axes.T

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return np.asarray(points_cam, dtype=float) @ self.axes + self.center


def camera_for(tool, config: SimConfig) -> Camera:
    tx, ty, tz, tt = tool
    return Camera(np.array([tx, ty, tz + config.camera_offset]), float(tt))


@lru_cache(maxsize=8)
def _ray_grid(h: int, w: int, fx: float, fy: float, cx: float, cy: float):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return (xs - cx) / fx, (ys - cy) / fy


@dataclass(frozen=True, eq=False)
class RenderBuffers:
    rgb: np.ndarray
    depth: np.ndarray  # float64 camera-z distance
    ids: np.ndarray    # entity per pixel: object index, BOX, FINGER or TABLE
    camera: Camera

    def world_points(self, config: SimConfig) -> np.ndarray:
        k = config.intrinsics
        rx, ry = _ray_grid(config.height, config.width, k.fx, k.fy, k.cx, k.cy)
        cam = np.stack([rx * self.depth, ry * self.depth, self.depth], axis=-1)
        return self.camera.to_world(cam)


@lru_cache(maxsize=8)
def _pixel_grid(h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w].astype(float)
    grid = np.stack([u, v, np.ones_like(u)])
    grid.flags.writeable = False
    return grid


class _Canvas:
    """Z-buffered rasterizer for vertical prisms seen by a downward camera.

    For a camera looking straight down, the world xy hit by a pixel ray at a
    fixed depth is affine in the pixel coordinates (u, v). Every edge test
    of a horizontal face and every ray/side-face parameter is therefore an
    affine function of (u, v): one row of coefficients per edge, evaluated
    for all edges with a single matrix product over the bounding box.
    """

    def __init__(self, config: SimConfig, camera: Camera):
        h, w = config.height, config.width
        k = config.intrinsics
        self.k = k
        self.h, self.w = h, w
        self.cam = camera
        self.grid = _pixel_grid(h, w)
        c, s = math.cos(camera.yaw), math.sin(camera.yaw)
        # world ray direction per unit camera depth: dx = X . (u, v, 1), dy = Y . (u, v, 1)
        self.X = (-c / k.fx, -s / k.fy, c * k.cx / k.fx + s * k.cy / k.fy)
        self.Y = (-s / k.fx, c / k.fy, s * k.cx / k.fx - c * k.cy / k.fy)
        self.cx, self.cy, self.cz = (float(a) for a in camera.center)
        self.c, self.s = c, s
        self.depth = np.full((h, w), self.cz)
        self.ids = np.full((h, w), TABLE, dtype=np.int16)
        self.rgb = np.empty((h, w, 3))
        self.rgb[:] = config.table_color

    def bbox(self, poly: list, z0: float, z1: float):
        d1 = self.cz - z1  # the nearest face has the largest image extent
        d0 = self.cz - z0
        if d1 <= 1e-6:
            return slice(0, self.h), slice(0, self.w)
        c, s, k = self.c, self.s, self.k
        # camera x = -c*dx - s*dy, camera y = -s*dx + c*dy for world offsets (dx, dy)
        xc = [-c * (x - self.cx) - s * (y - self.cy) for x, y in poly]
        yc = [-s * (x - self.cx) + c * (y - self.cy) for x, y in poly]
        lo, hi = min(xc), max(xc)
        us = (k.fx * lo / d1, k.fx * lo / d0, k.fx * hi / d1, k.fx * hi / d0)
        lo, hi = min(yc), max(yc)
        vs = (k.fy * lo / d1, k.fy * lo / d0, k.fy * hi / d1, k.fy * hi / d0)
        x0 = max(0, math.floor(min(us) + k.cx))
        x1 = min(self.w, math.ceil(max(us) + k.cx) + 1)
        y0 = max(0, math.floor(min(vs) + k.cy))
        y1 = min(self.h, math.ceil(max(vs) + k.cy) + 1)
        if x0 >= x1 or y0 >= y1:
            return None
        return slice(y0, y1), slice(x0, x1)

    def _edge_rows(self, poly: list, depth: float) -> list:
        """Inside test of each edge of a face at ``depth``, as affine rows.

        Edge a->b keeps points with (b-a) x (p-a) >= 0, p = C + depth * (dx, dy).
        """
        X, Y = self.X, self.Y
        rows = []
        for (ax, ay), (bx, by) in zip(poly, poly[1:] + poly[:1]):
            ex, ey = bx - ax, by - ay
            base = ex * (self.cy - ay) - ey * (self.cx - ax)
            rows.append((depth * (ex * Y[0] - ey * X[0]), depth * (ex * Y[1] - ey * X[1]),
                         depth * (ex * Y[2] - ey * X[2]) + base))
        return rows

    def prism(self, poly: np.ndarray, z0: float, z1: float, ent: int, color, side_color,
              decals=()):
        poly = [tuple(p) for p in np.asarray(poly, dtype=float).tolist()]
        sl = self.bbox(poly, z0, z1)
        if sl is None:
            return
        zbuf = self.depth[sl]
        ids = self.ids[sl]
        rgb = self.rgb[sl]
        shape = zbuf.shape
        grid = self.grid[:, sl[0], sl[1]].reshape(3, -1)

        depth = self.cz - z1
        if depth > 0:
            rows = self._edge_rows(poly, depth)
            n = len(rows)
            dpolys = [[tuple(p) for p in np.asarray(d, dtype=float).tolist()] for d, _ in decals]
            for d in dpolys:
                rows += self._edge_rows(d, depth)
            vals = np.array(rows) @ grid
            hit = (vals[:n].min(axis=0) >= 0).reshape(shape)
            hit &= depth < zbuf
            if hit.any():
                zbuf[hit] = depth
                ids[hit] = ent
                rgb[hit] = color
                start = n
                for d, (_, dcolor) in zip(dpolys, decals):
                    ins = (vals[start:start + len(d)].min(axis=0) >= 0).reshape(shape)
                    start += len(d)
                    rgb[hit & ins] = dcolor

        # side faces whose outward normal looks at the camera
        X, Y = self.X, self.Y
        rows, num, start, inv_len2 = [], [], [], []
        for (ax, ay), (bx, by) in zip(poly, poly[1:] + poly[:1]):
            ex, ey = bx - ax, by - ay
            nx, ny = ey, -ex  # outward for counter-clockwise polygons
            k = nx * (ax - self.cx) + ny * (ay - self.cy)
            if k >= 0:
                continue
            rows.append((nx * X[0] + ny * Y[0], nx * X[1] + ny * Y[1], nx * X[2] + ny * Y[2]))
            rows.append((ex * X[0] + ey * Y[0], ex * X[1] + ey * Y[1], ex * X[2] + ey * Y[2]))
            num.append(k)
            start.append((self.cx - ax) * ex + (self.cy - ay) * ey)
            inv_len2.append(1.0 / (ex * ex + ey * ey))
        if not num:
            return
        vals = np.array(rows) @ grid
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.array(num)[:, None] / vals[0::2]
        # rays that never enter the face from outside give t <= 0, inf or nan
        ok = (t >= self.cz - z1) & (t <= self.cz - z0)
        lam = (np.array(start)[:, None] + t * vals[1::2]) * np.array(inv_len2)[:, None]
        ok &= (lam >= 0) & (lam <= 1)
        tmin = np.where(ok, t, np.inf).min(axis=0).reshape(shape)
        hit = tmin < zbuf
        if hit.any():
            zbuf[hit] = tmin[hit]
            ids[hit] = ent
            rgb[hit] = side_color


def inside_convex(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.ones(np.shape(px), dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return inside


def _hole_polygon(config: SimConfig, kind: str) -> np.ndarray:
    sorter = config.sorter
    hx, hy, ht = sorter.hole_pose(kind)
    poly = config.shape(kind).polygon * sorter.hole_scale
    c, s = math.cos(ht), math.sin(ht)
    return poly @ np.array([[c, s], [-s, c]]) + np.array([hx, hy])


def _finger_polygons(tool, gripper: Gripper) -> list[np.ndarray]:
    tx, ty, _, tt = tool
    c, s = math.cos(tt), math.sin(tt)
    rot = np.array([[c, s], [-s, c]])
    hx, hy = FINGER_SIZE[0] / 2, FINGER_SIZE[1] / 2
    gap = FINGER_GAP[gripper]
    out = []
    for side in (-1.0, 1.0):
        oy = side * (gap + hy)
        local = np.array([[-hx, oy - hy], [hx, oy - hy], [hx, oy + hy], [-hx, oy + hy]])
        out.append(local @ rot + np.array([tx, ty]))
    return out


def _shade(color, factor: float):
    return tuple(factor * c for c in color)


def _rasterize(state: SimState, config: SimConfig) -> RenderBuffers:
    cam = camera_for(state.tool, config)
    cv = _Canvas(config, cam)
    sorter = config.sorter
    if sorter is not None:
        decals = [(_hole_polygon(config, h.kind.value), sorter.hole_color) for h in sorter.holes]
        for o in state.objects:
            if o.status == Status.INSERTED:
                decals.append((object_polygon(config, o), config.shape(o.kind).color))
        cv.prism(sorter.polygon, 0.0, sorter.height, BOX, sorter.color,
                 _shade(sorter.color, config.side_shade), decals)
    for i, o in enumerate(state.objects):
        if o.status == Status.INSERTED:
            continue
        shape = config.shape(o.kind)
        cv.prism(object_polygon(config, o), o.z, o.z + shape.height, i, shape.color,
                 _shade(shape.color, config.side_shade))
    if config.show_gripper:
        tz = state.tool[2]
        for poly in _finger_polygons(state.tool, state.gripper):
            cv.prism(poly, tz, tz + FINGER_HEIGHT, FINGER, config.finger_color,
                     _shade(config.finger_color, config.side_shade))
    for a in (cv.rgb, cv.depth, cv.ids):
        a.flags.writeable = False
    return RenderBuffers(cv.rgb, cv.depth, cv.ids, cam)


_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 64


def render_buffers(state: SimState, config: SimConfig) -> RenderBuffers:
    """Rasterize ``state``; results are memoized on (config identity, state)."""
    key = (id(config), state)
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is config:
        _CACHE.move_to_end(key)
        return hit[1]
    buf = _rasterize(state, config)
    _CACHE[key] = (config, buf)
    if len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return buf


def render(state: SimState, config: SimConfig, mask_entities=()) -> Frame:
    """Render an observation. Live frames carry an empty mask; demonstration
    frames pass the entity ids that form the task-relevant foreground."""
    buf = render_buffers(state, config)
    mask = np.isin(buf.ids, list(mask_entities)) if mask_entities else np.zeros(buf.ids.shape, bool)
    return Frame(rgb=buf.rgb, depth=buf.depth, mask=mask, intrinsics=config.intrinsics,
                 tcp_pose=state.tool, gripper=state.gripper, state=state)
