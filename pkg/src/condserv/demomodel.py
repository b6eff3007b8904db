"""Frames, demonstrations and their on-disk directory format.

A demonstration directory holds, per frame ``k``::

    rgb_{k:04}.ppm    binary P6, 8 bit
    depth_{k:04}.raw  row-major float32 little endian, meters
    mask_{k:04}.pgm   binary P5, 0 = background, 255 = foreground

plus a single ``meta.json`` with intrinsics, image size, per-frame tool pose
and gripper command, and the format version.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

FORMAT_VERSION = "1"


class Gripper(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


class DemoFormatError(Exception):
    """Base class for problems reading or writing demonstration directories."""

    def __init__(self, message: str, path: str | Path | None = None):
        self.path = None if path is None else Path(path)
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)


class MissingMeta(DemoFormatError):
    pass


class MissingFile(DemoFormatError):
    pass


class CorruptDepth(DemoFormatError):
    pass


class DimensionMismatch(DemoFormatError):
    pass


class UnknownVersion(DemoFormatError):
    pass


class DemoIOError(DemoFormatError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D observation.

    ``state`` optionally carries the simulator state the frame was rendered
    from; only the oracle flow estimator reads it.
    """

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    tcp_pose: tuple[float, float, float, float]
    gripper: Gripper
    state: Any = field(default=None, repr=False)

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {rgb.shape}")
        if depth.shape != rgb.shape[:2] or mask.shape != rgb.shape[:2]:
            raise ValueError("rgb, depth and mask must share HxW")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "rgb", _frozen(rgb))
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "tcp_pose", tuple(float(v) for v in self.tcp_pose))
        object.__setattr__(self, "gripper", Gripper(self.gripper))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Demonstration:
    id: str
    frames: tuple[Frame, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError("a demonstration needs at least two frames")
        first = frames[0]
        for f in frames[1:]:
            if f.shape != first.shape or f.intrinsics != first.intrinsics:
                raise ValueError("all frames must share image size and intrinsics")
        object.__setattr__(self, "frames", frames)

    @property
    def first(self) -> Frame:
        return self.frames[0]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class DemoSet:
    demos: tuple[Demonstration, ...]

    def __post_init__(self):
        demos = tuple(self.demos)
        if not demos:
            raise ValueError("demo set is empty")
        ids = [d.id for d in demos]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate demo ids: {ids}")
        object.__setattr__(self, "demos", demos)

    def __iter__(self):
        return iter(self.demos)

    def __len__(self) -> int:
        return len(self.demos)

    def __getitem__(self, demo_id: str) -> Demonstration:
        for d in self.demos:
            if d.id == demo_id:
                return d
        raise KeyError(demo_id)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.demos]


# -- netpbm ------------------------------------------------------------------

def _write_netpbm(path: Path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(data, dtype=np.uint8).tobytes())


_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile("missing image file", path) from None
    tokens, pos = [], 0
    for _ in range(4):
        m = _HEADER_TOKEN.match(raw, pos)
        if m is None:
            raise DemoFormatError("truncated netpbm header", path)
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic or tokens[3] != b"255":
        raise DemoFormatError(f"expected 8-bit {magic.decode()} image", path)
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * channels:
        raise DimensionMismatch("image payload size does not match header", path)
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels)) if channels > 1 else arr.reshape((h, w))


# -- frame / demo IO ---------------------------------------------------------

def _frame_meta(frame: Frame) -> dict:
    meta = {"tcp_pose": list(frame.tcp_pose), "gripper": frame.gripper.value}
    if frame.state is not None:
        meta["sim_state"] = frame.state.to_dict()
    return meta


def _write_frame_files(directory: Path, k: int, frame: Frame) -> None:
    rgb8 = np.clip(np.rint(frame.rgb * 255.0), 0, 255).astype(np.uint8)
    _write_netpbm(directory / f"rgb_{k:04}.ppm", b"P6", rgb8)
    (directory / f"depth_{k:04}.raw").write_bytes(frame.depth.astype("<f4").tobytes())
    _write_netpbm(directory / f"mask_{k:04}.pgm", b"P5", frame.mask.astype(np.uint8) * 255)


def _read_frame_files(directory: Path, k: int, width: int, height: int,
                      intrinsics: CameraIntrinsics, fmeta: dict) -> Frame:
    rgb8 = _read_netpbm(directory / f"rgb_{k:04}.ppm", b"P6", 3)
    mask8 = _read_netpbm(directory / f"mask_{k:04}.pgm", b"P5", 1)
    for name, img in (("rgb", rgb8), ("mask", mask8)):
        if img.shape[:2] != (height, width):
            raise DimensionMismatch(f"{name} frame {k} is {img.shape[1]}x{img.shape[0]}, "
                                    f"meta says {width}x{height}", directory)
    depth_path = directory / f"depth_{k:04}.raw"
    try:
        raw = depth_path.read_bytes()
    except FileNotFoundError:
        raise MissingFile("missing depth file", depth_path) from None
    if len(raw) != 4 * width * height:
        raise CorruptDepth(f"depth has {len(raw)} bytes, expected {4 * width * height}", depth_path)
    depth = np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float32)
    state = None
    if "sim_state" in fmeta:
        from .sim.state import SimState
        state = SimState.from_dict(fmeta["sim_state"])
    return Frame(rgb=rgb8.astype(np.float64) / 255.0, depth=depth, mask=mask8 > 127,
                 intrinsics=intrinsics, tcp_pose=tuple(fmeta["tcp_pose"]),
                 gripper=Gripper(fmeta["gripper"]), state=state)


def _write_dir(frames: Sequence[Frame], directory: str | Path, extra: dict) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(frames):
            _write_frame_files(directory, k, frame)
        h, w = frames[0].shape
        meta = {"version": FORMAT_VERSION, "width": w, "height": h,
                "intrinsics": frames[0].intrinsics.to_dict(),
                "frames": [_frame_meta(f) for f in frames], **extra}
        (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    except OSError as exc:
        raise DemoIOError(f"cannot write demonstration: {exc.strerror}", exc.filename or directory) from exc


def _read_dir(directory: str | Path) -> tuple[dict, list[Frame]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise MissingMeta("meta.json not found", directory)
    meta = json.loads(meta_path.read_text())
    if str(meta.get("version")) != FORMAT_VERSION:
        raise UnknownVersion(f"unsupported format version {meta.get('version')!r}", meta_path)
    w, h = int(meta["width"]), int(meta["height"])
    intr = CameraIntrinsics.from_dict(meta["intrinsics"])
    frames = [_read_frame_files(directory, k, w, h, intr, fm) for k, fm in enumerate(meta["frames"])]
    return meta, frames


def save_demo(demo: Demonstration, directory: str | Path) -> None:
    _write_dir(demo.frames, directory, {"id": demo.id})


def load_demo(directory: str | Path) -> Demonstration:
    meta, frames = _read_dir(directory)
    return Demonstration(id=str(meta.get("id", Path(directory).name)), frames=tuple(frames))


def save_frame(frame: Frame, directory: str | Path) -> None:
    """Single-frame variant of the demo layout, used for live observations."""
    _write_dir([frame], directory, {})


def load_frame(directory: str | Path) -> Frame:
    _, frames = _read_dir(directory)
    if len(frames) != 1:
        raise DemoFormatError(f"expected exactly one frame, found {len(frames)}", directory)
    return frames[0]


def load_demo_set(directory: str | Path) -> DemoSet:
    """Load every demonstration subdirectory (one containing meta.json), sorted by name."""
    root = Path(directory)
    subdirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not subdirs:
        raise MissingMeta("no demonstration directories found", root)
    return DemoSet(tuple(load_demo(p) for p in subdirs))
