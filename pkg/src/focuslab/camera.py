"""Virtual camera: focal stacks, object motion and capture at a commanded focus.

A capture at command ``f`` returns the stack frame nearest to
``clamp(f) + offset`` where ``offset`` is the accumulated z-motion of the
object, translated by the accumulated xy-motion.
"""
import csv
import dataclasses
from dataclasses import dataclass, field
import math
import os

import numpy as np
from PIL import Image

from . import _kernels
from .metrics import best_focus_index, sharpness_curve, tenengrad
from .optics import LensConfig, ObjectPose, apply_defocus, coc_radius_px, psf_kernel


class StackFormatError(ValueError):
    """A focal-stack directory is malformed."""


class RangeError(ValueError):
    """Focus positions fall outside the lens range."""


@dataclass(frozen=True, eq=False)
class FocalStack:
    frames: np.ndarray                 # (n, H, W) float64 in [0, 1]
    focus_positions_dpt: np.ndarray    # (n,) strictly increasing
    object_mask: np.ndarray            # (H, W) in [0, 1]
    best_index: int = field(init=False)
    sharpness: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        pos = np.asarray(self.focus_positions_dpt, dtype=np.float64)
        mask = np.asarray(self.object_mask, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError("frames must be a stack of 2-D images")
        if frames.shape[0] < 2 or pos.shape != (frames.shape[0],):
            raise ValueError("need >= 2 frames and one focus position per frame")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("focus positions must be strictly increasing")
        if mask.shape != frames.shape[1:]:
            raise ValueError("mask and frames differ in size")
        for name, val in (("frames", frames), ("focus_positions_dpt", pos), ("object_mask", mask)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        curve = sharpness_curve(frames, mask)
        curve.setflags(write=False)
        object.__setattr__(self, "sharpness", curve)
        object.__setattr__(self, "best_index", best_focus_index(self, mask))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def best_focus_dpt(self):
        return float(self.focus_positions_dpt[self.best_index])

    @property
    def spacing_dpt(self):
        pos = self.focus_positions_dpt
        return float((pos[-1] - pos[0]) / (len(pos) - 1))

    def nearest_index(self, focus_dpt):
        """Nearest stack position; exact ties go to the lower index."""
        pos = self.focus_positions_dpt
        k = int(np.searchsorted(pos, focus_dpt))
        if k <= 0:
            return 0
        if k >= len(pos):
            return len(pos) - 1
        return k - 1 if focus_dpt - pos[k - 1] <= pos[k] - focus_dpt else k

    def equals(self, other):
        return (np.array_equal(self.frames, other.frames)
                and np.array_equal(self.focus_positions_dpt, other.focus_positions_dpt)
                and np.array_equal(self.object_mask, other.object_mask)
                and self.best_index == other.best_index)


def uniform_positions(lens, n=80):
    return np.linspace(lens.focus_min_dpt, lens.focus_max_dpt, n)


def synthesize_stack(sharp_image, mask, lens, obj, positions_dpt):
    """Render one defocused frame per focus position from a sharp image."""
    sharp = np.asarray(sharp_image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if sharp.shape != mask.shape or sharp.ndim != 2:
        raise ValueError("sharp image and mask must be 2-D and the same size")
    pos = np.asarray(positions_dpt, dtype=np.float64)
    if pos.size and (pos.min() < lens.focus_min_dpt or pos.max() > lens.focus_max_dpt):
        raise RangeError(f"focus positions must lie in [{lens.focus_min_dpt}, {lens.focus_max_dpt}] dpt")
    if obj.lateral_x or obj.lateral_y:
        sharp = _kernels.shift_image(sharp, obj.lateral_x, obj.lateral_y)
        mask = _kernels.shift_image(mask, obj.lateral_x, obj.lateral_y)
    frames = [apply_defocus(sharp, psf_kernel(coc_radius_px(lens, f, obj.distance_p))) for f in pos]
    return FocalStack(np.stack(frames), pos, mask)


def synthetic_stack(seed, lens=None, size=64, n_positions=80, in_focus_dpt=None,
                    in_focus_range=(-1.5, 2.5)):
    """Procedural scene rendered into a stack; in-focus position drawn from ``seed``."""
    from .scenes import make_scene

    lens = lens or LensConfig()
    rng = np.random.default_rng([seed, 7])
    if in_focus_dpt is None:
        in_focus_dpt = rng.uniform(*in_focus_range)
    image, mask = make_scene(size, seed)
    obj = ObjectPose(lens.distance_for_focus(in_focus_dpt))
    return synthesize_stack(image, mask, lens, obj, uniform_positions(lens, n_positions))


# ------------------------------------------------------------------ disk format

MANIFEST = "manifest.tsv"
MASK_FILE = "mask.png"


def _to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def quantize(img):
    """Round to the 8-bit grid used on disk."""
    return _to_u8(img).astype(np.float64) / 255.0


def save_stack(stack, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["index", "focus_dpt", "filename"])
        for i, (frame, f) in enumerate(zip(stack.frames, stack.focus_positions_dpt)):
            name = f"frame_{i:03d}.png"
            Image.fromarray(_to_u8(frame), mode="L").save(os.path.join(path, name))
            w.writerow([i, repr(float(f)), name])
    Image.fromarray(_to_u8(stack.object_mask), mode="L").save(os.path.join(path, MASK_FILE))


def _read_gray(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except FileNotFoundError:
        raise StackFormatError(f"missing image file: {path}") from None
    except OSError as exc:
        raise StackFormatError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def load_stack(path):
    """Read a focal-stack directory; ``best_index`` is recomputed."""
    manifest = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest):
        raise StackFormatError(f"missing {MANIFEST} in {path}")
    rows = []
    with open(manifest, newline="") as fh:
        rd = csv.reader(fh, delimiter="\t")
        header = next(rd, None)
        if header != ["index", "focus_dpt", "filename"]:
            raise StackFormatError(f"{manifest}: header must be index<TAB>focus_dpt<TAB>filename")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise StackFormatError(f"{manifest}:{lineno}: expected 3 columns")
            try:
                rows.append((float(row[1]), row[2], lineno))
            except ValueError:
                raise StackFormatError(f"{manifest}:{lineno}: bad focus value {row[1]!r}") from None
    if len(rows) < 2:
        raise StackFormatError(f"{manifest}: need at least 2 frames")
    focus = [r[0] for r in rows]
    for (a, _, _), (b, _, ln) in zip(rows, rows[1:]):
        if not b > a:
            raise StackFormatError(f"{manifest}:{ln}: focus_dpt not strictly increasing ({a} then {b})")
    frames = [_read_gray(os.path.join(path, name)) for _, name, _ in rows]
    shape = frames[0].shape
    for (_, name, _), fr in zip(rows, frames):
        if fr.shape != shape:
            raise StackFormatError(f"{name}: size {fr.shape} differs from {shape}")
    mask_path = os.path.join(path, MASK_FILE)
    if os.path.exists(mask_path):
        mask = _read_gray(mask_path)
        if mask.shape != shape:
            raise StackFormatError(f"{MASK_FILE}: size {mask.shape} differs from {shape}")
    else:
        mask = np.ones(shape)
    return FocalStack(np.stack(frames), np.array(focus), mask)


# ------------------------------------------------------------------ motion

MOTION_KINDS = ("static", "linear", "swing", "random")


@dataclass(frozen=True)
class MotionModel:
    """Per-step object motion: (dx, dy) in pixels, dz in diopters.

    linear uses ``velocity``; swing uses ``amplitude`` and ``period``;
    random draws uniform steps bounded by ``max_step`` from ``rng_seed``.
    """

    kind: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    period: float = 20.0
    max_step: tuple = (0.0, 0.0, 0.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}; expected one of {MOTION_KINDS}")
        if not self.period > 0:
            raise ValueError("swing period must be > 0")
        if any(m < 0 for m in self.max_step):
            raise ValueError("random step bounds must be >= 0")


def swing_position(motion, t):
    w = 2.0 * math.pi * t / motion.period
    return tuple(a * math.sin(w) for a in motion.amplitude)


def step_motion(motion, t):
    """Displacement ``(dx, dy, dz)`` applied between capture t and t+1."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if motion.kind == "static":
        return (0.0, 0.0, 0.0)
    if motion.kind == "linear":
        return tuple(float(v) for v in motion.velocity)
    if motion.kind == "swing":
        a, b = swing_position(motion, t), swing_position(motion, t + 1)
        return tuple(y - x for x, y in zip(a, b))
    rng = np.random.default_rng([motion.rng_seed, t])
    u = rng.uniform(-1.0, 1.0, size=3)
    return tuple(float(x * m) for x, m in zip(u, motion.max_step))


# ------------------------------------------------------------------ episodes

@dataclass(frozen=True, eq=False)
class EpisodeState:
    stack: FocalStack
    motion: MotionModel
    lens: LensConfig
    t: int = 0
    current_focus_dpt: float = 0.0
    accumulated_offset_dpt: float = 0.0
    accumulated_shift: tuple = (0.0, 0.0)
    last_frame_index: int = -1

    def pixel_shift(self):
        return int(round(self.accumulated_shift[0])), int(round(self.accumulated_shift[1]))

    def current_mask(self):
        dx, dy = self.pixel_shift()
        return _kernels.shift_image(self.stack.object_mask, dx, dy)

    def frame_index_for(self, f_command_dpt):
        return self.stack.nearest_index(self.lens.clamp(f_command_dpt) + self.accumulated_offset_dpt)

    def reachable_indices(self):
        lo = self.frame_index_for(self.lens.focus_min_dpt)
        hi = self.frame_index_for(self.lens.focus_max_dpt)
        return range(lo, hi + 1)

    def best_focus_dpt(self):
        """Command that puts the sharpest frame in view at the current offset."""
        return self.lens.clamp(self.stack.best_focus_dpt - self.accumulated_offset_dpt)


def start_episode(stack, motion=None, lens=None, initial_focus_dpt=None, seed=0):
    """New episode; without ``initial_focus_dpt`` it is drawn uniformly from the lens range."""
    lens = lens or LensConfig()
    motion = motion or MotionModel()
    if initial_focus_dpt is None:
        rng = np.random.default_rng([seed, 1])
        initial_focus_dpt = rng.uniform(lens.focus_min_dpt, lens.focus_max_dpt)
    return EpisodeState(stack, motion, lens, current_focus_dpt=lens.clamp(initial_focus_dpt))


def capture(state, f_command_dpt):
    """Image at the commanded focus plus the successor state."""
    f_cmd = state.lens.clamp(f_command_dpt)
    k = state.frame_index_for(f_cmd)
    dx, dy = state.pixel_shift()
    image = _kernels.shift_image(state.stack.frames[k], dx, dy)
    mx, my, mz = step_motion(state.motion, state.t)
    nxt = dataclasses.replace(
        state,
        t=state.t + 1,
        current_focus_dpt=f_cmd,
        accumulated_offset_dpt=state.accumulated_offset_dpt + mz,
        accumulated_shift=(state.accumulated_shift[0] + mx, state.accumulated_shift[1] + my),
        last_frame_index=k,
    )
    return image, nxt


def masked_sharpness_range(state):
    """Min and max masked Tenengrad over frames reachable at the current offset and shift."""
    mask = state.current_mask()
    dx, dy = state.pixel_shift()
    idx = state.reachable_indices()
    if dx == 0 and dy == 0:
        vals = state.stack.sharpness[idx.start:idx.stop]
    else:
        vals = [tenengrad(_kernels.shift_image(state.stack.frames[k], dx, dy), mask) for k in idx]
    return float(np.min(vals)), float(np.max(vals))
