"""Synthetic multi-chirp range-azimuth scenes, CRUW-layout IO, and windowing.

Directory layout (written and read here):

    <seq>/RADAR_RA_H/<frame:06d>_<chirp>.npy   complex64 (H, W) per chirp,
                                               or real (H, W, 2) accepted on load
    <seq>/annot.txt                            "frame class_name range_bin azimuth_bin"

NPY files use the v1.0 container format.
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import DEFAULT_CLASSES
from .geometry import RadarGrid

RA_SUBDIR = "RADAR_RA_H"
ANNOT_FILE = "annot.txt"
_CHIRP_FILE_RE = re.compile(r"^(\d{6})_(\d+)\.npy$")

DEFAULT_GT_SIGMA = {"pedestrian": 2.0, "cyclist": 3.0, "car": 4.0}


class DataError(ValueError):
    """Raised for malformed or inconsistent on-disk radar data."""


@dataclass
class Annotation:
    frame_index: int
    class_id: int
    range_bin: int
    azimuth_bin: int


@dataclass
class SceneObject:
    """One simulated reflector with a per-frame (range m, azimuth rad) track.

    ``psf_sigma`` overrides the sequence-wide point-spread width, letting
    object classes differ in apparent size the way radar cross-sections do.
    """

    class_id: int
    trajectory: np.ndarray  # (num_frames, 2)
    radial_velocity: float = 0.0
    reflectivity: float = 1.0
    psf_sigma: float | None = None

    def validate(self, grid: RadarGrid, num_frames: int):
        traj = np.asarray(self.trajectory, dtype=np.float64)
        if traj.shape != (num_frames, 2):
            raise DataError(
                f"trajectory shape {traj.shape} does not match (num_frames={num_frames}, 2)"
            )
        r, az = traj[:, 0], traj[:, 1]
        if r.min() < grid.r_min or r.max() > grid.r_max:
            raise DataError(
                f"object range [{r.min():.2f}, {r.max():.2f}] outside radar field "
                f"[{grid.r_min}, {grid.r_max}]"
            )
        half = grid.fov / 2
        if az.min() < -half or az.max() > half:
            raise DataError(
                f"object azimuth [{az.min():.3f}, {az.max():.3f}] outside +-{half:.3f} rad"
            )


@dataclass
class SequenceSpec:
    """Everything needed to render one synthetic sequence deterministically."""

    num_frames: int = 40
    grid: RadarGrid = field(default_factory=RadarGrid)
    chirps: int = 4
    noise_std: float = 0.05
    rng_seed: int = 0
    objects: list[SceneObject] = field(default_factory=list)
    chirp_interval: float = 1e-4   # seconds between the provided chirps
    wavelength: float = 3.9e-3     # 77 GHz band carrier
    psf_sigma: float = 1.5         # point-spread width in bins
    frame_rate: float = 30.0

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def width(self) -> int:
        return self.grid.width

    def validate(self) -> "SequenceSpec":
        for obj in self.objects:
            obj.validate(self.grid, self.num_frames)
        if self.num_frames < 1:
            raise DataError(f"num_frames={self.num_frames} must be >= 1")
        return self


def render_rf_frame(spec: SequenceSpec, t: int) -> np.ndarray:
    """Render the complex RA image for every chirp of frame ``t``.

    Each object adds a complex 2D Gaussian point-spread at its bin location;
    chirp k carries the Doppler phase exp(i*2pi*(2*v_r/lambda)*k*dt). Circular
    complex white noise of total std ``noise_std`` is added on top. The result
    is deterministic given (rng_seed, t) and independent of call order.

    Returns complex64 array of shape (chirps, H, W).
    """
    if t >= spec.num_frames:
        raise DataError(f"frame index {t} out of range (num_frames={spec.num_frames})")
    grid = spec.grid
    h, w = grid.height, grid.width
    ri = np.arange(h, dtype=np.float64)[:, None]
    ai = np.arange(w, dtype=np.float64)[None, :]
    frame = np.zeros((spec.chirps, h, w), dtype=np.complex128)
    for obj in spec.objects:
        r_m, az = obj.trajectory[t]
        rb = grid.bin_of_range(float(r_m))
        ab = grid.bin_of_azimuth(float(az))
        sigma = obj.psf_sigma if obj.psf_sigma is not None else spec.psf_sigma
        blob = obj.reflectivity * np.exp(
            -((ri - rb) ** 2 + (ai - ab) ** 2) / (2 * sigma**2)
        )
        doppler = 2 * obj.radial_velocity / spec.wavelength
        for k in range(spec.chirps):
            phase = np.exp(1j * 2 * np.pi * doppler * k * spec.chirp_interval)
            frame[k] += blob * phase
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.rng_seed, t])
        noise = rng.standard_normal(frame.shape) + 1j * rng.standard_normal(frame.shape)
        frame += noise * (spec.noise_std / math.sqrt(2))
    return frame.astype(np.complex64)


def annotations_for(spec: SequenceSpec) -> list[Annotation]:
    """Integer-bin annotations for every object in every frame."""
    grid = spec.grid
    out = []
    for t in range(spec.num_frames):
        for obj in spec.objects:
            r_m, az = obj.trajectory[t]
            rb = int(round(grid.bin_of_range(float(r_m))))
            ab = int(round(grid.bin_of_azimuth(float(az))))
            rb = min(max(rb, 0), grid.height - 1)
            ab = min(max(ab, 0), grid.width - 1)
            out.append(Annotation(t, obj.class_id, rb, ab))
    return out


def render_sequence(spec: SequenceSpec) -> tuple[np.ndarray, list[Annotation]]:
    """Render all frames: complex64 (T, chirps, H, W) plus annotations."""
    spec.validate()
    frames = np.stack([render_rf_frame(spec, t) for t in range(spec.num_frames)])
    return frames, annotations_for(spec)


def gt_confmap(
    annotations: Sequence[Annotation],
    num_frames: int,
    num_classes: int,
    height: int,
    width: int,
    sigmas: Sequence[float],
) -> np.ndarray:
    """Ground-truth confidence maps (T, classes, H, W).

    Per class c the map is max over objects of exp(-((i-r)^2+(j-a)^2)/(2*sigma_c^2)):
    exactly 1 at every annotated center, max-composed for overlapping objects.
    """
    if len(sigmas) != num_classes:
        raise DataError(f"need {num_classes} sigmas, got {len(sigmas)}")
    if any(s <= 0 for s in sigmas):
        raise DataError(f"sigmas must be positive, got {tuple(sigmas)}")
    maps = np.zeros((num_frames, num_classes, height, width), dtype=np.float32)
    ri = np.arange(height, dtype=np.float64)[:, None]
    ai = np.arange(width, dtype=np.float64)[None, :]
    for ann in annotations:
        g = np.exp(
            -((ri - ann.range_bin) ** 2 + (ai - ann.azimuth_bin) ** 2)
            / (2 * sigmas[ann.class_id] ** 2)
        )
        np.maximum(
            maps[ann.frame_index, ann.class_id], g.astype(np.float32),
            out=maps[ann.frame_index, ann.class_id],
        )
    return maps


def complex_to_channels(frames: np.ndarray) -> np.ndarray:
    """(... ) complex -> (..., 2) float32 with real/imag channels last."""
    return np.stack([frames.real, frames.imag], axis=-1).astype(np.float32)


def write_cruw_sequence(
    seq_dir: str | Path,
    frames: np.ndarray,
    annotations: Sequence[Annotation],
    class_names: Sequence[str] = DEFAULT_CLASSES,
):
    """Write one sequence in the CRUW layout. ``frames`` is complex (T, chirps, H, W)."""
    seq_dir = Path(seq_dir)
    ra_dir = seq_dir / RA_SUBDIR
    ra_dir.mkdir(parents=True, exist_ok=True)
    num_frames, chirps = frames.shape[0], frames.shape[1]
    for t in range(num_frames):
        for k in range(chirps):
            np.save(ra_dir / f"{t:06d}_{k}.npy", frames[t, k].astype(np.complex64))
    lines = [
        f"{a.frame_index} {class_names[a.class_id]} {a.range_bin} {a.azimuth_bin}"
        for a in annotations
    ]
    (seq_dir / ANNOT_FILE).write_text("\n".join(lines) + ("\n" if lines else ""))


def _load_ra_file(path: Path) -> np.ndarray:
    arr = np.load(path)
    if np.iscomplexobj(arr):
        if arr.ndim != 2:
            raise DataError(f"{path}: complex RA image must be 2D, got shape {arr.shape}")
        return complex_to_channels(arr)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr.astype(np.float32)
    raise DataError(
        f"{path}: expected complex (H, W) or real (H, W, 2) array, got shape {arr.shape}"
    )


def parse_annotations(
    path: Path, class_names: Sequence[str], height: int, width: int
) -> list[Annotation]:
    class_ids = {name: i for i, name in enumerate(class_names)}
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        frame_s, class_name, rb_s, ab_s = parts
        try:
            frame, rb, ab = int(frame_s), int(rb_s), int(ab_s)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer frame or bin in {line!r}")
        if class_name not in class_ids:
            raise DataError(f"{path}:{lineno}: unknown class {class_name!r}")
        if not (0 <= rb < height and 0 <= ab < width):
            raise DataError(
                f"{path}:{lineno}: bin ({rb}, {ab}) outside grid ({height}, {width})"
            )
        out.append(Annotation(frame, class_ids[class_name], rb, ab))
    return out


def load_cruw_sequence(
    seq_dir: str | Path, class_names: Sequence[str] = DEFAULT_CLASSES
) -> tuple[np.ndarray, list[Annotation]]:
    """Load one sequence directory.

    Returns ``frames`` as float32 (T, chirps, H, W, 2) sorted by frame index,
    and the parsed annotation list.
    """
    seq_dir = Path(seq_dir)
    ra_dir = seq_dir / RA_SUBDIR
    if not ra_dir.is_dir():
        raise DataError(f"missing {RA_SUBDIR} directory under {seq_dir}")
    by_frame: dict[int, dict[int, Path]] = {}
    for f in ra_dir.iterdir():
        m = _CHIRP_FILE_RE.match(f.name)
        if m:
            by_frame.setdefault(int(m.group(1)), {})[int(m.group(2))] = f
    if not by_frame:
        raise DataError(f"no RA chirp files found in {ra_dir}")
    frame_ids = sorted(by_frame)
    chirps = max(max(d) for d in by_frame.values()) + 1
    frames = []
    for t in frame_ids:
        per_chirp = []
        for k in range(chirps):
            if k not in by_frame[t]:
                raise DataError(f"missing chirp {k} for frame {t} in {ra_dir}")
            per_chirp.append(_load_ra_file(by_frame[t][k]))
        frames.append(np.stack(per_chirp))
    data = np.stack(frames)
    height, width = data.shape[2], data.shape[3]
    annot_path = seq_dir / ANNOT_FILE
    annotations = (
        parse_annotations(annot_path, class_names, height, width)
        if annot_path.exists()
        else []
    )
    return data, annotations


@dataclass
class Window:
    """One sliding-window sample: 16 RF frames plus their GT maps.

    ``eval_offsets`` marks the window-local indices of the last 4 frames, the
    only ones scored at evaluation time.
    """

    rf: np.ndarray          # (window, chirps, H, W, 2) float32
    gt: np.ndarray          # (window, classes, H, W) float32
    start: int
    eval_offsets: tuple[int, ...]

    @property
    def eval_frames(self) -> tuple[int, ...]:
        return tuple(self.start + o for o in self.eval_offsets)


def window_dataset(
    frames: np.ndarray,
    gt: np.ndarray,
    window: int = 16,
    stride: int = 4,
    eval_tail: int = 4,
) -> Iterator[Window]:
    """Slide a ``window``-frame view over a sequence, shifting by ``stride``.

    Yields nothing (with a warning) when the sequence is shorter than the
    window.
    """
    num_frames = frames.shape[0]
    if num_frames < window:
        warnings.warn(
            f"sequence of {num_frames} frames is shorter than window {window}; no samples",
            stacklevel=2,
        )
        return
    eval_offsets = tuple(range(window - eval_tail, window))
    for start in range(0, num_frames - window + 1, stride):
        yield Window(
            rf=frames[start:start + window],
            gt=gt[start:start + window],
            start=start,
            eval_offsets=eval_offsets,
        )


def num_windows(num_frames: int, window: int = 16, stride: int = 4) -> int:
    if num_frames < window:
        return 0
    return (num_frames - window) // stride + 1


def split_train_test(
    sequences: Sequence[str], seed: int, test_fraction: float = 0.1
) -> tuple[list[str], list[str]]:
    """Deterministic sequence-level split; no window ever crosses it."""
    if len(sequences) < 2:
        raise DataError(f"need at least 2 sequences to split, got {len(sequences)}")
    order = list(sequences)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n_test = max(1, int(round(len(order) * test_fraction)))
    return sorted(order[n_test:]), sorted(order[:n_test])


# per-class apparent size (point-spread sigma, bins) and reflectivity range,
# loosely tracking radar cross-section: pedestrians small/dim, cars big/bright
CLASS_PSF_SIGMA = (1.0, 1.5, 2.2)
CLASS_REFLECTIVITY = ((0.7, 1.0), (0.9, 1.3), (1.1, 1.6))


def _trajectory_bins(traj: np.ndarray, grid: RadarGrid) -> np.ndarray:
    rb = (traj[:, 0] - grid.r_min) / grid.range_step
    ab = (traj[:, 1] + grid.fov / 2) / grid.azimuth_step
    return np.stack([rb, ab], axis=1)


def make_scene_objects(
    rng: np.random.Generator,
    num_objects: int,
    num_frames: int,
    grid: RadarGrid,
    num_classes: int = len(DEFAULT_CLASSES),
    max_speed: float = 2.0,
    min_separation_bins: float = 5.0,
) -> list[SceneObject]:
    """Random smooth trajectories kept inside 10-90% of the radar field.

    Classes are drawn without replacement while they last, and objects keep a
    minimum pairwise bin distance in every frame: desk-scale scenes avoid
    both same-class pairs inside each other's L-NMS suppression radius and
    merged blobs that no detector could separate.
    """
    r_lo = grid.r_min + 0.1 * (grid.r_max - grid.r_min)
    r_hi = grid.r_min + 0.9 * (grid.r_max - grid.r_min)
    az_hi = 0.4 * grid.fov
    class_pool = list(rng.permutation(num_classes))
    objects: list[SceneObject] = []
    placed_bins: list[np.ndarray] = []
    dt = 1.0 / 30.0
    ts = np.arange(num_frames) * dt
    for i in range(num_objects):
        class_id = int(class_pool[i] if i < len(class_pool) else rng.integers(num_classes))
        traj = None
        for _ in range(200):
            r0 = rng.uniform(r_lo, r_hi)
            az0 = rng.uniform(-az_hi, az_hi)
            v_r = rng.uniform(-max_speed, max_speed)
            v_az = rng.uniform(-0.02, 0.02)  # rad/s
            candidate = np.stack(
                [np.clip(r0 + v_r * ts, r_lo, r_hi), np.clip(az0 + v_az * ts, -az_hi, az_hi)],
                axis=1,
            )
            bins = _trajectory_bins(candidate, grid)
            if all(
                float(np.linalg.norm(bins - other, axis=1).min()) >= min_separation_bins
                for other in placed_bins
            ):
                traj = candidate
                placed_bins.append(bins)
                break
        if traj is None:
            raise DataError(
                f"could not place {num_objects} objects with separation "
                f"{min_separation_bins} bins on a {grid.height}x{grid.width} grid"
            )
        lo, hi = CLASS_REFLECTIVITY[class_id % len(CLASS_REFLECTIVITY)]
        objects.append(
            SceneObject(
                class_id=class_id,
                trajectory=traj,
                radial_velocity=float(v_r),
                reflectivity=float(rng.uniform(lo, hi)),
                psf_sigma=CLASS_PSF_SIGMA[class_id % len(CLASS_PSF_SIGMA)],
            )
        )
    return objects


def synthesize_dataset(
    out_dir: str | Path,
    num_sequences: int,
    num_frames: int,
    num_objects: int,
    seed: int,
    grid: RadarGrid | None = None,
    noise_std: float = 0.05,
    class_names: Sequence[str] = DEFAULT_CLASSES,
) -> list[str]:
    """Write ``num_sequences`` synthetic sequences in CRUW layout; returns names."""
    out_dir = Path(out_dir)
    grid = grid or RadarGrid()
    names = []
    for s in range(num_sequences):
        rng = np.random.default_rng([seed, s])
        spec = SequenceSpec(
            num_frames=num_frames,
            grid=grid,
            noise_std=noise_std,
            rng_seed=seed * 100_003 + s,
            objects=make_scene_objects(rng, num_objects, num_frames, grid, len(class_names)),
        )
        frames, annotations = render_sequence(spec)
        name = f"seq_{s:03d}"
        write_cruw_sequence(out_dir / name, frames, annotations, class_names)
        names.append(name)
    return names


def list_sequences(data_dir: str | Path) -> list[str]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    names = sorted(p.name for p in data_dir.iterdir() if (p / RA_SUBDIR).is_dir())
    if not names:
        raise DataError(f"no CRUW-layout sequences under {data_dir}")
    return names
