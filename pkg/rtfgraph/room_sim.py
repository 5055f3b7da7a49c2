"""
Shoebox room simulation with the image-source method.

Provides the room and scene models, the wall reflectivity that realizes a
requested T60, acoustic impulse responses (AIRs) with fractional-delay
interpolation, and rendering of excitations through the AIRs of a source
position.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from rtfgraph.errors import GeometryError, ShapeError
from rtfgraph.signal_core import MultichannelSignal, Signal, convolve

logger = logging.getLogger(__name__)

Point = Tuple[float, float, float]

SINC_TAPS = 32
SINC_CUTOFF = 0.9
MIN_IMAGE_GAIN = 1e-3
MIN_REFLECTIVITY = 1e-12


class RoomSpec(BaseModel):
    """Shoebox room with uniform wall absorption."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dimensions: Point = (6.0, 6.0, 2.4)
    t60: float = Field(default=0.3, ge=0.0)
    speed_of_sound: float = Field(default=343.0, gt=0.0)
    sample_rate: int = Field(default=16000, gt=0)
    max_order: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_dimensions(self):
        if min(self.dimensions) <= 0:
            raise ValueError(f"Room dimensions must be positive, got {self.dimensions}")
        return self

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)


class SceneSpec(BaseModel):
    """Microphone array, source grid and out-of-grid (OOG) noise positions."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mic_positions: List[Point] = [
        (2.87, 1.0, 1.2), (2.95, 1.0, 1.2), (3.0, 1.0, 1.2), (3.05, 1.0, 1.2), (3.13, 1.0, 1.2),
    ]
    ref_index: int = 2
    grid_origin: Point = (2.79, 2.85, 1.12)
    grid_counts: Tuple[int, int, int] = (8, 6, 3)
    grid_spacing: Point = (0.06, 0.06, 0.08)
    oog_positions: List[Point] = [
        (1.5, 3.0, 1.5), (4.5, 3.0, 1.5), (3.0, 4.5, 1.5), (1.5, 4.5, 1.0),
        (4.5, 4.5, 1.0), (1.2, 1.8, 1.6), (4.8, 1.8, 1.6), (3.0, 5.0, 0.8),
    ]

    @model_validator(mode="after")
    def _check_layout(self):
        if len(self.mic_positions) < 2:
            raise ValueError(f"At least 2 microphones are required, got {len(self.mic_positions)}")
        if not 0 <= self.ref_index < len(self.mic_positions):
            raise ValueError(f"ref_index {self.ref_index} outside [0, {len(self.mic_positions)})")
        if min(self.grid_counts) < 1:
            raise ValueError(f"Grid counts must be >= 1, got {self.grid_counts}")
        if min(self.grid_spacing) <= 0:
            raise ValueError(f"Grid spacing must be positive, got {self.grid_spacing}")
        if not self.oog_positions:
            raise ValueError("At least one OOG noise position is required")
        return self

    @property
    def num_positions(self) -> int:
        return int(np.prod(self.grid_counts))


@dataclass(frozen=True)
class AIR:
    """Acoustic impulse response from one source to one microphone."""

    taps: np.ndarray
    sample_rate: int


@dataclass(frozen=True)
class Scene:
    """Enumerated scene geometry; grid positions are indexed x-fastest."""

    spec: SceneSpec
    room: RoomSpec
    positions: np.ndarray
    mics: np.ndarray
    oog: np.ndarray

    @property
    def num_positions(self) -> int:
        return self.positions.shape[0]

    @property
    def num_mics(self) -> int:
        return self.mics.shape[0]

    @property
    def ref_index(self) -> int:
        return self.spec.ref_index

    def index_of(self, i: int, j: int, k: int) -> int:
        nx, ny, nz = self.spec.grid_counts
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            raise IndexError(f"Grid vertex ({i}, {j}, {k}) outside counts {self.spec.grid_counts}")
        return i + nx * (j + ny * k)

    def vertex_of(self, index: int) -> Tuple[int, int, int]:
        nx, ny, _ = self.spec.grid_counts
        if not 0 <= index < self.num_positions:
            raise IndexError(f"Position index {index} outside [0, {self.num_positions})")
        return index % nx, (index // nx) % ny, index // (nx * ny)

    def source(self, index: int, oog: bool = False) -> np.ndarray:
        table = self.oog if oog else self.positions
        if not 0 <= index < table.shape[0]:
            kind = "OOG" if oog else "grid"
            raise IndexError(f"{kind} position index {index} outside [0, {table.shape[0]})")
        return table[index]


def _outside(points: np.ndarray, room: RoomSpec) -> np.ndarray:
    dims = np.asarray(room.dimensions)
    return np.any((points <= 0.0) | (points >= dims), axis=-1)


def build_scene(spec: SceneSpec, room: RoomSpec) -> Scene:
    """Enumerate grid vertices (x fastest) and validate the geometry.

    Raises:
        GeometryError: Listing every position outside the room
    """
    nx, ny, nz = spec.grid_counts
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    steps = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    positions = np.asarray(spec.grid_origin) + steps * np.asarray(spec.grid_spacing)
    mics = np.asarray(spec.mic_positions, dtype=np.float64)
    oog = np.asarray(spec.oog_positions, dtype=np.float64)

    offenders = []
    for label, points in (("grid", positions), ("mic", mics), ("oog", oog)):
        for index in np.flatnonzero(_outside(points, room)):
            offenders.append(f"{label}[{index}]={tuple(np.round(points[index], 4))}")
    if offenders:
        raise GeometryError(f"Positions outside room {room.dimensions}: {', '.join(offenders)}")

    lo, hi = positions.min(axis=0), positions.max(axis=0)
    for index, point in enumerate(oog):
        gap = np.linalg.norm(np.maximum(0.0, np.maximum(lo - point, point - hi)))
        if gap < 1.0:
            logger.warning(f"OOG position {index} {tuple(point)} is {gap:.2f} m from the grid (< 1 m)")

    logger.info(f"Scene: {positions.shape[0]} grid positions, {mics.shape[0]} mics, {oog.shape[0]} OOG positions")
    return Scene(spec=spec, room=room, positions=positions, mics=mics, oog=oog)


def _fibonacci_sphere(n: int) -> np.ndarray:
    index = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / n)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * index
    return np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)


def lattice_t60(room: RoomSpec, beta: float, directions: int = 512) -> float:
    """T60 of the direction-averaged image-lattice energy decay for reflectivity beta.

    Along direction u an image at distance d has undergone d * sum(|u_i| / L_i)
    reflections. The T60 is read off the backward-integrated decay between
    -5 and -25 dB.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"Reflectivity must lie in (0, 1), got {beta}")
    per_metre = np.abs(_fibonacci_sphere(directions)) @ (1.0 / np.asarray(room.dimensions))
    rates = -2.0 * np.log(beta) * room.speed_of_sound * per_metre

    def edc_db(t):
        tail = np.mean(np.exp(-np.outer(t, rates)) / rates, axis=1)
        return 10.0 * np.log10(tail / np.mean(1.0 / rates))

    horizon = 40.0 * np.log(10.0) / rates.min()
    t = np.linspace(0.0, horizon, 4000)
    curve = edc_db(t)
    fit = (curve <= -5.0) & (curve >= -25.0)
    slope = np.polyfit(t[fit], curve[fit], 1)[0]
    return float(-60.0 / slope)


@lru_cache(maxsize=64)
def sabine_reflectivity(room: RoomSpec) -> float:
    """Uniform wall reflection coefficient that realizes room.t60.

    Starts from the Eyring inversion and refines it by bisection against the
    image-lattice decay, which Eyring overestimates in flat rooms.

    Raises:
        GeometryError: If t60 is not positive or too small for the geometry
    """
    if room.t60 <= 0.0:
        raise GeometryError(f"Reflectivity needs t60 > 0, got {room.t60}")
    absorption = 1.0 - np.exp(-0.161 * room.volume / (room.surface * room.t60))
    eyring = float(np.sqrt(max(1.0 - absorption, 0.0)))
    if eyring < MIN_REFLECTIVITY:
        raise GeometryError(f"t60={room.t60} s is too small for room {room.dimensions}")

    lo, hi = MIN_REFLECTIVITY, 1.0 - 1e-12
    if lattice_t60(room, lo) > room.t60:
        raise GeometryError(f"t60={room.t60} s is too small for room {room.dimensions}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if lattice_t60(room, mid) < room.t60:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    logger.debug(f"Reflectivity for t60={room.t60}: Eyring {eyring:.4f}, refined {beta:.4f}")
    return beta


def _axis_images(src: float, mic: float, length: float, order: int):
    r = np.arange(-order, order + 1)
    offsets, counts = [], []
    for p in (0, 1):
        offsets.append((1 - 2 * p) * src + 2 * r * length - mic)
        counts.append(np.abs(r - p) + np.abs(r))
    return np.concatenate(offsets), np.concatenate(counts)


def image_source_air(room: RoomSpec, src, mic, air_len: int = 4096, beta: Optional[float] = None) -> AIR:
    """Acoustic impulse response by the image-source method.

    Images with gain beta**n below -60 dB or arriving after air_len samples
    are dropped. Each image is a Hann-windowed sinc (32 taps, cut-off
    0.9 x Nyquist) at its fractional delay, scaled by beta**n / (4 pi d).

    Args:
        room (RoomSpec): Room model
        src: Source position in metres
        mic: Microphone position in metres
        air_len (int): Number of taps
        beta (float): Reflectivity override (computed from room.t60 if None)

    Returns:
        AIR: Impulse response of length air_len

    Raises:
        GeometryError: If a position is outside the room or src == mic
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if _outside(np.stack([src, mic]), room).any():
        raise GeometryError(f"Source {tuple(src)} or mic {tuple(mic)} outside room {room.dimensions}")
    if np.allclose(src, mic):
        raise GeometryError(f"Source and microphone coincide at {tuple(src)}")
    if beta is None:
        beta = sabine_reflectivity(room) if room.t60 > 0 else 0.0

    fs = room.sample_rate
    reach = air_len / fs * room.speed_of_sound
    axes = []
    for axis, length in enumerate(room.dimensions):
        order = int(np.ceil(reach / (2.0 * length))) + 1
        if room.max_order is not None:
            order = min(order, room.max_order)
        if beta == 0.0:
            order = 0
        axes.append(_axis_images(src[axis], mic[axis], length, order))

    (ox, cx), (oy, cy), (oz, cz) = axes
    dist = np.sqrt(ox[:, None, None] ** 2 + oy[None, :, None] ** 2 + oz[None, None, :] ** 2).ravel()
    count = (cx[:, None, None] + cy[None, :, None] + cz[None, None, :]).ravel()
    if room.max_order is not None:
        keep_order = count <= room.max_order
        dist, count = dist[keep_order], count[keep_order]
    gain = np.power(beta, count)
    delay = dist / room.speed_of_sound * fs
    keep = (gain >= MIN_IMAGE_GAIN) & (delay < air_len)
    gain, delay, dist = gain[keep], delay[keep], dist[keep]

    half = SINC_TAPS // 2
    base = np.floor(delay).astype(np.int64)
    index = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    t = index - delay[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / SINC_TAPS))
    pulse = SINC_CUTOFF * np.sinc(SINC_CUTOFF * t) * window
    values = pulse * (gain / (4.0 * np.pi * dist))[:, None]
    valid = (index >= 0) & (index < air_len)
    taps = np.bincount(index[valid], weights=values[valid], minlength=air_len)[:air_len]
    return AIR(taps=taps, sample_rate=fs)


def position_airs(scene: Scene, index: int, air_len: int = 4096, oog: bool = False) -> np.ndarray:
    """AIRs from one source position to every microphone, shape (M, air_len)."""
    beta = sabine_reflectivity(scene.room) if scene.room.t60 > 0 else 0.0
    src = scene.source(index, oog=oog)
    return np.stack([image_source_air(scene.room, src, mic, air_len, beta).taps for mic in scene.mics])


def compute_airs(scene: Scene, air_len: int = 4096, oog: bool = False, threads: int = 1,
                 progress: bool = True) -> np.ndarray:
    """AIRs for every grid (or OOG) position, shape (N, M, air_len).

    Results are collected in position order regardless of the worker count.
    """
    count = scene.oog.shape[0] if oog else scene.num_positions
    label = "OOG AIRs" if oog else "grid AIRs"
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = executor.map(lambda index: position_airs(scene, index, air_len, oog), range(count))
        airs = list(tqdm(results, total=count, desc=label, disable=not progress))
    return np.stack(airs)


def render_airs(airs: np.ndarray, excitation: Signal, ref_index: int = 0) -> MultichannelSignal:
    """Convolve an excitation with (M, air_len) AIRs; length len + air_len - 1."""
    airs = np.asarray(airs, dtype=np.float64)
    if airs.ndim != 2:
        raise ShapeError(f"AIRs must be (mics, taps), got shape {airs.shape}")
    channels = [convolve(excitation, taps).samples for taps in airs]
    return MultichannelSignal(np.stack(channels), excitation.sample_rate, ref_index)


def render_position(scene: Scene, index: int, excitation: Signal, air_len: int = 4096,
                    oog: bool = False) -> MultichannelSignal:
    """Multichannel recording of an excitation played at a grid or OOG position."""
    airs = position_airs(scene, index, air_len, oog=oog)
    return render_airs(airs, excitation, scene.ref_index)
