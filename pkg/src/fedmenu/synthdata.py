"""Deterministic synthetic partially-labeled segmentation data.

Each sample places one parametric shape per organ, non-overlapping, with a
per-organ fill intensity, an optional oriented sinusoidal texture, a
per-client intensity shift and Gaussian noise. The default organs share one
ellipse family and intensity and differ only in texture orientation, so organ
identity is a local feature rather than a global shape cue. Full label maps
are kept for oracle evaluation; visible label maps zero out the organs the
client does not annotate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LabelMap
from .tensor import Tensor


class GenerationError(RuntimeError):
    """Shape placement failed within the retry budget."""


@dataclass(frozen=True)
class OrganGeometry:
    kind: str                  # "ellipse" | "disk_pair" | "bent_bar" | "disk"
    size_range: tuple          # characteristic size as a fraction of min(H, W)
    min_area: int
    max_area: int
    intensity: float
    texture: tuple | None = None   # (amplitude, wavelength_px, angle_rad)


def default_geometry(m: int) -> OrganGeometry:
    """Geometry for organ index m (1-based): same ellipse family and base
    intensity for the first three organs, told apart by the orientation of a
    sinusoidal grating inside the mask."""
    if m <= 3:
        return OrganGeometry("ellipse", (0.11, 0.16), 80, 330, 0.42,
                             texture=(0.20, 4.0, (m - 1) * np.pi / 3))
    return OrganGeometry("disk", (0.06, 0.09), 35, 130, 0.56 + 0.07 * (m % 5))


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 60
    image_size: tuple = (64, 64)
    num_organs: int = 3
    labeled_set: frozenset = frozenset({1, 2, 3})
    intensity_shift: float = 0.0
    noise_sigma: float = 0.12
    center_jitter: float = 0.06      # fraction of min(H, W)
    geometry: tuple = ()             # one OrganGeometry per organ; defaulted
    split_ratios: tuple = (2 / 3, 2 / 15, 1 / 5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labeled_set",
                           frozenset(int(m) for m in self.labeled_set))
        if not self.labeled_set:
            raise ValueError("labeled_set must be non-empty")
        if any(m < 1 or m > self.num_organs for m in self.labeled_set):
            raise ValueError("labeled_set outside 1..num_organs")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if not self.geometry:
            object.__setattr__(self, "geometry", tuple(
                default_geometry(m) for m in range(1, self.num_organs + 1)))


@dataclass
class ClientDataset:
    images: list                   # each [1,H,W] float64 in [0, 1]
    full_labels: list              # each [H,W] uint16, all organs
    visible_labels: list           # each [H,W] uint16, unlabeled organs -> 0
    labeled_set: frozenset
    num_organs: int
    splits: dict                   # "train"/"val"/"test" -> index lists

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, indices, visible: bool = True):
        """Stack samples into a Tensor [B,1,H,W] plus the matching LabelMap."""
        x = Tensor(np.stack([self.images[i] for i in indices]))
        source = self.visible_labels if visible else self.full_labels
        classes = np.stack([source[i] for i in indices]).astype(np.int64)
        labeled = self.labeled_set if visible \
            else frozenset(range(1, self.num_organs + 1))
        return x, LabelMap(classes=classes, labeled_set=labeled)


# ---------------------------------------------------------------------------
# rasterization

def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _ellipse(h, w, cy, cx, a, b, theta):
    yy, xx = _grid(h, w)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _disk(h, w, cy, cx, r):
    yy, xx = _grid(h, w)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def _bar(h, w, y0, x0, y1, x1, width):
    """Pixels within ``width/2`` of the segment (y0,x0)-(y1,x1)."""
    yy, xx = _grid(h, w)
    vy, vx = y1 - y0, x1 - x0
    norm2 = vy * vy + vx * vx
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / norm2, 0.0, 1.0)
    dy = yy - (y0 + t * vy)
    dx = xx - (x0 + t * vx)
    return dy * dy + dx * dx <= (width / 2.0) ** 2


def _raster_organ(geom: OrganGeometry, h: int, w: int, cy: float, cx: float,
                  rng) -> np.ndarray:
    s = min(h, w)
    lo, hi = geom.size_range
    size = rng.uniform(lo, hi) * s
    theta = rng.uniform(0.0, np.pi)
    if geom.kind == "ellipse":
        b_ax = size * rng.uniform(0.55, 0.75)
        return _ellipse(h, w, cy, cx, size, b_ax, theta)
    if geom.kind == "disk_pair":
        gap = 1.6 * size
        dy, dx = gap * np.cos(theta), gap * np.sin(theta)
        return (_disk(h, w, cy - dy, cx - dx, size)
                | _disk(h, w, cy + dy, cx + dx, size))
    if geom.kind == "bent_bar":
        width = s * rng.uniform(0.035, 0.05)
        bend = theta + rng.uniform(np.pi / 3, 2 * np.pi / 3)
        y1 = cy + size * np.cos(theta)
        x1 = cx + size * np.sin(theta)
        y2 = cy + size * np.cos(bend)
        x2 = cx + size * np.sin(bend)
        return _bar(h, w, y1, x1, cy, cx, width) | _bar(h, w, cy, cx, y2, x2, width)
    return _disk(h, w, cy, cx, size)


# ---------------------------------------------------------------------------
# generation

_PLACEMENT_RETRIES = 200


def _sample_maps(spec: DatasetSpec, rng):
    h, w = spec.image_size
    s = min(h, w)
    anchor_radius = 0.22 * s
    phase = rng.uniform(0.0, 2 * np.pi)
    labels = np.zeros((h, w), dtype=np.uint16)
    occupied = np.zeros((h, w), dtype=bool)
    border = np.zeros((h, w), dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    for m in range(1, spec.num_organs + 1):
        geom = spec.geometry[m - 1]
        angle = phase + 2 * np.pi * (m - 1) / spec.num_organs
        ay = h / 2 + anchor_radius * np.cos(angle)
        ax = w / 2 + anchor_radius * np.sin(angle)
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            jr = rng.uniform(0.0, spec.center_jitter * s)
            ja = rng.uniform(0.0, 2 * np.pi)
            mask = _raster_organ(geom, h, w, ay + jr * np.cos(ja),
                                 ax + jr * np.sin(ja), rng)
            area = int(mask.sum())
            if area < geom.min_area or area > geom.max_area:
                continue
            if (mask & occupied).any() or (mask & border).any():
                continue
            labels[mask] = m
            occupied |= mask
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place organ {m} after {_PLACEMENT_RETRIES} retries")
    image = np.full((h, w), 0.15 + spec.intensity_shift)
    for m in range(1, spec.num_organs + 1):
        geom = spec.geometry[m - 1]
        inside = labels == m
        image[inside] = geom.intensity + spec.intensity_shift
        if geom.texture is not None:
            amp, wavelength, angle = geom.texture
            yy, xx = _grid(h, w)
            tex_phase = rng.uniform(0.0, 2 * np.pi)
            wave = amp * np.sin(2 * np.pi / wavelength *
                                (yy * np.cos(angle) + xx * np.sin(angle))
                                + tex_phase)
            image[inside] += wave[inside]
    image += rng.normal(0.0, spec.noise_sigma, (h, w))
    return np.clip(image, 0.0, 1.0)[None], labels


def _split_indices(n: int, ratios, rng) -> dict:
    order = [int(i) for i in rng.permutation(n)]
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    return {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }


def generate(spec: DatasetSpec) -> ClientDataset:
    """Generate a client dataset; bit-reproducible for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    images, full_labels, visible_labels = [], [], []
    keep = np.array([0] + [m if m in spec.labeled_set else 0
                           for m in range(1, spec.num_organs + 1)],
                    dtype=np.uint16)
    for _ in range(spec.num_samples):
        image, labels = _sample_maps(spec, rng)
        images.append(image)
        full_labels.append(labels)
        visible_labels.append(keep[labels])
    splits = _split_indices(spec.num_samples, spec.split_ratios, rng)
    return ClientDataset(images=images, full_labels=full_labels,
                         visible_labels=visible_labels,
                         labeled_set=spec.labeled_set,
                         num_organs=spec.num_organs, splits=splits)


# ---------------------------------------------------------------------------
# augmentation

def augment(image: np.ndarray, labels: np.ndarray, rng,
            max_shift: float = 0.1, max_rot: float = 0.1):
    """Joint random integer translation (up to ``max_shift`` of the image
    size) and rotation (up to ``max_rot`` rad), nearest-neighbor resampling
    with zero fill. Returns (image, labels) copies."""
    h, w = labels.shape
    dy = int(rng.integers(-int(max_shift * h), int(max_shift * h) + 1))
    dx = int(rng.integers(-int(max_shift * w), int(max_shift * w) + 1))
    angle = float(rng.uniform(-max_rot, max_rot))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = _grid(h, w)
    # inverse map: translate back, then rotate back around the center
    ry = yy - dy - cy
    rx = xx - dx - cx
    sy = np.rint(cy + ry * np.cos(angle) - rx * np.sin(angle)).astype(np.int64)
    sx = np.rint(cx + ry * np.sin(angle) + rx * np.cos(angle)).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    sy_c = np.clip(sy, 0, h - 1)
    sx_c = np.clip(sx, 0, w - 1)
    new_img = np.where(valid, image[0][sy_c, sx_c], 0.0)[None]
    new_labels = np.where(valid, labels[sy_c, sx_c], 0).astype(labels.dtype)
    return new_img, new_labels


# ---------------------------------------------------------------------------
# benchmark construction

def make_benchmark(num_organs: int, num_clients: int, seed: int,
                   num_samples: int = 24, image_size: tuple = (64, 64),
                   noise_sigma: float = 0.12,
                   shift_range: tuple = (-0.12, 0.12),
                   oof_shift: float | None = None,
                   full_client_samples: int | None = 120):
    """Build the K-client federation plus one out-of-federation dataset.

    Clients 1..K-1 each label a single organ (cycling through the organ set);
    the last client labels everything and holds ``full_client_samples``
    samples (default larger, as an aggregation hub). The held-out dataset is
    fully labeled with an intensity shift outside the clients' range.
    """
    if num_clients < 2:
        raise ValueError("need at least 2 clients")
    if full_client_samples is None:
        full_client_samples = num_samples
    shifts = np.linspace(shift_range[0], shift_range[1], num_clients)
    clients = []
    for k in range(1, num_clients + 1):
        if k < num_clients:
            labeled = frozenset({(k - 1) % num_organs + 1})
            samples = num_samples
        else:
            labeled = frozenset(range(1, num_organs + 1))
            samples = full_client_samples
        spec = DatasetSpec(num_samples=samples, image_size=image_size,
                           num_organs=num_organs, labeled_set=labeled,
                           intensity_shift=float(shifts[k - 1]),
                           noise_sigma=noise_sigma, seed=seed * 1000 + k)
        clients.append(generate(spec))
    if oof_shift is None:
        oof_shift = shift_range[1] + 0.1
    oof_spec = DatasetSpec(num_samples=num_samples, image_size=image_size,
                           num_organs=num_organs,
                           labeled_set=frozenset(range(1, num_organs + 1)),
                           intensity_shift=float(oof_shift),
                           noise_sigma=noise_sigma, seed=seed * 1000)
    return clients, generate(oof_spec)
