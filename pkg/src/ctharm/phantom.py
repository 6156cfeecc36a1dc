"""Synthetic paired-kernel CT phantoms and all image/manifest file I/O.

A phantom is a 2D integer HU image: air background, a soft-tissue body,
a textured lung-like region, and bone inserts, generated as a pure
function of a 64-bit seed.  Reconstruction-kernel variants are simulated
as blur/sharpen filter chains plus additive Gaussian noise, chosen so the
smooth<->standard and sharp<->standard gaps are learnable at small image
sizes.  The filter parameters are stand-ins, kept in one place (the
kernel simulation arguments) for easy retuning.

On-disk image format: binary 16-bit PGM ("P5", maxval 65535, big-endian
samples), stored value = HU + 1024 so negative HU fits an unsigned
container.  Image metadata rides in PGM comment lines.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .rng import CounterRng, mix64

HU_ABS_MIN = -1024
HU_ABS_MAX = 3071
HU_STORAGE_OFFSET = 1024

DEFAULT_HU_MIN = -1024
DEFAULT_HU_MAX = 1000

KERNEL_RAW = "RAW"
KERNEL_STANDARD = "BL64"
KERNEL_SMOOTH = "BR40"
KERNEL_SHARP = "BL57"
KERNEL_SYNTHETIC = "SYN_BL64"
KERNEL_TAGS = (KERNEL_RAW, KERNEL_STANDARD, KERNEL_SMOOTH, KERNEL_SHARP)

# HU intervals that every generated phantom must populate (>= 64 px each)
ROI_RANGES = ((-800, -300), (-100, 250), (300, 800))
MIN_ROI_PIXELS = 64


class PhantomError(ValueError):
    """Invalid phantom generation or kernel simulation request."""


class ImageFormatError(ValueError):
    """Malformed or out-of-contract image file."""


class DatasetError(ValueError):
    """Inconsistent manifest or unpairable images."""


@dataclass
class CtImage:
    """2D Hounsfield-unit image with kernel/provenance metadata."""

    width: int
    height: int
    pixels: np.ndarray          # int32, shape (height, width)
    kernel_tag: str
    phantom_id: int
    seed: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.int32)
        if self.width <= 0 or self.height <= 0:
            raise PhantomError(f"non-positive image dims {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width):
            raise PhantomError(f"pixel array {self.pixels.shape} does not match "
                               f"{self.height}x{self.width}")
        if self.kernel_tag not in KERNEL_TAGS and self.kernel_tag != KERNEL_SYNTHETIC:
            raise PhantomError(f"unknown kernel tag {self.kernel_tag!r}")
        lo, hi = int(self.pixels.min()), int(self.pixels.max())
        if lo < HU_ABS_MIN or hi > HU_ABS_MAX:
            raise PhantomError(f"pixels outside [{HU_ABS_MIN}, {HU_ABS_MAX}]: "
                               f"min {lo}, max {hi}")
        if self.phantom_id < 0:
            raise PhantomError(f"negative phantom_id {self.phantom_id}")


@dataclass
class Dataset:
    """Paired (non-standard, standard) images for one split."""

    pairs: list[tuple[CtImage, CtImage]]
    split: str

    def __len__(self):
        return len(self.pairs)


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float,
                  angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _gradient_field(size: int, cx: float, cy: float, gx: float, gy: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return gx * (xx - cx) + gy * (yy - cy)


def _try_generate(rng: CounterRng, size: int) -> np.ndarray:
    img = np.full((size, size), -1000.0)

    # body: large soft-tissue ellipse around center
    cx = size * (0.5 + 0.06 * (rng.uniforms(1)[0] - 0.5))
    cy = size * (0.5 + 0.06 * (rng.uniforms(1)[0] - 0.5))
    brx = size * (0.34 + 0.08 * rng.uniforms(1)[0])
    bry = size * (0.34 + 0.08 * rng.uniforms(1)[0])
    body = _ellipse_mask(size, cx, cy, brx, bry, 0.0)
    img[body] = 10.0 + 50.0 * rng.uniforms(1)[0]

    # lung: textured low-density region inside the body
    side = 1.0 if rng.uniforms(1)[0] < 0.5 else -1.0
    lx = cx + side * brx * (0.25 + 0.2 * rng.uniforms(1)[0])
    ly = cy + bry * 0.35 * (rng.uniforms(1)[0] - 0.5)
    lrx = max(size * (0.13 + 0.06 * rng.uniforms(1)[0]), 5.5)
    lry = max(size * (0.13 + 0.06 * rng.uniforms(1)[0]), 5.5)
    lung = _ellipse_mask(size, lx, ly, lrx, lry, np.pi * rng.uniforms(1)[0])
    noise = rng.normals((size, size))
    smooth = _gaussian_blur(noise, 2.0)     # band-limited texture
    sel = smooth[lung]
    span = sel.max() - sel.min()
    if span <= 0:
        span = 1.0
    img[lung] = -790.0 + (sel - sel.min()) / span * 480.0   # maps into [-790, -310]

    # soft-tissue inserts
    n_soft = 1 + rng.randint(3)
    for _ in range(n_soft):
        ex = cx + brx * 0.55 * (2 * rng.uniforms(1)[0] - 1)
        ey = cy + bry * 0.55 * (2 * rng.uniforms(1)[0] - 1)
        erx = size * (0.05 + 0.07 * rng.uniforms(1)[0])
        ery = size * (0.05 + 0.07 * rng.uniforms(1)[0])
        m = _ellipse_mask(size, ex, ey, erx, ery, np.pi * rng.uniforms(1)[0])
        base = -80.0 + 300.0 * rng.uniforms(1)[0]
        grad = _gradient_field(size, ex, ey,
                               6.0 * (rng.uniforms(1)[0] - 0.5),
                               6.0 * (rng.uniforms(1)[0] - 0.5))
        img[m] = np.clip(base + grad[m], -95.0, 245.0)

    # bone inserts, drawn last so they are never overwritten
    n_bone = 1 + rng.randint(2)
    for _ in range(n_bone):
        ex = cx + brx * 0.5 * (2 * rng.uniforms(1)[0] - 1)
        ey = cy + bry * 0.5 * (2 * rng.uniforms(1)[0] - 1)
        erx = max(size * (0.06 + 0.05 * rng.uniforms(1)[0]), 4.9)
        ery = max(size * (0.06 + 0.05 * rng.uniforms(1)[0]), 4.9)
        m = _ellipse_mask(size, ex, ey, erx, ery, np.pi * rng.uniforms(1)[0])
        base = 350.0 + 400.0 * rng.uniforms(1)[0]
        grad = _gradient_field(size, ex, ey,
                               10.0 * (rng.uniforms(1)[0] - 0.5),
                               10.0 * (rng.uniforms(1)[0] - 0.5))
        img[m] = np.clip(base + grad[m], 305.0, 795.0)

    return np.clip(np.rint(img), DEFAULT_HU_MIN, DEFAULT_HU_MAX).astype(np.int32)


def roi_pixel_counts(pixels: np.ndarray) -> list[int]:
    return [int(((pixels >= lo) & (pixels <= hi)).sum()) for lo, hi in ROI_RANGES]


def generate_phantom(seed: int, size: int) -> CtImage:
    """Deterministic RAW phantom; every ROI range holds >= 64 pixels.

    Layouts that leave an ROI range underpopulated (possible when inserts
    overlap) are rejected and regenerated from a derived sub-seed, so the
    result is still a pure function of (seed, size).
    """
    if size < 32 or size % 2:
        raise PhantomError(f"phantom size must be even and >= 32, got {size}")
    base = CounterRng(seed)
    for attempt in range(64):
        pixels = _try_generate(base.derive("layout", attempt), size)
        if all(c >= MIN_ROI_PIXELS for c in roi_pixel_counts(pixels)):
            return CtImage(size, size, pixels, KERNEL_RAW, 0, seed)
    raise PhantomError(f"could not populate all ROI ranges for seed {seed}")


# ---------------------------------------------------------------------------
# kernel simulation
# ---------------------------------------------------------------------------

def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, reflect padding; preserves constants exactly."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(img.astype(np.float64), ((radius, radius), (0, 0)), mode="reflect")
    rows = np.zeros_like(img, dtype=np.float64)
    for i, w in enumerate(k):
        rows += w * padded[i:i + img.shape[0], :]
    padded = np.pad(rows, ((0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(rows)
    for i, w in enumerate(k):
        out += w * padded[:, i:i + img.shape[1]]
    return out


@dataclass(frozen=True)
class KernelSim:
    """Filter-chain parameters for the simulated reconstruction kernels."""

    bl64_blur_sigma: float = 0.8
    br40_blur_sigma: float = 1.8
    bl57_unsharp_amount: float = 0.8
    bl57_unsharp_sigma: float = 1.2
    bl64_noise_sigma: float = 5.0
    br40_noise_sigma: float = 5.0
    bl57_noise_sigma: float = 8.0


def apply_kernel(base: CtImage, kernel_tag: str, noise_seed: int,
                 sim: KernelSim = KernelSim()) -> CtImage:
    """Simulate a reconstruction kernel on a RAW phantom."""
    if base.kernel_tag != KERNEL_RAW:
        raise PhantomError(f"apply_kernel needs a RAW image, got {base.kernel_tag}")
    raw = base.pixels.astype(np.float64)
    if kernel_tag == KERNEL_STANDARD:
        filtered = _gaussian_blur(raw, sim.bl64_blur_sigma)
        noise_sigma = sim.bl64_noise_sigma
    elif kernel_tag == KERNEL_SMOOTH:
        filtered = _gaussian_blur(raw, sim.br40_blur_sigma)
        noise_sigma = sim.br40_noise_sigma
    elif kernel_tag == KERNEL_SHARP:
        blurred = _gaussian_blur(raw, sim.bl64_blur_sigma)
        filtered = blurred + sim.bl57_unsharp_amount * (
            blurred - _gaussian_blur(blurred, sim.bl57_unsharp_sigma))
        noise_sigma = sim.bl57_noise_sigma
    else:
        raise PhantomError(f"cannot simulate kernel {kernel_tag!r}")
    noise = CounterRng(noise_seed).derive("noise", kernel_tag).normals(raw.shape)
    out = np.clip(np.rint(filtered + noise_sigma * noise),
                  DEFAULT_HU_MIN, DEFAULT_HU_MAX).astype(np.int32)
    return CtImage(base.width, base.height, out, kernel_tag, base.phantom_id, noise_seed)


# ---------------------------------------------------------------------------
# 16-bit PGM I/O
# ---------------------------------------------------------------------------

_PGM_MAXVAL = 65535
_MAX_STORED_HU = HU_ABS_MAX + HU_STORAGE_OFFSET   # 4095


def write_pgm16(path: str, values: np.ndarray, comments: dict | None = None) -> None:
    """Write a big-endian 16-bit P5 PGM with optional metadata comments."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ImageFormatError(f"PGM payload must be 2D, got shape {values.shape}")
    if values.min() < 0 or values.max() > _PGM_MAXVAL:
        raise ImageFormatError(f"PGM sample out of [0, {_PGM_MAXVAL}]: "
                               f"min {values.min()}, max {values.max()}")
    h, w = values.shape
    buf = io.BytesIO()
    buf.write(b"P5\n")
    for key, val in (comments or {}).items():
        buf.write(f"# {key} {val}\n".encode("utf-8"))
    buf.write(f"{w} {h}\n{_PGM_MAXVAL}\n".encode("ascii"))
    buf.write(values.astype(">u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_pgm16(path: str) -> tuple[np.ndarray, dict]:
    """Read a 16-bit P5 PGM; returns (uint16 array, metadata comments)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a P5 PGM (bad magic)")
    pos = 2
    comments: dict[str, str] = {}
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise ImageFormatError(f"{path}: truncated PGM header")
        if blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{path}: unterminated comment")
            parts = blob[pos + 1:end].decode("utf-8", "replace").strip().split(None, 1)
            if len(parts) == 2:
                comments[parts[0]] = parts[1]
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    pos += 1    # single whitespace after maxval
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: non-positive dimensions {w}x{h}")
    if maxval != _PGM_MAXVAL:
        raise ImageFormatError(f"{path}: maxval must be {_PGM_MAXVAL}, got {maxval}")
    expected = w * h * 2
    payload = blob[pos:]
    if len(payload) != expected:
        raise ImageFormatError(f"{path}: expected {expected} sample bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype=">u2").reshape(h, w)
    return values, comments


def write_image(img: CtImage, path: str) -> None:
    stored = img.pixels.astype(np.int64) + HU_STORAGE_OFFSET
    if stored.max() > _MAX_STORED_HU:
        raise ImageFormatError(f"stored value {stored.max()} exceeds {_MAX_STORED_HU}")
    write_pgm16(path, stored, comments={
        "kernel_tag": img.kernel_tag,
        "phantom_id": img.phantom_id,
        "seed": img.seed,
    })


def read_image(path: str) -> CtImage:
    values, comments = read_pgm16(path)
    if values.max() > _MAX_STORED_HU:
        raise ImageFormatError(f"{path}: stored value {values.max()} exceeds "
                               f"{_MAX_STORED_HU} (not an HU image)")
    pixels = values.astype(np.int32) - HU_STORAGE_OFFSET
    return CtImage(
        width=values.shape[1],
        height=values.shape[0],
        pixels=pixels,
        kernel_tag=comments.get("kernel_tag", KERNEL_RAW),
        phantom_id=int(comments.get("phantom_id", 0)),
        seed=int(comments.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["path", "kernel_tag", "phantom_id"]


def write_manifest(path: str, rows: list[tuple[str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rel, tag, pid in rows:
            writer.writerow([rel, tag, pid])


def read_manifest(path: str) -> list[tuple[str, str, int]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: manifest header must be "
                               f"{','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for line in reader:
            if len(line) != 3:
                raise DatasetError(f"{path}: bad manifest row {line}")
            rows.append((line[0], line[1], int(line[2])))
    return rows


def assign_splits(phantom_ids: list[int],
                  ratios: tuple[float, float, float]) -> dict[int, str]:
    """Deterministic split assignment with exact rounded counts.

    Phantoms are ordered by a hash of their id (a stable shuffle), then cut
    at round(N * cumulative_ratio).  Adding or removing phantoms changes
    assignments, but rebuilding from the same manifest never does.
    """
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise DatasetError(f"split ratios must sum to 1, got {ratios}")
    ordered = sorted(phantom_ids, key=lambda pid: (mix64(pid ^ 0xD1CE), pid))
    n = len(ordered)
    b1 = int(round(n * ratios[0]))
    b2 = int(round(n * (ratios[0] + ratios[1])))
    assignment = {}
    for rank, pid in enumerate(ordered):
        if rank < b1:
            assignment[pid] = "train"
        elif rank < b2:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return assignment


def build_dataset(manifest_path: str,
                  split_ratios: tuple[float, float, float]) -> dict[str, Dataset]:
    """Load all images, pair non-standard with standard, split by phantom.

    Every phantom must have exactly one standard (BL64) image; every
    non-standard image pairs with it.  Split membership is a deterministic
    function of phantom_id and the ratios.
    """
    rows = read_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    by_phantom: dict[int, dict[str, CtImage]] = {}
    for rel, tag, pid in rows:
        img = read_image(os.path.join(base_dir, rel))
        if img.kernel_tag != tag or img.phantom_id != pid:
            raise DatasetError(f"{rel}: file metadata ({img.kernel_tag}, {img.phantom_id}) "
                               f"disagrees with manifest ({tag}, {pid})")
        slot = by_phantom.setdefault(pid, {})
        if tag in slot:
            raise DatasetError(f"duplicate image for phantom {pid}, kernel {tag}")
        slot[tag] = img

    pairs_by_phantom: dict[int, list[tuple[CtImage, CtImage]]] = {}
    for pid, images in sorted(by_phantom.items()):
        standard = images.get(KERNEL_STANDARD)
        if standard is None:
            raise DatasetError(f"phantom {pid} has no standard ({KERNEL_STANDARD}) image")
        pairs = []
        for tag in (KERNEL_SMOOTH, KERNEL_SHARP):
            if tag in images:
                x = images[tag]
                if (x.width, x.height) != (standard.width, standard.height):
                    raise DatasetError(f"phantom {pid}: {tag} dims {x.width}x{x.height} "
                                       f"differ from standard")
                pairs.append((x, standard))
        if not pairs:
            raise DatasetError(f"phantom {pid} has no non-standard image to pair")
        pairs_by_phantom[pid] = pairs

    assignment = assign_splits(sorted(pairs_by_phantom), split_ratios)
    out = {name: Dataset(pairs=[], split=name) for name in ("train", "val", "test")}
    for pid in sorted(pairs_by_phantom):
        out[assignment[pid]].pairs.extend(pairs_by_phantom[pid])
    return out


def filter_pairs(ds: Dataset, kernel_tag: str) -> Dataset:
    """Restrict a dataset to pairs whose non-standard side has the given tag."""
    if kernel_tag == "both":
        return ds
    wanted = {"br40": KERNEL_SMOOTH, "bl57": KERNEL_SHARP}.get(kernel_tag.lower(), kernel_tag)
    return Dataset(pairs=[p for p in ds.pairs if p[0].kernel_tag == wanted], split=ds.split)
