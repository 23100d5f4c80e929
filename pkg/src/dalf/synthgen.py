"""Synthetic non-rigid training pairs: photometric jitter, homography, TPS warp."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import (FlowField, Homography, TpsParams, bilinear_sample,
                       compose_synthetic_flow, control_point_grid)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")


@dataclass
class SynthConfig:
    crop: int = 256
    d0: float = 0.2
    ramp_end: float = 0.6
    # fractions of the crop size at difficulty 1
    max_corner_jitter: float = 0.15
    max_tps_displacement: float = 0.10
    tps_grid: int = 4
    max_rotation_deg: float = 0.0
    brightness: float = 0.2
    contrast: float = 0.3
    gamma_min: float = 0.7
    gamma_max: float = 1.4
    noise_sigma: float = 0.02
    max_retries: int = 16


@dataclass
class WarpSpec:
    homography: Homography
    tps: TpsParams
    difficulty: float
    rng_seed: int
    corner_displacements: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))


@dataclass
class TrainingPair:
    image_a: np.ndarray  # (h, w) float in [0, 1]
    image_b: np.ndarray
    flow: FlowField  # A -> B
    difficulty: float
    seed: int = 0


def difficulty_schedule(iteration: int, total_iterations: int, d0: float = 0.2,
                        ramp_end: float = 0.6) -> float:
    """Linear ramp from ``d0`` at 0 to 1 at ``ramp_end * total``; flat afterwards."""
    if total_iterations <= 0:
        return 1.0
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    t = iteration / (ramp_end * total_iterations)
    return float(min(1.0, d0 + (1.0 - d0) * t))


def _as_rng(rng) -> tuple[np.random.Generator, int]:
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    else:
        seed = int(rng)
    return np.random.default_rng(seed), seed


def _disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2 * np.pi, n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


def _four_point_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def _convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        u, v = b - a, c - b
        signs.append(u[0] * v[1] - u[1] * v[0])
    signs = np.array(signs)
    return bool(np.all(signs > 1e-6) or np.all(signs < -1e-6))


def sample_warp(rng, difficulty: float, config: SynthConfig | None = None) -> WarpSpec:
    """Random homography + TPS with amplitudes proportional to ``difficulty``.

    ``rng`` is either a seed or a ``numpy.random.Generator`` (a child seed is
    drawn from it so the result is reproducible from ``WarpSpec.rng_seed``).
    Homography corner jitter and TPS control displacements are drawn uniformly
    in disks whose radius is the configured fraction of the crop size.
    """
    cfg = config or SynthConfig()
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    gen, seed = _as_rng(rng)
    ctrl = control_point_grid(cfg.tps_grid).numpy()
    if difficulty == 0:
        return WarpSpec(Homography.identity(), TpsParams.identity(ctrl), 0.0, seed)
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    # crop size spans 2 normalized units
    corner_radius = 2.0 * cfg.max_corner_jitter * difficulty
    angle = np.deg2rad(cfg.max_rotation_deg) * difficulty * gen.uniform(-1.0, 1.0)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    h = None
    disp = np.zeros((4, 2))
    for attempt in range(cfg.max_retries):
        shrink = 0.5 ** attempt if attempt else 1.0
        disp = _disk(gen, 4, corner_radius * shrink)
        dst = corners @ rot.T + disp
        if not _convex(dst):
            continue
        try:
            h = Homography(_four_point_homography(corners, dst))
        except (ValueError, np.linalg.LinAlgError):
            continue
        break
    if h is None:
        log.warning("sample_warp: falling back to identity homography after %d retries",
                    cfg.max_retries)
        h = Homography.identity()
        disp = np.zeros((4, 2))
    tps_disp = _disk(gen, ctrl.shape[0], 2.0 * cfg.max_tps_displacement * difficulty)
    tps = TpsParams.fit(ctrl, ctrl + tps_disp)
    return WarpSpec(h, tps, float(difficulty), seed, disp)


def photometric_augment(image: np.ndarray, rng, difficulty: float,
                        config: SynthConfig | None = None) -> np.ndarray:
    """Gamma, contrast, brightness and Gaussian noise scaled by ``difficulty``."""
    cfg = config or SynthConfig()
    img = np.asarray(image, dtype=np.float64)
    if difficulty <= 0:
        return img.copy()
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    gamma = np.exp(gen.uniform(np.log(cfg.gamma_min), np.log(cfg.gamma_max)) * difficulty)
    contrast = 1.0 + gen.uniform(-cfg.contrast, cfg.contrast) * difficulty
    bright = gen.uniform(-cfg.brightness, cfg.brightness) * difficulty
    sigma = gen.uniform(0.0, cfg.noise_sigma) * difficulty
    out = np.clip(img, 0.0, 1.0) ** gamma
    out = (out - 0.5) * contrast + 0.5 + bright
    out = out + gen.normal(0.0, 1.0, img.shape) * sigma
    return np.clip(out, 0.0, 1.0)


def warp_image(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Pull ``image`` (the B frame) back into the A frame through ``flow``.

    Pixels with invalid flow are set to 0.
    """
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))
    coords = torch.from_numpy(np.nan_to_num(flow.map.reshape(-1, 2)))
    vals, _ = bilinear_sample(img, coords)
    out = vals.numpy().reshape(flow.height, flow.width)
    out[~flow.valid] = 0.0
    return out


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    elif img.dtype == np.uint16:
        img = img.astype(np.float64) / 65535.0
    elif img.dtype == bool:
        img = img.astype(np.float64)
    else:
        img = img.astype(np.float64)
        if img.max() > 1.0:
            img = img / 255.0
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        img = img @ np.array([0.299, 0.587, 0.114])[: img.shape[2]] if img.shape[2] == 3 \
            else img.mean(-1)
    return np.clip(img, 0.0, 1.0)


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"source image {h}x{w} smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return image[y:y + size, x:x + size]


def make_training_pair(source_image: np.ndarray, rng, difficulty: float,
                       config: SynthConfig | None = None,
                       photometric: bool = True) -> TrainingPair:
    """Build ``(A, B, flow A->B)`` from one photograph.

    B is the (augmented) crop itself; A is the crop resampled through the
    composite warp, so ``flow[y, x]`` is exactly the warp of pixel ``(x, y)``.
    """
    cfg = config or SynthConfig()
    gen, seed = _as_rng(rng)
    crop = random_crop(to_gray(source_image), cfg.crop, gen)
    spec = sample_warp(gen, difficulty, cfg)
    size = (cfg.crop, cfg.crop)
    if spec.difficulty == 0:
        flow = FlowField.identity(*size)  # exact, no normalization round-off
    else:
        flow = compose_synthetic_flow(spec.homography, spec.tps, size)
    image_a = warp_image(crop, flow)
    image_b = np.array(crop, dtype=np.float64)
    if photometric:
        image_a = photometric_augment(image_a, gen, difficulty, cfg)
        image_b = photometric_augment(image_b, gen, difficulty, cfg)
    return TrainingPair(image_a, image_b, flow, float(difficulty), seed)


# --- image sources -----------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_gray(np.asarray(im.convert("L")))


def scan_image_dir(directory) -> list[Path]:
    root = Path(directory)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images found under {root}")
    return files


def procedural_texture(rng, size: int = 320) -> np.ndarray:
    """Random photograph stand-in: blurred noise layers plus shapes and strokes."""
    import cv2

    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    img = np.zeros((size, size), dtype=np.float64)
    for scale in (4, 8, 16, 32):
        n = max(2, size // scale)
        layer = cv2.resize(gen.uniform(0, 1, (n, n)), (size, size),
                           interpolation=cv2.INTER_CUBIC)
        img += layer * gen.uniform(0.1, 0.4)
    img = (img - img.min()) / max(np.ptp(img), 1e-9) * 0.5 + 0.25
    canvas = (img * 255).astype(np.uint8)
    for _ in range(int(gen.integers(12, 30))):
        color = int(gen.integers(0, 256))
        kind = int(gen.integers(0, 4))
        cx, cy = (int(v) for v in gen.integers(0, size, 2))
        if kind == 0:
            axes = tuple(int(v) for v in gen.integers(4, size // 6, 2))
            cv2.ellipse(canvas, (cx, cy), axes, float(gen.uniform(0, 180)), 0, 360, color, -1)
        elif kind == 1:
            pts = gen.integers(-size // 8, size // 8, (int(gen.integers(3, 7)), 2)) + [cx, cy]
            cv2.fillPoly(canvas, [pts.astype(np.int32)], color)
        elif kind == 2:
            x2, y2 = (int(v) for v in gen.integers(0, size, 2))
            cv2.line(canvas, (cx, cy), (x2, y2), color, int(gen.integers(1, 5)))
        else:
            r = int(gen.integers(3, size // 10))
            cv2.circle(canvas, (cx, cy), r, color, int(gen.integers(1, 4)))
    out = canvas.astype(np.float64) / 255.0
    out = cv2.GaussianBlur(out, (0, 0), 0.7)
    return np.clip(out, 0.0, 1.0)


BUILTIN_TRAIN = ("camera", "astronaut", "coffee", "chelsea", "brick", "grass", "gravel",
                 "rocket", "moon", "coins", "clock")
BUILTIN_HELDOUT = ("immunohistochemistry", "hubble_deep_field", "retina", "cell")


def builtin_photographs(names=BUILTIN_TRAIN, min_size: int = 256) -> list[np.ndarray]:
    """Grayscale sample photographs bundled with scikit-image (those available offline)."""
    import skimage.data

    out = []
    for name in names:
        try:
            img = to_gray(getattr(skimage.data, name)())
        except Exception:  # optional download-only datasets
            continue
        if min(img.shape[:2]) < min_size:
            scale = min_size / min(img.shape[:2])
            img = np.asarray(Image.fromarray((img * 255).astype(np.uint8)).resize(
                (int(np.ceil(img.shape[1] * scale)), int(np.ceil(img.shape[0] * scale))),
                Image.BICUBIC), dtype=np.float64) / 255.0
        out.append(img)
    return out


class PairSource:
    """Deterministic pair generator: pair ``i`` depends only on ``(seed, i)``."""

    def __init__(self, images: list[np.ndarray] | None = None, seed: int = 0,
                 config: SynthConfig | None = None, procedural_fraction: float = 0.5,
                 photometric: bool = True):
        self.images = list(images) if images else []
        self.seed = int(seed)
        self.config = config or SynthConfig()
        self.procedural_fraction = procedural_fraction if self.images else 1.0
        self.photometric = photometric

    def pair_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, int(index)]).generate_state(2, np.uint64)[0]
                   >> np.uint64(1))

    def source(self, index: int, gen: np.random.Generator) -> np.ndarray:
        if gen.uniform() < self.procedural_fraction:
            return procedural_texture(gen, self.config.crop + 64)
        return self.images[int(gen.integers(0, len(self.images)))]

    def __call__(self, index: int, difficulty: float) -> TrainingPair:
        seed = self.pair_seed(index)
        gen = np.random.default_rng(seed)
        src = self.source(index, gen)
        pair = make_training_pair(src, gen, difficulty, self.config, self.photometric)
        pair.seed = seed
        return pair


def save_pair(pair: TrainingPair, out_dir, stem: str) -> tuple[Path, Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pa, pb, pf = out / f"{stem}_a.png", out / f"{stem}_b.png", out / f"{stem}.dalfflow"
    Image.fromarray(np.round(pair.image_a * 255).astype(np.uint8)).save(pa)
    Image.fromarray(np.round(pair.image_b * 255).astype(np.uint8)).save(pb)
    pair.flow.save(pf)
    return pa, pb, pf


def write_synth_dataset(src_dir, out_dir, n_pairs: int, seed: int,
                        config: SynthConfig | None = None) -> Path:
    """Write ``n_pairs`` pairs plus ``manifest.txt`` (paths, difficulty, seed per line)."""
    cfg = config or SynthConfig()
    images = [load_image(p) for p in scan_image_dir(src_dir)] if src_dir else []
    images = [im for im in images if min(im.shape) >= cfg.crop]
    source = PairSource(images, seed, cfg, procedural_fraction=0.0 if images else 1.0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_pairs):
        difficulty = difficulty_schedule(i, max(n_pairs - 1, 1), cfg.d0, cfg.ramp_end)
        pair = source(i, difficulty)
        pa, pb, pf = save_pair(pair, out, f"pair_{i:06d}")
        lines.append(f"{pa.name} {pb.name} {pf.name} {difficulty:.6f} {pair.seed}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest
