"""Deterministic keypoint extraction, description and nearest-neighbour matching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .network import DALFNet, DescriptorSet, _as_batch

KP_MAGIC = "DALFKP"
DESC_MAGIC = b"DALFDESC"
DESC_VERSION = 1


@dataclass
class KeypointSet:
    coords: np.ndarray  # (N, 2) float64, (x, y)
    scores: np.ndarray  # (N,) sigmoid scores, nonincreasing

    def __len__(self) -> int:
        return self.coords.shape[0]

    def save(self, path) -> None:
        lines = [f"{KP_MAGIC} 1 {len(self)}"]
        lines += [f"{x!r} {y!r} {s!r}" for (x, y), s in
                  zip(self.coords.tolist(), self.scores.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "KeypointSet":
        lines = Path(path).read_text().splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 3 or head[0] != KP_MAGIC:
            raise FormatError("bad keypoint header", offset=0)
        if head[1] != "1":
            raise FormatError(f"unsupported keypoint version {head[1]}", offset=len(KP_MAGIC) + 1)
        n = int(head[2])
        rows = [ln.split() for ln in lines[1:1 + n]]
        if len(rows) != n or any(len(r) != 3 for r in rows):
            raise FormatError(f"expected {n} keypoint rows", offset=len(lines[0]) + 1)
        arr = np.array(rows, dtype=np.float64).reshape(n, 3)
        return cls(arr[:, :2].copy(), arr[:, 2].copy())


@dataclass
class MatchSet:
    index_a: np.ndarray  # (M,) int64, strictly increasing
    index_b: np.ndarray
    distances: np.ndarray
    ratios: np.ndarray

    def __len__(self) -> int:
        return self.index_a.shape[0]

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0)
        return cls(z.astype(np.int64), z.astype(np.int64), z, z)

    def subset(self, sel) -> "MatchSet":
        return MatchSet(self.index_a[sel], self.index_b[sel], self.distances[sel], self.ratios[sel])

    @property
    def pairs(self) -> np.ndarray:
        return np.stack([self.index_a, self.index_b], axis=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for ia, ib, d, r in zip(self.index_a.tolist(), self.index_b.tolist(),
                                    self.distances.tolist(), self.ratios.tolist()):
                fh.write(f"{ia} {ib} {d!r} {r!r}\n")

    @classmethod
    def load(cls, path) -> "MatchSet":
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not rows:
            return cls.empty()
        if any(len(r) != 4 for r in rows):
            raise FormatError("match rows need 4 fields", offset=0)
        arr = np.array(rows, dtype=np.float64)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], arr[:, 3])


# -- descriptor file -----------------------------------------------------------

def encode_descriptors(rows: np.ndarray) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("descriptor rows must be 2-D")
    n, d = rows.shape
    return DESC_MAGIC + struct.pack("<BII", DESC_VERSION, n, d) + rows.tobytes()


def decode_descriptors(data: bytes) -> np.ndarray:
    if data[:8] != DESC_MAGIC:
        raise FormatError("bad DALFDESC magic", offset=0)
    if len(data) < 17:
        raise FormatError("truncated DALFDESC header", offset=len(data))
    version, n, d = struct.unpack_from("<BII", data, 8)
    if version != DESC_VERSION:
        raise FormatError(f"unsupported DALFDESC version {version}", offset=8)
    need = 17 + 4 * n * d
    if len(data) != need:
        raise FormatError(f"DALFDESC payload is {len(data) - 17} bytes, expected {need - 17}",
                          offset=min(len(data), need))
    return np.frombuffer(data, dtype="<f4", offset=17).reshape(n, d).astype(np.float32)


def save_descriptors(path, rows) -> None:
    Path(path).write_bytes(encode_descriptors(np.asarray(rows)))


def load_descriptors(path) -> np.ndarray:
    return decode_descriptors(Path(path).read_bytes())


# -- detection -------------------------------------------------------------------

def nms(heatmap, window: int = 3):
    """Strict local maxima with positive logit; returns ``(coords (N, 2), scores)``.

    Plateaus are suppressed. Output is in raster order.
    """
    hm = np.asarray(heatmap.detach().cpu() if isinstance(heatmap, torch.Tensor) else heatmap,
                    dtype=np.float64)
    r = window // 2
    h, w = hm.shape
    padded = np.pad(hm, r, constant_values=-np.inf)
    keep = hm > 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy or dx:
                keep &= hm > padded[r + dy:r + dy + h, r + dx:r + dx + w]
    ys, xs = np.nonzero(keep)
    scores = 1.0 / (1.0 + np.exp(-hm[ys, xs]))
    return np.stack([xs, ys], axis=1).astype(np.float64), scores


def _image_tensor(state: DALFNet, image) -> torch.Tensor:
    return _as_batch(np.asarray(image, dtype=np.float32)).to(next(state.parameters()).dtype)


@torch.no_grad()
def detect(state: DALFNet, image, top_k: int = 2048, mask=None) -> KeypointSet:
    """NMS on the heatmap, sort by score, keep ``top_k``.

    ``mask`` (h, w bool) optionally restricts detections to object pixels.
    """
    state.eval()
    heat = state.backbone(_image_tensor(state, image)).heatmap[0]
    coords, scores = nms(heat)
    if mask is not None:
        m = np.asarray(mask, bool)
        inside = m[coords[:, 1].astype(int), coords[:, 0].astype(int)]
        coords, scores = coords[inside], scores[inside]
    order = np.argsort(-scores, kind="stable")[:max(int(top_k), 0)]
    return KeypointSet(coords[order], scores[order])


@torch.no_grad()
def extract(state: DALFNet, image, keypoints) -> DescriptorSet:
    """Descriptors of the checkpoint's configured kind, one row per keypoint."""
    state.eval()
    kp = keypoints.coords if isinstance(keypoints, KeypointSet) else keypoints
    kind = state.config.descriptor
    img = _image_tensor(state, image)
    kp_t = torch.as_tensor(np.asarray(kp, dtype=np.float64).reshape(-1, 2), dtype=img.dtype)
    if kp_t.shape[0] == 0:
        return DescriptorSet(torch.zeros(0, state.config.output_dim), kind)
    out = state.backbone(img)
    res = state.describe(img, out, kp_t, (kind,), 0)
    return DescriptorSet(res[kind], kind, res.get("invalid_flags"))


def detect_and_describe(state: DALFNet, image, top_k: int = 2048, mask=None):
    kps = detect(state, image, top_k, mask)
    return kps, extract(state, image, kps)


# -- matching ---------------------------------------------------------------------

def _rows(d) -> np.ndarray:
    if isinstance(d, DescriptorSet):
        d = d.rows
    if isinstance(d, torch.Tensor):
        d = d.detach().cpu().numpy()
    return np.asarray(d, dtype=np.float64)


def sphere_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(2.0 - 2.0 * (a @ b.T), 0.0, None))


def match_nn(desc_a, desc_b, mutual: bool = False) -> MatchSet:
    """Nearest B row for every A row, with the nearest / second-nearest ratio.

    Ties go to the lowest index. With a single B row the ratio is 0; when
    both nearest distances are 0 it is 1.
    """
    a, b = _rows(desc_a), _rows(desc_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return MatchSet.empty()
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    dist = sphere_distances(a, b)
    rows = np.arange(a.shape[0])
    nn = dist.argmin(axis=1)
    d1 = dist[rows, nn]
    if b.shape[0] > 1:
        rest = dist.copy()
        rest[rows, nn] = np.inf
        d2 = rest.min(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1.0), 1.0)
    else:
        ratio = np.zeros_like(d1)
    keep = rows
    if mutual:
        back = dist.argmin(axis=0)
        keep = rows[back[nn] == rows]
    return MatchSet(keep.astype(np.int64), nn[keep].astype(np.int64), d1[keep], ratio[keep])


def ratio_top_n(matches: MatchSet, n: int = 200) -> MatchSet:
    """The ``n`` matches with the smallest ratio, kept in their original order."""
    if n <= 0:
        return matches.subset(np.zeros(0, dtype=np.int64))
    if n >= len(matches):
        return matches
    best = np.sort(np.argsort(matches.ratios, kind="stable")[:n])
    return matches.subset(best)
