"""Matching metrics, robustness sweeps and dataset evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import FormatError
from .geometry import (FlowField, Homography, TpsParams, compose_synthetic_flow,
                       control_point_grid, transfer_points)
from .inference import KeypointSet, MatchSet, detect, extract, match_nn
from .synthgen import (IMAGE_SUFFIXES, SynthConfig, load_image, photometric_augment,
                       random_crop, sample_warp, to_gray, warp_image)

log = logging.getLogger(__name__)

TPS_MAGIC = "DALFTPS"


@dataclass
class EvalPair:
    image_a: np.ndarray
    image_b: np.ndarray
    flow: FlowField  # A -> B
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flow.map.shape[:2] != np.shape(self.image_a)[:2]:
            raise ValueError("flow dimensions must match image A")


@dataclass
class PairScores:
    ms: float
    mma: float | None
    repeatability: float
    s_gt: int
    k_gt: int
    n_kp_a: int
    n_kp_b: int
    threshold: float
    pair_id: str = ""


# -- metrics ----------------------------------------------------------------------

def _coords(kp) -> np.ndarray:
    c = kp.coords if isinstance(kp, KeypointSet) else kp
    return np.asarray(c, dtype=np.float64).reshape(-1, 2)


def correct_matches(matches: MatchSet, kp_a, kp_b, flow: FlowField,
                    threshold: float = 3.0) -> np.ndarray:
    """Boolean mask over ``matches``: B keypoint strictly within ``threshold`` of T(A)."""
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    a, b = _coords(kp_a), _coords(kp_b)
    mapped, valid = transfer_points(flow, a[matches.index_a])
    d = np.linalg.norm(np.nan_to_num(mapped, nan=np.inf) - b[matches.index_b], axis=1)
    return valid & (d < threshold)


def co_detected(kp_a, kp_b, flow: FlowField, threshold: float = 3.0):
    """Adjacency ``(n_a, n_b)`` of threshold-close pairs and the valid-transfer mask."""
    a, b = _coords(kp_a), _coords(kp_b)
    mapped, valid = transfer_points(flow, a)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=bool), valid
    d = np.linalg.norm(np.nan_to_num(mapped, nan=np.inf)[:, None] - b[None], axis=-1)
    return (d < threshold) & valid[:, None], valid


def matching_score(s_gt: int, n_kp_a: int, n_kp_b: int) -> float:
    denom = min(n_kp_a, n_kp_b)
    return s_gt / denom if denom > 0 else 0.0


def mma(matches: MatchSet, kp_a, kp_b, flow: FlowField, threshold: float = 3.0):
    """Correct matches over co-detected A keypoints; ``None`` if none are co-detected."""
    adj, _ = co_detected(kp_a, kp_b, flow, threshold)
    k_gt = adj.any(axis=1)
    if not k_gt.any():
        return None
    ok = correct_matches(matches, kp_a, kp_b, flow, threshold)
    hit = np.zeros(k_gt.shape[0], dtype=bool)
    hit[matches.index_a[ok]] = True
    return float((hit & k_gt).sum() / k_gt.sum())


def max_matching_size(adj: np.ndarray) -> int:
    if adj.size == 0 or not adj.any():
        return 0
    m = maximum_bipartite_matching(csr_matrix(adj.astype(np.int8)), perm_type="column")
    return int((m >= 0).sum())


def repeatability(kp_a, kp_b, flow: FlowField, threshold: float = 3.0) -> float:
    """Size of the maximum one-to-one matching of co-detected keypoints over
    ``min(#A with valid transfer, #B)``."""
    adj, valid = co_detected(kp_a, kp_b, flow, threshold)
    denom = min(int(valid.sum()), adj.shape[1])
    if denom == 0:
        return 0.0
    return max_matching_size(adj) / denom


def score_pair(kp_a, kp_b, matches: MatchSet, flow: FlowField, threshold: float = 3.0,
               pair_id: str = "") -> PairScores:
    a, b = _coords(kp_a), _coords(kp_b)
    ok = correct_matches(matches, a, b, flow, threshold)
    s_gt = int(ok.sum())
    adj, valid = co_detected(a, b, flow, threshold)
    k_gt = int(adj.any(axis=1).sum())
    hit = np.zeros(a.shape[0], dtype=bool)
    hit[matches.index_a[ok]] = True
    denom = min(int(valid.sum()), b.shape[0])
    return PairScores(
        ms=matching_score(s_gt, a.shape[0], b.shape[0]),
        mma=float((hit & adj.any(axis=1)).sum() / k_gt) if k_gt else None,
        repeatability=max_matching_size(adj) / denom if denom else 0.0,
        s_gt=s_gt, k_gt=k_gt, n_kp_a=a.shape[0], n_kp_b=b.shape[0],
        threshold=float(threshold), pair_id=pair_id)


def evaluate_pair(state, pair: EvalPair, threshold: float = 3.0, top_k: int = 2048,
                  mutual: bool = False, pair_id: str = "") -> PairScores:
    kp_a = detect(state, pair.image_a, top_k)
    kp_b = detect(state, pair.image_b, top_k)
    matches = match_nn(extract(state, pair.image_a, kp_a), extract(state, pair.image_b, kp_b),
                       mutual=mutual)
    return score_pair(kp_a, kp_b, matches, pair.flow, threshold, pair_id)


def mean_scores(scores: list[PairScores]) -> dict:
    """Unweighted means; absent MMA values are excluded from the MMA mean."""
    out = {"n_pairs": len(scores)}
    for key in ("ms", "repeatability"):
        out[key] = float(np.mean([getattr(s, key) for s in scores])) if scores else math.nan
    vals = [s.mma for s in scores if s.mma is not None]
    out["mma"] = float(np.mean(vals)) if vals else None
    return out


# -- synthetic evaluation pairs ------------------------------------------------------

def similarity_homography(angle_deg: float = 0.0, scale: float = 1.0,
                          size=(256, 256)) -> Homography:
    """Pixel-rigid rotation and isotropic scale about the centre of ``size=(h, w)``."""
    h, w = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = np.deg2rad(angle_deg)
    c, s = scale * np.cos(t), scale * np.sin(t)
    m = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1.0]])
    return Homography.from_pixel(m, size)


def _compose(similarity: Homography, spec_h: Homography) -> Homography:
    return Homography(spec_h.matrix @ similarity.matrix)


def make_eval_pair(image, rng=0, difficulty: float = 0.5, angle_deg: float = 0.0,
                   scale: float = 1.0, config: SynthConfig | None = None,
                   deformation: TpsParams | None = None, photometric: bool = False,
                   crop: bool = True) -> EvalPair:
    """Held-out style pair: B is the (cropped) image, A is B pulled back through
    rotation/scale, then the sampled homography and TPS."""
    cfg = config or SynthConfig()
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    img = to_gray(image)
    if crop:
        img = random_crop(img, cfg.crop, gen)
    size = img.shape[:2]
    spec = sample_warp(gen, difficulty, cfg)
    tps = deformation if deformation is not None else spec.tps
    hom = _compose(similarity_homography(angle_deg, scale, size), spec.homography)
    flow = compose_synthetic_flow(hom, tps, size)
    a = warp_image(img, flow)
    b = np.array(img, dtype=np.float64)
    if photometric:
        a = photometric_augment(a, gen, difficulty, cfg)
        b = photometric_augment(b, gen, difficulty, cfg)
    return EvalPair(a, b, flow, {"angle": angle_deg, "scale": scale, "difficulty": difficulty})


@dataclass
class SweepResult:
    kind: str  # rotation | scale
    levels: list
    ms: list

    def rows(self) -> list[dict]:
        return [{"level": lv, "ms": m} for lv, m in zip(self.levels, self.ms)]


def robustness_sweep(state, image, angles=None, scales=None, deformation: float = 0.0,
                     seed: int = 0, threshold: float = 3.0, top_k: int = 2048,
                     config: SynthConfig | None = None) -> SweepResult:
    """MS of ``state`` as rotation or scale grows on top of a fixed deformation.

    The same crop and deformation (drawn from ``seed`` at difficulty
    ``deformation``) are reused for every level.
    """
    if (angles is None) == (scales is None):
        raise ValueError("give exactly one of angles / scales")
    cfg = config or SynthConfig()
    gen = np.random.default_rng(seed)
    img = random_crop(to_gray(image), cfg.crop, gen)
    base = sample_warp(gen, deformation, cfg)
    kind, levels = ("rotation", list(angles)) if angles is not None else ("scale", list(scales))
    ms = []
    for lv in levels:
        ang, sc = (lv, 1.0) if kind == "rotation" else (0.0, lv)
        hom = _compose(similarity_homography(ang, sc, img.shape[:2]), base.homography)
        flow = compose_synthetic_flow(hom, base.tps, img.shape[:2])
        pair = EvalPair(warp_image(img, flow), img, flow, {"angle": ang, "scale": sc})
        ms.append(evaluate_pair(state, pair, threshold, top_k).ms)
    return SweepResult(kind, levels, ms)


# -- dataset loading -------------------------------------------------------------------

def write_tps_file(path, params: TpsParams) -> None:
    aff = params.affine.detach().double().reshape(-1).tolist()
    lines = [f"{TPS_MAGIC} 1 {params.n_c}", " ".join(repr(v) for v in aff)]
    for (cx, cy), (wx, wy) in zip(params.control_points.double().tolist(),
                                  params.weights.detach().double().tolist()):
        lines.append(f"{cx!r} {cy!r} {wx!r} {wy!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tps_file(path) -> TpsParams:
    text = Path(path).read_text()
    tokens = text.split()
    if len(tokens) < 3 or tokens[0] != TPS_MAGIC:
        raise FormatError("bad DALFTPS header", offset=0)
    if tokens[1] != "1":
        raise FormatError(f"unsupported DALFTPS version {tokens[1]}", offset=len(TPS_MAGIC) + 1)
    try:
        n_c = int(tokens[2])
        vals = [float(t) for t in tokens[3:]]
    except ValueError as exc:
        raise FormatError(f"non-numeric DALFTPS content: {exc}", offset=0) from exc
    if len(vals) != 6 + 4 * n_c:
        raise FormatError(f"DALFTPS expects {6 + 4 * n_c} numbers, got {len(vals)}",
                          offset=len(text))
    affine = torch.tensor(vals[:6], dtype=torch.float64).reshape(2, 3)
    rows = torch.tensor(vals[6:], dtype=torch.float64).reshape(n_c, 4)
    return TpsParams(affine, rows[:, 2:].clone(), rows[:, :2].clone())


def tps_to_flow(params: TpsParams, size_a, size_b=None) -> FlowField:
    """Dense flow of a TPS mapping normalized A coordinates to normalized B."""
    return compose_synthetic_flow(Homography.identity(), params, size_a, size_b)


def _find(directory: Path, stem: str):
    for p in sorted(directory.iterdir()):
        if p.stem.lower() == stem.lower() and p.suffix.lower() in IMAGE_SUFFIXES:
            return p
    return None


def load_pair_dir(directory) -> EvalPair:
    """``imageA.*``, ``imageB.*`` and either a DALFFLOW file or a DALFTPS file."""
    d = Path(directory)
    pa, pb = _find(d, "imageA"), _find(d, "imageB")
    if pa is None or pb is None:
        raise FileNotFoundError(f"{d}: imageA / imageB not found")
    a, b = load_image(pa), load_image(pb)
    flows = sorted(d.glob("*.dalfflow")) or sorted(d.glob("*.flow"))
    if flows:
        flow = FlowField.load(flows[0])
    else:
        tps = sorted(d.glob("*.tps"))
        if not tps:
            raise FileNotFoundError(f"{d}: no ground-truth flow or TPS file")
        flow = tps_to_flow(read_tps_file(tps[0]), a.shape[:2], b.shape[:2])
    return EvalPair(a, b, flow, {"dataset": d.parent.name, "pair": d.name})


def iter_dataset(directory):
    """Yield ``(pair_id, loader)``: from ``manifest.txt`` if present, else one
    subdirectory per pair."""
    root = Path(directory)
    manifest = root / "manifest.txt"
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            parts = line.split()
            if len(parts) < 3:
                continue
            pa, pb, pf = (root / p for p in parts[:3])

            def load(pa=pa, pb=pb, pf=pf):
                return EvalPair(load_image(pa), load_image(pb), FlowField.load(pf))
            yield Path(parts[2]).stem, load
        return
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        yield sub.name, (lambda sub=sub: load_pair_dir(sub))


@dataclass
class DatasetReport:
    scores: list
    failed: list  # (pair_id, reason)
    mean: dict

    def write_csv(self, path) -> None:
        write_scores_csv(path, self.scores, self.mean)


def dataset_eval(state, directory, threshold: float = 3.0, top_k: int = 2048,
                 mutual: bool = False) -> DatasetReport:
    scores, failed = [], []
    for pair_id, load in iter_dataset(directory):
        try:
            pair = load()
        except (OSError, ValueError) as exc:
            log.warning("pair %s unreadable: %s", pair_id, exc)
            failed.append((pair_id, str(exc)))
            continue
        scores.append(evaluate_pair(state, pair, threshold, top_k, mutual, pair_id))
    return DatasetReport(scores, failed, mean_scores(scores))


CSV_COLUMNS = ("pair_id", "n_kp_a", "n_kp_b", "s_gt", "k_gt", "ms", "mma", "repeatability")


def write_scores_csv(path, scores: list[PairScores], mean: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in scores:
            w.writerow([s.pair_id, s.n_kp_a, s.n_kp_b, s.s_gt, s.k_gt, repr(s.ms),
                        "" if s.mma is None else repr(s.mma), repr(s.repeatability)])
        if mean is not None and scores:
            w.writerow(["mean", "", "", "", "", repr(mean["ms"]),
                        "" if mean["mma"] is None else repr(mean["mma"]),
                        repr(mean["repeatability"])])
