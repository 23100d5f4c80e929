"""Downstream applications: BoVW retrieval, local-affine match filtering and ARAP registration."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .inference import MatchSet

log = logging.getLogger(__name__)


# == retrieval ======================================================================

@dataclass
class Codebook:
    centroids: np.ndarray  # (k, D)
    n_samples: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def build_codebook(sample, k: int = 300, seed: int = 0, max_iter: int = 100) -> Codebook:
    """k-means (k-means++ seeding, single init, capped iterations), deterministic in ``seed``."""
    from sklearn.cluster import KMeans

    x = np.asarray(sample, dtype=np.float64)
    if k < 2:
        raise ValueError("codebook needs k >= 2")
    if x.shape[0] < k:
        raise ValueError(f"descriptor sample ({x.shape[0]}) smaller than k ({k})")
    if x.shape[0] == k:
        return Codebook(x.copy(), x.shape[0])
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # duplicate points -> fewer distinct clusters
        km.fit(x)
    return Codebook(km.cluster_centers_.astype(np.float64), x.shape[0])


def assign(descs, codebook: Codebook) -> np.ndarray:
    x = np.asarray(descs, dtype=np.float64)
    c = codebook.centroids
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None]
    return d2.argmin(axis=1)


def bovw_encode(descs, codebook: Codebook):
    """Hard-assignment histogram, L2-normalized. Returns ``(vector, ok)``;
    ``ok`` is False (and the vector zero) for an empty descriptor set."""
    x = np.asarray(descs, dtype=np.float64).reshape(-1, codebook.centroids.shape[1])
    hist = np.zeros(codebook.k)
    if x.shape[0] == 0:
        return hist, False
    np.add.at(hist, assign(x, codebook), 1.0)
    return hist / np.linalg.norm(hist), True


def retrieve(query, database, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest database encodings (Euclidean, ties by index)."""
    if k <= 0:
        raise ValueError("k must be positive")
    db = np.asarray(database, dtype=np.float64)
    d = np.linalg.norm(db - np.asarray(query, dtype=np.float64)[None], axis=1)
    return np.argsort(d, kind="stable")[:k]


def accuracy_at_k(rankings, query_labels, db_labels, k_max: int = 20) -> np.ndarray:
    """Mean fraction of the top-K results sharing the query label, K = 1..k_max.

    Per query, K is lowered to the number of database items with its label;
    queries whose label never occurs in the database are skipped.
    """
    db_labels = np.asarray(db_labels)
    curve = np.zeros(k_max)
    counts = np.zeros(k_max)
    for ranks, label in zip(rankings, query_labels):
        occ = int((db_labels == label).sum())
        if occ == 0:
            continue
        ranks = np.asarray(ranks)
        for k in range(1, k_max + 1):
            ke = min(k, occ)
            if len(ranks) < ke:
                raise ValueError(f"ranking has {len(ranks)} entries, need {ke}")
            curve[k - 1] += float((db_labels[ranks[:ke]] == label).mean())
            counts[k - 1] += 1
    return np.divide(curve, counts, out=np.zeros(k_max), where=counts > 0)


def normalized_auc(curve) -> float:
    """Area under an accuracy@K curve over K = 1..n, normalized to [0, 1]."""
    c = np.asarray(curve, dtype=np.float64)
    return float(c.mean()) if c.size else 0.0


# == local affine filtering ===========================================================

@dataclass
class FilterConfig:
    seed_radius_frac: float = 1 / 20  # of the image diagonal
    neighborhood_frac: float = 1 / 5
    base_threshold: float = 4.0  # px, rigid default
    relax: float = 2.0  # deformation tolerance multiplier
    ransac_iters: int = 128
    min_support: int = 6
    min_inlier_ratio: float = 0.25
    seed: int = 0


def _fit_affine(src: np.ndarray, dst: np.ndarray):
    x = np.hstack([src, np.ones((src.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(x, dst, rcond=None)
    return sol  # (3, 2)


def _residuals(model: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(src @ model[:2] + model[2] - dst, axis=1)


def local_affine_filter(matches: MatchSet, kp_a, kp_b, config: FilterConfig | None = None,
                        image_size=None) -> MatchSet:
    """Keep matches consistent with some local affine model.

    Seeds are the most confident matches (lowest ratio) after radius NMS in
    image A. Each seed's neighbourhood (A-side radius) runs RANSAC over
    3-point affine fits with the relaxed threshold; a model is accepted when
    its support reaches both ``min_support`` and ``min_inlier_ratio``.
    ``image_size = (h, w)`` sets the radii (keypoint extent if omitted).
    """
    cfg = config or FilterConfig()
    n = len(matches)
    if n < 6:
        log.warning("local_affine_filter: %d matches, passing through unfiltered", n)
        return matches
    a = np.asarray(getattr(kp_a, "coords", kp_a), dtype=np.float64)[matches.index_a]
    b = np.asarray(getattr(kp_b, "coords", kp_b), dtype=np.float64)[matches.index_b]
    if image_size is not None:
        diag = float(np.hypot(*image_size))
    else:
        diag = float(np.hypot(*(a.max(0) - a.min(0)))) or 1.0
    r_seed, r_nb = diag * cfg.seed_radius_frac, diag * cfg.neighborhood_frac
    thr = cfg.base_threshold * cfg.relax
    rng = np.random.default_rng(cfg.seed)
    tree = cKDTree(a)

    order = np.argsort(matches.ratios, kind="stable")
    taken = np.zeros(n, dtype=bool)
    seeds = []
    for i in order:
        if taken[i]:
            continue
        seeds.append(i)
        taken[tree.query_ball_point(a[i], r_seed)] = True

    keep = np.zeros(n, dtype=bool)
    for s in seeds:
        nb = np.asarray(tree.query_ball_point(a[s], r_nb), dtype=np.int64)
        if nb.size < max(cfg.min_support, 3):
            continue
        # all hypotheses at once: exact affine through 3 sampled matches each
        picks = np.stack([rng.choice(nb.size, 3, replace=False)
                          for _ in range(cfg.ransac_iters)])
        src = np.concatenate([a[nb[picks]], np.ones((len(picks), 3, 1))], axis=2)
        ok = np.abs(np.linalg.det(src)) > 1e-6
        if not ok.any():
            continue
        models = np.linalg.solve(src[ok], b[nb[picks[ok]]])  # (m, 3, 2)
        pred = a[nb] @ models[:, :2] + models[:, 2:3]
        counts = (np.linalg.norm(pred - b[nb], axis=2) < thr).sum(1)
        top = int(counts.argmax())
        best_count = int(counts[top])
        best = np.linalg.norm(pred[top] - b[nb], axis=1) < thr
        # one refinement round on the consensus set
        model = _fit_affine(a[nb[best]], b[nb[best]])
        inl = _residuals(model, a[nb], b[nb]) < thr
        if inl.sum() < best_count:
            inl = best
        if inl.sum() >= cfg.min_support and inl.mean() >= cfg.min_inlier_ratio:
            keep[nb[inl]] = True
    return matches.subset(np.flatnonzero(keep))


# == meshes and ARAP ===================================================================

@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uv: np.ndarray | None = None  # (V, 2) pixel coordinates

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if self.uv.shape[0] != self.vertices.shape[0]:
                raise ValueError("uv needs one row per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def write_ply(path, mesh: Mesh) -> None:
    uv = mesh.uv if mesh.uv is not None else np.zeros((mesh.n_vertices, 2))
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property double x", "property double y", "property double z",
             "property double u", "property double v",
             f"element face {len(mesh.faces)}", "property list uchar int vertex_indices",
             "end_header"]
    lines += [" ".join(repr(float(t)) for t in (*p, *q)) for p, q in zip(mesh.vertices, uv)]
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    from .errors import FormatError

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file", offset=0)
    if len(lines) < 2 or lines[1].split()[:2] != ["format", "ascii"]:
        raise FormatError("only ASCII PLY is supported", offset=len(lines[0]) + 1)
    n_v = n_f = 0
    props = []
    current = None
    i = 2
    while i < len(lines) and lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[:1] == ["element"]:
            current = tok[1]
            if current == "vertex":
                n_v = int(tok[2])
            elif current == "face":
                n_f = int(tok[2])
        elif tok[:1] == ["property"] and current == "vertex":
            props.append(tok[-1])
        i += 1
    if i == len(lines):
        raise FormatError("PLY header not terminated", offset=sum(len(x) + 1 for x in lines))
    body = lines[i + 1:]
    if len(body) < n_v + n_f:
        raise FormatError("truncated PLY body", offset=sum(len(x) + 1 for x in lines))
    vals = np.array([list(map(float, ln.split())) for ln in body[:n_v]]).reshape(n_v, len(props))
    col = {p: vals[:, j] for j, p in enumerate(props)}
    verts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    uv = np.stack([col["u"], col["v"]], axis=1) if "u" in col and "v" in col else None
    faces = []
    for ln in body[n_v:n_v + n_f]:
        tok = list(map(int, ln.split()))
        if tok[0] != 3:
            raise FormatError("only triangular faces are supported", offset=0)
        faces.append(tok[1:4])
    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), uv)


def cotangent_weights(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric edge weights ``0.5 (cot a + cot b)``, clamped at 0."""
    v, f = mesh.vertices, mesh.faces
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u, w = v[i] - v[o], v[j] - v[o]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        cot = (u * w).sum(1) / np.maximum(cross, 1e-15)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    n = mesh.n_vertices
    wmat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()
    wmat.data = np.maximum(wmat.data, 0.0)
    wmat.eliminate_zeros()
    return wmat


def kabsch(src: np.ndarray, dst: np.ndarray):
    """Rotation ``r`` and translation ``t`` minimizing ``|r src + t - dst|``."""
    ms, md = src.mean(0), dst.mean(0)
    h = (src - ms).T @ (dst - md)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, md - r @ ms


class ArapError(ValueError):
    pass


@dataclass
class RegistrationResult:
    vertices: np.ndarray
    energy_trace: list  # ARAP + constraint penalty after each global solve
    arap_energy: list = field(default_factory=list)
    residuals_2d: np.ndarray | None = None
    residuals_3d: np.ndarray | None = None


def _constraints(mesh_b: Mesh | None, correspondences):
    idx, target = correspondences
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    target = np.asarray(target)
    if target.ndim == 1:  # vertex <-> vertex
        if mesh_b is None:
            raise ArapError("vertex-to-vertex constraints need mesh_b")
        target = mesh_b.vertices[target.astype(np.int64)]
    return idx, np.asarray(target, dtype=np.float64).reshape(-1, 3)


def arap_register(mesh_a: Mesh, mesh_b: Mesh | None, correspondences, iterations: int = 50,
                  penalty: float = 1e4, tol: float = 0.0) -> RegistrationResult:
    """Deform ``mesh_a`` as rigidly as possible onto soft positional constraints.

    ``correspondences = (vertex indices of A, targets)`` where targets are
    either vertex indices of ``mesh_b`` or explicit (K, 3) points.
    """
    idx, target = _constraints(mesh_b, correspondences)
    if idx.size == 0:
        raise ArapError("no constraints given")
    if idx.size < 3 or np.linalg.matrix_rank(target - target.mean(0), tol=1e-9) < 2 \
            or np.linalg.matrix_rank(mesh_a.vertices[idx] - mesh_a.vertices[idx].mean(0),
                                     tol=1e-9) < 2:
        raise ArapError("need at least 3 non-collinear constraints")
    v = mesh_a.vertices
    n = mesh_a.n_vertices
    wmat = cotangent_weights(mesh_a)
    n_comp, labels = connected_components(wmat, directed=False)
    free = sorted(set(range(n_comp)) - set(labels[idx].tolist()))
    if free:
        raise ArapError(f"singular system: {len(free)} mesh component(s) without constraints "
                        f"(e.g. vertex {int(np.flatnonzero(labels == free[0])[0])})")
    deg = np.asarray(wmat.sum(1)).ravel()
    lap = sp.diags(deg) - wmat
    cmat = sp.coo_matrix((np.full(idx.size, penalty), (idx, idx)), shape=(n, n))
    system = (2.0 * lap + cmat).tocsc()
    try:
        lu = splu(system)
    except RuntimeError as exc:
        raise ArapError(f"singular global system: {exc}") from exc
    ct = np.zeros((n, 3))
    np.add.at(ct, idx, penalty * target)

    coo = wmat.tocoo()
    ei, ej, ew = coo.row, coo.col, coo.data  # both directions present
    e0 = v[ei] - v[ej]

    def rotations(vp):
        ep = vp[ei] - vp[ej]
        s = np.zeros((n, 3, 3))
        np.add.at(s, ei, ew[:, None, None] * e0[:, :, None] * ep[:, None, :])
        u, _, vt = np.linalg.svd(s)
        r = np.transpose(vt, (0, 2, 1)) @ np.transpose(u, (0, 2, 1))
        bad = np.linalg.det(r) < 0
        if bad.any():
            vt_fix = vt[bad].copy()
            vt_fix[:, 2] *= -1
            r[bad] = np.transpose(vt_fix, (0, 2, 1)) @ np.transpose(u[bad], (0, 2, 1))
        return r

    def energies(vp, r):
        ep = vp[ei] - vp[ej]
        res = ep - np.einsum("kab,kb->ka", r[ei], e0)
        arap = float((ew * (res * res).sum(1)).sum())
        pen = float(penalty * ((vp[idx] - target) ** 2).sum())
        return arap, arap + pen

    rot, trans = kabsch(v[idx], target)
    vp = v @ rot.T + trans
    trace, arap_trace = [], []
    for _ in range(iterations):
        r = rotations(vp)
        rhs = np.zeros((n, 3))
        np.add.at(rhs, ei, ew[:, None] * np.einsum("kab,kb->ka", r[ei] + r[ej], e0))
        vp = lu.solve(rhs + ct)
        arap, total = energies(vp, r)
        arap_trace.append(arap)
        trace.append(total)
        if tol > 0 and len(trace) > 1 and trace[-2] - trace[-1] <= tol * trace[-2]:
            break
    return RegistrationResult(vp, trace, arap_trace)


# == registration accuracy =============================================================

PIXEL_THRESHOLDS = (2.0, 3.0, 5.0)
CM_THRESHOLDS = (0.5, 1.0, 1.5)


def accuracy_at(residuals, thresholds) -> dict:
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        return {t: 0.0 for t in thresholds}
    return {t: float((r < t).mean()) for t in thresholds}


def interpolate_on_uv(mesh: Mesh, uv_points) -> np.ndarray:
    """3-D surface points of ``mesh`` at image positions (linear over the uv triangulation)."""
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

    lin = LinearNDInterpolator(mesh.uv, mesh.vertices)
    out = lin(np.asarray(uv_points, dtype=np.float64))
    miss = ~np.all(np.isfinite(out), axis=1)
    if miss.any():
        out[miss] = NearestNDInterpolator(mesh.uv, mesh.vertices)(uv_points[miss])
    return out


def project_to_uv(mesh: Mesh, points) -> np.ndarray:
    """Image position of the nearest ``mesh`` vertex to each 3-D point."""
    _, nn = cKDTree(mesh.vertices).query(np.asarray(points, dtype=np.float64))
    return mesh.uv[nn]


def registration_errors(result: RegistrationResult, mesh_a: Mesh, mesh_b: Mesh,
                        gt_uv_b, eval_vertices=None, units_per_cm: float = 1.0) -> dict:
    """Accuracy of the registered ``mesh_a`` against ground-truth image positions in B.

    ``gt_uv_b`` holds, per evaluated vertex of A, its true position in image
    B (from the ground-truth flow or TPS). The 3-D ground truth is the B
    surface at that position; the 2-D prediction is the image position of
    the B vertex nearest to the registered vertex.
    """
    sel = np.arange(mesh_a.n_vertices) if eval_vertices is None else np.asarray(eval_vertices)
    gt_uv = np.asarray(gt_uv_b, dtype=np.float64).reshape(-1, 2)
    ok = np.all(np.isfinite(gt_uv), axis=1)
    sel, gt_uv = sel[ok], gt_uv[ok]
    pred = result.vertices[sel]
    gt_xyz = interpolate_on_uv(mesh_b, gt_uv)
    res3 = np.linalg.norm(pred - gt_xyz, axis=1) / units_per_cm
    res2 = np.linalg.norm(project_to_uv(mesh_b, pred) - gt_uv, axis=1)
    result.residuals_2d, result.residuals_3d = res2, res3
    return {"px": accuracy_at(res2, PIXEL_THRESHOLDS), "cm": accuracy_at(res3, CM_THRESHOLDS)}


def constraints_from_matches(mesh_a: Mesh, mesh_b: Mesh, pts_a, pts_b, max_px: float = 4.0):
    """Pin the A vertex nearest (in uv) to each matched A keypoint onto the B surface.

    The vertex's offset from its keypoint is carried over to B (a local
    translation), so snapping to the vertex adds no error of its own.
    Matches farther than ``max_px`` from any vertex are dropped; each vertex
    keeps its first constraint.
    """
    pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    d, vid = cKDTree(mesh_a.uv).query(pa)
    ok = d <= max_px
    vid = vid[ok]
    pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)[ok] + mesh_a.uv[vid] - pa[ok]
    _, first = np.unique(vid, return_index=True)
    first = np.sort(first)
    return vid[first], interpolate_on_uv(mesh_b, pb[first])
