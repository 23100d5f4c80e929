"""Cell-wise probabilistic keypoint sampling and the policy-gradient detector loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import FlowField, transfer_points

PAD_LOGIT = -1e4


@dataclass
class DetectionSampleSet:
    """One sample per cell of a heatmap.

    ``coords`` are integer pixel coordinates ``(x, y)``; ``log_p`` is the
    within-cell log-softmax of the drawn pixel and ``logits`` its raw logit
    (both keep the autograd graph); ``accepted`` is the acceptance decision.
    """

    coords: torch.Tensor  # (n_cells, 2) long
    log_p: torch.Tensor  # (n_cells,)
    logits: torch.Tensor  # (n_cells,)
    accepted: torch.Tensor  # (n_cells,) bool
    grid_shape: tuple
    cell: int

    @property
    def p(self) -> torch.Tensor:
        return self.log_p.exp()

    @property
    def log_prob(self) -> torch.Tensor:
        """``log(sigma(l) * p)`` for every sample."""
        return F.logsigmoid(self.logits) + self.log_p

    def subset(self, mask: torch.Tensor) -> "DetectionSampleSet":
        return DetectionSampleSet(self.coords[mask], self.log_p[mask], self.logits[mask],
                                  self.accepted[mask], self.grid_shape, self.cell)

    def accepted_only(self) -> "DetectionSampleSet":
        return self.subset(self.accepted)

    def __len__(self) -> int:
        return self.coords.shape[0]


def sample_detections(heatmap: torch.Tensor, generator: torch.Generator | None = None,
                      cell: int = 8, bernoulli: bool = False) -> DetectionSampleSet:
    """Draw one pixel per ``cell x cell`` block from the softmax over its logits.

    Acceptance is ``logit > 0`` (sigma > 0.5) unless ``bernoulli`` is set, in
    which case each sample is accepted with probability ``sigma(logit)``.
    Heatmaps whose size is not a multiple of ``cell`` are padded with a large
    negative logit.
    """
    h, w = heatmap.shape
    ph, pw = (-h) % cell, (-w) % cell
    hm = F.pad(heatmap, (0, pw, 0, ph), value=PAD_LOGIT) if ph or pw else heatmap
    gh, gw = hm.shape[0] // cell, hm.shape[1] // cell
    cells = hm.reshape(gh, cell, gw, cell).permute(0, 2, 1, 3).reshape(gh * gw, cell * cell)
    logp_all = F.log_softmax(cells, dim=-1)
    with torch.no_grad():
        idx = torch.multinomial(logp_all.exp().double(), 1, generator=generator)[:, 0]
    rows = torch.arange(gh * gw)
    log_p = logp_all[rows, idx]
    logits = cells[rows, idx]
    cy, cx = rows // gw, rows % gw
    y = cy * cell + idx // cell
    x = cx * cell + idx % cell
    with torch.no_grad():
        if bernoulli:
            u = torch.rand(gh * gw, generator=generator, dtype=torch.float64)
            accepted = u < torch.sigmoid(logits.detach().double())
        else:
            accepted = logits.detach() > 0
        accepted &= (x < w) & (y < h)
    return DetectionSampleSet(torch.stack([x, y], dim=-1), log_p, logits, accepted,
                              (gh, gw), cell)


def reward(point_a, detections_b, flow: FlowField, tau: float = 1.5) -> int:
    """1 if some B detection lies strictly within ``tau`` of the transferred point."""
    dets = np.asarray(detections_b, dtype=np.float64).reshape(-1, 2)
    if dets.shape[0] == 0:
        return 0
    mapped, valid = transfer_points(flow, np.asarray(point_a, dtype=np.float64)[None])
    if not valid[0]:
        return 0
    d = np.linalg.norm(dets - mapped[0], axis=1)
    return int(np.any(d < tau))


def reward_matrix(coords_a, coords_b, flow: FlowField, tau: float = 1.5) -> torch.Tensor:
    """Pairwise rewards ``R[x, y] = |T(a_x) - b_y| < tau`` (0 for invalid transfers)."""
    a = np.asarray(coords_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(coords_b, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return torch.zeros(a.shape[0], b.shape[0], dtype=torch.float64)
    mapped, valid = transfer_points(flow, a)
    mapped = np.nan_to_num(mapped, nan=-1e9)
    d = np.linalg.norm(mapped[:, None, :] - b[None, :, :], axis=-1)
    r = (d < tau) & valid[:, None]
    return torch.from_numpy(r.astype(np.float64))


def reinforce_loss(samples_a: DetectionSampleSet, samples_b: DetectionSampleSet,
                   flow: FlowField | None = None, tau: float = 1.5,
                   rewards: torch.Tensor | None = None,
                   reduction: str = "sum") -> torch.Tensor:
    """Surrogate ``-sum_{x,y} R(x,y) (log P(x) + log P(y))`` over accepted pairs.

    ``rewards`` (accepted-A x accepted-B) may be passed pre-computed, e.g. after
    reliability gating; otherwise it is derived from ``flow``. With
    ``reduction="mean"`` the sum is divided by ``|P_A| * |P_B|``, i.e. the
    sample mean over the Cartesian product.
    """
    acc_a = samples_a.accepted_only()
    acc_b = samples_b.accepted_only()
    if len(acc_a) == 0 or len(acc_b) == 0:
        return samples_a.logits.sum() * 0.0
    if rewards is None:
        rewards = reward_matrix(acc_a.coords.numpy(), acc_b.coords.numpy(), flow, tau)
    r = rewards.to(acc_a.logits.dtype)
    lp_a = acc_a.log_prob
    lp_b = acc_b.log_prob
    loss = -((r.sum(1) * lp_a).sum() + (r.sum(0) * lp_b).sum())
    if reduction == "mean":
        loss = loss / (len(acc_a) * len(acc_b))
    return loss


def detection_regularizer(samples, c: float = -7e-5, reduction: str = "sum") -> torch.Tensor:
    """``-c * sum log p(x)`` over every sample (accepted or not).

    ``reduction="mean"`` divides by the number of samples.
    """
    if isinstance(samples, DetectionSampleSet):
        samples = [samples]
    log_p = torch.cat([s.log_prob for s in samples])
    total = -(log_p.sum()) * c
    if reduction == "mean" and log_p.numel():
        total = total / log_p.numel()
    return total


def reliability_gate(rewards: torch.Tensor, desc_a: torch.Tensor, desc_b: torch.Tensor,
                     enabled: bool = True) -> torch.Tensor:
    """Zero the reward of rewarded pairs whose descriptors fail the NN test.

    Row ``k`` of ``desc_a`` and ``desc_b`` describes the two members of pair
    ``k``. A pair keeps its reward only if ``desc_b[k]`` is the nearest
    neighbour of ``desc_a[k]`` among all ``desc_b`` rows and vice versa.
    """
    if not enabled or rewards.numel() == 0:
        return rewards
    with torch.no_grad():
        sim = desc_a @ desc_b.T
        k = torch.arange(sim.shape[0])
        ok = (sim.argmax(dim=1) == k) & (sim.argmax(dim=0) == k)
    return rewards * ok.to(rewards.dtype)


def gate_reward_matrix(rewards: torch.Tensor, desc_a: torch.Tensor,
                       desc_b: torch.Tensor) -> torch.Tensor:
    """Apply :func:`reliability_gate` to the nonzero entries of a reward matrix.

    ``desc_a`` / ``desc_b`` hold descriptors of all accepted A / B samples.
    """
    ia, ib = torch.nonzero(rewards > 0, as_tuple=True)
    if ia.numel() == 0:
        return rewards
    gated = reliability_gate(rewards[ia, ib], desc_a[ia], desc_b[ib], True)
    out = rewards.clone()
    out[ia, ib] = gated
    return out
