"""Two-stage training loop: REINFORCE detector loss plus triplet descriptor losses."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .desc_train import descriptor_loss
from .detect_train import (detection_regularizer, gate_reward_matrix, reinforce_loss,
                           reward_matrix, sample_detections)
from .errors import TrainingError
from .geometry import transfer_points
from .network import DALFNet, ModelConfig
from .synthgen import PairSource, SynthConfig, TrainingPair, difficulty_schedule

log = logging.getLogger(__name__)

ABLATIONS = {
    # name: (distinct_only, invariant_only, fused_concat, staged, attention_fusion)
    "C1": (True, False, False, False, False),
    "C2": (False, True, False, False, False),
    "C3": (False, False, True, False, False),
    "C4": (False, False, True, True, False),
    "C5": (False, False, False, True, True),
}


@dataclass
class TrainConfig:
    stage: int = 1
    iterations_stage1: int = 80_000
    iterations_stage2: int = 100_000
    grad_accum: int = 4
    lam: float = 0.005
    tau: float = 1.5
    c: float = -7e-5
    margin: float = 0.5
    cell: int = 8
    n_c: int = 64
    curriculum_end: float = 0.6
    gate_start: float = 0.7
    d0: float = 0.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_desc_batch: int = 512
    bernoulli_acceptance: bool = False
    loss_reduction: str = "mean"  # sum | mean, for L_k and L_p
    seed: int = 0
    crop: int = 256
    checkpoint_every: int = 1000
    distinct_only: bool = False
    invariant_only: bool = False
    fused_concat: bool = False
    staged: bool = True
    attention_fusion: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.distinct_only and self.invariant_only:
            raise ValueError("distinct_only and invariant_only are exclusive")
        if self.n_c != int(round(math.sqrt(self.n_c))) ** 2:
            raise ValueError("n_c must be a square number (regular control grid)")

    @classmethod
    def ablation(cls, name: str, **overrides) -> "TrainConfig":
        d, i, cat, staged, attn = ABLATIONS[name.upper()]
        return cls(distinct_only=d, invariant_only=i, fused_concat=cat, staged=staged,
                   attention_fusion=attn, **overrides)

    @property
    def descriptor_kind(self) -> str:
        if self.distinct_only:
            return "distinct"
        if self.invariant_only:
            return "invariant"
        return "fused"

    @property
    def total_iterations(self) -> int:
        """Length of the combined schedule (curriculum and gate reference)."""
        return self.iterations_stage1 + self.iterations_stage2

    def stage_range(self, stage: int | None = None) -> tuple[int, int]:
        stage = self.stage if stage is None else stage
        if not self.staged:
            return 0, self.total_iterations
        if stage == 1:
            return 0, self.iterations_stage1
        return self.iterations_stage1, self.total_iterations

    def loss_kinds(self, stage: int | None = None) -> tuple:
        stage = self.stage if stage is None else stage
        if self.distinct_only:
            return ("distinct",)
        if self.invariant_only:
            return ("invariant",)
        if self.staged and stage == 1:
            return ("distinct",)
        return ("distinct", "invariant", "fused")

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        return dataclasses.replace(base, tps_grid=int(round(math.sqrt(self.n_c))),
                                   attention=self.attention_fusion and not self.fused_concat,
                                   descriptor=self.descriptor_kind)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def total_loss(l_k, l_p, l_d_components, lam: float):
    """``L = L_k + L_p + lam * sum(L_d)``; NaN components abort training."""
    comps = list(l_d_components.values()) if isinstance(l_d_components, dict) \
        else list(l_d_components)
    for name, value in [("L_k", l_k), ("L_p", l_p)] + [(f"L_d[{i}]", v)
                                                        for i, v in enumerate(comps)]:
        if not math.isfinite(float(value.detach() if isinstance(value, torch.Tensor)
                                   else value)):
            raise TrainingError(f"non-finite loss component {name} = {float(value)}")
    d_sum = sum(comps) if comps else 0.0
    return l_k + l_p + lam * d_sum


@dataclass
class LossBreakdown:
    iteration: int
    l_k: float
    l_p: float
    l_d: dict
    total: float
    difficulty: float
    n_accepted: tuple = (0, 0)
    n_rewarded: int = 0
    n_desc: int = 0
    gated: bool = False
    updated: bool = False

    def log_line(self) -> str:
        kinds = " ".join(f"{self.l_d.get(k, float('nan')):.6f}"
                         for k in ("distinct", "invariant", "fused"))
        return (f"{self.iteration} {self.l_k:.6f} {self.l_p:.6f} {kinds} "
                f"{self.difficulty:.4f} {self.total:.6f}")


LOG_HEADER = "iteration L_k L_p L_d_distinct L_d_invariant L_d_fused difficulty L_total"


class Trainer:
    """Owns the model, optimizer, RNG and gradient-accumulation state of one stage."""

    def __init__(self, model: DALFNet, config: TrainConfig,
                 source: Callable[[int, float], TrainingPair] | None = None,
                 start_iteration: int | None = None):
        self.model = model
        self.config = config
        self.source = source
        self.iteration = config.stage_range()[0] if start_iteration is None else start_iteration
        self.generator = torch.Generator().manual_seed(config.seed * 1000 + config.stage)
        self.accum = 0
        self.history: list[LossBreakdown] = []
        self.frozen = config.staged and config.stage == 2
        for p in model.encoder.parameters():
            p.requires_grad_(not self.frozen)
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=config.lr,
                                          betas=(config.beta1, config.beta2),
                                          eps=config.adam_eps)

    # -- schedule -------------------------------------------------------------
    def difficulty(self, iteration: int | None = None) -> float:
        it = self.iteration if iteration is None else iteration
        total = self.config.total_iterations
        return difficulty_schedule(min(it, total), total, self.config.d0,
                                   self.config.curriculum_end)

    def gate_enabled(self, iteration: int | None = None) -> bool:
        it = self.iteration if iteration is None else iteration
        return it >= self.config.gate_start * self.config.total_iterations

    # -- one forward/backward -------------------------------------------------
    def _set_modes(self):
        self.model.train()
        if self.frozen:
            self.model.encoder.eval()

    def step(self, pair: TrainingPair | None = None) -> LossBreakdown:
        cfg = self.config
        difficulty = self.difficulty()
        if pair is None:
            pair = self.source(self.iteration, difficulty)
        self._set_modes()
        model = self.model
        kinds = cfg.loss_kinds()
        img = torch.from_numpy(np.stack([pair.image_a, pair.image_b])[:, None]).float()
        out = model.backbone(img)
        sa = sample_detections(out.heatmap[0], self.generator, cfg.cell,
                               cfg.bernoulli_acceptance)
        sb = sample_detections(out.heatmap[1], self.generator, cfg.cell,
                               cfg.bernoulli_acceptance)
        acc_a, acc_b = sa.accepted_only(), sb.accepted_only()
        rewards = reward_matrix(acc_a.coords.numpy(), acc_b.coords.numpy(), pair.flow, cfg.tau)

        # correspondence batch: accepted A detections with valid transfer
        pa = acc_a.coords.double().numpy()
        mapped, valid = transfer_points(pair.flow, pa) if len(pa) else (pa, np.zeros(0, bool))
        sel = np.flatnonzero(valid)
        if len(sel) > cfg.max_desc_batch:
            perm = torch.randperm(len(sel), generator=self.generator).numpy()
            sel = np.sort(sel[perm[:cfg.max_desc_batch]])
        l_d = {}
        if len(sel) >= 2:
            kp_a = torch.from_numpy(pa[sel]).float()
            kp_b = torch.from_numpy(mapped[sel]).float()
            da = model.describe(img, out, kp_a, kinds, index=0)
            db = model.describe(img, out, kp_b, kinds, index=1)
            for k in kinds:
                l_d[k] = descriptor_loss(da[k], db[k], cfg.margin)
        else:
            log.info("iteration %d: %d valid correspondences, descriptor loss skipped",
                     self.iteration, len(sel))

        gated = False
        if self.gate_enabled() and rewards.sum() > 0:
            rewards = self._gate(img, out, acc_a, acc_b, rewards)
            gated = True

        l_k = reinforce_loss(sa, sb, rewards=rewards, reduction=cfg.loss_reduction)
        l_p = detection_regularizer([sa, sb], cfg.c, reduction=cfg.loss_reduction)
        loss = total_loss(l_k, l_p, l_d, cfg.lam)
        (loss / cfg.grad_accum).backward()
        self.accum += 1
        updated = False
        if self.accum >= cfg.grad_accum:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
            self.accum = 0
            updated = True
        l_d_f = {k: v.item() for k, v in l_d.items()}
        lk, lp = l_k.item(), l_p.item()
        rec = LossBreakdown(self.iteration, lk, lp, l_d_f, total_loss(lk, lp, l_d_f, cfg.lam),
                            difficulty, (len(acc_a), len(acc_b)), int(rewards.sum()),
                            len(sel), gated, updated)
        self.history.append(rec)
        self.iteration += 1
        return rec

    def _gate(self, img, out, acc_a, acc_b, rewards):
        kind = self.config.descriptor_kind
        kinds = {"fused": ("fused",), "distinct": ("distinct",), "invariant": ("invariant",)}[kind]
        ia = torch.unique(torch.nonzero(rewards > 0)[:, 0])
        ib = torch.unique(torch.nonzero(rewards > 0)[:, 1])
        with torch.no_grad():
            was_training = self.model.training
            self.model.eval()
            da = self.model.describe(img, out, acc_a.coords[ia].float(), kinds, 0)[kind]
            db = self.model.describe(img, out, acc_b.coords[ib].float(), kinds, 1)[kind]
            self.model.train(was_training)
            self._set_modes()
        full_a = torch.zeros(len(acc_a), da.shape[1])
        full_b = torch.zeros(len(acc_b), db.shape[1])
        full_a[ia] = da
        full_b[ib] = db
        return gate_reward_matrix(rewards, full_a, full_b)

    # -- persistence ----------------------------------------------------------
    def checkpoint_payload(self, extra: dict | None = None):
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for key, val in st.items():
                tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val)
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p in self.params:
            if p.grad is not None:
                tensors[f"grad/{names[id(p)]}"] = p.grad
        tensors["rng/torch"] = self.generator.get_state()
        groups = [{k: v for k, v in g.items()} for g in opt["param_groups"]]
        header = {
            "model_config": self.model.config.to_dict(),
            "train_config": self.config.to_dict(),
            "iteration": self.iteration,
            "stage": self.config.stage,
            "accum": self.accum,
            "optimizer": groups,
            "stats": {"history_tail": [dataclasses.asdict(r) for r in self.history[-200:]]},
        }
        header.update(extra or {})
        return header, tensors

    def save(self, path, extra: dict | None = None) -> Path:
        header, tensors = self.checkpoint_payload(extra)
        ckpt_io.write(path, header, tensors)
        return Path(path)

    @classmethod
    def resume(cls, path, source=None) -> "Trainer":
        header, tensors = ckpt_io.read(path)
        model = model_from_checkpoint(header, tensors)
        config = TrainConfig(**header["train_config"])
        trainer = cls(model, config, source, start_iteration=header["iteration"])
        trainer.accum = header.get("accum", 0)
        trainer.generator.set_state(tensors["rng/torch"])
        opt_state = {}
        for name, t in tensors.items():
            if name.startswith("optim/"):
                _, idx, key = name.split("/", 2)
                val = t.clone()
                opt_state.setdefault(int(idx), {})[key] = val
        if opt_state:
            trainer.optimizer.load_state_dict({"state": opt_state,
                                               "param_groups": header["optimizer"]})
        named = dict(model.named_parameters())
        for name, t in tensors.items():
            if name.startswith("grad/"):
                named[name[5:]].grad = t.clone()
        hist = header.get("stats", {}).get("history_tail", [])
        trainer.history = [LossBreakdown(**{**r, "n_accepted": tuple(r["n_accepted"])})
                           for r in hist]
        return trainer

    # -- loop -----------------------------------------------------------------
    def run(self, n_steps: int | None = None, out_dir=None, log_file=None,
            progress: Callable[[LossBreakdown], None] | None = None) -> "Trainer":
        start, end = self.config.stage_range()
        stop = end if n_steps is None else min(end, self.iteration + n_steps)
        out = Path(out_dir) if out_dir else None
        fh = None
        if log_file is not None:
            log_file = Path(log_file)
            log_file.parent.mkdir(parents=True, exist_ok=True)
            new = not log_file.exists()
            fh = open(log_file, "a", buffering=1)  # line-buffered so the log can be tailed
            if new:
                fh.write(LOG_HEADER + "\n")
        try:
            while self.iteration < stop:
                rec = self.step()
                if fh:
                    fh.write(rec.log_line() + "\n")
                if progress:
                    progress(rec)
                if out and self.config.checkpoint_every and \
                        self.iteration % self.config.checkpoint_every == 0:
                    self.save(out / f"stage{self.config.stage}_{self.iteration:07d}.ckpt")
        finally:
            if fh:
                fh.close()
        return self


def model_from_checkpoint(header: dict, tensors: dict) -> DALFNet:
    model = DALFNet(ModelConfig(**header["model_config"]))
    state = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    ref = model.state_dict()
    for k, v in state.items():
        if k in ref:
            state[k] = v.to(ref[k].dtype)
    model.load_state_dict(state)
    model.eval()
    return model


def load_model(path) -> DALFNet:
    header, tensors = ckpt_io.read(path)
    model = model_from_checkpoint(header, tensors)
    model.iteration = header.get("iteration", 0)
    model.stage = header.get("stage", 0)
    return model


def default_source(config: TrainConfig, images=None, synth: SynthConfig | None = None):
    synth = synth or SynthConfig(crop=config.crop, d0=config.d0,
                                 ramp_end=config.curriculum_end)
    return PairSource(images, config.seed, synth)


def run_stage(config: TrainConfig, source=None, out_dir=None,
              stage1_checkpoint=None, model: DALFNet | None = None,
              resume=None, log_file=None, progress=None) -> Path:
    """Run one stage to completion and return the path of its final checkpoint.

    Stage 2 of a staged configuration requires the final stage-1 checkpoint.
    """
    out = Path(out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    source = source or default_source(config)
    if resume is not None:
        trainer = Trainer.resume(resume, source)
    else:
        if config.staged and config.stage == 2:
            if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
                raise TrainingError("stage 2 requires a completed stage-1 checkpoint")
            header, tensors = ckpt_io.read(stage1_checkpoint)
            if header.get("stage") != 1:
                raise TrainingError(f"{stage1_checkpoint} is not a stage-1 checkpoint")
            prev = model_from_checkpoint(header, tensors)
            model = DALFNet(config.model_config(prev.config))
            model.load_state_dict(prev.state_dict())
        elif model is None:
            torch.manual_seed(config.seed)
            model = DALFNet(config.model_config())
        trainer = Trainer(model, config, source)
    trainer.run(out_dir=out, log_file=log_file, progress=progress)
    final = out / f"stage{config.stage}_final.ckpt"
    trainer.save(final)
    return final
