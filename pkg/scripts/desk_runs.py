"""Reduced-budget training runs used by the acceptance suite.

Writes checkpoints to ``<out>/C1`` (distinct-only, single stage) and
``<out>/C5`` (fused, staged). Existing final checkpoints are reused and an
interrupted run continues from its latest periodic checkpoint.
"""
import argparse
import logging
from pathlib import Path

import torch

from dalf.synthgen import builtin_photographs
from dalf.trainer import TrainConfig, default_source, run_stage

DESK = dict(lr=1e-3, seed=1, checkpoint_every=500)
TOTAL = 5000
C5_STAGE1 = 2222


def c1_config():
    return TrainConfig.ablation("C1", stage=1, iterations_stage1=TOTAL, iterations_stage2=0, **DESK)


def c5_config(stage):
    return TrainConfig.ablation("C5", stage=stage, iterations_stage1=C5_STAGE1,
                                iterations_stage2=TOTAL - C5_STAGE1, **DESK)


def _resume_point(run_dir: Path, stage: int):
    """Latest periodic checkpoint of ``stage``; log rows past it are dropped so a
    resumed run does not repeat them."""
    ckpts = sorted(run_dir.glob(f"stage{stage}_[0-9]*.ckpt"))
    if not ckpts:
        return None
    latest = ckpts[-1]
    upto = int(latest.stem.split("_")[1])
    log = run_dir / "log.txt"
    if log.exists():
        rows = log.read_text().splitlines()
        keep = [r for r in rows if not r[:1].isdigit() or int(r.split()[0]) < upto]
        log.write_text("".join(r + "\n" for r in keep))
    return latest


def _run(cfg, images, run_dir, **kw):
    resume = _resume_point(run_dir, cfg.stage)
    if resume is None and cfg.stage == 1:
        torch.manual_seed(cfg.seed)
    return run_stage(cfg, default_source(cfg, images), run_dir, resume=resume,
                     log_file=run_dir / "log.txt", **kw)


def ensure(out: Path, which=("C1", "C5")) -> dict:
    images = builtin_photographs()
    done = {}
    if "C1" in which:
        final = out / "C1" / "stage1_final.ckpt"
        if not final.exists():
            _run(c1_config(), images, out / "C1")
        done["C1"] = final
    if "C5" in which:
        s1 = out / "C5" / "stage1_final.ckpt"
        if not s1.exists():
            _run(c5_config(1), images, out / "C5")
        s2 = out / "C5" / "stage2_final.ckpt"
        if not s2.exists():
            _run(c5_config(2), images, out / "C5", stage1_checkpoint=s1)
        done["C5"] = s2
    return done


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=".acceptance_cache")
    ap.add_argument("--only", nargs="*", default=["C1", "C5"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)
    print(ensure(Path(args.out), args.only))
