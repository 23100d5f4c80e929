"""``dalf`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import apply_overrides, dump_kv, parse_kv, read_kv
from .errors import FormatError, TrainingError

log = logging.getLogger("dalf")


def _overrides(args) -> dict:
    """Config file values overlaid by ``--set key=value`` flags."""
    values = read_kv(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        values.update(parse_kv(item))
    return values


def _echo_config(out_dir, *objs) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text("".join(dump_kv(o) for o in objs))


def _load_model(path):
    from .trainer import load_model

    return load_model(path)


def _load_mask(path):
    from .synthgen import load_image

    return load_image(path) > 0.5


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthgen import SynthConfig, write_synth_dataset

    cfg = apply_overrides(SynthConfig(), _overrides(args))
    manifest = write_synth_dataset(args.src, args.out, args.pairs, args.seed, cfg)
    _echo_config(args.out, cfg)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    import torch

    from .synthgen import builtin_photographs, load_image, scan_image_dir
    from .trainer import TrainConfig, default_source, run_stage

    base = TrainConfig.ablation(args.ablation) if args.ablation else TrainConfig()
    values = _overrides(args)
    values["stage"] = str(args.stage)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = apply_overrides(base, values)
    if args.src:
        images = [load_image(p) for p in scan_image_dir(args.src)]
    else:
        images = builtin_photographs()
    out = Path(args.out)
    _echo_config(out, cfg)
    torch.manual_seed(cfg.seed)

    def progress(rec):
        if rec.iteration % args.log_every == 0:
            log.info("it %d  L_k %.4g  L_p %.4g  L_d %s  d %.3f", rec.iteration, rec.l_k,
                     rec.l_p, {k: round(v, 4) for k, v in rec.l_d.items()}, rec.difficulty)

    final = run_stage(cfg, default_source(cfg, images), out, stage1_checkpoint=args.stage1_ckpt,
                      resume=args.resume, log_file=out / "losses.txt", progress=progress)
    print(final)
    return 0


def cmd_extract(args) -> int:
    from .inference import detect, extract, save_descriptors
    from .synthgen import load_image

    model = _load_model(args.ckpt)
    img = load_image(args.img)
    mask = _load_mask(args.mask) if args.mask else None
    kps = detect(model, img, args.top_k, mask)
    desc = extract(model, img, kps)
    kps.save(args.out_kp)
    save_descriptors(args.out_desc, desc.rows.numpy())
    return 0


def cmd_match(args) -> int:
    from .inference import load_descriptors, match_nn, ratio_top_n

    m = match_nn(load_descriptors(args.desc_a), load_descriptors(args.desc_b), args.mutual)
    if args.ratio_top is not None:
        m = ratio_top_n(m, args.ratio_top)
    m.save(args.out)
    return 0


def cmd_eval(args) -> int:
    from .evaluation import dataset_eval
    from .plotting import emit_plot

    model = _load_model(args.ckpt)
    report = dataset_eval(model, args.dataset, args.threshold, args.top_k, args.mutual)
    report.write_csv(args.out)
    for pid, reason in report.failed:
        print(f"failed: {pid}: {reason}", file=sys.stderr)
    if args.plot:
        rows = [{"pair": i, "ms": s.ms, "method": "MS"} for i, s in enumerate(report.scores)]
        rows += [{"pair": i, "ms": s.mma, "method": "MMA"} for i, s in enumerate(report.scores)
                 if s.mma is not None]
        plot = Path(args.plot)
        emit_plot(rows, plot.with_name(plot.stem + "_plot.csv"), plot, x="pair", y="ms")
    m = report.mean
    mma = "n/a" if m["mma"] is None else f"{m['mma']:.4f}"
    print(f"pairs {m['n_pairs']}  MS {m['ms']:.4f}  MMA {mma}  rep {m['repeatability']:.4f}")
    return 0


def _labelled_images(directory):
    """Images below ``directory``; the label is the parent folder name for nested
    layouts, otherwise the file-name prefix before the first underscore."""
    from .synthgen import IMAGE_SUFFIXES

    root = Path(directory)
    out = []
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            label = p.parent.name if p.parent != root else p.stem.split("_")[0]
            out.append((p, label))
    return out


def cmd_retrieve(args) -> int:
    from .apps import accuracy_at_k, bovw_encode, build_codebook, normalized_auc, retrieve
    from .inference import detect_and_describe
    from .plotting import write_table
    from .synthgen import load_image

    model = _load_model(args.ckpt)

    def describe(items):
        descs = []
        for path, _ in items:
            mask = None
            if args.mask_dir:
                mp = Path(args.mask_dir) / (path.stem + ".png")
                mask = _load_mask(mp) if mp.exists() else None
            _, d = detect_and_describe(model, load_image(path), args.max_kp, mask)
            descs.append(d.rows.numpy())
        return descs

    db, queries = _labelled_images(args.db), _labelled_images(args.queries)
    if not db or not queries:
        raise ValueError("empty database or query directory")
    db_desc, q_desc = describe(db), describe(queries)
    pool = np.concatenate(db_desc)
    rng = np.random.default_rng(args.seed)
    sample = pool[rng.permutation(len(pool))[:args.sample]]
    codebook = build_codebook(sample, min(args.codebook_k, len(sample)), args.seed)
    db_enc = np.stack([bovw_encode(d, codebook)[0] for d in db_desc])
    k = min(args.k, len(db))
    ranks = [retrieve(bovw_encode(d, codebook)[0], db_enc, k) for d in q_desc]
    curve = accuracy_at_k(ranks, [lb for _, lb in queries], [lb for _, lb in db], k)
    write_table(args.out, [{"k": i + 1, "accuracy": float(a)} for i, a in enumerate(curve)])
    print(f"normalized AUC (K=1..{k}): {100 * normalized_auc(curve):.2f}%")
    return 0


def cmd_register(args) -> int:
    from .apps import (FilterConfig, arap_register, constraints_from_matches, local_affine_filter,
                       read_ply, registration_errors, write_ply)
    from .evaluation import load_pair_dir
    from .geometry import transfer_points
    from .inference import detect_and_describe, match_nn, ratio_top_n
    from .plotting import write_table

    model = _load_model(args.ckpt)
    d = Path(args.pair)
    pair = load_pair_dir(d)
    mesh_a, mesh_b = read_ply(d / "meshA.ply"), read_ply(d / "meshB.ply")
    kp_a, da = detect_and_describe(model, pair.image_a, args.top_k)
    kp_b, db = detect_and_describe(model, pair.image_b, args.top_k)
    m = match_nn(da, db)
    m = local_affine_filter(m, kp_a, kp_b, FilterConfig(seed=args.seed), pair.image_a.shape)
    m = ratio_top_n(m, args.ratio_top)
    idx, tgt = constraints_from_matches(mesh_a, mesh_b, kp_a.coords[m.index_a],
                                        kp_b.coords[m.index_b])
    res = arap_register(mesh_a, mesh_b, (idx, tgt), args.iterations)
    write_ply(args.out, type(mesh_a)(res.vertices, mesh_a.faces, mesh_a.uv))
    gt_uv, ok = transfer_points(pair.flow, mesh_a.uv)
    gt_uv[~ok] = np.nan
    acc = registration_errors(res, mesh_a, mesh_b, gt_uv, units_per_cm=args.units_per_cm)
    rows = [{"metric": f"acc@{t}px", "value": v} for t, v in acc["px"].items()]
    rows += [{"metric": f"acc@{t}cm", "value": v} for t, v in acc["cm"].items()]
    rows.append({"metric": "n_constraints", "value": int(len(idx))})
    rows.append({"metric": "final_energy", "value": res.energy_trace[-1]})
    write_table(args.report, rows)
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import robustness_sweep
    from .plotting import emit_plot
    from .synthgen import load_image

    img = load_image(args.img)
    rows = []
    for ckpt in args.ckpt:
        model = _load_model(ckpt)
        kw = {"angles": args.levels} if args.kind == "rotation" else {"scales": args.levels}
        res = robustness_sweep(model, img, deformation=args.deformation, seed=args.seed,
                               threshold=args.threshold, top_k=args.top_k, **kw)
        label = Path(ckpt).parent.name or Path(ckpt).stem
        rows += [{"method": label, "level": lv, "ms": ms} for lv, ms in zip(res.levels, res.ms)]
    emit_plot(rows, args.out, args.plot, columns=("method", "level", "ms"),
              title=f"MS vs {args.kind}")
    return 0


def _sniff(path: Path) -> str:
    head = path.read_bytes()[:16]
    if head.startswith(b"DALFFLOW"):
        return "flow"
    if head.startswith(b"DALFDESC"):
        return "desc"
    if head.startswith(b"DALFTPS"):
        return "tps"
    if head.startswith(b"DALFKP"):
        return "kp"
    if head.startswith(b"ply"):
        return "ply"
    raise FormatError(f"{path}: unrecognized file magic", offset=0)


def cmd_convert(args) -> int:
    from .apps import read_ply, write_ply
    from .evaluation import read_tps_file, tps_to_flow
    from .geometry import FlowField
    from .inference import KeypointSet, load_descriptors, save_descriptors

    src, dst = Path(args.input), Path(args.output)
    kind = _sniff(src)
    tmp = dst.with_name(dst.name + ".part")
    if kind == "tps":
        if not args.size:
            raise ValueError("--size H W is required to rasterize a TPS file")
        flow = tps_to_flow(read_tps_file(src), tuple(args.size),
                           tuple(args.size_b) if args.size_b else None)
        flow.save(tmp)
    elif kind == "flow":
        FlowField.load(src).save(tmp)
    elif kind == "desc":
        save_descriptors(tmp, load_descriptors(src))
    elif kind == "kp":
        KeypointSet.load(src).save(tmp)
    else:
        write_ply(tmp, read_ply(src))
    tmp.replace(dst)
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dalf", description="Deformation-aware local features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp_ = sub.add_parser(name, help=help_, description=help_)
        sp_.set_defaults(func=fn)
        return sp_

    def config_flags(sp_):
        sp_.add_argument("--config", help="key = value file (overridden by --set)")
        sp_.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override one config key (repeatable)")

    s = add("synth", cmd_synth, "write synthetic training/evaluation pairs")
    s.add_argument("--src", help="directory of source photographs (procedural textures if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    config_flags(s)

    s = add("train", cmd_train, "run one training stage")
    s.add_argument("--out", required=True, help="checkpoint / log directory")
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--ablation", choices=("C1", "C2", "C3", "C4", "C5"))
    s.add_argument("--src", help="directory of source photographs (bundled samples if omitted)")
    s.add_argument("--stage1-ckpt", help="final stage-1 checkpoint (required for stage 2)")
    s.add_argument("--resume", help="continue from a checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--log-every", type=int, default=100)
    config_flags(s)

    s = add("extract", cmd_extract, "detect keypoints and compute descriptors")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--img", required=True)
    s.add_argument("--top-k", type=int, default=2048)
    s.add_argument("--mask", help="binary image restricting detections")
    s.add_argument("--out-kp", required=True)
    s.add_argument("--out-desc", required=True)

    s = add("match", cmd_match, "nearest-neighbour descriptor matching")
    s.add_argument("--desc-a", required=True)
    s.add_argument("--desc-b", required=True)
    s.add_argument("--mutual", action="store_true")
    s.add_argument("--ratio-top", type=int)
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "MS / MMA / repeatability over a pair dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--threshold", type=float, default=3.0)
    s.add_argument("--top-k", type=int, default=2048)
    s.add_argument("--mutual", action="store_true")
    s.add_argument("--out", required=True, help="per-pair CSV report")
    s.add_argument("--plot")

    s = add("retrieve", cmd_retrieve, "bag-of-visual-words retrieval accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--mask-dir")
    s.add_argument("--codebook-k", type=int, default=300)
    s.add_argument("--sample", type=int, default=10_000, help="descriptors used for k-means")
    s.add_argument("--max-kp", type=int, default=1024, help="keypoints per image")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("register", cmd_register, "match, filter and ARAP-register a mesh pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pair", required=True,
                   help="directory with imageA/imageB, meshA.ply/meshB.ply and ground truth")
    s.add_argument("--top-k", type=int, default=2048)
    s.add_argument("--ratio-top", type=int, default=200)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--units-per-cm", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)

    s = add("sweep", cmd_sweep, "MS under growing rotation or scale")
    s.add_argument("--ckpt", required=True, nargs="+")
    s.add_argument("--img", required=True)
    s.add_argument("--kind", choices=("rotation", "scale"), default="rotation")
    s.add_argument("--levels", type=float, nargs="+", required=True)
    s.add_argument("--deformation", type=float, default=0.3)
    s.add_argument("--threshold", type=float, default=3.0)
    s.add_argument("--top-k", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV table")
    s.add_argument("--plot", help="PNG figure")

    s = add("convert", cmd_convert, "re-encode kp / desc / flow / tps / ply files")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="image A size for TPS")
    s.add_argument("--size-b", type=int, nargs=2, metavar=("H", "W"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DALF_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except (FormatError, TrainingError, ValueError, KeyError, OSError) as exc:
        print(f"dalf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
