"""Command-line pipeline: phantom generation, training, ablation,
calcium removal, evaluation and slice export.

Every subcommand takes --seed and --out-dir, writes all artifacts under
the output directory, and appends one JSON line per artifact to
``manifest.jsonl`` (path + the argv that produced it), so any artifact
can be regenerated from the manifest alone.

Exit codes: 0 success, 2 usage error, 3 calcium removal did not converge.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import eval as eval_mod
from . import phantom as phantom_mod
from .ctvol import RegionOfInterest, load_volume, save_volume, write_pgm
from .network import DESK_CONFIG, KINDS, PAPER_CONFIG, NetConfig, load_model
from .removal import RemovalConfig, remove_calcium, write_removal_log
from .trainer import (TrainingConfig, ablate, build_dataset, train,
                      write_ablation_csv, write_loss_csv)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3


def _manifest(out_dir: Path, paths, argv) -> None:
    with open(out_dir / "manifest.jsonl", "a") as f:
        for p in paths:
            f.write(json.dumps({"artifact": str(p), "argv": list(argv)}) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _net_config(args) -> NetConfig:
    if args.preset == "paper":
        return PAPER_CONFIG
    return DESK_CONFIG


def _load_suite(paths):
    pairs = []
    for vol_path in paths:
        vol_path = Path(vol_path)
        tdir = vol_path.parent / "truth"
        truth = phantom_mod.load_truth(tdir / f"{vol_path.stem}_truth.txt",
                                       tdir / f"{vol_path.stem}_labels.ctv")
        pairs.append((load_volume(vol_path), truth))
    return pairs


def cmd_phantom(args) -> int:
    out = _out_dir(args)
    if args.suite:
        pairs = phantom_mod.phantom_suite(seed=args.seed,
                                          noise_sigma_hu=args.noise_sigma)
    else:
        pairs = phantom_mod.training_phantoms(args.count, seed=args.seed,
                                              noise_sigma_hu=args.noise_sigma)

    tdir = out / "truth"
    tdir.mkdir(exist_ok=True)

    def emit(pair):
        vol, truth = pair
        vol_path = out / f"{truth.name}.ctv"
        txt = tdir / f"{truth.name}_truth.txt"
        labels = tdir / f"{truth.name}_labels.ctv"
        save_volume(vol, vol_path)
        phantom_mod.save_truth(truth, txt, labels)
        produced = [vol_path, txt, labels]
        if truth.calcium_free is not None:
            clean = tdir / f"{truth.name}_clean.ctv"
            save_volume(truth.calcium_free, clean)
            produced.append(clean)
        return produced

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            produced = list(pool.map(emit, pairs))
    else:
        produced = [emit(p) for p in pairs]
    for group in produced:
        _manifest(out, group, args.effective_argv)
        print("wrote", group[0])
    return EXIT_OK


def _dataset_from_args(args, mask_size):
    volumes = [load_volume(p) for p in args.volumes]
    # calcium-free twins written by the phantom subcommand, when present,
    # supply the inside-mask target for calcified patches
    cleans = []
    for p in args.volumes:
        p = Path(p)
        twin = p.parent / "truth" / f"{p.stem}_clean.ctv"
        cleans.append(load_volume(twin) if twin.exists() else None)
    roi = RegionOfInterest(tuple(args.roi))
    return build_dataset(volumes, roi, patch_size=args.patch_size,
                         stride=args.stride, include_flips=not args.no_flips,
                         mask_size=mask_size,
                         clean_targets=cleans if any(c is not None for c in cleans) else None)


def cmd_train(args) -> int:
    out = _out_dir(args)
    config = TrainingConfig(lr=args.lr, batch_size=args.batch_size,
                            steps=args.steps, seed=args.seed,
                            loss_region=args.loss_region,
                            mask_size=args.mask_size,
                            augment_flips=not args.no_flips, arch=args.arch,
                            net_config=_net_config(args))
    dataset = _dataset_from_args(args, args.mask_size)
    result = train(config, dataset)
    ckpt = out / "checkpoint.duw"
    cfg = out / "arch.cfg"
    losses = out / "loss_history.csv"
    result.model.save(ckpt, cfg)
    write_loss_csv(result.loss_history, losses)
    _manifest(out, [ckpt, cfg, losses], args.effective_argv)
    print(f"trained {args.arch}: {result.model.params.param_count()} parameters, "
          f"final loss {result.loss_history[-1]:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    grid = []
    datasets = {}
    eval_sets = {}
    eval_volumes = [load_volume(p) for p in args.eval_volumes]
    roi = RegionOfInterest(tuple(args.roi))
    for mask in args.mask_sizes:
        datasets[mask] = _dataset_from_args(args, mask)
        eval_ds = build_dataset(eval_volumes, roi, patch_size=args.patch_size,
                                stride=args.stride, include_flips=False,
                                mask_size=mask)
        eval_sets[mask] = [(eval_ds.volumes[vi], spec)
                           for vi, spec, _ in eval_ds.entries][:args.eval_patches]
        for region in args.loss_regions:
            grid.append(TrainingConfig(
                lr=args.lr, batch_size=args.batch_size, steps=args.steps,
                seed=args.seed, loss_region=region, mask_size=mask,
                arch=args.arch, net_config=_net_config(args)))
    rows = ablate(grid, datasets, eval_sets)
    path = out / "ablation.csv"
    write_ablation_csv(rows, path)
    _manifest(out, [path], args.effective_argv)
    for r in rows:
        print(f"{r.loss_region:10s} mask {r.mask_size:2d}: "
              f"{r.eval_mse_hu2:.1f} HU^2")
    return EXIT_OK


def cmd_remove(args) -> int:
    out = _out_dir(args)
    vol = load_volume(args.input)
    model = load_model(args.checkpoint, args.arch_config)
    config = RemovalConfig(threshold_hu=args.threshold,
                           patch_size=args.patch_size,
                           mask_size=args.mask_size,
                           max_iterations=args.max_iterations)
    removed, report = remove_calcium(vol, model, config)
    out_vol = out / "removed.ctv"
    out_log = out / "removal_log.jsonl"
    save_volume(removed, out_vol)
    write_removal_log(report, out_log)
    _manifest(out, [out_vol, out_log], args.effective_argv)
    print(f"iterations {report.iterations}, removed {report.removed_count}, "
          f"residual {report.residual_count}")
    if not report.converged:
        print("removal did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model = load_model(args.checkpoint, args.arch_config)
    suite = _load_suite(args.volumes)
    produced = []

    # restoration on clean patches of the given volumes
    roi = RegionOfInterest(tuple(args.roi))
    volumes = [v for v, _ in suite]
    ds = build_dataset(volumes, roi, patch_size=args.patch_size,
                       stride=args.stride, include_flips=False,
                       mask_size=args.mask_size)
    patches = [(ds.volumes[vi], spec) for vi, spec, _ in ds.entries]
    patches = patches[:args.eval_patches]
    results = [eval_mod.eval_restoration(model, patches, region="mask_only"),
               eval_mod.mean_fill_baseline(patches, region="mask_only")]
    rest_csv = out / "restoration.csv"
    eval_mod.write_restoration_csv(results, rest_csv)
    produced.append(rest_csv)

    exp = eval_mod.experiment2(suite, model,
                               RemovalConfig(patch_size=args.patch_size,
                                             mask_size=args.mask_size,
                                             max_iterations=args.max_iterations),
                               jobs=args.jobs)
    sten_csv = out / "stenosis.csv"
    eval_mod.write_stenosis_csv(exp.rows, sten_csv)
    produced.append(sten_csv)

    for vol, truth in suite:
        if truth.name not in exp.removed_volumes:
            continue
        removed, _ = exp.removed_volumes[truth.name]
        masked = vol.copy()
        hot = vol.data > 700
        masked.data[hot] = 0
        z = int(np.round(truth.vessel.centerline[:, 2].mean()))
        trip = out / f"triptych_{truth.name}.pgm"
        eval_mod.save_triptych(vol, masked, removed, z, trip)
        produced.append(trip)
    _manifest(out, produced, args.effective_argv)
    for r in exp.rows:
        print(f"{r.lesion_id}: truth {r.truth_pct:.1f} original "
              f"{r.original_pct:.1f} removed {r.removed_pct:.1f} "
              f"converged {r.converged}")
    return EXIT_OK


def cmd_slice(args) -> int:
    out = _out_dir(args)
    vol = load_volume(args.input)
    if not 0 <= args.z < vol.dims[2]:
        raise SystemExit(f"slice {args.z} outside volume nz={vol.dims[2]}")
    path = out / f"slice_z{args.z}.pgm"
    write_pgm(vol.data[:, :, args.z], path)
    _manifest(out, [path], args.effective_argv)
    print("wrote", path)
    return EXIT_OK


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")


def _add_patch_geometry(p):
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--mask-size", type=int, default=16)
    p.add_argument("--roi", type=int, nargs=3, default=(48, 48, 32),
                   metavar=("NX", "NY", "NZ"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="decalcify",
        description="inpainting-based coronary calcium removal on CT phantoms")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate phantom volumes + truth")
    _add_common(p)
    p.add_argument("--suite", action="store_true",
                   help="the fixed evaluation battery instead of training volumes")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=5.0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train an inpainting network")
    _add_common(p)
    _add_patch_geometry(p)
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--arch", choices=KINDS, default="dense_unet")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=3)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--loss-region", choices=("full", "mask_only"),
                   default="full")
    p.add_argument("--no-flips", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="loss-region x mask-size training grid")
    _add_common(p)
    _add_patch_geometry(p)
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--eval-volumes", nargs="+", required=True)
    p.add_argument("--eval-patches", type=int, default=20)
    p.add_argument("--arch", choices=KINDS, default="dense_unet")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=3)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--loss-regions", nargs="+", default=["full", "mask_only"],
                   choices=("full", "mask_only"))
    p.add_argument("--mask-sizes", nargs="+", type=int, default=[16, 8])
    p.add_argument("--no-flips", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("remove", help="erase calcium from a CTV volume")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch-config", required=True)
    p.add_argument("--threshold", type=int, default=700)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--mask-size", type=int, default=16)
    p.add_argument("--max-iterations", type=int, default=50)
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("eval", help="restoration MSE + stenosis experiment")
    _add_common(p)
    _add_patch_geometry(p)
    p.add_argument("--volumes", nargs="+", required=True,
                   help="suite CTV volumes (with _truth.txt/_labels.ctv sidecars)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch-config", required=True)
    p.add_argument("--eval-patches", type=int, default=20)
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="export one axial slice as 16-bit PGM")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--z", type=int, required=True)
    p.set_defaults(func=cmd_slice)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    args.effective_argv = list(argv) if argv is not None else sys.argv[1:]
    if args.command == "train" and args.steps < 1:
        ap.error("--steps must be >= 1")
    if getattr(args, "batch_size", 1) < 1:
        ap.error("--batch-size must be >= 1")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"decalcify: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"decalcify: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
