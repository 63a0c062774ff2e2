"""``voxseg`` command-line entry point.

Every run prints its resolved configuration as ``CONFIG=<json>`` and reports
results on ``KEY=VALUE`` lines. Exit codes: 0 success, 1 error (with an
``ERROR: <message>`` line), 2 usage error.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="voxseg", description="Volumetric part segmentation toolkit")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numba kernels (default 1)")
    p.add_argument("--backend", choices=("numba", "numpy"), default=None,
                   help="kernel backend (default: VOXSEG_NUMBA environment flag)")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--category", required=True)
    s.add_argument("--train", type=int, required=True)
    s.add_argument("--test", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("voxelize", help="point cloud text -> VSGV grid")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--res", type=int, default=48)
    s.add_argument("--out", required=True)

    s = sub.add_parser("validate-dilations", help="check a dilation schedule")
    s.add_argument("--rates", type=_int_list, required=True)
    s.add_argument("--kernel", type=int, default=3)

    s = sub.add_parser("rf", help="receptive field of an architecture")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec")
    g.add_argument("--variant")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", required=True, help="ArchitectureSpec JSON file")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--augment", action="store_true")
    s.add_argument("--expand-rotations", action="store_true",
                   help="with --augment, use every shape at all 12 rotations each epoch")
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--precision", choices=("float32", "float64"), default="float32")
    s.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    s.add_argument("--checkpoint-every", type=int, default=0)

    s = sub.add_parser("eval", help="point-level IoU report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--res", type=int, default=None)
    s.add_argument("--split", default="test")
    s.add_argument("--strict-iou", dest="strict", action="store_true",
                   help="leave parts absent from prediction and ground truth out of the mean")
    s.add_argument("--out", required=True)

    s = sub.add_parser("segment", help="label one point cloud")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="labeled point cloud text")
    s.add_argument("--grid", help="also write the predicted VSGV grid")

    s = sub.add_parser("activations", help="export per-channel stage volumes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--stage", required=True)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("features", help="part-based descriptors")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)

    s = sub.add_parser("cluster", help="k-means over a feature CSV")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="assignment CSV")

    s = sub.add_parser("upper-bound", help="quantization upper bound per resolution")
    s.add_argument("--in", dest="inp", required=True, help="dataset directory")
    s.add_argument("--res", type=_int_list, default=[16, 32, 48, 64])
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    return p


def emit(key, value):
    print(f"{key}={value}")


def _load_cloud(path):
    from .io import read_cloud
    from .voxel import normalize_cloud

    return normalize_cloud(read_cloud(path))


def _ckpt_model(path):
    from .trainer import load_checkpoint

    ck = load_checkpoint(path)
    emit("CKPT_STEP", ck.step)
    return ck.model


def cmd_gen_data(a):
    from .synth import make_dataset

    m = make_dataset(a.category, a.train, a.test, a.seed, a.out)
    emit("TRAIN", len(m["train"]))
    emit("TEST", len(m["test"]))


def cmd_voxelize(a):
    from .io import save_grid
    from .voxel import voxelize

    grid = voxelize(_load_cloud(a.inp), a.res)
    save_grid(a.out, grid)
    emit("OCCUPIED", grid.occupied_count)


def cmd_validate_dilations(a):
    from .dilation import validate_schedule

    sched = validate_schedule(a.rates, a.kernel)
    print(sched.machine_line)
    emit("COVERS", "true" if sched.covers else "false")
    if sched.reason:
        emit("REASON", sched.reason)


def cmd_rf(a):
    from .models import ArchitectureSpec, spec_from_file

    spec = spec_from_file(a.spec) if a.spec else ArchitectureSpec(a.variant)
    emit("RF", spec.validate().receptive_field())


def cmd_train(a):
    from .models import build_model, spec_from_file
    from .synth import load_dataset
    from .trainer import TrainConfig, save_checkpoint, train

    spec = spec_from_file(a.arch)
    data = load_dataset(a.data, "train")
    log = a.log or a.out + ".log.csv"
    cfg = TrainConfig(lr=a.lr, batch_size=a.batch, epochs=a.epochs, augment=a.augment,
                      expand_rotations=a.expand_rotations, seed=a.seed, precision=a.precision,
                      checkpoint_every=a.checkpoint_every,
                      checkpoint_path=a.out if a.checkpoint_every else None, log_path=log)
    model = build_model(spec, seed=a.seed, dtype=cfg.dtype)
    emit("SHAPES", len(data))
    emit("PARAMETERS", model.num_parameters())
    res = train(model, data, cfg,
                on_epoch=lambda e: print(f"epoch={e.epoch} loss={e.loss:.6f} voxel_acc={e.voxel_acc:.6f}",
                                         flush=True))
    save_checkpoint(model, a.out, res.adam, cfg)
    if res.log:
        emit("FINAL_LOSS", f"{res.log[-1].loss:.6f}")
        emit("FINAL_ACC", f"{res.log[-1].voxel_acc:.6f}")
    emit("CHECKPOINT", a.out)


def _segment_cloud(model, cloud):
    from .models import forward_segment
    from .voxel import project_labels_to_points, voxelize

    grid = voxelize(cloud, model.spec.resolution)
    _, pred = forward_segment(model, grid)
    return grid, pred, project_labels_to_points(grid.with_labels(pred), cloud)


def cmd_eval(a):
    from .metrics import ShapeResult, aggregate, precision_recall, shape_iou
    from .synth import load_dataset
    from .voxel import normalize_cloud

    model = _ckpt_model(a.ckpt)
    if a.res is not None and a.res != model.spec.resolution:
        raise ValueError(f"--res {a.res} differs from the checkpoint resolution {model.spec.resolution}")
    parts = range(1, model.spec.labels + 1)
    results = []
    for raw in load_dataset(a.data, a.split):
        cloud = normalize_cloud(raw)
        _, _, labels = _segment_cloud(model, cloud)
        iou = shape_iou(labels, cloud.labels, parts, strict=a.strict)
        _, p, r = precision_recall(labels, cloud.labels, parts)
        results.append(ShapeResult(cloud.category, iou, p, r, cloud.shape_id))
    report = aggregate(results, strict=a.strict)
    report.write_csv(a.out)
    for cat in sorted(report.category_iou):
        emit(f"MIOU_{cat.upper()}", f"{report.category_iou[cat]:.4f}")
    emit("MIOU", f"{report.overall_iou:.4f}")
    emit("IOU_RULE", "strict" if a.strict else "empty-union-scores-1")
    emit("REPORT", a.out)


def cmd_segment(a):
    from .io import save_grid, write_cloud

    model = _ckpt_model(a.ckpt)
    cloud = _load_cloud(a.inp)
    grid, pred, labels = _segment_cloud(model, cloud)
    write_cloud(a.out, cloud.replace(labels=labels))
    if a.grid:
        save_grid(a.grid, grid.with_labels(pred))
    emit("POINTS", len(labels))
    emit("PARTS", ",".join(str(int(v)) for v in np.unique(labels)))


def cmd_activations(a):
    from .io import save_activation
    from .models import export_activations
    from .voxel import voxelize

    model = _ckpt_model(a.ckpt)
    grid = voxelize(_load_cloud(a.inp), model.spec.resolution)
    vols = export_activations(model, grid, a.stage)
    os.makedirs(a.out, exist_ok=True)
    for c, vol in enumerate(vols):
        save_activation(os.path.join(a.out, f"{a.stage}_c{c:03d}.vsgv"), grid.occupancy, vol)
    emit("CHANNELS", len(vols))


def cmd_features(a):
    from .features import extract_part_feature, write_features
    from .synth import load_dataset
    from .voxel import normalize_cloud, voxelize

    model = _ckpt_model(a.ckpt)
    feats = []
    for raw in load_dataset(a.data, a.split):
        grid = voxelize(normalize_cloud(raw), model.spec.resolution)
        feats.append(extract_part_feature(model, grid, raw.category, raw.shape_id))
    write_features(a.out, feats)
    emit("SHAPES", len(feats))
    emit("DIM", len(feats[0].vector))


def cmd_cluster(a):
    from .features import kmeans, read_features

    ids, bits, mat = read_features(a.features)
    res = kmeans(mat, a.k, a.seed)
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shape_id", "part_presence_bits", "cluster"])
            for sid, b, c in zip(ids, bits, res.assignments):
                w.writerow([sid, b, int(c)])
    emit("ITERATIONS", res.iterations)
    emit("OBJECTIVE", f"{res.objective[-1]:.6f}")
    emit("SIZES", ",".join(str(int((res.assignments == j).sum())) for j in range(a.k)))


def cmd_upper_bound(a):
    from .synth import load_dataset
    from .voxel import normalize_cloud, quantization_upper_bound

    clouds = [normalize_cloud(c) for c in load_dataset(a.inp, a.split)]
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["resolution", "mean_iou"])
        for R in a.res:
            ub = float(np.mean([quantization_upper_bound(c, R) for c in clouds]))
            w.writerow([R, f"{ub:.6f}"])
            emit(f"UB_{R}", f"{ub:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data, "voxelize": cmd_voxelize,
    "validate-dilations": cmd_validate_dilations, "rf": cmd_rf, "train": cmd_train,
    "eval": cmd_eval, "segment": cmd_segment, "activations": cmd_activations,
    "features": cmd_features, "cluster": cmd_cluster, "upper-bound": cmd_upper_bound,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    from . import _accel

    if args.backend:
        _accel.set_backend(args.backend)
    _accel.set_threads(args.threads)
    resolved = {k: v for k, v in sorted(vars(args).items())}
    resolved["backend"] = _accel.backend()
    print("CONFIG=" + json.dumps(resolved, sort_keys=True, default=str))
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # every module error becomes a one-line diagnostic
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
