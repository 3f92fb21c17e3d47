"""Command-line entry point: ``occlang <subcommand> ...``.

Subcommands: ``synth-gen``, ``train``, ``extract-mesh``, ``query``,
``segment-view`` and ``eval``. Logs go to stderr; ``eval`` prints its
metrics as one JSON object on stdout.

Exit codes: 0 success, 2 bad usage, 3 invalid input data or arguments,
4 missing file, 5 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import resource
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Intrinsics, check_pose, load_embedding, load_frameset, load_prompts, save_frameset
from .errors import CheckpointError, DatasetError, DomainError
from .evaluation import recon_metrics, sample_mesh_points, seg_metrics
from .grid import FieldConfig
from .objective import LossWeights
from .query import (
    Mesh,
    build_occ_feature_map,
    extract_mesh,
    label_mesh,
    query_similarity,
    read_label_image,
    read_ply,
    render_segmentation,
    segment_3d,
    write_label_image,
    write_mesh_ply,
    write_point_cloud_ply,
)
from .synthetic import generate_synthetic, two_box_room
from .trainer import TrainConfig, fit, read_checkpoint_fields, save_checkpoint

log = logging.getLogger("occlang")

EXIT_USAGE, EXIT_INPUT, EXIT_MISSING, EXIT_DIVERGED = 2, 3, 4, 5

# flag name -> (TrainConfig field, type, help)
TRAIN_FLAGS = {
    "iterations": (int, "number of optimization steps (default 10000)"),
    "rays_per_batch": (int, "rays drawn per step (default 6144)"),
    "samples_per_ray": (int, "samples along each ray (default 132)"),
    "lr_decoders": (float, "Adam learning rate of the decoders (default 1e-2)"),
    "lr_grids": (float, "Adam learning rate of the feature grids (default 1e-3)"),
    "seed": (int, "random seed for initialization and ray sampling (default 0)"),
    "log_every": (int, "steps between progress log lines (default 100)"),
    "checkpoint_every": (int, "steps between periodic checkpoints (default 1000)"),
    "min_weight": (float, "skip color/semantic decoding at samples with weight <= this (default 0)"),
}
FIELD_FLAGS = {
    "levels": ("n_levels", int, "grid levels per field (default 4)"),
    "base_divisions": ("base_divisions", int, "coarsest voxel = scene diagonal / this (default 16)"),
    "hidden": ("hidden", int, "hidden units of each of the two decoder layers (default 64)"),
}
LOSS_FLAGS = {
    "lambda_rgb": ("rgb", "weight of the color term (default 10)"),
    "lambda_depth": ("depth", "weight of the depth term (default 1)"),
    "lambda_occ": ("occ", "weight of the surface occupancy term (default 10)"),
    "lambda_fs": ("fs", "weight of the free-space term (default 1)"),
    "lambda_sg": ("sg", "weight of the feature distillation term (default 2)"),
    "truncation": ("truncation", "half-width of the surface band in meters (default 0.05)"),
    "huber_delta": ("huber_delta", "Huber kernel threshold (default 1)"),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _limit_workers(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise CliError("--workers must be at least 1", EXIT_USAGE)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # the environment variables cover freshly spawned pools
        return
    threadpool_limits(n)


def _peak_memory_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _checkpoint_fields(path):
    p = Path(path)
    candidates = [p, p.with_name(p.name + ".ooc")]
    if not any(c.is_file() for c in candidates):
        raise CliError(f"checkpoint not found: {p}", EXIT_MISSING)
    return read_checkpoint_fields(p)


# ---------------------------------------------------------------------------
# synth-gen


def cmd_synth_gen(args) -> int:
    out = Path(args.out)
    scene = two_box_room(sem_dim=args.sem_dim, n_frames=args.frames, seed=args.seed)
    frames, gt = generate_synthetic(
        scene, args.frames, (args.size, args.size), args.corruption,
        args.feature_noise, args.depth_noise, seed=args.seed,
    )
    save_frameset(frames, out, depth_format=args.depth_format)
    pts, cls = scene.sample_surface(args.gt_density, seed=args.seed)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    write_point_cloud_ply(out / "gt" / "surface.ply", pts, labels=cls)
    flipped = float(np.mean([f[c >= 0].mean() for f, c in zip(gt.flipped, gt.classes)]))
    log.info("wrote %d frames to %s (flipped feature fraction %.4f)", len(frames), out, flipped)
    return 0


# ---------------------------------------------------------------------------
# train


def _load_config_file(path) -> dict:
    p = _require(path, "config file")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(f"{p}: expected a JSON object")
    return data


def build_train_setup(args) -> tuple[TrainConfig, LossWeights, dict]:
    """Merge defaults, the optional config file and explicit flags (in that order)."""
    file_cfg = _load_config_file(args.config) if args.config else {}
    loss_cfg = dict(file_cfg.pop("loss", {}) or {})
    field_cfg = dict(file_cfg.pop("field", {}) or {})
    train_cfg = dict(file_cfg)
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            train_cfg[name] = v
    for flag, (key, _, _) in FIELD_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            field_cfg[key] = [v, v] if key == "hidden" else v
    for flag, (key, _) in LOSS_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            loss_cfg[key] = v
    ablations = {"no_huber": bool(args.no_huber), "no_scp": bool(args.no_scp), "no_bce": bool(args.no_bce)}
    if args.no_scp:
        train_cfg["scp_enabled"] = False
    if args.no_huber:
        loss_cfg["robust"] = False
    if args.no_bce:
        loss_cfg["occ"] = loss_cfg["fs"] = 0.0
    if field_cfg:
        train_cfg["field"] = field_cfg
    try:
        config = TrainConfig.from_dict(train_cfg)
        weights = LossWeights(**loss_cfg)
    except TypeError as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return config, weights, ablations


def cmd_train(args) -> int:
    t0 = time.time()
    data = _require(args.data, "dataset directory")
    config, weights, ablations = build_train_setup(args)
    frames = load_frameset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    ckpt_dir = out / "checkpoints"
    with open(log_path, "w") as log_fp:

        def emit(rec):
            line = json.dumps(rec)
            log_fp.write(line + "\n")
            log_fp.flush()
            print(line, file=sys.stderr, flush=True)

        try:
            state = fit(frames, config, weights, log=emit, checkpoint_dir=ckpt_dir)
        except FloatingPointError as exc:
            raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
    f_path, s_path = save_checkpoint(state, out / "checkpoint", config)
    periodic = sorted(str(p) for p in ckpt_dir.glob("*")) if ckpt_dir.exists() else []
    manifest = {
        "command": "train",
        "version": __version__,
        "inputs": {"data": str(data), "config_file": args.config},
        "seed": config.seed,
        "config": config.to_dict(),
        "loss_weights": asdict(weights),
        "ablations": ablations,
        "scp_active": state.beliefs is not None,
        "features_available": frames.features_available,
        "artifacts": {
            "checkpoint_fields": str(f_path),
            "checkpoint_state": str(s_path),
            "log": str(log_path),
            "periodic_checkpoints": periodic,
        },
        "final_losses": state.running,
        "steps": state.step,
        "wall_clock_s": time.time() - t0,
        "peak_memory_mb": _peak_memory_mb(),
        "workers": args.workers,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("checkpoint written to %s", f_path)
    return 0


# ---------------------------------------------------------------------------
# geometry and queries


def cmd_extract(args) -> int:
    if not 0.0 < args.threshold < 1.0:
        raise CliError(f"threshold {args.threshold} rejected: it must lie in (0, 1)", EXIT_USAGE)
    fields = _checkpoint_fields(args.checkpoint)
    mesh = extract_mesh(fields, args.voxel_size, args.threshold)
    if mesh.is_empty:
        log.warning("no occupancy crossing at %.3f: writing an empty mesh", args.threshold)
    elif args.prompts:
        mesh = label_mesh(mesh, fields, _prompts_for(fields, args.prompts))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mesh_ply(args.out, mesh, binary=not args.ascii)
    log.info("mesh with %d vertices, %d faces written to %s", len(mesh.vertices), len(mesh.faces), args.out)
    return 0


def _prompts_for(fields, path):
    prompts = load_prompts(_require(path, "prompts file"))
    if prompts.dim != fields.sem_dim:
        raise CliError(f"dimension mismatch: prompts have D = {prompts.dim}, checkpoint has D = {fields.sem_dim}")
    return prompts


def _map_resolution(fields, voxel: float):
    return np.maximum(np.ceil(fields.bounds.extent / voxel - 1e-9).astype(int) + 1, 2)


def cmd_query(args) -> int:
    if (args.prompts is None) == (args.embedding is None):
        raise CliError("give exactly one of --prompts or --embedding", EXIT_USAGE)
    fields = _checkpoint_fields(args.checkpoint)
    if args.prompts:
        prompts = _prompts_for(fields, args.prompts)
        fmap = build_occ_feature_map(fields, _map_resolution(fields, args.voxel_size), args.threshold)
        labels = segment_3d(fmap, prompts)
        write_point_cloud_ply(args.out, fmap.points, labels=labels, binary=not args.ascii)
        counts = np.bincount(labels[labels >= 0], minlength=prompts.n_classes)
        log.info("labeled %d points: %s", len(labels), dict(zip(prompts.labels, counts.tolist())))
    else:
        emb = load_embedding(_require(args.embedding, "embedding file"))
        if len(emb) != fields.sem_dim:
            raise CliError(f"dimension mismatch: embedding has D = {len(emb)}, checkpoint has D = {fields.sem_dim}")
        fmap = build_occ_feature_map(fields, _map_resolution(fields, args.voxel_size), args.threshold)
        sim = query_similarity(fmap, emb)
        write_point_cloud_ply(args.out, fmap.points, scalar=sim, binary=not args.ascii)
        log.info("similarity of %d points written to %s", len(sim), args.out)
    return 0


def cmd_segment_view(args) -> int:
    fields = _checkpoint_fields(args.checkpoint)
    prompts = _prompts_for(fields, args.prompts)
    pose = check_pose(np.loadtxt(_require(args.pose, "pose file"), dtype=np.float64).reshape(4, 4))
    k = np.loadtxt(_require(args.intrinsics, "intrinsics file"), dtype=np.float64).reshape(-1)
    if k.size == 9:
        k = np.array([k[0], k[4], k[2], k[5]])
    if k.size != 4:
        raise CliError(f"{args.intrinsics}: expected fx fy cx cy or a 3x3 matrix")
    labels = render_segmentation(
        fields, pose, Intrinsics(*k), prompts, args.height, args.width, args.samples
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_label_image(args.out, labels)
    log.info("label image written to %s (%d void pixels)", args.out, int((labels < 0).sum()))
    return 0


# ---------------------------------------------------------------------------
# eval


def _read_labels(path) -> np.ndarray:
    p = _require(path, "label file")
    if p.suffix == ".png":
        return read_label_image(p).reshape(-1)
    if p.suffix == ".npy":
        return np.load(p).reshape(-1).astype(np.int64)
    if p.suffix == ".ply":
        verts, _ = read_ply(p)
        if "label" not in verts:
            raise CliError(f"{p}: PLY has no label property")
        return verts["label"].astype(np.int64)
    return np.loadtxt(p, dtype=np.int64).reshape(-1)


def _read_points(path, density: float, seed: int) -> np.ndarray:
    verts, faces = read_ply(_require(path, "PLY file"))
    v = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    if faces is not None and len(faces):
        return sample_mesh_points(Mesh(v, faces), density, seed)
    return v


def cmd_eval(args) -> int:
    if args.mode == "labels" or (args.mode == "auto" and Path(args.pred).suffix in (".png", ".npy", ".txt")):
        pred, gt = _read_labels(args.pred), _read_labels(args.gt)
        k = args.classes or int(max(pred.max(initial=-1), gt.max(initial=-1)) + 1)
        out = seg_metrics(pred, gt, k).to_dict()
    else:
        pts_p = _read_points(args.pred, args.density, args.seed)
        pts_g = _read_points(args.gt, args.density, args.seed)
        if args.data:
            from .evaluation import cull_unobserved

            frames = load_frameset(args.data)
            pts_p, pts_g = cull_unobserved(pts_p, frames), cull_unobserved(pts_g, frames)
        if len(pts_p) == 0 or len(pts_g) == 0:
            raise CliError("cannot evaluate an empty point set (empty mesh?)")
        out = recon_metrics(pts_p, pts_g, args.threshold).to_dict()
    print(json.dumps(out))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occlang", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--workers", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-gen", help="render the synthetic two-box room dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--frames", type=int, default=40, help="number of frames (default 40)")
    p.add_argument("--size", type=int, default=128, help="image width and height in pixels (default 128)")
    p.add_argument("--sem-dim", type=int, default=16, help="feature dimension D (default 16)")
    p.add_argument("--corruption", type=float, default=0.0, help="fraction of feature pixels flipped to a wrong class")
    p.add_argument("--feature-noise", type=float, default=0.0, help="std of Gaussian feature noise before renormalizing")
    p.add_argument("--depth-noise", type=float, default=0.0, help="std of Gaussian depth noise in meters")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--depth-format", choices=("tiff", "png"), default="tiff",
                   help="float32 meters (tiff) or 16-bit millimeters (png)")
    p.add_argument("--gt-density", type=float, default=1e4,
                   help="ground-truth surface samples per square meter (default 1e4)")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="fit the fields to a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint, log and manifest")
    p.add_argument("--config", default=None,
                   help="JSON file with training options; 'loss' and 'field' hold nested options")
    for name, (typ, helptext) in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=helptext)
    for flag, (_, typ, helptext) in FIELD_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None, help=helptext)
    for flag, (_, helptext) in LOSS_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=float, default=None, help=helptext)
    p.add_argument("--no-huber", action="store_true", help="ablation: identity instead of the Huber kernel")
    p.add_argument("--no-scp", action="store_true", help="ablation: disable confidence weighting (all weights 1)")
    p.add_argument("--no-bce", action="store_true", help="ablation: zero the occupancy and free-space terms")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract-mesh", help="marching cubes on the occupancy field")
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix or .ooc file")
    p.add_argument("--out", required=True, help="output PLY file")
    p.add_argument("--voxel-size", type=float, default=0.01, help="lattice spacing in meters (default 0.01)")
    p.add_argument("--threshold", type=float, default=0.5, help="iso level in (0, 1) (default 0.5)")
    p.add_argument("--prompts", default=None, help="prompts JSON; attaches a class label to every vertex")
    p.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("query", help="zero-shot labels or similarity of occupied points")
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix or .ooc file")
    p.add_argument("--prompts", default=None, help="prompts JSON; writes a labeled point cloud")
    p.add_argument("--embedding", default=None, help="single embedding JSON; writes a similarity point cloud")
    p.add_argument("--out", required=True, help="output PLY file")
    p.add_argument("--voxel-size", type=float, default=0.02, help="lattice spacing in meters (default 0.02)")
    p.add_argument("--threshold", type=float, default=0.5, help="occupancy threshold (default 0.5)")
    p.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("segment-view", help="render a 2D zero-shot label image")
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix or .ooc file")
    p.add_argument("--prompts", required=True, help="prompts JSON")
    p.add_argument("--pose", required=True, help="4x4 camera-to-world pose text file")
    p.add_argument("--intrinsics", required=True, help="fx fy cx cy (or 3x3 matrix) text file")
    p.add_argument("--height", type=int, required=True, help="image height in pixels")
    p.add_argument("--width", type=int, required=True, help="image width in pixels")
    p.add_argument("--samples", type=int, default=132, help="samples per ray (default 132)")
    p.add_argument("--out", required=True, help="output 16-bit PNG (void = 65535)")
    p.set_defaults(func=cmd_segment_view)

    p = sub.add_parser("eval", help="metrics JSON on stdout")
    p.add_argument("--pred", required=True, help="predicted mesh/point PLY, or labels (.png/.npy/.txt/.ply)")
    p.add_argument("--gt", required=True, help="ground truth in the same kind of file")
    p.add_argument("--mode", choices=("auto", "recon", "labels"), default="auto",
                   help="recon for geometry, labels for segmentation; auto picks by extension")
    p.add_argument("--threshold", type=float, default=0.05, help="precision/recall distance in meters (default 0.05)")
    p.add_argument("--density", type=float, default=1e4, help="mesh samples per square meter (default 1e4)")
    p.add_argument("--seed", type=int, default=0, help="seed of the mesh point sampling (default 0)")
    p.add_argument("--classes", type=int, default=None, help="class count K (default: largest label + 1)")
    p.add_argument("--data", default=None, help="dataset directory; cull points no camera observed")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _limit_workers(args.workers)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, DomainError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
