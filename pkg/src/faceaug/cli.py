"""Command-line interface: data generation, training and the augmentation operations.

Exit codes: 0 success, 1 usage error, 2 data error, 3 checkpoint or config
incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codes import N_ILLUM, PASS_THROUGH, PoseRanges
from .face_model import ContractError, MorphableModel, ShapeParams, make_toy_model
from .networks import CheckpointError, NetworkSpec, load_checkpoint, save_checkpoint
from .synth_data import (DatasetManifest, ManifestRow, build_dataset, load_dataset, load_png, save_png,
                         theta_from_b64, theta_to_b64)
from .trainer import ConfigError, TrainConfig

log = logging.getLogger("faceaug")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
OUTPUT_HEADER = ["path", "source", "identity", "illum", "pose", "theta_b64"]
MODEL_STEM = "model"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------- helpers


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def _seed(args) -> int:
    return _config(args).seed


def _prepare_out(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise DataError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return Path(value)


def _load_model(data_root: Path) -> MorphableModel:
    stem = data_root / MODEL_STEM
    if not stem.with_suffix(".npz").exists():
        raise DataError(f"{data_root} holds no morphable model; create it with make-data")
    return MorphableModel.load(stem)


def _load_data(root: Path):
    if not (root / "manifest.csv").exists():
        raise DataError(f"{root} has no manifest.csv")
    model = _load_model(root)
    return load_dataset(root, model), model


def _spec_for(data, model: MorphableModel) -> NetworkSpec:
    size = data.images.shape[1]
    downsamples = 3
    while downsamples > 1 and size // 2 ** downsamples < 4:
        downsamples -= 1
    return NetworkSpec(image_size=size, num_downsamples=downsamples, d_s=model.d_s, d_e=model.d_e)


def _checkpoint(ckpt_dir: Path, kind: str, spec=None):
    path = ckpt_dir / f"{kind}.npz"
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    return load_checkpoint(path, spec, kind=kind)


def _synthesizer(ckpt_dir: Path):
    from .synthesis import Synthesizer

    G = _checkpoint(ckpt_dir, "G")
    spec = G.spec
    nets = {k: _checkpoint(ckpt_dir, k, spec) for k in ("E", "FEM", "FSR")}
    return Synthesizer(nets["E"], G, nets["FEM"], nets["FSR"])


@dataclass
class _Input:
    path: str
    image: np.ndarray
    identity: int


def _read_inputs(paths) -> list[_Input]:
    """Image files, image directories or dataset roots; unreadable files are skipped."""
    items = []
    for p in map(Path, paths):
        if p.is_dir() and (p / "manifest.csv").exists():
            rows = [(p / r.path, r.identity) for r in DatasetManifest.read(p / "manifest.csv").rows]
        elif p.is_dir():
            rows = [(f, -1) for f in sorted(p.rglob("*.png"))]
        else:
            rows = [(p, -1)]
        for f, ident in rows:
            try:
                items.append(_Input(str(f), load_png(f), ident))
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
    if not items:
        raise DataError("no readable input images")
    sizes = {it.image.shape for it in items}
    if len(sizes) != 1:
        raise DataError(f"input images differ in size: {sorted(sizes)}")
    return items


def _parse_labels(text: str) -> list[int]:
    try:
        labels = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"labels must be integers, got {text!r}") from None
    if not labels or any(not 0 <= k < N_ILLUM for k in labels):
        raise UsageError(f"labels must lie in 0..{N_ILLUM - 1}")
    return labels


def _parse_poses(text: str, d_s: int, d_e: int) -> list[tuple[str, ShapeParams]]:
    from .synthesis import preset_pose

    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise UsageError("at least one pose is required")
    try:
        return [(n, preset_pose(n, d_s, d_e)) for n in names]
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def _write_outputs(out: Path, records: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, OUTPUT_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow({k: r[k] for k in OUTPUT_HEADER})
    (out / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")


def _emit(out: Path, images, records: list[dict]) -> None:
    for img, rec in zip(images, records):
        save_png(img, out / rec["path"])
    _write_outputs(out, records)
    log.info("wrote %d images to %s", len(records), out)


def _pose_record(syn, source_code, pose: ShapeParams) -> str:
    d_s = syn.layout.d_s
    v = pose.to_vector().copy()
    v[12:12 + d_s] = source_code.pose[12:12 + d_s]
    return theta_to_b64(ShapeParams.from_vector(v, d_s, syn.layout.d_e))


def _render_grid(syn, items, poses, labels, out: Path):
    """Every input at every (pose, label); pose None keeps the input's own pose."""
    images = np.stack([it.image for it in items])
    codes = syn.source_codes(images)
    outputs, records = [], []
    for (pname, pose) in poses:
        for lab in labels:
            if pose is None:
                new = [c.__class__(c.latent, c.identity, c.pose, np.eye(N_ILLUM)[lab], c.layout) for c in codes]
            else:
                new = syn.with_pose(codes, pose, lab)
            gen = syn.generate_codes(new)
            for i, it in enumerate(items):
                tag = f"{Path(it.path).stem}_{pname}_l{lab}"
                records.append({"path": f"{i:05d}_{tag}.png", "source": it.path, "identity": it.identity,
                                "illum": lab, "pose": pname,
                                "theta_b64": theta_to_b64(ShapeParams.from_vector(new[i].pose, syn.layout.d_s,
                                                                                  syn.layout.d_e))})
                outputs.append(gen[i])
    _emit(out, outputs, records)
    return records


# ----------------------------------------------------------------------------- commands


def cmd_make_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(_require(args.out, "--out"), args.overwrite)
    model = make_toy_model(V=args.vertices, d_s=args.d_s, d_e=args.d_e, seed=cfg.seed)
    data = build_dataset(model, args.identities, args.per_identity, seed=cfg.seed,
                         image_size=(args.image_size, args.image_size), identity_start=args.identity_start)
    data.write(out)
    model.save(out / MODEL_STEM)
    log.info("wrote %d images of %d identities to %s", len(data), args.identities, out)
    return EXIT_OK


def cmd_pretrain(kind: str):
    def run(args) -> int:
        from .trainer import pretrain_fem, pretrain_fsr

        cfg = _config(args)
        data, model = _load_data(_require(args.data, "--data"))
        ckpt = _require(args.checkpoint_dir, "--checkpoint-dir")
        target = ckpt / f"{kind}.npz"
        if target.exists() and not args.overwrite:
            raise DataError(f"{target} exists; pass --overwrite to replace it")
        ckpt.mkdir(parents=True, exist_ok=True)
        result = (pretrain_fem if kind == "FEM" else pretrain_fsr)(data, cfg, _spec_for(data, model))
        save_checkpoint(result.net, target)
        log.info("saved %s", target)
        return EXIT_OK
    return run


def cmd_train(args) -> int:
    from .trainer import train_joint, write_loss_log

    cfg = _config(args)
    data, model = _load_data(_require(args.data, "--data"))
    ckpt = _require(args.checkpoint_dir, "--checkpoint-dir")
    fem = _checkpoint(ckpt, "FEM")
    fsr = _checkpoint(ckpt, "FSR", fem.spec)
    state = ckpt / "train_state.pt"
    resume = state if args.resume else None
    if resume is not None and not state.exists():
        raise CheckpointError(f"nothing to resume: {state} does not exist")
    if resume is None and state.exists() and not args.overwrite:
        raise DataError(f"{state} exists; pass --resume to continue or --overwrite to restart")
    result = train_joint(data, fem, fsr, model, cfg, spec=fem.spec, checkpoint_dir=ckpt,
                         resume_from=resume, max_steps=args.max_steps)
    write_loss_log(result.log, ckpt / "loss_log.jsonl")
    log.info("trained to step %d%s", result.step, "" if result.finished else " (paused)")
    return EXIT_OK


def cmd_frontalize(args) -> int:
    syn = _synthesizer(_require(args.checkpoint_dir, "--checkpoint-dir"))
    items = _read_inputs(args.inputs)
    out = _prepare_out(_require(args.out, "--out"), args.overwrite)
    _render_grid(syn, items, _parse_poses("frontal", syn.layout.d_s, syn.layout.d_e), [args.label], out)
    return EXIT_OK


def cmd_rotate(args) -> int:
    syn = _synthesizer(_require(args.checkpoint_dir, "--checkpoint-dir"))
    poses = _parse_poses(args.poses, syn.layout.d_s, syn.layout.d_e)
    items = _read_inputs(args.inputs)
    out = _prepare_out(_require(args.out, "--out"), args.overwrite)
    _render_grid(syn, items, poses, [args.label], out)
    return EXIT_OK


def cmd_relight(args) -> int:
    syn = _synthesizer(_require(args.checkpoint_dir, "--checkpoint-dir"))
    labels = _parse_labels(args.labels)
    poses = _parse_poses(args.poses, syn.layout.d_s, syn.layout.d_e) if args.poses else [("source", None)]
    items = _read_inputs(args.inputs)
    out = _prepare_out(_require(args.out, "--out"), args.overwrite)
    _render_grid(syn, items, poses, labels, out)
    return EXIT_OK


def cmd_augment(args) -> int:
    from .synthesis import YAW_PRESETS, augment

    if args.multiplier not in (1, 3):
        raise UsageError("--multiplier must be 1 or 3")
    root = _require(args.data, "--data").resolve()
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        raise DataError(f"{root} has no manifest.csv")
    source = DatasetManifest.read(manifest_path)
    model = _load_model(root)
    syn = _synthesizer(_require(args.checkpoint_dir, "--checkpoint-dir"))
    poses = _parse_poses(args.poses or ",".join(YAW_PRESETS), syn.layout.d_s, syn.layout.d_e)
    labels = _parse_labels(args.labels)
    out = Path(args.out) if args.out else root.with_name(f"{root.name}_aug{args.multiplier}")
    out = _prepare_out(out, args.overwrite)

    images = np.stack([load_png(root / r.path) for r in source.rows])
    aug = augment(syn, images, args.multiplier, [p for _, p in poses], labels, _seed(args))
    n = len(source.rows)

    rows = []
    for r in source.rows:
        (out / r.path).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(root / r.path, out / r.path)
        rows.append(ManifestRow(r.path, r.identity, r.illum, r.theta_b64, "raw"))
    for k in range(args.multiplier):
        for i, src in enumerate(source.rows):
            rel = f"{Path(src.path).parent.as_posix()}/aug{k}_{Path(src.path).stem}.png"
            save_png(aug.images[k, i], out / rel)
            theta = ShapeParams.from_vector(aug.thetas[k, i], syn.layout.d_s, syn.layout.d_e)
            rows.append(ManifestRow(rel, src.identity, int(aug.labels[k, i]), theta_to_b64(theta), "synth"))
    raw, synth = rows[:n], sorted(rows[n:], key=lambda r: r.path)
    DatasetManifest(raw + synth, source.seed).write(out / "manifest.csv")
    model.save(out / MODEL_STEM)
    log.info("augmented %d sources into %d rows at %s", n, len(rows), out)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    syn = _synthesizer(_require(args.checkpoint_dir, "--checkpoint-dir"))
    items = _read_inputs([args.left, args.right])
    if len(items) != 2:
        raise DataError("interpolation needs exactly two readable images")
    out = _prepare_out(_require(args.out, "--out"), args.overwrite)
    frames = syn.interpolate(items[0].image, items[1].image, args.steps, args.label)
    alphas = np.linspace(0.0, 1.0, args.steps)
    records = [{"path": f"frame_{i:03d}.png", "source": f"{items[0].path}|{items[1].path}",
                "identity": -1, "illum": args.label, "pose": f"alpha={a!r}", "theta_b64": ""}
               for i, a in enumerate(alphas)]
    _emit(out, frames, records)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import recognition_experiment

    cfg = _config(args)
    train, _ = _load_data(_require(args.train, "--train"))
    test, _ = _load_data(_require(args.test, "--test"))
    try:
        report = recognition_experiment(train, test, cfg, max_pairs=args.max_pairs)
    except ContractError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "roc.csv").write_text(report.roc_csv(), encoding="utf-8")
    print(report.to_json())
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_file

    out = _require(args.out, "--out")
    out.mkdir(parents=True, exist_ok=True)
    for path in plot_file(Path(args.log), out):
        log.info("wrote %s", path)
    return EXIT_OK


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="flat key = value training config file")
    shared.add_argument("--seed", type=int, help="overrides the config seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--checkpoint-dir", help="directory holding network checkpoints")
    shared.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="faceaug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", parents=[shared], help="render a toy face dataset")
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--identity-start", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--vertices", type=int, default=64)
    p.add_argument("--d-s", type=int, default=16)
    p.add_argument("--d-e", type=int, default=8)
    p.set_defaults(func=cmd_make_data)

    for name, kind in (("pretrain-fem", "FEM"), ("pretrain-fsr", "FSR")):
        p = sub.add_parser(name, parents=[shared], help=f"pretrain the {kind} network")
        p.add_argument("--data", help="dataset root")
        p.set_defaults(func=cmd_pretrain(kind))

    p = sub.add_parser("train", parents=[shared], help="joint adversarial training")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--resume", action="store_true", help="continue from train_state.pt")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("frontalize", parents=[shared], help="render inputs at the frontal pose")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--label", type=int, default=PASS_THROUGH, choices=range(N_ILLUM), metavar="0..13")
    p.set_defaults(func=cmd_frontalize)

    p = sub.add_parser("rotate", parents=[shared], help="render inputs at pose presets")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--poses", default="yaw-45,frontal,yaw+45",
                   help="comma list of presets or yaw degrees")
    p.add_argument("--label", type=int, default=PASS_THROUGH, choices=range(N_ILLUM), metavar="0..13")
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("relight", parents=[shared], help="render inputs under illumination labels")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--labels", default="0,4,8,12")
    p.add_argument("--poses", help="optional pose presets; default keeps each input's pose")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("augment", parents=[shared], help="1x or 3x dataset augmentation")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--multiplier", type=int, default=1)
    p.add_argument("--poses", help="comma list of presets; default all yaw presets")
    p.add_argument("--labels", default=",".join(str(k) for k in range(N_ILLUM)))
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("interpolate", parents=[shared], help="morph between two faces")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--label", type=int, default=PASS_THROUGH, choices=range(N_ILLUM), metavar="0..13")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", parents=[shared], help="verification metrics of a fresh embedder")
    p.add_argument("--train", help="training dataset root")
    p.add_argument("--test", help="test dataset root (disjoint identities)")
    p.add_argument("--max-pairs", type=int, default=20000)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[shared], help="plot a loss log or accuracy records")
    p.add_argument("log", help="line-delimited JSON records")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        code, exc_ = EXIT_USAGE, exc
    except (CheckpointError, ConfigError) as exc:
        code, exc_ = EXIT_CHECKPOINT, exc
    except (DataError, ContractError, FileNotFoundError, ValueError) as exc:
        code, exc_ = EXIT_DATA, exc
    print(f"error: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
