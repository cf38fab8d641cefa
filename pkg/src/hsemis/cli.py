"""``hsemis`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import SyntheticSpec, labels_csv, read_dataset, read_labels, split_dataset, synth_dataset, write_dataset
from .errors import ConfigError, DataError, HsemisError, NumericFault, StageError
from .him import ConfusionCounts, compute_metrics
from .hstn import atomic_write_text, read_hstn, write_hstn
from .mirec import MirecConfig, ReconstructionGenerator, reconstruct_images, train_mirec
from .nn.tensor import no_grad
from .pipeline import dumps_report, run_pipeline
from .qtest.node import NodeConfig, NodeModel, predict_proba, train_node
from .sirl import TemplateLibrary, build_template_library, label_reconstructed_set

log = logging.getLogger("hsemis")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericFault):
        return EXIT_NUMERIC
    return EXIT_OTHER


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
        cfg.validate()
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def _ids_from_csv(path) -> list[str]:
    ids, _ = read_labels(path)
    return ids


def _load_images(directory, ids=None) -> tuple[list[str], np.ndarray]:
    directory = Path(directory)
    if ids is None:
        ids = sorted(p.stem for p in directory.glob("*.hstn"))
    if not ids:
        raise DataError(f"{directory}: no .hstn tensors")
    images = []
    for sid in ids:
        path = directory / f"{sid}.hstn"
        if not path.exists():
            raise DataError(f"missing tensor {path}")
        img = read_hstn(path).astype(np.float64)
        images.append(img if img.ndim == 3 else img[..., None])
    return list(ids), np.stack(images)


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args)
    spec = SyntheticSpec(image_size=cfg["data.image_size"], class_count=len(cfg["data.counts"]),
                         counts=tuple(cfg["data.counts"]), noise_sigma=cfg["data.noise_sigma"], seed=cfg["seed"])
    try:
        ds = synth_dataset(spec)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(ds, _require_out(args))
    log.info("wrote %d samples to %s", len(ds), args.out)


def cmd_split(args) -> None:
    cfg = _config(args)
    ids, grades = read_labels(Path(args.data) / "labels.csv")
    frac = args.label_fraction if args.label_fraction is not None else cfg["split.label_fraction"]
    try:
        split = split_dataset(grades, frac, cfg["seed"], cfg["split.test_fraction"])
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from exc
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("labeled", split.labeled), ("unlabeled", split.unlabeled), ("test", split.test)):
        atomic_write_text(out / f"{name}.csv", labels_csv([ids[i] for i in idx], grades[idx]))


def cmd_mirec_train(args) -> None:
    cfg = _config(args)
    ids = _ids_from_csv(args.ids) if args.ids else None
    ids, images = _load_images(args.data, ids)
    for key, value in (("mirec.mask_ratio", args.mask_ratio), ("mirec.alpha", args.alpha)):
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    mc = MirecConfig(mask_ratio=cfg["mirec.mask_ratio"], alpha=cfg["mirec.alpha"],
                     steps=args.steps or cfg["mirec.steps"], batch_size=cfg["mirec.batch"], lr=cfg["mirec.lr"],
                     weight_decay=cfg["mirec.weight_decay"], patch_size=cfg["mirec.patch_size"], seed=cfg["seed"])
    result = train_mirec(images, mc, eval_images=images[:64])
    out = _require_out(args)
    meta = {"image_size": images.shape[1], "channels": images.shape[3], "patch_size": mc.patch_size,
            "mask_ratio": mc.mask_ratio, "seed": mc.seed, "masked_l1": result.eval_l1}
    save_checkpoint(out, result.generator.state_dict(), "mirec-generator", meta)
    atomic_write_text(out / "history.csv", result.history_csv())


def _load_generator(path) -> tuple[ReconstructionGenerator, dict]:
    state, meta = load_checkpoint(path, "mirec-generator")
    gen = ReconstructionGenerator(np.random.default_rng(0), meta["image_size"], meta["channels"], meta["patch_size"])
    gen.load_state_dict(state)
    gen.eval()
    return gen, meta


def cmd_reconstruct(args) -> None:
    cfg = _config(args)
    gen, meta = _load_generator(args.checkpoint)
    ids = _ids_from_csv(args.ids) if args.ids else None
    ids, images = _load_images(args.data, ids)
    recon = reconstruct_images(gen, images, meta["mask_ratio"], cfg["seed"])
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    for sid, img in zip(ids, recon):
        write_hstn(out / f"{sid}.hstn", img)


def _make_extractor(kind: str, encoder_ckpt):
    if kind == "pixels":
        return lambda images: np.asarray(images).reshape(len(images), -1)
    if kind == "encoder":
        if not encoder_ckpt:
            raise ConfigError("--extractor encoder needs --encoder <mirec checkpoint>")
        gen, _ = _load_generator(encoder_ckpt)

        def encode(images):
            with no_grad():
                return np.concatenate([gen.encode(images[i:i + 64]).data for i in range(0, len(images), 64)])
        return encode
    raise ConfigError(f"extractor {kind!r} is not available from the command line")


def cmd_sirl_label(args) -> None:
    cfg = _config(args)
    extractor = _make_extractor(args.extractor, args.encoder)
    templates = Path(args.templates)
    if (templates / "manifest.json").exists():
        state, meta = load_checkpoint(templates, "sirl-templates")
        if meta.get("extractor") != args.extractor:
            raise ConfigError(f"templates were built with extractor {meta.get('extractor')!r}")
        lib = TemplateLibrary(state["templates"], int(meta.get("k", cfg["sirl.k"])))
    else:
        ds = read_dataset(templates)
        feats = extractor(ds.images)
        classes = int(ds.grades.max()) + 1
        lib = build_template_library([feats[ds.grades == c] for c in range(classes)], cfg["sirl.k"],
                                     np.random.default_rng(cfg["seed"]))
        if args.save_templates:
            save_checkpoint(args.save_templates, {"templates": lib.templates}, "sirl-templates",
                            {"extractor": args.extractor, "k": lib.samples_per_class})
    ids, recon = _load_images(args.recon)
    tau = args.tau if args.tau is not None else cfg["sirl.tau"]
    alpha = args.alpha if args.alpha is not None else cfg["sirl.alpha"]
    if tau <= 0:
        raise ConfigError("tau must be positive")
    result = label_reconstructed_set(recon, extractor, lib, tau, alpha, ids)
    atomic_write_text(_require_out(args), result.to_csv())
    log.info("labeled %d, discarded %d", len(result.kept), result.discard_count)


def _binary_labels(path, left, right) -> tuple[list[str], np.ndarray]:
    ids, labels = read_labels(path) if _has_grade(path) else _read_id_label(path)
    if left is not None or right is not None:
        if left is None or right is None:
            raise ConfigError("--left and --right go together")
        keep = np.isin(labels, left + right)
        ids = [i for i, k in zip(ids, keep) if k]
        labels = np.isin(labels[keep], right).astype(np.int64)
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError(f"{path}: labels must be binary (or pass --left/--right)")
    return ids, labels


def _has_grade(path) -> bool:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return "grade" in header


def _read_id_label(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "label" not in rows[0] or "id" not in rows[0] and "sample_id" not in rows[0]:
        raise DataError(f"{path}: expected columns id,label")
    key = "id" if "id" in rows[0] else "sample_id"
    rows = [r for r in rows if int(r["label"]) >= 0]
    return [r[key] for r in rows], np.asarray([int(r["label"]) for r in rows], dtype=np.int64)


def _class_list(text):
    return None if text is None else [int(t) for t in text.split(",") if t.strip()]


def _node_config(cfg: RunConfig, args) -> NodeConfig:
    return NodeConfig(
        steps=args.steps or cfg["node.steps"], labeled_per_step=cfg["node.labeled_per_step"],
        unlabeled_per_step=cfg["node.unlabeled_per_step"],
        mu=args.mu if args.mu is not None else cfg["node.mu"], lr=cfg["node.lr"],
        weight_decay=cfg["node.weight_decay"], qcn_lr=cfg["qcn.lr"],
        lambda_schedule=args.lambda_schedule or cfg["node.lambda_schedule"], lambda_max=cfg["node.lambda_max"],
        ramp_fraction=cfg["node.ramp_fraction"], omega=cfg["node.omega"], eval_every=cfg["node.eval_every"],
        patience=cfg["node.patience"], eval_role=cfg["node.eval_role"], n_qubits=cfg["qcn.qubits"],
        qcn_layers=cfg["qcn.layers"], wire=args.wire if args.wire is not None else cfg["qcn.wire"],
        seed=cfg["seed"],
    )


def cmd_train_node(args) -> None:
    cfg = _config(args)
    if args.mu is not None and not 0.0 < args.mu < 1.0:
        raise ConfigError("mu must lie in (0, 1)")
    left, right = _class_list(args.left), _class_list(args.right)
    ids, labels = _binary_labels(args.labeled, left, right)
    data_dir = Path(args.data) if args.data else Path(args.labeled).parent
    _, x = _load_images(data_dir, ids)
    unl = _load_images(args.unlabeled)[1] if args.unlabeled else None
    val_x = val_y = None
    if args.val:
        v_ids, val_y = _binary_labels(args.val, left, right)
        _, val_x = _load_images(data_dir, v_ids)
    nc = _node_config(cfg, args)
    result = train_node(x, labels, unl, nc, val_x, val_y)
    out = _require_out(args)
    meta = {"channels": int(x.shape[-1]), "mu": nc.mu, "omega": nc.omega, "wire": result.model.wire,
            "n_qubits": nc.n_qubits, "qcn_layers": nc.qcn_layers, "seed": nc.seed, "best_step": result.best_step,
            "left": left, "right": right}
    save_checkpoint(out, result.model.state_dict(), "node", meta)
    atomic_write_text(out / "history.csv", result.history_csv())


def _load_node(path) -> tuple[NodeModel, dict]:
    state, meta = load_checkpoint(path, "node")
    nc = NodeConfig(mu=meta["mu"], omega=meta["omega"], wire=meta["wire"], n_qubits=meta["n_qubits"],
                    qcn_layers=meta["qcn_layers"])
    model = NodeModel.create(0, meta["channels"], nc)
    model.load_state_dict(state)
    return model, meta


def cmd_eval(args) -> None:
    cfg = _config(args)
    model, meta = _load_node(args.checkpoint)
    labels_path = args.labels or Path(args.data) / "labels.csv"
    left = _class_list(args.left) if args.left else meta.get("left")
    right = _class_list(args.right) if args.right else meta.get("right")
    ids, y = _binary_labels(labels_path, left, right)
    _, x = _load_images(args.data, ids)
    probs = predict_proba(model, x, args.role, cfg["qcn.batch"])
    metrics = compute_metrics(ConfusionCounts.from_predictions(y, probs.argmax(axis=1), 2))
    text = json.dumps(metrics, sort_keys=True, indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> None:
    cfg = _config(args)
    timings: dict = {}
    start = time.perf_counter()
    result = run_pipeline(cfg, timings)
    atomic_write_text(_require_out(args), dumps_report(result.report))
    log.info("run finished in %.1f s (%s)", time.perf_counter() - start,
             ", ".join(f"{k} {v:.1f}s" for k, v in timings.items()))


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--out", default=None, help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hsemis", description="Hierarchical semi-supervised grading pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="stratified labeled/unlabeled/test id lists")
    p.add_argument("--data", required=True)
    p.add_argument("--label-fraction", type=float, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("mirec-train", parents=[common], help="train the masked reconstruction GAN")
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default=None, help="csv with an id column restricting the images")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None, help="weight of the masked L1 term")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_mirec_train)

    p = sub.add_parser("reconstruct", parents=[common], help="repair masked images with a trained generator")
    p.add_argument("--ckpt", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sirl-label", parents=[common], help="proxy-label reconstructions by template similarity")
    p.add_argument("--templates", required=True, help="template checkpoint or labeled dataset directory")
    p.add_argument("--recon", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--extractor", choices=("pixels", "encoder"), default="pixels")
    p.add_argument("--encoder", default=None, help="mirec checkpoint for --extractor encoder")
    p.add_argument("--save-templates", default=None)
    p.set_defaults(func=cmd_sirl_label)

    p = sub.add_parser("train-node", parents=[common], help="train one teacher/student binary node")
    p.add_argument("--labeled", required=True, help="csv of id,label (or id,grade with --left/--right)")
    p.add_argument("--data", default=None, help="image directory for labeled ids (default: csv directory)")
    p.add_argument("--unlabeled", default=None)
    p.add_argument("--val", default=None)
    p.add_argument("--left", default=None)
    p.add_argument("--right", default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--lambda-schedule", choices=("ramp", "constant", "off"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--wire", type=int, default=None)
    p.set_defaults(func=cmd_train_node)

    p = sub.add_parser("run", parents=[common], help="full pipeline, writes report JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="binary metrics of a node checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--left", default=None)
    p.add_argument("--right", default=None)
    p.add_argument("--role", choices=("teacher", "student"), default="teacher")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except HsemisError as exc:
        code = exit_code(exc)
        print(f"hsemis {args.command}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"hsemis {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
