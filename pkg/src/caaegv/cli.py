"""Command line entry point: prepare, train, ablation, simulate, evaluate, report.

Exit codes: 0 success, 2 user or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import tables
from .dataset import load_image_file, load_images, read_manifest, save_png, scan_directory, write_manifest
from .evaluation import evaluate_models, train_embedding_net, train_gender_classifier
from .exceptions import CAAEError, NonFiniteLoss
from .nets import load_networks
from .trainer import simulate_ages, train

OUTPUT_ROOT_ENV = "CAAEGV_OUTPUT_ROOT"
EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3



class UserError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_out(path, default_name: str) -> Path:
    return Path(path) if path else output_root() / default_name


def _config(args) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    if getattr(args, "epochs", None) is not None:
        overrides.append(("epochs", args.epochs))
    return cfgmod.load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    config = _config(args)
    if args.source:
        config["dataset"] = {"directory": str(args.source)}
    out = resolve_out(args.out, "data")
    splits = cfgmod.dataset_splits(config)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / cfgmod.MANIFEST_NAME, splits, meta={"dataset": config["dataset"], "seed": config["seed"],
                                                            "split": config["split"]})
    cfgmod.write_config(config, out)
    print(f"wrote {sum(map(len, splits))} records to {out / cfgmod.MANIFEST_NAME}")
    return EXIT_OK


def _training_data(config, data):
    train_recs, _, _ = cfgmod.dataset_splits(config, data)
    images = load_images(train_recs, config["image_size"])
    groups = np.array([r.group for r in train_recs])
    sexes = np.array([r.sex_index for r in train_recs])
    return images, groups, sexes


def _data_ref(data) -> str | None:
    return None if data is None else str(Path(data).resolve())


def _train_one(config: dict, variant: str | None, data, run_dir: Path) -> str:
    images, groups, sexes = _training_data(config, data)
    tcfg = cfgmod.train_config(config, variant)
    name = variant or tcfg.ablation.name
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config({**config, "gender_on": tcfg.gender_on, "vgg_on": tcfg.vgg_on}, run_dir)
    train(tcfg, images, groups, sexes, out_dir=run_dir, meta={"variant": name, "data": _data_ref(data)})
    return name


def cmd_train(args) -> int:
    config = _config(args)
    out = resolve_out(args.out, "train")
    name = _train_one(config, None, args.data, out)
    print(f"trained {name}; checkpoint at {out / 'final'}")
    return EXIT_OK


def _ablation_worker(payload):
    config, variant, data, run_dir = payload
    return _train_one(config, variant, data, Path(run_dir))


def cmd_ablation(args) -> int:
    config = _config(args)
    root = resolve_out(args.out, "ablation")
    root.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(config, root)
    jobs = [(config, name, args.data, str(root / name)) for name in config["models"]]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=get_context("spawn")) as pool:
            done = list(pool.map(_ablation_worker, jobs))
    else:
        done = [_ablation_worker(j) for j in jobs]
    for name in done:
        print(f"{name}: {root / name / 'final'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    nets, _ = load_networks(args.checkpoint)
    if not Path(args.image).is_file():
        raise UserError(f"no such image: {args.image}")
    x = load_image_file(args.image, nets.arch.image_size)
    strip = simulate_ages(nets, x, args.sex)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, np.concatenate(list(strip), axis=1))
    print(f"wrote {out}")
    return EXIT_OK


def _checkpoint_name(path: Path, manifest: dict) -> str:
    name = manifest.get("meta", {}).get("variant")
    if name:
        return name
    return path.parent.name if path.name == "final" else path.name


def _records_at(path) -> list:
    path = Path(path)
    manifest = path / cfgmod.MANIFEST_NAME if path.is_dir() else path
    if manifest.is_file():
        return [r for part in read_manifest(manifest) for r in part]
    return scan_directory(path)


def cmd_evaluate(args) -> int:
    config = _config(args)
    paths = [Path(p) for p in args.checkpoints.split(",") if p]
    if not paths:
        raise UserError("--checkpoints needs at least one path")
    models, data_refs = {}, set()
    for p in paths:
        nets, manifest = load_networks(p)
        name = _checkpoint_name(p, manifest)
        if name in models:
            raise UserError(f"two checkpoints are both named {name!r}")
        models[name] = nets
        data_refs.add(manifest.get("meta", {}).get("data"))
    data = args.data
    if data is None:
        data_refs.discard(None)
        if len(data_refs) == 1:
            data = data_refs.pop()
    size = next(iter(models.values())).arch.image_size
    if data is None:
        train_recs = cfgmod.records_from_spec(config["dataset"])
    else:
        train_recs = _records_at(data)
    train_images = load_images(train_recs, size)
    inputs = _records_at(args.inputs)
    input_images = load_images(inputs, size)
    ev = config["evaluation"]
    clf, clf_table = train_gender_classifier(train_recs, train_images, min_age=ev["classifier_min_age"],
                                             seed=config["seed"], epochs=ev["classifier_epochs"])
    embedder = train_embedding_net(train_recs, train_images, seed=config["seed"], epochs=ev["embedder_epochs"])
    baseline = "CAAE" if "CAAE" in models else next(iter(models))
    report = evaluate_models(models, input_images, [r.sex_index for r in inputs], clf, embedder,
                             config["thresholds"], baseline=baseline, classifier_table=clf_table)
    report["meta"]["checkpoints"] = {n: str(p) for n, p in zip(models, paths)}
    out = Path(args.out) if args.out else output_root() / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.input).read_text())
    except OSError as exc:
        raise UserError(f"cannot read {args.input}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"{args.input} is not valid JSON: {exc}") from exc
    if not report:
        raise UserError(f"{args.input} is empty")
    cfgmod.validate(report, "report")
    missing = [m for m in report["meta"]["models"] if m not in report["models"] or m not in report["gains"]]
    if missing or report["meta"]["baseline"] not in report["models"]:
        raise UserError(f"report lists models without results: {missing or [report['meta']['baseline']]}")
    text = tables.render_csv(report) if args.format == "csv" else tables.render_text(report)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _override(text):
    try:
        return cfgmod.parse_override(text)
    except CAAEError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caaegv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted keys reach nested objects)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        return p

    p = with_config(sub.add_parser("prepare", help="build a dataset manifest"))
    p.add_argument("--source", type=Path, help="directory of face images (default: dataset block of the config)")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUTPUT_ROOT_ENV}/data)")
    p.set_defaults(func=cmd_prepare)

    p = with_config(sub.add_parser("train", help="train one model"))
    p.add_argument("--data", type=Path, help="prepared dataset directory or image directory")
    p.add_argument("--out", type=Path, help="run directory")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("ablation", help="train the four ablation models"))
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, help="root directory; one subdirectory per model")
    p.add_argument("--jobs", type=int, default=1, help="train up to this many models concurrently")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("simulate", help="age one photo across the ten groups")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--sex", choices=["male", "female"], required=True)
    p.add_argument("--out", type=Path, required=True, help="PNG path for the 1 x 10 strip")
    p.set_defaults(func=cmd_simulate)

    p = with_config(sub.add_parser("evaluate", help="score checkpoints on young input faces"))
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint directories")
    p.add_argument("--inputs", type=Path, required=True, help="directory of young faces or a prepared dataset")
    p.add_argument("--data", help="training data for the classifier and embedder (default: from checkpoints)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print the comparison tables of a report")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CAAEError, UserError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
