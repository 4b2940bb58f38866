"""One executable for the whole lifecycle: data generation, preparation,
two-stage training, indexing, retrieval, session replay, evaluation,
serving, and self-testing.

Configuration comes from an optional JSON/TOML file plus flag overrides
(flags win). Every artifact-producing command writes a run manifest with
config snapshot, seeds, and input/output hashes; identical manifests yield
bit-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import dataprep as dp
from . import encoder as enc
from . import gradcore as gc
from . import relnet as rn
from . import report
from . import retrieval as rv
from . import train as tr
from .errors import (
    ConfigError,
    InvalidInputError,
    NotFoundError,
    ParseError,
    PartFitError,
)
from .manifest import RunTimer, write_run_manifest
from .simloss import DistanceStats, estimate_distance_stats

log = logging.getLogger("partfit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        with open(path) as fh:
            return json.load(fh)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:
            raise ConfigError("TOML configs need Python >= 3.11; use JSON") from exc
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    raise ConfigError(f"unsupported config format {path.suffix!r} (use .json or .toml)")


def make_train_config(cfg: dict, args) -> tr.TrainConfig:
    merged = dict(cfg.get("train", {}))
    merged["seed"] = args.seed
    for flag in ("stage1_epochs", "stage2_epochs", "stage1_batch", "stage2_batch",
                 "lr_peak", "stage2_lr_peak", "lr_min", "k_start", "k_end", "part_dropout",
                 "part_corrupt", "stats_pairs"):
        value = getattr(args, flag, None)
        if value is not None:
            merged[flag] = value
    try:
        return tr.TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def split_items(dataset: dp.DatasetPair, which: str) -> list[dp.ObjectAssembly]:
    wanted = set(dataset.splits.get(which, []))
    if not wanted:
        raise ConfigError(f"dataset has no {which!r} split")
    return [item for item in dataset.items if item.object_id in wanted]


def train_parts(dataset: dp.DatasetPair) -> list[dp.Part]:
    train_ids = set(dataset.splits.get("train", []))
    return [p for p in dataset.warehouse if p.source_object in train_ids]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    out = args.workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    timer = RunTimer()
    objects = dp.generate_synthetic(classes, args.count, args.seed)
    timer.lap("generate")
    catalog = []
    for obj in objects:
        entry = {"object_id": obj.object_id, "class_name": obj.class_name, "groups": []}
        for label, points in obj.groups:
            rel = f"{obj.object_id}_{label}.npy"
            np.save(out / rel, points.astype(np.float32))
            entry["groups"].append({"label": label, "file": rel, "points": len(points)})
        catalog.append(entry)
    with open(out / "raw_manifest.json", "w") as fh:
        json.dump({"classes": classes, "count": args.count, "seed": args.seed,
                   "objects": catalog}, fh, indent=1, sort_keys=True)
    timer.lap("write")
    write_run_manifest(out / "run_manifest.json", "gen-data",
                       {"classes": classes, "count": args.count}, args.seed,
                       inputs={}, outputs={"raw": out}, timer=timer)
    print(f"gen-data: {len(objects)} objects -> {out}")
    return EXIT_OK


def load_raw(raw_dir: Path) -> list[dp.RawObject]:
    manifest_path = raw_dir / "raw_manifest.json"
    if not manifest_path.exists():
        raise NotFoundError(f"no raw manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    objects = []
    for entry in manifest["objects"]:
        groups = [(g["label"], np.load(raw_dir / g["file"]).astype(np.float64))
                  for g in entry["groups"]]
        objects.append(dp.RawObject(object_id=entry["object_id"],
                                    class_name=entry["class_name"], groups=groups))
    return objects


def cmd_prepare(args):
    raw_dir = args.workdir / args.raw
    out = args.workdir / args.out
    timer = RunTimer()
    raw_objects = load_raw(raw_dir)
    timer.lap("load")
    pair = dp.build_datasets(raw_objects, seed=args.seed,
                             min_part_points=args.min_part_points,
                             max_part_points=args.max_part_points,
                             test_fraction=args.test_fraction)
    timer.lap("build")
    dp.save_dataset(out, pair)
    timer.lap("write")
    write_run_manifest(out / "run_manifest.json", "prepare",
                       {"min_part_points": args.min_part_points,
                        "max_part_points": args.max_part_points,
                        "test_fraction": args.test_fraction},
                       args.seed, inputs={"raw": raw_dir},
                       outputs={"dataset": out / "manifest.json",
                                "parts": out / "parts"},
                       timer=timer)
    print(f"prepare: {len(pair.items)} items, {len(pair.warehouse)} warehouse parts -> {out}")
    return EXIT_OK


def cmd_train_encoder(args):
    cfg_file = load_config_file(args.workdir / args.config if args.config else None)
    dataset = dp.load_dataset(args.workdir / args.dataset)
    config = make_train_config(cfg_file, args)
    enc_cfg = enc.EncoderConfig.from_dict(cfg_file["encoder"]) if "encoder" in cfg_file \
        else enc.EncoderConfig()
    timer = RunTimer()
    parts = train_parts(dataset)
    stats = estimate_distance_stats(parts, config.stats_pairs, config.seed)
    timer.lap("stats")
    params = enc.init_params(enc_cfg, np.random.default_rng(config.seed))
    trained, history = tr.train_stage1(params, parts, config, stats)
    timer.lap("train")
    out = args.workdir / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    gc.save_checkpoint(out, trained, {
        "encoder": enc_cfg.to_dict(),
        "train": config.to_dict(),
        "stats": stats.to_dict(),
        "classes": dataset.class_names,
        "part_labels": dataset.part_label_names,
    })
    reports = args.workdir / args.reports
    report.write_loss_curve(reports, "stage1_loss", history)
    timer.lap("write")
    write_run_manifest(Path(str(out) + ".run.json"), "train-encoder",
                       {"train": config.to_dict(), "encoder": enc_cfg.to_dict(),
                        "stats": stats.to_dict()},
                       config.seed,
                       inputs={"dataset": args.workdir / args.dataset / "manifest.json"},
                       outputs={"checkpoint": out}, timer=timer,
                       extra={"final_loss": history[-1],
                              "encoder_hash": rn.encoder_fingerprint(trained)})
    print(f"train-encoder: {config.stage1_epochs} epochs, "
          f"loss {history[0]:.4f} -> {history[-1]:.4f}, checkpoint {out}")
    return EXIT_OK


def cmd_train_relnet(args):
    cfg_file = load_config_file(args.workdir / args.config if args.config else None)
    dataset = dp.load_dataset(args.workdir / args.dataset)
    config = make_train_config(cfg_file, args)
    enc_path = args.workdir / args.encoder
    tensors, enc_meta = gc.load_checkpoint(enc_path)
    enc_cfg = enc.EncoderConfig.from_dict(enc_meta["encoder"])
    stats = DistanceStats.from_dict(enc_meta["stats"]) if enc_meta.get("stats") else None
    if enc_meta.get("classes") != dataset.class_names:
        raise ConfigError("encoder checkpoint was trained on different classes")
    rel_kwargs = dict(cfg_file.get("relnet", {}))
    rel_kwargs["num_classes"] = len(dataset.class_names)
    rel_kwargs["feature_dim"] = enc_cfg.feature_dim
    rel_cfg = rn.RelNetConfig(**rel_kwargs)
    timer = RunTimer()
    rel_params = rn.init_params(rel_cfg, np.random.default_rng(config.seed))
    items = split_items(dataset, "train")
    trained, history = tr.train_stage2(tensors, rel_params, items, config, rel_cfg)
    timer.lap("train")
    out = args.workdir / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle = rn.ModelBundle(enc_params=tensors, rel_params=trained,
                            enc_config=enc_cfg, rel_config=rel_cfg,
                            class_names=dataset.class_names,
                            part_label_names=dataset.part_label_names,
                            stats=stats, train_config=config.to_dict())
    rn.save_model(out, bundle)
    reports = args.workdir / args.reports
    report.write_loss_curve(reports, "stage2_loss", [h["loss"] for h in history],
                            extra_series={"train_accuracy": [h["accuracy"] for h in history]})
    timer.lap("write")
    write_run_manifest(Path(str(out) + ".run.json"), "train-relnet",
                       {"train": config.to_dict(), "relnet": rel_cfg.to_dict()},
                       config.seed,
                       inputs={"dataset": args.workdir / args.dataset / "manifest.json",
                               "encoder": enc_path},
                       outputs={"model": out}, timer=timer,
                       extra={"final": history[-1],
                              "encoder_hash": rn.encoder_fingerprint(tensors)})
    print(f"train-relnet: {config.stage2_epochs} epochs, "
          f"train accuracy {history[-1]['accuracy']:.3f}, model {out}")
    return EXIT_OK


def cmd_build_index(args):
    dataset = dp.load_dataset(args.workdir / args.dataset)
    bundle = rn.load_model(args.workdir / args.model)
    if bundle.class_names != dataset.class_names:
        raise ConfigError("model and dataset class tables differ")
    timer = RunTimer()
    index = rv.build_index(dataset.warehouse, bundle.enc_params)
    timer.lap("encode")
    out = args.workdir / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    rv.save_index(out, index)
    timer.lap("write")
    write_run_manifest(Path(str(out) + ".run.json"), "build-index", {}, args.seed,
                       inputs={"dataset": args.workdir / args.dataset / "manifest.json",
                               "model": args.workdir / args.model},
                       outputs={"index": out}, timer=timer,
                       extra={"encoder_hash": index.encoder_hash, "parts": len(index)})
    print(f"build-index: {len(index)} parts, encoder {index.encoder_hash[:12]} -> {out}")
    return EXIT_OK


def _load_engine_inputs(args):
    dataset = dp.load_dataset(args.workdir / args.dataset)
    bundle = rn.load_model(args.workdir / args.model)
    index = rv.load_index(args.workdir / args.index)
    expected = rn.encoder_fingerprint(bundle.enc_params)
    if index.encoder_hash != expected:
        raise InvalidInputError(
            f"index {args.index} was built with encoder {index.encoder_hash}, "
            f"but model {args.model} has encoder {expected}")
    return dataset, bundle, index


def cmd_retrieve(args):
    dataset, bundle, index = _load_engine_inputs(args)
    items = {item.object_id: item for item in dataset.items}
    if args.object_id not in items:
        raise NotFoundError(f"object {args.object_id} not in dataset items")
    item = items[args.object_id]
    rng = np.random.default_rng(args.seed)
    if args.remove_part is not None:
        removed = next((p for p in item.parts if p.part_id == args.remove_part), None)
        if removed is None:
            raise NotFoundError(f"object has no part {args.remove_part}")
    else:
        removed = item.parts[int(rng.integers(0, len(item.parts)))]
    context = rv.context_from_item(item, index, skip_ids=[removed.part_id])
    slot = rv.SlotTarget(centroid=removed.pose.centroid, axis=removed.pose.axis,
                         scale=removed.pose.scale)
    top = rv.rank_candidates(context, slot, item.object_class, index, bundle,
                             k=args.k, workers=args.threads)
    lines = ["rank\tpart_id\tpart_label\tsuitability\tlogit"]
    for c in top:
        lines.append(f"{c.rank}\t{c.part_id}\t{dataset.part_label_names[c.part_label]}"
                     f"\t{c.suitability:.6f}\t{c.logit:.4f}")
    text = "\n".join(lines)
    print(f"query {item.object_id}: removed part {removed.part_id} "
          f"({dataset.part_label_names[removed.part_label]})")
    print(text)
    if args.out:
        out = args.workdir / args.out
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_session_replay(args):
    from .service import Engine

    dataset, bundle, index = _load_engine_inputs(args)
    log_path = args.workdir / args.log
    if not log_path.exists():
        raise NotFoundError(f"no session log at {log_path}")
    events = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    if not events or events[0].get("event") != "create":
        raise ParseError("log must start with a create event")
    engine = Engine(bundle, index, dataset, session_dir=None)
    from .service import CreateSessionPayload

    record = engine._create_record(CreateSessionPayload(**events[0]["payload"]), persist=False)
    session = record.session
    mismatches = 0
    for step, event in enumerate(e for e in events[1:] if e.get("event") == "choose"):
        ranking = rv.session_candidates(session, index, bundle, event["k"])
        shown = [c.part_id for c in ranking]
        print(f"step {step + 1}: top-{event['k']} = {shown}")
        if args.check and "shown" in event and shown != event["shown"]:
            mismatches += 1
            print(f"  MISMATCH: log recorded {event['shown']}")
        rv.advance_session(session, event["part_id"], index)
        print(f"  chose {event['part_id']}; complete={session.complete}")
    if args.check and mismatches:
        print(f"session-replay: {mismatches} ranking mismatch(es)")
        return EXIT_INPUT
    print("session-replay: ok")
    return EXIT_OK


def cmd_eval(args):
    dataset, bundle, index = _load_engine_inputs(args)
    items = split_items(dataset, "test")
    sigmas = tuple(float(s) for s in args.sigmas.split(","))
    timer = RunTimer()
    rows, info = bl.evaluate_all(items, index, bundle, dataset.warehouse,
                                 seed=args.seed, n_queries=args.queries, sigmas=sigmas)
    timer.lap("evaluate")
    out = args.workdir / args.out
    paths = report.write_eval_tables(out, rows, info)
    figures = report.render_eval_figures(out, rows)
    timer.lap("report")
    write_run_manifest(out / "run_manifest.json", "eval",
                       {"queries": args.queries, "sigmas": list(sigmas)}, args.seed,
                       inputs={"dataset": args.workdir / args.dataset / "manifest.json",
                               "model": args.workdir / args.model,
                               "index": args.workdir / args.index},
                       outputs={"eval_tsv": paths["eval_tsv"]}, timer=timer,
                       extra={"excluded": info["excluded"],
                              "figures": [str(f) for f in figures.values()]})
    print((out / "eval.txt").read_text())
    return EXIT_OK


def cmd_serve(args):
    import uvicorn

    from .service import Engine, create_app

    dataset, bundle, index = _load_engine_inputs(args)
    session_dir = args.workdir / args.session_dir if args.session_dir else None
    engine = Engine(bundle, index, dataset, session_dir=session_dir)
    app = create_app(engine)
    if args.ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.workdir / args.ui_dir, html=True),
                  name="ui")
    host, _, port = args.listen.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="info")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest()
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"selftest {name:<24} {status}  {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"selftest: {failed} suite(s) failed")
        return EXIT_INPUT
    print(f"selftest: all {len(results)} suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partfit",
        description="context-based replacement-part retrieval for point-cloud objects")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--workdir", type=Path, default=Path("."),
                        help="all relative paths resolve against this directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--classes", default="table,chair,plane")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, default=Path("raw"))
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("prepare", help="split, filter and normalize raw objects")
    p.add_argument("--raw", type=Path, default=Path("raw"))
    p.add_argument("--out", type=Path, default=Path("dataset"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--min-part-points", type=int, default=dp.MIN_PART_POINTS)
    p.add_argument("--max-part-points", type=int, default=256)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train-encoder", help="stage 1: metric-learn the part encoder")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--out", type=Path, default=Path("encoder.ckpt"))
    p.add_argument("--reports", type=Path, default=Path("reports"))
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seed", type=int, required=True)
    for flag in ("stage1-epochs", "stage1-batch", "stats-pairs"):
        p.add_argument(f"--{flag}", type=int, default=None)
    for flag in ("lr-peak", "lr-min", "k-start", "k-end"):
        p.add_argument(f"--{flag}", type=float, default=None)
    p.set_defaults(fn=cmd_train_encoder)

    p = sub.add_parser("train-relnet", help="stage 2: train the relation classifier")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--encoder", type=Path, default=Path("encoder.ckpt"))
    p.add_argument("--out", type=Path, default=Path("model.ckpt"))
    p.add_argument("--reports", type=Path, default=Path("reports"))
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seed", type=int, required=True)
    for flag in ("stage2-epochs", "stage2-batch"):
        p.add_argument(f"--{flag}", type=int, default=None)
    p.add_argument("--part-dropout", type=float, default=None)
    p.add_argument("--part-corrupt", type=float, default=None)
    p.add_argument("--stage2-lr-peak", type=float, default=None)
    for flag in ("lr-peak", "lr-min"):
        p.add_argument(f"--{flag}", type=float, default=None)
    p.set_defaults(fn=cmd_train_relnet)

    p = sub.add_parser("build-index", help="pre-encode the warehouse")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--model", type=Path, default=Path("model.ckpt"))
    p.add_argument("--out", type=Path, default=Path("warehouse.pfix"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("retrieve", help="rank candidates for one damaged object")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--model", type=Path, default=Path("model.ckpt"))
    p.add_argument("--index", type=Path, default=Path("warehouse.pfix"))
    p.add_argument("--object-id", required=True)
    p.add_argument("--remove-part", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("session-replay", help="replay a persisted session log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--model", type=Path, default=Path("model.ckpt"))
    p.add_argument("--index", type=Path, default=Path("warehouse.pfix"))
    p.add_argument("--check", action="store_true",
                   help="fail if recomputed rankings differ from the log")
    p.set_defaults(fn=cmd_session_replay)

    p = sub.add_parser("eval", help="comparative evaluation against the baselines")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--model", type=Path, default=Path("model.ckpt"))
    p.add_argument("--index", type=Path, default=Path("warehouse.pfix"))
    p.add_argument("--out", type=Path, default=Path("reports"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--sigmas", default="0.0,0.05,0.1")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="run the session HTTP service")
    p.add_argument("--dataset", type=Path, default=Path("dataset"))
    p.add_argument("--model", type=Path, default=Path("model.ckpt"))
    p.add_argument("--index", type=Path, default=Path("warehouse.pfix"))
    p.add_argument("--listen", default="127.0.0.1:8571")
    p.add_argument("--session-dir", type=Path, default=Path("sessions"))
    p.add_argument("--ui-dir", type=Path, default=None,
                   help="serve a built frontend from this directory")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, InvalidInputError, NotFoundError) as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PartFitError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
