"""Command-line entry points for every pipeline stage.

Subcommands: generate, preprocess, train, build-index, evaluate, query,
serve. Every subcommand validates its own flags, exits 0 on success and
2 with a message naming the flag or file at fault otherwise. ``--json``
switches stdout to machine-readable JSON. A JSON config file
(``--config``) supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import dataset, encoder, evalharness, imaging, trainer
from . import index as idx


class CliError(Exception):
    """User-facing failure; printed to stderr, exit code 2."""


def _sha16(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise CliError(f"config {p} is not valid JSON: {err}")


def _cfg(args, config: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(key, default)


def _load_manifest(data_dir) -> dataset.Manifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    return dataset.load_manifest(path)


def _read_gray(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise CliError(f"image not found: {p}")
    img = imaging.read_image(p)
    return imaging.to_gray(img) if img.ndim == 3 else img


def _emit(args, payload: dict, human: str):
    print(json.dumps(payload, indent=2) if args.json else human)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args):
    config = _load_config(args.config)
    n = _cfg(args, config, "n", 200)
    designers = _cfg(args, config, "designers", 4)
    apps = _cfg(args, config, "apps", 30)
    seed = _cfg(args, config, "seed", 7)
    manifest = dataset.generate_corpus(n=n, designers=designers, apps=apps, seed=seed, out_dir=args.out)
    _emit(
        args,
        {"pairs": len(manifest), "out": str(args.out), "seed": seed},
        f"generated {len(manifest)} pairs under {args.out}",
    )


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args):
    manifest_path = Path(args.data) / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"manifest not found: {manifest_path}")
    manifest = dataset.load_manifest(manifest_path, check_files=False)
    try:
        out_w, out_h = (int(v) for v in args.size.split("x"))
    except ValueError:
        raise CliError(f"--size must look like 64x64, got {args.size!r}")
    done = 0
    for rec in manifest.records:
        if rec.sketch is not None or rec.sketch_photo is None:
            continue
        photo = _read_gray(manifest.resolve(rec.sketch_photo))
        clean = dataset.postprocess(photo, np.asarray(rec.marker_corners, dtype=float), out_w, out_h, args.thresh)
        rel = f"sketches/{rec.example_id}_{rec.designer_id}.png"
        (manifest.root / "sketches").mkdir(exist_ok=True)
        imaging.write_png(manifest.resolve(rel), clean)
        rec.sketch = rel
        done += 1
    dataset.save_manifest(manifest, manifest_path)
    _emit(args, {"processed": done}, f"postprocessed {done} raw sketches")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_examples(manifest, records, enc_config) -> list:
    out = []
    for rec in records:
        sketch = _read_gray(manifest.resolve(rec.sketch))
        shot = _read_gray(manifest.resolve(rec.screenshot))
        out.append(
            trainer.TrainExample(
                example_id=rec.example_id,
                app_id=rec.app_id,
                designer_id=rec.designer_id,
                sketch=encoder.preprocess(sketch, enc_config).data,
                screenshot=encoder.preprocess(shot, enc_config).data,
            )
        )
    return out


def cmd_train(args):
    config = _load_config(args.config)
    manifest = _load_manifest(args.data)
    enc_config = encoder.profile_config(_cfg(args, config, "profile", "desk"))
    train_recs, test_recs = trainer.split(manifest.records, test_designer=args.test_designer)
    if not train_recs:
        raise CliError("split produced an empty training set")
    print(f"split: {len(train_recs)} train / {len(test_recs)} test pairs", file=sys.stderr)

    tconfig = trainer.TrainConfig(
        batch_size=int(_cfg(args, config, "batch-size", trainer.DEFAULT_BATCH)),
        lr=float(_cfg(args, config, "lr", trainer.DEFAULT_LR)),
        margin=float(_cfg(args, config, "margin", trainer.DEFAULT_MARGIN)),
        epochs=int(_cfg(args, config, "epochs", 30)),
        seed=int(_cfg(args, config, "seed", 0)),
    )
    examples = _train_examples(manifest, train_recs, enc_config)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    result = trainer.train(
        tconfig,
        examples,
        encoder_config=enc_config,
        checkpoint_dir=args.checkpoint_dir,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoder.save(result.pair, out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    trainer.write_trace(result.trace, trace_path)
    _emit(
        args,
        {
            "weights": str(out),
            "trace": str(trace_path),
            "epochs_run": result.epochs_run,
            "stopped_early": result.stopped_early,
            "aborted": result.aborted,
            "train_pairs": len(train_recs),
            "test_pairs": len(test_recs),
            "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
        },
        f"trained {result.epochs_run} epochs -> {out}",
    )


# ---------------------------------------------------------------------------
# build-index
# ---------------------------------------------------------------------------


def _parse_grid(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
        if rows < 1 or cols < 1:
            raise ValueError
        return rows, cols
    except ValueError:
        raise CliError(f"--grid must look like 3x3, got {text!r}")


def cmd_build_index(args):
    manifest = _load_manifest(args.data)
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise CliError(f"weights not found: {weights_path}")
    pair = encoder.load(weights_path)

    records = manifest.records
    if args.split != "all":
        train_recs, test_recs = trainer.split(manifest.records, test_designer=args.test_designer)
        records = train_recs if args.split == "train" else test_recs

    grid = _parse_grid(args.grid) if args.grid else None
    items = []
    seen = set()
    for rec in records:
        if rec.example_id in seen:
            continue
        seen.add(rec.example_id)
        shot = _read_gray(manifest.resolve(rec.screenshot))
        item = idx.IndexedItem(
            item_id=rec.example_id,
            full=encoder.embed_image(pair.screenshot, shot),
            trace_id=rec.trace_id if args.traces else None,
            trace_position=rec.trace_position if args.traces else None,
        )
        if grid is not None:
            item.parts = encoder.embed_cells(pair.screenshot, shot, *grid)
        items.append(item)
    store = idx.build(items)
    store.save(args.out)
    _emit(
        args,
        {"items": len(store), "out": str(args.out), "fingerprint": store.fingerprint()},
        f"indexed {len(store)} screenshots -> {args.out} ({store.fingerprint()})",
    )


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args):
    config = _load_config(args.config)
    manifest = _load_manifest(args.data)
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise CliError(f"weights not found: {weights_path}")
    pair = encoder.load(weights_path)

    train_recs, test_recs = trainer.split(manifest.records, test_designer=args.test_designer)
    if not test_recs:
        raise CliError("split produced an empty test set")
    items = evalharness.load_eval_items(manifest, test_recs)

    bcfg = bl.BaselineConfig(
        image_size=int(_cfg(args, config, "baseline-size", 64)),
        vocab_size=int(_cfg(args, config, "vocab-size", 256)),
        seed=int(_cfg(args, config, "seed", 0)),
    )
    fingerprints = {"weights": _sha16(weights_path)}
    if args.codebook and Path(args.codebook).exists():
        book = bl.load_codebook(args.codebook)
        fingerprints["codebook"] = _sha16(args.codebook)
    else:
        train_items = evalharness.load_eval_items(manifest, train_recs)
        descs = [bl.sketch_descriptor(it.sketch, bcfg) for it in train_items]
        descs += [bl.screenshot_descriptor(it.screenshot, bcfg) for it in train_items]
        book = bl.fit_codebook(descs, bcfg)
        if args.codebook:
            bl.save_codebook(book, args.codebook)
            fingerprints["codebook"] = _sha16(args.codebook)

    report = evalharness.run_eval(items, pair, book, bcfg, fingerprints)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(report.to_json() if args.json else report.to_text())


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------


def _parse_cells(text):
    cells = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            r, c = (int(v) for v in part.split(","))
        except ValueError:
            raise CliError(f"--cells must look like '0,0;1,2', got {text!r}")
        cells.append((r, c))
    if not cells:
        raise CliError("--cells selects no cells")
    return cells


def cmd_query(args):
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise CliError(f"weights not found: {weights_path}")
    index_path = Path(args.index)
    if not index_path.exists():
        raise CliError(f"index not found: {index_path}")
    pair = encoder.load(weights_path)
    store = idx.load(index_path)

    if args.mode == "full":
        if len(args.images) != 1:
            raise CliError("full mode takes exactly one sketch image")
        q = encoder.embed_image(pair.sketch, _read_gray(args.images[0]))
        hits = store.query_full(q, k=args.k)
    elif args.mode == "segments":
        if len(args.images) != 1:
            raise CliError("segments mode takes exactly one sketch image")
        if not args.cells:
            raise CliError("segments mode requires --cells")
        if store.grid is None:
            raise CliError("index was built without part embeddings (use build-index --grid)")
        rows, cols = store.grid
        embs = encoder.embed_cells(pair.sketch, _read_gray(args.images[0]), rows, cols)
        cells = [(r, c, embs[r, c]) for r, c in _parse_cells(args.cells)]
        try:
            hits = store.query_segments(cells, k=args.k)
        except ValueError as err:
            raise CliError(str(err))
    else:  # flow
        if len(args.images) < 2:
            raise CliError("flow mode takes at least two sketch images in order")
        seq = [encoder.embed_image(pair.sketch, _read_gray(p)) for p in args.images]
        try:
            hits = store.query_flow(seq, k=args.k)
        except ValueError as err:
            raise CliError(str(err))

    if args.json:
        print(json.dumps({"results": [{"id": h.item_id, "distance": h.distance} for h in hits]}, indent=2))
    else:
        for h in hits:
            print(f"{h.item_id}\t{h.distance:.6f}")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def cmd_serve(args):
    from . import service

    for label, path in (("weights", args.weights), ("index", args.index)):
        if not Path(path).exists():
            raise CliError(f"{label} not found: {path}")
    state = service.ServiceState(args.weights, args.index, data_dir=args.data)
    print(f"serving on {args.host}:{args.port} (index {state.snapshot.fingerprint})", file=sys.stderr)
    service.serve(state, host=args.host, port=args.port)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchsearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with defaults")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--designers", type=int)
    p.add_argument("--apps", type=int)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="rectify + binarize raw sketch photos")
    p.add_argument("--data", required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--thresh", type=float, default=0.5)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the twin encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=["desk", "full"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="loss trace CSV path")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--test-designer")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="embed screenshots into an index file")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--grid", help="part-embedding grid, e.g. 3x3")
    p.add_argument("--traces", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--test-designer")
    common(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("evaluate", help="Top-k report: chance vs baseline vs encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--codebook", help="codebook file to load, or to save after fitting")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--test-designer")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("query", help="rank the index for sketch image(s)")
    p.add_argument("images", nargs="+")
    p.add_argument("--weights", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--mode", choices=["full", "segments", "flow"], default="full")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--cells", help="active cells for segments mode, e.g. '0,0;1,2'")
    common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--weights", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", help="corpus dir for thumbnails")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
