"""Command line: ``gen``, ``train``, ``eval`` and ``report``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then explicit flags. The seed falls back to ``$CSL_SEED``.
Exit codes: 0 ok, 2 usage or config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema

from . import csl, evalkit
from .errors import ConfigError, InvalidInputError, NumericError
from .simkit import dataset as ds

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "gen": {
        "condition": "anechoic",
        "sessions": 50,
        "out": "data",
        "sources": 1,
        "split": "0.8,0.1,0.1",
        "workers": os.cpu_count() or 1,
        "block_frames": 1,
        "snr_db": None,
        "wav_dir": None,
        "duration": "2.5,3.5",
    },
    "train": {
        "dataset": None,
        "out": "model.ckpt",
        "log": None,
        "epochs": 300,
        "batch_size": 8,
        "lr": 1e-5,
        "hidden": "1024,512,256",
        "max_bins": None,
        "phase_ref": "none",
        "sign": "mic-pair",
        "c1": 0.2,
        "c2": 0.8,
        "val_max": None,
    },
    "eval": {
        "dataset": None,
        "method": "all",
        "checkpoint": None,
        "win": "0.05,0.2,0.5,1.0,full",
        "split": "test",
        "out": "reports",
        "two_source": False,
        "nsrc": 2,
        "bandwidth": 1.0,
        "confidence": False,
        "max_sessions": None,
    },
    "report": {
        "inputs": None,
        "out": None,
    },
}

_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _schema() -> dict:
    def section(defaults):
        props = {}
        for key, val in defaults.items():
            if val is None:
                props[key] = {"type": ["string", "number", "integer", "boolean", "array", "null"]}
            else:
                t = _TYPES[type(val)]
                props[key] = {"type": ["number", "integer"] if t == "number" else t}
        return {"type": "object", "properties": props, "additionalProperties": False}

    return {
        "type": "object",
        "properties": {"seed": {"type": "integer"}, **{cmd: section(d) for cmd, d in DEFAULTS.items()}},
        "additionalProperties": False,
    }


def load_config(path) -> dict:
    """Read and validate a JSON config; unknown keys are rejected."""
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc.message}") from exc
    return cfg


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (flags win) for ``cmd``."""
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    out = dict(DEFAULTS[cmd])
    out.update(cfg.get(cmd, {}))
    for key in DEFAULTS[cmd]:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        env = os.environ.get("CSL_SEED")
        try:
            seed = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise ConfigError(f"CSL_SEED must be an integer, got {env!r}") from exc
    out["seed"] = int(seed)
    return out


def _floats(text, n=None, name="value") -> list:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def _dataset_root(path) -> Path:
    if path is None:
        raise ConfigError("--dataset is required")
    root = Path(path)
    if not (root / ds.MANIFEST).exists():
        raise ConfigError(f"no dataset at {root} (missing {ds.MANIFEST})")
    return root


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    o = resolve("gen", args)
    manifest = ds.gen_dataset(
        o["condition"], int(o["sessions"]), o["out"], n_sources=int(o["sources"]),
        split_fractions=_floats(o["split"], 3, "split"), seed=o["seed"], workers=int(o["workers"]),
        block_frames=int(o["block_frames"]), snr_db=None if o["snr_db"] is None else float(o["snr_db"]),
        wav_dir=o["wav_dir"], duration_range=tuple(_floats(o["duration"], 2, "duration")),
    )
    counts = {}
    for s in manifest["sessions"]:
        counts[s["split"]] = counts.get(s["split"], 0) + 1
    t60 = [s["t60"] for s in manifest["sessions"]]
    print(f"wrote {len(manifest['sessions'])} sessions to {o['out']} "
          f"(condition {o['condition']}, t60 {min(t60):.3f}-{max(t60):.3f} s, splits {counts})")
    return EXIT_OK


def _train_config(o) -> csl.TrainConfig:
    return csl.TrainConfig(
        batch_size=int(o["batch_size"]), epochs=int(o["epochs"]), lr=float(o["lr"]),
        c1=float(o["c1"]), c2=float(o["c2"]), seed=o["seed"],
        hidden=tuple(int(h) for h in _floats(o["hidden"], name="hidden")),
        max_bins=None if o["max_bins"] is None else int(o["max_bins"]),
        phase_ref=o["phase_ref"], sign_method=o["sign"],
        val_max_sessions=None if o["val_max"] is None else int(o["val_max"]),
    )


def cmd_train(args) -> int:
    o = resolve("train", args)
    root = _dataset_root(o["dataset"])
    cfg = _train_config(o)
    feat = {"threshold_db": cfg.threshold_db, "band": cfg.band, "phase_ref": cfg.phase_ref}
    train = [csl.prepare_interval(s, **feat) for s in ds.load_split(root, "train")]
    val = [csl.prepare_interval(s, keep_stft=cfg.sign_method == "mic-pair", **feat) for s in ds.load_split(root, "val")]
    evidence = val if val else train
    if cfg.sign_method == "mic-pair" and not val:
        evidence = [csl.prepare_interval(s, keep_stft=True, **feat) for s in ds.load_split(root, "train")]
    log_path = o["log"] or str(Path(o["out"]).with_suffix(".log.jsonl"))
    for path in (o["out"], log_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    result = csl.train(train, val, cfg, log_path=log_path, checkpoint_path=o["out"], evidence=evidence,
                       dump_dir=Path(o["out"]).parent)
    last = result.history[-1] if result.history else {}
    print(f"saved {o['out']} after {cfg.epochs} epochs; last loss {last.get('train_loss', float('nan')):.5f}, "
          f"val error {last.get('val_error_deg', float('nan')):.2f} deg; sign {result.sign}")
    return EXIT_OK


def cmd_eval(args) -> int:
    o = resolve("eval", args)
    root = _dataset_root(o["dataset"])
    methods = evalkit.METHODS + ("all",)
    if o["method"] not in methods:
        raise ConfigError(f"unknown method {o['method']!r}; choose from {', '.join(methods)}")
    wins = evalkit.parse_windows(o["win"])
    sessions = ds.load_split(root, o["split"] if o["split"] != "all" else None)
    if o["max_sessions"] is not None:
        sessions = sessions[: int(o["max_sessions"])]
    if not sessions:
        raise ConfigError(f"split {o['split']!r} of {root} is empty")
    params = features = None
    needs_model = o["method"] in ("csl", "all") or o["two_source"] or o["confidence"]
    if needs_model:
        if o["checkpoint"] is None:
            if o["method"] == "csl" or o["two_source"] or o["confidence"]:
                raise ConfigError("--checkpoint is required for C-SL evaluation")
        else:
            params, header = csl.load_model(o["checkpoint"])
            features = csl.feature_settings(header)
    out = Path(o["out"])
    summary = {"dataset": str(root), "split": o["split"], "n_sessions": len(sessions)}
    if o["two_source"]:
        cfg = evalkit.KdeConfig(bandwidth_deg=float(o["bandwidth"]), n_src=int(o["nsrc"]))
        wins2 = [w for w in wins if w != "full"]
        rows, records = evalkit.two_source_eval(params, sessions, wins2, cfg, features=features)
        evalkit.write_rows_csv(out / "two_source.csv", rows)
        evalkit.write_records_csv(out / "two_source_windows.csv", records)
        summary["two_source"] = rows
    else:
        report = evalkit.window_sweep(o["method"], sessions, wins, params=params, features=features)
        evalkit.write_rows_csv(out / "sweep.csv", report.rows)
        evalkit.write_records_csv(out / "windows.csv", report.records)
        summary["sweep"] = report.rows
        rows = report.rows
    if o["confidence"]:
        conf = evalkit.confidence_analysis(params, sessions, features=features)
        evalkit.write_confidence_csv(out / "confidence.csv", conf)
        evalkit.write_overlay_csv(out / "high_confidence.csv", conf.high_confidence)
        summary["confidence_nonincreasing"] = conf.nonincreasing_fraction()
    evalkit.write_json(out / "report.json", summary)
    for r in rows:
        print(f"{r.method:9s} {r.condition:9s} L={r.L_win:5s} {r.mean_deg:7.2f} +- {r.ci_deg:5.2f} deg (n={r.n})")
    return EXIT_OK


def cmd_report(args) -> int:
    """Pivot sweep CSVs into a method-by-window table."""
    o = resolve("report", args)
    inputs = o["inputs"]
    if not inputs:
        raise ConfigError("report needs at least one CSV input")
    inputs = [inputs] if isinstance(inputs, str) else inputs
    cells, cols, keys = {}, [], []
    for path in inputs:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["method"], row["condition"])
                if key not in keys:
                    keys.append(key)
                if row["L_win"] not in cols:
                    cols.append(row["L_win"])
                cells[key + (row["L_win"],)] = f"{float(row['mean_deg']):.2f} +- {float(row['ci_deg']):.2f}"
    lines = ["| method | condition | " + " | ".join(cols) + " |", "|---|---|" + "---|" * len(cols)]
    for key in keys:
        lines.append(f"| {key[0]} | {key[1]} | " + " | ".join(cells.get(key + (c,), "-") for c in cols) + " |")
    text = "\n".join(lines) + "\n"
    if o["out"]:
        Path(o["out"]).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _help(cmd, key, text):
    return f"{text} (default: {DEFAULTS[cmd][key]})"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cslkit", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it (default: none)")
        sp.add_argument("--seed", type=int, help="global seed (default: $CSL_SEED, else 0)")

    g = sub.add_parser("gen", help="simulate a dataset")
    common(g)
    g.add_argument("--condition", choices=sorted(ds.CONDITIONS), help=_help("gen", "condition", "room condition"))
    g.add_argument("--sessions", type=int, help=_help("gen", "sessions", "number of sessions"))
    g.add_argument("--out", help=_help("gen", "out", "output directory"))
    g.add_argument("--sources", type=int, choices=(1, 2), help=_help("gen", "sources", "sources per session"))
    g.add_argument("--split", help=_help("gen", "split", "train,val,test fractions"))
    g.add_argument("--workers", type=int, help=_help("gen", "workers", "worker processes"))
    g.add_argument("--block-frames", dest="block_frames", type=int,
                   help=_help("gen", "block_frames", "STFT frames per static-orientation render block"))
    g.add_argument("--snr-db", dest="snr_db", type=float, help=_help("gen", "snr_db", "white-noise SNR in dB"))
    g.add_argument("--wav-dir", dest="wav_dir", help=_help("gen", "wav_dir", "dry speech WAVs (synthetic if unset)"))
    g.add_argument("--duration", help=_help("gen", "duration", "min,max synthetic utterance length in s"))
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the mapping on a dataset")
    common(t)
    t.add_argument("--dataset", help=_help("train", "dataset", "dataset directory"))
    t.add_argument("--out", help=_help("train", "out", "checkpoint path"))
    t.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    t.add_argument("--epochs", type=int, help=_help("train", "epochs", "training epochs"))
    t.add_argument("--batch-size", dest="batch_size", type=int, help=_help("train", "batch_size", "intervals per batch"))
    t.add_argument("--lr", type=float, help=_help("train", "lr", "Adam learning rate"))
    t.add_argument("--hidden", help=_help("train", "hidden", "hidden layer widths"))
    t.add_argument("--max-bins", dest="max_bins", type=int,
                   help=_help("train", "max_bins", "bins sampled per interval and step (all if unset)"))
    t.add_argument("--phase-ref", dest="phase_ref", choices=("none", "mic1"),
                   help=_help("train", "phase_ref", "feature phase reference"))
    t.add_argument("--sign", choices=csl.SIGN_METHODS + ("none",), help=_help("train", "sign", "sign resolution"))
    t.add_argument("--c1", type=float, help=_help("train", "c1", "lower sub-interval ratio"))
    t.add_argument("--c2", type=float, help=_help("train", "c2", "upper sub-interval ratio"))
    t.add_argument("--val-max", dest="val_max", type=int,
                   help=_help("train", "val_max", "validation sessions scored per epoch"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate C-SL and baselines")
    common(e)
    e.add_argument("--dataset", help=_help("eval", "dataset", "dataset directory"))
    e.add_argument("--method", help=_help("eval", "method", "csl, srp-phat, lsdd or all"))
    e.add_argument("--checkpoint", help=_help("eval", "checkpoint", "trained model"))
    e.add_argument("--win", help=_help("eval", "win", "window lengths in s, or 'full'"))
    e.add_argument("--split", help=_help("eval", "split", "train, val, test or all"))
    e.add_argument("--out", help=_help("eval", "out", "report directory"))
    e.add_argument("--two-source", dest="two_source", action="store_const", const=True,
                   help=_help("eval", "two_source", "KDE multi-source evaluation"))
    e.add_argument("--nsrc", type=int, help=_help("eval", "nsrc", "maximum number of sources"))
    e.add_argument("--bandwidth", type=float, help=_help("eval", "bandwidth", "KDE bandwidth in degrees"))
    e.add_argument("--confidence", action="store_const", const=True,
                   help=_help("eval", "confidence", "confidence calibration report"))
    e.add_argument("--max-sessions", dest="max_sessions", type=int,
                   help=_help("eval", "max_sessions", "cap on evaluated sessions"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tabulate sweep CSVs")
    common(r)
    r.add_argument("inputs", nargs="*", help="sweep CSV files")
    r.add_argument("--out", help=_help("report", "out", "markdown output file"))
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "inputs", None) == []:
        args.inputs = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
