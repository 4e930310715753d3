"""Command-line entry point: ``straighten <command> --config X.ini --out DIR``.

Exit codes: 0 ok, 1 usage, 2 validation (bad config or input files),
3 runtime failure. Failures print a one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, datagen, netcore, probes, trainer
from .config import ExperimentConfig, load_config
from .errors import AttributeMissing, ConfigInvalid, FileMissing, IndexOutOfRange, StraightenError, ValidationError
from .rng import stream

log = logging.getLogger("straighten")

WORKERS_ENV = "STRAIGHTEN_WORKERS"
COMMANDS = ("gen", "train", "straightness", "probe", "geometry", "robust", "decode-strip", "compare")


class UsageError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigInvalid(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigInvalid(f"{WORKERS_ENV} must be at least 1")
    return n


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ----------------------------------------------------------------------
# run directory


class RunDir:
    """Output directory with the resolved config and an append-only manifest."""

    def __init__(self, path, cfg: ExperimentConfig | None, command: str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.inputs: dict = {}
        self.outputs: dict = {}
        if cfg is not None:
            (self.path / "config.ini").write_text(cfg.to_ini())

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileMissing(f"input not found: {path}")
        self.inputs[str(path)] = sha256(path)
        return path

    def file(self, name) -> Path:
        return self.path / name

    def wrote(self, path) -> None:
        path = Path(path)
        self.outputs[path.name] = sha256(path)

    def write_json(self, name, obj) -> Path:
        p = self.file(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.wrote(p)
        return p

    def write_csv(self, name, rows, columns) -> Path:
        p = self.file(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_cell(row[c]) for c in columns])
        self.wrote(p)
        return p

    def tag(self, checkpoint=None) -> str:
        """Provenance suffix: checkpoint hash and config hash."""
        parts = []
        if checkpoint is not None:
            parts.append(self.inputs.get(str(checkpoint), sha256(checkpoint))[:8])
        if self.cfg is not None:
            parts.append(self.cfg.digest()[:8])
        return "_".join(parts)

    def close(self) -> None:
        entry = {
            "command": self.command,
            "code_version": code_version(),
            "config_digest": self.cfg.digest() if self.cfg is not None else None,
            "seed": self.cfg.seed if self.cfg is not None else None,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        with open(self.path / "manifest.jsonl", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _scalars(d: dict) -> dict:
    return {k: v for k, v in d.items() if isinstance(v, (int, float, str, bool)) or v is None}


# ----------------------------------------------------------------------
# shared loading


def _dataset(run: RunDir, path) -> datagen.SequenceDataset:
    if not path:
        raise ConfigInvalid("no dataset given (use --dataset or the config)")
    return datagen.read_dataset(run.input(path))


def _checkpoint(run: RunDir, path):
    if not path:
        raise ConfigInvalid("--checkpoint is required")
    return netcore.load_checkpoint(run.input(path))


def _probe_dataset(run: RunDir, cfg: ExperimentConfig):
    return _dataset(run, cfg.evaluation.probe_dataset or cfg.training.dataset)


def _probe_config(cfg: ExperimentConfig, tap=None) -> probes.ProbeConfig:
    ev = cfg.evaluation
    return probes.ProbeConfig(tap=tap or ev.tap, max_train_frames=ev.max_train_frames,
                              max_test_frames=ev.max_test_frames, ridge=ev.ridge, bandwidth=ev.bandwidth,
                              l2=ev.l2, seed=cfg.seed)


def _identity_probe(spec, params, train_ds, test_ds, cfg, tap):
    return probes.evaluate_decoding(spec, params, train_ds, test_ds, "identity", _probe_config(cfg, tap))


# ----------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, run: RunDir, args) -> dict:
    gen = cfg.datagen
    if args.split:
        gen = dataclasses.replace(gen, split=args.split)
    if args.sequences:
        gen = dataclasses.replace(gen, n_sequences=args.sequences)
    sources = datagen.load_idx(run.input(cfg.sources.images), run.input(cfg.sources.labels))
    data = datagen.generate_dataset(sources, gen, cfg.seed, workers=workers())
    path = run.file(f"{gen.split}.strq")
    datagen.write_dataset(data, path)
    run.wrote(path)
    summary = {"path": str(path), "sequences": len(data), "T": data.T, "frame_shape": list(data.frame_shape),
               "pixel_straightness": trainer.measure_pixel_straightness(data)}
    run.write_json(f"gen_{gen.split}.json", summary)
    return summary


def cmd_train(cfg: ExperimentConfig, run: RunDir, args) -> dict:
    path = args.dataset or cfg.training.dataset
    data = _dataset(run, path)
    tcfg = cfg.train_config()
    tcfg.dataset = str(path)
    params, history = trainer.fit(tcfg, data, net=cfg.network, out_dir=run.path, params=None)
    for name in ("final.strw", "history.jsonl", "history_summary.json"):
        run.wrote(run.file(name))
    for ck in sorted(run.path.glob("ckpt_step*.strw")):
        run.wrote(ck)
    last = history.epochs[-1] if history.epochs else {}
    return {"checkpoint": str(run.file("final.strw")), "steps": len(history.records),
            "final_straightness": last.get("straightness"), "final_loss": last.get("loss")}


def cmd_straightness(cfg, run: RunDir, args) -> dict:
    spec, params = _checkpoint(run, args.checkpoint)
    data = _dataset(run, args.dataset)
    curve = analysis.straightness_curve(spec, params, data, cfg.evaluation.curve_sequences)
    tag = run.tag(args.checkpoint)
    run.write_csv(f"straightness_{tag}.csv", curve, ["stage", "name", "straightness", "n", "excluded"])
    taps = {name: curve[idx]["straightness"] for name, idx in spec.taps.items()}
    summary = {"pixel": curve[0]["straightness"], "final": curve[-1]["straightness"], "taps": taps,
               "stages": len(curve)}
    run.write_json(f"straightness_{tag}.json", summary)
    return summary


def cmd_probe(cfg, run: RunDir, args) -> dict:
    spec, params = _checkpoint(run, args.checkpoint)
    test = _dataset(run, args.dataset)
    train = _probe_dataset(run, cfg)
    pcfg = _probe_config(cfg)
    decoding, prediction, skipped = [], [], []
    for attr in cfg.evaluation.attributes:
        try:
            rep = probes.evaluate_decoding(spec, params, train, test, attr, pcfg)
        except AttributeMissing as exc:
            skipped.append({"attribute": attr, "reason": str(exc)})
            continue
        decoding.append(_scalars(rep))
        if attr in cfg.evaluation.predict_attributes:
            prediction.append(_scalars(probes.evaluate_prediction(
                spec, params, train, test, attr, pcfg, cfg.evaluation.predict_sequences)))
    tag = run.tag(args.checkpoint)
    cols = ["attribute", "tap", "r2", "rmse", "accuracy", "chance", "n_train", "n_test"]
    run.write_csv(f"decoding_{tag}.csv", [{c: r.get(c, "") for c in cols} for r in decoding], cols)
    if prediction:
        pcols = sorted(prediction[0])
        run.write_csv(f"prediction_{tag}.csv", prediction, pcols)
    summary = {"decoding": {r["attribute"]: r for r in decoding},
               "prediction": {r["attribute"]: r for r in prediction}, "skipped": skipped}
    run.write_json(f"probe_{tag}.json", summary)
    return summary


def cmd_geometry(cfg, run: RunDir, args) -> dict:
    spec, params = _checkpoint(run, args.checkpoint)
    test = _dataset(run, args.dataset)
    train = _probe_dataset(run, cfg)
    ev = cfg.evaluation
    sub = test.subset(np.arange(min(len(test), ev.geometry_sequences)))
    Z = probes.embed_sequences(spec, params, sub.frames, ev.tap)
    probe = _identity_probe(spec, params, train, test, cfg, ev.tap)["probe"]
    rows, conds = [], {}
    for cond in analysis.PairingCondition:
        h = analysis.pairing_histograms(Z, sub.labels, sub.kinds, cond, classifier=probe.W,
                                        max_pairs=ev.max_pairs, seed=cfg.seed)
        conds[cond.value] = {k: h[k] for k in ("n_pairs", "mean", "std", "mean_abs")}
        for b, count in enumerate(h["counts"]):
            rows.append({"condition": cond.value, "bin": b, "lo": float(h["edges"][b]),
                         "hi": float(h["edges"][b + 1]), "count": int(count)})
    dims = analysis.group_dimensionality(Z, sub.labels, sub.kinds, seed=cfg.seed)
    tag = run.tag(args.checkpoint)
    run.write_csv(f"histograms_{tag}.csv", rows, ["condition", "bin", "lo", "hi", "count"])
    summary = {"tap": ev.tap, "conditions": conds,
               "participation_ratio": {k: dims[k] for k in ("within_digit_transform", "within_digit", "all")}}
    run.write_json(f"geometry_{tag}.json", summary)
    return summary


def robust_items(data: datagen.SequenceDataset, n, seed):
    """Fixed single-frame evaluation set drawn from a sequence dataset."""
    pairs = np.stack(np.meshgrid(np.arange(len(data)), np.arange(data.T), indexing="ij"), -1).reshape(-1, 2)
    if len(pairs) > n:
        pairs = pairs[np.sort(stream(seed, "cli.robust_items").choice(len(pairs), n, replace=False))]
    return data.frames[pairs[:, 0], pairs[:, 1]].astype(np.float64), data.labels[pairs[:, 0]]


def cmd_robust(cfg, run: RunDir, args) -> dict:
    spec, params = _checkpoint(run, args.checkpoint)
    test = _dataset(run, args.dataset)
    train = _probe_dataset(run, cfg)
    ev = cfg.evaluation
    probe = _identity_probe(spec, params, train, test, cfg, ev.robust_tap)["probe"]
    X, y = robust_items(test, ev.robust_items, cfg.seed)
    tag = run.tag(args.checkpoint)
    if args.kind == "noise":
        curve = analysis.gaussian_noise_sweep(spec, params, probe, X, y, ev.noise_sigmas, cfg.seed, ev.robust_tap)
        run.write_csv(f"noise_{tag}.csv", curve, ["sigma", "accuracy"])
    else:
        curve = analysis.adversarial_sweep(spec, params, probe, X, y, ev.pgd_budgets, ev.robust_tap,
                                           ev.pgd_steps, cfg.seed)
        run.write_csv(f"pgd_{tag}.csv", curve, ["budget", "accuracy", "max_norm", "zero_grad"])
    summary = {"kind": args.kind, "tap": ev.robust_tap, "items": len(y), "curve": curve}
    run.write_json(f"{args.kind}_{tag}.json", summary)
    return summary


def cmd_decode_strip(cfg, run: RunDir, args) -> dict:
    spec, params = _checkpoint(run, args.checkpoint)
    test = _dataset(run, args.dataset)
    ev = cfg.evaluation
    if args.decoder:
        dec_spec, dec_params = netcore.load_checkpoint(run.input(args.decoder))
        losses = []
    else:
        train = _probe_dataset(run, cfg)
        dcfg = probes.DecoderConfig(epochs=ev.decoder_epochs, lr=ev.decoder_lr, tap=ev.tap, seed=cfg.seed)
        dec_spec, dec_params, losses = probes.train_pixel_decoder(spec, params, train, dcfg)
        path = run.file("decoder.strw")
        netcore.save_checkpoint(dec_spec, dec_params, path)
        run.wrote(path)
    if not 0 <= args.index < len(test):
        raise IndexOutOfRange(f"sample index {args.index} outside [0, {len(test)})")
    sample = test[args.index]
    strip = probes.render_prediction_strip(spec, params, dec_spec, dec_params, sample, ev.tap)
    ext = "pgm" if strip.shape[0] == 1 else "ppm"
    out = run.file(f"strip_{args.index:05d}.{ext}")
    probes.write_pnm(out, strip)
    run.wrote(out)
    summary = {"index": args.index, "image": str(out), "decoder_losses": losses,
               "reconstruction_mse": probes.reconstruction_mse(spec, params, dec_spec, dec_params,
                                                               sample.frames, ev.tap)}
    run.write_json(f"decode_strip_{args.index:05d}.json", summary)
    return summary


def _latest(run_path: Path, prefix: str):
    found = sorted(run_path.glob(f"{prefix}_*.json"))
    return json.loads(found[-1].read_text()) if found else None


def compare_runs(a: Path, b: Path) -> dict:
    """Paired deltas (a - b) and ordering checks for straightening (a) vs invariance (b)."""
    def flat(run_path):
        out = {}
        s = _latest(run_path, "straightness")
        if s:
            out["straightness.final"] = s["final"]
            out["straightness.pixel"] = s["pixel"]
        p = _latest(run_path, "probe")
        if p:
            for attr, r in p["decoding"].items():
                out[f"decoding.{attr}"] = r.get("r2", r.get("accuracy"))
        g = _latest(run_path, "geometry")
        if g:
            for cond, r in g["conditions"].items():
                out[f"geometry.{cond}.mean_abs"] = r["mean_abs"]
                out[f"geometry.{cond}.std"] = r["std"]
            for k, v in g["participation_ratio"].items():
                out[f"pr.{k}"] = v
        for kind, key in (("noise", "sigma"), ("pgd", "budget")):
            r = _latest(run_path, kind)
            if r:
                for pt in r["curve"]:
                    out[f"{kind}.{pt[key]:g}"] = pt["accuracy"]
        return out

    fa, fb = flat(a), flat(b)
    if not fa or not fb:
        raise FileMissing("compare needs report files in both run directories")
    shared = sorted(set(fa) & set(fb))
    deltas = {k: fa[k] - fb[k] for k in shared}
    orderings = {}
    if "straightness.final" in deltas:
        orderings["straighter"] = deltas["straightness.final"] > 0
    for attr in ("x", "y", "scale"):
        if f"decoding.{attr}" in deltas:
            orderings[f"decodes_{attr}_better"] = deltas[f"decoding.{attr}"] > 0
    if "pr.within_digit_transform" in deltas:
        orderings["more_compact_within_class"] = deltas["pr.within_digit_transform"] < 0
        orderings["higher_dimensional_overall"] = deltas["pr.all"] > 0
    for kind in ("noise", "pgd"):
        pts = [k for k in shared if k.startswith(kind + ".")]
        if pts:
            orderings[f"{kind}_majority"] = np.mean([deltas[k] >= 0 for k in pts]) >= 0.7
    return {"a": str(a), "b": str(b), "deltas": deltas, "orderings": {k: bool(v) for k, v in orderings.items()}}


def cmd_compare(cfg, run: RunDir, args) -> dict:
    a, b = Path(args.run_a), Path(args.run_b)
    for p in (a, b):
        if not p.is_dir():
            raise FileMissing(f"run directory not found: {p}")
    report = compare_runs(a, b)
    run.write_json("compare.json", report)
    return report


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "straightness": cmd_straightness,
    "probe": cmd_probe,
    "geometry": cmd_geometry,
    "robust": cmd_robust,
    "decode-strip": cmd_decode_strip,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the command name
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI experiment config")
    common.add_argument("--out", default=argparse.SUPPRESS, help="run directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = _Parser(prog="straighten", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name not in ("gen", "compare"):
            p.add_argument("--dataset", help="sequence dataset (.strq)")
        if name not in ("gen", "train", "compare"):
            p.add_argument("--checkpoint", help="model checkpoint (.strw)")
        if name == "gen":
            p.add_argument("--split", choices=("train", "test", "all"))
            p.add_argument("--sequences", type=int, help="override the sequence count")
        if name == "robust":
            p.add_argument("--kind", choices=("noise", "pgd"), required=True)
        if name == "decode-strip":
            p.add_argument("--decoder", help="trained decoder checkpoint; trained afresh if omitted")
            p.add_argument("--index", type=int, default=0)
        if name == "compare":
            p.add_argument("run_a")
            p.add_argument("run_b")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for key, default in (("config", None), ("out", None), ("seed", None), ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    if args.out is None:
        raise UsageError("--out is required")
    return args


def _error(exc, code) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _error(exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "compare" and not args.config:
            cfg = None
        elif not args.config:
            raise ConfigInvalid("--config is required")
        else:
            cfg = load_config(args.config, args.seed)
        run = RunDir(args.out, cfg, args.command)
        if cfg is not None:
            run.input(args.config)
        result = HANDLERS[args.command](cfg, run, args)
        run.close()
    except ValidationError as exc:
        return _error(exc, exc.exit_code)
    except StraightenError as exc:
        return _error(exc, exc.exit_code)
    except (OSError, ValueError) as exc:
        return _error(exc, 3)
    print(json.dumps(_scalars(result) if isinstance(result, dict) else {}, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
