"""Desk-scale experiment suite, driven end to end through the CLI.

    python3 scripts/run_experiments.py --out runs
    python3 scripts/run_experiments.py --out runs --only straightening invariance

Every stage whose output already exists is skipped, so an interrupted
suite resumes where it stopped. Run and data directories carry the
config digest in their names; editing a config starts a fresh run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from straighten import cli
from straighten.config import ExperimentConfig, load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
EXPERIMENTS = ("straightening", "invariance", "shuffled", "composed", "multilayer")
DATA_CONFIG = "straightening"  # all experiments share its dataset
TEST_SEQUENCES = 1000

# evaluation stage -> (command argv, report prefix)
STAGES = {
    "straightness": (["straightness"], "straightness"),
    "probe": (["probe"], "probe"),
    "geometry": (["geometry"], "geometry"),
    "noise": (["robust", "--kind", "noise"], "noise"),
    "pgd": (["robust", "--kind", "pgd"], "pgd"),
}
EVALS = {
    "straightening": tuple(STAGES),
    "invariance": tuple(STAGES),
    "shuffled": ("straightness", "probe"),
    "composed": ("straightness", "probe", "pgd"),
    "multilayer": ("straightness", "noise", "pgd"),
}

log = logging.getLogger("experiments")


def call(*argv) -> None:
    argv = [str(a) for a in argv]
    log.info("straighten %s", " ".join(argv))
    code = cli.main(argv)
    if code:
        raise RuntimeError(f"straighten {argv[0]} exited with {code}")


def _rebase(path: str) -> str:
    p = Path(path)
    return str(p if p.is_absolute() else ROOT / p)


def resolve(name, data_dir=None, configs=CONFIGS, seed=None) -> ExperimentConfig:
    """Load ``configs/<name>.ini`` with source and dataset paths made absolute."""
    cfg = load_config(Path(configs) / f"{name}.ini", seed)
    sources = dataclasses.replace(cfg.sources, images=_rebase(cfg.sources.images), labels=_rebase(cfg.sources.labels))
    cfg = dataclasses.replace(cfg, sources=sources)
    if data_dir is not None:
        train = str(Path(data_dir) / "train.strq")
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, dataset=train),
                                  evaluation=dataclasses.replace(cfg.evaluation, probe_dataset=train))
    return cfg


def _write_config(cfg: ExperimentConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_ini())
    return path


def latest_report(run: Path, prefix: str):
    found = sorted(run.glob(f"{prefix}_*.json"))
    return json.loads(found[-1].read_text()) if found else None


def generate(out: Path, configs=CONFIGS, seed=None, test_sequences=TEST_SEQUENCES) -> Path:
    cfg = resolve(DATA_CONFIG, configs=configs, seed=seed)
    key = ExperimentConfig(seed=cfg.seed, sources=cfg.sources, datagen=cfg.datagen).digest()[:8]
    data = Path(out) / f"data-{key}"
    path = _write_config(cfg, data / "gen.ini")
    if not (data / "train.strq").exists():
        call("gen", "--config", path, "--out", data, "--split", "train")
    if not (data / "test.strq").exists():
        call("gen", "--config", path, "--out", data, "--split", "test", "--sequences", test_sequences)
    return data


def experiment(name, out: Path, data: Path, stages=None, configs=CONFIGS, seed=None) -> dict:
    """Train (if needed) and evaluate one config; returns its reports by stage."""
    cfg = resolve(name, data, configs, seed)
    run = Path(out) / f"{name}-{cfg.digest()[:8]}"
    path = _write_config(cfg, Path(out) / "configs" / f"{name}.ini")
    ckpt = run / "final.strw"
    if not ckpt.exists():
        call("train", "--config", path, "--out", run, "-v")
    reports = {"run": str(run)}
    for stage in EVALS.get(name, tuple(STAGES)) if stages is None else stages:
        argv, prefix = STAGES[stage]
        if latest_report(run, prefix) is None:
            call(*argv, "--config", path, "--out", run, "--checkpoint", ckpt, "--dataset", data / "test.strq")
        reports[stage] = latest_report(run, prefix)
    return reports


def suite(out, names=EXPERIMENTS, configs=CONFIGS, seed=None) -> dict:
    out = Path(out).resolve()  # dataset paths end up in config digests
    data = generate(out, configs, seed)
    results = {name: experiment(name, out, data, configs=configs, seed=seed) for name in names}
    for a, b in (("straightening", "invariance"), ("multilayer", "invariance"), ("composed", "invariance")):
        if a in results and b in results:
            call("compare", results[a]["run"], results[b]["run"], "--out", out / f"compare-{a}-{b}")
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--only", nargs="+", choices=EXPERIMENTS, default=EXPERIMENTS)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    results = suite(args.out, args.only, seed=args.seed)
    for name, rep in results.items():
        s = rep.get("straightness")
        if s:
            print(f"{name:14s} straightness {s['final']:+.3f} (pixel {s['pixel']:+.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
