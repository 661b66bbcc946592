"""Command line front end: generate | run | plot | export-pool | download-data.

Experiment config (JSON)::

    {
      "dataset":  {"name": "synthetic", "num_classes": 10, "dim": 64,
                   "per_class": 200, "noise": 0.05, "seed": 0}
                  or {"name": "cifar100", "root": "/data"},
      "scenario": {ScenarioConfig fields},
      "train":    {TrainConfig fields},
      "output_dir": "runs/example"
    }

``--set section.key=value`` overrides any field (value parsed as JSON when
possible).  The dataset root falls back to ``$SIBLURRY_DATA_ROOT``.  The
effective config is written next to every result.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import DOWNLOADS, DatasetIndex, load_dataset, make_synthetic
from .engine import RunRecord, TrainConfig, run_online
from .metrics import format_mean_std, mean_std
from .scenario import ScenarioConfig, StreamManifest, build_stream, format_stats

logger = logging.getLogger("siblurry")

DATA_ROOT_ENV = "SIBLURRY_DATA_ROOT"


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: dict = field(default_factory=lambda: {"name": "synthetic"})
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"scenario", "train", "dataset", "output_dir"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            scenario=ScenarioConfig(**d.get("scenario", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            dataset=dict(d.get("dataset", {"name": "synthetic"})),
            output_dir=str(d.get("output_dir", "runs")),
        )

    def to_dict(self) -> dict:
        return {"scenario": asdict(self.scenario), "train": asdict(self.train),
                "dataset": self.dataset, "output_dir": self.output_dir}

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = parsed
    return raw


def load_config(path: str | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text()) if path else {}
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


_SYNTHETIC_DEFAULTS = {"num_classes": 10, "dim": 64, "per_class": 200, "noise": 0.05, "seed": 0}


def resolve_dataset(spec: dict) -> DatasetIndex:
    name = spec.get("name", "synthetic")
    if name == "synthetic":
        kw = {**_SYNTHETIC_DEFAULTS, **{k: v for k, v in spec.items() if k != "name"}}
        return make_synthetic(**kw)
    if name == "index":
        return DatasetIndex.load(spec["path"])
    root = spec.get("root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ValueError(f"dataset {name!r} needs a root (config or ${DATA_ROOT_ENV})")
    return load_dataset(name, root, image_size=spec.get("image_size"))


def _ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory not writable: {path} ({err})") from err
    return path


def cmd_generate(config: ExperimentConfig, dataset: DatasetIndex | None = None) -> dict:
    """Write ``manifest.jsonl``, ``stats.csv`` and ``stats.txt``."""
    out = _ensure_dir(config.output_dir)
    dataset = dataset or resolve_dataset(config.dataset)
    manifest = build_stream(dataset, config.scenario)
    manifest.save(out / "manifest.jsonl")
    rows = manifest.task_stats()
    _write_csv(out / "stats.csv", rows)
    table = format_stats(rows)
    (out / "stats.txt").write_text(table + "\n")
    config.write(out / "effective_config.json")
    return {"manifest": str(out / "manifest.jsonl"), "entries": len(manifest), "stats": rows, "table": table}


def _run_seed(args) -> tuple[int, dict | None, str | None]:
    config_d, seed, manifest_path, out = args
    config = ExperimentConfig.from_dict(config_d)
    try:
        dataset = resolve_dataset(config.dataset)
        if manifest_path:
            manifest = StreamManifest.load(manifest_path)
        else:
            manifest = build_stream(dataset, replace(config.scenario, seed=seed))
        record = run_online(manifest, dataset, config.train, seed, output_dir=out)
        record.save(Path(out) / f"record_seed{seed}.jsonl")
        return seed, record.summary(), None
    except Exception as err:  # noqa: BLE001 - recorded per seed, summary marks failure
        logger.error("seed %d failed: %s", seed, err)
        return seed, None, f"{type(err).__name__}: {err}"


def cmd_run(config: ExperimentConfig, manifest_path: str | None = None, workers: int = 1) -> dict:
    """Run every seed and write per-seed records plus ``summary.json``.

    Without a manifest each seed builds its own stream with that seed.
    """
    out = _ensure_dir(config.output_dir)
    config.write(out / "effective_config.json")
    jobs = [(config.to_dict(), s, manifest_path, str(out)) for s in config.train.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]

    done = {s: summ for s, summ, err in results if summ is not None}
    failed = {s: err for s, summ, err in results if err is not None}
    summary: dict = {"method": config.train.method, "seeds": list(config.train.seeds),
                     "status": "failed" if failed else "completed", "failed_seeds": failed}
    if done:
        for metric in ("a_auc", "a_last", "forgetting"):
            vals = [done[s][metric] for s in sorted(done)]
            m, sd = mean_std(vals)
            summary[metric] = {"mean": m, "std": sd, "values": vals, "table": format_mean_std(vals)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)
    return path


def seed_mean_curve(records: Sequence[RunRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Resample every curve on the union grid; returns (grid, per-seed, mean, resampled)."""
    grids = [tuple(x for x, _ in r.eval_points) for r in records]
    resampled = len(set(grids)) > 1
    grid = np.array(sorted(set().union(*map(set, grids))), dtype=np.float64)
    curves = np.stack([
        np.interp(grid, [x for x, _ in r.eval_points], [y for _, y in r.eval_points]) for r in records
    ])
    return grid, curves, curves.mean(axis=0), resampled


def cmd_plot(record_paths: Sequence[str | Path], output_dir: str | Path) -> dict:
    """Accuracy curves (per seed + mean band) and loss traces, each with a CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not record_paths:
        raise ValueError("plot needs at least one record")
    out = _ensure_dir(output_dir)
    records = [RunRecord.load(p) for p in record_paths]
    written = []
    for r in records:
        path = out / f"accuracy_seed{r.seed}.csv"
        _write_csv(path, [{"samples_seen": x, "accuracy": y} for x, y in r.eval_points])
        written.append(path)

    grid, curves, mean, resampled = seed_mean_curve(records)
    std = curves.std(axis=0, ddof=1) if len(records) > 1 else np.zeros_like(mean)
    rows = [{"samples_seen": int(x), **{f"seed{r.seed}": float(curves[i, j]) for i, r in enumerate(records)},
             "mean": float(mean[j]), "std": float(std[j])} for j, x in enumerate(grid)]
    _write_csv(out / "accuracy_curve.csv", rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, r in enumerate(records):
        ax.plot(grid, curves[i], lw=0.8, alpha=0.6, label=f"seed {r.seed}")
    ax.plot(grid, mean, color="k", lw=1.6, label="mean")
    ax.fill_between(grid, mean - std, mean + std, color="k", alpha=0.15)
    ax.set_xlabel("samples seen")
    ax.set_ylabel("accuracy (exposed classes)")
    if resampled:
        ax.set_title("curves interpolated onto the union grid", fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "accuracy_curve.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    loss_rows = []
    for r in records:
        totals = [rec["total"] for rec in r.loss_trace]
        ax.plot(np.arange(len(totals)), totals, lw=0.8, label=f"seed {r.seed}")
        loss_rows += [{"seed": r.seed, "step": i, **rec} for i, rec in enumerate(r.loss_trace)]
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss_trace.png", dpi=120)
    plt.close(fig)
    _write_csv(out / "loss_trace.csv", loss_rows)
    return {"grid_points": len(grid), "resampled": resampled,
            "files": [str(p) for p in written] + [str(out / n) for n in
                      ("accuracy_curve.csv", "accuracy_curve.png", "loss_trace.csv", "loss_trace.png")]}


def cmd_export_pool(checkpoint: str | Path, output_dir: str | Path) -> dict:
    """Dump keys (P x D), masks (P x num_classes) and counts (P) as CSV."""
    from .backbone import ModelState

    model = ModelState.load(checkpoint)
    out = _ensure_dir(output_dir)
    pool = model.pool
    np.savetxt(out / "keys.csv", pool.keys.detach().cpu().numpy(), delimiter=",", fmt="%.9g")
    np.savetxt(out / "masks.csv", pool.masks.detach().cpu().numpy(), delimiter=",", fmt="%.9g")
    np.savetxt(out / "counts.csv", pool.counts.cpu().numpy()[:, None], delimiter=",", fmt="%d")
    return {"pool_size": pool.size, "total_selections": int(pool.counts.sum()),
            "files": [str(out / n) for n in ("keys.csv", "masks.csv", "counts.csv")]}


def cmd_download(name: str, root: str | Path, fetch=None) -> Path:
    """Fetch and unpack a dataset archive into ``root``."""
    import shutil
    import tarfile
    import urllib.request
    import zipfile

    if name not in DOWNLOADS:
        raise ValueError(f"no download source for {name!r}")
    root = _ensure_dir(root)
    url = DOWNLOADS[name]
    archive = root / url.rsplit("/", 1)[-1]
    if fetch is None:
        def fetch(u, dest):
            with urllib.request.urlopen(u) as resp, open(dest, "wb") as fh:
                shutil.copyfileobj(resp, fh)
    fetch(url, archive)
    if archive.suffix == ".zip":
        with zipfile.ZipFile(archive) as zf:
            zf.extractall(root)
    else:
        with tarfile.open(archive) as tf:
            tf.extractall(root)
    return root


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siblurry", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--output-dir")

    g = sub.add_parser("generate", help="build a Si-Blurry manifest and stats table")
    common(g)
    g.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="train and evaluate over seeds")
    common(r)
    r.add_argument("--method")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--manifest", help="reuse one manifest for every seed")
    r.add_argument("--workers", type=int, default=1)

    pl = sub.add_parser("plot", help="accuracy curves and loss traces from records")
    pl.add_argument("records", nargs="+")
    pl.add_argument("--output-dir", required=True)

    e = sub.add_parser("export-pool", help="write keys/masks/counts CSVs from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--output-dir", required=True)

    d = sub.add_parser("download-data", help="download and unpack a dataset")
    d.add_argument("dataset", choices=sorted(DOWNLOADS))
    d.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV))
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("generate", "run"):
            overrides = list(args.overrides)
            if args.output_dir:
                overrides.append(f"output_dir={args.output_dir}")
            if args.command == "generate" and args.seed is not None:
                overrides.append(f"scenario.seed={args.seed}")
            if args.command == "run":
                if args.method:
                    overrides.append(f"train.method={args.method}")
                if args.seeds:
                    overrides.append(f"train.seeds={json.dumps(args.seeds)}")
            config = load_config(args.config, overrides)
            if args.command == "generate":
                res = cmd_generate(config)
                print(res["table"])
                print(f"wrote {res['manifest']} ({res['entries']} entries)")
            else:
                res = cmd_run(config, manifest_path=args.manifest, workers=args.workers)
                print(json.dumps(res, indent=2, sort_keys=True, ensure_ascii=False))
                if res["status"] != "completed":
                    return 1
        elif args.command == "plot":
            print(json.dumps(cmd_plot(args.records, args.output_dir), indent=2))
        elif args.command == "export-pool":
            print(json.dumps(cmd_export_pool(args.checkpoint, args.output_dir), indent=2))
        elif args.command == "download-data":
            if not args.root:
                raise ValueError(f"--root or ${DATA_ROOT_ENV} required")
            print(cmd_download(args.dataset, args.root))
    except Exception as err:  # noqa: BLE001 - turned into a machine-readable error record
        record = {"error": type(err).__name__, "message": str(err), "command": args.command}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        print(json.dumps(record), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
