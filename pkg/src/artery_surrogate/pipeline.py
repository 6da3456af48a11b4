"""Pipeline stages behind the command line.

Output layout under the run directory::

    resolved_config.json
    geometry/<id>.json            one geometry per base sample
    solutions/<id>.{json,*.f32}   finite element fields
    solutions/failures.json       solves that did not converge
    dataset/                      manifest.json, samples/, previews/
    models/<name>/                checkpoints and metrics.jsonl
    eval/<name>/                  report.json, rows.csv, previews/
    predictions/                  predicted field maps
    report/                       summary.json, summary.md

Every stage is rerunnable: work whose inputs hash to the recorded value is
skipped.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import LoadCase, default_materials, load_solution, save_solution, solve_static
from .fem.material import ElementInversionError
from .fem.solver import SolverConvergenceError
from .geometry import GeometryRanges, GeometrySpec, sample_geometry
from .mesher import build_grid_mesh
from .metrics import SsimParams, evaluate
from .raster import (DatasetError, augment_flips, config_hash, load_dataset, make_sample,
                     render_label_map, save_dataset, split_dataset)

logger = logging.getLogger(__name__)

OUT_ENV = "ARTERY_SURROGATE_OUT"
EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2
TARGETS = ("stress", "strain")

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": None,
    "count": 1000,
    "geometry": {},
    "mesh_n": 256,
    "bulk_to_shear": 100.0,
    "load_case": {},
    "image_size": 256,
    "caps": [300.0, 0.45],
    "split_ratio": 0.85,
    "previews": True,
    "unet": {},
    "cgan": {},
    "validation_fraction": 0.1,
    "ssim": {},
    "worst_previews": 5,
}


class PipelineError(RuntimeError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, **overrides) -> "PipelineConfig":
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            data = _merge(data, json.loads(Path(path).read_text()))
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
        cfg = cls(data)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    @property
    def out(self) -> Path:
        root = self.data.get("out") or os.environ.get(OUT_ENV) or "artery_runs"
        return Path(root)

    @property
    def ranges(self) -> GeometryRanges:
        return GeometryRanges.from_dict(self.data["geometry"])

    @property
    def load_case(self) -> LoadCase:
        return LoadCase(**self.data["load_case"])

    @property
    def caps(self) -> tuple:
        return tuple(float(c) for c in self.data["caps"])

    @property
    def ssim_params(self) -> SsimParams:
        return SsimParams(**self.data["ssim"])

    def validate(self) -> None:
        unknown = set(self.data) - set(DEFAULTS)
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        self.ranges.validate()
        self.load_case
        if int(self.data["count"]) < 1:
            raise PipelineError("count must be >= 1")
        if int(self.data["workers"]) < 1:
            raise PipelineError("workers must be >= 1")
        if int(self.data["mesh_n"]) < 16:
            raise PipelineError("mesh_n must be >= 16")
        if not 0.0 < float(self.data["split_ratio"]) < 1.0:
            raise PipelineError("split_ratio must lie in (0, 1)")
        if len(self.data["caps"]) != 2 or min(self.caps) <= 0:
            raise PipelineError("caps must be two positive numbers")
        self.ssim_params

    def write_resolved(self, directory=None) -> Path:
        directory = Path(directory or self.out)
        directory.mkdir(parents=True, exist_ok=True)
        data = dict(self.data, out=str(self.out))
        path = directory / "resolved_config.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True))
        return path


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_if_changed(path: Path, text: str) -> bool:
    if path.exists() and path.read_text() == text:
        return False
    path.write_text(text)
    return True


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def sample_id(index: int) -> str:
    return f"g{index:05d}"


def geometry_seed(global_seed: int, index: int) -> int:
    return int(global_seed) * 1_000_003 + index


# -- generate -----------------------------------------------------------------

def run_generate(cfg: PipelineConfig) -> dict:
    """Write ``count`` random geometry specs; returns ids -> paths."""
    gdir = cfg.out / "geometry"
    gdir.mkdir(parents=True, exist_ok=True)
    ranges = cfg.ranges
    written = {}
    changed = 0
    for k in range(int(cfg["count"])):
        spec = sample_geometry(geometry_seed(cfg["seed"], k), ranges)
        path = gdir / f"{sample_id(k)}.json"
        changed += _write_if_changed(path, spec.to_json())
        written[sample_id(k)] = path
    logger.info("generate: %d specs (%d new or changed)", len(written), changed)
    return written


def list_geometries(cfg: PipelineConfig) -> dict:
    gdir = cfg.out / "geometry"
    if not gdir.is_dir():
        raise PipelineError(f"no geometry directory at {gdir}; run 'generate' first")
    return {p.stem: p for p in sorted(gdir.glob("g*.json"))}


# -- solve --------------------------------------------------------------------

def _solve_job(job):
    sid, spec_text, n, bulk_to_shear, lc_dict, out_stem, input_hash = job
    spec = GeometrySpec.from_json(spec_text)
    t0 = time.perf_counter()
    try:
        mesh = build_grid_mesh(spec, n)
        sol = solve_static(mesh, default_materials(bulk_to_shear), LoadCase(**lc_dict))
    except (SolverConvergenceError, ElementInversionError) as exc:
        history = getattr(exc, "history", None) or []
        return {"id": sid, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "load_steps_completed": len(history)}
    save_solution(sol, out_stem, {"input_hash": input_hash, "sample_id": sid, "mesh_n": n,
                                  "seconds": time.perf_counter() - t0})
    return {"id": sid, "ok": True, "seconds": time.perf_counter() - t0}


def solve_input_hash(spec_text: str, cfg: PipelineConfig) -> str:
    key = json.dumps({"spec": json.loads(spec_text), "n": cfg["mesh_n"],
                      "bulk_to_shear": cfg["bulk_to_shear"],
                      "load_case": cfg["load_case"]}, sort_keys=True)
    return _sha(key.encode())[:16]


def run_solve(cfg: PipelineConfig) -> dict:
    """Solve every generated geometry; returns a summary with the failures."""
    specs = list_geometries(cfg)
    sdir = cfg.out / "solutions"
    sdir.mkdir(parents=True, exist_ok=True)
    lc = cfg.load_case
    jobs, skipped = [], 0
    for sid, path in specs.items():
        text = path.read_text()
        h = solve_input_hash(text, cfg)
        meta_path = sdir / f"{sid}.json"
        if meta_path.exists():
            try:
                if json.loads(meta_path.read_text()).get("input_hash") == h:
                    skipped += 1
                    continue
            except json.JSONDecodeError:
                pass
        jobs.append((sid, text, int(cfg["mesh_n"]), float(cfg["bulk_to_shear"]),
                     lc.__dict__.copy(), str(sdir / sid), h))
    logger.info("solve: %d to run, %d already solved", len(jobs), skipped)
    results = _map(_solve_job, jobs, int(cfg["workers"]))
    failures_path = sdir / "failures.json"
    previous = []
    if failures_path.exists():
        previous = [f for f in json.loads(failures_path.read_text())
                    if f["id"] in specs and f["id"] not in {j[0] for j in jobs}]
    failures = previous + [r for r in results if not r["ok"]]
    failures_path.write_text(json.dumps(failures, indent=1))
    for f in failures:
        logger.warning("solve failed for %s: %s", f["id"], f["error"])
    return {"solved": sum(r["ok"] for r in results), "skipped": skipped, "failures": failures}


# -- dataset ------------------------------------------------------------------

def _render_job(job):
    sid, spec_text, n, sol_stem, size, caps = job
    spec = GeometrySpec.from_json(spec_text)
    mesh = build_grid_mesh(spec, n)
    sol, _ = load_solution(sol_stem)
    return augment_flips(make_sample(spec, mesh, sol, size, caps, sample_id=sid))


def run_dataset(cfg: PipelineConfig) -> dict:
    """Rasterize solved samples, augment by flips, split by base geometry."""
    specs = list_geometries(cfg)
    sdir = cfg.out / "solutions"
    failed = set()
    if (sdir / "failures.json").exists():
        failed = {f["id"] for f in json.loads((sdir / "failures.json").read_text())}
    solved = {}
    for sid, path in specs.items():
        meta_path = sdir / f"{sid}.json"
        if sid in failed or not meta_path.exists():
            continue
        if json.loads(meta_path.read_text()).get("input_hash") != solve_input_hash(path.read_text(), cfg):
            raise PipelineError(f"solution for {sid} is stale; rerun 'solve'")
        solved[sid] = path
    if len(solved) < 2:
        raise PipelineError("need at least two solved geometries to build a dataset")
    excluded = sorted(set(specs) - set(solved))
    key = {"solutions": {sid: _sha((sdir / f"{sid}.stress.f32").read_bytes())[:16]
                         for sid in solved},
           "image_size": cfg["image_size"], "caps": list(cfg.caps),
           "split_ratio": cfg["split_ratio"], "seed": cfg["seed"], "mesh_n": cfg["mesh_n"]}
    h = config_hash(key)
    ddir = cfg.out / "dataset"
    manifest_path = ddir / "manifest.json"
    if manifest_path.exists() and json.loads(manifest_path.read_text()).get("config_hash") == h:
        logger.info("dataset: up to date (hash %s)", h)
        return {"config_hash": h, "skipped": True, "excluded": excluded,
                "samples": len(json.loads(manifest_path.read_text())["entries"])}
    jobs = [(sid, path.read_text(), int(cfg["mesh_n"]), str(sdir / sid), int(cfg["image_size"]),
             cfg.caps) for sid, path in solved.items()]
    samples = [s for group in _map(_render_job, jobs, int(cfg["workers"])) for s in group]
    split = split_dataset(list(solved), float(cfg["split_ratio"]), int(cfg["seed"]))
    manifest = save_dataset(samples, split, ddir, h, previews=bool(cfg["previews"]))
    counts = {s: len(manifest.ids(s)) for s in ("train", "test")}
    logger.info("dataset: %d samples (%s), %d geometries excluded", len(samples), counts,
                len(excluded))
    return {"config_hash": h, "skipped": False, "excluded": excluded, "samples": len(samples),
            **counts}


def load_split(cfg: PipelineConfig, split: str):
    ddir = cfg.out / "dataset"
    if not (ddir / "manifest.json").exists():
        raise PipelineError(f"no dataset at {ddir}; run 'dataset' first")
    return load_dataset(ddir, split=split)


# -- train --------------------------------------------------------------------

def make_estimator(cfg: PipelineConfig, kind: str, **extra):
    from .surrogate import CGANRegressor, UNetRegressor

    cls = {"unet": UNetRegressor, "cgan": CGANRegressor}[kind]
    params = dict(cfg[kind])
    params.setdefault("seed", int(cfg["seed"]))
    params.setdefault("validation_fraction", float(cfg["validation_fraction"]))
    params.setdefault("target_scaling", "p99")
    params.update(extra)
    if "disc_filters" in params:
        params["disc_filters"] = tuple(params["disc_filters"])
    return cls(**params)


def model_name(target, kind, ensemble=None, transfer=False):
    name = f"{target}_{kind}"
    if ensemble:
        name += f"_{ensemble}"
    if transfer:
        name += "_transfer"
    return name


def run_train(cfg: PipelineConfig, target: str, kind: str, ensemble: str | None = None,
              transfer_from=None, name: str | None = None) -> Path:
    """Fit a model on the training split; returns the checkpoint or ensemble spec path."""
    import torch

    from .ensemble import EnsembleRegressor
    from .surrogate import load_checkpoint

    if target not in TARGETS:
        raise PipelineError(f"target must be one of {TARGETS}")
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.info("train: torch deterministic algorithms enabled (warn-only); "
                "%d intra-op threads", torch.get_num_threads())
    train = load_split(cfg, "train")
    mdir = cfg.out / "models" / (name or model_name(target, kind, ensemble, transfer_from is not None))
    mdir.mkdir(parents=True, exist_ok=True)
    log_path = mdir / "metrics.jsonl"
    for old in mdir.glob("metrics*.jsonl"):
        old.unlink()
    extra = {"log_path": str(log_path)}
    if transfer_from is not None:
        extra["init_checkpoint"] = load_checkpoint(transfer_from)
    est = make_estimator(cfg, kind, **extra)
    if ensemble and transfer_from is not None:
        raise PipelineError("--transfer-from is not supported together with --ensemble")
    t0 = time.perf_counter()
    if ensemble:
        model = EnsembleRegressor(est, ensemble, seed=int(cfg["seed"])).fit(train.X, train.target(target))
        out = model.save(mdir)
        histories = [m.history_ for m in model.estimators_]
    else:
        model = est.fit(train.X, train.target(target))
        out = model.save(mdir / "model.ckpt")
        histories = [model.history_]
    summary = {"target": target, "kind": kind, "ensemble": ensemble,
               "transfer_from": str(transfer_from) if transfer_from else None,
               "train_samples": len(train), "seconds": time.perf_counter() - t0,
               "histories": histories, "artifact": out.name}
    (mdir / "train_summary.json").write_text(json.dumps(summary, indent=1))
    logger.info("train: wrote %s in %.1f s", out, summary["seconds"])
    return out


# -- evaluate -----------------------------------------------------------------

def load_model(path):
    from .ensemble import load_ensemble
    from .surrogate import load_estimator

    path = Path(path)
    if path.is_dir():
        path = path / "ensemble.json" if (path / "ensemble.json").exists() else path / "model.ckpt"
    if path.suffix == ".json":
        return load_ensemble(path)
    return load_estimator(path)


def _model_label(path) -> str:
    path = Path(path)
    if path.name in ("model.ckpt", "ensemble.json") or path.is_dir():
        return path.parent.name if path.is_file() else path.name
    return path.stem


def _to_rgb(gray):
    g = np.clip(np.asarray(gray) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def write_triptych(path, label_map, truth, pred) -> None:
    """input | truth | prediction | absolute error, side by side."""
    from PIL import Image

    panels = [np.clip(label_map * 255.0 + 0.5, 0, 255).astype(np.uint8),
              _to_rgb(truth), _to_rgb(pred), _to_rgb(np.abs(pred - truth))]
    h = panels[0].shape[0]
    gap = np.full((h, 2, 3), 255, np.uint8)
    row = np.concatenate([x for p in panels for x in (p, gap)][:-1], axis=1)
    Image.fromarray(row).save(path)


def run_evaluate(cfg: PipelineConfig, model_path, target: str, name: str | None = None,
                 split: str = "test"):
    """Score a checkpoint, an ensemble spec, or ``baseline`` on one split."""
    from .surrogate import MeanImageBaseline

    test = load_split(cfg, split)
    if str(model_path) == "baseline":
        train = load_split(cfg, "train")
        model = MeanImageBaseline().fit(train.X, train.target(target))
        name = name or f"{target}_baseline"
    else:
        model = load_model(model_path)
        name = name or _model_label(model_path)
    report, pred = evaluate(model, test.X, test.target(target), test.manifest.ids(),
                            model_id=name, params=cfg.ssim_params, return_predictions=True)
    report.extra.update({"target": target, "split": split, "model_path": str(model_path)})
    edir = cfg.out / "eval" / name
    report.write(edir)
    pdir = edir / "previews"
    pdir.mkdir(exist_ok=True)
    for old in pdir.glob("*.png"):
        old.unlink()
    worst = np.argsort([r["ssim"] for r in report.rows])[: int(cfg["worst_previews"])]
    y = test.target(target)
    for rank, k in enumerate(worst):
        write_triptych(pdir / f"worst{rank:02d}_{report.rows[k]['sample_id']}.png",
                       test.X[k], y[k], pred[k])
    logger.info("evaluate %s: mean SSIM %.4f, mean MSE %.3e over %d samples",
                name, report.mean_ssim, report.mean_mse, len(report.rows))
    return report


# -- predict ------------------------------------------------------------------

def read_label_input(path, size: int) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        return render_label_map(GeometrySpec.from_json(path.read_text()), size)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    if path.suffix == ".f32":
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        side = int(round(np.sqrt(raw.size / 3)))
        if 3 * side * side != raw.size:
            raise PipelineError(f"{path} is not a square 3-channel label map")
        return raw.reshape(side, side, 3).copy()
    raise PipelineError(f"unsupported label input {path}")


def run_predict(cfg: PipelineConfig, model_path, inputs, target: str = "field") -> list:
    from PIL import Image

    model = load_model(model_path)
    pdir = cfg.out / "predictions"
    pdir.mkdir(parents=True, exist_ok=True)
    out = []
    for inp in inputs:
        label = read_label_input(inp, int(cfg["image_size"]))
        t0 = time.perf_counter()
        pred = np.clip(model.predict(label[None])[0], 0.0, 1.0)
        dt = time.perf_counter() - t0
        stem = pdir / f"{Path(inp).stem}.{target}"
        Path(f"{stem}.f32").write_bytes(np.ascontiguousarray(pred, dtype="<f4").tobytes())
        Image.fromarray(_to_rgb(pred)).save(f"{stem}.png")
        logger.info("predict %s: %.3f s", inp, dt)
        out.append({"input": str(inp), "output": f"{stem}.f32", "seconds": dt})
    (pdir / "timings.json").write_text(json.dumps(out, indent=1))
    return out


# -- report -------------------------------------------------------------------

def epochs_to_threshold(history, threshold, key="val_loss"):
    for rec in history:
        value = rec.get(key, rec.get("train_loss"))
        if value is not None and value <= threshold:
            return rec["epoch"]
    return None


def transfer_comparison(donor_history, transfer_history, scratch_history, epoch=5, key="val_loss"):
    """Epochs needed by transfer and scratch runs to reach the donor's loss at ``epoch``."""
    donor = donor_history[min(epoch, len(donor_history)) - 1]
    threshold = donor.get(key, donor.get("train_loss"))
    return {"threshold": threshold, "donor_epoch": donor["epoch"],
            "transfer_epochs": epochs_to_threshold(transfer_history, threshold, key),
            "scratch_epochs": epochs_to_threshold(scratch_history, threshold, key)}


def run_report(cfg: PipelineConfig) -> dict:
    from .metrics import EvalReport

    rows = []
    for rdir in sorted((cfg.out / "eval").glob("*/")):
        if (rdir / "report.json").exists():
            rep = EvalReport.read(rdir)
            rows.append({"model": rep.model_id, "target": rep.extra.get("target"),
                         "samples": len(rep.rows), **{f"{k}_{s}": v for k, agg in rep.aggregates.items()
                                                      for s, v in agg.items()}})
    transfers = []
    models = cfg.out / "models"
    for sdir in sorted(models.glob("*_transfer")):
        summ = json.loads((sdir / "train_summary.json").read_text())
        donor_dir = Path(summ["transfer_from"]).parent
        scratch_dir = models / sdir.name[: -len("_transfer")]
        if (donor_dir / "train_summary.json").exists() and (scratch_dir / "train_summary.json").exists():
            donor = json.loads((donor_dir / "train_summary.json").read_text())["histories"][0]
            scratch = json.loads((scratch_dir / "train_summary.json").read_text())["histories"][0]
            transfers.append({"model": sdir.name,
                              **transfer_comparison(donor, summ["histories"][0], scratch)})
    summary = {"evaluations": rows, "transfer": transfers}
    rdir = cfg.out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "summary.json").write_text(json.dumps(summary, indent=1))
    lines = ["| model | target | samples | mean SSIM | mean MSE |", "|---|---|---|---|---|"]
    lines += [f"| {r['model']} | {r['target']} | {r['samples']} | {r.get('ssim_mean', float('nan')):.4f} "
              f"| {r.get('mse_mean', float('nan')):.3e} |" for r in rows]
    if transfers:
        lines += ["", "| transfer run | threshold | transfer epochs | scratch epochs |",
                  "|---|---|---|---|"]
        lines += [f"| {t['model']} | {t['threshold']:.3e} | {t['transfer_epochs']} | "
                  f"{t['scratch_epochs']} |" for t in transfers]
    (rdir / "summary.md").write_text("\n".join(lines) + "\n")
    return summary


__all__ = ["PipelineConfig", "PipelineError", "DatasetError", "OUT_ENV", "EXIT_OK", "EXIT_ERROR",
           "EXIT_PARTIAL", "run_generate", "run_solve", "run_dataset", "run_train",
           "run_evaluate", "run_predict", "run_report", "load_model", "transfer_comparison",
           "epochs_to_threshold", "write_triptych", "make_estimator"]
