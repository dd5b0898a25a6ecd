"""Command-line entry point: ``cso-unmix {gen,solve,train,eval,report}``.

Settings are layered: dataclass defaults, then an optional ``--config`` file
(TOML or JSON, sections ``sensor``, ``dataset``, ``model``, ``solver`` plus one
section per command for flag defaults), then explicit flags.

Exit codes are 0 on success, 1 on validation errors and 2 on runtime or
numeric failures; errors go to stderr as single lines starting ``error:``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import TrainingError
from .dista import Checkpoint, FingerprintError, ModelConfig, TrainingAborted, infer, train
from .dista.model import prepare
from .imaging import SensorConfig, SubPixelGrid, build_steering_matrix
from .metrics import REPORT_FIELDS, EvalReport, evaluate
from .scenegen import DatasetConfig, GenerationError, generate_dataset, load_manifest, load_split
from .solvers import LAMBDA_GRID, SolverConfig, StepSizeError, estimate_step_size, ista_solve

log = logging.getLogger("cso_unmix")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "CSO_UNMIX_THREADS"
TRACE_FIELDS = ("epoch", "train_loss", "val_loss")
TABLE_COLUMNS = ("cso_map", "ap_05", "ap_10", "ap_15", "ap_20", "ap_25", "psnr_mean", "ssim_mean")


class UsageError(ValueError):
    """Bad flags, config or input files."""


class RuntimeFailure(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------

def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
    except ValueError as e:
        raise UsageError(f"{path}: cannot parse config: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a table of sections")
    return data


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section [{name}] must be a table")
    return sec


def _build(cls, base, overrides: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise UsageError(f"unknown {what} setting(s): {', '.join(sorted(unknown))}")
    try:
        return replace(base, **overrides) if overrides else base
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {what} setting: {e}") from None


@dataclass
class RunConfig:
    """Resolved settings for one command."""

    command: str
    paths: dict[str, Path] = field(default_factory=dict)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: dict = field(default_factory=dict)
    seed: int | None = None
    options: dict = field(default_factory=dict)

    def require_inputs(self, *names: str) -> None:
        for n in names:
            p = self.paths.get(n)
            if p is None or not p.exists():
                raise UsageError(f"{n} path {p} does not exist")

    def require_output(self, name: str) -> Path:
        p = self.paths[name]
        parent = p.parent if p.suffix else p
        try:
            parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UsageError(f"cannot create output directory {parent}: {e}") from None
        if not os.access(parent, os.W_OK):
            raise UsageError(f"output directory {parent} is not writable")
        return p


def _flag_defaults(args, section: dict, spec: dict) -> dict:
    """Merge: flag if given, else config-file command section, else default."""
    out = {}
    for key, default in spec.items():
        val = getattr(args, key, None)
        if val is None:
            val = section.get(key.replace("_", "-"), section.get(key, default))
        out[key] = val
    return out


def resolve(args) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else {}
    sensor = _build(SensorConfig, SensorConfig(), _section(cfg, "sensor"), "sensor")
    dataset = _build(DatasetConfig, DatasetConfig(), _section(cfg, "dataset"), "dataset")
    model = _build(ModelConfig, ModelConfig(), _section(cfg, "model"), "model")
    solver = dict(_section(cfg, "solver"))
    bad = set(solver) - {f.name for f in fields(SolverConfig)} - {"lambda_grid"}
    if bad:
        raise UsageError(f"unknown solver setting(s): {', '.join(sorted(bad))}")
    sec = _section(cfg, args.command)
    run = RunConfig(args.command, sensor=sensor, dataset=dataset, model=model, solver=solver)
    return COMMANDS[args.command][1](run, args, sec)


# -- gen -----------------------------------------------------------------------

def _resolve_gen(run: RunConfig, args, sec) -> RunConfig:
    o = _flag_defaults(args, sec, {"samples": None, "seed": None, "out": None, "min_separation": None,
                                   "fractions": None})
    if o["out"] is None:
        raise UsageError("gen needs --out")
    run.paths["out"] = Path(o["out"])
    over = {}
    if o["samples"] is not None:
        over["num_samples"] = int(o["samples"])
    if o["seed"] is not None:
        over["rng_seed"] = int(o["seed"])
        run.seed = int(o["seed"])
    if o["min_separation"] is not None:
        over["min_separation"] = float(o["min_separation"])
    if o["fractions"] is not None:
        fr = o["fractions"]
        if isinstance(fr, str):
            try:
                fr = [float(v) for v in fr.split(",")]
            except ValueError:
                raise UsageError(f"--fractions expects three comma-separated numbers, got {fr!r}") from None
        over["split_fractions"] = tuple(fr)
    run.dataset = _build(DatasetConfig, run.dataset, over, "dataset")
    return run


def cmd_gen(run: RunConfig) -> int:
    out = run.require_output("out")
    try:
        manifest = generate_dataset(run.dataset, run.sensor, out)
    except GenerationError as e:
        raise RuntimeFailure(str(e)) from None
    counts = manifest.counts
    print(f"wrote {sum(counts.values())} samples to {out}")
    print(f"train {counts['train']} val {counts['val']} test {counts['test']}")
    print(f"checksum {manifest.checksum}")
    return EXIT_OK


# -- shared helpers ------------------------------------------------------------

def render_triplets(z, preds, labels, out_dir, count: int, c: int, prefix: str = "") -> list[Path]:
    """Side-by-side PNGs of (measurement, prediction, ground truth).

    Each panel is scaled independently so its maximum maps to 255 (negative
    values clip to 0); the three scale factors go into the file name. The
    measurement is upsampled by ``c`` with nearest-neighbour repetition.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(min(count, len(preds))):
        panels, scales = [], []
        for arr in (np.kron(z[i], np.ones((c, c))), preds[i], labels[i]):
            top = float(np.max(arr))
            scale = 255.0 / top if top > 0 else 1.0
            panels.append(np.clip(np.asarray(arr) * scale, 0, 255))
            scales.append(scale)
        # arrays are indexed [x, y]: join along x, then transpose to [row, col]
        gap = np.zeros((2, panels[0].shape[1]))
        img = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=0)
        img = np.round(img.T).astype(np.uint8)
        name = f"{prefix}{i:04d}_scale_{scales[0]:.6g}_{scales[1]:.6g}_{scales[2]:.6g}.png"
        Image.fromarray(img, mode="L").resize((img.shape[1] * 4, img.shape[0] * 4), Image.NEAREST).save(out_dir / name)
        written.append(out_dir / name)
    return written


def _write_report(report: EvalReport, path: Path) -> None:
    report.write(path)
    print(f"cso_map {report.cso_map:.6f} psnr {report.psnr_mean:.4f} ssim {report.ssim_mean:.4f} -> {path}")


# -- solve ---------------------------------------------------------------------

def lambda_scale(z_flat, G) -> float:
    """``max |G^T z|`` over a set of measurements (n, UV)."""
    return float(np.max(np.abs(z_flat @ G)))


def ista_reconstruct(z, G, lam: float, rho: float, max_iters: int = 2000, stop_tol: float = 1e-6):
    """Batched ISTA over measurements ``z`` (n, U, V); returns (n, L)."""
    zf = z.reshape(len(z), -1).T
    try:
        s, _ = ista_solve(zf, G, SolverConfig(rho, lam, max_iters, stop_tol))
    except StepSizeError as e:
        raise RuntimeFailure(f"ISTA diverged at lambda={lam:g}: {e}") from None
    return s.T


def ista_baseline(data_dir, multipliers=LAMBDA_GRID, max_iters: int = 2000, stop_tol: float = 1e-6,
                  threshold: float = 50.0):
    """Tune the lambda multiplier on val by CSO-mAP, then run on test.

    Returns ``(report, test predictions (n, H, W), test split, info)``.
    """
    manifest = load_manifest(data_dir)
    c = manifest.dataset.grid_factor
    G = build_steering_matrix(SubPixelGrid(manifest.sensor, c))
    rho = estimate_step_size(G)
    val = load_split(data_dir, "val", manifest)
    test = load_split(data_dir, "test", manifest)
    shape = (manifest.sensor.width_px * c, manifest.sensor.height_px * c)
    scale = lambda_scale(val.z.reshape(len(val), -1), G)
    scores = {}
    if len(multipliers) > 1:
        for m in multipliers:
            pred = ista_reconstruct(val.z, G, m * scale, rho, max_iters, stop_tol).reshape(-1, *shape)
            scores[m] = evaluate(pred, val.labels, val.targets, threshold, c, manifest.sensor.pixel_width).cso_map
            log.info("lambda multiplier %g: val cso_map %.6f", m, scores[m])
        # first multiplier wins ties
        best = max(multipliers, key=lambda m: (scores[m], -multipliers.index(m)))
    else:
        best = multipliers[0]
    pred = ista_reconstruct(test.z, G, best * scale, rho, max_iters, stop_tol).reshape(-1, *shape)
    report = evaluate(pred, test.labels, test.targets, threshold, c, manifest.sensor.pixel_width)
    info = {"method": "ISTA", "lambda_multiplier": best, "lambda": best * scale, "lambda_scale": scale,
            "val_cso_map": {f"{m:g}": v for m, v in scores.items()}}
    report.extra.update(info)
    return report, pred, test, info


def _resolve_solve(run: RunConfig, args, sec) -> RunConfig:
    o = _flag_defaults(args, sec, {"data": None, "out": None, "lambda_": None, "no_grid": None, "threshold": 50.0,
                                   "render": 0, "render_dir": None, "max_iters": None, "stop_tol": None})
    if o["data"] is None or o["out"] is None:
        raise UsageError("solve needs --data and --out")
    run.paths.update(data=Path(o["data"]), out=Path(o["out"]))
    lam = o["lambda_"] if o["lambda_"] is not None else sec.get("lambda")
    no_grid = bool(o["no_grid"])
    if no_grid and lam is None:
        raise UsageError("--no-grid needs --lambda")
    if lam is not None and not float(lam) >= 0:
        raise UsageError("--lambda must be non-negative")
    grid = run.solver.get("lambda_grid", list(LAMBDA_GRID))
    run.options = {
        "multipliers": (float(lam),) if no_grid else tuple(float(v) for v in grid),
        "threshold": float(o["threshold"]),
        "render": int(o["render"]),
        "render_dir": o["render_dir"],
        "max_iters": int(o["max_iters"] if o["max_iters"] is not None else run.solver.get("max_iters", 2000)),
        "stop_tol": float(o["stop_tol"] if o["stop_tol"] is not None else run.solver.get("stop_tol", 1e-6)),
    }
    if lam is not None and not no_grid:
        log.warning("--lambda is ignored without --no-grid")
    return run


def cmd_solve(run: RunConfig) -> int:
    run.require_inputs("data")
    out = run.require_output("out")
    o = run.options
    report, pred, test, info = ista_baseline(run.paths["data"], o["multipliers"], o["max_iters"], o["stop_tol"],
                                             o["threshold"])
    _write_report(report, out)
    print(f"lambda multiplier {info['lambda_multiplier']:g} (lambda {info['lambda']:.6g})")
    if o["render"] > 0:
        c = load_manifest(run.paths["data"]).dataset.grid_factor
        render_triplets(test.z, pred, test.labels, o["render_dir"] or out.with_suffix("").as_posix() + "_renders",
                        o["render"], c)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for rec in trace:
            w.writerow([rec["epoch"], repr(float(rec["train_loss"])), repr(float(rec["val_loss"]))])


_MODEL_FLAGS = {"stages": "num_stages", "channels": "channels", "epochs": "epochs", "batch_size": "batch_size",
                "lr": "learning_rate", "gamma": "gamma", "alpha": "alpha", "seed": "seed"}


def _resolve_train(run: RunConfig, args, sec) -> RunConfig:
    o = _flag_defaults(args, sec, {"data": None, "out": None, "trace": None, **{k: None for k in _MODEL_FLAGS}})
    if o["data"] is None or o["out"] is None:
        raise UsageError("train needs --data and --out")
    run.paths.update(data=Path(o["data"]), out=Path(o["out"]))
    run.paths["trace"] = Path(o["trace"]) if o["trace"] else Path(str(o["out"]) + ".trace.csv")
    over = {_MODEL_FLAGS[k]: o[k] for k in _MODEL_FLAGS if o[k] is not None}
    run.model = _build(ModelConfig, run.model, over, "model")
    run.seed = run.model.seed
    return run


def cmd_train(run: RunConfig) -> int:
    run.require_inputs("data")
    out = run.require_output("out")
    trace_path = run.require_output("trace")
    try:
        ckpt = train(run.paths["data"], run.model,
                     on_epoch=lambda e, rec, ck: log.info("epoch %d train %.6g val %.6g", e, rec["train_loss"],
                                                          rec["val_loss"]))
    except TrainingAborted as e:
        e.checkpoint.save(out)
        write_trace(e.checkpoint.trace, trace_path)
        raise RuntimeFailure(f"{e}; last good checkpoint saved to {out}") from None
    except TrainingError as e:
        raise RuntimeFailure(str(e)) from None
    ckpt.save(out)
    write_trace(ckpt.trace, trace_path)
    last = ckpt.trace[-1] if ckpt.trace else {}
    print(f"trained {run.model.num_stages} stages for {len(ckpt.trace)} epochs -> {out}")
    if last:
        print(f"final train loss {last['train_loss']:.6g} val loss {last['val_loss']:.6g}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _resolve_eval(run: RunConfig, args, sec) -> RunConfig:
    o = _flag_defaults(args, sec, {"checkpoint": None, "data": None, "out": None, "threshold": 50.0, "render": 0,
                                   "render_dir": None, "per_sample": None, "split": "test"})
    if o["checkpoint"] is None or o["data"] is None or o["out"] is None:
        raise UsageError("eval needs --checkpoint, --data and --out")
    run.paths.update(checkpoint=Path(o["checkpoint"]), data=Path(o["data"]), out=Path(o["out"]))
    if o["per_sample"]:
        run.paths["per_sample"] = Path(o["per_sample"])
    if float(o["threshold"]) < 0:
        raise UsageError("--threshold must be non-negative")
    if o["split"] not in ("train", "val", "test"):
        raise UsageError(f"unknown split {o['split']!r}")
    run.options = {"threshold": float(o["threshold"]), "render": int(o["render"]), "render_dir": o["render_dir"],
                   "split": o["split"]}
    return run


def evaluate_checkpoint(ckpt: Checkpoint, data_dir, split: str = "test", threshold: float = 50.0):
    """Returns ``(report, predictions, split data)`` for a trained model."""
    manifest, _, G = prepare(data_dir, ckpt.config)
    data = load_split(data_dir, split, manifest)
    pred = infer(ckpt, data.z, G)
    report = evaluate(pred, data.labels, data.targets, threshold, ckpt.config.grid_factor,
                      manifest.sensor.pixel_width)
    report.extra.update(method="DISTA", num_stages=ckpt.config.num_stages)
    return report, pred, data


def cmd_eval(run: RunConfig) -> int:
    from .metrics import extract_targets, psnr, ssim

    run.require_inputs("checkpoint", "data")
    out = run.require_output("out")
    try:
        ckpt = Checkpoint.load(run.paths["checkpoint"])
    except (ValueError, KeyError) as e:
        raise UsageError(f"{run.paths['checkpoint']}: {e}") from None
    o = run.options
    report, pred, data = evaluate_checkpoint(ckpt, run.paths["data"], o["split"], o["threshold"])
    _write_report(report, out)
    c = ckpt.config.grid_factor
    if "per_sample" in run.paths:
        path = run.require_output("per_sample")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "n_targets", "n_detections", "psnr", "ssim"])
            for i in range(len(data)):
                dets = extract_targets(pred[i], o["threshold"], c)
                w.writerow([i, len(data.targets[i]), len(dets), repr(psnr(pred[i], data.labels[i])),
                            repr(ssim(pred[i], data.labels[i]))])
    if o["render"] > 0:
        render_triplets(data.z, pred, data.labels, o["render_dir"] or out.with_suffix("").as_posix() + "_renders",
                        o["render"], c)
    return EXIT_OK


# -- report --------------------------------------------------------------------

def read_report(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise UsageError(f"{path}: cannot read report: {e.strerror}") from None
    except ValueError as e:
        raise UsageError(f"{path}: malformed report JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: report must be a JSON object")
    for f in REPORT_FIELDS:
        if f not in data:
            raise UsageError(f"{path}: missing field '{f}'")
        if not isinstance(data[f], (int, float)) or isinstance(data[f], bool):
            raise UsageError(f"{path}: field '{f}' is not a number")
    return data


def report_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        d = read_report(p)
        row = {"method": str(d.get("method", Path(p).stem)), "file": str(p)}
        row.update({k: float(d[k]) for k in TABLE_COLUMNS})
        rows.append(row)
    return rows


def format_table(rows) -> str:
    head = ["method"] + [k.replace("_mean", "").upper().replace("_", "-") for k in TABLE_COLUMNS]
    body = [[r["method"]] + [f"{100 * r[k]:.2f}" if k.startswith(("ap", "cso")) else f"{r[k]:.4f}"
                             for k in TABLE_COLUMNS] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(line, widths)))
             for line in [head] + body]
    return "\n".join(lines)


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *TABLE_COLUMNS])
        for r in rows:
            w.writerow([r["method"], *(repr(r[k]) for k in TABLE_COLUMNS)])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"method": r["method"], **{k: float(r[k]) for k in TABLE_COLUMNS}} for r in csv.DictReader(fh)]


def _resolve_report(run: RunConfig, args, sec) -> RunConfig:
    reports = args.reports or sec.get("reports", [])
    if not reports:
        raise UsageError("report needs at least one report JSON")
    run.options = {"reports": [Path(p) for p in reports], "csv": args.csv or sec.get("csv")}
    return run


def cmd_report(run: RunConfig) -> int:
    rows = report_rows(run.options["reports"])
    print(format_table(rows))
    if run.options["csv"]:
        run.paths["csv"] = Path(run.options["csv"])
        write_report_csv(rows, run.require_output("csv"))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

COMMANDS = {
    "gen": (cmd_gen, _resolve_gen),
    "solve": (cmd_solve, _resolve_solve),
    "train": (cmd_train, _resolve_train),
    "eval": (cmd_eval, _resolve_eval),
    "report": (cmd_report, _resolve_report),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cso-unmix", description="Closely-spaced target unmixing toolkit.")
    p.add_argument("--config", help="TOML or JSON settings file; flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--samples", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--min-separation", type=float)
    g.add_argument("--fractions", help="train,val,test fractions, e.g. 0.8,0.1,0.1")

    s = sub.add_parser("solve", help="ISTA baseline with lambda tuning on val")
    s.add_argument("--data")
    s.add_argument("--out", help="report JSON path")
    s.add_argument("--lambda", dest="lambda_", type=float, help="multiplier of max|G^T z| over val")
    s.add_argument("--no-grid", action="store_true", default=None, help="use --lambda without searching")
    s.add_argument("--threshold", type=float)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--stop-tol", type=float)
    s.add_argument("--render", type=int, help="number of PNG triplets to write")
    s.add_argument("--render-dir")

    t = sub.add_parser("train", help="train an unfolded network")
    t.add_argument("--data")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--trace", help="CSV trace path (default <out>.trace.csv)")
    t.add_argument("--stages", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--threshold", type=float)
    e.add_argument("--split")
    e.add_argument("--per-sample", help="optional per-sample CSV path")
    e.add_argument("--render", type=int)
    e.add_argument("--render-dir")

    r = sub.add_parser("report", help="compare report JSON files")
    r.add_argument("reports", nargs="*")
    r.add_argument("--csv", help="also write the table as CSV")
    return p


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
        with _threads():
            return COMMANDS[args.command][0](run)
    except (UsageError, FingerprintError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeFailure, GenerationError, StepSizeError, TrainingError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
