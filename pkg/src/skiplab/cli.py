"""Batch command line: ``skiplab {train,verify,couple,sweep} --config run.json``.

Exit codes: 0 success, 1 a verified bound failed, 2 training diverged,
3 invalid configuration or input (no run directory is left behind).
Outputs go to ``$RUNS_DIR/<verb>-<config hash>/``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .activations import as_activation
from .data import TargetSpec, load_dataset, save_dataset, sphere_dataset
from .errors import DivergenceError, SkiplabError, ValidationError
from .experiments import (
    SKIP_SWEEP_COLUMNS,
    fit_loglog,
    resnet_pair_run,
    skip_coupling_run,
    skip_sweep_fits,
    skip_sweep_row,
)
from .landscape import (
    check_backward_stability,
    check_forward_stability,
    population_risk,
    probe_landscape,
    write_diagnostics,
)
from .netcore import sample_init
from .reference import RandomFeatureParams
from .resnetlab import path_norm, resnet_init, resnet_predict, train_resnet
from .trainer import TrainConfig, lambda_hat, resolve_eta, train_nn, train_rf

log = logging.getLogger("skiplab")

EXIT_OK, EXIT_FAIL, EXIT_DIVERGED, EXIT_INVALID = 0, 1, 2, 3
MODELS = ("skipnet", "rf", "resnet", "resnet-frozenV")


class ConfigError(ValidationError):
    pass


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


def canonical(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_config(path, seed_override=None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    ds = doc.get("dataset")
    if isinstance(ds, dict) and "path" in ds:
        p = Path(ds["path"])
        if not p.is_absolute():
            ds["path"] = str((path.parent / p).resolve())
    if seed_override is not None:
        doc["init_seed"] = int(seed_override)
    return doc


def _need(doc, key, kind=int):
    if key not in doc:
        raise ConfigError(f"config is missing {key!r}")
    try:
        return kind(doc[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {key!r} is malformed: {doc[key]!r}") from exc


def build_dataset(doc, d):
    spec = doc.get("dataset")
    if not isinstance(spec, dict):
        raise ConfigError("config needs a 'dataset' object (a 'path' or generation fields)")
    if "path" in spec:
        if not Path(spec["path"]).exists():
            raise ConfigError(f"dataset file not found: {spec['path']}")
        ds = load_dataset(spec["path"])
        if ds.d != d:
            raise ConfigError(f"dataset dimension {ds.d} != model dimension {d}")
        return ds
    target = TargetSpec.from_dict(spec.get("target", {}))
    return sphere_dataset(
        d,
        _need(spec, "n"),
        target,
        int(spec.get("seed", 0)),
        compute_lambda=bool(spec.get("compute_lambda", True)),
    )


def train_config(doc) -> TrainConfig:
    section = dict(doc.get("train", {}))
    if "eta_lambda_multiple" in section:
        # resolved to an explicit step once lambda is known
        section["eta_rule"] = "explicit"
        section.setdefault("eta", 1.0)
    try:
        return TrainConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def run_dir_for(verb, doc) -> Path:
    root = Path(os.environ.get("RUNS_DIR", "runs"))
    name = doc.get("name") or f"{verb}-{hashlib.sha256(canonical(doc).encode()).hexdigest()[:12]}"
    return root / name


class RunDir:
    """Write into a scratch directory; publish it only when the run ends.

    Validation errors discard the scratch directory; completed and
    diverged runs are moved into place.
    """

    def __init__(self, verb, doc):
        self.final = run_dir_for(verb, doc)
        self.doc = doc

    def __enter__(self):
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=self.final.parent))
        (self.tmp / "config.json").write_text(canonical(self.doc))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None or issubclass(exc_type, DivergenceError):
            if self.final.exists():
                shutil.rmtree(self.final)
            os.replace(self.tmp, self.final)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_plain(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _dims(doc):
    model = doc.get("model", "skipnet")
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")
    return model, _need(doc, "d"), _need(doc, "m"), _need(doc, "L"), int(doc.get("init_seed", 0))


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def cmd_train(doc) -> int:
    model, d, m, L, seed = _dims(doc)
    act = as_activation(doc.get("act", "relu"))
    cfg = train_config(doc)
    ds = build_dataset(doc, d)
    multiple = doc.get("train", {}).get("eta_lambda_multiple")
    if model in ("skipnet", "rf"):
        p0 = sample_init(d, m, L, seed)
        lam = None
        if cfg.eta_rule == "lambda_scaled" or multiple is not None:
            lam = lambda_hat(p0, ds, act, cfg.lambda_source)
        if multiple is not None:
            # deliberately outside the lambda-scaled rule; no eta <= lambda/L check
            cfg.eta = float(multiple) * lam / L
        resolve_eta(cfg, L, lam)
    else:
        p0 = resnet_init(d, m, L, seed)
        if cfg.eta_rule != "explicit" or multiple is not None:
            raise ConfigError("ResNet models need an explicit train.eta")
    run_dir = RunDir("train", doc)
    with run_dir as out:
        save_dataset(ds, out / "dataset.csv")
        diag = {"model": model, "dataset": ds.metadata()}
        try:
            if model == "skipnet":
                traj = train_nn(p0, ds, cfg, act, lam)
            elif model == "rf":
                rf0 = RandomFeatureParams.from_model(p0, act, seed)
                traj = train_rf(rf0, ds, cfg, lam, L)
            else:
                res = doc.get("resnet", {})
                mode = "frozen-V-gd" if model == "resnet-frozenV" else res.get("mode", "plain-gd")
                traj = train_resnet(p0, ds, cfg, mode, float(res.get("lambda_reg", 0.0)), act)
        except DivergenceError as exc:
            exc.trajectory.to_csv(out / "trajectory.csv")
            diag.update(status="diverged", message=str(exc), trajectory=exc.trajectory.meta)
            _write_json(out / "diagnostics.json", diag)
            raise
        traj.to_csv(out / "trajectory.csv")
        diag.update(status=traj.meta["status"], trajectory=traj.meta)
        _write_json(out / "diagnostics.json", diag)
        if hasattr(traj.final, "to_dict"):
            _write_json(out / "final_params.json", traj.final.to_dict())
    log.info("final risk %.3e (%s) -> %s", traj.final_risk, traj.meta["status"], run_dir.final)
    return EXIT_OK


# ----------------------------------------------------------------------
# verify
# ----------------------------------------------------------------------


def cmd_verify(doc) -> int:
    _, d, m, L, seed = _dims(doc)
    act = as_activation(doc.get("act", "relu"))
    v = doc.get("verify", {})
    c = float(v.get("c", 1.0))
    checks = v.get("checks", ["forward", "backward", "gradient"])
    probe_seed = int(v.get("seed", 0))
    p0 = sample_init(d, m, L, seed)
    if v.get("theta0_only"):
        c = 0.0
    ds = build_dataset(doc, d) if "gradient" in checks else None
    reports = []
    if "forward" in checks:
        reports += check_forward_stability(p0, c, int(v.get("n_probes", 200)), probe_seed, act)
    if "backward" in checks:
        reports += check_backward_stability(p0, c, int(v.get("n_probes", 200)), probe_seed, act)
    if "gradient" in checks:
        res = probe_landscape(
            p0,
            c,
            ds,
            int(v.get("n_gradient_probes", 100)),
            probe_seed,
            act,
            delta=float(v.get("delta", 0.1)),
            strict_gates=bool(v.get("strict_gates", False)),
        )
        reports += list(res.values())
    unknown = set(checks) - {"forward", "backward", "gradient"}
    if unknown:
        raise ConfigError(f"unknown checks {sorted(unknown)}")
    with RunDir("verify", doc) as out:
        summary = write_diagnostics(reports, out / "diagnostics.json", {"c": c, "L": L})
    for r in reports:
        log.info("%-20s lhs %.4e rhs %.4e %s", r.bound_name, r.lhs_max, r.rhs, "pass" if r.passed else "FAIL")
    return EXIT_OK if summary["all_pass"] else EXIT_FAIL


# ----------------------------------------------------------------------
# couple
# ----------------------------------------------------------------------


def cmd_couple(doc) -> int:
    model = doc.get("model", "skipnet")
    seed = int(doc.get("init_seed", 0))
    if "rf_init_seed" in doc and int(doc["rf_init_seed"]) != seed:
        raise ConfigError("the two coupled models must share init_seed")
    d, m = _need(doc, "d"), _need(doc, "m")
    depths = doc.get("depths") or [_need(doc, "L")]
    act = as_activation(doc.get("act", "relu"))
    cp = doc.get("couple", {})
    ds = build_dataset(doc, d)
    if model not in ("skipnet", "resnet"):
        raise ConfigError("couple pairs 'skipnet' with its RF twin or 'resnet' with its frozen-V twin")
    results = []
    for L in depths:
        L = int(L)
        if model == "skipnet":
            run = skip_coupling_run(
                d, m, ds.n, L, seed, dataset=ds, act=act,
                kappa=float(cp.get("kappa", 0.5)),
                horizon_factor=float(cp.get("horizon_factor", 1.0)),
                n_records=int(cp.get("n_records", 20)),
                n_test=int(cp.get("n_test", 64)),
                test_seed=int(cp.get("test_seed", 12345)),
            )
        else:
            p0 = resnet_init(d, m, L, seed)
            eta = float(cp["eta"]) if "eta" in cp else float(cp.get("eta_scale", 1.0)) / (L - 1)
            run = resnet_pair_run(p0, ds, eta, int(cp.get("steps", 3000)), act, int(cp.get("n_records", 50)))
        results.append((L, run))
    with RunDir("couple", doc) as out:
        summary = {"model": model, "init_seed": seed, "depths": []}
        for L, run in results:
            run.series.to_csv(out / f"coupling_L{L}.csv")
            run.traj_nn.to_csv(out / f"trajectory_nn_L{L}.csv")
            run.traj_rf.to_csv(out / f"trajectory_rf_L{L}.csv")
            summary["depths"].append(
                {
                    "L": L,
                    "eta": run.eta,
                    "sup_a_gap": run.series.sup("a_gap"),
                    "sup_f_gap_theta": run.series.sup("f_gap_theta"),
                    "sup_f_gap_traj": run.series.sup("f_gap_traj"),
                    "sup_risk_gap": _risk_gap(run.traj_nn, run.traj_rf),
                }
            )
        _write_json(out / "diagnostics.json", summary)
    return EXIT_OK


def _risk_gap(a, b):
    rb = dict(zip(b.steps, b.risks))
    return max(abs(r - rb[s]) for s, r in zip(a.steps, a.risks) if s in rb)


# ----------------------------------------------------------------------
# sweep
# ----------------------------------------------------------------------

RESNET_SWEEP_COLUMNS = [
    "L",
    "seed",
    "eta",
    "final_train_risk",
    "test_risk_final",
    "path_norm",
    "reg_final_train_risk",
    "reg_test_risk_final",
    "reg_path_norm",
    "sup_risk_gap_frozenV",
]


def _sweep_job(job):
    doc, L, seed = job
    model = doc.get("model", "skipnet")
    d, m = int(doc["d"]), int(doc["m"])
    act = as_activation(doc.get("act", "relu"))
    sw = doc.get("sweep", {})
    spec = dict(doc["dataset"])
    spec.setdefault("seed", seed)
    if sw.get("dataset_per_seed", True) and "path" not in spec:
        spec["seed"] = seed
    ds = build_dataset({"dataset": spec}, d)
    target = ds.target
    n_test, test_seed = int(sw.get("n_test", 1000)), int(sw.get("test_seed", 777))
    if model == "skipnet":
        run = skip_coupling_run(
            d, m, ds.n, L, seed, dataset=ds, act=act,
            kappa=float(sw.get("kappa", 0.5)),
            horizon_factor=float(sw.get("horizon_factor", 1.0)),
            n_records=int(sw.get("n_records", 20)),
        )
        return skip_sweep_row(run, target, act, n_test, test_seed)
    steps = int(sw.get("steps", 2000))
    eta = float(sw.get("eta_scale", 1.0)) / (L - 1)
    p0 = resnet_init(d, m, L, seed)
    pair = resnet_pair_run(p0, ds, eta, steps, act)
    cfg = TrainConfig(eta=float(sw.get("adam_lr", 0.01)), steps=steps, eta_rule="explicit", record_every=steps)
    reg = train_resnet(p0, ds, cfg, "pathnorm-adam", float(sw.get("lambda_reg", 0.005)), act)

    def test(p):
        return population_risk(lambda X: resnet_predict(p, X, act), target, d, n_test, test_seed, ds.label_scale)[0]

    return {
        "L": L,
        "seed": seed,
        "eta": eta,
        "final_train_risk": pair.traj_nn.final_risk,
        "test_risk_final": test(pair.traj_nn.final),
        "path_norm": path_norm(pair.traj_nn.final),
        "reg_final_train_risk": reg.final_risk,
        "reg_test_risk_final": test(reg.final),
        "reg_path_norm": path_norm(reg.final),
        "sup_risk_gap_frozenV": pair.risk_gap,
    }


def cmd_sweep(doc, jobs=1) -> int:
    model = doc.get("model", "skipnet")
    if model not in ("skipnet", "resnet"):
        raise ConfigError("sweep supports 'skipnet' and 'resnet'")
    sw = doc.get("sweep", {})
    depths = [int(L) for L in sw.get("depths", [])]
    seeds = [int(s) for s in sw.get("seeds", [])]
    if not depths or not seeds:
        raise ConfigError("the sweep grid is empty (need sweep.depths and sweep.seeds)")
    _need(doc, "d"), _need(doc, "m")
    if not isinstance(doc.get("dataset"), dict):
        raise ConfigError("config needs a 'dataset' object")
    grid = [(doc, L, s) for L in depths for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_job, grid))
    else:
        rows = [_sweep_job(j) for j in grid]
    with RunDir("sweep", doc) as out:
        if model == "skipnet":
            _write_rows(out / "summary.csv", SKIP_SWEEP_COLUMNS, rows)
            fits = skip_sweep_fits(rows)
        else:
            _write_rows(out / "summary.csv", RESNET_SWEEP_COLUMNS, rows)
            fits = _resnet_fits(rows, depths)
        _write_json(out / "fits.json", fits)
    return EXIT_OK


def _resnet_fits(rows, depths):
    def med(key):
        return [float(np.median([r[key] for r in rows if r["L"] == L])) for L in depths]

    plain, reg = med("test_risk_final"), med("reg_test_risk_final")
    return {
        "depths": depths,
        "test_risk_spread_plain": max(plain) / min(plain) if min(plain) > 0 else math.inf,
        "test_risk_spread_reg": max(reg) / min(reg) if min(reg) > 0 else math.inf,
        "sup_risk_gap_vs_L": fit_loglog(depths, med("sup_risk_gap_frozenV")),
    }


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "verify": cmd_verify, "couple": cmd_couple, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skiplab", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    ap.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel runs (sweep only)")
    ap.add_argument("--seed-override", type=int, default=None, metavar="K", help="replace init_seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        doc = load_config(args.config, args.seed_override)
        if args.verb == "sweep":
            return cmd_sweep(doc, max(1, args.jobs))
        return COMMANDS[args.verb](doc)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SkiplabError, ValueError, KeyError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
