"""Configuration-driven experiment runner.

One flat key-value config file drives every paper-facing computation:

    # lines starting with '#' are comments
    key = value

Values are typed by the schema below (ints, floats, booleans true/false,
comma-separated float lists, strings).  Unknown keys are rejected.  Outputs
are written to the run directory: ``ledger.csv`` (one row per elementary
computation), ``summary.json`` (resolved config, config hash, seed ledger,
results), and SVG plots where a curve is produced.  Runs are deterministic:
reductions are ordered by seed, BLAS threading is pinned at entry, plots
carry no timestamps.
"""

# pin BLAS threading before numpy loads anywhere in this process
import os  # noqa: E402

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "load_config", "dump_config", "run"]


class ConfigError(ValueError):
    pass


# schema: key -> (type, default); types: int, float, bool, str, floats, ints
_SCHEMA = {
    "kind": (str, "random-checkerboard"),
    "dimension": (int, 2),
    "lambda": (float, 4.0),
    "phase_values": ("floats", [1.0, 4.0]),
    "probabilities": ("floats", [0.5, 0.5]),
    "period": (int, 1),
    "axis": (int, -1),
    "skew_amplitude": (float, 0.0),
    "time_dependent": (bool, True),
    "constant_matrix": ("floats", []),
    "n": (int, 1),
    "n_max": (int, 2),
    "M": (int, 2),
    "c_tau": (float, 1.0),
    "N": (int, 4),
    "seed0": (int, 0),
    "threads": (int, 1),
    "method": (str, "auto"),
    "X": ("floats", []),
    "Xstar": ("floats", []),
    "e": ("floats", []),
    "eps_list": ("floats", [1.0 / 3.0, 1.0 / 9.0]),
    "datum": (str, "affine+sine"),
    "cells_per_eps": (int, 4),
    "R": (int, 3),
    "r_list": ("floats", [1.0, 3.0]),
    "out": (str, "runs/out"),
    "kkt_tol": (float, 1e-9),
    "field_samples": (int, 16),
}


def _parse_value(key: str, raw: str):
    typ, _ = _SCHEMA[key]
    raw = raw.strip()
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    if typ == "floats":
        return [float(x) for x in raw.split(",") if x.strip()] if raw else []
    if typ == "ints":
        return [int(x) for x in raw.split(",") if x.strip()] if raw else []
    return raw


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = {k: (list(v) if isinstance(v, list) else v)
           for k, (_, v) in _SCHEMA.items()}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(format(float(x), ".17g") for x in v)
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def _field_spec(cfg: dict):
    from .field import FieldSpec
    d = cfg["dimension"]
    kind = cfg["kind"]
    if kind == "constant":
        mat = np.asarray(cfg["constant_matrix"], dtype=float)
        if mat.size != d * d:
            raise ConfigError("constant field needs constant_matrix with d*d entries")
        return FieldSpec.constant(mat.reshape(d, d), cfg["lambda"])
    mats = tuple(v * np.eye(d) for v in cfg["phase_values"])
    if kind == "random-checkerboard":
        return FieldSpec(kind, d, cfg["lambda"], mats,
                         tuple(cfg["probabilities"]),
                         time_dependent=cfg["time_dependent"])
    if kind == "periodic-checkerboard":
        return FieldSpec(kind, d, cfg["lambda"], mats, period=cfg["period"],
                         axis=cfg["axis"], time_dependent=cfg["time_dependent"])
    if kind == "random-rotation":
        return FieldSpec(kind, d, cfg["lambda"], (np.eye(d),),
                         skew_amplitude=cfg["skew_amplitude"],
                         time_dependent=cfg["time_dependent"])
    raise ConfigError(f"unknown field kind {kind!r}")


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    keys = sorted({k for r in rows for k in r})
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            cells = []
            for k in keys:
                v = r.get(k, "")
                if isinstance(v, float):
                    cells.append(format(v, ".17g"))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")


def _plot_svg(path: Path, xs, series: dict, xlabel: str, ylabel: str,
              loglog: bool = True) -> None:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "parhom"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, ys in sorted(series.items()):
        ax.plot(xs, ys, marker="o", label=name)
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _default_X(d: int, given):
    if given:
        return np.asarray(given, dtype=float)
    X = np.zeros(2 * d)
    X[0] = 1.0
    return X


# ---------------------------------------------------------------------------
# subcommands


def _cmd_sample_field(cfg, outdir: Path) -> dict:
    from .field import sample_field
    spec = _field_spec(cfg)
    rows = []
    d = cfg["dimension"]
    for k in range(cfg["field_samples"]):
        fld = sample_field(spec, cfg["seed0"] + k)
        a = fld.at(np.zeros(1), [np.zeros(1)] * d)[0]
        row = {"seed": fld.seed}
        for i in range(d):
            for j in range(d):
                row[f"a{i}{j}"] = float(a[i, j])
        rows.append(row)
    _write_csv(outdir / "ledger.csv", rows)
    return {"samples": cfg["field_samples"]}


def _cmd_compute_j(cfg, outdir: Path) -> dict:
    from .field import sample_field
    from .mesh import Cylinder, Mesh
    from .subadd import j_quantity
    spec = _field_spec(cfg)
    d = cfg["dimension"]
    mesh = Mesh(Cylinder.triadic(cfg["n"], d), cfg["M"], cfg["c_tau"])
    X = _default_X(d, cfg["X"])
    Xs = _default_X(d, cfg["Xstar"])
    rows = []
    from concurrent.futures import ThreadPoolExecutor
    results = [None] * cfg["N"]

    def work(k):
        fld = sample_field(spec, cfg["seed0"] + k)
        results[k] = j_quantity(fld, mesh, X, Xs, method=cfg["method"])

    if cfg["threads"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
            list(pool.map(work, range(cfg["N"])))
    else:
        for k in range(cfg["N"]):
            work(k)
    rows = [r.row() | {"n": cfg["n"]} for r in results]
    _write_csv(outdir / "ledger.csv", rows)
    js = np.array([r.j for r in results])
    return {"j_mean": float(js.mean()),
            "j_stderr": float(js.std(ddof=1) / np.sqrt(len(js))) if len(js) > 1 else 0.0,
            "max_kkt_residual": max(max(r.kkt_residual_mu, r.kkt_residual_mu_star)
                                    for r in results)}


def _cmd_estimate_ahom(cfg, outdir: Path) -> dict:
    from .homog import estimate_abfh, extract_ahom
    spec = _field_spec(cfg)
    cm = estimate_abfh(spec, cfg["n"], cfg["N"], cfg["seed0"], M=cfg["M"],
                       c_tau=cfg["c_tau"], method=cfg["method"],
                       threads=cfg["threads"])
    hm = extract_ahom(cm)
    rows = [{"n": cfg["n"], "seed": s} for s in cm.seeds]
    _write_csv(outdir / "ledger.csv", rows)
    return {"Abar": cm.Abar.tolist(), "Abar_stderr": cm.stderr.tolist(),
            "ahom": hm.ahom.tolist(), "graph_defect": hm.graph_defect,
            "max_kkt_residual": cm.max_kkt_residual}


def _cmd_corrector(cfg, outdir: Path) -> dict:
    from .corrector import build_corrector, corrector_error
    from .field import sample_field
    from .homog import estimate_abfh, extract_ahom
    from .mesh import export_raw
    spec = _field_spec(cfg)
    d = cfg["dimension"]
    e = np.asarray(cfg["e"], dtype=float) if cfg["e"] else np.eye(d)[0]
    cm = estimate_abfh(spec, cfg["n"], max(cfg["N"], 2), cfg["seed0"],
                       M=cfg["M"], c_tau=cfg["c_tau"], method=cfg["method"],
                       threads=cfg["threads"])
    ah = extract_ahom(cm).ahom
    fld = sample_field(spec, cfg["seed0"])
    bundle = build_corrector(fld, cfg["n"], e, ah, M=cfg["M"],
                             c_tau=cfg["c_tau"], method=cfg["method"])
    err = corrector_error(bundle)
    export_raw(bundle.phi, str(outdir / "phi"))
    rows = [{"n": cfg["n"], "seed": fld.seed, **err,
             "curl_defect": bundle.curl_defect,
             "evolution_defect": bundle.evolution_defect}]
    _write_csv(outdir / "ledger.csv", rows)
    return {"ahom_est": ah.tolist(), "corrector_error": err,
            "curl_defect": bundle.curl_defect}


def _cmd_homogenize_error(cfg, outdir: Path) -> dict:
    from .experiment import homogenization_error
    from .homog import estimate_abfh, extract_ahom
    spec = _field_spec(cfg)
    cm = estimate_abfh(spec, cfg["n"], max(cfg["N"], 2), cfg["seed0"],
                       M=cfg["M"], c_tau=cfg["c_tau"], method=cfg["method"],
                       threads=cfg["threads"])
    ah = extract_ahom(cm).ahom
    rows = []
    for eps in cfg["eps_list"]:
        rep = homogenization_error(spec, eps, cfg["datum"], ah, cfg["seed0"],
                                   cells_per_eps=cfg["cells_per_eps"])
        rows.append(rep.row())
    _write_csv(outdir / "ledger.csv", rows)
    return {"ahom_est": ah.tolist(), "errors": rows}


def _cmd_rate_scan(cfg, outdir: Path) -> dict:
    from .experiment import rate_scan
    from .homog import estimate_abfh, extract_ahom
    spec = _field_spec(cfg)
    cm = estimate_abfh(spec, cfg["n"], max(cfg["N"], 2), cfg["seed0"],
                       M=cfg["M"], c_tau=cfg["c_tau"], method=cfg["method"],
                       threads=cfg["threads"])
    ah = extract_ahom(cm).ahom
    scan = rate_scan(spec, cfg["eps_list"], cfg["datum"], ah, cfg["N"],
                     cfg["seed0"], cells_per_eps=cfg["cells_per_eps"],
                     threads=cfg["threads"])
    _write_csv(outdir / "ledger.csv", scan.rows)
    series = {k: [m[k] for m in scan.means]
              for k in ("grad_dual_err", "flux_dual_err", "l2_err")}
    _plot_svg(outdir / "rates.svg", cfg["eps_list"], series, "eps", "error")
    return {"means": scan.means, "alphas": scan.alphas, "ahom_est": ah.tolist()}


def _cmd_lipschitz(cfg, outdir: Path) -> dict:
    from .experiment import lipschitz_diagnostic
    spec = _field_spec(cfg)
    out = lipschitz_diagnostic(spec, cfg["R"],
                               [int(r) for r in cfg["r_list"]], cfg["N"],
                               cfg["seed0"], M=cfg["M"], c_tau=cfg["c_tau"])
    rows = [{"r": r, "max_ratio": mr, "median_ratio": md, "q90_ratio": q9}
            for r, mr, md, q9 in zip(out["r_list"], out["max_ratio"],
                                     out["median_ratio"], out["q90_ratio"])]
    _write_csv(outdir / "ledger.csv", rows)
    return out


def _cmd_decay(cfg, outdir: Path) -> dict:
    from .homog import decay_curve
    spec = _field_spec(cfg)
    curve = decay_curve(spec, cfg["n_max"], cfg["N"], cfg["seed0"], M=cfg["M"],
                        c_tau=cfg["c_tau"], method=cfg["method"],
                        threads=cfg["threads"])
    _write_csv(outdir / "ledger.csv", [dict(r) for r in curve.rows])
    ns = [r["n"] for r in curve.rows]
    Es = [max(r["E"], 1e-300) for r in curve.rows]
    _plot_svg(outdir / "decay.svg", [3.0 ** n for n in ns], {"E_n": Es},
              "3^n", "E[J]")
    return {"rows": curve.rows, "beta_hat": curve.beta_hat,
            "tau_hat": curve.tau_hat}


def _cmd_validate(cfg, outdir: Path) -> dict:
    """Run the invariant suite at desk scale; nonzero exit on any violation."""
    from .field import FieldSpec, bigA, fitzpatrick, sample_field
    from .mesh import Cylinder, Mesh, ScalarField
    from .norms import norm
    from .subadd import JForm, verify_identities
    checks = []

    def check(name, value, tol):
        ok = bool(value <= tol)
        checks.append({"check": name, "value": float(value), "tol": tol,
                       "status": "pass" if ok else "FAIL"})
        return ok

    rng = np.random.default_rng(cfg["seed0"])
    d = cfg["dimension"]
    # variational encoding identities on random matrices
    worst_eq, worst_lower = 0.0, 0.0
    for _ in range(2000):
        s = rng.standard_normal((d, d))
        s = s @ s.T + 0.2 * np.eye(d)
        m = rng.standard_normal((d, d))
        m = 0.5 * (m - m.T)
        a = s + m
        p = rng.standard_normal(d)
        q = a @ p
        worst_eq = max(worst_eq, abs(fitzpatrick(a, p, q) - p @ q))
        q2 = q + rng.standard_normal(d)
        lam_loc = max(np.linalg.norm(a, 2), 1.0 / np.linalg.eigvalsh(s).min())
        gap = fitzpatrick(a, p, q2) - p @ q2 - np.sum((q2 - q) ** 2) / (2 * lam_loc)
        worst_lower = min(worst_lower, gap)
    check("fitzpatrick_equality_on_graph", worst_eq, 1e-10)
    check("fitzpatrick_lower_bound", -worst_lower, 1e-10)
    # constant-field exactness of the subadditive forms
    a0 = 2.0 * np.eye(d)
    mesh = Mesh(Cylinder.triadic(min(cfg["n"], 1), d), min(cfg["M"], 2))
    form = JForm(sample_field(FieldSpec.constant(a0), 0), mesh)
    A0 = bigA(a0)
    check("constant_field_Qmu", float(np.abs(form.Qmu - A0).max()), 1e-8)
    check("constant_field_Qstar",
          float(np.abs(form.Qstar - np.linalg.inv(A0)).max()), 1e-8)
    # J identities on one random sample
    spec = _field_spec(cfg) if cfg["kind"] != "constant" else FieldSpec.two_phase(d)
    fld = sample_field(spec, cfg["seed0"])
    X = _default_X(d, cfg["X"])
    Xs = _default_X(d, cfg["Xstar"])
    dev = verify_identities(fld, mesh, X, Xs)
    check("derivative_X_identity", dev["derivative_X_avgAS"], 1e-7)
    check("derivative_Xstar_identity", dev["derivative_Xstar_avgS"], 1e-7)
    check("spatial_average_X0", dev["spatial_average_X0"], 1e-7)
    check("uniform_convexity", dev["uniform_convexity_X_ok"]
          + dev["uniform_convexity_Xstar_ok"], 0.5)
    check("max_kkt_residual", dev["max_kkt_residual"], cfg["kkt_tol"])
    # norm homogeneity
    f = ScalarField(mesh, rng.standard_normal((mesh.nsteps + 1, mesh.nnodes)))
    f2 = ScalarField(mesh, 2.0 * f.values)
    dev_h = abs(norm(f2, "hatH-1par") - 2.0 * norm(f, "hatH-1par"))
    check("dual_norm_homogeneity", dev_h, 1e-10)
    _write_csv(outdir / "ledger.csv", checks)
    nfail = sum(1 for c in checks if c["status"] == "FAIL")
    return {"checks": checks, "failures": nfail}


_COMMANDS = {
    "sample-field": _cmd_sample_field,
    "compute-j": _cmd_compute_j,
    "estimate-ahom": _cmd_estimate_ahom,
    "corrector": _cmd_corrector,
    "homogenize-error": _cmd_homogenize_error,
    "rate-scan": _cmd_rate_scan,
    "lipschitz": _cmd_lipschitz,
    "decay": _cmd_decay,
    "validate": _cmd_validate,
}


def run(subcommand: str, cfg: dict) -> tuple[int, dict]:
    """Dispatch one subcommand; returns (exit status, summary dict)."""
    if subcommand not in _COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; "
                          f"have {sorted(_COMMANDS)}")
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {
        "subcommand": subcommand,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_hash": config_hash(cfg),
        "seed_ledger": list(range(cfg["seed0"], cfg["seed0"] + cfg["N"])),
    }
    status = 0
    result = _COMMANDS[subcommand](cfg, outdir)
    summary["result"] = result
    if subcommand == "validate" and result.get("failures", 0) > 0:
        status = 1
    (outdir / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True, default=float) + "\n")
    (outdir / "config.resolved").write_text(dump_config(cfg))
    return status, summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="parhom",
        description="quantitative stochastic homogenization laboratory for "
                    "parabolic equations")
    ap.add_argument("subcommand", choices=sorted(_COMMANDS))
    ap.add_argument("--config", default=None, help="flat key = value file")
    ap.add_argument("--out", default=None, help="output directory override")
    ap.add_argument("--seed", type=int, default=None, help="seed0 override")
    ap.add_argument("--threads", type=int, default=None, help="worker pool size")
    args = ap.parse_args(argv)
    overrides = {"out": args.out, "seed0": args.seed, "threads": args.threads}
    try:
        cfg = load_config(args.config, overrides)
        status, summary = run(args.subcommand, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.get("result", {}), indent=1, sort_keys=True,
                     default=float))
    return status


if __name__ == "__main__":
    sys.exit(main())
