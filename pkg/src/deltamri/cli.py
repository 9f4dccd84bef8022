"""Command-line entry point: ``deltamri <subcommand> [options]``.

Every subcommand resolves its parameters as built-in defaults, then an
optional JSON ``--config`` file, then ``DMRI_SEED``, then explicit flags.
The resolved parameters (without output paths) are hashed into a
``config_hash`` that is printed and stored next to the outputs.

Exit codes: 0 success, 2 usage or configuration error, 3 scenario
construction failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import baselines, container
from .kspace import make_gaussian_mask
from .simharness import (
    METHODS, DvfSpec, ReconConfig, Scenario, ScenarioError, config_hash, make_scenario,
    measure, normalized_error, reconstruct_delta, reconstruct_tcs, run_sweep,
)
from .solver import SolverError
from .warp import InversionError, RigidParams

log = logging.getLogger("deltamri")

EXIT_OK, EXIT_USAGE, EXIT_SIMULATION, EXIT_SOLVER = 0, 2, 3, 4
SEED_ENV = "DMRI_SEED"
SCENARIO_FILES = {
    "r1": ("r1.dmri", "real"),
    "r1_hat": ("r1_hat.dmri", "real"),
    "x1_hat": ("x1_hat.dmri", "complex"),
    "r2": ("r2.dmri", "real"),
    "phi2": ("phi2.dmri", "real"),
    "v_true": ("v_true.dmri", "vector"),
}


class UsageError(ValueError):
    pass


# value parsers: accept the CLI string form and the JSON form


def parse_shape(val):
    if isinstance(val, str):
        try:
            dims = [int(s) for s in val.lower().split("x")]
        except ValueError:
            raise UsageError(f"shape must look like 64x48x32, got {val!r}") from None
    else:
        dims = [int(s) for s in val]
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise UsageError(f"shape must have 2 or 3 positive dimensions, got {val!r}")
    return dims


def _list_of(conv):
    def parse(val):
        items = val.split(",") if isinstance(val, str) else list(val)
        try:
            return [conv(s) for s in items if not (isinstance(s, str) and not s.strip())]
        except (TypeError, ValueError):
            raise UsageError(f"cannot parse list {val!r}") from None
    return parse


def _bool(val):
    if isinstance(val, bool):
        return val
    if isinstance(val, str) and val.lower() in ("true", "1", "yes", "false", "0", "no"):
        return val.lower() in ("true", "1", "yes")
    raise UsageError(f"not a boolean: {val!r}")


def _scalar(conv):
    def parse(val):
        if isinstance(val, bool) or isinstance(val, (list, dict)):
            raise UsageError(f"expected a number, got {val!r}")
        try:
            return conv(val)
        except (TypeError, ValueError):
            raise UsageError(f"expected a number, got {val!r}") from None
    return parse


def _optional(conv):
    return lambda val: None if val is None or val == "none" else conv(val)


FLOAT, INT = _scalar(float), _scalar(int)
FLOATS, INTS = _list_of(float), _list_of(int)
STRS = _list_of(str)

_RECON = {f.name: f.default for f in fields(ReconConfig)}
_RECON_TYPES = {"bb_iters": INT, "cycles": INT, "tcs_iters": INT, "wavelet_levels": INT,
                "tcs_adaptive_rho": _bool, "invert_w": _bool}
RECON_OPTIONS = {k: (v, _RECON_TYPES.get(k, FLOAT)) for k, v in _RECON.items()}

# hashed options: name -> (default, parser)
OPTIONS = {
    "simulate": {
        "shape": (None, parse_shape),
        "seed": (0, INT),
        "theta_deg": (None, _optional(FLOATS)),
        "t": (None, _optional(FLOATS)),
        "dvf_peak": (3.0, FLOAT),
        "dvf_radius_frac": (1 / 8, FLOAT),
        "noise_frac": (0.04, FLOAT),
        "foreground_threshold": (0.1, FLOAT),
        "edge": (2.5, FLOAT),
        "inverse_iters": (20, INT),
        "refine_iters": (4, INT),
    },
    "mask": {
        "shape": (None, parse_shape),
        "pct": (10.0, FLOAT),
        "seed": (0, INT),
        "cube_frac": (_RECON["cube_frac"], FLOAT),
        "sigma_frac": (_RECON["sigma_frac"], FLOAT),
    },
    "reconstruct": {
        "method": ("delta", str),
        "pct": (10.0, FLOAT),
        "seed": (0, INT),
        "aligned": (False, _bool),
        **RECON_OPTIONS,
    },
    "evaluate": {},
    "sweep": {
        "pcts": ([1.0, 2.0, 5.0, 10.0, 20.0], FLOATS),
        "methods": (list(METHODS), STRS),
        "seeds": ([1, 2, 3], INTS),
        **RECON_OPTIONS,
    },
}
# unhashed options (locations and scheduling)
PATHS = {
    "simulate": {"out": "scenario"},
    "mask": {"out": "mask.dmri"},
    "reconstruct": {"scenario": None, "out": "recon", "rigid": None},
    "evaluate": {"scenario": None, "estimate": None},
    "sweep": {"scenario": None, "out": "sweep", "jobs": 1},
}
HELP = {
    "shape": "grid shape, e.g. 64x48x32 or 128x128",
    "theta_deg": "rotation angles in degrees, comma separated",
    "t": "translation in voxels, comma separated",
    "pct": "percentage of k-space sampled",
    "seed": f"sampling or phantom seed (overridden by ${SEED_ENV}, then by this flag)",
    "aligned": "treat the stored reference as already rigidly aligned (tcs only)",
    "rigid": "rigid.json from a delta run, used to pre-align the tcs reference",
    "scenario": "scenario directory written by 'simulate'",
    "jobs": "parallel worker processes",
    "method": "one of " + ", ".join(METHODS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltamri",
        description="Longitudinal MRI change estimation from sub-sampled k-space.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in OPTIONS:
        p = sub.add_parser(name, help=_COMMAND_HELP[name])
        p.add_argument("--config", help="JSON file with option values")
        for key, (default, conv) in OPTIONS[name].items():
            flag = "--" + key.replace("_", "-")
            text = HELP.get(key, "") + ("" if default is None else f" (default {default})")
            if conv is _bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=text)
            else:
                p.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=text)
        for key, default in PATHS[name].items():
            p.add_argument("--" + key, dest=key, default=argparse.SUPPRESS,
                           help=HELP.get(key, "") + ("" if default is None else f" (default {default})"))
    return parser


_COMMAND_HELP = {
    "simulate": "build a ground-truth scenario directory",
    "mask": "write a Gaussian k-space sampling mask",
    "reconstruct": "reconstruct the follow-up magnitude with one method",
    "evaluate": "normalized error of an estimate against a scenario",
    "sweep": "error versus sampling percentage for several methods and seeds",
}


def resolve(command: str, args: dict) -> tuple[dict, dict]:
    """Merge defaults, config file, environment seed and flags.

    Returns ``(hashed, paths)``. Raises :class:`UsageError` on unknown keys
    or unparsable values.
    """
    opts, paths = OPTIONS[command], PATHS[command]
    values = {k: d for k, (d, _) in opts.items()}
    locs = dict(paths)
    cfg_path = args.pop("config", None)
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(cfg) - set(opts) - set(paths))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in cfg.items():
            (values if k in opts else locs)[k] = v
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        if "seed" in opts:
            values["seed"] = env_seed
        elif "seeds" in opts:
            values["seeds"] = env_seed
    for k, v in args.items():
        (values if k in opts else locs)[k] = v
    for k, (_, conv) in opts.items():
        if values[k] is not None:
            values[k] = conv(values[k])
    return values, locs


def _require(locs: dict, key: str, command: str):
    if locs.get(key) is None:
        raise UsageError(f"{command} needs --{key}")
    return locs[key]


# scenario bundle


def save_scenario(sc: Scenario, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for attr, (fname, kind) in SCENARIO_FILES.items():
        container.write(out / fname, getattr(sc, attr), kind)
    manifest = {
        "config": sc.config,
        "config_hash": sc.config_hash(),
        "residual": sc.residual,
        "noise_std": sc.noise_std,
        "rigid": sc.p_true.to_dict(),
        "theta_deg": np.rad2deg(sc.p_true.theta).tolist(),
        "files": {k: f for k, (f, _) in SCENARIO_FILES.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path} is not a scenario directory: {exc}") from None
    arrays = {}
    for attr, (fname, kind) in SCENARIO_FILES.items():
        a = container.read(path / fname, expect=kind)
        arrays[attr] = a.astype(np.complex128 if kind == "complex" else np.float64)
    cfg = manifest["config"]
    return Scenario(
        r2=arrays["r2"], phi2=arrays["phi2"], p_true=RigidParams.from_dict(manifest["rigid"]),
        v_true=arrays["v_true"], r1=arrays["r1"], r1_hat=arrays["r1_hat"],
        x1_hat=arrays["x1_hat"], seed=int(cfg["seed"]), noise_frac=float(cfg["noise_frac"]),
        foreground_threshold=float(cfg["foreground_threshold"]),
        residual=float(manifest["residual"]), noise_std=float(manifest["noise_std"]),
        config=cfg)


def _recon_config(values: dict) -> ReconConfig:
    return ReconConfig(**{k: values[k] for k in RECON_OPTIONS})


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# subcommands


def cmd_simulate(values, locs) -> int:
    if values["shape"] is None:
        raise UsageError("simulate needs --shape (e.g. --shape 64x48x32)")
    shape = tuple(values["shape"])
    theta = None if values["theta_deg"] is None else np.deg2rad(values["theta_deg"])
    dvf = DvfSpec(peak=values["dvf_peak"], radius_frac=values["dvf_radius_frac"])
    if theta is not None or values["t"] is not None:
        try:
            probe = RigidParams(
                np.zeros(3 if len(shape) == 3 else 1) if theta is None else theta,
                np.zeros(len(shape)) if values["t"] is None else values["t"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if not probe.within_bounds():
            raise UsageError("rigid parameters outside the bounds "
                             f"|theta| <= {np.rad2deg(probe.upper[0]):.4g} deg, "
                             f"|t| <= {probe.upper[-1]:g} voxels")
    try:
        sc = make_scenario(shape, values["seed"], theta, values["t"], dvf, values["noise_frac"],
                           values["foreground_threshold"], values["edge"],
                           values["inverse_iters"], values["refine_iters"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = save_scenario(sc, locs["out"])
    print(f"config_hash {sc.config_hash()}")
    print(f"residual {sc.residual:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_mask(values, locs) -> int:
    if values["shape"] is None:
        raise UsageError("mask needs --shape")
    try:
        mask = make_gaussian_mask(tuple(values["shape"]), values["pct"], values["cube_frac"],
                                  values["sigma_frac"], values["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    container.write(locs["out"], mask.selected, "mask")
    print(f"config_hash {config_hash({'command': 'mask', **values})}")
    print(f"selected {mask.n} of {mask.selected.size}")
    return EXIT_OK


def cmd_reconstruct(values, locs) -> int:
    method = values["method"]
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if not 0 < values["pct"] <= 100:
        raise UsageError("pct must lie in (0, 100]")
    sc = load_scenario(_require(locs, "scenario", "reconstruct"))
    p_align = None
    if method == "tcs":
        if locs.get("rigid"):
            p_align = RigidParams.from_dict(json.loads(Path(locs["rigid"]).read_text()))
        elif values["aligned"]:
            p_align = RigidParams.zeros(len(sc.shape))
        else:
            raise UsageError(
                "tcs compares the follow-up scan with a reference that must first be rigidly "
                "aligned to it. Pass --rigid with the rigid.json written by a delta "
                "reconstruction of the same data, or --aligned if the stored reference is "
                "already aligned.")
    cfg = _recon_config(values)
    hashed = {"command": "reconstruct", **values, "scenario": sc.config_hash()}
    if p_align is not None:
        hashed["rigid"] = p_align.as_vector().tolist()
    chash = config_hash(hashed)
    m = measure(sc, values["pct"], values["seed"], cfg)
    out = Path(locs["out"])
    out.mkdir(parents=True, exist_ok=True)
    container.write(out / "mask.dmri", m.mask.selected, "mask")
    container.write(out / "measurement.dmri", m.values.reshape(-1, 1), "complex")
    trace = {"method": method, "config": hashed, "config_hash": chash}
    if method == "delta":
        sol = reconstruct_delta(sc, m, cfg)
        r2_hat = sol.r2_hat
        container.write(out / "v_hat.dmri", sol.v_hat, "vector")
        rigid = sol.p_hat.to_dict()
        rigid["theta_deg"] = np.rad2deg(sol.p_hat.theta).tolist()
        _dump(out / "rigid.json", rigid)
        trace.update(cost_trace=sol.cost_trace, blocks=sol.blocks)
    elif method == "tcs":
        res = reconstruct_tcs(sc, m, p_align, cfg)
        r2_hat = np.abs(res.x)
        container.write(out / "x2_hat.dmri", res.x, "complex")
        trace.update(objective=res.objective, iterations=res.iterations,
                     converged=res.converged, rho=res.rho)
    else:
        r2_hat = baselines.z_idft(m)
    eps = normalized_error(r2_hat, sc.r2, sc.r1_hat)
    trace["epsilon"] = eps
    container.write(out / "r2_hat.dmri", r2_hat, "real")
    _dump(out / "trace.json", trace)
    print(f"config_hash {chash}")
    print(f"epsilon {eps:.10g}")
    return EXIT_OK


def cmd_evaluate(values, locs) -> int:
    sc = load_scenario(_require(locs, "scenario", "evaluate"))
    est = container.read(_require(locs, "estimate", "evaluate"), expect="real")
    if est.shape != sc.shape:
        raise UsageError(f"estimate shape {est.shape} does not match scenario {sc.shape}")
    print(f"epsilon {normalized_error(est.astype(np.float64), sc.r2, sc.r1_hat):.10g}")
    return EXIT_OK


def cmd_sweep(values, locs) -> int:
    from .plotting import plot_sweep

    unknown = set(values["methods"]) - set(METHODS)
    if unknown or not values["methods"]:
        raise UsageError(f"methods must be drawn from {', '.join(METHODS)}")
    if not values["pcts"] or any(not 0 < p <= 100 for p in values["pcts"]):
        raise UsageError("pcts must be a nonempty list of values in (0, 100]")
    if not values["seeds"]:
        raise UsageError("seeds must be nonempty")
    jobs = INT(locs["jobs"])
    if jobs < 1:
        raise UsageError("jobs must be at least 1")
    sc = load_scenario(_require(locs, "scenario", "sweep"))
    cfg = _recon_config(values)
    result = run_sweep(sc, values["pcts"], values["methods"], values["seeds"], cfg, jobs)
    out = Path(locs["out"])
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / "sweep.csv")
    plot_sweep(result, out / "sweep.png")
    hashed = {"command": "sweep", **values, "scenario": sc.config_hash()}
    print(f"config_hash {config_hash(hashed)}")
    for method, row in result.medians().items():
        print(method + " " + " ".join(f"{p:g}:{e:.4g}" for p, e in row.items()))
    ok = sum(r.error is None for r in result.rows)
    print(f"{ok} of {len(result.rows)} runs succeeded; wrote {out}")
    return EXIT_OK if ok else EXIT_SOLVER


COMMANDS = {"simulate": cmd_simulate, "mask": cmd_mask, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    command = ns.command
    try:
        values, locs = resolve(command, args)
        return COMMANDS[command](values, locs)
    except (UsageError, container.ContainerError, FileNotFoundError) as exc:
        parser._subparsers._group_actions[0].choices[command].print_usage(sys.stderr)
        print(f"deltamri {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, InversionError) as exc:
        print(f"deltamri {command}: scenario construction failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (SolverError, baselines.TcsError, FloatingPointError) as exc:
        print(f"deltamri {command}: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
