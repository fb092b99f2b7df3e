"""Command-line entry points for the rod imaging inversion.

Subcommands: ``forward`` renders a synthetic scene from the configured true
parameters and writes the image chain; ``invert`` runs the full-data
ensemble flow against synthetic or ingested image data; ``invert-sub`` runs
the subsampled flow with the switching index process; ``diagnose`` fits
rates to trajectory files and compares runs.

Every run writes ``manifest.json`` holding the fully resolved configuration
and the package version. A manifest is itself a valid ``--config`` file, so
a run can be reproduced bit-exactly from its own output directory.

Exit codes: 0 success, 2 configuration error (argparse usage errors share
it), 3 I/O error, 4 solver or forward-evaluation failure, 5 parse error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import ensemble_spread
from .errors import (
    ConfigurationError,
    EkirodError,
    EvaluationError,
    InputOutputError,
    ParseError,
    SolverError,
)
from .flows import FlowConfig, Trajectory, integrate
from .imaging import (
    CameraConfig,
    distance_to_grey,
    distance_transform,
    ingest,
    render,
    segment,
    threshold,
    to_grey,
    write_pgm,
    write_ppm,
)
from .problem import InverseProblem, NoiseModel, ParameterScaling, PriorModel
from .rod import RodConfig, solve_rod
from .subsampling import LearningRateSchedule, integrate_subsampled
from .diagnostics import compare_runs, fit_power_law

_EXIT_CONFIG = 2
_EXIT_IO = 3
_EXIT_SOLVER = 4
_EXIT_PARSE = 5

# Streams of the counter-based generator, keyed (seed, stream).
_STREAM_INIT = 0
_STREAM_SWITCHING = 1

DEFAULT_CONFIG = {
    "seed": 0,
    "rod": {
        "length": 0.24,
        "radius": 0.012,
        "n_elements": 8,
        "density": 1200.0,
        "youngs_modulus": 2.0e6,
        "poisson_ratio": 0.35,
        "damping": 22.0,
        "t_end": 1.0,
        # Opposing loads: gravity sags the span while the tip force lifts
        # the end into an S-curve, whose inflection point moves with the
        # weight-to-force ratio. That separates density from stiffness in a
        # single image.
        "gravity": [0.0, -9.81, 0.0],
        "tip_force": [0.0, 0.8, 0.0],
    },
    "camera": {
        "width": 256,
        "height": 192,
        "scale": 800.0,
        "origin": [-0.03, 0.10],
        "stroke_radius": 0.012,
    },
    "imaging": {
        "sigma": 128,
        "metric": "euclidean",
    },
    # Effective observation scale in pixels. Distance-map errors are highly
    # correlated across pixels, so the per-pixel scale is set well above the
    # pointwise error; it also fixes the flow's time parametrization.
    "noise": {
        "gamma": 256.0,
    },
    "truth": {
        "density": 1200.0,
        "youngs_modulus": 2.0e6,
    },
    "data": {
        "path": None,
    },
    "scaling": {
        "offset": [1000.0, 1.5e6],
        "scale": [500.0, 1.0e6],
    },
    # Weak anchor: the synthetic misfit valley is shallow along a joint
    # (density, stiffness) rescaling, and a strong pull toward the prior
    # center would bias the estimate along it.
    "prior": {
        "alpha": 0.05,
        "weights": [1.0, 1.0],
    },
    "init": {
        "n_ens": 3,
        "center": [0.0, 0.0],
        "spread": [1.0, 1.0],
    },
    # Tolerances are looser than the library defaults: image-scale runs
    # need step counts in the hundreds, not tens of thousands.
    "flow": {
        "variant": "regularised",
        "rho": 0.0,
        "t_end": 20.0,
        "rel_tol": 1e-3,
        "abs_tol": 1e-6,
        "min_step": 1e-12,
        "max_step": None,
        "initial_step": 1e-6,
        "samples_per_decade": 8,
        "first_sample": 1e-3,
        "failure_policy": "regulariser",
    },
    "subsampling": {
        "n_subsets": 5,
        "mode": "horizontal_bands",
        "slope": 10.0,
        "intercept": 10.0,
        "t_cutoff": 10.0,
        "n_post_switches": 10,
    },
}


def _check_keys(user: dict, defaults: dict, prefix: str = "") -> None:
    for key, value in user.items():
        if key not in defaults:
            raise ConfigurationError(
                f"unknown configuration key {prefix + key!r}"
            )
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(
                    f"configuration section {prefix + key!r} must be an object"
                )
            _check_keys(value, defaults[key], prefix=prefix + key + ".")


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path: str | None) -> dict:
    """Defaults, deep-merged with the given JSON file.

    A manifest written by a previous run (an object with a ``config`` key)
    is accepted directly and unwrapped.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputOutputError(f"cannot read config file {path}: {exc}") from exc
    try:
        user = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    if "config" in user and "version" in user:
        user = user["config"]
    _check_keys(user, DEFAULT_CONFIG)
    return _deep_update(cfg, user)


def _rod_config(cfg: dict) -> RodConfig:
    r = cfg["rod"]
    return RodConfig(
        rest_length=float(r["length"]),
        radius=float(r["radius"]),
        n_elements=int(r["n_elements"]),
        density=float(r["density"]),
        youngs_modulus=float(r["youngs_modulus"]),
        poisson_ratio=float(r["poisson_ratio"]),
        gravity=tuple(float(x) for x in r["gravity"]),
        tip_force=tuple(float(x) for x in r["tip_force"]),
        damping=float(r["damping"]),
        t_end=float(r["t_end"]),
    )


def _camera_config(cfg: dict) -> CameraConfig:
    c = cfg["camera"]
    return CameraConfig(
        width=int(c["width"]),
        height=int(c["height"]),
        scale=float(c["scale"]),
        origin=(float(c["origin"][0]), float(c["origin"][1])),
        stroke_radius=float(c["stroke_radius"]),
    )


def _scaling(cfg: dict) -> ParameterScaling:
    s = cfg["scaling"]
    return ParameterScaling(
        offset=np.asarray(s["offset"], dtype=float),
        scale=np.asarray(s["scale"], dtype=float),
    )


def _prior(cfg: dict) -> PriorModel:
    p = cfg["prior"]
    return PriorModel(
        weight_matrix=np.diag(np.asarray(p["weights"], dtype=float)),
        alpha=float(p["alpha"]),
    )


def _flow_config(cfg: dict) -> FlowConfig:
    f = cfg["flow"]
    return FlowConfig(
        t_end=float(f["t_end"]),
        variant=str(f["variant"]),
        rho=float(f["rho"]),
        rel_tol=float(f["rel_tol"]),
        abs_tol=float(f["abs_tol"]),
        min_step=float(f["min_step"]),
        max_step=math.inf if f["max_step"] is None else float(f["max_step"]),
        initial_step=(
            None if f["initial_step"] is None else float(f["initial_step"])
        ),
        samples_per_decade=int(f["samples_per_decade"]),
        first_sample=float(f["first_sample"]),
        failure_policy=str(f["failure_policy"]),
    )


def _schedule(cfg: dict) -> LearningRateSchedule:
    s = cfg["subsampling"]
    return LearningRateSchedule(
        slope=float(s["slope"]),
        intercept=float(s["intercept"]),
        t_cutoff=float(s["t_cutoff"]),
        n_post_switches=int(s["n_post_switches"]),
    )


class _MemoizedForward:
    """LRU cache around the rod imaging chain, keyed on exact parameter bytes.

    The integrator re-evaluates the drift at states it has already visited
    (the first stage of the next attempt, diagnostic sampling), so a small
    cache removes most repeated rod solves. Deterministic: a hit returns the
    stored array, a miss recomputes the same pure function.
    """

    def __init__(self, fn, max_entries: int = 64):
        self.fn = fn
        self.max_entries = max_entries
        self._store: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __call__(self, u: np.ndarray) -> np.ndarray:
        key = np.ascontiguousarray(u, dtype=np.float64).tobytes()
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            self.hits += 1
            return hit
        value = self.fn(u)
        self.misses += 1
        self._store[key] = value
        if len(self._store) > self.max_entries:
            self._store.popitem(last=False)
        return value


def _build_forward(cfg: dict):
    """The parameter-to-distance-vector map and its output dimension."""
    rod_cfg = _rod_config(cfg)
    camera = _camera_config(cfg)
    scaling = _scaling(cfg)
    sigma = int(cfg["imaging"]["sigma"])
    metric = str(cfg["imaging"]["metric"])

    def forward(u: np.ndarray) -> np.ndarray:
        physical = scaling.to_physical(u)
        state = solve_rod(physical, rod_cfg)
        frame = render(state.positions, camera)
        return segment(frame, sigma, metric).vector()

    dim_output = camera.width * camera.height
    return _MemoizedForward(forward), dim_output


def _synthetic_observation(cfg: dict) -> np.ndarray:
    rod_cfg = _rod_config(cfg)
    camera = _camera_config(cfg)
    truth = np.array(
        [cfg["truth"]["density"], cfg["truth"]["youngs_modulus"]], dtype=float
    )
    state = solve_rod(truth, rod_cfg)
    frame = render(state.positions, camera)
    return segment(
        frame, int(cfg["imaging"]["sigma"]), str(cfg["imaging"]["metric"])
    ).vector()


def _observation(cfg: dict) -> np.ndarray:
    path = cfg["data"]["path"]
    if path is None:
        return _synthetic_observation(cfg)
    camera = _camera_config(cfg)
    dmap = ingest(
        path,
        int(cfg["imaging"]["sigma"]),
        str(cfg["imaging"]["metric"]),
        expected_shape=(camera.height, camera.width),
    )
    return dmap.vector()


def _build_problem(cfg: dict) -> InverseProblem:
    forward, dim_output = _build_forward(cfg)
    data = _observation(cfg)
    gamma = float(cfg["noise"]["gamma"])
    if gamma <= 0.0:
        raise ConfigurationError(f"noise.gamma must be positive, got {gamma}")
    return InverseProblem(
        forward=forward,
        data=data,
        noise=NoiseModel.from_diagonal(np.full(dim_output, gamma * gamma)),
        prior=_prior(cfg),
        dim_input=2,
        dim_output=dim_output,
    )


def _initial_ensemble(cfg: dict, seed: int) -> np.ndarray:
    init = cfg["init"]
    n_ens = int(init["n_ens"])
    if n_ens < 2:
        raise ConfigurationError(f"init.n_ens must be >= 2, got {n_ens}")
    center = np.asarray(init["center"], dtype=float)
    spread = np.asarray(init["spread"], dtype=float)
    if center.shape != (2,) or spread.shape != (2,):
        raise ConfigurationError("init.center and init.spread must have length 2")
    if np.any(spread <= 0.0):
        raise ConfigurationError("init.spread entries must be positive")
    rng = np.random.default_rng(np.random.Philox(key=[seed, _STREAM_INIT]))
    scaling = _scaling(cfg)
    particles = center + spread * rng.standard_normal((n_ens, 2))
    # Truncate the draw to the rod's feasible region: redraw any particle
    # whose physical density or stiffness comes out nonpositive.
    for _ in range(100):
        bad = np.any(scaling.to_physical(particles) <= 0.0, axis=1)
        if not bad.any():
            return particles
        particles[bad] = center + spread * rng.standard_normal((int(bad.sum()), 2))
    raise ConfigurationError(
        "initial ensemble keeps sampling nonpositive physical parameters; "
        "check scaling.offset, scaling.scale, and init.spread"
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputOutputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, payload: dict) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc}") from exc


def _write_manifest(out: Path, command: str, cfg: dict) -> None:
    _write_json(
        out / "manifest.json",
        {"version": __version__, "command": command, "config": cfg},
    )


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "metric", None) is not None:
        cfg["imaging"]["metric"] = args.metric
    if getattr(args, "sigma", None) is not None:
        cfg["imaging"]["sigma"] = int(args.sigma)
    return cfg


def _write_trajectory_outputs(
    out: Path, traj: Trajectory, cfg: dict, command: str
) -> dict:
    scaling = _scaling(cfg)
    mean = traj.final_mean()
    physical = scaling.to_physical(mean)
    final = traj.states[-1]

    try:
        traj.to_csv(out / "trajectory.csv")
    except OSError as exc:
        raise InputOutputError(f"cannot write trajectory: {exc}") from exc

    with open(out / "ensemble_final.csv", "w") as fh:
        fh.write("particle,u_0,u_1,density,youngs_modulus\n")
        for j in range(final.shape[0]):
            phys = scaling.to_physical(final[j])
            fh.write(
                f"{j},{final[j, 0]:.17g},{final[j, 1]:.17g},"
                f"{phys[0]:.17g},{phys[1]:.17g}\n"
            )

    estimate = {
        "density": float(physical[0]),
        "youngs_modulus": float(physical[1]),
        "internal_mean": [float(x) for x in mean],
        "final_residual": float(traj.mean_residuals[-1]),
        "final_spread": float(ensemble_spread(final)),
        "t_end": float(traj.times[-1]),
    }
    _write_json(out / "estimate.json", estimate)

    stats = {
        "n_rhs_evals": traj.n_rhs_evals,
        "n_diag_evals": traj.n_diag_evals,
        "n_steps_accepted": traj.n_steps_accepted,
        "n_steps_attempted": traj.n_steps_attempted,
        "n_forward_failures": traj.n_forward_failures,
        "n_switches": None if traj.switches is None else len(traj.switches),
    }
    _write_json(out / "stats.json", stats)

    if traj.switches is not None:
        with open(out / "switch_log.csv", "w") as fh:
            fh.write("t,subset_index\n")
            for t, idx in traj.switches:
                fh.write(f"{t:.17g},{idx}\n")

    _write_manifest(out, command, cfg)
    return estimate


def cmd_forward(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    rod_cfg = _rod_config(cfg)
    camera = _camera_config(cfg)
    sigma = int(cfg["imaging"]["sigma"])
    metric = str(cfg["imaging"]["metric"])
    truth = np.array(
        [cfg["truth"]["density"], cfg["truth"]["youngs_modulus"]], dtype=float
    )

    state = solve_rod(truth, rod_cfg)
    frame = render(state.positions, camera)
    binary = threshold(to_grey(frame), sigma)
    dmap = distance_transform(binary, metric)

    try:
        write_ppm(out / "render.ppm", frame)
        write_pgm(out / "binary.pgm", binary)
        write_pgm(out / "distance.pgm", distance_to_grey(dmap))
        with open(out / "distance.csv", "w") as fh:
            fh.write("row,col,distance\n")
            values = dmap.values
            for row in range(values.shape[0]):
                for col in range(values.shape[1]):
                    fh.write(f"{row},{col},{values[row, col]:.17g}\n")
    except OSError as exc:
        raise InputOutputError(f"cannot write outputs to {out}: {exc}") from exc

    _write_manifest(out, "forward", cfg)
    if frame.clipped:
        print("warning: rod stroke leaves the camera frame", file=sys.stderr)
    print(f"wrote render.ppm binary.pgm distance.pgm distance.csv to {out}")
    return 0


def cmd_invert(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    problem = _build_problem(cfg)
    u0 = _initial_ensemble(cfg, int(cfg["seed"]))
    flow_cfg = _flow_config(cfg)
    traj = integrate(u0, problem, flow_cfg, workers=args.workers)
    estimate = _write_trajectory_outputs(out, traj, cfg, "invert")
    print(
        f"estimate: density={estimate['density']:.6g} "
        f"youngs_modulus={estimate['youngs_modulus']:.6g} "
        f"residual={estimate['final_residual']:.6g}"
    )
    return 0


def cmd_invert_sub(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    sub = cfg["subsampling"]
    n_subsets = int(sub["n_subsets"])
    if n_subsets < 2:
        raise ConfigurationError(
            f"subsampling.n_subsets must be >= 2, got {n_subsets}"
        )
    problem = _build_problem(cfg)
    u0 = _initial_ensemble(cfg, int(cfg["seed"]))
    flow_cfg = _flow_config(cfg)
    camera = _camera_config(cfg)
    rng = np.random.default_rng(
        np.random.Philox(key=[int(cfg["seed"]), _STREAM_SWITCHING])
    )
    traj = integrate_subsampled(
        u0,
        problem,
        flow_cfg,
        _schedule(cfg),
        n_subsets,
        rng,
        mode=str(sub["mode"]),
        image_shape=(camera.height, camera.width),
        workers=args.workers,
    )
    estimate = _write_trajectory_outputs(out, traj, cfg, "invert-sub")
    print(
        f"estimate: density={estimate['density']:.6g} "
        f"youngs_modulus={estimate['youngs_modulus']:.6g} "
        f"residual={estimate['final_residual']:.6g} "
        f"switches={len(traj.switches)}"
    )
    return 0


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    trajectories = []
    for path in args.trajectories:
        if not Path(path).exists():
            raise InputOutputError(f"trajectory file not found: {path}")
        trajectories.append(Trajectory.from_csv(path))

    lines = []
    fit_rows = []
    try:
        for k, (path, traj) in enumerate(zip(args.trajectories, trajectories)):
            fit = fit_power_law(traj.times, traj.mean_residuals, t_min=args.t_min)
            spread_fit = fit_power_law(traj.times, traj.spreads, t_min=args.t_min)
            fit_rows.append((path, fit, spread_fit))
            lines.append(
                f"{path}: residual ~ t^{fit.exponent:.3f}, "
                f"spread ~ t^{spread_fit.exponent:.3f} ({fit.n_points} samples)"
            )
            # Plot-ready two-column dumps, one pair per input run.
            for name, values in (
                ("residual", traj.mean_residuals),
                ("spread", traj.spreads),
            ):
                with open(out / f"run{k}_{name}.csv", "w") as fh:
                    fh.write("t,value\n")
                    for t, v in zip(traj.times, values):
                        fh.write(f"{t:.17g},{v:.17g}\n")

        with open(out / "fits.csv", "w") as fh:
            fh.write(
                "path,residual_exponent,residual_amplitude,"
                "spread_exponent,spread_amplitude,n_points\n"
            )
            for path, fit, spread_fit in fit_rows:
                fh.write(
                    f"{path},{fit.exponent:.17g},{fit.amplitude:.17g},"
                    f"{spread_fit.exponent:.17g},{spread_fit.amplitude:.17g},"
                    f"{fit.n_points}\n"
                )

        if len(trajectories) == 2:
            cmp = compare_runs(trajectories[0], trajectories[1], t_min=args.t_min)
            lines.append(
                f"terminal residual ratio: {cmp.terminal_ratio:.4f}, "
                f"max log10 gap: {cmp.max_log10_gap:.4f} on window "
                f"[{cmp.window[0]:.6g}, {cmp.window[1]:.6g}]"
            )

        with open(out / "summary.txt", "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise InputOutputError(f"cannot write outputs to {out}: {exc}") from exc

    _write_json(
        out / "manifest.json",
        {
            "version": __version__,
            "command": "diagnose",
            "inputs": [str(p) for p in args.trajectories],
            "t_min": args.t_min,
        },
    )
    for line in lines:
        print(line)
    print(f"wrote summary.txt fits.csv to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ekirod",
        description="Ensemble Kalman inversion of rod imaging data.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_model_flags: bool = True) -> None:
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        if with_model_flags:
            p.add_argument("--seed", type=int, default=None)
            p.add_argument(
                "--metric", choices=("euclidean", "manhattan"), default=None
            )
            p.add_argument("--sigma", type=int, default=None)

    p_forward = sub.add_parser(
        "forward", help="render the configured true parameters"
    )
    common(p_forward)
    p_forward.set_defaults(fn=cmd_forward)

    p_invert = sub.add_parser("invert", help="full-data ensemble inversion")
    common(p_invert)
    p_invert.add_argument("--workers", type=int, default=1)
    p_invert.set_defaults(fn=cmd_invert)

    p_sub = sub.add_parser(
        "invert-sub", help="subsampled inversion with index switching"
    )
    common(p_sub)
    p_sub.add_argument("--workers", type=int, default=1)
    p_sub.set_defaults(fn=cmd_invert_sub)

    p_diag = sub.add_parser("diagnose", help="rate fits and run comparison")
    p_diag.add_argument("trajectories", nargs="+", help="trajectory CSV files")
    p_diag.add_argument("--out", default="out", help="output directory")
    p_diag.add_argument("--t-min", type=float, default=0.0, dest="t_min")
    p_diag.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return _EXIT_PARSE
    except InputOutputError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return _EXIT_IO
    except (SolverError, EvaluationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return _EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return _EXIT_IO
    except EkirodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
