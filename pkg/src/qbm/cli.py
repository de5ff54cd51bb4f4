"""Command-line front end: qbm run | validate | describe.

Exit codes: 0 success, 2 config error, 3 numerical breakdown, 4 cost-guard
refusal.  QBM_THREADS caps the BLAS/FFT thread pools (set before numpy
loads, so this module keeps its imports light).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_DESCRIPTIONS = {
    "gaussian_vs_grid": "Evolve a Gaussian state with both the parameter ODEs and the "
                        "grid solver; emit traj.csv with moments and the HS gap per sample.",
    "equilibrium": "Run a damped system to its thermal fixed point in both solvers; "
                   "emit equilibrium.csv and relative errors against equipartition.",
    "hbar_sweep": "Fixed-time HS gap between grid and Gaussian evolution across an "
                  "hbar list; emit sweep.csv and the fitted scaling exponent.",
    "projector_quality": "Build a cell quasiprojector; emit trace, idempotency defect, "
                         "margin epsilon, and trace-norm distances across smearings.",
    "projector_transport": "Heisenberg-evolve a projector and compare against the "
                           "classically transported reference (with decoy cells).",
    "histories_two_time": "Two-time decoherence functional for a cell and its "
                          "classical image; emit dtable.csv and consistency summary.",
    "histories_n_time": "n-time chain version of the decoherence functional.",
    "area_growth": "Wigner-area growth A(t) of the no-linear-growth family against "
                   "the quartic short-time law.",
}


def _set_thread_caps():
    cap = os.environ.get("QBM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _example_config(scenario: str) -> dict:
    base = {
        "scenario": scenario,
        "params": {"mass": 1.0, "gamma": 0.1, "kT": 1.0, "hbar": 1.0},
    }
    if scenario in ("gaussian_vs_grid", "equilibrium", "hbar_sweep",
                    "histories_two_time", "histories_n_time"):
        base["potential"] = {"family": "harmonic", "m_omega2": 1.0}
        base["initial_state"] = {"sigma": 2.0, "f": 0.5, "r": 0.0, "q": 1.0, "p": 0.0}
        base["grid"] = {"n_u": 256, "n_s": 256, "l_u": 12.0, "l_s": 24.0}
        base["time"] = {"t_final": 10.0, "dt": 0.0025}
    if scenario == "hbar_sweep":
        base["potential"] = {"family": "quartic", "m_omega2": 1.0, "eta4": 0.1}
        base["hbar_values"] = [0.2, 0.1, 0.05]
        base["time"] = {"t_final": 0.5, "dt": 0.0005}
    if scenario in ("projector_quality", "projector_transport"):
        base["grid"] = {"n_u": 512, "n_s": 512, "l_u": 16.0, "l_s": 32.0}
        base["cell"] = {"rect": [-10.0, 10.0, -10.0, 10.0]}
        base["smearing"] = {"sigma": 2.0, "f": 0.5, "r": 0.0}
    if scenario == "projector_transport":
        base["potential"] = {"family": "harmonic", "m_omega2": 1.0}
        base["transport_time"] = 2.0
        base["time"] = {"t_final": 2.0, "dt": 0.01}
    if scenario in ("histories_two_time", "histories_n_time"):
        base["cell"] = {"rect": [-10.0, 10.0, -10.0, 10.0]}
        base["smearing"] = {"sigma": 2.0, "f": 0.5}
        base["initial_state"] = {"sigma": 2.0, "f": 0.5, "q": 2.0, "p": 1.0}
        base["grid"] = {"n_u": 512, "n_s": 512, "l_u": 16.0, "l_s": 32.0}
        base["history_times"] = [0.5, 1.5] if scenario == "histories_two_time" \
            else [0.5, 1.0, 1.5]
        base["time"] = {"t_final": 1.5, "dt": 0.01}
    if scenario == "area_growth":
        base["time"] = {"t_final": 0.5, "dt": 0.0005, "sample_every": 10}
    return base


def main(argv=None) -> int:
    _set_thread_caps()
    parser = argparse.ArgumentParser(
        prog="qbm",
        description="Quantum Brownian motion: Gaussian dynamics, grid oracle, "
                    "quasiprojectors, and phase-space histories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)

    p_val = sub.add_parser("validate", help="validate a JSON config")
    p_val.add_argument("--config", required=True)

    p_desc = sub.add_parser("describe", help="describe a scenario tag")
    p_desc.add_argument("--scenario", required=True)

    args = parser.parse_args(argv)

    if args.command == "describe":
        from .experiments import SCENARIOS

        if args.scenario not in SCENARIOS:
            print(f"unknown scenario {args.scenario!r}; choose from: "
                  f"{', '.join(SCENARIOS)}", file=sys.stderr)
            return 2
        print(f"{args.scenario}: {_DESCRIPTIONS[args.scenario]}")
        print("\nexample config:")
        print(json.dumps(_example_config(args.scenario), indent=2))
        return 0

    import jsonschema

    from .core import ConstraintError
    from .experiments import run_experiment, validate_config
    from .gaussian_dynamics import BreakdownError
    from .grid_solver import AliasingError
    from .histories import CostGuardError

    try:
        config = _load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        try:
            validate_config(config)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            print(f"config error at {path}: {exc.message}", file=sys.stderr)
            return 2
        except ConstraintError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        print("config ok")
        return 0

    try:
        summary = run_experiment(config, args.out)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        print(f"config error at {path}: {exc.message}", file=sys.stderr)
        return 2
    except CostGuardError as exc:
        print(f"cost guard: {exc}", file=sys.stderr)
        return 4
    except (BreakdownError, AliasingError) as exc:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "breakdown.txt"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n")
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return 3
    except ConstraintError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for key, val in summary.items():
        print(f"{key} = {val}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
