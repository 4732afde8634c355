"""Command-line entry point.

Four workflows over the library: ``design`` (known-survival reference
optimum), ``simulate`` (policy runs with round/metric artifacts), ``sweep``
(improvement heatmap), and ``verify`` (bound and invariant battery).

Every run writes a manifest capturing the fully resolved configuration;
re-running any command with that manifest as --config reproduces the CSV
outputs byte for byte.  Exit codes: 0 success, 1 configuration error,
2 infeasible mechanism, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import apply_overrides, build_runtime, load_config, make_manifest
from .design import optimal_design_known_s
from .errors import ConfigError, Infeasible, MechanismError
from .mechanism import check_bayes_benefit, make_participation_fn
from .simulation import argmax_cell, heatmap_sweep, run_simulation
from .verify import run_battery

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_VERIFY = 3


def _fmt(value: float) -> str:
    """17-significant-digit decimal, enough to round-trip a double."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.17g}"


def _scalar(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_scalar) + "\n"
    )


def _prepare(args) -> tuple[dict, Path]:
    config = load_config(args.config)
    apply_overrides(config, args.set or [])
    if getattr(args, "policy", None):
        config["policy"] = args.policy
    if getattr(args, "rounds", None) is not None:
        config["rounds"] = args.rounds
    if args.seed is not None:
        config["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def cmd_design(args) -> int:
    config, out = _prepare(args)
    runtime = build_runtime(config)
    fine_step = config["design"]["fine_step"]
    choice = optimal_design_known_s(
        runtime.cost,
        runtime.survival,
        runtime.prior,
        runtime.bounds,
        beta=runtime.beta,
        fine_step=None if fine_step is None else float(fine_step),
    )
    residuals = choice.scheme.validate()
    participation = make_participation_fn(runtime.cost, runtime.survival, runtime.bounds)
    residuals["benefit"] = check_bayes_benefit(
        choice.scheme, choice.gamma, participation, runtime.prior
    )
    _write_json(
        out / "design.json",
        {
            "gamma_star": choice.gamma,
            "predicted_cost": choice.predicted_cost,
            "support": [[mu, w] for mu, w in choice.scheme.support],
            "conditionals": [list(row) for row in choice.scheme.conditionals],
            "thresholds": [t for t in choice.threshold_by_mu],
            "residuals": residuals,
        },
    )
    _write_json(out / "manifest.json", make_manifest("design", config, __version__))
    print(f"design: gamma*={_fmt(choice.gamma)} cost={_fmt(choice.predicted_cost)}")
    return EXIT_OK


def _write_rounds_csv(path: Path, records) -> None:
    lines = ["round,gamma,mu,theta,joined,payment,loss"]
    for r in records:
        lines.append(
            ",".join(
                [
                    str(r.round),
                    _fmt(r.gamma),
                    _fmt(r.realized_mu),
                    _fmt(r.client_theta),
                    str(int(r.joined)),
                    _fmt(r.payment),
                    _fmt(r.model_loss),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _write_choices_csv(path: Path, engine) -> None:
    lines = ["round,gamma,mu_l,mu_r,w_l,predicted_cost,converged"]
    if engine is not None:
        for h in engine.choice_history:
            lines.append(
                ",".join(
                    [
                        str(h.round),
                        _fmt(h.gamma),
                        _fmt(h.mu_l),
                        _fmt(h.mu_r),
                        _fmt(h.w_l),
                        _fmt(h.predicted_cost),
                        str(int(h.converged)),
                    ]
                )
            )
    path.write_text("\n".join(lines) + "\n")


def cmd_simulate(args) -> int:
    config, out = _prepare(args)
    runtime = build_runtime(config)
    fixed_gamma = config["fixed_gamma"]
    result = run_simulation(
        runtime.engine_config,
        runtime.population(),
        config["policy"],
        int(config["rounds"]),
        seed=int(config["seed"]),
        toy=runtime.toy,
        fixed_gamma=None if fixed_gamma is None else float(fixed_gamma),
    )
    m = result.metrics
    _write_rounds_csv(out / "rounds.csv", result.records)
    _write_choices_csv(out / "choices.csv", result.engine)
    final_gamma = (
        float(m.gamma_trace[-1])
        if m.gamma_trace.size and not math.isnan(m.gamma_trace[-1])
        else None
    )
    _write_json(
        out / "metrics.json",
        {
            "policy": config["policy"],
            "rounds": int(config["rounds"]),
            "final_gamma": final_gamma,
            "converged": m.converged,
            "converged_gamma": m.converged_gamma,
            "convergence_round": m.convergence_round,
            "cumulative_server_cost": m.cumulative_server_cost,
            "participation_rate": m.participation_rate,
            "final_loss": None if math.isnan(m.final_loss) else m.final_loss,
        },
    )
    if result.engine is not None:
        (out / "checkpoint.json").write_text(result.engine.to_json() + "\n")
    else:
        _write_json(out / "checkpoint.json", {"engine": None})
    _write_json(out / "manifest.json", make_manifest("simulate", config, __version__))
    print(
        f"simulate: policy={config['policy']} rounds={config['rounds']} "
        f"converged={m.converged} cost={_fmt(m.cumulative_server_cost)}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, out = _prepare(args)
    runtime = build_runtime(config)
    mu_grid, gamma_grid = runtime.sweep_grids()
    hm = heatmap_sweep(
        mu_grid, gamma_grid, runtime.cost, runtime.survival,
        runtime.prior, runtime.bounds,
    )
    lines = ["mu,gamma,delta_theta_hat,delta_cost"]
    for i, gamma in enumerate(gamma_grid):
        for j, mu in enumerate(mu_grid):
            dt = hm.delta_theta[i, j]
            dc = hm.delta_cost[i, j]
            lines.append(
                ",".join(
                    [
                        _fmt(float(mu)),
                        _fmt(float(gamma)),
                        "" if math.isnan(dt) else _fmt(float(dt)),
                        "" if math.isnan(dc) else _fmt(float(dc)),
                    ]
                )
            )
    (out / "heatmap.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "manifest.json", make_manifest("sweep", config, __version__))
    for name, surface in (("delta_theta_hat", hm.delta_theta), ("delta_cost", hm.delta_cost)):
        cell = argmax_cell(surface)
        if cell is None:
            print(f"sweep: {name} has no defined cells")
        else:
            i, j = cell
            print(
                f"sweep: argmax {name} at mu={_fmt(float(mu_grid[j]))} "
                f"gamma={_fmt(float(gamma_grid[i]))} value={_fmt(float(surface[i, j]))}"
            )
    return EXIT_OK


def cmd_verify(args) -> int:
    config, out = _prepare(args)
    runtime = build_runtime(config)
    checks = run_battery(runtime)
    payload = {
        "checks": [
            {"name": name, "passed": passed, "details": details}
            for name, passed, details in checks
        ],
        "passed": all(passed for _, passed, _ in checks),
    }
    _write_json(out / "verify.json", payload)
    _write_json(out / "manifest.json", make_manifest("verify", config, __version__))
    for name, passed, _ in checks:
        print(f"verify: {'PASS' if passed else 'FAIL'} {name}")
    return EXIT_OK if payload["passed"] else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="daringfed",
        description="Signaling plus bandit pricing for online federated learning",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("design", cmd_design),
        ("simulate", cmd_simulate),
        ("sweep", cmd_sweep),
        ("verify", cmd_verify),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config or manifest")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config value (repeatable, dotted paths)",
        )
        if name == "simulate":
            p.add_argument(
                "--policy", choices=("DF", "DF-B", "DF-D", "DF-BD"), default=None
            )
            p.add_argument("--rounds", type=int, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, MechanismError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
