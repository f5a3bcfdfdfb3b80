"""Low-regret ladder on a configured instance.

Runs the tau sweep, prints the optimality records and the certificate, and
the leading squared singular values of the control-to-trace map, which set
how fast the low-regret controls settle as tau decreases.
"""

import argparse
import logging
import math
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from fracstar.cli import build_instance
from fracstar.config import load_config
from fracstar.oracle_suite import _omega, _unit_controls
from fracstar.regret_control import inner, regret_trace, tau_sweep

ROOT = Path(__file__).resolve().parents[1]


def trace_spectrum(problem, count):
    """Squared singular values of v -> I^{1-gamma}_T phi(0; v) in the natural norms."""
    mass = problem.system.op.mass
    w = _omega(problem)
    T = np.array([regret_trace(problem, e) for e in _unit_controls(problem)])
    G = (T * mass) @ T.T
    sig = sla.eigh(G, np.diag(w), eigvals_only=True)[::-1]
    return sig[:count]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.toml"))
    ap.add_argument("--spectrum", type=int, default=8, help="singular values printed (0 skips)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    cfg = load_config(args.config)
    inst = build_instance(cfg)
    problem = inst.problem()
    bundles, cert = tau_sweep(problem, cfg.regret_config())
    print(f"{'tau':>8}  {'J_tau':>12}  {'J(u,0)-J(0,0)':>14}  {'||u||':>10}  {'trace':>10}  "
          f"{'sqrt(tau) bound':>15}  cg")
    for b in bundles:
        print(f"{b.tau:8.1e}  {b.J_tau:12.5e}  {b.J_u - b.J_00:14.5e}  {b.control_norm:10.4e}  "
              f"{b.trace_norm:10.3e}  {b.trace_bound:15.3e}  {b.cg_iters}")
    unorm = math.sqrt(inner(cert.u, cert.u))
    print("Cauchy gaps:", " ".join(f"{c:.3e}" for c in cert.cauchy), f"(||u|| = {unorm:.4e})")
    ratios = [p / (n * cert.misfit_00) for p, n in zip(cert.pairings, cert.sample_norms)]
    print(f"max normalized pairing {max(ratios):.3e}; stationarity {cert.stationarity:.3e}")
    if args.spectrum:
        print("trace map, squared singular values:",
              " ".join(f"{s:.2e}" for s in trace_spectrum(problem, args.spectrum)))


if __name__ == "__main__":
    main()
