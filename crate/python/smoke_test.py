"""Smoke test for the pvcell extension module.

Build and load the module with either

    maturin develop -m crates/py/Cargo.toml

or

    cargo build --release -p pvcell-py
    cp target/release/libpvcell.so python/pvcell.so   # .dylib on macOS

and then run ``python python/smoke_test.py``.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pvcell  # noqa: E402


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    net = pvcell.NetworkParams(c=4.0)
    close(net.c_constant(), 4.0, 1e-9)
    close(net.w, 10.0, 0.0)

    # Coverage q / (1 + C q) without noise or a bounded attenuation.
    close(net.coverage(0.25), 0.25 / 2.0, 1e-15)
    close(pvcell.coverage_closed(0.25, 4.0), 0.125, 1e-15)

    sol = pvcell.solve(net, 0.1, 1)
    close(sol.q_star, 0.1513878, 1e-7)
    q, thr, delay = pvcell.k1_closed(0.1, 4.0)
    close(sol.q_star, q, 1e-9)
    close(sol.throughput, thr, 1e-9)
    close(sum(sol.buffer_distribution()), 1.0, 1e-12)

    inf = pvcell.solve(net, 0.1, "inf")
    close(inf.q_star, 0.1 / 0.6, 1e-9)
    close(pvcell.critical_p(4.0), 0.2, 1e-15)
    try:
        pvcell.solve(net, 0.25, math.inf)
    except pvcell.InfeasibleError as exc:
        assert abs(exc.args[2] - 0.2) < 1e-12
    else:
        raise AssertionError("expected InfeasibleError")

    try:
        pvcell.NetworkParams(threshold=1.0, c=4.0)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    feasible = pvcell.dimension_buffer(net, 0.09, 0.03, 6.0, k_max=8, grid_points=16)
    assert feasible and feasible == sorted(feasible)

    bounded = pvcell.NetworkParams(kappa=0.05)
    assert bounded.coverage(0.5) > bounded.coverage(1.0)

    small = pvcell.NetworkParams(lambda0=2.0, c=4.0)
    stats = pvcell.simulate(small, 0.1, 1, mode="meanfield_fixed", q=0.3,
                            slots=20000, replications=2, seed=3, window=10.0)
    again = pvcell.simulate(small, 0.1, 1, mode="meanfield_fixed", q=0.3,
                            slots=20000, replications=2, seed=3, window=10.0)
    assert stats == again
    assert stats["conservation_ok"]
    close(sum(stats["pi_hat"]), 1.0, 1e-12)

    print(f"pvcell {pvcell.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
