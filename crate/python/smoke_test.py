"""Quick checks of the compiled `wvar` module.

Build it first:

    cargo build --release -p wvar-py --features extension-module
    cp target/release/libwvar.so python/wvar.so
"""

import itertools
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import wvar


def circle(a, b):
    r = abs(a - b) % 1.0
    return min(r, 1.0 - r)


def brute_w2(xs, ys):
    best = min(sum(circle(x, ys[j]) ** 2 for x, j in zip(xs, perm)) for perm in itertools.permutations(range(len(ys))))
    return math.sqrt(best / len(xs))


def main():
    xs = [0.05, 0.3, 0.62, 0.9]
    ys = [0.11, 0.47, 0.55, 0.97]
    w = [0.25] * 4
    got = wvar.wasserstein([[x] for x in xs], w, [[y] for y in ys], w, 2.0)
    want = brute_w2(xs, ys)
    assert abs(got - want) < 1e-12, (got, want)

    coupling, dist = wvar.optimal_coupling([[x] for x in xs], w, [[y] for y in ys], w)
    assert abs(dist - got) < 1e-15
    assert all(abs(sum(row) - 0.25) < 1e-12 for row in coupling)

    rep = wvar.derivative_check("potential2", "map", [[x] for x in xs], w, seed=3)
    assert rep["admissible"] and rep["is_derivative"], rep

    sol = wvar.simulate("decoupled", [0.5], [[x] for x in xs], w, [0.0], t_end=0.5, steps=50)
    assert len(sol["times"]) == 51
    assert len(sol["followers"]) == 4

    v, control = wvar.value("zero")
    assert v >= 0.0 and control is not None

    violations, slack = wvar.hamiltonian_comparison("drift", "attract", probes=20, seed=1)
    assert violations == 0, slack

    try:
        wvar.value("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown instance accepted")

    print(f"wvar {wvar.__version__}: ok (W2 = {got:.6f}, value(zero) = {v:.6f})")


if __name__ == "__main__":
    main()
