"""Smoke test for the hjbqvi Python module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math

import hjbqvi


def main():
    ok, bad = hjbqvi.is_wcdd([[2.0, -1.0], [-1.0, 1.0]])
    assert ok and bad == []
    ok, bad = hjbqvi.is_wcdd([[1.0, -2.0], [0.0, 1.0]])
    assert not ok
    assert hjbqvi.is_monotone([[1.0, -2.0], [0.0, 1.0]])

    text = """
    states 2
    rho 0.1
    state 0
    w 1 0 -1.0
    d 0
    state 1
    w 0 1 -5.0
    z 1 0 -0.5
    d 0 1
    """
    v, psi, iterations, certified = hjbqvi.solve_mdp(text)
    assert psi == [0, 1], psi
    assert math.isclose(v[0], -11.0, rel_tol=1e-9), v
    assert math.isclose(v[1], -11.5, rel_tol=1e-9), v
    assert certified and iterations >= 1

    run = hjbqvi.run("fex", "penalized", level=0)
    assert run.all_sdd
    assert len(run.u0) == len(run.coords) == 32
    assert -0.7 < run.value < -0.6, run
    print(run)

    rows = hjbqvi.convergence("fex", "semi-lagrangian", 3)
    assert [r[0] for r in rows] == ["1", "1/2", "1/4"]
    assert rows[0][4] is None and rows[2][4] is not None

    passed, summary = hjbqvi.check("wcdd", seed=3, cases=200)
    assert passed, summary
    print(summary)

    try:
        hjbqvi.run("fex", "direct", params="no_such_key = 1")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown parameter accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
