"""Smoke test for the dgsi_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import dgsi_py


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    perms = dgsi_py.select_permutations(3)
    check(perms == [[1, 2, 3], [2, 3, 1], [3, 1, 2]], "permutations of a block of 3")
    check(dgsi_py.r_min([3, 2]) == 6, "r_min for blocks of 3 and 2")

    check(dgsi_py.parse_expression("x1 + x2*x3") == "x1 + x2*x3", "expression round trip")
    check(abs(dgsi_py.evaluate_expression("abs(4*x1 - 2)", [0.25]) - 1.0) < 1e-15, "expression evaluation")
    try:
        dgsi_py.parse_expression("x1 + ")
        check(False, "syntax error raised")
    except ValueError as e:
        check("column" in str(e), "syntax error reports column")

    gauss = json.dumps({
        "type": "gaussian_copula",
        "correlation": [[1, 0.6], [0.6, 1]],
        "margins": [{"family": "normal", "mu": 0, "sigma": 1}] * 2,
    })
    dm = dgsi_py.DependencyModel(gauss, [0, 1])
    rows = dm.sample(20000, 3)
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    cov = sum((a - mx) * (b - my) for a, b in zip(xs, ys)) / len(xs)
    vx = sum((a - mx) ** 2 for a in xs) / len(xs)
    vy = sum((b - my) ** 2 for b in ys) / len(ys)
    check(abs(cov / math.sqrt(vx * vy) - 0.6) < 0.03, "Gaussian dependency model correlation")

    errs = dgsi_py.validate_config(json.dumps({"schema_version": 1, "model": {"preset": "nope"}}))
    check(len(errs) >= 2, f"invalid config collects errors ({len(errs)})")

    ref = dgsi_py.analytic_indices("linear_gaussian")
    exact = {tuple(u): (f, t) for u, f, t in ref["exact"]}
    check(abs(exact[(1,)][0] - 0.578) < 1e-12, "closed-form index of X1")

    config = json.dumps({
        "schema_version": 1,
        "model": {"preset": "linear_gaussian"},
        "subsets": "all",
        "sampling": {"m": 20000, "generator": "sobol", "seed": 1},
    })
    with tempfile.TemporaryDirectory() as tmp:
        report = dgsi_py.run_config(config, out=tmp)
        check((Path(tmp) / "indices.csv").exists(), "result files written")
    e = report.entry([1])
    check(abs(e.first_type1.estimate - 0.578) < 4 * e.first_type1.stderr, f"estimated dS1 {e.first_type1!r}")
    check(len(report) == 7, "all seven subsets reported")
    audit = json.loads(report.audit_json())
    check(audit["r_min"] == 3 and audit["representations_built"] == 3, "audit representation counts")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
