"""Smoke test for the markov_admm extension module.

Builds the extension with cargo, stages it as ``markov_admm.so`` in a temp
directory and exercises the bindings. Run from anywhere:

    python3 python/smoke_test.py
"""

import importlib
import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(stage: Path):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "markov-admm-py"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libmarkov_admm_py.so"
    shutil.copy(lib, stage / "markov_admm.so")
    sys.path.insert(0, str(stage))
    return importlib.import_module("markov_admm")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        ma = load_module(Path(tmp))

        g = ma.Graph.path(10)
        assert g.num_edges == 9 and g.is_tree()
        assert g.neighbors(0) == [1]

        chain = ma.MarkovChain.random_walk(10, 0.1)
        pi = chain.stationary
        assert abs(sum(pi) - 1.0) < 1e-12
        b, gamma = chain.mixing()
        assert 0.0 < gamma < 1.0 and b > 0.0

        formula = ma.stationary_formula(10, 0.1)
        print(f"pi numeric min/max {min(pi):.4f}/{max(pi):.4f}, "
              f"formula min/max {min(formula):.4f}/{max(formula):.4f}")

        problem = ma.Problem.estimation(g, [1.0] * 10, 1.0, 2024)
        kkt = problem.kkt()
        assert max(kkt["kkt_residuals"]) < 1e-9
        mean = problem.centralized_solve()
        assert max(abs(a - b) for a, b in zip(mean, kkt["x_star"])) < 1e-12

        sync = ma.run(problem, engine="sync", iterations=500)
        assert sync["g_err"][-1] < 1e-6 * sync["g_err"][0]
        assert all(b <= a + 1e-12 for a, b in zip(sync["g_err"], sync["g_err"][1:]))

        walk = ma.run(problem, engine="async", iterations=2000, chain=chain, seed=3)
        assert len(walk["path"]) == 2000 and walk["path"][0] == 0
        assert walk["x_err"][-1] < walk["x_err"][0]
        fit = ma.fit_linear_rate(walk["g_err"], 200)
        print(f"async fitted rate {fit['rate']:.5f} (r2 {fit['r_squared']:.4f})")

        c = ma.constants(problem, chain)
        assert c["certifiable"] is False and c["reason"]

        k5 = ma.Graph.complete(5)
        uniform = ma.MarkovChain.from_matrix([[0.2] * 5] * 5, k5)
        quad = ma.Problem.quadratic(k5, [[float(i)] for i in range(5)])
        c5 = ma.constants(quad, uniform)
        assert c5["certifiable"] is True
        print(f"complete graph: c={c5['c']:.4f}, k'={c5['k_prime']}, alpha={c5['alpha_kprime']:.4f}")

        config = {
            "graph": {"generator": "path", "num_nodes": 5},
            "chain": {"type": "random_walk", "alpha": 0.2},
            "problem": {"kind": "estimation", "dim": 3},
            "engines": ["sync", "async"],
            "iterations": 200,
            "trials": 4,
        }
        out = Path(tmp) / "out"
        bundle = ma.run_experiment(json.dumps(config), str(out))
        assert [e["engine"] for e in bundle["engines"]] == ["sync", "async"]
        assert len(bundle["engines"][1]["metrics"]["g_err"]["mean"]) == 201
        lines = (out / "metrics_async.csv").read_text().splitlines()
        assert len(lines) == 202

        try:
            ma.MarkovChain.random_walk(10, 0.6)
        except ValueError as e:
            print(f"rejected alpha 0.6: {e}")
        else:
            raise AssertionError("alpha 0.6 accepted")

    print("smoke test OK")


if __name__ == "__main__":
    main()
