"""Smoke test for the `nlns` extension module.

Build and run:
    maturin develop --release -m crates/py/Cargo.toml
    python python/smoke_test.py
"""

import os
import tempfile

import nlns


def main():
    assert "random" in nlns.destroy_operators()
    assert nlns.repair_operators() == ["sample", "greedy"]

    solved = "1234341221434321"
    inst = nlns.Instance.parse_sudoku("12..34..21..43.. " + solved)
    assert inst.kind == "sudoku" and inst.n == 16 and inst.domain_size == 4
    truth = inst.ground_truth
    assert inst.is_feasible(truth) and inst.cost(truth) == 0 and inst.loss(truth) == 0.0
    bad = list(truth)
    bad[2], bad[3] = bad[3], bad[2]
    assert inst.cost(bad) > 0
    assert all(s >= 0 for s in inst.violation_scores(bad))

    try:
        nlns.Instance.parse_sudoku("11..............")
    except nlns.ParseError:
        pass
    else:
        raise AssertionError("duplicate given accepted")

    x = inst.random_assignment(seed=3)
    mask = nlns.destroy(inst, x, "worst-greedy", rho=0.5)
    givens = inst.givens
    assert mask and all(givens[i] is None for i in mask)

    train = [nlns.Instance.generate_sudoku(4, 8, seed=s) for s in range(30)]
    model = nlns.Model(4, width=16, heads=2, blocks=1, max_len=16, seed=0)
    losses = model.train(train, steps=30, batch=4)
    assert len(losses) == 30 and all(l == l for l in losses)

    logits = model.forward(inst, x, mask)
    assert len(logits) == 16 and len(logits[0]) == 4

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.bin")
        model.save(path)
        loaded = nlns.Model.load(path)
        assert loaded.num_params == model.num_params

    run = nlns.solve(inst, loaded, iterations=300, seed=1)
    assert run["best_costs"] == sorted(run["best_costs"], reverse=True)
    assert run["best_cost"] == inst.cost(run["best_assignment"])
    again = nlns.solve(inst, loaded, iterations=300, seed=1)
    run.pop("elapsed_ms"), again.pop("elapsed_ms")
    assert run == again

    g = nlns.Instance.generate_graph(20, 0.2, kind="max-cut", seed=4)
    cut = nlns.solve(g, nlns.Model(2, kind="max-cut", width=16, heads=2, blocks=1), iterations=50)
    assert g.cut_size(cut["best_assignment"]) >= 0

    try:
        nlns.solve(inst, loaded, rho=0.0)
    except nlns.ConfigError:
        pass
    else:
        raise AssertionError("rho 0 accepted")

    print("smoke test ok:", inst, "solved" if run["solved"] else "unsolved", run["iterations"], "iterations")


if __name__ == "__main__":
    main()
