"""Exercises the Python bindings end to end on a small warehouse.

Build first with `pip install --no-build-isolation -e .` from the repo root.
"""

import json
import math
import pathlib
import tempfile

import aida

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    cat = aida.Catalog()
    r = cat.resolve("netgmv")
    assert r["canonical_name"] == "netGMV", r
    assert cat.resolve("nonsense_metric")["status"] == "unknown"
    assert "netGMV" in cat.metrics() and "shopId" in cat.dimensions()
    assert cat.check(["exposeCnt"], ["orderChannel"]), "expected an incompatible pair"

    assert aida.hallucination_value(10, 0) == 0.1
    assert aida.hallucination_value(0, 20) == -1.0
    assert close(aida.length_reward(750, 500, 1000, 0.1), 0.05)
    assert aida.insight_gain("New", True, 0) == 1.0
    assert aida.insight_gain("Reinforced", True, 5) == 0.1
    assert aida.insight_gain("Refuted", False, 0) == -2.0
    assert aida.insight_score(True, 1) == 0.5
    assert aida.insight_score(False, 0) == -1.0

    g = aida.compute_returns([0.1, 0.2], [1.0, 0.5], 0.7)
    assert close(g[0], 1.45) and close(g[1], 0.7), g
    adv = aida.rebn_advantages([[1.0, 2.0, 3.0]])
    assert close(adv[0][2], math.sqrt(1.5))
    masked = aida.masked_advantages([[1.0, 2.0, 3.0]], [[(True, False), (False, False), (True, True)]])
    assert masked[0][0] == adv[0][0] and masked[0][2] == 0.0

    step = aida.parse_step("<state_think>\nok\n</state_think>")
    assert not step["format_ok"]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        config = (FIXTURES / "small_warehouse.toml").read_text()
        wh = aida.Warehouse.generate(str(tmp / "warehouse.db"), config)
        truth = wh.ground_truths()[0]
        assert truth["scenario_id"] == "s1"
        assert close(sum(c["share_of_effect"] for c in truth["planted_causes"]), 1.0, 1e-9)

        pkg = wh.query(json.dumps({
            "metric": ["netGMV"],
            "dimension": ["shopId"],
            "ds": ["20251001", "20251014"],
            "limit": 3,
        }))
        assert pkg["status"] == "Success", pkg
        assert len(pkg["execution_results"]["preview"]) == 3

        summary = aida.run_episode(
            'warehouse = "warehouse.db"\n'
            'scenario_id = "s1"\n'
            'id = { shop = "S002" }\n'
            'policy = { kind = "explorer", seed = 5 }\n',
            str(tmp / "run"),
            root=str(tmp),
        )
        assert summary["steps_run"] >= 1
        assert summary["valid_insights"], summary
        assert (tmp / "run" / "episode.json").is_file()

    print("python smoke test passed")


if __name__ == "__main__":
    main()
