"""Smoke test for the leafarea3d extension module.

Build and install first, e.g. `maturin develop --release` in crates/py.
"""

import json
import sys
import tempfile
from pathlib import Path

import leafarea3d as la


def main() -> int:
    impulse = [[500.0] * 7 for _ in range(7)]
    impulse[3][3] = 0.0
    assert all(v == 500.0 for row in la.median_filter(impulse, 5) for v in row)

    pred = [[True, True], [False, False]]
    half = [[True, False], [False, False]]
    assert la.intersection_over_area(half, pred) == 0.5
    assert abs(la.match_instances([pred], [pred, half])["f1"] - 2 / 3) < 1e-15

    tri = la.surface_area([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert tri == 0.5

    head = la.AreaHead.identity(2)
    area, _ = head.forward([[[2.0] * 3] * 2], [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert area == 8.0
    check = la.AreaHead.random([4, 4, 4], "leaky_relu", 2, 7).grad_check(
        [[[((c + y + x) % 5) / 5 - 0.4 for x in range(8)] for y in range(8)] for c in range(4)],
        [[1.0] * 8 for _ in range(8)],
        20.0,
        1e-5,
    )
    assert check["max_rel_error"] < 1e-4, check

    with tempfile.TemporaryDirectory() as tmp:
        n = la.synthesize(tmp, n=3, distances=[0.5, 1.0], noise=False, seed=1)
        ann = str(Path(tmp) / "annotations.json")
        csv = str(Path(tmp) / "results.csv")
        config = json.dumps({"meshing": {"backend": "heightfield"}})
        rows = la.estimate_dataset(ann, config=config, workers=2, out_csv=csv)
        assert len(rows) == n
        report = la.evaluate_results(csv, ann)
        print(f"{n} leaves: F1 {report['f1']:.2f}, median APE {report['ape_median']:.2f}%")
        assert report["f1"] == 1.0 and report["ape_median"] < 10.0

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
