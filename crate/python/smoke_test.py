"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import udaseg_py as u


def check_metrics():
    pixels, labels = u.source_phantom(seed=3, image_size=32)
    assert len(pixels) == 32 * 32 and len(labels) == 32 * 32
    assert all(0.0 <= v <= 1.0 for v in pixels)
    assert set(labels) <= {0, 1, 2, 3}

    same = u.slice_metrics(labels, labels, 32, 32)
    assert set(same) == {"ggo", "consolidation", "infection", "lung"}
    for row in same.values():
        assert row == {"dice": 1.0, "sen": 1.0, "spe": 1.0}

    # Half of a 2x2 lung predicted: tp=1, fn=1, tn=2.
    row = u.slice_metrics([1, 0, 0, 0] * 64, [1, 1, 0, 0] * 64, 16, 16)["lung"]
    assert math.isclose(row["dice"], 2 / 3) and row["sen"] == 0.5 and row["spe"] == 1.0

    try:
        u.slice_metrics([0] * 4, [0] * 5, 2, 2)
    except u.UdasegError as e:
        assert e.args[0] == "shape", e.args
    else:
        raise AssertionError("mismatched masks accepted")


def check_cli():
    tiny = ["--set", "image_size=32", "--set", "iterations=3", "--set", "net.base_width=2",
            "--set", "paths.source=data/source", "--set", "paths.target_train=data/target-train"]
    with tempfile.TemporaryDirectory() as tmp:
        os.chdir(tmp)
        u.run(["generate-data", "--out", "data", "--set", "phantom.image_size=32",
               "--set", "source_slices=6", "--set", "slices_per_patient=2"])
        u.run(["train", "--out", "run", *tiny])
        with open("run/log.jsonl") as f:
            lines = [json.loads(line) for line in f]
        assert len(lines) == 3 and all("adv_cross" in r for r in lines)
        summary = u.run(["evaluate", "--out", "eval", "--set", "checkpoint=run/final.ckpt",
                         "--set", "data=data/target-test"])
        assert "Infection" in summary, summary
        try:
            u.run(["train", "--out", "run", *tiny])
        except u.UdasegError as e:
            assert e.args[0] == "output-exists", e.args
        else:
            raise AssertionError("existing output overwritten without --force")
        os.chdir("/")


if __name__ == "__main__":
    assert u.__version__
    check_metrics()
    check_cli()
    print("smoke test passed")
