"""Smoke test for the pygendd extension module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml`, or copy
target/<profile>/libpygendd.so next to this script as pygendd.so.
Pass --train to also run a short training job.
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pygendd  # noqa: E402


def check(name, ok):
    print(f"{'PASS' if ok else 'FAIL'} {name}")
    return ok


def main():
    ok = True
    rng = random.Random(0)

    s = pygendd.NoiseSchedule("cosine", 1000)
    ab = [s.alpha_bar(m) for m in range(0, 1001)]
    ok &= check("alpha_bar starts at 1 and decreases", ab[0] == 1.0 and all(b < a for a, b in zip(ab, ab[1:])))
    steps = s.respace(64)
    ok &= check("respace keeps 64 steps ending at M", len(steps) == 64 and steps[-1] == 1000)

    x0 = [rng.gauss(0, 1) for _ in range(16)]
    eps = [rng.gauss(0, 1) for _ in range(16)]
    xm = s.forward_noise(x0, 500, eps)
    back = pygendd.single_step_x0(s, xm, 500, eps)
    ok &= check("single-step estimate inverts forward noise", max(abs(a - b) for a, b in zip(back, x0)) < 1e-9)

    feats = [[rng.gauss(0, 1) for _ in range(20)] for _ in range(3)]
    tokens = pygendd.split(feats, 8)
    ok &= check("split pads 20 dims into 3 tokens of 8", len(tokens[0]) == 3 and len(tokens[0][0]) == 8)
    ok &= check("assemble inverts split", pygendd.assemble(tokens, 20) == feats)

    centers = [[1.0, 0.0], [0.0, 1.0]]
    c = pygendd.contract([2.0, 2.0], centers, 1, 0.5)
    ok &= check("contraction mixes toward the class center", c == [1.0, 1.5])

    try:
        pygendd.load_config("smoke", ["gendd.lambda=2"])
        ok &= check("invalid lambda rejected", False)
    except ValueError:
        ok &= check("invalid lambda rejected", True)

    with tempfile.TemporaryDirectory() as d:
        r = pygendd.verify_theorem(d, scenarios_per_bucket=200)
        ok &= check("theorem harness passes", r["passed"] == 1.0 and math.isfinite(r["high_confidence_median_residual"]))

        if "--train" in sys.argv:
            out = os.path.join(d, "run")
            t = pygendd.train("smoke", [f"run.out_dir='{out}'", "dataset.val_limit=256"], steps=50)
            ok &= check("short training reduces loss", t["last_loss"] < t["first_loss"])

    print("OK" if ok else "FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
