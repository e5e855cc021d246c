#!/usr/bin/env python3
"""Generate the browser parity fixtures.

Writes into frontend/fixtures/:
  - ten PNGs (five per class, three different source sizes so the bilinear
    resize path is exercised, not just the identity case)
  - expected.json with the native engine's probabilities for each file,
    produced through the same preprocess + forward path the CLI uses

Run after training frontend/fixtures/mela-d-lite.meld:
  python3 tools/make_web_fixtures.py
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

from melad import forward, load_weights, preprocess, synthetic_dataset

FIXTURES = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"


def main() -> int:
    weights = FIXTURES / "mela-d-lite.meld"
    if not weights.exists():
        print(f"missing {weights}; train it first", file=sys.stderr)
        return 1
    bundle = load_weights(weights)

    plan = [  # (source size, images per class, generator seed)
        (64, 2, 101),
        (96, 2, 102),
        (120, 1, 103),
    ]
    cases = []
    with tempfile.TemporaryDirectory() as tmp:
        for size, per_class, seed in plan:
            out = Path(tmp) / f"s{size}"
            synthetic_dataset(seed, per_class, out, size=size)
            for label in ("benign", "malignant"):
                for i in range(per_class):
                    src = out / f"{label}_{i:04d}.png"
                    name = f"{label[0]}{size}_{i}.png"
                    shutil.copyfile(src, FIXTURES / name)
                    cases.append((name, size))

    expected = []
    for name, size in sorted(cases):
        image = preprocess(FIXTURES / name, bundle.config.input_height)
        pred = forward(bundle, image, deterministic=True)
        expected.append({
            "file": name,
            "source_size": size,
            "label": pred.label,
            "p_benign": pred.p_benign,
            "p_malignant": pred.p_malignant,
        })

    payload = {
        "model": bundle.config.name,
        "input_size": bundle.config.input_height,
        "weights": weights.name,
        "tolerance": 1e-4,
        "cases": expected,
    }
    (FIXTURES / "expected.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {len(expected)} cases to {FIXTURES / 'expected.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
