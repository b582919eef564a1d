#!/usr/bin/env python3
# SPDX-License-Identifier: MIT OR Apache-2.0
"""Independent reader for a model directory's tensor manifest.

Prints one JSON object: tensor name -> {shape, count, first, last, sum}.
Floats are written as shortest round-trip decimal strings.
Uses only the standard library so it can check the Rust writer from outside.
"""
import json
import math
import struct
import sys
from pathlib import Path

FORMATS = {"f32": ("<f", 4), "f64": ("<d", 8)}


def read(model_dir):
    d = Path(model_dir)
    header = json.loads((d / "tensors.json").read_text())
    blob = (d / "tensors.bin").read_bytes()
    out = {}
    for name, entry in sorted(header.items()):
        fmt, size = FORMATS[entry["dtype"]]
        count = math.prod(entry["shape"])
        start = entry["byte_offset"]
        end = start + count * size
        if end > len(blob):
            raise SystemExit(f"{name}: needs {end} bytes, blob has {len(blob)}")
        values = [v for (v,) in struct.iter_unpack(fmt, blob[start:end])]
        out[name] = {
            "shape": entry["shape"],
            "count": count,
            "first": repr(values[0]) if values else None,
            "last": repr(values[-1]) if values else None,
            "sum": repr(math.fsum(values)),
        }
    return out


if __name__ == "__main__":
    if len(sys.argv) != 2:
        raise SystemExit("usage: read_manifest.py MODEL_DIR")
    json.dump(read(sys.argv[1]), sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
