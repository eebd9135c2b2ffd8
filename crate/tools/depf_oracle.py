#!/usr/bin/env python3
"""Reference DEPF fusion, written step by step in plain Python.

Regenerates the golden file used by the CLI tests:

    python3 tools/depf_oracle.py \
        crates/core/data/two_source/teacher.json \
        crates/core/data/two_source/vfm.json \
        crates/core/data/two_source/golden_depf.json

Only the standard library is used. Floats are printed the way the Rust
`serde_json` writer prints them so the output can be compared byte for byte.
"""

import json
import math
import sys
from decimal import Decimal

BETA = 0.7
EPSILON = 1e-8


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return min(max(inter / union, 0.0), 1.0)


def entropy(p, eps):
    h = 0.0
    for v in p:
        if v > 0.0:
            h -= v * math.log(v + eps)
    return max(h, 0.0)


def argmax(p):
    best = 0
    for i, v in enumerate(p):
        if v > p[best]:
            best = i
    return best


def depf(a, b, beta=BETA, eps=EPSILON):
    # merge, then visit in canonical order: confidence desc, box asc, source
    merged = [(d, 0) for d in a] + [(d, 1) for d in b]
    merged.sort(key=lambda t: (-max(t[0]["probs"]), tuple(t[0]["box"]), t[1]))

    clusters = []
    for det, _ in merged:
        home = None
        for cluster in clusters:
            if any(iou(det["box"], other["box"]) > beta for other in cluster):
                home = cluster
                break
        if home is None:
            clusters.append([det])
        else:
            home.append(det)

    fused = []
    for cluster in clusters:
        w = [1.0 / (entropy(d["probs"], eps) + eps) for d in cluster]
        total = sum(w)
        w = [x / total for x in w]
        box = [0.0] * 4
        probs = [0.0] * len(cluster[0]["probs"])
        for wk, d in zip(w, cluster):
            for i in range(4):
                box[i] += wk * d["box"][i]
            for i in range(len(probs)):
                probs[i] += wk * d["probs"][i]
        fused.append({"box": box, "probs": probs, "label": argmax(probs)})
    return fused


def fmt_float(x):
    """Shortest round-trip repr laid out like the `ryu` crate."""
    if x == 0.0:
        return "-0.0" if math.copysign(1.0, x) < 0 else "0.0"
    sign, digits, exp = Decimal(repr(x)).normalize().as_tuple()
    d = "".join(map(str, digits))
    n = len(d)
    kk = n + exp
    s = "-" if sign else ""
    if 0 <= exp and kk <= 16:
        return s + d + "0" * exp + ".0"
    if 0 < kk <= 16:
        return s + d[:kk] + "." + d[kk:]
    if -5 < kk <= 0:
        return s + "0." + "0" * (-kk) + d
    e = kk - 1
    if n == 1:
        return s + d + "e" + str(e)
    return s + d[0] + "." + d[1:] + "e" + str(e)


def dump(value, indent=0):
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [inner + json.dumps(k) + ": " + dump(v, indent + 1) for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, list):
        if not value:
            return "[]"
        items = [inner + dump(v, indent + 1) for v in value]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return fmt_float(value)
    return json.dumps(value)


def main(path_a, path_b, out):
    with open(path_a) as f:
        fa = json.load(f)
    with open(path_b) as f:
        fb = json.load(f)
    assert fa["num_classes"] == fb["num_classes"]

    def floats(d):
        return {"box": [float(v) for v in d["box"]], "probs": [float(v) for v in d["probs"]]}

    by_a = {img["image_id"]: [floats(d) for d in img["detections"]] for img in fa["images"]}
    by_b = {img["image_id"]: [floats(d) for d in img["detections"]] for img in fb["images"]}
    ids = [img["image_id"] for img in fa["images"]]
    ids += [img["image_id"] for img in fb["images"] if img["image_id"] not in by_a]

    doc = {"num_classes": fa["num_classes"]}
    names = fa.get("class_names") or fb.get("class_names")
    if names is not None:
        doc["class_names"] = names
    doc["images"] = [
        {"image_id": i, "detections": depf(by_a.get(i, []), by_b.get(i, []))} for i in ids
    ]
    with open(out, "w") as f:
        f.write(dump(doc) + "\n")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])
