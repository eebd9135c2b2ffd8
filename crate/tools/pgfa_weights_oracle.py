#!/usr/bin/env python3
"""Reference patch weights for the packaged PGFA feature tensor.

    python3 tools/pgfa_weights_oracle.py crates/core/data/pgfa

writes `features.ftns` (2 x 64 x 16: per image, 60 patches scattered around
one direction plus 4 unrelated patches, seeded) and
`weights_oracle.ftns` (2 x 64) computed in float64 with numpy:

1. L2-normalize every patch row.
2. Cosine similarity matrix S = F F^T.
3. Row softmax of S / tau.
4. Sum of the top_k largest entries of each row.
5. Divide by (sum over the image + epsilon).
"""

import os
import struct
import sys

import numpy as np

TAU = 0.07
TOP_K = 50
EPSILON = 1e-8
SHAPE = (2, 64, 16)
SEED = 20240917


def write_ftns(path, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"FTNS")
        f.write(struct.pack("<IBB", 1, 0, array.ndim))
        for d in array.shape:
            f.write(struct.pack("<Q", d))
        f.write(array.tobytes())


def read_ftns(path):
    with open(path, "rb") as f:
        raw = f.read()
    assert raw[:4] == b"FTNS"
    version, dtype, ndim = struct.unpack("<IBB", raw[4:10])
    assert version == 1 and dtype == 0
    dims = struct.unpack("<" + "Q" * ndim, raw[10 : 10 + 8 * ndim])
    return np.frombuffer(raw[10 + 8 * ndim :], dtype="<f4").reshape(dims)


def weights(image):
    f = image.astype(np.float64)
    norms = np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    f = f / norms
    s = f @ f.T
    z = (s - s.max(axis=1, keepdims=True)) / TAU
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    top = -np.sort(-p, axis=1)[:, :TOP_K]
    w = top.sum(axis=1)
    return w / (w.sum() + EPSILON)


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(SEED)
    feats_path = os.path.join(out_dir, "features.ftns")
    images = []
    for spread in (0.05, 0.15):
        center = rng.standard_normal(SHAPE[2])
        cluster = center + spread * rng.standard_normal((60, SHAPE[2]))
        outliers = rng.standard_normal((SHAPE[1] - 60, SHAPE[2]))
        images.append(rng.permutation(np.vstack([cluster, outliers])))
    write_ftns(feats_path, np.stack(images))
    feats = read_ftns(feats_path)
    w = np.stack([weights(img) for img in feats])
    write_ftns(os.path.join(out_dir, "weights_oracle.ftns"), w)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
