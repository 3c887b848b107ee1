"""Smoke test for the region_cam extension module.

Builds the extension with cargo unless it is already importable, then
exercises the main entry points and checks .npy interchange with numpy.

    python3 python/smoke_test.py
"""

import importlib
import io
import json
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent


def import_module():
    try:
        return importlib.import_module("region_cam")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "region-cam-py"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    built = target / "release" / "libregion_cam.so"
    dest = Path(tempfile.mkdtemp()) / "region_cam.so"
    shutil.copy(built, dest)
    sys.path.insert(0, str(dest.parent))
    return importlib.import_module("region_cam")


def write_numpy_bundle(root: Path) -> None:
    """Two-layer bundle written with numpy only."""
    rng = np.random.default_rng(0)
    layers = [("deep", 4, 4, 3), ("shallow", 8, 8, 3)]
    manifest_layers = []
    grads = {}
    for name, h, w, k in layers:
        np.save(root / f"{name}.npy", rng.random((h, w, k), dtype=np.float32))
        np.save(root / f"g_{name}.npy", rng.standard_normal((h, w, k)).astype(np.float32))
        manifest_layers.append({"name": name, "features": f"{name}.npy"})
        grads[name] = f"g_{name}.npy"
    manifest = {
        "format": "region-cam-bundle",
        "version": 1,
        "image_id": "np_bundle",
        "image_hw": [16, 16],
        "layers": manifest_layers,
        "classes": [{"class_id": 3, "score": 1.5, "grads": grads}],
        "provenance": {"writer": "numpy"},
    }
    (root / "manifest.json").write_text(json.dumps(manifest))


def main() -> int:
    rc = import_module()

    # npy interchange in both directions
    a = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    buf = io.BytesIO()
    np.save(buf, a)
    t = rc.Tensor.from_npy(buf.getvalue())
    assert t.shape == [3, 4]
    assert t.to_npy() == buf.getvalue(), "re-encoded bytes differ from numpy"
    back = np.load(io.BytesIO(t.to_npy()))
    assert np.array_equal(back, a)

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        write_numpy_bundle(d)
        b = rc.Bundle.read(d)
        assert b.layer_names == ["deep", "shallow"]
        m = np.array(rc.region_cam(b, 3, centroids=3).tolist()).reshape(16, 16)
        assert m.min() >= 0 and m.max() <= 1

        p = rc.Bundle.planted()
        p.write(d / "planted")
        again = rc.Bundle.read(d / "planted")
        m1 = rc.region_cam(again, 1)
        assert m1 == rc.region_cam(p, 1)
        seed = np.array(rc.make_seed({1: m1}, 0.5)).reshape(32, 32)
        gt = np.zeros((32, 32), dtype=bool)
        gt[8:24, 12:28] = True
        iou = (gt & (seed == 1)).sum() / (gt | (seed == 1)).sum()
        assert iou >= 0.95, iou

        saved = d / "map.npy"
        m1.save(saved)
        assert np.load(saved).shape == (32, 32)

    g = rng_tensor(rc, (4, 4, 8))
    sim = np.array(rc.compute_sim(g).tolist())
    ref = np.maximum(np.array(g.tolist()).reshape(4, 4, 8), 0).sum(axis=2).ravel()
    assert np.allclose(sim, ref, rtol=1e-6)

    pts = rc.Tensor([6, 2], [1, 0.1, 2, 0.3, 3, 0.2, 0.1, 1, 0.2, 2, 0.1, 3])
    km = rc.kmeans_cosine(pts, 2, seed=1)
    assert km["labels"] == [0, 0, 0, 1, 1, 1], km
    assert all(x >= y for x, y in zip(km["trace"], km["trace"][1:]))

    s = rc.Tensor([2, 2], [1, 3, 5, 7])
    assert rc.propagate_once(s, [0, 0, 1, 1], 2).tolist() == [2, 2, 6, 6]

    per_class, mean = rc.miou([0, 1, 1, 1], [0, 1, 0, 1], 2)
    assert per_class == [0.5, 2 / 3] and mean == 7 / 12
    assert rc.box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7
    assert rc.largest_component_bbox([[False] * 4, [False, True, True, False], [False, True, True, False]]) == (1, 1, 3, 3)

    try:
        rc.Tensor([2, 2], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch not rejected")

    print("python smoke test ok")
    return 0


def rng_tensor(rc, shape):
    v = np.random.default_rng(1).standard_normal(shape).astype(np.float32)
    return rc.Tensor(list(shape), v.ravel().tolist())


if __name__ == "__main__":
    sys.exit(main())
