"""Smoke test for the iconoforge extension module.

Build first:  cargo build -p iconoforge-python
Then run:     python3 python/smoke_test.py [path/to/libiconoforge_py.so]
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(lib):
    stage = tempfile.mkdtemp(prefix="iconoforge-py-")
    shutil.copy(lib, os.path.join(stage, "iconoforge.so"))
    sys.path.insert(0, stage)
    import iconoforge

    return iconoforge


def main():
    lib = sys.argv[1] if len(sys.argv) > 1 else os.path.join(ROOT, "target", "debug", "libiconoforge_py.so")
    ic = load_module(lib)
    print("iconoforge", ic.__version__)

    codes = [c for c, _ in ic.classes()]
    assert len(codes) == 10 and "11F" in codes

    assert math.isclose(ic.f1_score(0.5, 1.0), 2 / 3)
    assert ic.f1_score(0.0, 0.0) == 0.0
    assert math.isclose(ic.average_precision([0.9, 0.8, 0.1], [True, False, True]), (1 + 2 / 3) / 2)
    assert ic.average_precision([0.3, 0.2], [False, False]) is None
    assert ic.hamming(0b1011, 0b0001) == 2

    work = tempfile.mkdtemp(prefix="iconoforge-smoke-")
    fx = os.path.join(work, "fx")
    n = ic.make_fixture(fx, n_per_class=10, seed=3)
    assert n >= 100, n

    store = ic.Store(os.path.join(work, "store"))
    report = store.ingest(os.path.join(fx, "manifest.jsonl"), "fixture", fx)
    assert report["stored"] > 0, report
    removed = store.remove_exact_duplicates()
    assert removed > 0
    store.queue_near_duplicates()
    store.queue_fragments()
    labeled = store.label()
    assert labeled > 0

    pending = store.pending()
    assert pending, "expected review items"
    item = pending[0]
    assert store.decide(item["item_id"], "reject") is False
    assert store.decide(item["item_id"], "reject") is True
    try:
        store.decide(item["item_id"], "accept")
        raise AssertionError("conflicting decision accepted")
    except RuntimeError:
        pass
    try:
        store.decide("no-such-item", "accept")
        raise AssertionError("unknown item accepted")
    except KeyError:
        pass
    assert store.verify_replay()

    ids = store.active_ids()
    labels = {i: store.labels(i) for i in ids}
    single = {i: l for i, l in labels.items() if len(l) == 1}
    assignment = ic.split(single, seed=42)
    assert assignment == ic.split(single, seed=42)
    assert set(assignment.values()) <= {"train", "val", "test"}

    image = next(os.path.join(fx, "images", f) for f in sorted(os.listdir(os.path.join(fx, "images"))))
    h = ic.dhash(image)
    assert 0 <= h < 2**64 and ic.hamming(h, h) == 0

    cli = os.path.join(ROOT, "target", "debug", "iconoforge")
    if os.path.exists(cli):
        sdir = os.path.join(work, "cli-store")
        run = lambda *a: subprocess.run([cli, "--store", sdir, *a], check=True, capture_output=True)
        run("ingest", "--manifest", os.path.join(fx, "manifest.jsonl"), "--source", "fixture")
        run("dedup")
        run("label")
        run("split")
        run("pretrain", "--epochs", "1", "--n-per-class", "10")
        run("train", "--epochs", "1")
        model = ic.Model.load(os.path.join(sdir, "model.ifm"))
        pred = model.predict(image)
        assert len(pred["scores"]) == 10
        assert pred["top_class"] in codes
        cam = model.cam(image, pred["top_class"])
        assert cam and all(len(r) == len(cam[0]) for r in cam)
        print("model", model.checkpoint_id, json.dumps(pred["top_class"]))
    else:
        print("skipping model checks: build the iconoforge binary first")

    shutil.rmtree(work)
    print("smoke test passed")


if __name__ == "__main__":
    main()
