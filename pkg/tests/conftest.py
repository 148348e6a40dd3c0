import json
import os
import time

import pytest

ARTIFACTS = os.path.join(os.path.dirname(__file__), "_artifacts")


@pytest.fixture(scope="session")
def artifacts_dir():
    os.makedirs(ARTIFACTS, exist_ok=True)
    return ARTIFACTS


def trained_checkpoint(cfg, variant, workdir, progress=1000):
    """Meta-train (or reuse) one variant checkpoint, recording wall time."""
    from fewdet.train import ensure_meta_checkpoint

    path = os.path.join(
        workdir, f"meta_{variant}_split{cfg.split_id}_seed{cfg.seed}.fdck"
    )
    fresh = not os.path.exists(path)
    t0 = time.perf_counter()
    out = ensure_meta_checkpoint(cfg, variant, workdir, log=print, progress=progress)
    if fresh:
        with open(out + ".timing.json", "w") as fh:
            json.dump({"wall_time": time.perf_counter() - t0}, fh)
    return out


def checkpoint_wall_time(path):
    timing = path + ".timing.json"
    if os.path.exists(timing):
        with open(timing) as fh:
            return json.load(fh)["wall_time"]
    return None


def accept_line(name, ok, detail):
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, f"{name}: {detail}"
