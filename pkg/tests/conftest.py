import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# Heavy session artifacts (the cornell capture dataset) are cached under
# .cache/ so repeated test runs skip the ~10 min of path tracing. Delete
# the directory (or set GLOWLAB_TEST_CACHE=0) to regenerate from scratch.
CACHE_ROOT = os.path.join(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__))), ".cache")

CORNELL_SEED = 11
CORNELL_SPP = 256
CORNELL_FRAMES = 28
CORNELL_VAL = 4


def _cache_enabled():
    return os.environ.get("GLOWLAB_TEST_CACHE", "1") != "0"


@pytest.fixture(scope="session")
def cornell_dataset(tmp_path_factory):
    """(scene, train_frames, val_frames) for the bundled cornell-desk scene,
    path-traced at the desk-scale defaults."""
    from glowlab.dataset import load_dataset, make_dataset
    from glowlab.scenes import build_cornell_desk_scene, default_cameras

    if _cache_enabled():
        out = os.path.join(
            CACHE_ROOT,
            f"cornell-s{CORNELL_SEED}-n{CORNELL_FRAMES}-spp{CORNELL_SPP}")
    else:
        out = str(tmp_path_factory.mktemp("cornell"))
    manifest = os.path.join(out, "manifest.json")
    if not os.path.exists(manifest):
        scene = build_cornell_desk_scene()
        cams = default_cameras("cornell-desk", CORNELL_FRAMES,
                               seed=CORNELL_SEED)
        make_dataset(scene, cams, out, spp=CORNELL_SPP, seed=CORNELL_SEED,
                     n_val=CORNELL_VAL)
    scene, train, val, _ = load_dataset(manifest, verify=True)
    return scene, train, val
