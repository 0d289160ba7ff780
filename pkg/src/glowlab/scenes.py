"""Bundled test scenes and camera trajectory helpers.

Three scenes back the test and experiment harnesses:

* ``plane``        one Lambertian square, closed-form direct illumination
* ``two-patch``    two facing Lambertian squares; the bounce series at any
                   point is computable by deterministic quadrature
* ``cornell-desk`` open box with two colored boxes inside, strong
                   inter-reflection and moving cast shadows

plus ``alcove``, a scene with a pocket invisible to every camera, used to
probe cache supervision away from camera rays.
"""

from __future__ import annotations

import numpy as np

from .core import RngStream
from .scene import (
    Camera,
    CaptureFrame,
    Flashlight,
    MaterialSet,
    Scene,
    TriangleMesh,
    look_at_camera,
)


def _quad(c0, c1, c2, c3):
    """Two triangles for corners given counter-clockwise seen from the front."""
    base = [c0, c1, c2, c3]
    tris = [[0, 1, 2], [0, 2, 3]]
    return np.asarray(base, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def _box(center, size):
    """Axis-aligned box, 12 triangles, outward normals."""
    cx, cy, cz = center
    hx, hy, hz = np.asarray(size) / 2.0
    lo = np.array([cx - hx, cy - hy, cz - hz])
    hi = np.array([cx + hx, cy + hy, cz + hz])
    v = np.array([
        [lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]],
    ])
    quads = [
        (4, 5, 6, 7),   # +z
        (1, 0, 3, 2),   # -z
        (5, 1, 2, 6),   # +x
        (0, 4, 7, 3),   # -x
        (7, 6, 2, 3),   # +y
        (0, 1, 5, 4),   # -y
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [[a, b, c], [a, c, d]]
    return v, np.asarray(tris, dtype=np.int64)


class SceneBundle:
    """A scene plus per-segment ground-truth material table for metrics."""

    def __init__(self, scene: Scene, name: str):
        self.scene = scene
        self.name = name


def _assemble(parts, albedos, roughs, specular, intensity):
    """Stack (verts, tris) parts; each part is one segment with one material."""
    verts, tris, seg = [], [], []
    off = 0
    for i, (v, t) in enumerate(parts):
        verts.append(v)
        tris.append(t + off)
        seg += [i] * len(t)
        off += len(v)
    verts = np.concatenate(verts)
    tris = np.concatenate(tris)
    seg = np.asarray(seg, dtype=np.int64)
    albedo = np.asarray([albedos[s] for s in seg], dtype=np.float64)
    rough = np.asarray([roughs[s] for s in seg], dtype=np.float64)
    mesh = TriangleMesh(verts, tris, segment_ids=seg)
    mats = MaterialSet(albedo, rough, specular)
    return Scene(mesh, mats, Flashlight(intensity=np.asarray(intensity, float)))


def build_plane_scene(albedo=(0.7, 0.5, 0.3), intensity=(10.0, 10.0, 10.0)) -> Scene:
    """Single Lambertian square in z=0 facing +z."""
    parts = [_quad([-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0])]
    return _assemble(parts, [albedo], [0.8], specular=0.0, intensity=intensity)


TWO_PATCH_GAP = 1.0
TWO_PATCH_HALF = 1.0


def build_two_patch_scene(rho1=(0.75, 0.60, 0.45), rho2=(0.50, 0.70, 0.80),
                          intensity=(8.0, 8.0, 8.0)) -> Scene:
    """Two facing Lambertian squares: z=0 facing +z, z=gap facing -z."""
    s = TWO_PATCH_HALF
    g = TWO_PATCH_GAP
    bottom = _quad([-s, -s, 0], [s, -s, 0], [s, s, 0], [-s, s, 0])
    top = _quad([-s, -s, g], [-s, s, g], [s, s, g], [s, -s, g])
    return _assemble([bottom, top], [rho1, rho2], [0.9, 0.9],
                     specular=0.0, intensity=intensity)


CORNELL_SEGMENTS = ("floor", "back", "left", "right", "tall-box", "short-box")


def build_cornell_desk_scene(intensity=(16.0, 16.0, 16.0), specular=0.6) -> Scene:
    """Open box (no ceiling, no front) with two colored boxes on the floor."""
    floor = _quad([-1, 0, -1], [-1, 0, 1], [1, 0, 1], [1, 0, -1])       # +y
    back = _quad([-1, 0, -1], [1, 0, -1], [1, 1.6, -1], [-1, 1.6, -1])  # +z
    left = _quad([-1, 0, -1], [-1, 1.6, -1], [-1, 1.6, 1], [-1, 0, 1])  # +x
    right = _quad([1, 0, -1], [1, 0, 1], [1, 1.6, 1], [1, 1.6, -1])     # -x
    tall = _box([-0.42, 0.36, -0.40], [0.36, 0.72, 0.36])
    short = _box([0.42, 0.15, 0.22], [0.44, 0.30, 0.44])
    albedos = [
        (0.75, 0.75, 0.75),   # floor
        (0.75, 0.75, 0.75),   # back
        (0.65, 0.12, 0.10),   # left, red
        (0.12, 0.60, 0.12),   # right, green
        (0.15, 0.25, 0.70),   # tall box, blue
        (0.75, 0.65, 0.15),   # short box, yellow
    ]
    roughs = [0.55, 0.70, 0.50, 0.50, 0.30, 0.42]
    return _assemble([floor, back, left, right, tall, short],
                     albedos, roughs, specular=specular, intensity=intensity)


def build_alcove_scene(intensity=(12.0, 12.0, 12.0)) -> Scene:
    """Floor + back wall + full-height divider hiding an alcove.

    The region behind the divider (x in [-1,0], z in [-1,-0.5]) is invisible
    from every front camera position and receives only bounce light.
    """
    floor = _quad([-1, 0, -1], [-1, 0, 1], [1, 0, 1], [1, 0, -1])       # +y
    back = _quad([-1, 0, -1], [1, 0, -1], [1, 1.2, -1], [-1, 1.2, -1])  # +z
    # Divider as a thin box so both sides shade correctly.
    divider = _box([-0.5, 0.6, -0.5], [1.0, 1.2, 0.02])
    albedos = [(0.7, 0.7, 0.7), (0.7, 0.6, 0.3), (0.4, 0.5, 0.7)]
    roughs = [0.6, 0.6, 0.6]
    return _assemble([floor, back, divider], albedos, roughs,
                     specular=0.0, intensity=intensity)


def build_occluder_scene(albedo=(0.65, 0.6, 0.55), intensity=(10.0, 10.0, 10.0)):
    """Large floor + one box: a light sweep drags a hard shadow edge.

    For an anchor point p = (px, 0, 0) right of the box (top edge at
    x = 0.3, height 0.6) and lights at height h on the z = 0 line, the cast
    shadow boundary sits at lx = px + (0.3 - px) * h / 0.6.
    """
    floor = _quad([-2, 0, -2], [-2, 0, 2], [2, 0, 2], [2, 0, -2])
    box = _box([0.0, 0.3, 0.0], [0.6, 0.6, 0.6])
    wall = _quad([-2, 0, -2], [2, 0, -2], [2, 1.5, -2], [-2, 1.5, -2])
    return _assemble([floor, box, wall],
                     [albedo, (0.55, 0.35, 0.3), (0.6, 0.65, 0.7)],
                     [0.6, 0.5, 0.6], specular=0.0, intensity=intensity)


def orbit_cameras(target, radius, n, width=64, height=64, fov_deg=49.0,
                  azimuth_range=(-0.9, 0.9), elevation_range=(0.42, 1.0),
                  seed=0):
    """Jittered grid of look-at cameras on a spherical cap facing +z."""
    target = np.asarray(target, dtype=np.float64)
    fx = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    stream = RngStream(seed, 0xCA3)
    cams = []
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    k = 0
    for i in range(rows):
        for j in range(cols):
            if k >= n:
                break
            u = stream.uniform(2)
            az = azimuth_range[0] + (j + u[0]) / cols * (azimuth_range[1] - azimuth_range[0])
            el = elevation_range[0] + (i + u[1]) / rows * (elevation_range[1] - elevation_range[0])
            pos = target + radius * np.array(
                [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
            cams.append(look_at_camera(pos, target, [0, 1, 0], fx, fx,
                                       width / 2.0, height / 2.0, width, height))
            k += 1
    return cams


def capture_frames(scene: Scene, cameras) -> list:
    """Co-located frames: light at camera center + flashlight offset."""
    frames = []
    for cam in cameras:
        x_l = cam.center + scene.flashlight.offset
        frames.append(CaptureFrame(camera=cam, light_position=x_l))
    return frames


_BUILDERS = {
    "plane": build_plane_scene,
    "two-patch": build_two_patch_scene,
    "cornell-desk": build_cornell_desk_scene,
    "alcove": build_alcove_scene,
    "occluder": build_occluder_scene,
}


def build_scene(name: str) -> Scene:
    if name not in _BUILDERS:
        raise KeyError(f"unknown bundled scene {name!r}; "
                       f"available: {sorted(_BUILDERS)}")
    return _BUILDERS[name]()


def default_cameras(name: str, n: int, seed: int = 0, width=64, height=64):
    """Reasonable capture trajectories for each bundled scene."""
    if name == "plane":
        return orbit_cameras([0, 0, 0], 2.0, n, width, height, fov_deg=45.0,
                             azimuth_range=(-0.8, 0.8),
                             elevation_range=(0.5, 1.15), seed=seed)
    if name == "two-patch":
        return orbit_cameras([0, 0, 0.5], 0.45, n, width, height, fov_deg=70.0,
                             azimuth_range=(-0.5, 0.5),
                             elevation_range=(-0.4, 0.4), seed=seed)
    if name == "cornell-desk":
        return orbit_cameras([0, 0.35, 0], 2.9, n, width, height, fov_deg=49.0,
                             seed=seed)
    if name == "alcove":
        return orbit_cameras([0, 0.3, 0], 2.6, n, width, height, fov_deg=52.0,
                             azimuth_range=(-0.6, 0.6),
                             elevation_range=(0.25, 0.55), seed=seed)
    if name == "occluder":
        return orbit_cameras([0, 0.2, 0], 3.2, n, width, height, fov_deg=55.0,
                             azimuth_range=(-0.7, 0.7),
                             elevation_range=(0.35, 0.8), seed=seed)
    raise KeyError(name)
