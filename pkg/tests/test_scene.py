import numpy as np
import pytest

from glowlab.scene import (
    Camera,
    DenseSDFGrid,
    Flashlight,
    MaterialSet,
    OutOfDomainError,
    Ray,
    Scene,
    SceneFormatError,
    TriangleMesh,
    intersect,
    intersect_batch,
    look_at_camera,
    visibility,
    visibility_batch,
)


def make_scene(vertices, triangles, **kwargs):
    mesh = TriangleMesh(vertices, triangles, **kwargs)
    mats = MaterialSet(
        albedo=np.full((mesh.n_faces, 3), 0.5),
        roughness=np.full(mesh.n_faces, 0.5),
        specular=0.0,
    )
    return Scene(mesh, mats, Flashlight(intensity=np.ones(3)))


@pytest.fixture
def tri_scene():
    # unit right triangle in the z=0 plane
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    return make_scene(v, [[0, 1, 2]])


@pytest.fixture
def soup_scene():
    # random triangle soup for BVH-vs-brute-force equivalence
    rng = np.random.default_rng(99)
    centers = rng.uniform(-1, 1, size=(60, 3))
    offsets = rng.normal(scale=0.15, size=(60, 3, 3))
    verts = (centers[:, None, :] + offsets).reshape(-1, 3)
    tris = np.arange(180).reshape(60, 3)
    return make_scene(verts, tris)


class TestIntersect:
    def test_perpendicular_hit_known_t(self, tri_scene):
        centroid = np.array([1 / 3, 1 / 3, 0.0])
        ray = Ray(origin=centroid + [0, 0, 2.0], direction=np.array([0.0, 0, -1]))
        hit = intersect(tri_scene, ray)
        assert hit is not None
        assert hit.t == pytest.approx(2.0, abs=1e-9)
        assert np.allclose(hit.position, centroid, atol=1e-9)
        assert hit.face == 0

    def test_miss_returns_none(self, tri_scene):
        ray = Ray(origin=np.array([0.0, 0, 2.0]), direction=np.array([0.0, 0, 1.0]))
        assert intersect(tri_scene, ray) is None

    @pytest.mark.parametrize("kernel", ["bvh", "auto"])
    def test_accelerated_kernels_match_brute_force(self, soup_scene, kernel):
        rng = np.random.default_rng(5)
        n = 10_000
        o = rng.uniform(-2, 2, size=(n, 3))
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        a = intersect_batch(soup_scene, o, d, kernel=kernel)
        b = intersect_batch(soup_scene, o, d, brute_force=True)
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.face, b.face)
        assert np.all(np.abs(a.t[a.mask] - b.t[b.mask]) <= 1e-6)

    def test_hit_position_on_triangle_plane(self, soup_scene):
        rng = np.random.default_rng(6)
        o = rng.uniform(-2, 2, size=(500, 3))
        d = rng.standard_normal((500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        h = intersect_batch(soup_scene, o, d)
        m = h.mask
        v0 = soup_scene.mesh.face_v0[h.face[m]]
        n = soup_scene.mesh.face_normals[h.face[m]]
        dist = np.abs(np.sum((h.position[m] - v0) * n, axis=1))
        assert np.all(dist <= 1e-6)


class TestVisibility:
    @pytest.fixture
    def occluder_scene(self):
        # unit square occluder at z = 0.5 spanning [-1,0] x [-1,1]
        v = [[-1, -1, 0.5], [0, -1, 0.5], [0, 1, 0.5], [-1, 1, 0.5]]
        return make_scene(v, [[0, 1, 2], [0, 2, 3]])

    def test_blocked(self, occluder_scene):
        assert visibility(occluder_scene,
                          np.array([-0.5, 0.0, 0.0]),
                          np.array([-0.5, 0.0, 1.0])) == 0

    def test_unblocked(self, occluder_scene):
        assert visibility(occluder_scene,
                          np.array([0.5, 0.0, 0.0]),
                          np.array([0.5, 0.0, 1.0])) == 1

    def test_symmetry(self, occluder_scene):
        rng = np.random.default_rng(8)
        a = rng.uniform(-1, 1, size=(200, 3))
        b = rng.uniform(-1, 1, size=(200, 3))
        ab = visibility_batch(occluder_scene, a, b)
        ba = visibility_batch(occluder_scene, b, a)
        assert np.array_equal(ab, ba)

    def test_step_at_analytic_boundary(self, occluder_scene):
        # Segment from p=(0,0,0) to light (lx,0,1) crosses the occluder plane
        # at x = lx/2; the occluder covers x <= 0, so the analytic boundary
        # is lx = 0.
        p = np.array([0.0, 0.0, 0.0])
        lxs = np.linspace(-0.2, 0.2, 81)
        lights = np.stack([lxs, np.zeros_like(lxs), np.ones_like(lxs)], axis=1)
        vis = visibility_batch(occluder_scene, np.broadcast_to(p, lights.shape),
                               lights)
        flips = np.flatnonzero(np.diff(vis))
        assert len(flips) == 1
        eps = occluder_scene.shadow_eps
        boundary = 0.5 * (lxs[flips[0]] + lxs[flips[0] + 1])
        assert abs(boundary - 0.0) <= (lxs[1] - lxs[0]) + 2 * eps
        assert vis[0] == 0.0 and vis[-1] == 1.0


class TestCamera:
    @pytest.fixture
    def camera(self):
        return look_at_camera(
            position=[0, 0, 2.0], target=[0, 0, 0], up=[0, 1, 0],
            fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
        )

    def test_principal_point_is_forward(self, camera):
        ray = camera.generate_ray(31, 31, jitter=(1.0, 1.0))
        assert np.allclose(ray.direction, camera.forward, atol=1e-12)
        assert np.allclose(ray.origin, camera.center)

    def test_corner_angle_matches_intrinsics(self, camera):
        ray = camera.generate_ray(0, 0, jitter=(0.0, 0.0))
        expected = np.arctan(np.hypot(32.0 / 80.0, 32.0 / 80.0))
        angle = np.arccos(np.clip(np.dot(ray.direction, camera.forward), -1, 1))
        assert angle == pytest.approx(expected, abs=1e-9)

    def test_project_roundtrip(self, camera):
        rng = np.random.default_rng(21)
        px = rng.uniform(0, 63, size=200)
        py = rng.uniform(0, 63, size=200)
        o, d = camera.generate_rays(np.floor(px), np.floor(py),
                                    px % 1.0, py % 1.0)
        pts = o + d * rng.uniform(0.5, 5.0, size=(200, 1))
        qx, qy, z = camera.project(pts)
        assert np.all(z > 0)
        assert np.all(np.abs(qx - px) <= 1e-4)
        assert np.all(np.abs(qy - py) <= 1e-4)

    def test_out_of_range_pixel_raises(self, camera):
        with pytest.raises(ValueError):
            camera.generate_ray(64, 0)

    def test_rotation_validated(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(SceneFormatError):
            Camera(m, 80, 80, 32, 32, 64, 64)


class TestSdfGrid:
    @pytest.fixture
    def sphere_grid(self):
        def sphere(p):
            return np.linalg.norm(p, axis=-1) - 1.0
        return DenseSDFGrid.from_callable(
            sphere, (33, 33, 33), [-1.5, -1.5, -1.5], [1.5, 1.5, 1.5])

    def test_center_value(self, sphere_grid):
        v = sphere_grid.eval(np.zeros(3))
        cell = np.linalg.norm(sphere_grid.cell_size)
        assert abs(v - (-1.0)) <= cell

    def test_node_value_exact(self, sphere_grid):
        # node (8, 16, 24) in a 33^3 grid on [-1.5, 1.5]
        p = np.array([-1.5 + 8 * 3 / 32, 0.0, -1.5 + 24 * 3 / 32])
        assert sphere_grid.eval(p) == pytest.approx(
            sphere_grid.values[8, 16, 24], abs=1e-12)

    def test_surface_values_bounded_by_cell_diagonal(self, sphere_grid):
        rng = np.random.default_rng(31)
        d = rng.standard_normal((500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        vals = sphere_grid.eval(d)  # points exactly on the unit sphere
        assert np.all(np.abs(vals) <= np.linalg.norm(sphere_grid.cell_size))

    def test_outside_box_raises(self, sphere_grid):
        with pytest.raises(OutOfDomainError):
            sphere_grid.eval(np.array([2.0, 0.0, 0.0]))

    def test_blob_roundtrip(self, sphere_grid):
        blob = sphere_grid.to_blob()
        g2 = DenseSDFGrid.from_blob(sphere_grid.resolution,
                                    sphere_grid.bbox_min,
                                    sphere_grid.bbox_max, blob)
        assert g2.to_blob() == blob


class TestMeshValidation:
    def test_degenerate_triangle_rejected(self):
        v = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
        with pytest.raises(SceneFormatError):
            TriangleMesh(v, [[0, 1, 2]])

    def test_index_out_of_range(self):
        with pytest.raises(SceneFormatError):
            TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_flashlight_clearance_enforced(self, tri_scene=None):
        v = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
        scene = make_scene(v, [[0, 1, 2]])
        with pytest.raises(SceneFormatError):
            scene.check_flashlight_clearance(np.array([0.25, 0.25, 1e-6]))
        scene.check_flashlight_clearance(np.array([0.25, 0.25, 1.0]))
