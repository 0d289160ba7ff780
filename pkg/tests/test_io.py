import json
import struct
import zlib

import numpy as np
import pytest

from glowlab.dataset import ManifestError, load_dataset, make_dataset
from glowlab.metrics import (
    metric_albedo_scale_invariant,
    metric_mse_clipped,
    render_material_buffers,
)
from glowlab.pfm import (
    PfmFormatError,
    read_pfm,
    write_pfm,
    write_png16_linear,
    write_png_preview,
)
from glowlab.scene import load_scene, save_scene
from glowlab.scenes import build_plane_scene, default_cameras
from glowlab.training import load_materials, save_materials


class TestPfm:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((17, 23, 3)).astype(np.float32) * 10
        path = str(tmp_path / "x.pfm")
        write_pfm(path, img)
        back = read_pfm(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, img)
        write_pfm(str(tmp_path / "y.pfm"), back)
        assert (tmp_path / "x.pfm").read_bytes() == (tmp_path / "y.pfm").read_bytes()

    def test_known_1x1_bytes(self, tmp_path):
        # hand-assembled little-endian 1x1 color PFM holding (1.5, 0.25, -2)
        payload = struct.pack("<3f", 1.5, 0.25, -2.0)
        blob = b"PF\n1 1\n-1.0\n" + payload
        p = tmp_path / "one.pfm"
        p.write_bytes(blob)
        img = read_pfm(str(p))
        assert img.shape == (1, 1, 3)
        assert tuple(img[0, 0]) == (1.5, 0.25, -2.0)

    def test_big_endian_scale_flag(self, tmp_path):
        payload = struct.pack(">3f", 0.5, 1.0, 2.0)
        p = tmp_path / "be.pfm"
        p.write_bytes(b"PF\n1 1\n1.0\n" + payload)
        img = read_pfm(str(p))
        assert tuple(img[0, 0]) == (0.5, 1.0, 2.0)

    def test_grayscale(self, tmp_path):
        img = np.arange(6, dtype=np.float32).reshape(2, 3)
        p = str(tmp_path / "g.pfm")
        write_pfm(p, img)
        assert np.array_equal(read_pfm(p), img)

    def test_row_order_bottom_up(self, tmp_path):
        # PFM stores the bottom row first; top-left pixel must be last row
        img = np.zeros((2, 1, 3), dtype=np.float32)
        img[0, 0] = (1, 2, 3)   # top row
        img[1, 0] = (4, 5, 6)   # bottom row
        p = tmp_path / "o.pfm"
        write_pfm(str(p), img)
        raw = p.read_bytes()
        floats = np.frombuffer(raw[-24:], dtype="<f4")
        assert tuple(floats[:3]) == (4, 5, 6)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.pfm"
        p.write_bytes(b"PX\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(PfmFormatError):
            read_pfm(str(p))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.pfm"
        p.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(PfmFormatError):
            read_pfm(str(p))


class TestPng:
    def test_preview_is_valid_png(self, tmp_path):
        img = np.random.default_rng(1).uniform(0, 2, size=(8, 9, 3))
        p = tmp_path / "p.png"
        write_png_preview(str(p), img)
        raw = p.read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        # IHDR geometry and 8-bit truecolor
        assert raw[8:16] == struct.pack(">I", 13) + b"IHDR"
        w, h, depth, ctype = struct.unpack(">IIBB", raw[16:26])
        assert (w, h, depth, ctype) == (9, 8, 8, 2)

    def test_png16_scanlines_decode(self, tmp_path):
        img = np.full((2, 2, 3), 0.5)
        p = tmp_path / "l.png"
        write_png16_linear(str(p), img)
        raw = p.read_bytes()
        idat_at = raw.find(b"IDAT")
        (length,) = struct.unpack(">I", raw[idat_at - 4:idat_at])
        data = zlib.decompress(raw[idat_at + 4:idat_at + 4 + length])
        px = np.frombuffer(data[1:13], dtype=">u2")
        assert np.all(px == round(0.5 * 65535))

    def test_deterministic_bytes(self, tmp_path):
        img = np.random.default_rng(2).uniform(0, 1, size=(6, 6, 3))
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        write_png_preview(str(a), img)
        write_png_preview(str(b), img)
        assert a.read_bytes() == b.read_bytes()


class TestMetrics:
    def test_identical_zero(self):
        img = np.random.default_rng(3).uniform(0, 1, size=(4, 4, 3))
        assert metric_mse_clipped(img, img) == 0.0

    def test_clipping_saturates(self):
        assert metric_mse_clipped(np.full((2, 2, 3), 2.0),
                                  np.full((2, 2, 3), 1.0)) == 0.0

    def test_plain_difference(self):
        assert metric_mse_clipped(np.full((2, 2, 3), 0.25),
                                  np.full((2, 2, 3), 0.75)) == pytest.approx(0.25)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            metric_mse_clipped(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))

    def test_scale_absorbed(self):
        gt = np.random.default_rng(4).uniform(0.1, 0.5, size=(8, 8, 3))
        assert metric_albedo_scale_invariant(2.0 * gt, gt) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_prediction(self):
        pred = np.zeros((1, 2, 3))
        pred[0, 0] = (1, 1, 1)
        gt = np.zeros((1, 2, 3))
        gt[0, 1] = (0.5, 0.5, 0.5)
        got = metric_albedo_scale_invariant(pred, gt)
        assert got == pytest.approx(np.mean(np.clip(gt, 0, 1) ** 2))

    def test_matches_grid_search_oracle(self):
        # the scale factor minimizes the unclipped least squares; the grid
        # scan over s in [0, 10] step 1e-4 must land on the same metric
        rng = np.random.default_rng(5)
        ss = np.arange(0.0, 10.0, 1e-4)
        for _ in range(100):
            pred = rng.uniform(0, 1.2, size=(6, 6, 3))
            gt = rng.uniform(0, 1, size=(6, 6, 3))
            fast = metric_albedo_scale_invariant(pred, gt)
            per_channel = []
            for c in range(3):
                p, g = pred[..., c].ravel(), gt[..., c].ravel()
                errs = np.sum((ss[:, None] * p[None, :] - g[None, :]) ** 2,
                              axis=1)
                per_channel.append(ss[np.argmin(errs)])
            d = np.clip(pred * np.array(per_channel), 0, 1) - np.clip(gt, 0, 1)
            best = float(np.mean(d * d))
            assert abs(fast - best) <= 1e-6


class TestDataset:
    def small_dataset(self, tmp_path, intensity=(10.0, 10.0, 10.0), spp=4,
                      seed=0, name="ds"):
        scene = build_plane_scene(intensity=intensity)
        cams = default_cameras("plane", 4, seed=seed, width=8, height=8)
        out = str(tmp_path / name)
        manifest = make_dataset(scene, cams, out, spp=spp, seed=seed, n_val=1)
        return out, manifest

    def test_deterministic_bytes(self, tmp_path):
        out1, _ = self.small_dataset(tmp_path, name="a")
        out2, _ = self.small_dataset(tmp_path, name="b")
        import pathlib
        for i in range(4):
            f1 = pathlib.Path(out1, f"frame_{i:04d}.pfm").read_bytes()
            f2 = pathlib.Path(out2, f"frame_{i:04d}.pfm").read_bytes()
            assert f1 == f2

    def test_zero_intensity_black_frames(self, tmp_path):
        out, _ = self.small_dataset(tmp_path, intensity=(0.0, 0.0, 0.0))
        img = read_pfm(f"{out}/frame_0000.pfm")
        assert np.all(img == 0)

    def test_spp_scaling_halves_variance(self, tmp_path):
        scene = build_plane_scene()
        cam = default_cameras("plane", 1, seed=3, width=8, height=8)[0]
        from glowlab.scene import CaptureFrame
        from glowlab.transport import RenderConfig, render_image
        frame = CaptureFrame(camera=cam, light_position=cam.center)

        def pixel_variance(spp, n_runs=24):
            imgs = [render_image(scene, frame,
                                 RenderConfig(mode="path", spp=spp, seed=s))
                    for s in range(n_runs)]
            return np.var(np.stack(imgs), axis=0, ddof=1).mean()

        v1 = pixel_variance(8)
        v2 = pixel_variance(16)
        assert v1 / v2 == pytest.approx(2.0, rel=0.35)

    def test_colocation_exact(self, tmp_path):
        out, manifest = self.small_dataset(tmp_path, name="c")
        scene, train, val, mani = load_dataset(f"{out}/manifest.json")
        for frame in train + val:
            assert np.array_equal(frame.light_position,
                                  frame.camera.center + scene.flashlight.offset)

    def test_hash_verification(self, tmp_path):
        out, _ = self.small_dataset(tmp_path, name="d")
        # untouched dataset verifies
        load_dataset(f"{out}/manifest.json", verify=True)
        # corrupt one image
        p = tmp_path / "d" / "frame_0001.pfm"
        raw = bytearray(p.read_bytes())
        raw[-1] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ManifestError):
            load_dataset(f"{out}/manifest.json", verify=True)

    def test_clearance_violation_names_frame(self, tmp_path):
        scene = build_plane_scene()
        from glowlab.scene import look_at_camera
        bad = look_at_camera([0.2, 0.2, 5e-5], [0, 0, 0], [0, 1, 0],
                             8, 8, 4, 4, 8, 8)
        good = default_cameras("plane", 2, width=8, height=8)
        with pytest.raises(ManifestError, match="frame 1"):
            make_dataset(scene, [good[0], bad, good[1]],
                         str(tmp_path / "bad"), spp=1, seed=0, n_val=1)

    def test_scene_json_roundtrip(self, tmp_path):
        scene = build_plane_scene()
        scene.cameras = default_cameras("plane", 2, width=8, height=8)
        p = str(tmp_path / "scene.json")
        save_scene(scene, p)
        back = load_scene(p)
        assert np.array_equal(back.mesh.vertices, scene.mesh.vertices)
        assert np.array_equal(back.mesh.triangles, scene.mesh.triangles)
        assert np.array_equal(back.materials.albedo, scene.materials.albedo)
        assert back.materials.specular == scene.materials.specular
        assert len(back.cameras) == 2
        assert np.allclose(back.cameras[0].cam_to_world,
                           scene.cameras[0].cam_to_world)


class TestMaterialsBlob:
    def test_roundtrip(self, tmp_path):
        from glowlab.scene import MaterialSet
        rng = np.random.default_rng(6)
        mats = MaterialSet(rng.uniform(0, 1, size=(10, 3)),
                           rng.uniform(0, 1, size=10), 0.6)
        p = str(tmp_path / "m.glwm")
        save_materials(mats, p)
        back = load_materials(p)
        assert np.array_equal(back.albedo,
                              mats.albedo.astype("<f4").astype(np.float64))
        assert back.specular == 0.6
        # file-level roundtrip is bit-exact
        save_materials(back, str(tmp_path / "m2.glwm"))
        assert (tmp_path / "m.glwm").read_bytes() == \
            (tmp_path / "m2.glwm").read_bytes()


class TestMaterialBuffers:
    def test_background_zero_and_albedo_values(self):
        scene = build_plane_scene(albedo=(0.3, 0.5, 0.7))
        cam = default_cameras("plane", 1, width=16, height=16)[0]
        from glowlab.scene import CaptureFrame
        frame = CaptureFrame(camera=cam, light_position=cam.center)
        alb, rgh = render_material_buffers(scene, frame, spp=4, seed=0)
        hit = alb.sum(axis=2) > 0
        assert hit.any()
        assert np.allclose(alb[hit][np.all(np.isclose(
            alb[hit], [0.3, 0.5, 0.7]), axis=1)], [0.3, 0.5, 0.7])
