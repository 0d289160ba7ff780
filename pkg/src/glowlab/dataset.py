"""Synthetic capture dataset generation and loading.

A dataset is a directory with the scene file, one PFM image per frame, and
a JSON manifest recording poses, light positions, split tags, the
generation seed/spp and a sha256 per image. Loading can verify the hashes;
evaluation refuses to run on a manifest whose images have been altered.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .core import _mix64
from .pfm import read_pfm, write_pfm, write_png_preview
from .scene import CaptureFrame, camera_from_dict, load_scene, save_scene
from .transport import RenderConfig, render_image


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    scene_path: str
    seed: int
    spp: int
    frames: list  # dicts: image, camera, light_position, split, sha256

    def to_dict(self):
        return {"scene": self.scene_path, "seed": self.seed, "spp": self.spp,
                "frames": self.frames}

    @classmethod
    def from_dict(cls, d):
        return cls(scene_path=d["scene"], seed=int(d["seed"]),
                   spp=int(d["spp"]), frames=list(d["frames"]))


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def make_dataset(scene, cameras, out_dir, spp=256, seed=0, n_val=4,
                 max_depth=6, write_previews=False, log_fn=None):
    """Path-trace co-located captures for each camera and write a manifest.

    The light rides at camera center + flashlight offset; the last n_val
    frames are tagged as the validation split. Every byte of output is
    determined by (scene, cameras, spp, seed).
    """
    os.makedirs(out_dir, exist_ok=True)
    if len(cameras) <= n_val:
        raise ManifestError("need at least one training frame beyond the "
                            f"{n_val} validation frames")
    scene_path = os.path.join(out_dir, "scene.json")
    scene.cameras = list(cameras)
    save_scene(scene, scene_path)

    frames_meta = []
    for i, cam in enumerate(cameras):
        x_l = cam.center + scene.flashlight.offset
        try:
            scene.check_flashlight_clearance(x_l[None, :])
        except Exception as exc:
            raise ManifestError(f"frame {i}: {exc}") from exc
        frame = CaptureFrame(camera=cam, light_position=x_l)
        cfg = RenderConfig(mode="path", spp=spp, max_depth=max_depth,
                           seed=_mix64(seed, i))
        img = render_image(scene, frame, cfg)
        name = f"frame_{i:04d}.pfm"
        img_path = os.path.join(out_dir, name)
        write_pfm(img_path, img)
        if write_previews:
            write_png_preview(os.path.join(out_dir, f"frame_{i:04d}.png"), img)
        split = "val" if i >= len(cameras) - n_val else "train"
        frames_meta.append({
            "image": name,
            "cam_to_world": cam.cam_to_world.reshape(-1).tolist(),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "light_position": x_l.tolist(),
            "split": split,
            "sha256": _sha256_file(img_path),
        })
        if log_fn is not None:
            log_fn(i, len(cameras))

    manifest = DatasetManifest(scene_path="scene.json", seed=seed, spp=spp,
                               frames=frames_meta)
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_dataset(manifest_path, verify=False, with_images=True):
    """Load (scene, train_frames, val_frames) from a manifest directory."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path) as fh:
            manifest = DatasetManifest.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError) as exc:
        raise ManifestError(f"invalid manifest: {exc}") from exc
    scene = load_scene(os.path.join(base, manifest.scene_path))
    train, val = [], []
    for meta in manifest.frames:
        img_path = os.path.join(base, meta["image"])
        if not os.path.exists(img_path):
            raise ManifestError(f"missing image {meta['image']}")
        if verify and _sha256_file(img_path) != meta["sha256"]:
            raise ManifestError(f"hash mismatch for {meta['image']}")
        cam = camera_from_dict(meta)
        image = read_pfm(img_path).astype(np.float64) if with_images else None
        frame = CaptureFrame(camera=cam,
                             light_position=np.asarray(meta["light_position"]),
                             image=image)
        (val if meta["split"] == "val" else train).append(frame)
    return scene, train, val, manifest
