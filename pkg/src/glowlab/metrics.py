"""Evaluation metrics and material-buffer rendering.

Re-rendering error clips both images to [0, 1] before the MSE so hot pixels
cannot dominate. Albedo error removes the global per-channel scale first
(the closed-form least-squares factor), matching how flashlight intensity
and albedo trade off against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream
from .scene import intersect_batch


def clip01(x):
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def metric_mse_clipped(pred, gt) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"image shape mismatch {pred.shape} vs {gt.shape}")
    d = clip01(pred) - clip01(gt)
    return float(np.mean(d * d))


def albedo_scale_factors(pred, gt):
    """Per-channel least-squares scale s* = <pred, gt> / <pred, pred>."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    num = np.sum(p * g, axis=0)
    den = np.sum(p * p, axis=0)
    return np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)


def metric_albedo_scale_invariant(pred, gt) -> float:
    """MSE after the optimal per-channel rescale of pred, both clipped."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shape mismatch {pred.shape} vs {gt.shape}")
    s = albedo_scale_factors(pred, gt)
    d = clip01(pred * s) - clip01(gt)
    return float(np.mean(d * d))


@dataclass
class MetricsReport:
    rerender_mse: dict = field(default_factory=dict)
    albedo_mse: dict = field(default_factory=dict)
    roughness_mse: dict = field(default_factory=dict)

    def add(self, scene_name, rerender, albedo, roughness):
        for store, v in ((self.rerender_mse, rerender),
                         (self.albedo_mse, albedo),
                         (self.roughness_mse, roughness)):
            if v is not None:
                store[scene_name] = float(v)

    def to_dict(self) -> dict:
        def with_mean(d):
            out = dict(d)
            if d:
                out["mean"] = float(np.mean(list(d.values())))
            return out
        return {
            "rerender_mse": with_mean(self.rerender_mse),
            "albedo_scale_invariant_mse": with_mean(self.albedo_mse),
            "roughness_mse": with_mean(self.roughness_mse),
        }


def render_material_buffers(scene, frame, materials=None, spp=16, seed=0):
    """Per-pixel albedo (H, W, 3) and roughness (H, W) at the primary hit.

    Averaged over jittered primary rays; background pixels are zero.
    """
    cam = frame.camera
    h_img, w_img = cam.height, cam.width
    stream = RngStream(seed, 0xA1B)
    ys, xs = np.mgrid[0:h_img, 0:w_img]
    px = np.tile(xs.reshape(-1), spp).astype(np.float64)
    py = np.tile(ys.reshape(-1), spp).astype(np.float64)
    u = stream.uniform((len(px), 2))
    o, d = cam.generate_rays(px, py, u[:, 0], u[:, 1])
    hit = intersect_batch(scene, o, d)
    alb = np.zeros((len(px), 3))
    rgh = np.zeros(len(px))
    if np.any(hit.mask):
        alb[hit.mask] = scene.face_albedo(hit.face[hit.mask], materials)
        rgh[hit.mask] = scene.face_roughness(hit.face[hit.mask], materials)
    alb = alb.reshape(spp, h_img, w_img, 3).mean(axis=0)
    rgh = rgh.reshape(spp, h_img, w_img).mean(axis=0)
    return alb, rgh
