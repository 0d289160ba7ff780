"""Light-transport estimators.

The only emitter is the flashlight (an isotropic point light), so every
light contribution comes from next-event estimation: BSDF rays can never
hit the light, and no MIS is needed. A path of depth D performs next-event
estimation at each of its D surface vertices; the bounce-1 connection is
the `direct` component and bounces >= 2 form the `indirect` component.

The one-bounce cache estimator replaces the path tail after the first
vertex with a query into a frozen radiance cache, gated by mesh-cast
visibility at the queried point.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .brdf import eval_brdf, sample_brdf
from .core import RngStream
from .scene import (
    FLASHLIGHT_CLEARANCE,
    CaptureFrame,
    Scene,
    intersect_batch,
    visibility_batch,
)

RENDER_MODES = ("path", "direct", "cache", "naive_cache")


class InvalidSceneError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


def worker_count() -> int:
    """Worker cap for tile parallelism, from GLOWLAB_THREADS."""
    env = os.environ.get("GLOWLAB_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


@dataclass
class RadianceSplit:
    """Direct (bounce 1) and indirect (bounces >= 2) radiance."""

    direct: np.ndarray
    indirect: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.direct + self.indirect


@dataclass
class RenderConfig:
    mode: str = "path"
    spp: int = 16
    max_depth: int = 6
    m_cache: int = 1       # cache-query branch count per primary hit
    seed: int = 0
    tile: int = 16

    def __post_init__(self):
        if self.mode not in RENDER_MODES:
            raise InvalidConfigError(f"unknown render mode {self.mode!r}")
        if self.spp < 1 or self.max_depth < 1 or self.m_cache < 1:
            raise InvalidConfigError("spp, max_depth and m_cache must be >= 1")


def _materials_at(scene, materials, faces):
    mats = materials if materials is not None else scene.materials
    ids = scene.mesh.material_ids[faces]
    return mats.albedo[ids], mats.roughness[ids]


def direct_radiance(scene, position, normal, face, wo, x_l, materials=None):
    """Analytic next-event direct term: V * f * max(cos, 0) * I / r^2.

    Deterministic (no Monte Carlo). `x_l` may be a single point or one per
    row. Raises if any surface point is inside the flashlight clearance.
    """
    position = np.atleast_2d(position)
    normal = np.atleast_2d(normal)
    wo = np.atleast_2d(wo)
    face = np.atleast_1d(face)
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), position.shape)

    to_light = x_l - position
    r2 = np.sum(to_light * to_light, axis=1)
    r = np.sqrt(r2)
    if np.any(r < FLASHLIGHT_CLEARANCE):
        raise InvalidSceneError("surface point inside flashlight clearance")
    w_l = to_light / r[:, None]
    cos_l = np.maximum(np.sum(normal * w_l, axis=1), 0.0)

    albedo, rough = _materials_at(scene, materials, face)
    f = eval_brdf(albedo, rough, scene.materials.specular, normal, w_l, wo)
    out = f * (cos_l / r2)[:, None] * scene.flashlight.intensity

    # Shadow rays only where something would be contributed.
    lit = np.any(out > 0, axis=1)
    vis = np.zeros(len(position))
    if np.any(lit):
        vis[lit] = visibility_batch(scene, position[lit], x_l[lit])
    return out * vis[:, None]


def _sample_bounce(scene, position, normal, face, wo, rng, materials=None):
    """One BSDF sample per row: returns (wi, weight f*cos/pdf, valid)."""
    albedo, rough = _materials_at(scene, materials, face)
    n = len(position)
    u = rng.uniform((n, 3))
    s = sample_brdf(albedo, rough, scene.materials.specular, normal, wo,
                    u[:, 0], u[:, 1], u[:, 2])
    cos_i = np.maximum(np.sum(normal * s.direction, axis=1), 0.0)
    w = np.zeros((n, 3))
    ok = s.valid & (s.pdf > 0)
    w[ok] = s.f[ok] * (cos_i[ok] / s.pdf[ok])[:, None]
    return s.direction, w, ok


def eval_cache_at(scene, cache, position, wo, x_l):
    """Query a cache at surface points, with mesh-cast light visibility."""
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), position.shape)
    vis = visibility_batch(scene, position, x_l)
    return cache.eval(position, wo, x_l, vis)


def surface_gather(scene, position, normal, face, wo, x_l, cache, rng,
                   materials=None, m_samples=1):
    """One-bounce gather of the full cache from surfaces.

    Monte Carlo estimate of the indirect component at (x, wo, x_l): a BSDF
    sample reaches x', where the full cache (visibility-gated direct part
    plus indirect part) is queried. The next-event light term at x itself is
    excluded. Misses contribute zero (darkroom).
    """
    position = np.atleast_2d(position)
    normal = np.atleast_2d(normal)
    wo = np.atleast_2d(wo)
    face = np.atleast_1d(face)
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), position.shape)
    n = len(position)
    acc = np.zeros((n, 3))
    for _ in range(m_samples):
        wi, weight, ok = _sample_bounce(scene, position, normal, face, wo,
                                        rng, materials)
        if not np.any(ok):
            continue
        idx = np.flatnonzero(ok)
        h = intersect_batch(scene, position[idx], wi[idx],
                            t_min=scene.shadow_eps)
        hit_idx = idx[h.mask]
        if hit_idx.size:
            lc = eval_cache_at(scene, cache, h.position[h.mask],
                               -wi[hit_idx], x_l[hit_idx])
            acc[hit_idx] += weight[hit_idx] * lc
    return acc / m_samples


def transport_estimate(scene, position, normal, face, wo, x_l, cache, rng,
                       m_samples=1, materials=None):
    """One application of the transport operator to a frozen cache.

    Analytic next-event direct term plus the one-bounce cache gather; this
    is the whole-radiance estimate the cache render modes use per camera
    sample.
    """
    direct = direct_radiance(scene, position, normal, face, wo, x_l, materials)
    gather = surface_gather(scene, position, normal, face, wo, x_l, cache,
                            rng, materials, m_samples)
    return direct + gather


# ---------------------------------------------------------------------------
# Path tracing


@dataclass
class PathVertices:
    """Vertices of a traced path batch, one record per bounce.

    Bounce k holds the rays still alive at depth k: indices into the
    original batch, surface point data, outgoing direction and the
    accumulated BSDF throughput up to (not including) that vertex's
    next-event connection. The records are light-independent, so one trace
    can be shaded against many light positions.
    """

    idx: list = field(default_factory=list)
    position: list = field(default_factory=list)
    normal: list = field(default_factory=list)
    face: list = field(default_factory=list)
    wo: list = field(default_factory=list)
    beta: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.idx)


def _walk_from_hits(scene, idx, hit, arrive_dir, beta, rng, depth,
                    materials=None) -> PathVertices:
    """Record vertices of paths entering at `hit` with throughput `beta`."""
    out = PathVertices()
    pos = hit.position[hit.mask]
    nrm = hit.shading_normal[hit.mask]
    fac = hit.face[hit.mask]
    wo = -arrive_dir
    for k in range(depth):
        out.idx.append(idx)
        out.position.append(pos)
        out.normal.append(nrm)
        out.face.append(fac)
        out.wo.append(wo)
        out.beta.append(beta)
        if k == depth - 1:
            break
        wi, weight, ok = _sample_bounce(scene, pos, nrm, fac, wo, rng,
                                        materials)
        alive = ok & np.any(weight > 0, axis=1)
        if not np.any(alive):
            break
        h = intersect_batch(scene, pos[alive], wi[alive],
                            t_min=scene.shadow_eps)
        if not np.any(h.mask):
            break
        keep = np.flatnonzero(alive)[h.mask]
        idx = idx[keep]
        beta = beta[keep] * weight[keep]
        pos = h.position[h.mask]
        nrm = h.shading_normal[h.mask]
        fac = h.face[h.mask]
        wo = -wi[keep]
    return out


def trace_path_vertices(scene, origins, directions, rng, depth,
                        materials=None) -> PathVertices:
    """Trace BSDF paths, recording every surface vertex for later shading."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    h = intersect_batch(scene, origins, directions)
    idx = np.flatnonzero(h.mask)
    if idx.size == 0:
        return PathVertices()
    return _walk_from_hits(scene, idx, h, directions[idx],
                           np.ones((idx.size, 3)), rng, depth, materials)


def shade_vertices(scene, verts: PathVertices, x_l, n_rays, materials=None):
    """Next-event contributions per bounce: (depth, n_rays, 3) array.

    `x_l` may be a single light position or one per original ray.
    """
    contrib = np.zeros((max(verts.depth, 1), n_rays, 3))
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), (n_rays, 3))
    for k in range(verts.depth):
        idx = verts.idx[k]
        if idx.size == 0:
            continue
        nee = direct_radiance(scene, verts.position[k], verts.normal[k],
                              verts.face[k], verts.wo[k], x_l[idx], materials)
        contrib[k, idx] = verts.beta[k] * nee
    return contrib


def _fold_indirect(contrib):
    # Fixed left-to-right fold over bounces >= 2; adding the direct bounce
    # last keeps split and undecomposed totals bitwise-commutable.
    ind = np.zeros_like(contrib[0])
    for k in range(1, len(contrib)):
        ind += contrib[k]
    return ind


def path_trace(scene, origins, directions, x_l, rng, depth,
               materials=None) -> RadianceSplit:
    """Depth-limited path tracer with next-event estimation at every bounce."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    n = len(origins)
    verts = trace_path_vertices(scene, origins, directions, rng, depth,
                                materials)
    contrib = shade_vertices(scene, verts, x_l, n, materials)
    return RadianceSplit(direct=contrib[0].copy(),
                         indirect=_fold_indirect(contrib))


def path_trace_total(scene, origins, directions, x_l, rng, depth,
                     materials=None) -> np.ndarray:
    """Same estimator without the direct/indirect bookkeeping."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    verts = trace_path_vertices(scene, origins, directions, rng, depth,
                                materials)
    contrib = shade_vertices(scene, verts, x_l, len(origins), materials)
    return _fold_indirect(contrib) + contrib[0]


# ---------------------------------------------------------------------------
# Image rendering


def _estimate_samples(scene, origins, dirs, x_l, cfg, cache, materials, rng):
    """Per-sample radiance for one tile's ray batch under the chosen mode."""
    if cfg.mode == "path":
        return path_trace(scene, origins, dirs, x_l, rng, cfg.max_depth,
                          materials).total
    h = intersect_batch(scene, origins, dirs)
    vals = np.zeros((len(origins), 3))
    if not np.any(h.mask):
        return vals
    m = h.mask
    pos, nrm, fac = h.position[m], h.shading_normal[m], h.face[m]
    wo = -dirs[m]
    if cfg.mode == "direct":
        vals[m] = direct_radiance(scene, pos, nrm, fac, wo, x_l, materials)
    else:
        vals[m] = transport_estimate(scene, pos, nrm, fac, wo, x_l, cache,
                                     rng, cfg.m_cache, materials)
    return vals


def render_image(scene, frame: CaptureFrame, cfg: RenderConfig, cache=None,
                 materials=None) -> np.ndarray:
    """Render one capture viewpoint to a (H, W, 3) linear HDR image.

    Per-pixel mean over cfg.spp jittered primary rays. Pixel tiles own
    independent RNG streams derived from (seed, tile index), so the output
    is bitwise identical for any worker count.
    """
    if cfg.mode in ("cache", "naive_cache") and cache is None:
        raise InvalidConfigError(f"mode {cfg.mode!r} requires a cache")
    cam = frame.camera
    x_l = frame.light_position
    h_img, w_img = cam.height, cam.width
    image = np.zeros((h_img, w_img, 3))
    tiles = []
    for ty in range(0, h_img, cfg.tile):
        for tx in range(0, w_img, cfg.tile):
            tiles.append((ty, tx))

    base = RngStream(cfg.seed, 0x7114E)

    def run_tile(t):
        ty, tx = tiles[t]
        th = min(cfg.tile, h_img - ty)
        tw = min(cfg.tile, w_img - tx)
        stream = base.split(t)
        ys, xs = np.mgrid[ty:ty + th, tx:tx + tw]
        px = np.tile(xs.reshape(-1), cfg.spp).astype(np.float64)
        py = np.tile(ys.reshape(-1), cfg.spp).astype(np.float64)
        u = stream.uniform((len(px), 2))
        o, d = cam.generate_rays(px, py, u[:, 0], u[:, 1])
        vals = _estimate_samples(scene, o, d, x_l, cfg, cache, materials,
                                 stream)
        tile_img = vals.reshape(cfg.spp, th * tw, 3).mean(axis=0)
        return t, tile_img.reshape(th, tw, 3)

    workers = worker_count()
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, range(len(tiles))))
    else:
        results = [run_tile(t) for t in range(len(tiles))]
    for t, tile_img in results:
        ty, tx = tiles[t]
        image[ty:ty + tile_img.shape[0], tx:tx + tile_img.shape[1]] = tile_img
    return image


# ---------------------------------------------------------------------------
# Shadow sweep (continuity harness)


def locate_surface_point(scene, x, wo):
    """Resolve a point known to lie on the mesh into a hit record."""
    x = np.asarray(x, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    off = max(1e-3 * scene.diagonal, 10 * scene.shadow_eps)
    h = intersect_batch(scene, (x + off * wo)[None, :], -wo[None, :])
    if not h.mask[0] or np.linalg.norm(h.position[0] - x) > 1e-3 * scene.diagonal:
        raise InvalidSceneError("anchor point does not lie on a visible surface")
    return h


def shadow_sweep(scene, x, wo, light_positions, spp, seed=0, depth=6,
                 materials=None):
    """Direct and indirect radiance at (x, wo) for each light position.

    The direct term is the deterministic next-event value. The indirect
    term Monte Carlo gathers full path contributions; the same path tree
    (common random numbers) is reused for every light position so adjacent
    differences reflect the light motion, not resampling noise.
    """
    light_positions = np.atleast_2d(np.asarray(light_positions, dtype=np.float64))
    scene.check_flashlight_clearance(light_positions)
    h = locate_surface_point(scene, x, wo)
    pos = np.repeat(h.position, spp, axis=0)
    nrm = np.repeat(h.shading_normal, spp, axis=0)
    fac = np.repeat(h.face, spp)
    wo_b = np.broadcast_to(wo, (spp, 3))

    rng = RngStream(seed, 0x5EE9)
    wi, weight, ok = _sample_bounce(scene, pos, nrm, fac, wo_b, rng, materials)
    idx = np.flatnonzero(ok)
    verts = PathVertices()
    if idx.size:
        h2 = intersect_batch(scene, pos[idx], wi[idx], t_min=scene.shadow_eps)
        live = idx[h2.mask]
        if live.size:
            verts = _walk_from_hits(scene, live, h2, wi[live], weight[live],
                                    rng, depth - 1, materials)

    out = []
    for x_l in light_positions:
        direct = direct_radiance(scene, h.position, h.shading_normal, h.face,
                                 wo[None, :], x_l, materials)[0]
        contrib = shade_vertices(scene, verts, x_l, spp, materials)
        indirect = (_fold_indirect(contrib) + contrib[0]).mean(axis=0)
        out.append(RadianceSplit(direct=direct, indirect=indirect))
    return out
