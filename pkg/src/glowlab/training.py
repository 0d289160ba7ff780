"""Losses, optimizer, and the cache/material training loops.

Gradient conventions: every loss returns (value, gradient) with the
gradient taken w.r.t. its stated argument. Monte Carlo material gradients
follow the independent-sample rule: the loss derivative is evaluated on one
render and the render Jacobian on a second render drawn from a different
RNG stream, so the product is an unbiased estimate of the gradient of the
loss of the expected render.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .brdf import eval_brdf, eval_brdf_grad, sample_brdf
from .cache import (
    DynamicRadianceCache,
    NaiveRadianceCache,
    mlp_backward,
    mlp_forward,
    snapshot,
)
from .core import RngStream
from .scene import MaterialSet, intersect_batch, visibility_batch
from .transport import (
    _sample_bounce,
    direct_radiance,
    eval_cache_at,
    path_trace,
    transport_estimate,
)


class TrainingDivergedError(RuntimeError):
    pass


class StreamReuseError(RuntimeError):
    """Two factors of a product estimator tried to share an RNG stream."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 512
    steps: int = 20_000
    snapshot_every: int = 512
    eps_recons: float = 1e-3
    saw_a: float = 2.0
    saw_b: float = 0.0
    lambda_prior: float = 1.0
    lambda_rough: float = 1e-2
    lambda_sfm: float = 0.0
    extra_bounce_weight: float = 1.0
    warmup_steps: int = 2000
    material_spp: int = 4
    material_lr: float | None = None  # falls back to learning_rate
    max_depth: int = 6
    m_cache: int = 1
    hidden: int = 128
    mlp_depth: int = 4
    seed: int = 0
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.snapshot_every < 1:
            raise ValueError("invalid training configuration")


# ---------------------------------------------------------------------------
# Deterministic losses


def loss_recons(pred, target, eps=1e-3):
    """Linearized log reconstruction loss with stop-gradient denominator.

    value = sum_channels ((pred - target) / (sg(pred) + eps))^2, and the
    gradient w.r.t. pred treats the denominator as a constant:
    2 (pred - target) / (pred + eps)^2.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    denom = pred + eps
    resid = (pred - target) / denom
    value = np.sum(resid * resid, axis=-1)
    grad = 2.0 * (pred - target) / (denom * denom)
    if value.size == 1:
        return float(value[0]), grad[0]
    return value, grad


def saw_weight(theta, a, b):
    """Surface-angle weight: cos(a (t - pi/4)) below pi/4, cos(b ...) above,
    both clamped at zero."""
    theta = np.asarray(theta, dtype=np.float64)
    below = np.maximum(np.cos(a * (theta - np.pi / 4.0)), 0.0)
    above = np.maximum(np.cos(b * (theta - np.pi / 4.0)), 0.0)
    return np.where(theta <= np.pi / 4.0, below, above)


def loss_rough(roughness, segment_ids):
    """Within-segment roughness variance with the segment mean held constant."""
    roughness = np.asarray(roughness, dtype=np.float64)
    segment_ids = np.asarray(segment_ids)
    if roughness.shape != segment_ids.shape:
        raise ValueError("roughness and segment labels must align per face")
    if np.any(segment_ids < 0):
        raise ValueError("every face must carry a segment label")
    n_seg = int(segment_ids.max()) + 1
    sums = np.bincount(segment_ids, weights=roughness, minlength=n_seg)
    counts = np.bincount(segment_ids, minlength=n_seg)
    means = sums / np.maximum(counts, 1)
    dev = roughness - means[segment_ids]
    return float(np.sum(dev * dev)), 2.0 * dev


def loss_sfm(grid, points):
    """Mean |S(x)| over keypoints; gradient w.r.t. the grid node values."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    vals, (idx, wts) = grid.eval_with_node_weights(points)
    value = float(np.mean(np.abs(vals)))
    grad = np.zeros(grid.values.size)
    signs = np.sign(vals) / len(points)
    np.add.at(grad, idx.reshape(-1), (wts * signs[:, None]).reshape(-1))
    return value, grad.reshape(grid.values.shape)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, params, gradient, lr):
    """Bias-corrected Adam update; returns the new parameter vector."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        bad = int(np.sum(~np.isfinite(gradient)))
        raise TrainingDivergedError(
            f"non-finite gradient ({bad} of {gradient.size} entries)")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * gradient ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Material parameters


def _sigmoid(u):
    # numerically stable; clipped into the open interval so extreme
    # optimizer excursions can never produce exactly 0 or 1
    out = np.where(u >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(u))),
                   np.exp(-np.abs(u)) / (1.0 + np.exp(-np.abs(u))))
    return np.clip(out, 1e-9, 1.0 - 1e-9)


class MaterialParamVector:
    """Per-face material parameters in unconstrained space.

    Albedo and roughness are sigmoid squashes of the stored values, so the
    optimizer can never leave (0, 1); gradients are chained through the
    squash derivative.
    """

    def __init__(self, u_albedo, u_rough, specular):
        self.u_albedo = np.asarray(u_albedo, dtype=np.float64)
        self.u_rough = np.asarray(u_rough, dtype=np.float64)
        self.specular = float(specular)

    @classmethod
    def initial(cls, n_faces, specular, albedo=0.5, roughness=0.5):
        logit = lambda p: np.log(p / (1.0 - p))
        return cls(np.full((n_faces, 3), logit(albedo)),
                   np.full(n_faces, logit(roughness)), specular)

    @property
    def albedo(self):
        return _sigmoid(self.u_albedo)

    @property
    def roughness(self):
        return _sigmoid(self.u_rough)

    def to_material_set(self) -> MaterialSet:
        return MaterialSet(self.albedo, self.roughness, self.specular)

    def pack(self):
        return np.concatenate([self.u_albedo.reshape(-1), self.u_rough])

    def unpack(self, flat):
        n = self.u_albedo.size
        self.u_albedo = flat[:n].reshape(self.u_albedo.shape).copy()
        self.u_rough = flat[n:].copy()

    def chain_to_unconstrained(self, grad_albedo, grad_rough):
        """Map gradients w.r.t. squashed values into unconstrained space."""
        a = self.albedo
        r = self.roughness
        ga = grad_albedo * a * (1.0 - a)
        gr = grad_rough * r * (1.0 - r)
        return np.concatenate([ga.reshape(-1), gr])


# ---------------------------------------------------------------------------
# Surface-point batches for the radiometric prior


def sample_surface_batch(scene, frames, rng: RngStream, n):
    """Surface points hit by rays cast from random training cameras.

    Every row carries the light position of its own frame. Rays that miss
    the scene are dropped, so the returned batch may be smaller than n.
    """
    n_frames = len(frames)
    f_idx = rng.integers(0, n_frames, size=n)
    u = rng.uniform((n, 4))
    pos = np.empty((n, 3))
    dirs = np.empty((n, 3))
    for fi in range(n_frames):
        rows = np.flatnonzero(f_idx == fi)
        if rows.size == 0:
            continue
        cam = frames[fi].camera
        px = np.floor(u[rows, 0] * cam.width)
        py = np.floor(u[rows, 1] * cam.height)
        o, d = cam.generate_rays(px, py, u[rows, 2], u[rows, 3])
        pos[rows] = o
        dirs[rows] = d
    h = intersect_batch(scene, pos, dirs)
    keep = h.mask
    lights = np.asarray([frames[i].light_position for i in f_idx])
    return {
        "position": h.position[keep],
        "normal": h.shading_normal[keep],
        "material": h.material[keep],
        "face": h.face[keep],
        "wo": -dirs[keep],
        "x_l": lights[keep],
        "frame": f_idx[keep],
    }


def _prior_terms(scene, cache, snap, batch, rng: RngStream, materials=None):
    """Radiometric prior residuals at surface points plus net gradients.

    Targets come from the frozen snapshot (and the analytic next-event
    term); gradients flow only into the live cache. Returns the summed
    loss terms, per-net gradient vectors (sum over the batch), and the
    gather hit points for reuse as extra-bounce samples.
    """
    pos, nrm, mat = batch["position"], batch["normal"], batch["material"]
    wo, x_l = batch["wo"], batch["x_l"]
    n = len(pos)
    if n == 0:
        zero = {name: np.zeros(net.n_params)
                for name, net in cache.nets().items()}
        return {"direct": 0.0, "indirect": 0.0, "count": 0}, zero, None

    vis = visibility_batch(scene, pos, x_l)
    target_direct = direct_radiance(scene, pos, nrm, batch["face"], wo, x_l,
                                    materials)

    # One-bounce gather of the frozen cache = indirect target.
    wi, weight, ok = _sample_bounce(scene, pos, nrm, batch["face"], wo, rng,
                                    materials)
    target_indirect = np.zeros((n, 3))
    aux = None
    idx = np.flatnonzero(ok)
    if idx.size:
        h2 = intersect_batch(scene, pos[idx], wi[idx], t_min=scene.shadow_eps)
        hit_rows = idx[h2.mask]
        if hit_rows.size:
            lc = eval_cache_at(scene, snap, h2.position[h2.mask],
                               -wi[hit_rows], x_l[hit_rows])
            target_indirect[hit_rows] = weight[hit_rows] * lc
            aux = {
                "position": h2.position[h2.mask],
                "normal": h2.shading_normal[h2.mask],
                "material": h2.material[h2.mask],
                "face": h2.face[h2.mask],
                "wo": -wi[hit_rows],
                "frame": batch["frame"][hit_rows],
            }

    if cache.kind == "dynamic":
        feats = cache.encode_inputs(pos, wo, x_l)
        out_d, acts_d = mlp_forward(cache.direct_net, feats)
        out_i, acts_i = mlp_forward(cache.indirect_net, feats)
        res_d = (out_d - target_direct) * vis[:, None]
        res_i = out_i - target_indirect
        loss_d = float(np.sum(res_d * res_d))
        loss_i = float(np.sum(res_i * res_i))
        grads = {
            "direct": mlp_backward(cache.direct_net, acts_d,
                                   2.0 * vis[:, None] * res_d),
            "indirect": mlp_backward(cache.indirect_net, acts_i, 2.0 * res_i),
        }
        terms = {"direct": loss_d, "indirect": loss_i, "count": n}
    else:
        out, acts = cache.eval_parts(pos, wo, x_l)
        target = target_direct + target_indirect
        res = out - target
        grads = {"full": mlp_backward(cache.net, acts, 2.0 * res)}
        terms = {"direct": 0.0, "indirect": float(np.sum(res * res)),
                 "count": n}
    return terms, grads, aux


def loss_prior(scene, cache, snap, batch, rng: RngStream, materials=None):
    """Mean radiometric prior loss and per-net gradient vectors."""
    terms, grads, _ = _prior_terms(scene, cache, snap, batch, rng, materials)
    n = max(terms["count"], 1)
    value = (terms["direct"] + terms["indirect"]) / n
    return value, {k: g / n for k, g in grads.items()}


def loss_extra_bounce(scene, cache, snap, secondary, light_pool,
                      rng: RngStream, materials=None):
    """Radiometric prior at secondary (one-bounce) points.

    Every secondary point is paired with a flashlight position drawn
    uniformly from the training frames, independent of the frame that spawned
    it, so regions never seen by any camera still receive supervision.
    """
    if secondary is None or len(secondary["position"]) == 0:
        return 0.0, {name: np.zeros(net.n_params)
                     for name, net in cache.nets().items()}
    n = len(secondary["position"])
    pick = rng.integers(0, len(light_pool), size=n)
    batch = dict(secondary)
    batch["x_l"] = np.asarray(light_pool)[pick]
    terms, grads, _ = _prior_terms(scene, cache, snap, batch, rng, materials)
    value = (terms["direct"] + terms["indirect"]) / n
    return value, {k: g / n for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Cache training


def windowed_medians(values, window=50):
    values = np.asarray(values, dtype=np.float64)
    n_win = len(values) // window
    if n_win == 0:
        return values[None, :].mean(axis=1)
    return np.median(values[:n_win * window].reshape(n_win, window), axis=1)


def cache_bounds(scene, frames):
    """Encoding bbox: mesh plus every light position, padded and nondegenerate."""
    lights = np.asarray([f.light_position for f in frames])
    lo = np.minimum(scene.bbox_min, lights.min(axis=0))
    hi = np.maximum(scene.bbox_max, lights.max(axis=0))
    pad = np.maximum(0.05 * (hi - lo), 1e-3 * np.max(hi - lo))
    return lo - pad, hi + pad


def make_cache(kind, scene, frames, cfg: TrainConfig):
    cls = {"dynamic": DynamicRadianceCache, "naive": NaiveRadianceCache}[kind]
    lo, hi = cache_bounds(scene, frames)
    return cls.create(lo, hi, hidden=cfg.hidden, depth=cfg.mlp_depth,
                      seed=cfg.seed)


def train_cache(scene, frames, kind, cfg: TrainConfig, materials=None,
                cache=None, log_fn=None):
    """Self-supervised cache training against the rendering-equation residual.

    Returns (cache, history); history rows carry the step index, each loss
    term and wall time. The frozen snapshot that provides gather targets is
    refreshed every cfg.snapshot_every steps.
    """
    if kind not in ("dynamic", "naive"):
        raise ValueError(f"unknown cache kind {kind!r}")
    if cache is None:
        cache = make_cache(kind, scene, frames, cfg)
    light_pool = np.asarray([f.light_position for f in frames])
    rng = RngStream(cfg.seed, 0x7247C8)
    states = {name: AdamState.for_params(net.n_params)
              for name, net in cache.nets().items()}
    snap = snapshot(cache, 0)
    history = []
    initial = None
    t0 = time.time()
    for step in range(cfg.steps):
        batch = sample_surface_batch(scene, frames, rng, cfg.batch_size)
        terms, grads, aux = _prior_terms(scene, cache, snap, batch, rng,
                                         materials)
        n = max(terms["count"], 1)
        value = cfg.lambda_prior * (terms["direct"] + terms["indirect"]) / n
        total_grads = {k: cfg.lambda_prior * g / n for k, g in grads.items()}

        extra_val = 0.0
        if cfg.extra_bounce_weight > 0.0:
            extra_val, extra_grads = loss_extra_bounce(
                scene, cache, snap, aux, light_pool, rng, materials)
            for k in total_grads:
                total_grads[k] += cfg.extra_bounce_weight * extra_grads[k]
        total = value + cfg.extra_bounce_weight * extra_val

        if initial is None:
            initial = max(total, 1e-12)
        if total > cfg.divergence_factor * initial:
            raise TrainingDivergedError(
                f"prior loss {total:.3e} exceeded {cfg.divergence_factor:.0e} "
                f"x initial {initial:.3e} at step {step}")

        for name, net in cache.nets().items():
            net.from_flat(adam_step(states[name], net.to_flat(),
                                    total_grads[name], cfg.learning_rate))

        history.append({"step": step, "prior": value, "extra": extra_val,
                        "total": total, "wall": time.time() - t0})
        if log_fn is not None:
            log_fn(history[-1])
        if (step + 1) % cfg.snapshot_every == 0:
            snap = snapshot(cache, step + 1)
    return cache, history


# ---------------------------------------------------------------------------
# Material gradient estimation


def _nee_with_grads(scene, mats: MaterialSet, pos, nrm, mat_ids, wo, x_l):
    """Next-event value and its albedo/roughness partials at surface points."""
    to_l = x_l - pos
    r2 = np.sum(to_l * to_l, axis=1)
    w_l = to_l / np.sqrt(r2)[:, None]
    cos_l = np.maximum(np.sum(nrm * w_l, axis=1), 0.0)
    vis = visibility_batch(scene, pos, x_l)
    geom = (vis * cos_l / r2)[:, None] * scene.flashlight.intensity

    albedo = mats.albedo[mat_ids]
    rough = mats.roughness[mat_ids]
    f = eval_brdf(albedo, rough, mats.specular, nrm, w_l, wo)
    ga, gr = eval_brdf_grad(albedo, rough, mats.specular, nrm, w_l, wo)
    return f * geom, ga * geom, gr * geom


def _bounce_with_grads(scene, mats, pos, nrm, mat_ids, wo, rng):
    """BSDF sample with weight w = f cos / pdf and its parameter partials.

    The sampling pdf is treated as detached: the derivative applies to the
    BRDF factor only, which keeps the estimator unbiased for the gradient
    of the underlying integral.
    """
    albedo = mats.albedo[mat_ids]
    rough = mats.roughness[mat_ids]
    n = len(pos)
    u = rng.uniform((n, 3))
    s = sample_brdf(albedo, rough, mats.specular, nrm, wo,
                    u[:, 0], u[:, 1], u[:, 2])
    cos_i = np.maximum(np.sum(nrm * s.direction, axis=1), 0.0)
    ok = s.valid & (s.pdf > 0)
    scale = np.where(ok, cos_i / np.where(ok, s.pdf, 1.0), 0.0)[:, None]
    w = s.f * scale
    ga, gr = eval_brdf_grad(albedo, rough, mats.specular, nrm, s.direction, wo)
    return s.direction, w, ga * scale, gr * scale, ok


def render_pixels(scene, origins, dirs, x_l, mats, mode, cache, rng,
                  depth, m_cache=1):
    """Radiance estimate per ray for one render mode (no gradients)."""
    if mode == "path":
        return path_trace(scene, origins, dirs, x_l, rng, depth, mats).total
    h = intersect_batch(scene, origins, dirs)
    vals = np.zeros((len(origins), 3))
    if not np.any(h.mask):
        return vals
    m = h.mask
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), origins.shape)
    if mode == "direct":
        vals[m] = direct_radiance(scene, h.position[m], h.shading_normal[m],
                                  h.face[m], -dirs[m], x_l[m], mats)
    else:
        vals[m] = transport_estimate(scene, h.position[m],
                                     h.shading_normal[m], h.face[m],
                                     -dirs[m], x_l[m], cache, rng,
                                     m_cache, mats)
    return vals


def render_pixels_grad(scene, origins, dirs, x_l, mats: MaterialSet, mode,
                       cache, rng, depth, upstream, grad_albedo, grad_rough,
                       m_cache=1):
    """Render estimate whose parameter Jacobian is folded against `upstream`.

    Scatter-adds sum_c upstream[r, c] * d value[r, c] / d phi into the dense
    per-material-id arrays grad_albedo (M, 3) and grad_rough (M,). Returns
    the per-ray radiance values.
    """
    n = len(origins)
    x_l = np.broadcast_to(np.asarray(x_l, dtype=np.float64), (n, 3))
    h = intersect_batch(scene, origins, dirs)
    vals = np.zeros((n, 3))
    if not np.any(h.mask):
        return vals
    m = np.flatnonzero(h.mask)
    pos = h.position[h.mask]
    nrm = h.shading_normal[h.mask]
    ids = h.material[h.mask]
    wo = -dirs[m]

    if mode in ("direct", "cache", "naive_cache"):
        nee, d_a, d_r = _nee_with_grads(scene, mats, pos, nrm, ids, wo, x_l[m])
        vals[m] = nee
        up = upstream[m]
        np.add.at(grad_albedo, ids, up * d_a)
        np.add.at(grad_rough, ids, np.sum(up * d_r, axis=1))
        if mode != "direct":
            for _ in range(m_cache):
                wi, w, wa, wr, ok = _bounce_with_grads(scene, mats, pos, nrm,
                                                       ids, wo, rng)
                live = np.flatnonzero(ok)
                if live.size == 0:
                    continue
                h2 = intersect_batch(scene, pos[live], wi[live],
                                     t_min=scene.shadow_eps)
                rows = live[h2.mask]
                if rows.size == 0:
                    continue
                lc = eval_cache_at(scene, cache, h2.position[h2.mask],
                                   -wi[rows], x_l[m][rows])
                vals[m[rows]] += w[rows] * lc / m_cache
                up_r = upstream[m[rows]] * lc / m_cache
                np.add.at(grad_albedo, ids[rows], up_r * wa[rows])
                np.add.at(grad_rough, ids[rows],
                          np.sum(up_r * wr[rows], axis=1))
        return vals

    if mode != "path":
        raise ValueError(f"unknown render mode {mode!r}")

    # Path mode: record per-bounce weights and next-event terms densely,
    # then apply the product rule pairwise over (weight bounce j, NEE
    # bounce k >= j) with exact exclusive products.
    W = np.ones((n, depth, 3))
    dWa = np.zeros((n, depth, 3))
    dWr = np.zeros((n, depth, 3))
    NEE = np.zeros((n, depth, 3))
    dNa = np.zeros((n, depth, 3))
    dNr = np.zeros((n, depth, 3))
    FACE = np.full((n, depth), -1, dtype=np.int64)

    idx = m
    for k in range(depth):
        nee, d_a, d_r = _nee_with_grads(scene, mats, pos, nrm, ids, wo,
                                        x_l[idx])
        NEE[idx, k] = nee
        dNa[idx, k] = d_a
        dNr[idx, k] = d_r
        FACE[idx, k] = ids
        if k == depth - 1:
            break
        wi, w, wa, wr, ok = _bounce_with_grads(scene, mats, pos, nrm, ids,
                                               wo, rng)
        alive = ok & np.any(w > 0, axis=1)
        if not np.any(alive):
            break
        h2 = intersect_batch(scene, pos[alive], wi[alive],
                             t_min=scene.shadow_eps)
        if not np.any(h2.mask):
            break
        keep = np.flatnonzero(alive)[h2.mask]
        W[idx[keep], k] = w[keep]
        dWa[idx[keep], k] = wa[keep]
        dWr[idx[keep], k] = wr[keep]
        idx = idx[keep]
        pos = h2.position[h2.mask]
        nrm = h2.shading_normal[h2.mask]
        ids = h2.material[h2.mask]
        wo = -wi[keep]

    # Throughput prefix A[:, k] = prod_{j<k} W[:, j].
    A = np.ones((n, depth + 1, 3))
    for k in range(depth):
        A[:, k + 1] = A[:, k] * W[:, k]
    for k in range(depth):
        vals += A[:, k] * NEE[:, k]

    for k in range(depth):
        fk = FACE[:, k]
        rows = fk >= 0
        if not np.any(rows):
            continue
        np.add.at(grad_albedo, fk[rows], (upstream * A[:, k] * dNa[:, k])[rows])
        np.add.at(grad_rough, fk[rows],
                  np.sum(upstream * A[:, k] * dNr[:, k], axis=1)[rows])
        for j in range(k):
            fj = FACE[:, j]
            rj = rows & (fj >= 0)
            if not np.any(rj):
                continue
            excl = A[:, j].copy()
            for j2 in range(j + 1, k):
                excl *= W[:, j2]
            ca = upstream * excl * dWa[:, j] * NEE[:, k]
            cr = upstream * excl * dWr[:, j] * NEE[:, k]
            np.add.at(grad_albedo, fj[rj], ca[rj])
            np.add.at(grad_rough, fj[rj], np.sum(cr, axis=1)[rj])
    return vals


def _pixel_batch(scene, frames, rng: RngStream, n, require_images=True):
    """Random (frame, integer pixel) pairs with their ground-truth colors."""
    n_frames = len(frames)
    f_idx = rng.integers(0, n_frames, size=n)
    u = rng.uniform((n, 2))
    px = np.empty(n, dtype=np.int64)
    py = np.empty(n, dtype=np.int64)
    target = np.zeros((n, 3))
    lights = np.empty((n, 3))
    for fi in range(n_frames):
        rows = np.flatnonzero(f_idx == fi)
        if rows.size == 0:
            continue
        cam = frames[fi].camera
        px[rows] = np.floor(u[rows, 0] * cam.width).astype(np.int64)
        py[rows] = np.floor(u[rows, 1] * cam.height).astype(np.int64)
        lights[rows] = frames[fi].light_position
        if require_images:
            img = frames[fi].image
            if img is None:
                raise ValueError("material optimization requires frame images")
            target[rows] = img[py[rows], px[rows]]
    return {"frame": f_idx, "px": px, "py": py, "target": target,
            "x_l": lights}


def _batch_rays(frames, batch, jitter):
    n = len(batch["px"])
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    for fi in np.unique(batch["frame"]):
        rows = np.flatnonzero(batch["frame"] == fi)
        cam = frames[fi].camera
        o, d = cam.generate_rays(batch["px"][rows].astype(np.float64),
                                 batch["py"][rows].astype(np.float64),
                                 jitter[rows, 0], jitter[rows, 1])
        origins[rows] = o
        dirs[rows] = d
    return origins, dirs


def _saw_weights_for_batch(scene, frames, batch, a, b):
    """Deterministic per-pixel surface-angle weights from center rays."""
    jitter = np.full((len(batch["px"]), 2), 0.5)
    origins, dirs = _batch_rays(frames, batch, jitter)
    h = intersect_batch(scene, origins, dirs)
    w = np.zeros(len(origins))
    if np.any(h.mask):
        to_l = batch["x_l"][h.mask] - h.position[h.mask]
        to_l /= np.linalg.norm(to_l, axis=1, keepdims=True)
        cos = np.clip(np.sum(h.shading_normal[h.mask] * to_l, axis=1), -1, 1)
        w[h.mask] = saw_weight(np.arccos(cos), a, b)
    return w


def _material_grad_pass(scene, frames, batch, mpv, mode, cache,
                        rng_value, rng_grad, cfg):
    """Shared body: value render on rng_value, Jacobian render on rng_grad."""
    mats = mpv.to_material_set()
    n_pix = len(batch["px"])
    spp = cfg.material_spp
    saw = _saw_weights_for_batch(scene, frames, batch, cfg.saw_a, cfg.saw_b)
    rep = {k: np.repeat(v, spp, axis=0) for k, v in batch.items()}

    jit1 = rng_value.uniform((n_pix * spp, 2))
    o1, d1 = _batch_rays(frames, rep, jit1)
    v1 = render_pixels(scene, o1, d1, rep["x_l"], mats, mode, cache,
                       rng_value, cfg.max_depth, cfg.m_cache)
    y1 = v1.reshape(n_pix, spp, 3).mean(axis=1)
    vals, dldy = loss_recons(y1, batch["target"], cfg.eps_recons)
    recon_val = float(np.mean(np.atleast_1d(vals) * saw))
    upstream_pix = np.atleast_2d(dldy) * saw[:, None] / (n_pix * spp)

    jit2 = rng_grad.uniform((n_pix * spp, 2))
    o2, d2 = _batch_rays(frames, rep, jit2)
    n_mat = len(mpv.u_albedo)
    ga = np.zeros((n_mat, 3))
    gr = np.zeros(n_mat)
    upstream = np.repeat(upstream_pix, spp, axis=0)
    render_pixels_grad(scene, o2, d2, rep["x_l"], mats, mode, cache,
                       rng_grad, cfg.max_depth, upstream, ga, gr, cfg.m_cache)
    return ga, gr, recon_val


def grad_material_unbiased(scene, frames, batch, mpv: MaterialParamVector,
                           mode, cache, rng_value: RngStream,
                           rng_grad: RngStream, cfg: TrainConfig):
    """Unbiased reconstruction-loss gradient over material parameters.

    The loss derivative comes from a render drawn on `rng_value`; the render
    Jacobian from an independent render on `rng_grad`. Sharing one stream
    between the two factors is refused: the correlated product is a biased
    estimate of the gradient of the loss of the expected render.
    """
    if rng_value.stream_id == rng_grad.stream_id:
        raise StreamReuseError(
            "loss-derivative and Jacobian renders must use distinct RNG streams")
    return _material_grad_pass(scene, frames, batch, mpv, mode, cache,
                               rng_value, rng_grad, cfg)


def grad_material_correlated(scene, frames, batch, mpv, mode, cache,
                             rng: RngStream, cfg: TrainConfig):
    """Single-sample-set chain rule, kept for estimator comparisons.

    Replays the exact same sample sequence for both factors by cloning the
    stream, which is what naive differentiation of one Monte Carlo render
    would do.
    """
    clone_a = RngStream(rng.seed, rng.stream_id)
    clone_b = RngStream(rng.seed, rng.stream_id)
    return _material_grad_pass(scene, frames, batch, mpv, mode, cache,
                               clone_a, clone_b, cfg)


# ---------------------------------------------------------------------------
# Material optimization loop


def optimize_materials(scene, frames, mode, cfg: TrainConfig, cache=None,
                       log_fn=None):
    """Recover per-face albedo/roughness on fixed mesh geometry.

    Cache modes alternate one cache-training step with one material step
    after a cache-only warm-up (materials frozen at the 0.5 init); path and
    direct modes run material steps only. Returns (MaterialParamVector,
    history).
    """
    n_mats = len(scene.materials.albedo)
    mpv = MaterialParamVector.initial(n_mats, scene.materials.specular)
    adam = AdamState.for_params(mpv.pack().size)
    uses_cache = mode in ("cache", "naive_cache")
    kind = "dynamic" if mode == "cache" else "naive"

    cache_states = None
    snap = None
    light_pool = np.asarray([f.light_position for f in frames])
    cache_rng = RngStream(cfg.seed, 0xCAC4E)
    if uses_cache:
        if cache is None:
            cache = make_cache(kind, scene, frames, cfg)
        cache_states = {name: AdamState.for_params(net.n_params)
                        for name, net in cache.nets().items()}
        snap = snapshot(cache, 0)

    def cache_step(step_no, mats):
        nonlocal snap
        batch = sample_surface_batch(scene, frames, cache_rng, cfg.batch_size)
        terms, grads, aux = _prior_terms(scene, cache, snap, batch, cache_rng,
                                         mats)
        n = max(terms["count"], 1)
        total_grads = {k: cfg.lambda_prior * g / n for k, g in grads.items()}
        if cfg.extra_bounce_weight > 0.0:
            _, eg = loss_extra_bounce(scene, cache, snap, aux, light_pool,
                                      cache_rng, mats)
            for k in total_grads:
                total_grads[k] += cfg.extra_bounce_weight * eg[k]
        for name, net in cache.nets().items():
            net.from_flat(adam_step(cache_states[name], net.to_flat(),
                                    total_grads[name], cfg.learning_rate))
        if (step_no + 1) % cfg.snapshot_every == 0:
            snap = snapshot(cache, step_no + 1)

    history = []
    initial = None
    t0 = time.time()
    mats_now = mpv.to_material_set()
    if uses_cache:
        for w in range(cfg.warmup_steps):
            cache_step(w, mats_now)

    pix_rng = RngStream(cfg.seed, 0xBA7C4)
    val_rng = RngStream(cfg.seed, 0x11A)
    grad_rng = RngStream(cfg.seed, 0x22B)
    segments = _material_segments(scene)
    for step in range(cfg.steps):
        mats_now = mpv.to_material_set()
        if uses_cache:
            cache_step(cfg.warmup_steps + step, mats_now)
        batch = _pixel_batch(scene, frames, pix_rng, cfg.batch_size)
        ga, gr, recon = grad_material_unbiased(
            scene, frames, batch, mpv, mode,
            snap if uses_cache else None,
            val_rng, grad_rng, cfg)

        rough_val, rough_grad = loss_rough(mpv.roughness, segments)
        total_val = recon + cfg.lambda_rough * rough_val
        grad_flat = mpv.chain_to_unconstrained(
            ga, gr + cfg.lambda_rough * rough_grad)

        if initial is None:
            initial = max(total_val, 1e-12)
        if total_val > cfg.divergence_factor * initial:
            raise TrainingDivergedError(
                f"objective {total_val:.3e} exceeded "
                f"{cfg.divergence_factor:.0e} x initial at step {step}")

        new = adam_step(adam, mpv.pack(), grad_flat,
                        cfg.material_lr or cfg.learning_rate)
        mpv.unpack(new)
        history.append({"step": step, "recons": recon, "rough": rough_val,
                        "total": total_val, "wall": time.time() - t0})
        if log_fn is not None:
            log_fn(history[-1])
    return mpv, history


def _material_segments(scene):
    """Segment label per material id (faces sharing an id share a segment)."""
    n_mats = len(scene.materials.albedo)
    seg = np.zeros(n_mats, dtype=np.int64)
    seg[scene.mesh.material_ids] = scene.mesh.segment_ids
    return seg


# ---------------------------------------------------------------------------
# Materials checkpoint: per-face float32 albedo RGB + roughness

MATERIALS_MAGIC = b"GLWMAT01"


def save_materials(mats: MaterialSet, path: str):
    import os
    import struct
    blob = np.concatenate([mats.albedo, mats.roughness[:, None]],
                          axis=1).astype("<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MATERIALS_MAGIC)
        fh.write(struct.pack("<I", len(mats.roughness)))
        fh.write(struct.pack("<d", mats.specular))
        fh.write(blob)
    os.replace(tmp, path)


def load_materials(path: str) -> MaterialSet:
    import struct
    with open(path, "rb") as fh:
        if fh.read(8) != MATERIALS_MAGIC:
            raise ValueError("not a materials checkpoint (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        (specular,) = struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(16 * n), dtype="<f4").astype(np.float64)
    data = data.reshape(n, 4)
    return MaterialSet(np.clip(data[:, :3], 0.0, 1.0),
                       np.clip(data[:, 3], 0.0, 1.0), specular)
