"""Principled-BRDF subset: Lambert diffuse + GGX specular.

Free parameters are per-surface albedo and roughness; the specular amount is
a fixed scene constant mapped to Fresnel F0 = 0.08 * specular. The microfacet
term uses the Trowbridge-Reitz (GGX) distribution with height-correlated
Smith masking and Schlick Fresnel, and perceptual roughness is remapped as
alpha = roughness^2. Attached shadows are a BRDF effect: f is identically
zero whenever either direction dips below the shading horizon.

The Lambert lobe is weighted by (1 - F(cos_i)) (1 - F(cos_o)) so the total
directional albedo stays <= 1 for every parameter choice, and the Schlick
grazing value is F90 = min(1, 50 F0), which makes the specular lobe (and its
diffuse coupling) vanish identically when the specular constant is zero.

All entry points are vectorized over a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import frame_vectors, luminance, reflect, to_world

# Roughness floor applied inside eval/sample; avoids the delta-lobe
# singularity while stored parameters may be lower.
ROUGHNESS_FLOOR = 0.02

F0_SCALE = 0.08

_EPS = 1e-12


@dataclass(frozen=True)
class PrincipledParams:
    """Scalar convenience bundle: albedo in [0,1]^3, roughness, specular."""

    albedo: np.ndarray
    roughness: float
    specular: float


@dataclass
class BrdfSample:
    direction: np.ndarray   # sampled incoming direction(s)
    pdf: np.ndarray         # mixture density at the sample, 1/sr
    f: np.ndarray           # BRDF value, cosine not included
    lobe: np.ndarray        # 0 = diffuse, 1 = specular
    valid: np.ndarray       # False where no usable sample was produced


def _prep(albedo, roughness, n, wi, wo):
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    roughness = np.atleast_1d(np.asarray(roughness, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    return np.broadcast_arrays(albedo, roughness[..., None], n, wi, wo)[:5]


def _alpha(roughness):
    return np.maximum(roughness, ROUGHNESS_FLOOR) ** 2


def _ggx_d(alpha, cos_h):
    t = cos_h * cos_h * (alpha * alpha - 1.0) + 1.0
    return alpha * alpha / np.maximum(np.pi * t * t, _EPS)


def _smith_lambda(alpha, cos_t):
    c2 = np.clip(cos_t * cos_t, _EPS, 1.0)
    tan2 = (1.0 - c2) / c2
    return 0.5 * (np.sqrt(1.0 + alpha * alpha * tan2) - 1.0)


def _schlick(specular, cos_d):
    f0 = F0_SCALE * specular
    f90 = min(1.0, 50.0 * f0)
    return f0 + (f90 - f0) * (1.0 - np.clip(cos_d, 0.0, 1.0)) ** 5


def _specular_parts(alpha, specular, n, wi, wo, cos_i, cos_o):
    h = wi + wo
    h_len = np.linalg.norm(h, axis=-1)
    h = h / np.maximum(h_len, _EPS)[..., None]
    cos_h = np.sum(n * h, axis=-1)
    cos_d = np.sum(wi * h, axis=-1)
    d = _ggx_d(alpha, cos_h)
    lam_i = _smith_lambda(alpha, cos_i)
    lam_o = _smith_lambda(alpha, cos_o)
    g2 = 1.0 / (1.0 + lam_i + lam_o)
    fr = _schlick(specular, cos_d)
    denom = np.maximum(4.0 * cos_i * cos_o, _EPS)
    return d, g2, fr, denom, cos_h, cos_d, lam_i, lam_o


def _diffuse_weight(specular, cos_i, cos_o):
    return (1.0 - _schlick(specular, cos_i)) * (1.0 - _schlick(specular, cos_o))


def eval_brdf(albedo, roughness, specular, n, wi, wo):
    """BRDF value f(wi, wo) per channel; the cosine factor is NOT included."""
    albedo, roughness, n, wi, wo = _prep(albedo, roughness, n, wi, wo)
    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    above = (cos_i > 0) & (cos_o > 0)
    alpha = _alpha(roughness[..., 0])
    d, g2, fr, denom, *_ = _specular_parts(alpha, specular, n, wi, wo,
                                           np.maximum(cos_i, _EPS),
                                           np.maximum(cos_o, _EPS))
    spec = d * g2 * fr / denom
    kd = _diffuse_weight(specular, cos_i, cos_o)
    f = kd[..., None] * albedo / np.pi + spec[..., None]
    return np.where(above[..., None], f, 0.0)


def eval_brdf_grad(albedo, roughness, specular, n, wi, wo):
    """Analytic partials (df/dalbedo diagonal, df/droughness per channel).

    The albedo partial is the per-channel diagonal of the Jacobian (the
    off-diagonal entries are zero for this model); the roughness partial is
    a full RGB triple though the specular term is achromatic here.
    """
    albedo, roughness, n, wi, wo = _prep(albedo, roughness, n, wi, wo)
    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    above = (cos_i > 0) & (cos_o > 0)
    ci = np.maximum(cos_i, _EPS)
    co = np.maximum(cos_o, _EPS)
    r = roughness[..., 0]
    r_eff = np.maximum(r, ROUGHNESS_FLOOR)
    alpha = r_eff * r_eff
    dalpha_dr = np.where(r >= ROUGHNESS_FLOOR, 2.0 * r_eff, 0.0)

    d, g2, fr, denom, cos_h, _, lam_i, lam_o = _specular_parts(
        alpha, specular, n, wi, wo, ci, co)

    # dD/dalpha with t = cos_h^2 (alpha^2 - 1) + 1
    t = cos_h * cos_h * (alpha * alpha - 1.0) + 1.0
    t = np.maximum(t, _EPS)
    dd_dalpha = 2.0 * alpha * (t - 2.0 * alpha * alpha * cos_h * cos_h) \
        / (np.pi * t ** 3)

    def dlam_dalpha(cos_t):
        c2 = np.clip(cos_t * cos_t, _EPS, 1.0)
        tan2 = (1.0 - c2) / c2
        return alpha * tan2 / (2.0 * np.sqrt(1.0 + alpha * alpha * tan2))

    dg2_dalpha = -(g2 * g2) * (dlam_dalpha(ci) + dlam_dalpha(co))
    dspec_dalpha = (dd_dalpha * g2 + d * dg2_dalpha) * fr / denom
    dspec_dr = dspec_dalpha * dalpha_dr

    kd = _diffuse_weight(specular, cos_i, cos_o)
    grad_albedo = np.where(above[..., None],
                           kd[..., None] * np.ones(3) / np.pi, 0.0)
    grad_rough = np.where(above, dspec_dr, 0.0)[..., None] * np.ones(3)
    return grad_albedo, grad_rough


def _diffuse_probability(albedo, specular):
    w_d = luminance(albedo)
    total = w_d + specular
    return np.where(total > 0.0, w_d / np.maximum(total, _EPS), 0.5)


def pdf_brdf(albedo, roughness, specular, n, wo, wi):
    """Exact density of sample_brdf at wi (solid-angle measure); 0 below horizon."""
    albedo, roughness, n, wi, wo = _prep(albedo, roughness, n, wi, wo)
    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    above = (cos_i > 0) & (cos_o > 0)
    alpha = _alpha(roughness[..., 0])
    p_diff = _diffuse_probability(albedo, specular)

    pdf_d = np.maximum(cos_i, 0.0) / np.pi

    h = wi + wo
    h_len = np.maximum(np.linalg.norm(h, axis=-1), _EPS)
    h = h / h_len[..., None]
    cos_h = np.abs(np.sum(n * h, axis=-1))
    wo_dot_h = np.maximum(np.abs(np.sum(wo * h, axis=-1)), _EPS)
    pdf_s = _ggx_d(alpha, cos_h) * cos_h / (4.0 * wo_dot_h)

    pdf = p_diff * pdf_d + (1.0 - p_diff) * pdf_s
    return np.where(above, pdf, 0.0)


def sample_brdf(albedo, roughness, specular, n, wo, u_lobe, u1, u2) -> BrdfSample:
    """Importance-sample an incoming direction from the lobe mixture.

    The lobe is picked with probability proportional to (luminance(albedo),
    specular); the returned pdf is the full mixture density, matching
    pdf_brdf exactly. Degenerate geometry (wo below the horizon) and
    specular samples falling below the horizon yield valid=False.
    """
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    roughness = np.atleast_1d(np.asarray(roughness, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    albedo, _, n, wo, _ = _prep(albedo, roughness, n, wo, wo)
    roughness = np.broadcast_to(np.atleast_1d(roughness), albedo.shape[:-1])
    u_lobe = np.broadcast_to(np.asarray(u_lobe, dtype=np.float64), albedo.shape[:-1])
    u1 = np.broadcast_to(np.asarray(u1, dtype=np.float64), albedo.shape[:-1])
    u2 = np.broadcast_to(np.asarray(u2, dtype=np.float64), albedo.shape[:-1])

    cos_o = np.sum(n * wo, axis=-1)
    alpha = _alpha(roughness)
    p_diff = _diffuse_probability(albedo, specular)
    take_diff = u_lobe < p_diff

    tang, bit = frame_vectors(n)

    # Diffuse: cosine-weighted hemisphere.
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local_d = np.stack([r * np.cos(phi), r * np.sin(phi),
                        np.sqrt(np.maximum(1.0 - u1, 0.0))], axis=-1)
    wi_diff = to_world(tang, bit, n, local_d)

    # Specular: sample the GGX half-vector distribution, then reflect.
    cos_h = np.sqrt(np.clip((1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1),
                            0.0, 1.0))
    sin_h = np.sqrt(np.maximum(1.0 - cos_h * cos_h, 0.0))
    local_h = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)
    h = to_world(tang, bit, n, local_h)
    wi_spec = reflect(-wo, h)

    wi = np.where(take_diff[..., None], wi_diff, wi_spec)
    cos_i = np.sum(n * wi, axis=-1)
    valid = (cos_o > 0) & (cos_i > 0)

    pdf = pdf_brdf(albedo, roughness, specular, n, wo, wi)
    f = eval_brdf(albedo, roughness, specular, n, wi, wo)
    valid &= pdf > 0
    return BrdfSample(
        direction=wi,
        pdf=np.where(valid, pdf, 0.0),
        f=np.where(valid[..., None], f, 0.0),
        lobe=np.where(take_diff, 0, 1),
        valid=valid,
    )
