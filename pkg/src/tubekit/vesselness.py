"""Multi-scale Hessian analysis and the Jerman tubularity response.

The response of a voxel is driven by the magnitude-ordered eigenvalues
(l1, l2, l3) of the scale-normalized Hessian.  Bright tubes on a dark
background produce l2 ~ l3 << 0, so for that polarity l2 and l3 are
negated before the response is evaluated; the regularized lp replaces l3
with a volume-level floor tau * max(l3) to keep low-contrast vessels
from vanishing.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError
from .volume import Volume3

DEFAULT_TAU = 0.5
DEFAULT_SCALES = (1.0, 1.5, 2.0, 3.0)


@dataclass(frozen=True)
class JermanParams:
    """Configuration of the multi-scale response."""

    tau: float = DEFAULT_TAU
    scales: tuple = DEFAULT_SCALES
    polarity: str = "bright"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must be in [0,1], got {self.tau}")
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ParameterError("scales must be non-empty positives")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ParameterError("scales must be strictly increasing")
        if self.polarity not in ("bright", "dark"):
            raise ParameterError(f"polarity must be bright or dark, got {self.polarity!r}")
        object.__setattr__(self, "scales", scales)


@dataclass(frozen=True, eq=False)
class HessianField:
    """Per-voxel symmetric second derivatives at one smoothing scale.

    comps has shape dims + (6,), ordered (xx, xy, xz, yy, yz, zz), in
    mm^-2 units and already multiplied by sigma^2 (scale normalization).
    """

    dims: tuple
    comps: np.ndarray
    scale_sigma: float

    def __post_init__(self):
        comps = np.asarray(self.comps, dtype=np.float32)
        if comps.shape != tuple(self.dims) + (6,):
            raise ParameterError(f"component shape {comps.shape} does not match dims")
        if not np.all(np.isfinite(comps)):
            raise ParameterError("Hessian components must be finite")
        object.__setattr__(self, "comps", comps)


@dataclass(frozen=True)
class EigenTriple:
    """Eigenvalues of one symmetric 3x3 matrix, |l1| <= |l2| <= |l3|."""

    l1: float
    l2: float
    l3: float


def _gaussian_kernel(sigma_mm: float, spacing_mm: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma_mm / spacing_mm)
    x = np.arange(-radius, radius + 1, dtype=np.float64) * spacing_mm
    k = np.exp(-0.5 * (x / sigma_mm) ** 2)
    return k / k.sum()


def gaussian_smooth(vol: Volume3, sigma: float) -> Volume3:
    """Separable Gaussian smoothing with replicate boundaries.

    Kernel radius is ceil(3*sigma/spacing) per axis and each 1D kernel is
    normalized to sum 1, so constant inputs are preserved exactly.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    out = np.asarray(vol.data, dtype=np.float64)
    for axis in range(3):
        k = _gaussian_kernel(sigma, vol.spacing[axis])
        out = correlate1d(out, k, axis=axis, mode="nearest")
    return Volume3(vol.dims, vol.spacing, out.astype(np.float32))


def _second_derivatives(f: np.ndarray, spacing) -> list:
    """Central-difference second derivatives in mm units, replicate edges.

    Returns [fxx, fxy, fxz, fyy, fyz, fzz].
    """
    g = np.pad(f, 1, mode="edge")
    sx, sy, sz = spacing
    c = (slice(1, -1),) * 3

    def sl(dx, dy, dz):
        return g[1 + dx: g.shape[0] - 1 + dx,
                 1 + dy: g.shape[1] - 1 + dy,
                 1 + dz: g.shape[2] - 1 + dz]

    fxx = (sl(1, 0, 0) - 2.0 * f + sl(-1, 0, 0)) / (sx * sx)
    fyy = (sl(0, 1, 0) - 2.0 * f + sl(0, -1, 0)) / (sy * sy)
    fzz = (sl(0, 0, 1) - 2.0 * f + sl(0, 0, -1)) / (sz * sz)
    fxy = (sl(1, 1, 0) - sl(1, -1, 0) - sl(-1, 1, 0) + sl(-1, -1, 0)) / (4.0 * sx * sy)
    fxz = (sl(1, 0, 1) - sl(1, 0, -1) - sl(-1, 0, 1) + sl(-1, 0, -1)) / (4.0 * sx * sz)
    fyz = (sl(0, 1, 1) - sl(0, 1, -1) - sl(0, -1, 1) + sl(0, -1, -1)) / (4.0 * sy * sz)
    return [fxx, fxy, fxz, fyy, fyz, fzz]


def hessian_at_scale(vol: Volume3, sigma: float) -> HessianField:
    """Smooth at sigma, differentiate, multiply by sigma^2."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if any(d < 5 for d in vol.dims):
        raise ParameterError(f"dims {vol.dims} too small for the second-derivative stencil")
    smooth = gaussian_smooth(vol, sigma)
    derivs = _second_derivatives(np.asarray(smooth.data, dtype=np.float64), vol.spacing)
    comps = np.stack(derivs, axis=-1) * (sigma * sigma)
    return HessianField(vol.dims, comps.astype(np.float32), sigma)


def eig3_symmetric_field(comps: np.ndarray):
    """Eigenvalues of a field of symmetric 3x3 matrices, magnitude-ordered.

    comps: (..., 6) ordered (xx, xy, xz, yy, yz, zz).  Uses the analytic
    trigonometric solution; near-multiple spectra fall back to the
    diagonal, which is exact in that limit.  Returns (l1, l2, l3) arrays
    with |l1| <= |l2| <= |l3|.
    """
    c = np.asarray(comps, dtype=np.float64)
    hxx, hxy, hxz, hyy, hyz, hzz = (c[..., i] for i in range(6))

    q = (hxx + hyy + hzz) / 3.0
    p1 = hxy ** 2 + hxz ** 2 + hyz ** 2
    p2 = (hxx - q) ** 2 + (hyy - q) ** 2 + (hzz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)

    scale = np.maximum(np.abs(hxx), np.maximum(np.abs(hyy), np.abs(hzz)))
    scale = np.maximum(scale, np.sqrt(p1))
    degenerate = p <= 1e-12 * (1.0 + scale)
    p_safe = np.where(degenerate, 1.0, p)

    bxx, byy, bzz = (hxx - q) / p_safe, (hyy - q) / p_safe, (hzz - q) / p_safe
    bxy, bxz, byz = hxy / p_safe, hxz / p_safe, hyz / p_safe
    det_b = (bxx * (byy * bzz - byz ** 2)
             - bxy * (bxy * bzz - byz * bxz)
             + bxz * (bxy * byz - byy * bxz))
    phi = np.arccos(np.clip(det_b / 2.0, -1.0, 1.0)) / 3.0

    e_hi = q + 2.0 * p * np.cos(phi)
    e_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e_mid = 3.0 * q - e_hi - e_lo

    # Degenerate (p ~ 0) matrices are q*I up to the residual tolerance.
    e_hi = np.where(degenerate, hxx, e_hi)
    e_mid = np.where(degenerate, hyy, e_mid)
    e_lo = np.where(degenerate, hzz, e_lo)

    stacked = np.stack([e_hi, e_mid, e_lo], axis=0)
    order = np.argsort(np.abs(stacked), axis=0, kind="stable")
    lam = np.take_along_axis(stacked, order, axis=0)
    return lam[0], lam[1], lam[2]


def eig3_symmetric(comps) -> EigenTriple:
    """Eigenvalues of one symmetric 3x3, components (xx, xy, xz, yy, yz, zz)."""
    c = np.asarray(comps, dtype=np.float64)
    if c.shape != (6,):
        raise ParameterError("expected six components (xx, xy, xz, yy, yz, zz)")
    if not np.all(np.isfinite(c)):
        raise ParameterError("Hessian components must be finite")
    l1, l2, l3 = eig3_symmetric_field(c)
    return EigenTriple(float(l1), float(l2), float(l3))


def _jerman_from_arrays(l2: np.ndarray, l3: np.ndarray, lambda3_max: float,
                        tau: float) -> np.ndarray:
    """Branchwise response; callers pass polarity-adjusted eigenvalues."""
    cap = tau * lambda3_max
    lp = np.where(l3 > cap, l3, np.where(l3 > 0.0, cap, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = l2 ** 2 * (lp - l2) * (3.0 / (lp + l2)) ** 3
    resp = np.where((l2 <= 0.0) | (lp <= 0.0), 0.0,
                    np.where(l2 >= lp / 2.0, 1.0, mid))
    return np.clip(resp, 0.0, 1.0)


def jerman_response(eigs: EigenTriple, lambda3_max: float, tau: float,
                    polarity: str = "bright") -> float:
    """Tubularity response in [0, 1] for one voxel.

    lambda3_max is the volume-wide maximum of the polarity-adjusted l3 at
    the current scale (>= 0).
    """
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must be in [0,1], got {tau}")
    if lambda3_max < 0:
        raise ParameterError("lambda3_max must be non-negative")
    if polarity not in ("bright", "dark"):
        raise ParameterError(f"polarity must be bright or dark, got {polarity!r}")
    sign = -1.0 if polarity == "bright" else 1.0
    l2 = np.asarray(sign * eigs.l2, dtype=np.float64)
    l3 = np.asarray(sign * eigs.l3, dtype=np.float64)
    return float(_jerman_from_arrays(l2, l3, float(lambda3_max), float(tau)))


def vesselness_multiscale(vol: Volume3, params: JermanParams) -> Volume3:
    """Maximum Jerman response over the configured scales, in [0, 1]."""
    sign = -1.0 if params.polarity == "bright" else 1.0
    best = np.zeros(vol.dims, dtype=np.float64)
    for sigma in params.scales:
        field = hessian_at_scale(vol, sigma)
        _, l2, l3 = eig3_symmetric_field(field.comps)
        l2, l3 = sign * l2, sign * l3
        lambda3_max = max(float(l3.max()), 0.0)
        np.maximum(best, _jerman_from_arrays(l2, l3, lambda3_max, params.tau), out=best)
    return Volume3(vol.dims, vol.spacing, best.astype(np.float32))
