"""3D thin plate spline interpolation with the polyharmonic kernel r.

Fitting solves the dense (C+4)x(C+4) system for kernel weights plus an
affine part, subject to the usual orthogonality side conditions. With
zero regularization the spline interpolates the control displacements
exactly; an affine target map is reproduced globally with zero warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .io import Points, as_points


@dataclass(frozen=True)
class TpsModel:
    """Fitted spline: f(x) = affine([1, x]) + sum_i w_i * |x - c_i|."""

    controls: NDArray[np.float64]  # (C, 3)
    warp: NDArray[np.float64]  # (C, 3) kernel weights
    affine: NDArray[np.float64]  # (4, 3), rows = [1, x, y, z] coefficients
    regularization: float = 0.0


def _kernel_matrix(a: Points, b: Points) -> NDArray[np.float64]:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def tps_fit(control_src: Points, control_dst: Points, regularization: float = 0.0) -> TpsModel:
    """Fit a spline mapping control_src onto control_dst.

    Raises ValueError for degenerate control sets (duplicates, coplanar
    points); the system is reported as singular rather than silently
    regularized.
    """
    src = as_points(control_src, "control points")
    dst = as_points(control_dst, "control targets")
    if src.shape != dst.shape:
        raise ValueError(f"control shapes differ: {src.shape} vs {dst.shape}")
    c = src.shape[0]
    if c < 4:
        raise ValueError(f"need at least 4 control points, got {c}")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")

    k = _kernel_matrix(src, src)
    if regularization > 0:
        k = k + regularization * np.eye(c)
    p = np.concatenate((np.ones((c, 1)), src), axis=1)  # (C, 4)

    lhs = np.zeros((c + 4, c + 4))
    lhs[:c, :c] = k
    lhs[:c, c:] = p
    lhs[c:, :c] = p.T
    rhs = np.zeros((c + 4, 3))
    rhs[:c] = dst

    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular TPS system (degenerate controls): {exc}") from None
    if not np.isfinite(sol).all():
        raise ValueError("singular TPS system (degenerate controls)")

    model = TpsModel(
        controls=src.copy(), warp=sol[:c], affine=sol[c:], regularization=regularization
    )
    if regularization == 0.0:
        residual = np.abs(tps_apply(model, src) - dst).max()
        if not residual <= 1e-8:
            raise ValueError(
                f"singular TPS system: control residual {residual:.3g} mm "
                "(coplanar or duplicate controls)"
            )
    return model


def tps_apply(model: TpsModel, cloud: Points) -> Points:
    """Map every point through the fitted spline."""
    pts = as_points(cloud)
    k = _kernel_matrix(pts, model.controls)
    p = np.concatenate((np.ones((pts.shape[0], 1)), pts), axis=1)
    return k @ model.warp + p @ model.affine
