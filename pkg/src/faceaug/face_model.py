"""Linear 3D morphable face model on a synthetic, bilaterally symmetric mesh.

Geometry conventions used throughout the package:

* model space: x to the viewer's right, y up, z towards the camera;
* image units: normalised coordinates in ``[-1, 1]`` on both axes with the
  origin at the image centre, so a translation ``T = 0`` centres the face;
* projection is orthographic: a vertex lands at ``(x, y)`` of ``R @ v + T``.

A mirror-symmetric mean shape and mirror-symmetric bases make every shape in
the span symmetric, so conjugating a pose by the x reflection produces the
exact horizontal mirror image of the projected vertices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import ConvexHull, QhullError

FLIP = np.diag([-1.0, 1.0, 1.0])


class ContractError(ValueError):
    """Raised when an operation's input violates its documented contract."""


@dataclass
class MorphableModel:
    mean_shape: np.ndarray  # (V, 3)
    shape_basis: np.ndarray  # (3V, d_s)
    exp_basis: np.ndarray  # (3V, d_e)
    seed: int | None = None

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.exp_basis = np.asarray(self.exp_basis, dtype=np.float64)
        if self.mean_shape.ndim != 2 or self.mean_shape.shape[1] != 3:
            raise ContractError("mean_shape must be V x 3")
        if self.V < 4:
            raise ContractError("a morphable model needs at least 4 vertices")
        for name, basis in (("shape_basis", self.shape_basis), ("exp_basis", self.exp_basis)):
            if basis.ndim != 2 or basis.shape[0] != 3 * self.V:
                raise ContractError(f"{name} must have 3V rows")
            gram = basis.T @ basis
            if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-8):
                raise ContractError(f"{name} columns are not orthonormal")

    @property
    def V(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def d_s(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def d_e(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def param_length(self) -> int:
        return 12 + self.d_s + self.d_e

    def save(self, path) -> None:
        """Write ``<path>.npz`` with the three arrays and a ``<path>.json`` sidecar."""
        path = Path(path)
        np.savez(path.with_suffix(".npz"), mean=self.mean_shape,
                 shape_basis=self.shape_basis, exp_basis=self.exp_basis)
        meta = {"V": self.V, "d_s": self.d_s, "d_e": self.d_e, "seed": self.seed}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "MorphableModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            model = cls(z["mean"], z["shape_basis"], z["exp_basis"], seed=meta.get("seed"))
        if (model.V, model.d_s, model.d_e) != (meta["V"], meta["d_s"], meta["d_e"]):
            raise ContractError("sidecar dimensions disagree with stored arrays")
        return model


def _mirror_index(points: np.ndarray) -> np.ndarray:
    """Index of each vertex's mirror partner under x -> -x."""
    target = points * np.array([-1.0, 1.0, 1.0])
    d = np.linalg.norm(points[None, :, :] - target[:, None, :], axis=-1)
    return d.argmin(axis=1)


def _symmetric_basis(rng, n_half, n_mid, mirror, dim):
    """Orthonormal basis whose every column is a mirror-symmetric displacement field."""
    V = 2 * n_half + n_mid
    cols = []
    for _ in range(dim):
        disp = np.zeros((V, 3))
        disp[:n_half] = rng.normal(size=(n_half, 3))
        disp[n_half:2 * n_half] = disp[:n_half] * np.array([-1.0, 1.0, 1.0])
        mid = rng.normal(size=(n_mid, 3))
        mid[:, 0] = 0.0  # midline vertices may not move sideways
        disp[2 * n_half:] = mid
        cols.append(disp.reshape(-1))
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    # QR keeps each column inside the symmetric subspace.
    for j in range(q.shape[1]):
        v = q[:, j].reshape(V, 3)
        assert np.allclose(v[mirror] * np.array([-1.0, 1.0, 1.0]), v, atol=1e-9)
    return q


def make_toy_model(V: int = 64, d_s: int = 16, d_e: int = 8, seed: int = 0) -> MorphableModel:
    """Build a seeded symmetric toy face model.

    Vertices sit on the front half of an ellipsoid roughly 1.0 wide and 1.3
    tall in image units. Mirror pairs are laid out first, then midline vertices.
    """
    if V < 4:
        raise ContractError("V must be at least 4")
    rng = np.random.default_rng(seed)
    n_mid = V % 2 + 2 * (V >= 8)
    n_half = (V - n_mid) // 2
    if 3 * n_half + 2 * n_mid < max(d_s, d_e):
        raise ContractError("too few vertices for the requested basis dimensions")
    # Right half of the face (x > 0) on an ellipsoid cap.
    theta = rng.uniform(0.15, 1.35, size=n_half)  # azimuth away from the midline
    phi = rng.uniform(-1.2, 1.2, size=n_half)  # elevation
    right = np.stack([0.5 * np.sin(theta) * np.cos(phi),
                      0.65 * np.sin(phi),
                      0.4 * np.cos(theta) * np.cos(phi)], axis=1)
    left = right * np.array([-1.0, 1.0, 1.0])
    mid_phi = np.linspace(-1.0, 1.0, n_mid) if n_mid else np.zeros(0)
    mid = np.stack([np.zeros(n_mid), 0.65 * np.sin(mid_phi), 0.4 * np.cos(mid_phi)], axis=1)
    mean = np.concatenate([right, left, mid], axis=0)
    mirror = _mirror_index(mean)
    shape_basis = _symmetric_basis(rng, n_half, n_mid, mirror, d_s)
    exp_basis = _symmetric_basis(rng, n_half, n_mid, mirror, d_e)
    return MorphableModel(mean, shape_basis, exp_basis, seed=seed)


@dataclass
class ShapeParams:
    R: np.ndarray  # 9, row-major 3x3
    T: np.ndarray  # 3
    alpha_shape: np.ndarray
    alpha_exp: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(-1)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        self.alpha_shape = np.asarray(self.alpha_shape, dtype=np.float64).reshape(-1)
        self.alpha_exp = np.asarray(self.alpha_exp, dtype=np.float64).reshape(-1)
        if self.R.size != 9 or self.T.size != 3:
            raise ContractError("R must have 9 entries and T 3")

    @property
    def rotation(self) -> np.ndarray:
        return self.R.reshape(3, 3)

    def __len__(self) -> int:
        return 12 + self.alpha_shape.size + self.alpha_exp.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.R, self.T, self.alpha_shape, self.alpha_exp])

    @classmethod
    def from_vector(cls, v, d_s: int, d_e: int) -> "ShapeParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != 12 + d_s + d_e:
            raise ContractError(f"expected {12 + d_s + d_e} parameters, got {v.size}")
        return cls(v[:9], v[9:12], v[12:12 + d_s], v[12 + d_s:])

    @classmethod
    def neutral(cls, d_s: int, d_e: int) -> "ShapeParams":
        return cls(np.eye(3), np.zeros(3), np.zeros(d_s), np.zeros(d_e))


@dataclass
class ImportanceMatrix:
    w_R: np.ndarray
    w_T: np.ndarray
    w_shape: np.ndarray
    w_exp: np.ndarray

    def __post_init__(self):
        for name in ("w_R", "w_T", "w_shape", "w_exp"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if np.any(arr < 0):
                raise ContractError(f"{name} has negative entries")
            setattr(self, name, arr)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w_R, self.w_T, self.w_shape, self.w_exp])

    @classmethod
    def ones(cls, d_s: int, d_e: int) -> "ImportanceMatrix":
        return cls(np.ones(9), np.ones(3), np.ones(d_s), np.ones(d_e))

    @classmethod
    def from_vector(cls, v, d_s: int, d_e: int) -> "ImportanceMatrix":
        p = ShapeParams.from_vector(v, d_s, d_e)
        return cls(p.R, p.T, p.alpha_shape, p.alpha_exp)


@dataclass
class FaceMask:
    mask: np.ndarray  # (H, W) of {0, 1}
    out_of_frame: bool = field(default=False)


def _check_dims(model: MorphableModel, p: ShapeParams):
    if p.alpha_shape.size != model.d_s or p.alpha_exp.size != model.d_e:
        raise ContractError(
            f"params have d_s={p.alpha_shape.size}, d_e={p.alpha_exp.size}; "
            f"model expects {model.d_s}, {model.d_e}")


def reconstruct_shape(model: MorphableModel, p: ShapeParams) -> np.ndarray:
    """Posed vertices ``R (mean + A_s a_s + A_e a_e) + T`` as a V x 3 array."""
    _check_dims(model, p)
    offsets = model.shape_basis @ p.alpha_shape + model.exp_basis @ p.alpha_exp
    local = model.mean_shape + offsets.reshape(model.V, 3)
    return local @ p.rotation.T + p.T


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, ShapeParams):
        x = x.to_vector()
    if isinstance(x, ImportanceMatrix):
        x = x.to_vector()
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def wpdc_loss(predicted, target, w) -> torch.Tensor:
    """Importance-weighted squared parameter distance ``sum_i w_i (p_i - t_i)^2``.

    Accepts ShapeParams, arrays or tensors. Batched inputs of shape (B, P)
    return the batch mean of the per-sample costs. Differentiable in
    ``predicted`` when it is a tensor that requires grad.
    """
    pred = _as_tensor(predicted)
    tgt = _as_tensor(target).to(pred.dtype)
    weights = _as_tensor(w).to(pred.dtype)
    if torch.any(weights < 0):
        raise ContractError("importance weights must be nonnegative")
    if pred.shape[-1] != tgt.shape[-1] or pred.shape[-1] != weights.shape[-1]:
        raise ContractError("predicted, target and weights must share their length")
    per_sample = (weights * (pred - tgt) ** 2).sum(dim=-1)
    return per_sample.mean() if per_sample.ndim else per_sample


def build_importance_matrix(target: ShapeParams, pool, eps: float = 1e-8) -> ImportanceMatrix:
    """Distance-based weights of ``target`` relative to a pool of parameter sets.

    Each coordinate gets ``min(1, |t_i - mean_i| / (std_i + eps))``; the result
    is rescaled so the largest weight is 1. A pool whose distances all vanish
    (e.g. ``pool == [target]``) yields all-ones weights.
    """
    pool = list(pool)
    if not pool:
        raise ContractError("importance pool must be nonempty")
    t = target.to_vector() if isinstance(target, ShapeParams) else np.asarray(target, float)
    P = np.stack([q.to_vector() if isinstance(q, ShapeParams) else np.asarray(q, float) for q in pool])
    w = importance_weights(t[None], P.mean(axis=0), P.std(axis=0), eps)[0]
    d_s = target.alpha_shape.size if isinstance(target, ShapeParams) else None
    if d_s is None:
        raise ContractError("target must be a ShapeParams")
    return ImportanceMatrix.from_vector(w, d_s, target.alpha_exp.size)


def importance_weights(targets: np.ndarray, pool_mean: np.ndarray, pool_std: np.ndarray,
                       eps: float = 1e-8) -> np.ndarray:
    """Vectorised weight rows for a (B, P) array of targets against fixed pool statistics."""
    w = np.minimum(1.0, np.abs(targets - pool_mean) / (pool_std + eps))
    peak = w.max(axis=1, keepdims=True)
    degenerate = peak[:, 0] <= 0
    w = np.where(peak > 0, w / np.where(peak > 0, peak, 1.0), 1.0)
    w[degenerate] = 1.0
    return w


def pixel_centers(image_size) -> tuple[np.ndarray, np.ndarray]:
    """Image-unit (x, y) coordinates of every pixel centre, each of shape (H, W)."""
    H, W = image_size
    xs = (np.arange(W) + 0.5) / W * 2.0 - 1.0
    ys = 1.0 - (np.arange(H) + 0.5) / H * 2.0
    return np.meshgrid(xs, ys)


def project(model: MorphableModel, p: ShapeParams) -> np.ndarray:
    return reconstruct_shape(model, p)[:, :2]


def rasterize_hull(points: np.ndarray, image_size) -> np.ndarray:
    """Filled convex hull of 2-D image-unit points as an (H, W) uint8 mask."""
    H, W = image_size
    px, py = pixel_centers(image_size)
    try:
        hull = ConvexHull(points)
    except (QhullError, ValueError):
        return np.zeros((H, W), dtype=np.uint8)
    inside = np.ones((H, W), dtype=bool)
    # hull.equations rows are (nx, ny, c) with nx*x + ny*y + c <= 0 inside.
    for nx, ny, c in hull.equations:
        inside &= nx * px + ny * py + c <= 1e-12
    return inside.astype(np.uint8)


def render_mask(model: MorphableModel, p: ShapeParams, image_size) -> FaceMask:
    """Binary face mask: the orthographic hull of the posed vertices, clipped to the image."""
    pts = project(model, p)
    mask = rasterize_hull(pts, image_size)
    return FaceMask(mask=mask, out_of_frame=not mask.any())


def flip_pose(p: ShapeParams) -> ShapeParams:
    """Mirror a pose about the vertical image midline; an involution."""
    R = FLIP @ p.rotation @ FLIP
    return ShapeParams(R.reshape(-1), FLIP @ p.T, p.alpha_shape.copy(), p.alpha_exp.copy())


def euler_to_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """``R = Ry(yaw) Rx(pitch) Rz(roll)``, angles in radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Ry @ Rx @ Rz


def yaw_from_rotation(R) -> float:
    """Yaw in radians of a (possibly unconstrained) rotation, as ``atan2(R02, R22)``."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    return float(np.arctan2(R[0, 2], R[2, 2]))
