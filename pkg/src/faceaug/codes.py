"""The attribute code ``[latent, identity, pose, illumination]`` that conditions the generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .face_model import ContractError, ShapeParams, euler_to_rotation

N_ILLUM = 14
PASS_THROUGH = 13  # label-free case: keep whatever lighting the input had


@dataclass(frozen=True)
class CodeLayout:
    """Segment dimensions of a flattened attribute code."""

    d_l: int = 32
    d_id: int = 64
    d_s: int = 16
    d_e: int = 8

    @property
    def d_pose(self) -> int:
        return 12 + self.d_s + self.d_e

    @property
    def length(self) -> int:
        return self.d_l + self.d_id + self.d_pose + N_ILLUM

    @property
    def slices(self) -> dict[str, slice]:
        a = self.d_l
        b = a + self.d_id
        c = b + self.d_pose
        return {"latent": slice(0, a), "identity": slice(a, b),
                "pose": slice(b, c), "illumination": slice(c, c + N_ILLUM)}

    @property
    def shape_slice(self) -> slice:
        """Position of alpha_shape inside the full flattened code."""
        start = self.slices["pose"].start + 12
        return slice(start, start + self.d_s)

    def header(self) -> dict:
        return {"d_l": self.d_l, "d_id": self.d_id, "d_s": self.d_s, "d_e": self.d_e}


def illumination_code(label: int) -> np.ndarray:
    if not 0 <= int(label) < N_ILLUM:
        raise ContractError(f"illumination label {label} outside 0..{N_ILLUM - 1}")
    v = np.zeros(N_ILLUM)
    v[int(label)] = 1.0
    return v


def is_one_hot(v) -> bool:
    v = np.asarray(v)
    return v.shape == (N_ILLUM,) and np.all((v == 0) | (v == 1)) and v.sum() == 1


@dataclass
class AttributeCode:
    latent: np.ndarray
    identity: np.ndarray
    pose: np.ndarray  # flat ShapeParams vector
    illumination: np.ndarray
    layout: CodeLayout = field(default_factory=CodeLayout)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.latent, self.identity, self.pose, self.illumination])

    @classmethod
    def unflatten(cls, v, layout: CodeLayout) -> "AttributeCode":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != layout.length:
            raise ContractError(f"code length {v.size} != layout length {layout.length}")
        s = layout.slices
        return cls(v[s["latent"]].copy(), v[s["identity"]].copy(), v[s["pose"]].copy(),
                   v[s["illumination"]].copy(), layout)

    @property
    def shape_params(self) -> ShapeParams:
        return ShapeParams.from_vector(self.pose, self.layout.d_s, self.layout.d_e)

    def to_json(self) -> str:
        return json.dumps({"header": self.layout.header(), "values": self.flatten().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "AttributeCode":
        obj = json.loads(text)
        return cls.unflatten(obj["values"], CodeLayout(**obj["header"]))


def compose(latent, identity, pose, illumination, layout: CodeLayout | None = None,
            soft_illumination: bool = False) -> AttributeCode:
    """Validate each segment and assemble an AttributeCode."""
    layout = layout or CodeLayout()
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    identity = np.asarray(identity, dtype=np.float64).reshape(-1)
    if isinstance(pose, ShapeParams):
        pose = pose.to_vector()
    pose = np.asarray(pose, dtype=np.float64).reshape(-1)
    if np.ndim(illumination) == 0:
        illumination = illumination_code(int(illumination))
    illumination = np.asarray(illumination, dtype=np.float64).reshape(-1)

    if latent.size != layout.d_l or not np.all(np.isfinite(latent)):
        raise ContractError(f"latent segment must be {layout.d_l} finite values")
    if identity.size != layout.d_id or abs(np.linalg.norm(identity) - 1.0) > 1e-5:
        raise ContractError(f"identity segment must be a unit vector of length {layout.d_id}")
    if pose.size != layout.d_pose or not np.all(np.isfinite(pose)):
        raise ContractError(f"pose segment must be {layout.d_pose} finite values")
    if illumination.size != N_ILLUM:
        raise ContractError(f"illumination segment must have {N_ILLUM} entries")
    if not soft_illumination and not is_one_hot(illumination):
        raise ContractError("illumination segment must be one-hot")
    return AttributeCode(latent, identity, pose, illumination, layout)


def replace_pose(f: AttributeCode, new_pose, keep_shape: bool = True) -> AttributeCode:
    """Swap in a new pose; with ``keep_shape`` only R, T and alpha_exp change."""
    if isinstance(new_pose, ShapeParams):
        new_pose = new_pose.to_vector()
    new_pose = np.asarray(new_pose, dtype=np.float64).reshape(-1)
    if new_pose.size != f.layout.d_pose:
        raise ContractError(f"pose has {new_pose.size} entries, expected {f.layout.d_pose}")
    pose = new_pose.copy()
    if keep_shape:
        pose[12:12 + f.layout.d_s] = f.pose[12:12 + f.layout.d_s]
    return replace(f, pose=pose)


def replace_illumination(f: AttributeCode, label: int) -> AttributeCode:
    return replace(f, illumination=illumination_code(label))


def interpolate(f_L: AttributeCode, f_R: AttributeCode, alpha: float) -> AttributeCode:
    """Convex blend ``alpha * f_R + (1 - alpha) * f_L``.

    The identity segment is projected back onto the unit sphere; the
    illumination segment is left soft.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha={alpha} outside [0, 1]")
    if f_L.layout != f_R.layout:
        raise ContractError("codes have different layouts")
    v = alpha * f_R.flatten() + (1.0 - alpha) * f_L.flatten()
    out = AttributeCode.unflatten(v, f_L.layout)
    norm = np.linalg.norm(out.identity)
    if norm > 0:
        out.identity = out.identity / norm
    return out


@dataclass(frozen=True)
class PoseRanges:
    """Uniform sampling box for target poses; angles in degrees, translations in image units."""

    yaw: tuple[float, float] = (-45.0, 45.0)
    pitch: tuple[float, float] = (-10.0, 10.0)
    roll: tuple[float, float] = (-5.0, 5.0)
    tx: tuple[float, float] = (-0.05, 0.05)
    ty: tuple[float, float] = (-0.05, 0.05)
    exp: tuple[float, float] = (-0.5, 0.5)

    def validate(self):
        for name in ("yaw", "pitch", "roll", "tx", "ty", "exp"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ContractError(f"invalid {name} range ({lo}, {hi})")
        if max(abs(self.yaw[0]), abs(self.yaw[1])) >= 90:
            raise ContractError("yaw range must stay strictly inside +-90 degrees")


def sample_target_attributes(rng: np.random.Generator, pose_ranges: PoseRanges | None = None,
                             illum_distribution=None, d_s: int = 16, d_e: int = 8):
    """Draw a random target pose (alpha_shape = 0) and a one-hot illumination code.

    ``illum_distribution`` is a length-14 probability vector; the default is
    uniform over all 14 labels.
    """
    pr = pose_ranges or PoseRanges()
    pr.validate()
    probs = _illum_probs(illum_distribution)
    yaw, pitch, roll = (np.deg2rad(rng.uniform(*getattr(pr, k))) for k in ("yaw", "pitch", "roll"))
    T = np.array([rng.uniform(*pr.tx), rng.uniform(*pr.ty), 0.0])
    alpha_exp = rng.uniform(pr.exp[0], pr.exp[1], size=d_e)
    pose = ShapeParams(euler_to_rotation(yaw, pitch, roll).reshape(-1), T, np.zeros(d_s), alpha_exp)
    label = int(rng.choice(N_ILLUM, p=probs))
    return pose, illumination_code(label)


def _illum_probs(dist) -> np.ndarray:
    if dist is None:
        return np.full(N_ILLUM, 1.0 / N_ILLUM)
    p = np.asarray(dist, dtype=np.float64)
    if p.shape != (N_ILLUM,) or np.any(p < 0) or p.sum() <= 0:
        raise ContractError("illumination distribution must be 14 nonnegative weights")
    return p / p.sum()


def labels_distribution(labels) -> np.ndarray:
    """Uniform categorical over the given labels, as a length-14 vector."""
    p = np.zeros(N_ILLUM)
    for lab in labels:
        illumination_code(lab)
        p[int(lab)] = 1.0
    return p / p.sum()
