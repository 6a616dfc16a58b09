"""Procedural toy faces with exact identity, 3DMM parameters and lighting labels.

Each identity owns a shape vector and a colour palette. A face is rendered by
filling the projected mesh hull with the identity's skin tone, splatting
palette-coloured Gaussian blobs at landmark vertices (faded by how much each
vertex faces the camera) and multiplying by one of 13 fixed directional
shading fields. Label 13 applies no shading.

Shading directions (label k in 0..12) lie on the upper half circle at
``k * 15`` degrees, measured from the image's +x axis; the field is
``clip(0.6 + 0.4 * (cos(a) x + sin(a) y), 0.15, 1)`` on image-unit
coordinates, applied to intensities in ``[0, 1]``.
"""

from __future__ import annotations

import base64
import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .codes import N_ILLUM, PASS_THROUGH, PoseRanges, sample_target_attributes
from .face_model import (ContractError, MorphableModel, ShapeParams, pixel_centers,
                         rasterize_hull, reconstruct_shape)

GENERATOR_VERSION = "toyface-1"
N_LIGHTS = 13
BACKGROUND = 0.5
BLOB_SIGMA = 0.07
SHAPE_STD = 0.6
MANIFEST_HEADER = ["path", "identity", "illum", "theta_b64"]


def light_angles() -> np.ndarray:
    return np.deg2rad(15.0 * np.arange(N_LIGHTS))


def shading_field(label: int, image_size) -> np.ndarray:
    """Multiplicative (H, W) intensity field for an illumination label."""
    if not 0 <= label < N_ILLUM:
        raise ContractError(f"illumination label {label} out of range")
    H, W = image_size
    if label == PASS_THROUGH:
        return np.ones((H, W))
    a = light_angles()[label]
    px, py = pixel_centers(image_size)
    return np.clip(0.6 + 0.4 * (np.cos(a) * px + np.sin(a) * py), 0.15, 1.0)


@dataclass
class Identity:
    index: int
    alpha_shape: np.ndarray
    skin: np.ndarray  # (3,)
    colors: np.ndarray  # (V, 3), mirror partners share a colour


def _mirror_partners(model: MorphableModel) -> np.ndarray:
    pts = model.mean_shape
    flipped = pts * np.array([-1.0, 1.0, 1.0])
    return np.linalg.norm(pts[None] - flipped[:, None], axis=-1).argmin(axis=1)


def landmark_indices(model: MorphableModel, n: int = 16) -> np.ndarray:
    """A fixed mirror-closed subset of vertices used as coloured landmarks."""
    partners = _mirror_partners(model)
    chosen: list[int] = []
    for i in range(model.V):
        if len(chosen) >= n:
            break
        if i not in chosen:
            chosen.append(i)
            if partners[i] != i:
                chosen.append(int(partners[i]))
    return np.array(sorted(chosen))


def make_identity(model: MorphableModel, seed: int, index: int) -> Identity:
    rng = np.random.default_rng([seed, 1, index])
    alpha_shape = rng.normal(scale=SHAPE_STD, size=model.d_s)
    skin = rng.uniform(0.35, 0.95, size=3)
    partners = _mirror_partners(model)
    raw = rng.uniform(0.05, 0.95, size=(model.V, 3))
    colors = raw.copy()
    for i, j in enumerate(partners):
        colors[max(i, j)] = raw[min(i, j)]
    return Identity(index, alpha_shape, skin, colors)


@dataclass
class ToyFaceRecord:
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    identity_label: int
    theta: ShapeParams
    illumination_label: int


def render_face(model: MorphableModel, ident: Identity, theta: ShapeParams,
                illum_label: int, image_size) -> np.ndarray:
    """Render one toy face as an (H, W, 3) float array in [-1, 1]."""
    H, W = image_size
    verts = reconstruct_shape(model, theta)
    img = np.full((H, W, 3), BACKGROUND)
    hull = rasterize_hull(verts[:, :2], image_size).astype(bool)
    img[hull] = ident.skin

    # Visibility from the rotated outward direction of each mean vertex.
    normals = model.mean_shape / np.linalg.norm(model.mean_shape, axis=1, keepdims=True)
    facing = np.clip((normals @ theta.rotation.T)[:, 2], 0.0, 1.0)
    px, py = pixel_centers(image_size)
    idx = landmark_indices(model)
    d2 = (px[None] - verts[idx, 0, None, None]) ** 2 + (py[None] - verts[idx, 1, None, None]) ** 2
    weights = facing[idx, None, None] * np.exp(-d2 / (2 * BLOB_SIGMA ** 2))  # (K, H, W)
    total = weights.sum(axis=0)
    color_sum = np.einsum("khw,kc->hwc", weights, ident.colors[idx])
    cover = np.clip(total, 0.0, 1.0)[..., None]
    blended = color_sum / (total[..., None] + 1e-8)
    img = img * (1.0 - cover) + blended * cover

    img = img * shading_field(illum_label, image_size)[..., None]
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


def generate_toy_face(model: MorphableModel, identity_seed: int, theta: ShapeParams,
                      illum_label: int, image_size=(32, 32), identity_index: int = 0) -> ToyFaceRecord:
    """Render a record for identity ``identity_index`` drawn from ``identity_seed``.

    ``theta.alpha_shape`` is used as given, so callers control shape exactly.
    """
    ident = make_identity(model, identity_seed, identity_index)
    image = render_face(model, ident, theta, illum_label, image_size)
    return ToyFaceRecord(image, identity_index, theta, int(illum_label))


def theta_to_b64(theta: ShapeParams) -> str:
    return base64.b64encode(theta.to_vector().astype("<f8").tobytes()).decode("ascii")


def theta_from_b64(text: str, d_s: int, d_e: int) -> ShapeParams:
    return ShapeParams.from_vector(np.frombuffer(base64.b64decode(text), dtype="<f8"), d_s, d_e)


@dataclass
class ToyDataset:
    """In-memory dataset: images (N, H, W, 3) plus aligned labels and parameters."""

    images: np.ndarray
    identities: np.ndarray
    illuminations: np.ndarray
    thetas: np.ndarray  # (N, P)
    indices: np.ndarray  # per-identity image index
    seed: int
    d_s: int
    d_e: int

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, mask) -> "ToyDataset":
        mask = np.asarray(mask)
        return ToyDataset(self.images[mask], self.identities[mask], self.illuminations[mask],
                          self.thetas[mask], self.indices[mask], self.seed, self.d_s, self.d_e)

    def record(self, i: int) -> ToyFaceRecord:
        return ToyFaceRecord(self.images[i], int(self.identities[i]),
                             ShapeParams.from_vector(self.thetas[i], self.d_s, self.d_e),
                             int(self.illuminations[i]))

    def relative_paths(self) -> list[str]:
        return [f"{ident}/{idx}.png" for ident, idx in zip(self.identities, self.indices)]

    def write(self, root) -> "DatasetManifest":
        """Write PNGs under ``<root>/<identity>/<index>.png`` and the manifest CSV."""
        root = Path(root)
        rows = []
        for i, rel in enumerate(self.relative_paths()):
            out = root / rel
            out.parent.mkdir(parents=True, exist_ok=True)
            save_png(self.images[i], out)
            theta = ShapeParams.from_vector(self.thetas[i], self.d_s, self.d_e)
            rows.append(ManifestRow(rel, int(self.identities[i]), int(self.illuminations[i]),
                                    theta_to_b64(theta)))
        manifest = DatasetManifest(rows, self.seed)
        manifest.write(root / "manifest.csv")
        return manifest


@dataclass
class ManifestRow:
    path: str
    identity: int
    illum: int
    theta_b64: str
    origin: str | None = None


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    seed: int | None = None
    version: str = GENERATOR_VERSION

    def __post_init__(self):
        paths = [r.path for r in self.rows]
        if len(set(paths)) != len(paths):
            raise ContractError("manifest paths must be unique")
        for r in self.rows:
            if not 0 <= r.illum < N_ILLUM or r.identity < 0:
                raise ContractError(f"row {r.path} has labels out of range")

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        with_origin = any(r.origin is not None for r in self.rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER + (["origin"] if with_origin else []))
        for r in self.rows:
            row = [r.path, r.identity, r.illum, r.theta_b64]
            w.writerow(row + ([r.origin or "raw"] if with_origin else []))
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8")
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or reader.fieldnames[:4] != MANIFEST_HEADER:
            raise ContractError(f"{path}: manifest header must start with {MANIFEST_HEADER}")
        rows = [ManifestRow(r["path"], int(r["identity"]), int(r["illum"]), r["theta_b64"],
                            r.get("origin")) for r in reader]
        return cls(rows)


def save_png(image: np.ndarray, path) -> None:
    arr = np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 127.5 - 1.0


def build_dataset(model: MorphableModel, n_identities: int, images_per_identity: int,
                  pose_ranges: PoseRanges | None = None, illum_distribution=None,
                  seed: int = 0, image_size=(32, 32), identity_start: int = 0) -> ToyDataset:
    """Render ``n_identities * images_per_identity`` faces.

    Every record draws from its own generator seeded by (seed, identity,
    index), so a dataset with fewer images per identity is a prefix of one
    with more.
    """
    if n_identities < 2:
        raise ContractError("need at least two identities")
    if images_per_identity < 1:
        raise ContractError("need at least one image per identity")
    images, ids, illums, thetas, idxs = [], [], [], [], []
    for k in range(identity_start, identity_start + n_identities):
        ident = make_identity(model, seed, k)
        for j in range(images_per_identity):
            rng = np.random.default_rng([seed, 2, k, j])
            pose, illum = sample_target_attributes(rng, pose_ranges, illum_distribution,
                                                   model.d_s, model.d_e)
            theta = ShapeParams(pose.R, pose.T, ident.alpha_shape, pose.alpha_exp)
            label = int(np.argmax(illum))
            images.append(render_face(model, ident, theta, label, image_size))
            ids.append(k)
            illums.append(label)
            thetas.append(theta.to_vector())
            idxs.append(j)
    return ToyDataset(np.stack(images).astype(np.float32), np.array(ids), np.array(illums),
                      np.stack(thetas), np.array(idxs), seed, model.d_s, model.d_e)


def load_dataset(root, model: MorphableModel, manifest: DatasetManifest | None = None) -> ToyDataset:
    """Read a manifest and its PNGs back into a ToyDataset."""
    root = Path(root)
    manifest = manifest or DatasetManifest.read(root / "manifest.csv")
    images, ids, illums, thetas, idxs = [], [], [], [], []
    for j, r in enumerate(manifest.rows):
        images.append(load_png(root / r.path))
        ids.append(r.identity)
        illums.append(r.illum)
        thetas.append(theta_from_b64(r.theta_b64, model.d_s, model.d_e).to_vector())
        idxs.append(j)
    return ToyDataset(np.stack(images).astype(np.float32), np.array(ids), np.array(illums),
                      np.stack(thetas), np.array(idxs), manifest.seed or 0, model.d_s, model.d_e)
