"""Inference-time face synthesis: frontalize, rotate, relight and interpolate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codes import PASS_THROUGH, AttributeCode, CodeLayout, interpolate
from .face_model import ContractError, ShapeParams, euler_to_rotation
from .networks import freeze, to_hwc, to_nchw
from .synth_data import ToyDataset
from .trainer import one_hot

YAW_PRESETS = {"frontal": 0.0, "yaw-45": -45.0, "yaw-30": -30.0, "yaw-15": -15.0,
               "yaw+15": 15.0, "yaw+30": 30.0, "yaw+45": 45.0}


def preset_pose(name_or_yaw, d_s: int, d_e: int) -> ShapeParams:
    """A centred pose with the given yaw (degrees or preset name) and neutral expression."""
    if isinstance(name_or_yaw, str):
        if name_or_yaw not in YAW_PRESETS:
            try:
                name_or_yaw = float(name_or_yaw)
            except ValueError:
                raise ContractError(f"unknown pose preset {name_or_yaw!r}") from None
        else:
            name_or_yaw = YAW_PRESETS[name_or_yaw]
    yaw = float(name_or_yaw)
    if abs(yaw) > 45.0:
        raise ContractError(f"yaw {yaw} outside the supported +-45 degree range")
    R = euler_to_rotation(np.deg2rad(yaw))
    return ShapeParams(R.reshape(-1), np.zeros(3), np.zeros(d_s), np.zeros(d_e))


@dataclass
class Synthesizer:
    E: torch.nn.Module
    G: torch.nn.Module
    fem: torch.nn.Module
    fsr: torch.nn.Module

    def __post_init__(self):
        for net in (self.E, self.G, self.fem, self.fsr):
            freeze(net)
        self.layout: CodeLayout = self.G.spec.layout

    @torch.no_grad()
    def source_codes(self, images, labels=PASS_THROUGH) -> list[AttributeCode]:
        """Attribute codes describing the inputs as they are."""
        x = to_nchw(images)
        latent, ident, pose = self.E(x), self.fem(x), self.fsr(x)
        labels = np.broadcast_to(np.asarray(labels), (len(x),))
        return [AttributeCode(latent[i].double().numpy(), ident[i].double().numpy(),
                              pose[i].double().numpy(), one_hot([labels[i]])[0].double().numpy(),
                              self.layout) for i in range(len(x))]

    @torch.no_grad()
    def generate_codes(self, codes) -> np.ndarray:
        flat = torch.as_tensor(np.stack([c.flatten() for c in codes]), dtype=torch.float32)
        return to_hwc(self.G(flat))

    def with_pose(self, codes, pose: ShapeParams, labels, keep_shape: bool = True) -> list[AttributeCode]:
        out = []
        labels = np.broadcast_to(np.asarray(labels), (len(codes),))
        d_s = self.layout.d_s
        for c, lab in zip(codes, labels):
            v = pose.to_vector().copy()
            if keep_shape:
                v[12:12 + d_s] = c.pose[12:12 + d_s]
            out.append(AttributeCode(c.latent, c.identity, v, one_hot([lab])[0].double().numpy(), self.layout))
        return out

    def render(self, images, pose: ShapeParams, labels=PASS_THROUGH) -> np.ndarray:
        """Synthesize every input at ``pose`` under ``labels``, keeping each input's face shape."""
        codes = self.source_codes(images)
        return self.generate_codes(self.with_pose(codes, pose, labels))

    def frontalize(self, images, label: int = PASS_THROUGH) -> np.ndarray:
        return self.render(images, preset_pose(0.0, self.layout.d_s, self.layout.d_e), label)

    def interpolate(self, image_l, image_r, steps: int, label: int = PASS_THROUGH) -> np.ndarray:
        """``steps`` frames blending the two inputs' codes for alpha evenly spaced in [0, 1]."""
        if steps < 2:
            raise ContractError("interpolation needs at least 2 steps")
        f_l, f_r = self.source_codes(np.stack([image_l, image_r]), label)
        alphas = np.linspace(0.0, 1.0, steps)
        codes = [f_l if a == 0.0 else f_r if a == 1.0 else interpolate(f_l, f_r, float(a)) for a in alphas]
        return self.generate_codes(codes)


@dataclass
class Augmentation:
    """``multiplier`` synthesized variants per source, row-major by round."""

    images: np.ndarray  # (multiplier, N, H, W, 3)
    labels: np.ndarray  # (multiplier, N)
    thetas: np.ndarray  # (multiplier, N, P)


def augment(syn: Synthesizer, images, multiplier: int, poses: list[ShapeParams], labels, seed: int) -> Augmentation:
    """Render every source ``multiplier`` times at a random (pose, label) pair.

    Pose presets and labels are drawn uniformly and independently per source
    and round from a generator keyed on ``(seed, multiplier)``.
    """
    if multiplier < 1:
        raise ContractError("multiplier must be positive")
    if not poses or len(labels) == 0:
        raise ContractError("augmentation needs at least one pose and one label")
    images = np.asarray(images)
    codes = syn.source_codes(images)
    rng = np.random.default_rng([seed, 70, multiplier])
    n = len(images)
    pose_pick = rng.integers(len(poses), size=(multiplier, n))
    label_pick = rng.integers(len(labels), size=(multiplier, n))
    out = np.zeros((multiplier, *images.shape), dtype=np.float32)
    thetas = np.zeros((multiplier, n, syn.layout.d_pose), dtype=np.float64)
    chosen = np.asarray(labels)[label_pick]
    for k in range(multiplier):
        # one generator pass per distinct (pose, label) group keeps batches large
        for pi, li in sorted(set(zip(pose_pick[k].tolist(), label_pick[k].tolist()))):
            sel = np.flatnonzero((pose_pick[k] == pi) & (label_pick[k] == li))
            new = syn.with_pose([codes[i] for i in sel], poses[pi], labels[li])
            out[k, sel] = syn.generate_codes(new)
            thetas[k, sel] = [c.pose for c in new]
    return Augmentation(out, chosen, thetas)



def augment_dataset(syn: Synthesizer, data: ToyDataset, multiplier: int, poses: list[ShapeParams],
                    labels, seed: int) -> ToyDataset:
    """Raw records followed by their synthesized variants, identities carried over."""
    aug = augment(syn, data.images, multiplier, poses, labels, seed)
    n = len(data)
    # synthesized records get index offsets so their relative paths never collide with raw ones
    return ToyDataset(np.concatenate([data.images, aug.images.reshape(-1, *data.images.shape[1:])]),
                      np.tile(data.identities, multiplier + 1),
                      np.concatenate([data.illuminations, aug.labels.reshape(-1)]),
                      np.concatenate([data.thetas, aug.thetas.reshape(multiplier * n, -1)]),
                      np.concatenate([data.indices] + [data.indices + (k + 1) * 10_000 for k in range(multiplier)]),
                      data.seed, data.d_s, data.d_e)
