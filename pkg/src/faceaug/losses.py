"""Loss terms for the generator, the critic and identity-embedder pretraining.

Batched tensors throughout: images are (B, 3, H, W), codes and parameter
vectors (B, P). Each reconstruction-style loss is the squared residual norm
divided by the length of one sample's residual, then averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .codes import N_ILLUM
from .face_model import ContractError

COMPONENTS = ("adv", "cls", "id", "pose", "sym", "cycle")


@dataclass(frozen=True)
class LossWeights:
    w_adv: float = 1.0
    w_cls: float = 1.0
    w_id: float = 8.0
    w_pose: float = 6.0
    w_sym: float = 5.0
    w_cycle: float = 5.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"loss weight {f.name} must be nonnegative")

    def weight(self, component: str) -> float:
        return getattr(self, f"w_{component}")


@dataclass
class GeneratorLossReport:
    adv: float
    cls: float
    id: float
    pose: float
    sym: float
    cycle: float
    total: float

    def to_record(self, step: int, **extra) -> dict:
        return {"step": step, **asdict(self), **extra}


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def _per_sample_mean(sq: torch.Tensor) -> torch.Tensor:
    return sq.flatten(1).sum(dim=1) / sq[0].numel()


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor) -> torch.Tensor:
    _same_shape(x, x_cycled, "cycle_loss")
    return _per_sample_mean((x_cycled - x) ** 2).mean()


def symmetry_loss(mask: torch.Tensor, generated: torch.Tensor, x_flipped: torch.Tensor) -> torch.Tensor:
    """Masked squared error against the mirrored source, normalised by the full pixel count.

    ``mask`` is (H, W), (B, H, W) or (B, 1, H, W) and broadcasts over channels.
    """
    _same_shape(generated, x_flipped, "symmetry_loss")
    mask = torch.as_tensor(mask, dtype=generated.dtype)
    if mask.ndim == 2:
        mask = mask[None, None]
    elif mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != generated.shape[-2:]:
        raise ContractError("symmetry_loss: mask size does not match the images")
    return _per_sample_mean((mask * (generated - x_flipped)) ** 2).mean()


def embedding_distance(e_a: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
    _same_shape(e_a, e_b, "embedding_distance")
    return (((e_a - e_b) ** 2).sum(dim=-1) / e_a.shape[-1]).mean()


def identity_loss(fem, x: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Squared distance of identity embeddings over d_id; the expert's weights get no gradient."""
    with torch.no_grad():
        e_x = fem(x)
    return embedding_distance(e_x, fem(generated))


def pose_loss(fsr, target_pose: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Squared parameter distance between the requested pose and the regressed one, over its length."""
    pred = fsr(generated)
    _same_shape(pred, target_pose, "pose_loss")
    return (((target_pose - pred) ** 2).sum(dim=-1) / pred.shape[-1]).mean()


def _src(critic, x):
    out = critic(x)
    return out[0] if isinstance(out, tuple) else out


def gradient_penalty(critic, x: torch.Tensor, generated: torch.Tensor, u: torch.Tensor,
                     lambda_gp: float = 10.0) -> torch.Tensor:
    """``lambda_gp * mean((||grad D_src(x_hat)|| - 1)^2)`` at ``x_hat = u x + (1 - u) generated``."""
    u = u.reshape(-1, *([1] * (x.ndim - 1))).to(x.dtype)
    x_hat = (u * x.detach() + (1.0 - u) * generated.detach()).requires_grad_(True)
    score = _src(critic, x_hat)
    if not score.requires_grad:
        raise ContractError("critic output is not differentiable with respect to its input")
    (grad,) = torch.autograd.grad(score.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def adversarial_losses(critic, x: torch.Tensor, generated: torch.Tensor, rng: torch.Generator | None = None,
                       lambda_gp: float = 10.0, u: torch.Tensor | None = None, return_parts: bool = False):
    """Critic loss ``D(G) - D(x) + GP`` and generator loss ``-D(G)``, each averaged over the batch.

    ``u`` (one uniform draw per sample) is taken from ``rng`` unless given.
    The critic loss sees ``generated`` detached.
    """
    _same_shape(x, generated, "adversarial_losses")
    if u is None:
        u = torch.rand(x.shape[0], generator=rng, dtype=x.dtype)
    real = _src(critic, x).mean()
    fake = _src(critic, generated.detach()).mean()
    gp = gradient_penalty(critic, x, generated, u, lambda_gp)
    d_loss = fake - real + gp
    g_loss = -_src(critic, generated).mean()
    if return_parts:
        return d_loss, g_loss, {"real": real, "fake": fake, "gp": gp}
    return d_loss, g_loss


def _label_indices(label: torch.Tensor, batch: int) -> torch.Tensor:
    label = torch.as_tensor(label)
    if label.ndim == 0:
        label = label.reshape(1).expand(batch)
    if label.ndim == 1 and not label.is_floating_point():
        if torch.any((label < 0) | (label >= N_ILLUM)):
            raise ContractError("illumination label out of range")
        return label.long()
    if label.ndim == 2 and label.shape[1] == N_ILLUM:
        hot = (label == 1).sum(dim=1)
        zero = (label == 0).sum(dim=1)
        if torch.any(hot != 1) or torch.any(hot + zero != N_ILLUM):
            raise ContractError("classification labels must be one-hot")
        return label.argmax(dim=1)
    raise ContractError(f"cannot interpret labels of shape {tuple(label.shape)}")


def classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Mean negative log-likelihood of the designated lighting label under softmax(logits)."""
    return F.cross_entropy(logits, _label_indices(label, logits.shape[0]).to(logits.device))


def classification_losses(critic, x: torch.Tensor, true_label, generated: torch.Tensor, target_label):
    """``(-log D_cls(true | x), -log D_cls(target | generated))``."""
    _, logits_real = critic(x)
    _, logits_fake = critic(generated)
    return classification_loss(logits_real, true_label), classification_loss(logits_fake, target_label)


def weighted_total(components: dict, weights: LossWeights, enabled: dict | None = None):
    """Weighted sum of generator components; disabled or zero-weighted terms are left out entirely."""
    total = 0.0
    for name in COMPONENTS:
        value = components[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if math.isnan(v) or math.isinf(v):
            raise ContractError(f"generator loss component {name!r} is not finite")
        w = weights.weight(name)
        if (enabled is not None and not enabled.get(name, True)) or w == 0:
            continue
        total = total + w * value
    return total


def total_generator_loss(components: dict, weights: LossWeights | None = None,
                         enabled: dict | None = None) -> GeneratorLossReport:
    weights = weights or LossWeights()
    total = weighted_total(components, weights, enabled)
    as_float = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                for k, v in components.items() if k in COMPONENTS}
    total = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return GeneratorLossReport(**as_float, total=total)


def _check_unit(t: torch.Tensor, what: str, tol: float = 1e-4):
    if torch.any((t.norm(dim=-1) - 1.0).abs() > tol):
        raise ContractError(f"{what} must be unit-norm")


def angular_margin_logits(embeddings: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor,
                          s: float = 64.0, m: float = 0.5) -> torch.Tensor:
    """Scaled cosine logits with the target class's angle widened by ``m``.

    Where ``theta + m`` would pass pi the target logit falls back to
    ``cos(theta) - m sin(m)``, which keeps the logit decreasing in ``m``.
    """
    _check_unit(embeddings, "embeddings")
    _check_unit(class_weights, "class weight vectors")
    cos = (embeddings @ class_weights.T).clamp(-1.0, 1.0)
    labels = labels.long()
    cos_y = cos.gather(1, labels[:, None])
    theta = torch.acos(cos_y.clamp(-1.0 + 1e-7, 1.0 - 1e-7))
    widened = torch.where(theta + m <= math.pi, torch.cos(theta + m), cos_y - m * math.sin(m))
    if m == 0:
        widened = cos_y
    logits = cos.scatter(1, labels[:, None], widened)
    return s * logits


def angular_margin_loss(embeddings: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor,
                        s: float = 64.0, m: float = 0.5) -> torch.Tensor:
    return F.cross_entropy(angular_margin_logits(embeddings, labels, class_weights, s, m), labels.long())
