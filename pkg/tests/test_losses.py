import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from faceaug.face_model import ContractError
from faceaug.losses import (LossWeights, adversarial_losses, angular_margin_loss, classification_loss,
                            classification_losses, cycle_loss, embedding_distance, gradient_penalty,
                            identity_loss, pose_loss, symmetry_loss, total_generator_loss, weighted_total)
from faceaug.networks import NetworkSpec, build

from oracles import (autograd, central_difference, loop_arcface, loop_log_softmax, loop_masked_mse,
                     loop_mse, relative_error)

TINY = NetworkSpec(image_size=8, base_channels=4, num_downsamples=1, num_residual_blocks=1,
                   d_l=4, d_id=8, d_s=3, d_e=2)


def images(seed, b=2, size=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1


class LinearCritic(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        return x.flatten(1) @ self.w


def unit(n, seed):
    v = torch.randn(n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return v / v.norm()


# --- weights and totals -------------------------------------------------------

def test_all_ones_total_is_26():
    comps = {k: 1.0 for k in ("adv", "cls", "id", "pose", "sym", "cycle")}
    assert total_generator_loss(comps).total == pytest.approx(26.0)


def test_zero_and_single_term_totals():
    zero = {k: 0.0 for k in ("adv", "cls", "id", "pose", "sym", "cycle")}
    assert total_generator_loss(zero).total == 0.0
    assert total_generator_loss({**zero, "id": 2.0}).total == pytest.approx(16.0)


def test_nan_component_named():
    comps = {k: 0.0 for k in ("adv", "cls", "id", "pose", "sym", "cycle")}
    comps["pose"] = float("nan")
    with pytest.raises(ContractError, match="pose"):
        total_generator_loss(comps)


def test_negative_weight_rejected():
    with pytest.raises(ContractError):
        LossWeights(w_id=-1.0)


def test_total_matches_weighted_sum_for_random_components():
    rng = np.random.default_rng(0)
    for _ in range(100):
        comps = dict(zip(("adv", "cls", "id", "pose", "sym", "cycle"), rng.normal(size=6)))
        w = LossWeights(*rng.uniform(0, 3, 7))
        expected = 0.0
        for k, v in comps.items():
            expected += getattr(w, f"w_{k}") * v
        assert total_generator_loss(comps, w).total == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_disabled_component_contributes_no_gradient():
    torch.manual_seed(0)
    p = torch.randn(5, dtype=torch.float64, requires_grad=True)
    comps = {"adv": p.sum(), "cls": (p ** 2).sum(), "id": p.prod(), "pose": p.abs().sum(),
             "sym": p.mean(), "cycle": (p ** 3).sum()}
    enabled = {k: k != "id" for k in comps}
    (g_masked,) = torch.autograd.grad(weighted_total(comps, LossWeights(), enabled), p, retain_graph=True)
    comps_detached = {**comps, "id": comps["id"].detach()}
    w = LossWeights()
    manual = sum(w.weight(k) * v for k, v in comps_detached.items() if k != "id")
    (g_ref,) = torch.autograd.grad(manual, p)
    assert torch.allclose(g_masked, g_ref, atol=1e-10, rtol=0)


# --- reconstruction terms -------------------------------------------------------

def test_cycle_loss_trivial_cases():
    x = images(0)
    assert float(cycle_loss(x, x)) == 0.0
    assert float(cycle_loss(-torch.ones(1, 3, 8, 8), torch.ones(1, 3, 8, 8))) == pytest.approx(4.0)


def test_cycle_loss_matches_loop_oracle():
    for seed in range(100):
        a, b = images(seed, 1), images(seed + 1000, 1)
        assert float(cycle_loss(a, b)) == pytest.approx(loop_mse(a, b), rel=1e-6)


def test_cycle_loss_shape_mismatch():
    with pytest.raises(ContractError):
        cycle_loss(images(0, size=8), images(0, size=16))


def test_symmetry_loss_zero_and_full_masks():
    g, x = images(1, 1), images(2, 1)
    assert float(symmetry_loss(torch.zeros(8, 8), g, x)) == 0.0
    assert float(symmetry_loss(torch.ones(8, 8), g, x)) == pytest.approx(float(cycle_loss(g, x)), rel=1e-12)


def test_symmetry_half_mask_constant_difference():
    mask = torch.zeros(8, 8)
    mask[:, :4] = 1
    g = torch.ones(1, 3, 8, 8)
    assert float(symmetry_loss(mask, g, torch.zeros_like(g))) == pytest.approx(0.5)


def test_symmetry_loss_matches_loop_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mask = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)
        g, x = images(seed, 1), images(seed + 500, 1)
        oracle = loop_masked_mse(mask, g[0].numpy(), x[0].numpy())
        assert float(symmetry_loss(torch.as_tensor(mask), g, x)) == pytest.approx(oracle, rel=1e-6, abs=1e-15)


def test_embedding_distance_antipodal():
    e = unit(64, 0)[None]
    assert float(embedding_distance(e, -e)) == pytest.approx(4 / 64)


def test_pose_loss_unit_residual_at_full_dims():
    class Fixed(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(x.shape[0], 240, dtype=torch.float64)
    target = torch.zeros(1, 240, dtype=torch.float64)
    target[0, 7] = 1.0
    assert float(pose_loss(Fixed(), target, images(0, 1))) == pytest.approx(1 / 240)


@pytest.fixture(scope="module")
def tiny_experts():
    fem = build("FEM", TINY, seed=3).double().eval()
    fsr = build("FSR", TINY, seed=4).double().eval()
    for p in list(fem.parameters()) + list(fsr.parameters()):
        p.requires_grad_(False)
    return fem, fsr


def test_identity_loss_matches_loop_oracle(tiny_experts):
    fem, _ = tiny_experts
    for seed in range(100):
        x, g = images(seed, 1), images(seed + 7, 1)
        a, b = fem(x)[0].tolist(), fem(g)[0].tolist()
        oracle = sum((u - v) ** 2 for u, v in zip(a, b)) / len(a)
        assert float(identity_loss(fem, x, g)) == pytest.approx(oracle, rel=1e-6)
    assert float(identity_loss(fem, x, x)) == 0.0


def test_pose_loss_matches_loop_oracle(tiny_experts):
    _, fsr = tiny_experts
    for seed in range(100):
        g = images(seed, 1)
        t = torch.randn(1, TINY.param_length, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        pred = fsr(g)[0].tolist()
        oracle = sum((a - b) ** 2 for a, b in zip(t[0].tolist(), pred)) / len(pred)
        assert float(pose_loss(fsr, t, g)) == pytest.approx(oracle, rel=1e-6)


def test_identity_loss_flows_through_frozen_expert(tiny_experts):
    fem, _ = tiny_experts
    before = [p.clone() for p in fem.parameters()]
    x, g = images(0, 2), images(1, 2).requires_grad_(True)
    identity_loss(fem, x, g).backward()
    assert g.grad is not None and g.grad.abs().sum() > 0
    assert all(p.grad is None for p in fem.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, fem.parameters()))


# --- gradients against central differences --------------------------------------

GRAD_SEEDS = range(20)


def _check_grad(f, x):
    assert relative_error(autograd(f, x), central_difference(f, x)) < 1e-3


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_cycle_gradient(seed):
    x = images(seed + 100, 1)
    _check_grad(lambda g: cycle_loss(x, g), images(seed, 1))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_symmetry_gradient(seed):
    mask = torch.as_tensor(np.random.default_rng(seed).uniform(size=(8, 8)) > 0.4, dtype=torch.float64)
    x = images(seed + 100, 1)
    _check_grad(lambda g: symmetry_loss(mask, g, x), images(seed, 1))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_identity_gradient(seed, tiny_experts):
    fem, _ = tiny_experts
    x = images(seed + 100, 1)
    _check_grad(lambda g: identity_loss(fem, x, g), images(seed, 1))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_pose_gradient(seed, tiny_experts):
    _, fsr = tiny_experts
    t = torch.randn(1, TINY.param_length, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    _check_grad(lambda g: pose_loss(fsr, t, g), images(seed, 1))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_classification_gradient(seed):
    logits = torch.randn(2, 14, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    label = torch.tensor([seed % 14, (seed * 5) % 14])
    _check_grad(lambda z: classification_loss(z, label), logits)


# --- adversarial terms ------------------------------------------------------------

def test_unit_linear_critic_has_zero_penalty():
    w = unit(192, 0)
    gp = gradient_penalty(LinearCritic(w), images(0), images(1), torch.rand(2, dtype=torch.float64))
    assert abs(float(gp)) <= 1e-8


def test_norm_two_linear_critic_penalty_is_ten():
    w = 2 * unit(192, 1)
    gp = gradient_penalty(LinearCritic(w), images(0), images(1), torch.rand(2, dtype=torch.float64), 10.0)
    assert float(gp) == pytest.approx(10.0, abs=1e-6)


def test_penalty_matches_loop_oracle_for_quadratic_critic():
    class Quadratic(torch.nn.Module):
        def forward(self, x):
            return 0.5 * (x.flatten(1) ** 2).sum(dim=1)
    for seed in range(100):
        x, g = images(seed), images(seed + 1)
        u = torch.rand(2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        # gradient of 0.5|z|^2 is z itself, so the norm is |x_hat|
        terms = []
        for i in range(2):
            xh = (u[i] * x[i] + (1 - u[i]) * g[i]).flatten().tolist()
            terms.append((math.sqrt(sum(v * v for v in xh)) - 1.0) ** 2)
        oracle = 10.0 * sum(terms) / 2
        assert gradient_penalty(Quadratic(), x, g, u).item() == pytest.approx(oracle, rel=1e-6)


def test_generator_sign_convention():
    class Const(torch.nn.Module):
        def forward(self, x):
            return torch.full((x.shape[0],), 0.7, dtype=x.dtype) + 0 * x.flatten(1).sum(1)
    _, g_loss = adversarial_losses(Const(), images(0), images(1), torch.Generator().manual_seed(0))
    assert float(g_loss) == pytest.approx(-0.7)


def test_adversarial_losses_match_parts():
    w = unit(192, 3)
    critic = LinearCritic(3 * w)
    x, g = images(0), images(1)
    u = torch.tensor([0.25, 0.75], dtype=torch.float64)
    d_loss, g_loss = adversarial_losses(critic, x, g, u=u)
    real, fake = float((x.flatten(1) @ (3 * w)).mean()), float((g.flatten(1) @ (3 * w)).mean())
    assert float(d_loss) == pytest.approx(fake - real + 10 * (3 - 1) ** 2)
    assert float(g_loss) == pytest.approx(-fake)


def test_non_differentiable_critic_rejected():
    class Detached(torch.nn.Module):
        def forward(self, x):
            return x.detach().flatten(1).sum(1)
    with pytest.raises(ContractError):
        gradient_penalty(Detached(), images(0), images(1), torch.rand(2, dtype=torch.float64))


# --- classification ------------------------------------------------------------------

def test_classification_trivial_values():
    confident = torch.full((1, 14), -1e4, dtype=torch.float64)
    confident[0, 3] = 1e4
    assert float(classification_loss(confident, torch.tensor([3]))) == pytest.approx(0.0, abs=1e-12)
    assert float(classification_loss(torch.zeros(1, 14), torch.tensor([5]))) == pytest.approx(math.log(14))
    # probability exp(-1) on the target
    p = math.exp(-1)
    rest = (1 - p) / 13
    logits = torch.log(torch.tensor([[rest] * 13 + [p]], dtype=torch.float64))
    assert float(classification_loss(logits, torch.tensor([13]))) == pytest.approx(1.0)


def test_classification_matches_loop_oracle():
    for seed in range(100):
        logits = torch.randn(3, 14, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        labels = [seed % 14, (seed + 3) % 14, (7 * seed) % 14]
        oracle = -sum(loop_log_softmax(logits[i].tolist(), labels[i]) for i in range(3)) / 3
        assert float(classification_loss(logits, torch.tensor(labels))) == pytest.approx(oracle, rel=1e-6)


def test_classification_accepts_one_hot_and_rejects_soft():
    logits = torch.randn(2, 14)
    hot = torch.zeros(2, 14)
    hot[0, 2] = hot[1, 9] = 1
    assert float(classification_loss(logits, hot)) == pytest.approx(float(classification_loss(logits, torch.tensor([2, 9]))))
    with pytest.raises(ContractError):
        classification_loss(logits, hot * 0.5)
    with pytest.raises(ContractError):
        classification_loss(logits, torch.tensor([14, 0]))


def test_classification_losses_route_images():
    class Critic(torch.nn.Module):
        def forward(self, x):
            logits = torch.zeros(x.shape[0], 14, dtype=x.dtype)
            logits[:, 0] = x.flatten(1).mean(1) * 50
            return x.flatten(1).sum(1), logits
    real, fake = torch.ones(1, 3, 8, 8), -torch.ones(1, 3, 8, 8)
    d_cls, g_cls = classification_losses(Critic(), real, torch.tensor([0]), fake, torch.tensor([0]))
    assert float(d_cls) < 1e-6 < float(g_cls)


# --- angular margin -------------------------------------------------------------------

def _normalized(n, d, seed):
    v = torch.randn(n, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return v / v.norm(dim=1, keepdim=True)


def test_zero_margin_is_scaled_softmax():
    for seed in range(20):
        e, w = _normalized(4, 8, seed), _normalized(5, 8, seed + 50)
        y = torch.tensor([0, 1, 4, 2])
        oracle = torch.nn.functional.cross_entropy(16.0 * e @ w.T, y)
        assert float(angular_margin_loss(e, y, w, s=16.0, m=0.0)) == pytest.approx(float(oracle), rel=1e-10)


def test_single_class_zero_margin_has_zero_loss():
    e = _normalized(3, 8, 0)
    w = _normalized(1, 8, 1)
    assert float(angular_margin_loss(e, torch.zeros(3, dtype=torch.long), w, s=64.0, m=0.0)) == pytest.approx(0.0, abs=1e-12)


def test_angular_margin_matches_loop_oracle():
    for seed in range(100):
        e, w = _normalized(3, 6, seed), _normalized(4, 6, seed + 999)
        y = [seed % 4, (seed + 1) % 4, (seed + 2) % 4]
        oracle = sum(loop_arcface(e[i].tolist(), y[i], w.tolist(), 64.0, 0.5) for i in range(3)) / 3
        assert float(angular_margin_loss(e, torch.tensor(y), w)) == pytest.approx(oracle, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_angular_margin_monotone_in_margin(seed):
    e, w = _normalized(4, 6, seed), _normalized(5, 6, seed + 1)
    y = torch.tensor([0, 1, 2, 3])
    losses = [float(angular_margin_loss(e, y, w, s=64.0, m=m)) for m in np.arange(0, 0.51, 0.1)]
    assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:]))


def test_angular_margin_rejects_unnormalized():
    with pytest.raises(ContractError):
        angular_margin_loss(2 * _normalized(2, 4, 0), torch.tensor([0, 1]), _normalized(2, 4, 1))
