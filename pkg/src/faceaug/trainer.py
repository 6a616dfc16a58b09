"""Pretraining of the identity expert and shape regressor, and joint E/G/D training.

Every random draw inside a training step comes from a generator seeded by
``(seed, step, ...)``, so the batch order and all sampled codes are pure
functions of the step index. That is what makes a run resumed from a saved
state bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .codes import N_ILLUM, PoseRanges, sample_target_attributes
from .face_model import ContractError, MorphableModel, ShapeParams, importance_weights, rasterize_hull
from .losses import (COMPONENTS, LossWeights, angular_margin_loss, classification_loss, cycle_loss,
                     embedding_distance, gradient_penalty, symmetry_loss, total_generator_loss,
                     weighted_total)
from .networks import (CheckpointError, NetworkSpec, build, freeze, load_checkpoint, save_checkpoint,
                       to_nchw)
from .synth_data import ToyDataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Desk-scale defaults. ``reference()`` gives the original large-scale weighting.

    At 32x32 with 2,000 steps the adversarial and lighting-classification
    gradients reaching E and G are 20-50 times larger than the rest, and the
    generator collapses to identity-free faces. Scaling both to 0.05 and
    raising the learning rate to 3e-4 restores the balance.
    """

    batch_size: int = 16
    total_iterations: int = 2000
    epochs: int = 12
    lr: float = 3e-4
    lr_decay_start_epoch: int = 6
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    critic_steps_per_gen_step: int = 5
    w_adv: float = 0.05
    w_cls: float = 0.05
    w_id: float = 8.0
    w_pose: float = 6.0
    w_sym: float = 5.0
    w_cycle: float = 5.0
    lambda_gp: float = 10.0
    use_adv: bool = True
    use_cls: bool = True
    use_id: bool = True
    use_pose: bool = True
    use_sym: bool = True
    use_cycle: bool = True
    seed: int = 0
    # pretraining
    fem_iterations: int = 600
    fem_lr: float = 1e-3
    fem_batch_size: int = 32
    arc_scale: float = 64.0
    arc_margin: float = 0.5
    fsr_iterations: int = 800
    fsr_lr: float = 2e-3
    fsr_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        for name in ("total_iterations", "epochs", "critic_steps_per_gen_step", "fem_iterations",
                     "fsr_iterations", "fem_batch_size", "fsr_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "fem_lr", "fsr_lr", "arc_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.lr_decay_start_epoch <= self.epochs:
            raise ConfigError("lr_decay_start_epoch must lie within [0, epochs]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.arc_margin < 0:
            raise ConfigError("arc_margin must be nonnegative")
        try:
            self.loss_weights
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def reference(cls, **changes) -> "TrainConfig":
        """Unit adversarial and classification weights at learning rate 1e-4."""
        return cls(**{"lr": 1e-4, "w_adv": 1.0, "w_cls": 1.0, **changes})

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_adv, self.w_cls, self.w_id, self.w_pose, self.w_sym, self.w_cycle,
                           self.lambda_gp)

    @property
    def ablation_mask(self) -> dict[str, bool]:
        return {name: getattr(self, f"use_{name}") for name in COMPONENTS}

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key], lineno)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(value: str, typ, lineno: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: cannot parse {value!r} as {typ}") from exc


def lr_at(step: int, config: TrainConfig) -> float:
    """Constant learning rate, then linear decay reaching 0 at the final step."""
    total = config.total_iterations
    decay_start = int(round(total * config.lr_decay_start_epoch / config.epochs))
    if step < decay_start:
        return config.lr
    last = total - 1
    if last <= decay_start:
        return 0.0 if step >= last else config.lr
    return config.lr * max(0.0, (last - step) / (last - decay_start))


def _batch_indices(seed: int, tag: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, tag, step])
    return rng.choice(n, size=min(batch, n), replace=False)


def _torch_gen(*key: int) -> torch.Generator:
    seed = int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


def _adam(params, lr, config: TrainConfig):
    return torch.optim.Adam(params, lr=lr, betas=(config.adam_beta1, config.adam_beta2))


# ----------------------------------------------------------------------------- FEM


@dataclass
class FEMResult:
    net: torch.nn.Module
    class_weights: torch.Tensor
    epoch_losses: list[float]
    first_loss: float
    step_losses: list[float] = field(default_factory=list)


def pretrain_fem(dataset: ToyDataset, config: TrainConfig, spec: NetworkSpec | None = None) -> FEMResult:
    """Train the identity expert with the additive angular margin objective."""
    classes = np.unique(dataset.identities)
    if len(classes) < 2:
        raise ContractError("identity pretraining needs at least two identities")
    spec = spec or NetworkSpec(image_size=dataset.images.shape[1])
    y_all = torch.as_tensor(np.searchsorted(classes, dataset.identities))
    x_all = to_nchw(dataset.images)
    net = build("FEM", spec, seed=config.seed)
    g = _torch_gen(config.seed, 40)
    class_w = torch.nn.Parameter(torch.randn(len(classes), spec.d_id, generator=g) * 0.1)
    opt = _adam(list(net.parameters()) + [class_w], config.fem_lr, config)
    steps_per_epoch = max(1, len(dataset) // config.fem_batch_size)
    losses, epoch_losses = [], []
    for step in range(config.fem_iterations):
        idx = _batch_indices(config.seed, 41, step, len(dataset), config.fem_batch_size)
        emb = net(x_all[idx])
        loss = angular_margin_loss(emb, y_all[idx], F.normalize(class_w, dim=1),
                                   config.arc_scale, config.arc_margin)
        if not torch.isfinite(loss):
            raise TrainingAborted(f"identity pretraining loss is not finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if (step + 1) % steps_per_epoch == 0 or step + 1 == config.fem_iterations:
            epoch_losses.append(float(np.mean(losses[-steps_per_epoch:])))
    return FEMResult(freeze(net), F.normalize(class_w.detach(), dim=1), epoch_losses, losses[0], losses)


# ----------------------------------------------------------------------------- FSR


@dataclass
class FSRResult:
    net: torch.nn.Module
    pool_mean: np.ndarray
    pool_std: np.ndarray
    step_losses: list[float]

    def weights_for(self, thetas: np.ndarray) -> np.ndarray:
        return importance_weights(np.atleast_2d(thetas), self.pool_mean, self.pool_std)


def wpdc_per_sample(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (weights * (pred - target) ** 2).sum(axis=1)


def pretrain_fsr(dataset: ToyDataset, config: TrainConfig, spec: NetworkSpec | None = None) -> FSRResult:
    """Train the shape regressor with importance-weighted parameter distance."""
    if dataset.thetas is None or not np.all(np.isfinite(dataset.thetas)):
        raise ContractError("shape pretraining needs ground-truth parameters for every record")
    spec = spec or NetworkSpec(image_size=dataset.images.shape[1], d_s=dataset.d_s, d_e=dataset.d_e)
    if spec.param_length != dataset.thetas.shape[1]:
        raise ContractError("dataset parameter length does not match the network spec")
    pool_mean = dataset.thetas.mean(axis=0)
    pool_std = dataset.thetas.std(axis=0)
    w_all = torch.as_tensor(importance_weights(dataset.thetas, pool_mean, pool_std), dtype=torch.float32)
    t_all = torch.as_tensor(dataset.thetas, dtype=torch.float32)
    x_all = to_nchw(dataset.images)
    net = build("FSR", spec, seed=config.seed + 1)
    with torch.no_grad():
        net.head.bias.copy_(torch.as_tensor(pool_mean, dtype=torch.float32))
        # Constant coordinates carry zero loss weight, so they would never train;
        # zero rows get zero gradient and keep them pinned at the pool value.
        net.head.weight[torch.as_tensor(pool_std == 0)] = 0.0
    opt = _adam(net.parameters(), config.fsr_lr, config)
    losses = []
    for step in range(config.fsr_iterations):
        idx = _batch_indices(config.seed, 51, step, len(dataset), config.fsr_batch_size)
        pred = net(x_all[idx])
        loss = (w_all[idx] * (pred - t_all[idx]) ** 2).sum(dim=1).mean()
        if not torch.isfinite(loss):
            raise TrainingAborted(f"shape pretraining loss is not finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return FSRResult(freeze(net), pool_mean, pool_std, losses)


# ----------------------------------------------------------------------------- joint


@dataclass
class JointNets:
    E: torch.nn.Module
    G: torch.nn.Module
    D: torch.nn.Module


@dataclass
class JointResult:
    nets: JointNets
    log: list[dict]
    step: int
    finished: bool


def render_masks(model: MorphableModel, params: np.ndarray, image_size: int) -> np.ndarray:
    """(B, H, W) hull masks for a batch of flat parameter vectors."""
    d_s, d_e = model.d_s, model.d_e
    out = np.zeros((len(params), image_size, image_size), dtype=np.float32)
    for i, v in enumerate(params):
        p = ShapeParams.from_vector(v, d_s, d_e)
        verts = (model.mean_shape + (model.shape_basis @ p.alpha_shape
                                     + model.exp_basis @ p.alpha_exp).reshape(model.V, 3)) @ p.rotation.T + p.T
        out[i] = rasterize_hull(verts[:, :2], (image_size, image_size))
    return out


def one_hot(labels, n: int = N_ILLUM) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(labels).long(), n).float()


def sample_targets(seed: int, step: int, batch: int, d_s: int, d_e: int,
                   pose_ranges: PoseRanges | None = None, illum_distribution=None):
    rng = np.random.default_rng([seed, 7, step])
    poses, labels = [], []
    for _ in range(batch):
        pose, illum = sample_target_attributes(rng, pose_ranges, illum_distribution, d_s, d_e)
        poses.append(pose.to_vector())
        labels.append(int(np.argmax(illum)))
    return torch.as_tensor(np.stack(poses), dtype=torch.float32), torch.as_tensor(labels)


class JointTrainer:
    """Owns E, G, D, their optimizers and the frozen experts for one training run."""

    def __init__(self, dataset: ToyDataset, fem, fsr, model: MorphableModel, config: TrainConfig,
                 spec: NetworkSpec | None = None, pose_ranges: PoseRanges | None = None,
                 illum_distribution=None):
        self.spec = spec or NetworkSpec(image_size=dataset.images.shape[1], d_s=model.d_s, d_e=model.d_e)
        for name, net in (("FEM", fem), ("FSR", fsr)):
            if net.spec.to_json() != self.spec.to_json():
                raise CheckpointError(f"{name} was built for {net.spec}, training uses {self.spec}")
        self.dataset = dataset
        self.x_all = to_nchw(dataset.images)
        self.labels_all = torch.as_tensor(dataset.illuminations)
        self.fem = freeze(fem)
        self.fsr = freeze(fsr)
        self.model = model
        self.config = config
        self.pose_ranges = pose_ranges
        self.illum_distribution = illum_distribution
        s = config.seed
        self.nets = JointNets(build("E", self.spec, s + 10), build("G", self.spec, s + 11),
                              build("D", self.spec, s + 12))
        self.opt_g = _adam(list(self.nets.E.parameters()) + list(self.nets.G.parameters()), config.lr, config)
        self.opt_d = _adam(self.nets.D.parameters(), config.lr, config)
        self.step = 0
        self.log: list[dict] = []

    # -- state -----------------------------------------------------------------
    def state_dict(self) -> dict:
        return {"step": self.step, "E": self.nets.E.state_dict(), "G": self.nets.G.state_dict(),
                "D": self.nets.D.state_dict(), "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(), "log": self.log,
                "config": asdict(self.config), "spec": self.spec.to_json()}

    def save_state(self, path) -> None:
        torch.save(self.state_dict(), path)

    def load_state(self, path) -> None:
        state = torch.load(path, weights_only=False)
        if state["spec"] != self.spec.to_json():
            raise CheckpointError(f"{path}: training state was saved for a different network spec")
        if state["config"] != asdict(self.config):
            raise CheckpointError(f"{path}: training state was saved with a different config")
        self.nets.E.load_state_dict(state["E"])
        self.nets.G.load_state_dict(state["G"])
        self.nets.D.load_state_dict(state["D"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = state["step"]
        self.log = list(state["log"])

    def save_networks(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("E", "G", "D"):
            save_checkpoint(getattr(self.nets, name), directory / f"{name}.npz")

    # -- one step --------------------------------------------------------------
    def build_codes(self, latent, identity, pose, labels) -> torch.Tensor:
        return torch.cat([latent, identity, pose, one_hot(labels)], dim=1)

    def batch(self, step: int) -> dict:
        """Everything a step needs that does not depend on E, G or D."""
        cfg = self.config
        idx = _batch_indices(cfg.seed, 3, step, len(self.dataset), cfg.batch_size)
        x = self.x_all[idx]
        target_pose, target_labels = sample_targets(cfg.seed, step, len(idx), self.spec.d_s,
                                                    self.spec.d_e, self.pose_ranges,
                                                    self.illum_distribution)
        with torch.no_grad():
            id_x = self.fem(x)
            pose_x = self.fsr(x)
            x_flip = torch.flip(x, dims=[3])
            pose_flip = self.fsr(x_flip)
        shape = slice(12, 12 + self.spec.d_s)
        target_pose[:, shape] = pose_x[:, shape]
        mask = torch.as_tensor(render_masks(self.model, pose_flip.double().numpy(), self.spec.image_size))
        return {"x": x, "labels_x": self.labels_all[idx], "id_x": id_x, "pose_x": pose_x,
                "x_flip": x_flip, "pose_flip": pose_flip, "mask": mask,
                "target_pose": target_pose, "target_labels": target_labels}

    def generator_components(self, b: dict) -> dict:
        """The six generator loss terms on one batch, differentiable in E and G."""
        E, G, D = self.nets.E, self.nets.G, self.nets.D
        latent = E(b["x"])
        generated = G(self.build_codes(latent, b["id_x"], b["target_pose"], b["target_labels"]))
        src_gen, logits_gen = D(generated)
        comps = {"adv": -src_gen.mean(), "cls": classification_loss(logits_gen, b["target_labels"]),
                 "id": embedding_distance(b["id_x"], self.fem(generated)),
                 "pose": ((b["target_pose"] - self.fsr(generated)) ** 2).sum(dim=1).mean()
                 / b["target_pose"].shape[1]}
        rec = G(self.build_codes(E(generated), b["id_x"], b["pose_x"], b["labels_x"]))
        comps["cycle"] = cycle_loss(b["x"], rec)
        mirrored = G(self.build_codes(latent, b["id_x"], b["pose_flip"], b["labels_x"]))
        comps["sym"] = symmetry_loss(b["mask"], mirrored, b["x_flip"])
        return comps

    def train_step(self) -> dict:
        cfg, step = self.config, self.step
        E, G, D = self.nets.E, self.nets.G, self.nets.D
        for group in (*self.opt_g.param_groups, *self.opt_d.param_groups):
            group["lr"] = lr_at(step, cfg)
        b = self.batch(step)
        x = b["x"]

        # critic updates against a fixed generator output
        with torch.no_grad():
            fake = G(self.build_codes(E(x), b["id_x"], b["target_pose"], b["target_labels"]))
        for p in D.parameters():
            p.requires_grad_(True)
        for k in range(cfg.critic_steps_per_gen_step):
            u = torch.rand(len(x), generator=_torch_gen(cfg.seed, 8, step, k))
            src_real, logits_real = D(x)
            src_fake, _ = D(fake)
            gp = gradient_penalty(D, x, fake, u, cfg.lambda_gp)
            d_adv = src_fake.mean() - src_real.mean() + gp
            d_cls = classification_loss(logits_real, b["labels_x"])
            d_loss = d_adv + d_cls
            if not torch.isfinite(d_loss):
                raise TrainingAborted(f"critic loss is not finite at step {step}")
            self.opt_d.zero_grad()
            d_loss.backward()
            self.opt_d.step()

        # generator and encoder update
        for p in D.parameters():
            p.requires_grad_(False)
        comps = self.generator_components(b)
        for name, value in comps.items():
            if not torch.isfinite(value):
                raise TrainingAborted(f"generator loss component {name!r} is not finite at step {step}")
        total = weighted_total(comps, cfg.loss_weights, cfg.ablation_mask)
        self.opt_g.zero_grad()
        if isinstance(total, torch.Tensor):
            total.backward()
            self.opt_g.step()
        report = total_generator_loss(comps, cfg.loss_weights, cfg.ablation_mask)
        record = report.to_record(step, d_loss=d_loss.item(), gp=gp.item(), d_cls=d_cls.item(),
                                  lr=lr_at(step, cfg))
        self.log.append(record)
        self.step += 1
        return record

    def steps_per_epoch(self) -> float:
        return self.config.total_iterations / self.config.epochs

    def run(self, max_steps: int | None = None, checkpoint_dir=None, callback=None) -> JointResult:
        """Train until ``total_iterations`` (or ``max_steps``) steps have been taken."""
        stop = self.config.total_iterations if max_steps is None else min(max_steps, self.config.total_iterations)
        spe = self.steps_per_epoch()
        while self.step < stop:
            self.train_step()
            if callback is not None:
                callback(self)
            if checkpoint_dir is not None:
                prev_epoch = math.floor((self.step - 1) / spe)
                if math.floor(self.step / spe) != prev_epoch or self.step == stop:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    self.save_state(Path(checkpoint_dir) / "train_state.pt")
        finished = self.step >= self.config.total_iterations
        if checkpoint_dir is not None and finished:
            self.save_networks(checkpoint_dir)
        return JointResult(self.nets, self.log, self.step, finished)


def train_joint(dataset: ToyDataset, fem, fsr, model: MorphableModel, config: TrainConfig,
                spec: NetworkSpec | None = None, checkpoint_dir=None, resume_from=None,
                max_steps: int | None = None, pose_ranges: PoseRanges | None = None,
                illum_distribution=None, callback=None) -> JointResult:
    """Joint adversarial training of E, G and D against frozen experts.

    ``fem`` and ``fsr`` may be networks or checkpoint paths.
    """
    if isinstance(fem, (str, Path)):
        fem = load_checkpoint(fem, spec, kind="FEM")
    if isinstance(fsr, (str, Path)):
        fsr = load_checkpoint(fsr, spec, kind="FSR")
    trainer = JointTrainer(dataset, fem, fsr, model, config, spec, pose_ranges, illum_distribution)
    if resume_from is not None:
        trainer.load_state(resume_from)
    return trainer.run(max_steps=max_steps, checkpoint_dir=checkpoint_dir, callback=callback)


def write_loss_log(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
