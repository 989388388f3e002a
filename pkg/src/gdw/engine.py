"""Three-step bi-level training with class-level gradient weighting.

One iteration on a train batch ``(x, y)`` and a meta batch ``(xv, yv)``:

1. the weighting net maps each instance loss to a scalar ``w_i``, cloned
   across classes; a virtual SGD step gives ``theta_hat(omega)``;
2. the meta loss at ``theta_hat`` is backpropagated to get ``v``; one
   forward-mode pass over the train batch turns ``v`` into the gradients
   ``g`` on every class-level weight, which drive the weighting-net update;
3. ``omega`` takes a normalized, clipped step along ``-g``, is projected
   onto the zero-mean constraint, and manipulates the real update of theta.

Because ``theta_hat`` is linear in ``omega``,
``dL_meta/d omega_ij = -(lr/n) * d1_ij * <v, d logit_ij / d theta>`` exactly,
so no second-order tape is needed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import diagnostics
from .autodiff import NonFiniteError, Tape, Tensor, jvp_logits, scale, softmax_xent, tsum, mul
from .classweights import ClassWeightMatrix, clone_weights, manipulate_d1, second_stage_weights
from .data import LabeledDataset
from .models import (MLPParams, classifier_logits, init_classifier, init_weighting_net, load_arrays,
                     save_arrays, weighting_net)
from .optim import Adam, SGDMomentum, cosine_lr

log = logging.getLogger(__name__)

MODES = ("gdw", "instance-weighting", "plain", "gdw-no-constraint")
GDW_MODES = ("gdw", "gdw-no-constraint")


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"training aborted at iteration {iteration}: {cause}")


@dataclass
class TrainerConfig:
    mode: str = "gdw"
    lr_theta: float = 0.1
    lr_phi: float = 1e-3
    lr_omega: float = 1.0
    clip: float = 0.2
    batch_size: int = 100
    meta_batch_size: int = 100
    epochs: int = 80
    weight_decay: float = 5e-4
    momentum: float = 0.9
    phi_weight_decay: float = 1e-4
    phi_decoupled_wd: bool = False
    hidden: tuple[int, ...] = (64,)
    weight_hidden: int = 100
    standardize_loss: bool = False
    # Evaluate the stage-one weights again with the freshly updated
    # weighting net before the class-level step (as the scalar baseline does).
    refresh_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.lr_theta <= 0 or self.lr_phi <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_omega < 0:
            raise ValueError("lr_omega must be non-negative")
        if self.batch_size < 1 or self.meta_batch_size < 1 or self.epochs < 0:
            raise ValueError("batch sizes must be >= 1 and epochs >= 0")
        if self.weight_hidden < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainBatch:
    """A train mini-batch evaluated at the current theta, tape kept for reuse."""

    x: np.ndarray
    onehot: np.ndarray
    targets: np.ndarray
    tape: Tape
    logits: Tensor
    losses: Tensor
    d1: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return self.d1 + self.onehot


@dataclass
class HypergradientBundle:
    v: list[np.ndarray]
    g: np.ndarray
    d1: np.ndarray
    p: np.ndarray
    meta_loss: float


def forward_batch(theta: MLPParams, x: np.ndarray, targets: np.ndarray, num_classes: int) -> TrainBatch:
    onehot = np.zeros((len(targets), num_classes))
    onehot[np.arange(len(targets)), targets] = 1.0
    tape = Tape()
    with tape:
        logits = classifier_logits(theta, x)
        losses, d1 = softmax_xent(logits, onehot)
    return TrainBatch(x, onehot, np.asarray(targets), tape, logits, losses, d1)


def manipulated_gradient(theta: MLPParams, batch: TrainBatch, omega) -> list[np.ndarray]:
    """``(1/n) sum_i (omega_i * d1_i) d logits_i / d theta`` via one backward pass."""
    om = omega.omega if isinstance(omega, ClassWeightMatrix) else np.asarray(omega)
    seed = manipulate_d1(batch.d1, om * (1.0 / batch.n))
    theta.zero_grad()
    batch.tape.vjp(batch.logits, seed)
    return [g.copy() for g in theta.grads()]


def sgd_params(theta: MLPParams, grads: list[np.ndarray], lr: float) -> MLPParams:
    return MLPParams.from_arrays([a - lr * g for a, g in zip(theta.arrays(), grads)])


def _check_update(name: str, arrays: list[np.ndarray]) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(name)


def virtual_update(theta: MLPParams, batch: TrainBatch, omega: ClassWeightMatrix, lr: float) -> MLPParams:
    """Plain SGD look-ahead with stage-one weights; no momentum or weight decay."""
    if isinstance(omega, ClassWeightMatrix) and omega.stage != "first":
        raise ValueError("virtual update expects stage-one weights")
    theta_hat = sgd_params(theta, manipulated_gradient(theta, batch, omega), lr)
    _check_update("virtual_update", theta_hat.arrays())
    return theta_hat


def meta_gradient(theta_hat: MLPParams, xv: np.ndarray, yv: np.ndarray, num_classes: int):
    """Mean meta cross-entropy at ``theta_hat`` and its gradient ``v``."""
    meta = forward_batch(theta_hat, xv, yv, num_classes)
    with meta.tape:
        loss = scale(tsum(meta.losses), 1.0 / meta.n)
    theta_hat.zero_grad()
    meta.tape.backward(loss)
    return float(loss.data), [g.copy() for g in theta_hat.grads()]


def omega_gradients(theta: MLPParams, batch: TrainBatch, v: list[np.ndarray], lr: float) -> np.ndarray:
    """Exact meta-loss gradient with respect to each class-level weight."""
    u = jvp_logits(theta.weights, theta.biases, v[0::2], v[1::2], batch.x)
    return (-lr / batch.n) * batch.d1 * u


def meta_hypergradients(theta: MLPParams, batch: TrainBatch, theta_hat: MLPParams,
                        xv: np.ndarray, yv: np.ndarray, lr: float, num_classes: int) -> HypergradientBundle:
    meta_loss, v = meta_gradient(theta_hat, xv, yv, num_classes)
    g = omega_gradients(theta, batch, v, lr)
    return HypergradientBundle(v, g, batch.d1, batch.probs, meta_loss)


def weighting_net_grads(phi: MLPParams, losses: np.ndarray, instance_grads: np.ndarray,
                        standardize: bool = False) -> list[np.ndarray]:
    """Chain per-instance weight gradients back to the weighting-net parameters."""
    tape = Tape()
    with tape:
        out = weighting_net(phi, losses, standardize)
    phi.zero_grad()
    tape.vjp(out, instance_grads.reshape(-1, 1))
    return [g.copy() for g in phi.grads()]


def actual_update(theta: MLPParams, batch: TrainBatch, omega_prime: ClassWeightMatrix,
                  opt: SGDMomentum, lr: float) -> MLPParams:
    grads = manipulated_gradient(theta, batch, omega_prime)
    opt.step(theta.arrays(), grads, lr)
    _check_update("actual_update", theta.arrays())
    return theta


@dataclass
class RunRecord:
    mode: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    @property
    def final_accuracy(self) -> float:
        """Mean test accuracy over the last five epochs."""
        accs = [e["test_acc"] for e in self.epochs if "test_acc" in e][-5:]
        return float(np.mean(accs)) if accs else float("nan")


class Trainer:
    """Owns theta, phi, optimizer state and RNG streams for one run."""

    def __init__(self, config: TrainerConfig, train: LabeledDataset, meta: LabeledDataset | None,
                 test: LabeledDataset | None = None, eval_every: int = 1):
        config.validate()
        self.eval_every = eval_every
        if config.mode != "plain" and (meta is None or len(meta) == 0):
            raise ValueError(f"mode {config.mode!r} needs a non-empty meta set")
        self.config = config
        self.train = train
        self.meta = meta
        self.test = test
        self.num_classes = train.num_classes
        init_rng = np.random.default_rng([config.seed, 0])
        self.theta = init_classifier(train.features.shape[1], config.hidden, self.num_classes, init_rng)
        self.phi = init_weighting_net(init_rng, config.weight_hidden)
        self.theta_opt = SGDMomentum(self.theta.arrays(), config.lr_theta, config.momentum, config.weight_decay)
        self.phi_opt = Adam(self.phi.arrays(), config.lr_phi, weight_decay=config.phi_weight_decay,
                            decoupled=config.phi_decoupled_wd)
        self.order_rng = np.random.default_rng([config.seed, 1])
        self.meta_rng = np.random.default_rng([config.seed, 2])
        self.epoch = 0
        self.iteration = 0
        self.record = RunRecord(config.mode, config.seed)

    @property
    def iters_per_epoch(self) -> int:
        return -(-len(self.train) // self.config.batch_size)

    @property
    def total_iters(self) -> int:
        return self.iters_per_epoch * self.config.epochs

    def current_lr(self) -> float:
        return cosine_lr(min(self.iteration, self.total_iters), max(self.total_iters, 1), self.config.lr_theta)

    def _meta_batch(self):
        m = min(self.config.meta_batch_size, len(self.meta))
        idx = self.meta_rng.choice(len(self.meta), size=m, replace=False)
        return self.meta.features[idx], self.meta.labels[idx]

    def step(self, idx: np.ndarray) -> dict:
        """One training iteration on train indices ``idx``."""
        cfg = self.config
        x = self.train.features[idx]
        y = self.train.labels[idx]
        lr = self.current_lr()
        batch = forward_batch(self.theta, x, y, self.num_classes)
        losses = batch.losses.data
        info = {"loss": float(losses.mean())}
        if cfg.mode == "plain":
            with batch.tape:
                loss = scale(tsum(batch.losses), 1.0 / batch.n)
            self.theta.zero_grad()
            batch.tape.backward(loss)
            self.theta_opt.step(self.theta.arrays(), self.theta.grads(), lr)
            _check_update("plain_update", self.theta.arrays())
            return info
        xv, yv = self._meta_batch()
        if cfg.mode == "instance-weighting":
            info.update(self._instance_weighting_step(batch, xv, yv, lr))
        else:
            info.update(self._gdw_step(batch, xv, yv, lr))
        return info

    def _gdw_step(self, batch: TrainBatch, xv, yv, lr: float) -> dict:
        cfg = self.config
        losses = batch.losses.data
        w = weighting_net(self.phi, losses, cfg.standardize_loss).data[:, 0]
        omega = clone_weights(w, batch.targets, self.num_classes)
        theta_hat = virtual_update(self.theta, batch, omega, lr)
        hyper = meta_hypergradients(self.theta, batch, theta_hat, xv, yv, lr, self.num_classes)
        phi_grads = weighting_net_grads(self.phi, losses, hyper.g.sum(axis=1), cfg.standardize_loss)
        self.phi_opt.step(self.phi.arrays(), phi_grads)
        if cfg.refresh_weights:
            w = weighting_net(self.phi, losses, cfg.standardize_loss).data[:, 0]
            omega = clone_weights(w, batch.targets, self.num_classes)
        omega_prime = second_stage_weights(omega, hyper.g, hyper.p, cfg.lr_omega, cfg.clip,
                                           project=cfg.mode == "gdw")
        actual_update(self.theta, batch, omega_prime, self.theta_opt, lr)
        return {"meta_loss": hyper.meta_loss, "omega": omega, "omega_prime": omega_prime, "probs": hyper.p}

    def _instance_weighting_step(self, batch: TrainBatch, xv, yv, lr: float) -> dict:
        # Scalar weights only: weighted mean loss on the tape, no class-level matrix.
        cfg = self.config
        losses = batch.losses.data
        inv_n = 1.0 / batch.n
        w = weighting_net(self.phi, losses, cfg.standardize_loss).data[:, 0]
        with batch.tape:
            weighted = scale(tsum(mul(batch.losses, Tensor(w))), inv_n)
        self.theta.zero_grad()
        batch.tape.backward(weighted)
        theta_hat = sgd_params(self.theta, [g.copy() for g in self.theta.grads()], lr)
        _check_update("virtual_update", theta_hat.arrays())
        meta_loss, v = meta_gradient(theta_hat, xv, yv, self.num_classes)
        w_grads = omega_gradients(self.theta, batch, v, lr).sum(axis=1)
        phi_grads = weighting_net_grads(self.phi, losses, w_grads, cfg.standardize_loss)
        self.phi_opt.step(self.phi.arrays(), phi_grads)
        w_new = weighting_net(self.phi, losses, cfg.standardize_loss).data[:, 0]
        with batch.tape:
            weighted = scale(tsum(mul(batch.losses, Tensor(w_new))), inv_n)
        self.theta.zero_grad()
        batch.tape.backward(weighted)
        self.theta_opt.step(self.theta.arrays(), self.theta.grads(), lr)
        _check_update("actual_update", self.theta.arrays())
        return {"meta_loss": meta_loss, "weights": w_new}

    def evaluate(self, ds: LabeledDataset) -> tuple[float, float]:
        """Accuracy and mean cross-entropy against the observed labels of ``ds``."""
        logits = classifier_logits(self.theta, ds.features).data
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
        acc = float((logits.argmax(axis=1) == ds.labels).mean())
        return acc, loss

    def run_epoch(self) -> dict:
        cfg = self.config
        order = self.order_rng.permutation(len(self.train))
        batch_losses, meta_losses, lrs = [], [], []
        snaps = {"before": [], "after": [], "targets": [], "clean": [], "probs": []}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lrs.append(self.current_lr())
            try:
                info = self.step(idx)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingAborted(self.iteration, exc) from exc
            self.iteration += 1
            batch_losses.append(info["loss"])
            if "meta_loss" in info:
                meta_losses.append(info["meta_loss"])
            if "omega_prime" in info:
                snaps["before"].append(info["omega"].omega)
                snaps["after"].append(info["omega_prime"].omega)
                snaps["targets"].append(info["omega"].targets)
                snaps["clean"].append(self.train.clean_labels[idx])
                snaps["probs"].append(info["probs"])
        self.epoch += 1
        row = {
            "epoch": self.epoch,
            "lr": float(lrs[0]) if lrs else self.current_lr(),
            "train_loss": float(np.mean(batch_losses)) if batch_losses else float("nan"),
            "batch_loss_var": float(np.var(batch_losses)) if batch_losses else float("nan"),
        }
        if meta_losses:
            row["meta_loss"] = float(np.mean(meta_losses))
        if self.test is not None and (self.epoch % self.eval_every == 0 or self.epoch == cfg.epochs):
            row["test_acc"], row["test_loss"] = self.evaluate(self.test)
        if snaps["after"]:
            row.update(diagnostics.weight_dynamics(
                np.concatenate(snaps["before"]), np.concatenate(snaps["after"]),
                np.concatenate(snaps["targets"]), np.concatenate(snaps["clean"]), self.num_classes,
                mode=cfg.mode))
        return row

    def run(self) -> Iterator[dict]:
        while self.epoch < self.config.epochs:
            try:
                try:
                    row = self.run_epoch()
                except (NonFiniteError, FloatingPointError) as exc:
                    # evaluation can overflow on parameters that are huge but finite
                    raise TrainingAborted(self.iteration, exc) from exc
            except TrainingAborted as exc:
                self.record.status = "aborted"
                self.record.error = str(exc)
                raise
            self.record.epochs.append(row)
            yield row
        self.record.status = "completed"

    def save_checkpoint(self, path) -> None:
        arrays = {**self.theta.named_arrays("theta"), **self.phi.named_arrays("phi")}
        for k, a in enumerate(self.theta_opt.state_arrays()):
            arrays[f"theta_opt.{k}"] = a
        for k, a in enumerate(self.phi_opt.state_arrays()):
            arrays[f"phi_opt.{k}"] = a
        meta = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "theta_opt_steps": self.theta_opt.steps,
            "phi_opt_steps": self.phi_opt.steps,
            "order_rng": self.order_rng.bit_generator.state,
            "meta_rng": self.meta_rng.bit_generator.state,
            "records": json.loads(json.dumps(self.record.epochs)),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def from_checkpoint(cls, path, train: LabeledDataset, meta: LabeledDataset | None,
                        test: LabeledDataset | None = None, eval_every: int = 1) -> "Trainer":
        arrays, info = load_arrays(path)
        trainer = cls(TrainerConfig.from_dict(info["config"]), train, meta, test, eval_every)

        def group(prefix):
            keys = [k for k in arrays if k.startswith(prefix + ".")]
            return [arrays[k] for k in keys]

        trainer.theta = MLPParams.from_arrays(group("theta"))
        trainer.phi = MLPParams.from_arrays(group("phi"))
        trainer.theta_opt.load_state_arrays(group("theta_opt"), info["theta_opt_steps"])
        trainer.phi_opt.load_state_arrays(group("phi_opt"), info["phi_opt_steps"])
        trainer.order_rng.bit_generator.state = info["order_rng"]
        trainer.meta_rng.bit_generator.state = info["meta_rng"]
        trainer.epoch = info["epoch"]
        trainer.iteration = info["iteration"]
        trainer.record.epochs = info["records"]
        return trainer


def train_gdw(config: TrainerConfig, train: LabeledDataset, meta: LabeledDataset | None,
              test: LabeledDataset | None = None) -> tuple[MLPParams, RunRecord]:
    trainer = Trainer(config, train, meta, test)
    for _ in trainer.run():
        pass
    return trainer.theta, trainer.record


def no_constraint_ablation(config: TrainerConfig, train, meta, test=None) -> RunRecord:
    if config.mode != "gdw-no-constraint":
        config = dataclasses.replace(config, mode="gdw-no-constraint")
    return train_gdw(config, train, meta, test)[1]
