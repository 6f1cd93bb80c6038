"""Training machinery: Gaussian initialization, Adam, the Dice-loss
training loop with validation checkpointing, and the ablation runner.

All stochasticity (init, shuffling) derives from the configured seed, so
two runs with the same config are bit-identical.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import ParameterStore
from .data import SamplePair
from .metrics import binarize, dice_loss, dsc, confusion
from .model import CrossLevelContextNet, ModelConfig
from .tensor import Tape, Tensor, no_grad


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite."""


class MissingGradientError(RuntimeError):
    """Raised by adam_step when a parameter has no gradient."""


# ---------------------------------------------------------------------------
# Initialization


def gaussian_init(store: ParameterStore, policy="scaled", seed=0, std=0.05):
    """Gaussian kernels, zero biases (ConvLSTM forget bias 1), BN identity.

    policy "scaled" draws kernels from N(0, 2/fan_in); "fixed" uses the
    given std. Deterministic per seed via the fixed registration order.
    """
    if policy not in ("scaled", "fixed"):
        raise ValueError(f"init policy must be 'scaled' or 'fixed', got {policy!r}")
    rng = np.random.default_rng(seed)
    for name, p in store:
        if name.endswith(".kernel"):
            if policy == "scaled":
                fan_in = p.data[0].size  # c_in * k_h * k_w
                sigma = np.sqrt(2.0 / fan_in)
            else:
                sigma = std
            p.data[...] = rng.normal(0.0, sigma, size=p.shape).astype(p.dtype)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        elif name.endswith(".bias"):
            p.data[...] = 1.0 if ".forget." in name else 0.0
        else:  # .beta and anything shift-like
            p.data[...] = 0.0


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    """Adam moment buffers and hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParameterStore, opt: OptimState):
    """One bias-corrected Adam update; clears gradients afterwards."""
    for name, p in store:
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, p in store:
        g = p.grad
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p.data -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.epsilon)
        p.grad = None


def save_optimizer(opt: OptimState, directory):
    os.makedirs(os.path.join(directory, "moments"), exist_ok=True)
    lines = [
        f"lr={opt.lr!r}", f"beta1={opt.beta1!r}", f"beta2={opt.beta2!r}",
        f"epsilon={opt.epsilon!r}", f"t={opt.t}",
    ]
    for name in opt.m:
        np.savez(os.path.join(directory, "moments", name + ".npz"),
                 m=opt.m[name], v=opt.v[name])
        lines.append(f"moment.{name}=1")
    with open(os.path.join(directory, "optimizer.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_optimizer(directory) -> OptimState:
    opt = OptimState()
    with open(os.path.join(directory, "optimizer.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, value = line.strip().split("=", 1)
            if key == "t":
                opt.t = int(value)
            elif key in ("lr", "beta1", "beta2", "epsilon"):
                setattr(opt, key, float(value))
            elif key.startswith("moment."):
                name = key[len("moment."):]
                with np.load(os.path.join(directory, "moments", name + ".npz")) as z:
                    opt.m[name] = z["m"]
                    opt.v[name] = z["v"]
    return opt


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-4
    checkpoint_dir: str = "checkpoints"
    eval_every: int = 20          # optimizer steps between validation passes
    patience: int = 10            # early stop after this many stale evals
    init_policy: str = "scaled"
    init_std: float = 0.05
    max_steps: int | None = None
    threshold: float = 0.5
    stop_dsc: float | None = None  # stop once a validation pass reaches this

    @classmethod
    def from_file(cls, path, **overrides):
        values = {}
        fields_ = {f: t for f, t in cls.__dataclass_fields__.items()}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or "=" not in line:
                    continue
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in fields_:
                    raise ValueError(f"unknown config key {key!r} in {path}")
                values[key] = value
        tc = cls()
        for key, value in values.items():
            current = getattr(tc, key)
            if key == "max_steps":
                setattr(tc, key, None if value.lower() == "none" else int(value))
            elif key == "stop_dsc":
                setattr(tc, key, None if value.lower() == "none" else float(value))
            elif isinstance(current, bool):
                setattr(tc, key, bool(int(value)))
            elif isinstance(current, int):
                setattr(tc, key, int(value))
            elif isinstance(current, float):
                setattr(tc, key, float(value))
            else:
                setattr(tc, key, value)
        return replace(tc, **overrides) if overrides else tc


def _batch(samples):
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    masks = masks.reshape(len(samples), 1, *samples[0].mask.shape)
    return Tensor(images), Tensor(masks)


def evaluate_dsc(model, samples, threshold=0.5):
    """Mean per-sample DSC in eval mode."""
    scores = []
    with no_grad():
        for s in samples:
            prob = model.forward(s.image, mode="eval")
            pred = binarize(prob.data[0, 0], threshold)
            scores.append(dsc(confusion(pred, s.mask)))
    return float(np.mean(scores))


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    val_dsc: float | None


def write_log_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "val_dsc"])
        for r in rows:
            writer.writerow([r.epoch, r.step, repr(r.loss),
                             "" if r.val_dsc is None else repr(r.val_dsc)])


def train(model: CrossLevelContextNet, dataset, tc: TrainConfig,
          val_samples=None, opt: OptimState | None = None, start_epoch=0):
    """Shuffled mini-batch Dice-loss training with best-DSC checkpointing.

    Returns the list of :class:`LogRow`. The per-epoch shuffle is seeded
    by (seed, epoch), so an interrupted run resumed at an epoch boundary
    replays the identical batch order.
    """
    if not dataset:
        raise ValueError("train() needs a non-empty dataset")
    if val_samples is None:
        val_samples = dataset
    if opt is None:
        opt = OptimState(lr=tc.lr)
    rows = []
    best_dsc = -1.0
    stale_evals = 0
    step = opt.t
    os.makedirs(tc.checkpoint_dir, exist_ok=True)
    stop = False
    for epoch in range(start_epoch, tc.epochs):
        rng = np.random.default_rng([tc.seed, epoch])
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), tc.batch_size):
            batch = [dataset[i] for i in order[lo:lo + tc.batch_size]]
            images, targets = _batch(batch)
            with Tape() as tape:
                pred = model.forward(images, mode="train")
                loss = dice_loss(pred, targets)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at step {step + 1}"
                    )
                model.store.zero_grad()
                T.backward(loss, tape)
            adam_step(model.store, opt)
            step = opt.t
            val = None
            if step % tc.eval_every == 0:
                val = evaluate_dsc(model, val_samples, tc.threshold)
                if val > best_dsc:
                    best_dsc = val
                    stale_evals = 0
                    model.save_checkpoint(os.path.join(tc.checkpoint_dir, "best"))
                else:
                    stale_evals += 1
            rows.append(LogRow(epoch=epoch, step=step, loss=loss_value, val_dsc=val))
            if tc.max_steps is not None and step >= tc.max_steps:
                stop = True
            if tc.stop_dsc is not None and val is not None and val >= tc.stop_dsc:
                stop = True
            if stale_evals > tc.patience:
                stop = True
            if stop:
                break
        last_dir = os.path.join(tc.checkpoint_dir, "last")
        model.save_checkpoint(last_dir)
        save_optimizer(opt, last_dir)
        with open(os.path.join(last_dir, "progress.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"epoch={epoch + 1}\nstep={step}\n")
        if stop:
            break
    if best_dsc < 0:
        model.save_checkpoint(os.path.join(tc.checkpoint_dir, "best"))
    write_log_csv(rows, os.path.join(tc.checkpoint_dir, "train_log.csv"))
    return rows


# ---------------------------------------------------------------------------
# Ablation matrix

ABLATION_ROWS = [(a, c, i) for a in (0, 1) for c in (0, 1) for i in (0, 1)]


def run_ablation_matrix(base_tc: TrainConfig, dataset, out_dir,
                        config_overrides=None, holdout_fraction=0.25):
    """Train all 8 toggle combinations under one seed/budget.

    Returns rows of (aspp, clf, inference, dsc, precision, recall, voe,
    rvd) measured on a held-out subject-level tail of the dataset.
    """
    from .metrics import aggregate_report, evaluate_pair

    subjects = sorted({s.subject_id for s in dataset})
    n_hold = max(1, int(round(len(subjects) * holdout_fraction)))
    held_subjects = set(subjects[-n_hold:])
    train_set = [s for s in dataset if s.subject_id not in held_subjects]
    held_set = [s for s in dataset if s.subject_id in held_subjects]

    results = []
    for row in ABLATION_ROWS:
        tag = f"a{row[0]}c{row[1]}i{row[2]}"
        overrides = dict(config_overrides or {})
        config = ModelConfig(use_aspp=bool(row[0]), use_clf=bool(row[1]),
                             use_inference=bool(row[2]), **overrides)
        model = CrossLevelContextNet(config, seed=base_tc.seed,
                                     init_policy=base_tc.init_policy,
                                     init_std=base_tc.init_std)
        tc = replace(base_tc, checkpoint_dir=os.path.join(out_dir, tag))
        train(model, train_set, tc, val_samples=held_set)
        metric_rows = []
        with no_grad():
            for s in held_set:
                prob = model.forward(s.image, mode="eval")
                pred = binarize(prob.data[0, 0], tc.threshold)
                metric_rows.append(evaluate_pair(pred, s.mask, s.subject_id,
                                                 s.slice_index))
        report = aggregate_report(metric_rows)
        results.append((row[0], row[1], row[2], report.mean_dsc,
                        report.mean_precision, report.mean_recall,
                        report.mean_voe, report.mean_rvd_signed))
    return results


def write_ablation_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["aspp", "clf", "inference", "dsc", "precision",
                         "recall", "voe", "rvd"])
        for row in results:
            writer.writerow(list(row[:3]) + [repr(v) for v in row[3:]])
