"""Training steps for 3N-GAN and the three baselines, plus the epoch loop.

One call to a ``*_step`` function performs exactly one optimizer step per
network it owns. Within a 3N-GAN step the default order is discriminator,
generator, classifier; all three see the same generated batch, drawn once at
the start of the step.

Passes over generated images never update batchnorm running statistics, so
the statistics used at evaluation time describe real images only.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .autodiff import Adam, Tensor, backward, no_grad, ops
from .autodiff.kernels import BACKEND
from .data import Dataset, LabeledBatch, batch_iter
from .losses import (
    LossReport,
    LossWeights,
    classifier_objective,
    discriminator_terms,
    generator_objective,
    supervised_loss,
)
from .nets import (
    Network,
    NetworkSpec,
    build_classifier,
    build_discriminator,
    build_generator,
    frozen,
    init_weights,
    save_checkpoint,
)
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)


class TrainerKind(str, enum.Enum):
    VANILLA = "vanilla"
    MULTITASK_D = "multitask_d"
    ECGAN = "ecgan"
    TRI_GAN = "tri_gan"

    @classmethod
    def parse(cls, name) -> "TrainerKind":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "_")
        key = TRAINER_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = sorted({k.value for k in cls} | set(TRAINER_ALIASES))
            raise ValueError(f"unknown trainer {name!r}; choose from {choices}") from None


TRAINER_ALIASES = {
    "3ngan": "tri_gan",
    "3n_gan": "tri_gan",
    "trigan": "tri_gan",
    "multitask": "multitask_d",
    "ec_gan": "ecgan",
}

# display names, in the row order of the results table
TRAINER_LABELS = {
    TrainerKind.VANILLA: "Vanilla Classifier",
    TrainerKind.MULTITASK_D: "Multi-Tasking Discriminator",
    TrainerKind.ECGAN: "EC-GAN",
    TrainerKind.TRI_GAN: "3N-GAN",
}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class StepOptions:
    """Optimizers and randomness shared by the step functions.

    ``opt_d`` doubles as the shared network's optimizer in the multi-task
    baseline. ``update_order`` is a permutation of ``"DGC"``.
    """

    opt_g: Optional[Adam] = None
    opt_d: Optional[Adam] = None
    opt_c: Optional[Adam] = None
    latent_rng: Optional[np.random.Generator] = None
    latent_dim: int = 100
    update_order: str = "DGC"
    kl_direction: str = "real-to-fake"

    def __post_init__(self):
        if sorted(self.update_order) != sorted("DGC"):
            raise ValueError(f"update_order must be a permutation of 'DGC', got {self.update_order!r}")


@dataclass
class StepMetrics:
    report: LossReport
    train_accuracy: float
    d_real_mean: Optional[float] = None
    d_fake_mean: Optional[float] = None
    fake: Optional[np.ndarray] = None


def _check_finite(component, tensor):
    value = tensor.item()
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {component} loss ({value})")
    return value


def _accuracy(logits: np.ndarray, labels, num_classes=None) -> float:
    if num_classes is not None:
        logits = logits[:, :num_classes]
    return float(np.mean(logits.argmax(axis=1) == labels))


def _draw_fake(G, opts, batch_size):
    z = opts.latent_rng.standard_normal((batch_size, opts.latent_dim))
    return G(Tensor(z))


def _optimize(opt, component, loss):
    _check_finite(component, loss)
    opt.zero_grad()
    backward(loss)
    opt.step()


# ---------------------------------------------------------------------------
# step functions


def _adversarial_step(real, G, D, C, opts, weights, full):
    images = Tensor(real.images)
    fake = _draw_fake(G, opts, len(real))
    fake_const = fake.detach()
    report = LossReport()
    out = {}
    for phase in opts.update_order:
        if phase == "D":
            d_real = D(images)
            d_fake = D(fake_const, update_stats=False)
            l_real, l_fake = discriminator_terms(d_real, d_fake)
            _optimize(opts.opt_d, "discriminator", l_real + l_fake)
            report.l_d_real, report.l_d_fake = l_real.item(), l_fake.item()
            out["d_real"], out["d_fake"] = float(d_real.data.mean()), float(d_fake.data.mean())
        elif phase == "G":
            with frozen(D, C):
                d_out = D(fake, update_stats=False)
                logits_g = C(fake, update_stats=False) if full else None
                loss, rep = generator_objective(d_out, logits_g, weights, use_cu=full)
                _optimize(opts.opt_g, "generator", loss)
            report.l_gen_adv, report.l_cu, report.l_g_total = rep.l_gen_adv, rep.l_cu, rep.l_g_total
        else:
            logits = C(images)
            logits_g = C(fake_const, update_stats=False)
            loss, rep = classifier_objective(
                logits, real.labels, logits_g, weights, kl_direction=opts.kl_direction, use_kl=full
            )
            _optimize(opts.opt_c, "classifier", loss)
            report.merge(rep)
            out["acc"] = _accuracy(logits.data, real.labels)
    return StepMetrics(report, out["acc"], out["d_real"], out["d_fake"], fake_const.data)


def tri_gan_step(real: LabeledBatch, G: Network, D: Network, C: Network, opts: StepOptions,
                 weights: LossWeights) -> StepMetrics:
    """One simultaneous update of generator, discriminator and classifier.

    The generator's loss combines the discriminator's verdict with the
    classifier's pseudo-label loss on the same fakes; the classifier trains
    on real labels plus the (detached) fakes via pseudo-labels and the KL
    consistency term.
    """
    return _adversarial_step(real, G, D, C, opts, weights, full=True)


def ecgan_step(real: LabeledBatch, G: Network, D: Network, C: Network, opts: StepOptions,
               weights: LossWeights) -> StepMetrics:
    """As :func:`tri_gan_step`, but the generator ignores the classifier and
    the classifier has no KL term."""
    return _adversarial_step(real, G, D, C, opts, weights, full=False)


def vanilla_step(real: LabeledBatch, C: Network, opts: StepOptions) -> StepMetrics:
    logits = C(Tensor(real.images))
    loss = supervised_loss(logits, real.labels)
    _optimize(opts.opt_c, "classifier", loss)
    value = loss.item()
    report = LossReport(l_s=value, l_c_total=value)
    return StepMetrics(report, _accuracy(logits.data, real.labels))


def multitask_step(real: LabeledBatch, G: Network, SD: Network, opts: StepOptions) -> StepMetrics:
    """Shared discriminator/classifier with an extra "fake" class.

    ``SD`` emits ``num_classes + 1`` logits; the last one is the fake class.
    Real samples are trained toward their label, generated ones toward the
    fake class, and the generator is trained to keep its samples out of it.
    Uses ``opts.opt_d`` for ``SD`` and ``opts.opt_g`` for ``G``.
    """
    K = SD.spec.num_classes
    fake_class = K - 1
    images = Tensor(real.images)
    fake = _draw_fake(G, opts, len(real))
    fake_const = fake.detach()
    report = LossReport()
    out = {}
    for phase in opts.update_order:
        if phase == "D":
            logits_r = SD(images)
            logits_f = SD(fake_const, update_stats=False)
            l_real = supervised_loss(logits_r, real.labels)
            l_fake = supervised_loss(logits_f, np.full(len(real), fake_class))
            _optimize(opts.opt_d, "multitask discriminator", l_real + l_fake)
            p_real = _not_fake_prob(logits_r.data)
            p_fake = _not_fake_prob(logits_f.data)
            report.l_s = l_real.item()
            report.l_d_real = float(-np.mean(np.log(np.maximum(p_real, 1e-12))))
            report.l_d_fake = l_fake.item()
            report.l_c_total = l_real.item() + l_fake.item()
            out["d_real"], out["d_fake"] = float(p_real.mean()), float(p_fake.mean())
            out["acc"] = _accuracy(logits_r.data, real.labels, fake_class)
        elif phase == "G":
            with frozen(SD):
                logits = SD(fake, update_stats=False)
                log_not_fake = ops.logsumexp(logits[:, :fake_class], axis=1) - ops.logsumexp(logits, axis=1)
                loss = -ops.mean(log_not_fake)
                _optimize(opts.opt_g, "generator", loss)
            report.l_gen_adv = report.l_g_total = loss.item()
    return StepMetrics(report, out["acc"], out["d_real"], out["d_fake"], fake_const.data)


def _not_fake_prob(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return 1.0 - e[:, -1] / e.sum(axis=1)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(C: Network, dataset, num_classes: Optional[int] = None, batch_size: int = 100) -> float:
    """Fraction of argmax-correct predictions, using running batchnorm statistics.

    ``dataset`` is a :class:`Dataset` or an iterable of :class:`LabeledBatch`.
    With ``num_classes`` set, only the first ``num_classes`` logits count (the
    multi-task network's fake logit is ignored).
    """
    if isinstance(dataset, Dataset):
        if len(dataset) == 0:
            raise ValueError("evaluate: empty dataset")
        if num_classes is None:
            num_classes = dataset.num_classes
        batches = (
            LabeledBatch(dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size])
            for i in range(0, len(dataset), batch_size)
        )
    else:
        batches = dataset
    was_training = C.training
    C.eval()
    correct = total = 0
    try:
        with no_grad():
            for batch in batches:
                logits = C(Tensor(batch.images)).data
                if num_classes is not None:
                    logits = logits[:, :num_classes]
                correct += int(np.sum(logits.argmax(axis=1) == batch.labels))
                total += len(batch.labels)
    finally:
        C.training = was_training
    if total == 0:
        raise ValueError("evaluate: empty dataset")
    return correct / total


def validation_loss(C: Network, ds: Dataset, num_classes: Optional[int] = None, batch_size: int = 100) -> float:
    was_training = C.training
    C.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(ds), batch_size):
                logits = C(Tensor(ds.images[i : i + batch_size]))
                if num_classes is not None:
                    logits = Tensor(logits.data[:, :num_classes])
                total += supervised_loss(logits, ds.labels[i : i + batch_size]).item() * len(logits.data)
    finally:
        C.training = was_training
    return total / len(ds)


# ---------------------------------------------------------------------------
# full runs

METRIC_COLUMNS = (
    "epoch",
    "split",
    "l_s",
    "l_u",
    "l_kl",
    "l_d_real",
    "l_d_fake",
    "l_gen_adv",
    "l_cu",
    "accuracy",
    "accepted_fraction",
    "wall_ms",
)


@dataclass
class RunNetworks:
    kind: TrainerKind
    classifier: Network
    generator: Optional[Network] = None
    discriminator: Optional[Network] = None
    options: StepOptions = field(default_factory=StepOptions)

    @property
    def eval_classes(self) -> Optional[int]:
        # the multi-task network's last logit is the fake class
        if self.kind is TrainerKind.MULTITASK_D:
            return self.classifier.spec.num_classes - 1
        return None


def build_run(config, num_classes: int) -> RunNetworks:
    """Build, initialise and wire the networks and optimizers for ``config``."""
    kind = TrainerKind.parse(config.trainer)
    common = dict(image_size=config.image_size, latent_dim=config.latent_dim, base_width=config.base_width)
    head = num_classes + 1 if kind is TrainerKind.MULTITASK_D else num_classes
    C = build_classifier(NetworkSpec("classifier", num_classes=head, **common))
    init_weights(C, derive_seed(config.seed, "init_classifier"))
    adam = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    opts = StepOptions(
        latent_rng=rng_for(config.seed, "latent"),
        latent_dim=config.latent_dim,
        update_order=config.update_order,
        kl_direction=config.kl_direction,
    )
    run = RunNetworks(kind, C, options=opts)
    if kind is TrainerKind.MULTITASK_D:
        opts.opt_d = Adam(C.named_parameters().items(), **adam)
    else:
        opts.opt_c = Adam(C.named_parameters().items(), **adam)
    if kind is not TrainerKind.VANILLA:
        G = build_generator(NetworkSpec("generator", num_classes=num_classes, **common))
        init_weights(G, derive_seed(config.seed, "init_generator"))
        opts.opt_g = Adam(G.named_parameters().items(), **adam)
        run.generator = G
    if kind in (TrainerKind.ECGAN, TrainerKind.TRI_GAN):
        D = build_discriminator(NetworkSpec("discriminator", num_classes=num_classes, **common))
        init_weights(D, derive_seed(config.seed, "init_discriminator"))
        opts.opt_d = Adam(D.named_parameters().items(), **adam)
        run.discriminator = D
    return run


def run_step(run: RunNetworks, batch: LabeledBatch, weights: LossWeights) -> StepMetrics:
    kind = run.kind
    if kind is TrainerKind.VANILLA:
        return vanilla_step(batch, run.classifier, run.options)
    if kind is TrainerKind.MULTITASK_D:
        return multitask_step(batch, run.generator, run.classifier, run.options)
    step = tri_gan_step if kind is TrainerKind.TRI_GAN else ecgan_step
    return step(batch, run.generator, run.discriminator, run.classifier, run.options, weights)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class _EpochAverager:
    KEYS = ("l_s", "l_u", "l_kl", "l_d_real", "l_d_fake", "l_gen_adv", "l_cu", "accepted_fraction")

    def __init__(self):
        self.sums = {}
        self.acc = []

    def add(self, m: StepMetrics):
        for k in self.KEYS:
            v = getattr(m.report, k)
            if v is not None:
                self.sums.setdefault(k, []).append(v)
        self.acc.append(m.train_accuracy)

    def row(self):
        out = {k: (float(np.mean(v)) if v else None) for k, v in ((k, self.sums.get(k)) for k in self.KEYS)}
        out["accuracy"] = float(np.mean(self.acc)) if self.acc else None
        return out


@dataclass
class RunResult:
    run_dir: Path
    initial_accuracy: float
    final_accuracy: float
    best_accuracy: float
    history: list
    wall_time_s: float


def sample_latents(config, count: int) -> np.ndarray:
    return rng_for(config.seed, "samples").standard_normal((count, config.latent_dim))


def train_run(config, train_set: Dataset, val_set: Dataset, run_dir, config_hash: str = "") -> RunResult:
    """Train ``config.trainer`` for ``config.epochs`` epochs and persist artifacts.

    Writes ``metrics.csv`` (rewritten every epoch), ``run.json``, sample grids
    every ``config.sample_every`` epochs for generator-bearing trainers, and
    final checkpoints under ``ckpt/``.
    """
    from .harness.export import write_montage

    t_start = time.perf_counter()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    weights = LossWeights(tau=config.tau, alpha=config.alpha, lam=config.lam)
    run = build_run(config, train_set.num_classes)
    fixed_z = sample_latents(config, 64) if run.generator is not None else None
    shuffle_seed = derive_seed(config.seed, "shuffle")

    initial = evaluate(run.classifier, val_set, run.eval_classes)
    history = []
    metrics_path = run_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        fh.flush()
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            avg = _EpochAverager()
            for batch in batch_iter(train_set, config.batch_size, shuffle_seed, epoch):
                avg.add(run_step(run, batch, weights))
            train_row = avg.row()
            val_acc = evaluate(run.classifier, val_set, run.eval_classes)
            val_ls = validation_loss(run.classifier, val_set, run.eval_classes)
            wall = (time.perf_counter() - t0) * 1000.0 if config.record_wall_time else None
            rows = [
                dict(train_row, epoch=epoch, split="train", wall_ms=wall),
                dict(epoch=epoch, split="val", l_s=val_ls, accuracy=val_acc, wall_ms=wall),
            ]
            for r in rows:
                writer.writerow([_fmt(r.get(c)) if c != "split" else r[c] for c in METRIC_COLUMNS])
            fh.flush()
            history.extend(rows)
            logger.info("epoch %d: train acc %.4f, val acc %.4f", epoch, train_row["accuracy"], val_acc)
            if fixed_z is not None and config.sample_every and epoch % config.sample_every == 0:
                write_montage(_generate(run.generator, fixed_z), run_dir / "samples" / f"epoch_{epoch:03d}.pgm")

    val_accs = [r["accuracy"] for r in history if r["split"] == "val"]
    final = val_accs[-1] if val_accs else initial
    best = max(val_accs) if val_accs else initial
    ckpt = run_dir / "ckpt"
    save_checkpoint(run.classifier, ckpt / "classifier.ckpt")
    if run.generator is not None:
        save_checkpoint(run.generator, ckpt / "generator.ckpt")
        write_montage(_generate(run.generator, fixed_z), run_dir / "samples" / "final.pgm")
    if run.discriminator is not None:
        save_checkpoint(run.discriminator, ckpt / "discriminator.ckpt")
    wall_time = time.perf_counter() - t_start
    record = {
        "config_hash": config_hash,
        "config": config.to_dict(),
        "initial_accuracy": initial,
        "final_accuracy": final,
        "best_accuracy": best,
        "wall_time_s": wall_time,
        "version": f"trigan {__version__} (kernels: {BACKEND})",
    }
    (run_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")
    return RunResult(run_dir, initial, final, best, history, wall_time)


def _generate(G: Network, z: np.ndarray) -> np.ndarray:
    was_training = G.training
    G.eval()
    try:
        with no_grad():
            return G(Tensor(z)).data
    finally:
        G.training = was_training
