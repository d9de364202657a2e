"""Bi-level meta-training engine.

One episode performs three phases on a single differentiation tape:

1. inner step: the segmentation head is adapted by one (or a few) plain
   SGD steps on a batch from one sampled dataset, recorded with
   ``create_graph=True`` so the adapted head stays a differentiable
   function of the feature extractor.
2. extractor update: the combined outer objective is evaluated on the
   other two datasets with the adapted head; a single reverse pass
   through the retained inner graph yields the total hypergradient of
   the extractor, including the second-order path through the inner
   update. Nesterov momentum and weight decay are applied.
3. head-initialization update: the outer segmentation loss is evaluated
   at the adapted head on freshly sampled batches; its first-order
   gradient is applied to the head initialization (the curvature factor
   of the exact update is dropped, which is the documented first-order
   shortcut).

A pool object supplies data through a small duck-typed protocol:
``train_group_names`` (three names), ``sample_batch(group, split, n,
rng) -> (images, labels)`` and ``subjects(group, split)`` yielding
``(image, labels)`` pairs. Everything downstream of (seed, config,
pool) is deterministic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import (
    GradCheckReport,
    NumericalError,
    ParamSet,
    Tape,
    Tensor,
    grad,
    no_grad,
    relative_error,
)
from .segnet import NetConfig, build_network, decode, extract_features, forward_logits, partition_head
from .losses import LossWeights, outer_loss, seg_loss, tissue_representations
from . import dtns

HYPERGRAD_MODES = ("exact", "first-order", "finite-diff-check")
LR_SCHEDULES = ("poly", "constant")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by meta-training and the baselines."""

    lr: float = 0.01
    lr_schedule: str = "poly"
    lr_power: float = 0.9
    momentum: float = 0.99
    weight_decay: float = 3e-5
    episodes: int = 150
    batch_size: int = 2
    hypergrad_mode: str = "exact"
    inter_weight: float = 0.1
    intra_weight: float = 0.001
    intra_mode: str = "batchmean"
    inner_steps: int = 1
    inner_lr: float | None = None          # None: share the outer rate
    shared_outer_batches: bool = False
    checkpoint_every: int = 25
    fd_param_limit: int = 2000
    fd_eps: float = 1e-5          # small enough to stay inside relu-smooth regions
    fd_tol: float = 1e-5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.hypergrad_mode not in HYPERGRAD_MODES:
            raise ValueError(f"hypergrad_mode must be one of {HYPERGRAD_MODES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("invalid weight_decay/batch_size/inner_steps")
        if self.inner_lr is not None and self.inner_lr <= 0:
            raise ValueError("inner_lr must be > 0 when given")

    def learning_rate(self, t: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(max(t / self.episodes, 0.0), 1.0)
        return self.lr * (1.0 - frac) ** self.lr_power

    def inner_rate(self, t: int) -> float:
        return self.inner_lr if self.inner_lr is not None else self.learning_rate(t)

    def loss_weights(self, num_scales: int) -> LossWeights:
        return LossWeights.for_scales(
            num_scales, inter_weight=self.inter_weight,
            intra_weight=self.intra_weight, intra_mode=self.intra_mode)


@dataclass
class MetaState:
    """Everything that evolves across episodes."""

    theta: ParamSet
    phi: ParamSet
    t: int
    rng: np.random.Generator
    vel_theta: dict = field(default_factory=dict)
    vel_phi: dict = field(default_factory=dict)


@dataclass
class EpisodeTrace:
    episode: int
    alpha: float
    inner_dataset: str
    outer_datasets: tuple
    inner_loss: float
    outer_loss: float
    outer2_loss: float
    direct_norm: float
    indirect_norm: float
    theta_grad_norm: float
    phi_grad_norm: float

    def validate(self) -> "EpisodeTrace":
        for name, v in self.as_record().items():
            if isinstance(v, float) and not math.isfinite(v):
                raise NumericalError(f"episode {self.episode}: non-finite {name}")
        return self

    def as_record(self) -> dict:
        return {
            "episode": self.episode,
            "alpha": self.alpha,
            "inner_dataset": self.inner_dataset,
            "outer_datasets": list(self.outer_datasets),
            "inner_loss": self.inner_loss,
            "outer_loss": self.outer_loss,
            "outer2_loss": self.outer2_loss,
            "direct_norm": self.direct_norm,
            "indirect_norm": self.indirect_norm,
            "theta_grad_norm": self.theta_grad_norm,
            "phi_grad_norm": self.phi_grad_norm,
        }


@dataclass
class InnerResult:
    """Inner adaptation plus the live tape that links it to the extractor."""

    tape: Tape
    theta: ParamSet        # leaves on the tape
    omega0: ParamSet       # pre-adaptation head leaves
    omega_star: ParamSet   # adapted head, still a function of theta/omega0
    losses: list
    batch: tuple
    alpha: float


def _global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float((t.data ** 2).sum()) for t in grads.tensors()))


def _ensure_finite(what: str, value) -> None:
    arrs = value.tensors() if isinstance(value, ParamSet) else [value]
    for t in arrs:
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite {what}")


def sgd_update(params: ParamSet, grads: ParamSet, velocity: dict,
               lr: float, momentum: float, weight_decay: float) -> ParamSet:
    """Nesterov momentum step with decoupled-from-nothing weight decay.

    The decay is added to the raw gradient before the momentum buffer is
    updated, and the applied direction is grad + momentum * buffer. The
    ``velocity`` dict is mutated in place so it can persist across steps.
    """
    out = []
    for name, p in params.items():
        g = grads[name].data + weight_decay * p.data
        if momentum != 0.0:
            v = momentum * velocity.get(name, np.zeros_like(g)) + g
            velocity[name] = v
            g = g + momentum * v
        out.append((name, Tensor(p.data - lr * g)))
    return ParamSet(params.role, out)


def inner_step(net: NetConfig, theta: ParamSet, omega: ParamSet, batch,
               alpha: float, weights: LossWeights, steps: int = 1) -> InnerResult:
    """Adapt the head by plain SGD on one batch, keeping the graph alive.

    The update is recorded with ``create_graph=True``: the returned head
    tensors depend on the extractor leaves through the inner gradient, so
    a later backward pass picks up the second-order term. The extractor
    itself receives no update here.
    """
    if alpha < 0:
        raise ValueError("inner step size must be >= 0")
    images, labels = batch
    tape = Tape()
    th = theta.bind(tape)
    om = omega.bind(tape)
    cur = om
    losses = []
    for _ in range(steps):
        logits = forward_logits(net, th, cur, Tensor(images))
        loss = seg_loss(logits, labels, weights)
        _ensure_finite("inner loss", loss)
        g = grad(loss, cur, create_graph=True)
        cur = cur.map_with(g, lambda p, gi: p - gi * alpha)
        losses.append(loss.item())
    return InnerResult(tape, th, om, cur, losses, batch, alpha)


def _outer_objective(net: NetConfig, theta: ParamSet, omega: ParamSet,
                     batches, weights: LossWeights) -> Tensor:
    """Full outer objective (segmentation + both regularizers) on a pair."""
    logits, labels, reps = [], [], []
    for images, lab in batches:
        pyr = extract_features(net, theta, Tensor(images))
        logits.append(decode(net, omega, pyr))
        labels.append(lab)
        reps.append(tissue_representations(pyr, lab))
    return outer_loss(logits, labels, reps, weights)


def _seg_objective(net: NetConfig, theta: ParamSet, omega: ParamSet,
                   batches, weights: LossWeights) -> Tensor:
    """Mean segmentation loss over a pair of batches (no regularizers)."""
    total = None
    for images, lab in batches:
        loss = seg_loss(forward_logits(net, theta, omega, Tensor(images)), lab, weights)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batches))


@dataclass
class HyperGrad:
    loss: float
    grad: ParamSet
    direct_norm: float
    indirect_norm: float


def hypergradient(net: NetConfig, inner: InnerResult, outer_batches,
                  weights: LossWeights, mode: str = "exact") -> HyperGrad:
    """Gradient of the outer objective with respect to the extractor.

    ``exact`` differentiates through the retained inner graph in one
    reverse pass, capturing both the direct path (extractor features in
    the outer forward) and the indirect path (through the adapted head).
    ``first-order`` blocks the indirect path, which equals detaching the
    adapted head. The split norms are always reported; the direct term is
    obtained by a second pass stopped at the adapted head tensors.
    """
    if mode not in ("exact", "first-order"):
        raise ValueError(f"unsupported hypergradient mode '{mode}'")
    loss = _outer_objective(net, inner.theta, inner.omega_star, outer_batches, weights)
    _ensure_finite("outer loss", loss)
    barrier = tuple(inner.omega_star.tensors())
    direct = grad(loss, inner.theta, stop_at=barrier)
    if mode == "first-order":
        _ensure_finite("hypergradient", direct)
        return HyperGrad(loss.item(), direct, _global_norm(direct), 0.0)
    total = grad(loss, inner.theta)
    _ensure_finite("hypergradient", total)
    indirect = total.map_with(direct, lambda a, b: Tensor(a.data - b.data))
    return HyperGrad(loss.item(), total, _global_norm(direct), _global_norm(indirect))


def mfl_outer_step(net: NetConfig, inner: InnerResult, outer_batches,
                   alpha: float, weights: LossWeights, config: TrainConfig,
                   velocity: dict) -> tuple[ParamSet, HyperGrad]:
    """Update the extractor with the (hyper)gradient of the outer loss."""
    mode = config.hypergrad_mode
    if mode == "finite-diff-check":
        report = hypergradient_fd_check(
            net, inner.theta.detached(), inner.omega0.detached(), inner.batch,
            outer_batches, inner.alpha, weights, inner_steps=len(inner.losses),
            eps=config.fd_eps, param_limit=config.fd_param_limit)
        if report.max_rel > config.fd_tol:
            raise NumericalError(
                f"hypergradient check failed: max rel err {report.max_rel:.3e} "
                f"> {config.fd_tol:.1e}")
        mode = "exact"
    hg = hypergradient(net, inner, outer_batches, weights, mode)
    theta_new = sgd_update(inner.theta.detached(), hg.grad, velocity,
                           alpha, config.momentum, config.weight_decay)
    return theta_new, hg


def mil_outer_step(net: NetConfig, theta: ParamSet, omega_star: ParamSet,
                   phi: ParamSet, outer_batches, alpha: float,
                   weights: LossWeights, config: TrainConfig,
                   velocity: dict) -> tuple[ParamSet, dict]:
    """First-order update of the head initialization.

    The outer segmentation loss is evaluated at the adapted head on a
    fresh tape; its plain gradient (taken at the adapted point, curvature
    factor dropped) is applied to the pre-adaptation initialization with
    the usual momentum/decay step.
    """
    tape = Tape()
    om = omega_star.detached().bind(tape)
    loss = _seg_objective(net, theta.detached(), om, outer_batches, weights)
    _ensure_finite("outer seg loss", loss)
    g = grad(loss, om)
    _ensure_finite("head gradient", g)
    phi_new = sgd_update(phi, g, velocity, alpha, config.momentum, config.weight_decay)
    return phi_new, {"loss": loss.item(), "grad_norm": _global_norm(g)}


def hypergradient_fd_check(net: NetConfig, theta: ParamSet, omega: ParamSet,
                           inner_batch, outer_batches, alpha: float,
                           weights: LossWeights, inner_steps: int = 1,
                           eps: float = 1e-5, param_limit: int = 2000) -> GradCheckReport:
    """Central-difference oracle for the extractor hypergradient.

    Each probe re-runs the inner adaptation from scratch and re-evaluates
    the outer objective, i.e. it differences the composed map
    extractor -> outer loss(extractor, adapted head(extractor)). Probe
    spacing is ``eps * max(1, |value|)`` per element.
    """
    n = theta.num_params()
    if n > param_limit:
        raise ValueError(f"{n} extractor parameters exceed the check limit {param_limit}")

    def composed(theta_vals: ParamSet) -> float:
        om_vals = {name: t.data.copy() for name, t in omega.items()}
        images, labels = inner_batch
        for _ in range(inner_steps):
            tape = Tape()
            om = ParamSet(omega.role, [(nm, tape.leaf(v)) for nm, v in om_vals.items()])
            loss = seg_loss(forward_logits(net, theta_vals, om, Tensor(images)), labels, weights)
            g = grad(loss, om)
            om_vals = {nm: om_vals[nm] - alpha * g[nm].data for nm in om_vals}
        star = ParamSet(omega.role, [(nm, Tensor(v)) for nm, v in om_vals.items()])
        with no_grad():
            out = _outer_objective(net, theta_vals, star, outer_batches, weights)
        return out.item()

    exact = hypergradient(
        net,
        inner_step(net, theta, omega, inner_batch, alpha, weights, inner_steps),
        outer_batches, weights, "exact")

    report = GradCheckReport()
    all_rel = []
    work = theta.clone()
    for name in theta.names():
        arr = work[name].data
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = composed(work)
            flat[i] = orig - h
            fm = composed(work)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        rel = relative_error(exact.grad[name].data, numeric)
        all_rel.append(rel.reshape(-1))
        report.per_param[name] = (float(rel.max()), float(rel.mean()))
    joined = np.concatenate(all_rel)
    report.max_rel = float(joined.max())
    report.mean_rel = float(joined.mean())
    return report


def quadratic_toy_report(alpha: float = 0.1, theta0: float = 1.0,
                         omega0: float = 0.0, fd_eps: float = 1e-6) -> dict:
    """Scalar bi-level toy with closed forms, run through the real tape.

    Inner loss (w - t)^2, outer loss (w*)^2. One inner step gives
    w* = w(1 - 2a) + 2at, so dw*/dt = 2a and the total outer gradient is
    2 w* * 2a. The finite difference of the composed map is compared
    against the tape's hypergradient; the first-order variant must come
    out exactly zero because the outer loss has no direct t dependence.
    """
    def adapted(tape: Tape, th: Tensor) -> Tensor:
        om = tape.leaf(np.array(float(omega0)))
        inner = (om - th) ** 2.0
        g = grad(inner, [om], create_graph=True)[0]
        return om - g * alpha

    tape = Tape()
    th = tape.leaf(np.array(float(theta0)))
    star = adapted(tape, th)
    domega = grad(star, [th], create_graph=True)[0]
    outer = star ** 2.0
    hyper = grad(outer, [th])[0].item()
    with warnings.catch_warnings():
        # blocking the adapted head legitimately disconnects the outer loss
        warnings.simplefilter("ignore", RuntimeWarning)
        first_order = grad(outer, [th], stop_at=(star,))[0].item()

    def composed(t: float) -> float:
        tp = Tape()
        return (adapted(tp, tp.leaf(np.array(t))) ** 2.0).item()

    fd = (composed(theta0 + fd_eps) - composed(theta0 - fd_eps)) / (2 * fd_eps)
    expected_star = omega0 * (1 - 2 * alpha) + 2 * alpha * theta0
    expected_hyper = 2 * expected_star * 2 * alpha
    return {
        "omega_star": star.item(),
        "expected_omega_star": expected_star,
        "domega_dtheta": domega.item(),
        "expected_domega_dtheta": 2 * alpha,
        "hypergrad": hyper,
        "expected_hypergrad": expected_hyper,
        "hypergrad_fd": fd,
        "rel_err_fd": float(relative_error(np.array(hyper), np.array(fd))),
        "first_order_grad": first_order,
    }


def run_episode(pool, state: MetaState, net: NetConfig,
                config: TrainConfig) -> tuple[MetaState, EpisodeTrace]:
    """One full episode: inner adaptation, extractor update, head update.

    Draw order from the state's generator is fixed: inner dataset index,
    inner batch, the two extractor-phase batches (pool order), then the
    two head-phase batches unless ``shared_outer_batches`` reuses the
    previous pair.
    """
    groups = tuple(pool.train_group_names)
    if len(groups) != 3:
        raise ValueError(f"expected 3 training groups, got {len(groups)}")
    alpha = config.learning_rate(state.t)
    inner_alpha = config.inner_rate(state.t)
    weights = config.loss_weights(net.K)

    rng = state.rng
    inner_group = groups[int(rng.integers(3))]
    others = tuple(g for g in groups if g != inner_group)
    inner_batch = pool.sample_batch(inner_group, "train", config.batch_size, rng)
    mfl_batches = [pool.sample_batch(g, "train", config.batch_size, rng) for g in others]
    if config.shared_outer_batches:
        mil_batches = mfl_batches
    else:
        mil_batches = [pool.sample_batch(g, "train", config.batch_size, rng) for g in others]

    inner = inner_step(net, state.theta, state.phi, inner_batch,
                       inner_alpha, weights, config.inner_steps)
    theta_new, hg = mfl_outer_step(net, inner, mfl_batches, alpha, weights,
                                   config, state.vel_theta)
    phi_new, mil = mil_outer_step(net, theta_new, inner.omega_star, state.phi,
                                  mil_batches, alpha, weights, config, state.vel_phi)

    trace = EpisodeTrace(
        episode=state.t, alpha=alpha, inner_dataset=inner_group,
        outer_datasets=others, inner_loss=inner.losses[-1],
        outer_loss=hg.loss, outer2_loss=mil["loss"],
        direct_norm=hg.direct_norm, indirect_norm=hg.indirect_norm,
        theta_grad_norm=_global_norm(hg.grad), phi_grad_norm=mil["grad_norm"],
    ).validate()
    new_state = MetaState(theta_new, phi_new, state.t + 1, rng,
                          state.vel_theta, state.vel_phi)
    return new_state, trace


def validation_seg_loss(pool, net: NetConfig, theta: ParamSet, phi: ParamSet,
                        config: TrainConfig) -> float:
    """Mean per-subject segmentation loss over every group's val split."""
    weights = config.loss_weights(net.K)
    total, count = 0.0, 0
    with no_grad():
        for group in pool.train_group_names:
            subjects = list(pool.subjects(group, "val"))
            for i in range(0, len(subjects), config.batch_size):
                chunk = subjects[i:i + config.batch_size]
                images = np.stack([s[0] for s in chunk])
                labels = np.stack([s[1] for s in chunk])
                logits = forward_logits(net, theta, phi, Tensor(images))
                total += seg_loss(logits, labels, weights).item() * len(chunk)
                count += len(chunk)
    if count == 0:
        raise ValueError("validation split is empty")
    return total / count


@dataclass
class MetaTrainResult:
    theta: ParamSet
    phi: ParamSet
    traces: list
    val_history: list            # (episode, val loss) pairs
    best_episode: int
    best_val: float
    diverged: bool
    state: MetaState             # final state, resumable


def save_state(path, state: MetaState, extra_meta: dict | None = None) -> None:
    records = []
    for name, t in state.theta.items():
        records.append((f"theta.{name}", "extractor", t.data))
    for name, t in state.phi.items():
        records.append((f"phi.{name}", "head", t.data))
    for kind, vel in (("vel_theta", state.vel_theta), ("vel_phi", state.vel_phi)):
        for name in sorted(vel):
            records.append((f"{kind}.{name}", kind, vel[name]))
    meta = {"t": state.t, "rng": state.rng.bit_generator.state}
    meta.update(extra_meta or {})
    dtns.save_checkpoint(path, records, meta)


def load_state(path) -> MetaState:
    records, meta = dtns.load_checkpoint(path)
    theta, phi = ParamSet("extractor"), ParamSet("head")
    vel_theta, vel_phi = {}, {}
    for name, role, arr in records:
        prefix, _, rest = name.partition(".")
        if prefix == "theta":
            theta.add(rest, Tensor(arr))
        elif prefix == "phi":
            phi.add(rest, Tensor(arr))
        elif prefix == "vel_theta":
            vel_theta[rest] = arr
        elif prefix == "vel_phi":
            vel_phi[rest] = arr
        else:
            raise dtns.FormatError(f"unknown record '{name}' in {path}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    return MetaState(theta, phi, int(meta["t"]), rng, vel_theta, vel_phi)


def meta_train(pool, net: NetConfig, config: TrainConfig, seed: int,
               out_dir=None, log_fn=None, state: MetaState | None = None) -> MetaTrainResult:
    """Run episodes until the configured budget, tracking the best head.

    Validation runs every ``checkpoint_every`` episodes and at the end;
    the returned parameters are the best-validation snapshot. A non-finite
    loss stops training and the last good snapshot is returned. When
    ``out_dir`` is set, ``state.dtns`` (resumable) and ``best.dtns`` are
    kept up to date there.
    """
    if state is None:
        theta, phi = build_network(net, seed)
        rng = np.random.default_rng([seed, 1])
        state = MetaState(theta, phi, 0, rng)
    traces: list = []
    init_val = validation_seg_loss(pool, net, state.theta, state.phi, config)
    val_history = [(state.t, init_val)]
    best = (init_val, state.theta.clone(), state.phi.clone(), state.t)
    diverged = False

    out = Path(out_dir) if out_dir is not None else None

    def checkpoint() -> None:
        nonlocal best
        val = validation_seg_loss(pool, net, state.theta, state.phi, config)
        val_history.append((state.t, val))
        if val < best[0]:
            best = (val, state.theta.clone(), state.phi.clone(), state.t)
        if out is not None:
            save_state(out / "state.dtns", state, {"seed": seed})
            records = ([(f"theta.{n}", "extractor", t.data) for n, t in best[1].items()]
                       + [(f"phi.{n}", "head", t.data) for n, t in best[2].items()])
            dtns.save_checkpoint(out / "best.dtns", records,
                                 {"episode": best[3], "val_loss": best[0], "seed": seed})

    while state.t < config.episodes:
        try:
            state, trace = run_episode(pool, state, net, config)
        except NumericalError:
            diverged = True
            break
        traces.append(trace)
        if log_fn is not None:
            log_fn(trace.as_record())
        if state.t % config.checkpoint_every == 0 or state.t == config.episodes:
            checkpoint()
    if val_history[-1][0] != state.t and not diverged:
        checkpoint()
    return MetaTrainResult(best[1], best[2], traces, val_history,
                           best[3], best[0], diverged, state)


def load_best(path) -> tuple[ParamSet, ParamSet, dict]:
    """Read a best.dtns checkpoint back into (extractor, head, meta)."""
    records, meta = dtns.load_checkpoint(path)
    theta, phi = ParamSet("extractor"), ParamSet("head")
    for name, role, arr in records:
        prefix, _, rest = name.partition(".")
        if prefix == "theta":
            theta.add(rest, Tensor(arr))
        elif prefix == "phi":
            phi.add(rest, Tensor(arr))
        else:
            raise dtns.FormatError(f"unknown record '{name}' in {path}")
    return theta, phi, meta


def fine_tune(net: NetConfig, theta: ParamSet, phi: ParamSet, shots,
              n_upsample_layers: int = 1, steps: int = 50, lr: float = 0.01,
              weights: LossWeights | None = None) -> ParamSet:
    """Adapt part of the head to a few labeled subjects.

    Only the classifier heads plus the last ``n_upsample_layers`` decoder
    blocks move; all other head entries (and the extractor) are never
    touched, so the frozen set stays bit-identical. Plain SGD, constant
    rate.
    """
    images, labels = shots
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError("need at least one labeled shot (N x C x H x W)")
    if steps < 0 or lr <= 0:
        raise ValueError("steps must be >= 0 and lr > 0")
    if weights is None:
        weights = LossWeights.for_scales(net.K)
    part = partition_head(net, phi, n_upsample_layers)
    omega = phi.clone()
    theta = theta.detached()
    for _ in range(steps):
        tape = Tape()
        trainable = ParamSet("head", [(n, tape.leaf(omega[n].data))
                                      for n in omega.names() if n in part.trainable])
        mixed = ParamSet("head", [(n, trainable[n] if n in part.trainable else omega[n])
                                  for n in omega.names()])
        loss = seg_loss(forward_logits(net, theta, mixed, Tensor(images)), labels, weights)
        _ensure_finite("fine-tune loss", loss)
        g = grad(loss, trainable)
        for name in trainable.names():
            omega[name] = Tensor(omega[name].data - lr * g[name].data)
    return omega


def train_supervised(pool, net: NetConfig, config: TrainConfig, seed: int,
                     groups=None, log_fn=None) -> tuple[ParamSet, ParamSet, list]:
    """Plain joint training baseline: no episodes, no bi-level structure.

    Extractor and head are updated together on batches drawn uniformly
    from the given groups (default: all three), with the same optimizer
    settings and step budget as meta-training.
    """
    groups = tuple(groups) if groups is not None else tuple(pool.train_group_names)
    if not groups:
        raise ValueError("need at least one training group")
    theta, omega = build_network(net, seed)
    rng = np.random.default_rng([seed, 2])
    weights = config.loss_weights(net.K)
    vel: dict = {}
    losses = []
    for t in range(config.episodes):
        alpha = config.learning_rate(t)
        group = groups[int(rng.integers(len(groups)))]
        images, labels = pool.sample_batch(group, "train", config.batch_size, rng)
        tape = Tape()
        th, om = theta.bind(tape), omega.bind(tape)
        joint = ParamSet("joint", list(th.items()) + list(om.items()))
        loss = seg_loss(forward_logits(net, th, om, Tensor(images)), labels, weights)
        _ensure_finite("training loss", loss)
        g = grad(loss, joint)
        updated = sgd_update(joint.detached(), g, vel, alpha,
                             config.momentum, config.weight_decay)
        theta = ParamSet("extractor", [(n, updated[n]) for n in theta.names()])
        omega = ParamSet("head", [(n, updated[n]) for n in omega.names()])
        losses.append(loss.item())
        if log_fn is not None:
            log_fn({"episode": t, "alpha": alpha, "dataset": group, "loss": losses[-1]})
    return theta, omega, losses
