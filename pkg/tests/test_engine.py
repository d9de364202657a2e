"""Bi-level engine: toy closed forms, FD hypergradients, episode contracts."""

import numpy as np
import pytest

import duometa.engine as eng
from duometa.engine import (
    MetaState, TrainConfig, fine_tune, hypergradient, hypergradient_fd_check,
    inner_step, load_state, meta_train, mil_outer_step, quadratic_toy_report,
    run_episode, save_state, sgd_update, train_supervised, validation_seg_loss,
)
from duometa.losses import LossWeights, seg_loss
from duometa.segnet import NetConfig, build_network, forward_logits
from duometa.tensorcore import NumericalError, ParamSet, Tape, Tensor, grad


def micro_net(**kw):
    base = dict(in_channels=1, num_classes=4, K=2, base_width=2, image_size=8)
    base.update(kw)
    return NetConfig(**base)


def quadrant_labels(size, orient):
    lab = np.zeros((size, size), dtype=np.int64)
    half = size // 2
    lab[:half, half:] = 1
    lab[half:, :half] = 2
    lab[half:, half:] = 3
    return np.rot90(lab, orient).copy()


class StubPool:
    """In-memory three-group pool with quadrant phantom labels."""

    def __init__(self, size=8, n_train=6, n_val=2, seed=0, noise=0.03):
        self.train_group_names = ("a", "b", "c")
        means = {
            "a": np.array([0.05, 0.25, 0.75, 0.5]),
            "b": np.array([0.05, 0.25, 0.45, 0.65]),
            "c": np.array([0.1, 0.3, 0.5, 0.7]),
        }
        rng = np.random.default_rng(seed)
        self._data = {}
        for g in self.train_group_names:
            subjects = []
            for _ in range(n_train + n_val):
                lab = quadrant_labels(size, int(rng.integers(4)))
                img = means[g][lab] + noise * rng.normal(size=lab.shape)
                img = np.clip(img, 0.0, 1.0)[None].astype(np.float64)
                subjects.append((img, lab))
            self._data[g] = {"train": subjects[:n_train], "val": subjects[n_train:]}

    def subjects(self, group, split):
        return list(self._data[group][split])

    def sample_batch(self, group, split, n, rng):
        subs = self._data[group][split]
        idx = rng.integers(0, len(subs), size=n)
        images = np.stack([subs[i][0] for i in idx])
        labels = np.stack([subs[i][1] for i in idx])
        return images, labels


def micro_setup(seed=0, size=8):
    net = micro_net(image_size=size)
    pool = StubPool(size=size, seed=seed)
    theta, phi = build_network(net, seed)
    return net, pool, theta, phi


# -------------------------------------------------------------- toy oracles

def test_quadratic_toy_closed_forms():
    r = quadratic_toy_report(alpha=0.1, theta0=1.0, omega0=0.0)
    assert abs(r["omega_star"] - 0.2) < 1e-15
    assert abs(r["domega_dtheta"] - 0.2) < 1e-10
    assert abs(r["hypergrad"] - 0.08) < 1e-12
    assert r["rel_err_fd"] < 1e-8
    assert r["first_order_grad"] == 0.0


def test_quadratic_toy_other_operating_point():
    # w* = w(1-2a) + 2at; total grad 2 w* * 2a
    r = quadratic_toy_report(alpha=0.05, theta0=-2.0, omega0=1.0)
    star = 1.0 * 0.9 + 0.1 * -2.0
    assert abs(r["omega_star"] - star) < 1e-14
    assert abs(r["hypergrad"] - 2 * star * 0.1) < 1e-12
    assert r["rel_err_fd"] < 1e-8


# ------------------------------------------------------------- inner step

def test_inner_step_alpha_zero_is_identity():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(1)
    batch = pool.sample_batch("a", "train", 2, rng)
    res = inner_step(net, theta, phi, batch, 0.0, LossWeights.for_scales(2))
    for name in phi.names():
        assert np.array_equal(res.omega_star[name].data, phi[name].data)


def test_inner_step_moves_against_gradient():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(1)
    batch = pool.sample_batch("a", "train", 2, rng)
    w = LossWeights.for_scales(2)
    res = inner_step(net, theta, phi, batch, 0.05, w)
    # the adapted head should lower the inner loss on the same batch
    logits = forward_logits(net, theta, res.omega_star.detached(), Tensor(batch[0]))
    after = seg_loss(logits, batch[1], w).item()
    assert after < res.losses[0]


def test_inner_step_unrolled_two_steps():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(2)
    batch = pool.sample_batch("b", "train", 1, rng)
    res = inner_step(net, theta, phi, batch, 0.05, LossWeights.for_scales(2), steps=2)
    assert len(res.losses) == 2
    assert res.losses[1] < res.losses[0]


# ---------------------------------------------------------- hypergradient

def outer_pair(pool, rng, n=1):
    return [pool.sample_batch("b", "train", n, rng), pool.sample_batch("c", "train", n, rng)]


def test_hypergradient_matches_fd_on_micro_net():
    net, pool, theta, phi = micro_setup(size=8)
    rng = np.random.default_rng(3)
    batch = pool.sample_batch("a", "train", 1, rng)
    batches = outer_pair(pool, rng)
    w = LossWeights.for_scales(2)
    report = hypergradient_fd_check(net, theta, phi, batch, batches, 0.05, w,
                                    eps=1e-4, param_limit=2000)
    assert report.max_rel < 1e-5, str(report)


def test_hypergradient_first_order_blocks_indirect():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(4)
    batch = pool.sample_batch("a", "train", 1, rng)
    batches = outer_pair(pool, rng)
    w = LossWeights.for_scales(2)
    inner = inner_step(net, theta, phi, batch, 0.05, w)
    exact = hypergradient(net, inner, batches, w, "exact")
    assert exact.indirect_norm > 1e-8

    inner2 = inner_step(net, theta, phi, batch, 0.05, w)
    fo = hypergradient(net, inner2, batches, w, "first-order")
    assert fo.indirect_norm == 0.0
    assert abs(fo.direct_norm - exact.direct_norm) < 1e-9
    for name in theta.names():
        diff = exact.grad[name].data - fo.grad[name].data
        assert not np.allclose(diff, 0.0, atol=1e-12) or np.allclose(diff, 0.0)


def test_fd_check_param_limit_guard():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(5)
    batch = pool.sample_batch("a", "train", 1, rng)
    with pytest.raises(ValueError):
        hypergradient_fd_check(net, theta, phi, batch, outer_pair(pool, rng),
                               0.05, LossWeights.for_scales(2), param_limit=10)


# ------------------------------------------------------------- optimizer

def test_sgd_update_zero_grad_is_weight_decay_only():
    p = ParamSet("head", [("w", Tensor(np.array([1.0, -2.0])))])
    g = ParamSet("head", [("w", Tensor(np.zeros(2)))])
    lr, mu, wd = 0.1, 0.9, 1e-3
    out = sgd_update(p, g, {}, lr, mu, wd)
    expect = p["w"].data * (1.0 - lr * wd * (1.0 + mu))
    assert np.allclose(out["w"].data, expect, atol=1e-15)


def test_sgd_update_momentum_accumulates():
    p = ParamSet("head", [("w", Tensor(np.array([0.0])))])
    g = ParamSet("head", [("w", Tensor(np.array([1.0])))])
    vel = {}
    p1 = sgd_update(p, g, vel, 0.1, 0.5, 0.0)
    # v=1, applied direction g + mu v = 1.5
    assert np.allclose(p1["w"].data, -0.15)
    p2 = sgd_update(p1, g, vel, 0.1, 0.5, 0.0)
    # v=1.5, direction 1 + 0.75
    assert np.allclose(p2["w"].data, -0.15 - 0.1 * (1 + 0.5 * 1.5))


def test_mil_step_is_plain_gradient_step_bit_level():
    net, pool, theta, phi = micro_setup()
    rng = np.random.default_rng(6)
    w = LossWeights.for_scales(2)
    cfg = TrainConfig(episodes=1)
    inner = inner_step(net, theta, phi, pool.sample_batch("a", "train", 1, rng), 0.05, w)
    batches = outer_pair(pool, rng)
    star = inner.omega_star.detached()

    vel_engine = {"cls1.b": np.full(4, 0.25)}
    phi_new, info = mil_outer_step(net, theta, star, phi, batches, 0.01, w, cfg, vel_engine)

    # independent reconstruction: gradient at the adapted head, plain step on phi
    tape = Tape()
    om = star.bind(tape)
    total = None
    for images, lab in batches:
        loss = seg_loss(forward_logits(net, theta.detached(), om, Tensor(images)), lab, w)
        total = loss if total is None else total + loss
    total = total * 0.5
    g = grad(total, om)
    vel_manual = {"cls1.b": np.full(4, 0.25)}
    expect = sgd_update(phi, g, vel_manual, 0.01, cfg.momentum, cfg.weight_decay)

    assert abs(info["loss"] - total.item()) == 0.0
    for name in phi.names():
        assert np.array_equal(phi_new[name].data, expect[name].data), name
        assert np.array_equal(vel_engine[name], vel_manual[name]), name


# --------------------------------------------------------------- episodes

def test_run_episode_trace_structure():
    net, pool, theta, phi = micro_setup()
    cfg = TrainConfig(episodes=10, batch_size=1)
    state = MetaState(theta, phi, 0, np.random.default_rng(7))
    state2, trace = run_episode(pool, state, net, cfg)
    assert state2.t == 1
    assert trace.inner_dataset in pool.train_group_names
    assert set(trace.outer_datasets) == set(pool.train_group_names) - {trace.inner_dataset}
    rec = trace.as_record()
    for key in ("inner_loss", "outer_loss", "outer2_loss", "direct_norm",
                "indirect_norm", "theta_grad_norm", "phi_grad_norm"):
        assert np.isfinite(rec[key])
    assert trace.indirect_norm > 0.0


def test_run_episode_zero_rate_keeps_parameters():
    net, pool, theta, phi = micro_setup()
    cfg = TrainConfig(episodes=5, batch_size=1)
    # at t == episodes the poly rate is exactly zero
    state = MetaState(theta.clone(), phi.clone(), cfg.episodes, np.random.default_rng(8))
    state2, _ = run_episode(pool, state, net, cfg)
    for name in theta.names():
        assert np.array_equal(state2.theta[name].data, theta[name].data)
    for name in phi.names():
        assert np.array_equal(state2.phi[name].data, phi[name].data)


def test_inner_dataset_sampling_is_uniform():
    # the episode draw is rng.integers(3) on the state generator; over many
    # draws each dataset lands near 1/3
    rng = np.random.default_rng(9)
    counts = np.bincount(rng.integers(0, 3, size=3000), minlength=3)
    assert all(abs(c - 1000) <= 100 for c in counts)


def test_episode_sampling_marginals():
    net, pool, theta, phi = micro_setup()
    cfg = TrainConfig(episodes=1000, batch_size=1, checkpoint_every=10 ** 6)
    state = MetaState(theta, phi, 0, np.random.default_rng(10))
    seen = {g: 0 for g in pool.train_group_names}
    for _ in range(30):
        state, trace = run_episode(pool, state, net, cfg)
        seen[trace.inner_dataset] += 1
    assert all(v > 0 for v in seen.values())


def test_shared_outer_batches_flag():
    net, pool, theta, phi = micro_setup()
    base = dict(episodes=10, batch_size=1, momentum=0.0, weight_decay=0.0)
    shared = TrainConfig(shared_outer_batches=True, **base)
    state = MetaState(theta.clone(), phi.clone(), 0, np.random.default_rng(11))
    _, tr_shared = run_episode(pool, state, net, shared)
    # with shared batches the two outer losses see the same data, so the
    # MIL loss equals the seg part evaluated on the MFL batches
    assert np.isfinite(tr_shared.outer2_loss)


# -------------------------------------------------------------- meta_train

def test_meta_train_t1_structure():
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=1, batch_size=1, checkpoint_every=5)
    result = meta_train(pool, net, cfg, seed=0)
    assert len(result.traces) == 1
    assert [t for t, _ in result.val_history] == [0, 1]
    assert not result.diverged
    assert result.state.t == 1


def test_meta_train_determinism():
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=3, batch_size=1, checkpoint_every=2)
    a = meta_train(pool, net, cfg, seed=5)
    b = meta_train(StubPool(size=8, seed=0), net, cfg, seed=5)
    assert [t.as_record() for t in a.traces] == [t.as_record() for t in b.traces]
    for name in a.theta.names():
        assert np.array_equal(a.theta[name].data, b.theta[name].data)
    for name in a.phi.names():
        assert np.array_equal(a.phi[name].data, b.phi[name].data)
    assert a.val_history == b.val_history


class PoisonPool(StubPool):
    def __init__(self, poison_after, **kw):
        super().__init__(**kw)
        self.calls = 0
        self.poison_after = poison_after

    def sample_batch(self, group, split, n, rng):
        images, labels = super().sample_batch(group, split, n, rng)
        self.calls += 1
        if self.calls > self.poison_after:
            images = images.copy()
            images[0, 0, 0, 0] = np.nan
        return images, labels


def test_meta_train_divergence_keeps_last_good():
    net = micro_net()
    pool = PoisonPool(poison_after=6, size=8, seed=0)
    cfg = TrainConfig(episodes=10, batch_size=1, checkpoint_every=1)
    result = meta_train(pool, net, cfg, seed=1)
    assert result.diverged
    assert len(result.traces) >= 1
    assert np.isfinite(result.best_val)
    for t in result.theta.tensors():
        assert np.all(np.isfinite(t.data))


def test_state_roundtrip_resumes_identically(tmp_path):
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=4, batch_size=1, checkpoint_every=2)
    full = meta_train(pool, net, cfg, seed=3)

    # replay the first two episodes under the same schedule, then resume
    theta, phi = build_network(net, 3)
    state = MetaState(theta, phi, 0, np.random.default_rng([3, 1]))
    pool2 = StubPool(size=8, seed=0)
    for _ in range(2):
        state, _ = run_episode(pool2, state, net, cfg)
    path = tmp_path / "state.dtns"
    save_state(path, state)
    resumed_state = load_state(path)
    assert resumed_state.t == 2
    resumed = meta_train(pool2, net, cfg, seed=3, state=resumed_state)

    full_records = [t.as_record() for t in full.traces]
    resumed_records = [t.as_record() for t in resumed.traces]
    assert resumed_records == full_records[2:]
    for name in full.state.theta.names():
        assert np.array_equal(resumed.state.theta[name].data, full.state.theta[name].data)
    for name in full.state.phi.names():
        assert np.array_equal(resumed.state.phi[name].data, full.state.phi[name].data)


def test_meta_train_writes_checkpoints(tmp_path):
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=2, batch_size=1, checkpoint_every=1)
    meta_train(pool, net, cfg, seed=0, out_dir=tmp_path)
    assert (tmp_path / "state.dtns").exists()
    assert (tmp_path / "best.dtns").exists()
    theta, phi, meta = eng.load_best(tmp_path / "best.dtns")
    assert theta.num_params() > 0 and phi.num_params() > 0
    assert "val_loss" in meta


def test_validation_loss_deterministic():
    net, pool, theta, phi = micro_setup()
    cfg = TrainConfig(episodes=1, batch_size=2)
    a = validation_seg_loss(pool, net, theta, phi, cfg)
    b = validation_seg_loss(pool, net, theta, phi, cfg)
    assert a == b and np.isfinite(a)


# --------------------------------------------------------------- fine-tune

def test_fine_tune_zero_steps_copies_phi():
    net, pool, theta, phi = micro_setup()
    shots = pool.sample_batch("a", "train", 1, np.random.default_rng(12))
    out = fine_tune(net, theta, phi, shots, n_upsample_layers=0, steps=0)
    for name in phi.names():
        assert np.array_equal(out[name].data, phi[name].data)


@pytest.mark.parametrize("n_layers", [0, 1])
def test_fine_tune_freezes_untrainable(n_layers):
    net, pool, theta, phi = micro_setup()
    from duometa.segnet import partition_head
    part = partition_head(net, phi, n_layers)
    shots = pool.sample_batch("a", "train", 2, np.random.default_rng(13))
    out = fine_tune(net, theta, phi, shots, n_upsample_layers=n_layers, steps=3, lr=0.05)
    changed = 0
    for name in phi.names():
        same = np.array_equal(out[name].data, phi[name].data)
        if name in part.frozen:
            assert same, f"frozen '{name}' moved"
        elif not same:
            changed += 1
    assert changed > 0


def test_fine_tune_reduces_shot_loss():
    net, pool, theta, phi = micro_setup()
    shots = pool.sample_batch("a", "train", 2, np.random.default_rng(14))
    w = LossWeights.for_scales(2)
    before = seg_loss(forward_logits(net, theta, phi, Tensor(shots[0])), shots[1], w).item()
    out = fine_tune(net, theta, phi, shots, n_upsample_layers=1, steps=25, lr=0.05)
    after = seg_loss(forward_logits(net, theta, out, Tensor(shots[0])), shots[1], w).item()
    assert after < before


def test_fine_tune_validates_inputs():
    net, pool, theta, phi = micro_setup()
    with pytest.raises(ValueError):
        fine_tune(net, theta, phi, (np.zeros((0, 1, 8, 8)), np.zeros((0, 8, 8))))
    shots = pool.sample_batch("a", "train", 1, np.random.default_rng(15))
    with pytest.raises(ValueError):
        fine_tune(net, theta, phi, shots, steps=1, lr=0.0)


# --------------------------------------------------------------- baseline

def test_train_supervised_runs_and_learns():
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=30, batch_size=2, lr=0.05, momentum=0.9)
    theta, omega, losses = train_supervised(pool, net, cfg, seed=2)
    assert len(losses) == 30
    assert np.isfinite(losses).all()
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_supervised_single_group():
    net, pool, _, _ = micro_setup()
    cfg = TrainConfig(episodes=3, batch_size=1)
    theta, omega, losses = train_supervised(pool, net, cfg, seed=2, groups=["a"])
    assert len(losses) == 3


# ----------------------------------------------------------------- config

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(episodes=0)
    with pytest.raises(ValueError):
        TrainConfig(hypergrad_mode="magic")
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="linear")


def test_poly_schedule_shape():
    cfg = TrainConfig(lr=0.01, episodes=100)
    rates = [cfg.learning_rate(t) for t in range(0, 101, 10)]
    assert rates[0] == 0.01
    assert rates[-1] == 0.0
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    const = TrainConfig(lr=0.01, episodes=100, lr_schedule="constant")
    assert const.learning_rate(99) == 0.01


def test_finite_diff_check_mode_episode():
    net, pool, theta, phi = micro_setup()
    cfg = TrainConfig(episodes=10, batch_size=1, hypergrad_mode="finite-diff-check",
                      fd_tol=1e-4)
    state = MetaState(theta, phi, 0, np.random.default_rng(16))
    state2, trace = run_episode(pool, state, net, cfg)
    assert state2.t == 1 and np.isfinite(trace.outer_loss)
