"""Headline guarantees, checked end to end.

One test per criterion, in order; each prints a single [PASS]/[FAIL]
line (visible with ``pytest -s``) and the pytest verdict mirrors it.
The slow ordering studies (criteria 6-8) train real networks and take
tens of minutes on one CPU core; everything else finishes in seconds.

Run: ``pytest tests/test_acceptance.py -v -s``
"""

import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

import duometa.tensorcore as tc
from duometa import engine, metrics, phantoms
from duometa.cli import main as cli_main
from duometa.engine import TrainConfig
from duometa.losses import (
    CSF, GM, WM, LossWeights, TISSUE_CLASSES,
    ce_loss, dice_loss, inter_tissue_loss, intra_tissue_loss,
    tissue_representations,
)
from duometa.segnet import (
    FeaturePyramid, NetConfig, build_network, partition_head,
)
from duometa.tensorcore import (
    Tape, Tensor, add_const, constant, exp, grad, log, matmul, mul,
    power, reduce_sum, reshape, scale,
)

RNG = np.random.default_rng(20240817)


def _verdict(n: int, desc: str, ok: bool, detail: str) -> None:
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] criterion {n}: {desc} ({detail})", flush=True)
    assert ok, f"criterion {n}: {desc} ({detail})"


# ------------------------------------------------------------------ 1

def test_criterion_1_hypergradient_exactness(tmp_path):
    t0 = time.time()
    code = cli_main(["gradcheck", "--out", str(tmp_path)])
    elapsed = time.time() - t0
    payload = json.loads((tmp_path / "gradcheck.json").read_text())
    by_label = {row["check"]: row for row in payload}
    toy = next(v for k, v in by_label.items() if k.startswith("quadratic toy"))
    net = next(v for k, v in by_label.items() if k.startswith("segnet"))
    ok = (code == 0 and toy["ok"] and toy["value"] < 1e-8
          and net["ok"] and net["value"] < 1e-5 and elapsed < 120.0)
    _verdict(1, "hypergradient matches finite differences",
             ok, f"toy {toy['value']:.2e} < 1e-8, "
                 f"net {net['value']:.2e} < 1e-5, {elapsed:.0f}s < 120s")


# ------------------------------------------------------------------ 2

def _hvp_via_tape(build, x, v):
    tape = Tape()
    t = tape.leaf(x)
    g = grad(build(t), [t], create_graph=True)[0]
    return grad(reduce_sum(mul(g, constant(v))), [t])[0].data


def _hvp_via_fd(build, x, v, eps=1e-6):
    def first_grad(arr):
        tape = Tape()
        t = tape.leaf(arr)
        return grad(build(t), [t])[0].data
    return (first_grad(x + eps * v) - first_grad(x - eps * v)) / (2 * eps)


def test_criterion_2_second_order_machinery():
    c83 = constant(RNG.normal(size=(8, 3)))
    builds = [
        lambda t: reduce_sum(power(t, 4.0)),
        lambda t: reduce_sum(exp(scale(mul(t, t), 0.3))),
        lambda t: reduce_sum(log(add_const(mul(t, t), 1.0))),
        lambda t: reduce_sum(power(matmul(reshape(t, (6, 8)), c83), 2.0)),
    ]
    worst = 0.0
    for build in builds:
        x = RNG.uniform(0.4, 1.2, size=48)   # stays under 50 parameters
        v = RNG.normal(size=48)
        a = _hvp_via_tape(build, x, v)
        n = _hvp_via_fd(build, x, v)
        rel = np.abs(a - n) / np.maximum(np.abs(n), 1e-12)
        worst = max(worst, float(rel.max()))

    toy = engine.quadratic_toy_report(alpha=0.1)
    mixed_err = abs(toy["domega_dtheta"] - toy["expected_domega_dtheta"])
    ok = worst < 1e-4 and mixed_err < 1e-10
    _verdict(2, "grad-of-grad HVPs and analytic mixed partial",
             ok, f"HVP rel {worst:.2e} < 1e-4, mixed partial err "
                 f"{mixed_err:.2e} < 1e-10")


# ------------------------------------------------------------------ 3

def _micro_pool(size=8, subjects=4, seed=0):
    specs = [
        phantoms.AgeGroupSpec("a", contrast=(0.15, 0.65, 0.45), subjects=subjects),
        phantoms.AgeGroupSpec("b", contrast=(0.15, 0.50, 0.62), subjects=subjects),
        phantoms.AgeGroupSpec("c", contrast=(0.20, 0.42, 0.68), subjects=subjects),
        phantoms.AgeGroupSpec("t", contrast=(0.20, 0.52, 0.50), subjects=subjects,
                              isointense=True),
    ]
    return phantoms.build_pool(specs, seed, size=size)


def test_criterion_3_first_order_head_update_contract():
    from duometa.losses import seg_loss
    from duometa.segnet import forward_logits

    net = NetConfig(num_classes=4, K=2, base_width=2, image_size=8)
    pool = _micro_pool()
    theta, phi = build_network(net, 0)
    rng = np.random.default_rng(6)
    w = LossWeights.for_scales(net.K)
    cfg = TrainConfig(episodes=1)
    inner = engine.inner_step(net, theta, phi,
                              pool.sample_batch("a", "train", 1, rng), 0.05, w)
    batches = [pool.sample_batch("b", "train", 1, rng),
               pool.sample_batch("c", "train", 1, rng)]
    star = inner.omega_star.detached()

    vel_engine = {"cls1.b": np.full(4, 0.25)}
    phi_new, _ = engine.mil_outer_step(net, theta, star, phi, batches,
                                       0.01, w, cfg, vel_engine)

    # reconstruction: plain gradient at the adapted head, stepped on phi
    tape = Tape()
    om = star.bind(tape)
    total = None
    for images, lab in batches:
        loss = seg_loss(forward_logits(net, theta.detached(), om, Tensor(images)), lab, w)
        total = loss if total is None else total + loss
    g = grad(total * 0.5, om)
    vel_manual = {"cls1.b": np.full(4, 0.25)}
    expect = engine.sgd_update(phi, g, vel_manual, 0.01, cfg.momentum,
                               cfg.weight_decay)
    bit_equal = all(np.array_equal(phi_new[n].data, expect[n].data)
                    for n in phi.names())

    # zero outer gradient: the same optimizer step shrinks by decay only
    zero = engine.ParamSet("head", [(n, Tensor(np.zeros_like(phi[n].data)))
                                    for n in phi.names()])
    decayed = engine.sgd_update(phi, zero, {}, 0.01, cfg.momentum, cfg.weight_decay)

    def decay_only(p):
        g = cfg.weight_decay * p
        return p - 0.01 * (g + cfg.momentum * g)

    decay_ok = all(np.array_equal(decayed[n].data, decay_only(phi[n].data))
                   for n in phi.names())
    _verdict(3, "head meta-update equals a plain gradient step, bit-level",
             bit_equal and decay_ok,
             f"bit-equal {bit_equal}, zero-grad decay-only {decay_ok}")


# ------------------------------------------------------------------ 4

def _orthogonal_feature_stack(K=2, B=2):
    feats = []
    lab = np.zeros((B, 8, 8), dtype=int)
    lab[:, 0:2], lab[:, 2:4], lab[:, 4:6] = CSF, GM, WM
    basis = np.eye(3)
    for k in range(1, K + 1):
        n = 8 // 2 ** (k - 1)
        f = np.zeros((B, 3, n, n))
        lab_k = lab[:, :: 2 ** (k - 1), :: 2 ** (k - 1)]
        for i, c in enumerate(TISSUE_CLASSES):
            f[:, :, lab_k[0] == c] = basis[i][None, :, None]
        feats.append(f)
    return feats, lab


def _reps(feats, lab):
    return tissue_representations(FeaturePyramid([Tensor(f) for f in feats]), lab)


def test_criterion_4_loss_identities():
    labels = RNG.integers(0, 4, size=(2, 6, 6))
    uniform = ce_loss(constant(np.zeros((2, 4, 6, 6))), labels).item()
    ce_err = abs(uniform - np.log(4.0))

    onehot = np.zeros((2, 4, 6, 6))
    b, h, w = np.indices(labels.shape)
    onehot[b, labels, h, w] = 20.0
    near_perfect = dice_loss(constant(onehot), labels).item()

    feats, lab = _orthogonal_feature_stack()
    inter0 = abs(inter_tissue_loss(_reps(feats, lab)).item())

    feats_r = [RNG.normal(size=(2, 3, 8, 8))]
    lab_r = RNG.integers(0, 4, size=(2, 8, 8))
    lab_r[:, 0, 0:3] = [CSF, GM, WM]
    a = _reps(feats_r, lab_r)
    b2 = _reps([f.copy() for f in feats_r], lab_r.copy())
    intra_err = abs(intra_tissue_loss(a, b2).item() + 1.0)

    scaled = _reps([3.7 * f for f in feats_r], lab_r)
    scale_err = max(
        abs(inter_tissue_loss(a).item() - inter_tissue_loss(scaled).item()),
        abs(intra_tissue_loss(a, b2).item() - intra_tissue_loss(scaled, b2).item()))

    ok = (ce_err < 1e-9 and near_perfect < 1e-3 and inter0 < 1e-6
          and intra_err < 1e-6 and scale_err < 1e-6)
    _verdict(4, "loss closed-form identities",
             ok, f"ce {ce_err:.1e}, dice {near_perfect:.1e}, inter0 {inter0:.1e}, "
                 f"intra-1 {intra_err:.1e}, scaling {scale_err:.1e}")


# ------------------------------------------------------------------ 5

def _random_mask(rng, size):
    mask = np.zeros((size, size), dtype=np.int64)
    n = int(rng.integers(1, 4))
    for _ in range(n):
        r0, c0 = rng.integers(0, size - 2, size=2)
        r1 = r0 + int(rng.integers(1, size - r0))
        c1 = c0 + int(rng.integers(1, size - c0))
        mask[r0:r1, c0:c1] = 1
    return mask


def test_criterion_5_surface_distance_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    checked = 0
    for _ in range(110):
        size = int(rng.integers(5, 17))
        p, g = _random_mask(rng, size), _random_mask(rng, size)
        fast = metrics.asd(p, g, 1)
        brute = metrics.brute_force_asd(p, g, 1)
        assert fast == brute
        assert metrics.asd(g, p, 1) == fast
        worst = max(worst, abs(fast - brute))
        checked += 1

    linked = True
    for _ in range(60):
        p, g = _random_mask(rng, 12), _random_mask(rng, 12)
        d = metrics.dice_score(p, g, 1)
        a = metrics.asd(p, g, 1)
        linked &= (d == 1.0) == (a == 0.0)

    _verdict(5, "surface distance matches brute force exactly",
             checked >= 100 and worst == 0.0 and linked,
             f"{checked} masks, max diff {worst}, dice=1 iff asd=0: {linked}")


# ------------------------------------------------------------------ 6

SHIFT_SIZE, SHIFT_K, SHIFT_BW = 16, 3, 8
SHIFT_EPISODES, SHIFT_BATCH = 300, 4
SHIFT_SEEDS = range(5)


def _shift_pool():
    specs = [
        phantoms.AgeGroupSpec("12m-like", contrast=(0.15, 0.65, 0.45)),
        phantoms.AgeGroupSpec("24m-like", contrast=(0.15, 0.50, 0.62)),
        phantoms.AgeGroupSpec("elderly-like", contrast=(0.20, 0.42, 0.68), atrophy=1),
        phantoms.AgeGroupSpec("inverted-12m", contrast=(0.15, 0.45, 0.65)),
    ]
    return phantoms.build_pool(specs, 0, size=SHIFT_SIZE)


def test_criterion_6_contrast_shift_premise():
    pool = _shift_pool()
    net = NetConfig(num_classes=4, K=SHIFT_K, base_width=SHIFT_BW,
                    image_size=SHIFT_SIZE)
    cfg = TrainConfig(episodes=SHIFT_EPISODES, batch_size=SHIFT_BATCH,
                      inter_weight=0.0, intra_weight=0.0)
    drops = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in SHIFT_SEEDS:
            theta, omega, _ = engine.train_supervised(
                pool, net, cfg, seed, groups=("12m-like",))
            in_group = metrics.evaluate(
                net, theta, omega, pool.subjects("12m-like", "val"))
            inverted = metrics.evaluate(
                net, theta, omega, pool.subjects("inverted-12m", "val"))
            drops.append(in_group.mean_foreground_dice()
                         - inverted.mean_foreground_dice())
    mean_drop = float(np.mean(drops))
    _verdict(6, "contrast shift degrades an unadapted model",
             len(drops) >= 5 and mean_drop >= 0.1,
             f"mean foreground-Dice drop {mean_drop:.3f} >= 0.1 over "
             f"{len(drops)} seeds")


# ------------------------------------------------------------------ 7 & 8

ABL_SIZE, ABL_K, ABL_BW = 16, 3, 8
ABL_EPISODES, ABL_BATCH = 250, 4
ABL_SEEDS = range(5)
ABL_FT_STEPS, ABL_FT_LR, ABL_SHOTS = 50, 0.01, 1
ABL_INTER, ABL_INTRA = 0.1, 0.01   # alignment strengths tuned for this pool
SPLIT_FT_STEPS = 75   # the larger trainable set needs a longer budget


def _ablation_pool():
    specs = [
        phantoms.AgeGroupSpec("12m-like", contrast=(0.15, 0.65, 0.45)),
        phantoms.AgeGroupSpec("24m-like", contrast=(0.15, 0.50, 0.62)),
        phantoms.AgeGroupSpec("elderly-like", contrast=(0.20, 0.42, 0.68), atrophy=1),
        phantoms.AgeGroupSpec("6m-like", contrast=(0.20, 0.51, 0.50),
                              isointense=True, noise=0.05, subjects=28),
    ]
    return phantoms.build_pool(specs, 0, size=ABL_SIZE)


def _one_shot_dice(net, pool, theta, phi, seed, layers=1, steps=ABL_FT_STEPS):
    cand = pool.subjects(pool.test_group_name, "train")
    rng = np.random.default_rng([seed, 3])
    idx = sorted(int(i) for i in rng.choice(len(cand), size=ABL_SHOTS,
                                            replace=False))
    shots = (np.stack([cand[i][0] for i in idx]),
             np.stack([cand[i][1] for i in idx]))
    omega_ft = engine.fine_tune(net, theta, phi, shots,
                                n_upsample_layers=layers,
                                steps=steps, lr=ABL_FT_LR)
    report = metrics.evaluate(net, theta, omega_ft,
                              pool.subjects(pool.test_group_name, "val"))
    return report.mean_foreground_dice(), omega_ft


@pytest.fixture(scope="module")
def variant_checkpoints():
    """Per-seed A/B/E checkpoints plus the wall-clock cost of making them."""
    pool = _ablation_pool()
    net = NetConfig(num_classes=4, K=ABL_K, base_width=ABL_BW,
                    image_size=ABL_SIZE)
    t0 = time.time()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in ABL_SEEDS:
            plain = TrainConfig(episodes=ABL_EPISODES, batch_size=ABL_BATCH,
                                inter_weight=0.0, intra_weight=0.0)
            full = TrainConfig(episodes=ABL_EPISODES, batch_size=ABL_BATCH,
                               inter_weight=ABL_INTER, intra_weight=ABL_INTRA)
            theta_a, omega_a, _ = engine.train_supervised(pool, net, plain, seed)
            res_b = engine.meta_train(pool, net, plain, seed)
            res_e = engine.meta_train(pool, net, full, seed)
            out[seed] = {"A": (theta_a, omega_a),
                         "B": (res_b.theta, res_b.phi),
                         "E": (res_e.theta, res_e.phi)}
    return net, pool, out, time.time() - t0


def test_criterion_7_ablation_ordering(variant_checkpoints):
    net, pool, ckpts, train_time = variant_checkpoints
    t0 = time.time()
    scores = {"A": [], "B": [], "E": []}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in ABL_SEEDS:
            for variant in scores:
                theta, phi = ckpts[seed][variant]
                dice, _ = _one_shot_dice(net, pool, theta, phi, seed)
                scores[variant].append(dice)
    means = {v: float(np.mean(scores[v])) for v in scores}
    total = train_time + (time.time() - t0)
    ok = (means["E"] > means["B"] > means["A"]) and total < 3600
    _verdict(7, "ablation ordering E > B > A after one-shot adaptation",
             ok, f"E {means['E']:.4f} > B {means['B']:.4f} > A {means['A']:.4f}, "
                 f"{total:.0f}s < 3600s")


def test_criterion_8_decoder_split_trend(variant_checkpoints):
    net, pool, ckpts, _ = variant_checkpoints
    last, intermediate = [], []
    frozen_ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in ABL_SEEDS:
            theta, phi = ckpts[seed]["E"]
            d1, _ = _one_shot_dice(net, pool, theta, phi, seed, layers=1,
                                   steps=SPLIT_FT_STEPS)
            d2, omega_ft = _one_shot_dice(net, pool, theta, phi, seed, layers=2,
                                          steps=SPLIT_FT_STEPS)
            last.append(d1)
            intermediate.append(d2)
            part = partition_head(net, phi, 2)
            for name in phi.names():
                if name not in part.trainable:
                    frozen_ok &= np.array_equal(omega_ft[name].data,
                                                phi[name].data)
    gap = float(np.mean(intermediate)) - float(np.mean(last))
    ok = gap >= 0.0 and frozen_ok
    _verdict(8, "tuning intermediate decoder layers beats the last layer alone",
             ok, f"mean Dice gap {gap:+.4f} >= 0, frozen set bit-identical: "
                 f"{frozen_ok}")


# ------------------------------------------------------------------ 9

def _tree_hashes(*roots):
    import hashlib
    out = {}
    for root in roots:
        for path in sorted(Path(root).rglob("*")):
            if path.is_file():
                out[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def test_criterion_9_bitwise_determinism(tmp_path):
    pool = tmp_path / "pool"
    run = tmp_path / "run"
    tiny = ["--set", "net.image_size=16", "--set", "net.K=2",
            "--set", "net.base_width=2"]
    groups = ["--set", "data.groups=" + json.dumps([
        {"name": "a", "contrast": [0.15, 0.65, 0.45], "subjects": 6},
        {"name": "b", "contrast": [0.15, 0.5, 0.62], "subjects": 6},
        {"name": "c", "contrast": [0.2, 0.42, 0.68], "subjects": 6},
        {"name": "t", "contrast": [0.2, 0.52, 0.5], "isointense": True,
         "subjects": 6}])]

    def run_all(force):
        extra = ["--force"] if force else []
        assert cli_main(["gendata", "--pool", str(pool)] + tiny + groups + extra) == 0
        assert cli_main(["metatrain", "--pool", str(pool), "--out", str(run),
                         "--seed", "3", "--set", "train.episodes=2"] + tiny) == 0
        assert cli_main(["finetune", "--pool", str(pool), "--out", str(run),
                         "--seed", "3", "--steps", "2"] + tiny) == 0
        assert cli_main(["eval", "--pool", str(pool), "--out", str(run),
                         "--seed", "3"] + tiny) == 0
        assert cli_main(["gradcheck", "--out", str(run), "--seed", "3",
                         "--set", "gradcheck.base_width=2"] + tiny) == 0

    run_all(force=False)
    first = _tree_hashes(pool, run)
    run_all(force=True)
    second = _tree_hashes(pool, run)
    same = first == second
    _verdict(9, "rerunning every command reproduces all artifacts bit-identically",
             same and len(first) > 10,
             f"{len(first)} files compared, identical: {same}")
