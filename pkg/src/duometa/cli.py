"""Command-line front end tying the pipeline together.

Commands: ``gendata`` (synthesize and persist a phantom pool),
``metatrain`` (episodic bi-level training), ``finetune`` (one-shot head
adaptation on the unseen group), ``eval`` (report files: JSON, text
table, CSV, figure), ``gradcheck`` (finite-difference verification of
the hypergradient path), and ``run-paper-ablations`` (the chained
variant study across a seed list).

Configuration is a flat JSON object with dotted keys; every key has a
default visible via ``--print-defaults`` and unknown keys are rejected.
Precedence: defaults < config file < DUOMETA_SEED < --set/--seed flags.
Exit codes: 0 success, 2 usage or config error, 3 numerical failure,
4 missing or unreadable artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields as dc_fields
from pathlib import Path

import numpy as np

from . import dtns, engine, metrics, phantoms
from .engine import TrainConfig
from .segnet import NetConfig, build_network
from .tensorcore import NumericalError, ParamSet, Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

VARIANTS = ("A", "B", "C", "D", "E")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------- config

def _section_defaults(prefix: str, cls) -> dict:
    return {f"{prefix}.{f.name}": f.default for f in dc_fields(cls)}


def default_config() -> dict:
    cfg = {}
    cfg.update(_section_defaults("net", NetConfig))
    cfg.update(_section_defaults("train", TrainConfig))
    cfg.update({
        "pool.dir": "pool",
        "data.base_seed": 0,
        "data.groups": [asdict(s) for s in phantoms.default_specs()],
        "run.out": "runs",
        "run.seed": 0,
        "run.seeds": [0, 1, 2, 3, 4],
        "ft.shots": 1,
        "ft.layers": 1,
        "ft.steps": 50,
        "ft.lr": 0.01,
        "gradcheck.levels": 2,
        "gradcheck.base_width": 4,
        "gradcheck.image_size": 8,
        "gradcheck.batch": 2,
        "gradcheck.toy_tol": 1e-8,
        "gradcheck.net_tol": 1e-5,
    })
    return cfg


def _coerce(key: str, default, value):
    if default is None or value is None:
        if value is None or isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
    elif isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, (list, tuple)):
        if isinstance(value, (list, tuple)):
            return list(value)
    raise CliError(EXIT_USAGE,
                   f"config key '{key}' expects {type(default).__name__}, "
                   f"got {value!r}")


def _merge(cfg: dict, data: dict) -> None:
    for key, value in data.items():
        if key not in cfg:
            raise CliError(EXIT_USAGE, f"unknown config key '{key}'")
        cfg[key] = _coerce(key, default_config()[key], value)


def load_config(path=None, sets=(), seed=None, pool=None, out=None) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(EXIT_MISSING, f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, f"config {p} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise CliError(EXIT_USAGE, "config must be a flat JSON object")
        _merge(cfg, data)
    env = os.environ.get("DUOMETA_SEED")
    if env:
        try:
            cfg["run.seed"] = int(env)
        except ValueError:
            raise CliError(EXIT_USAGE, f"DUOMETA_SEED must be an integer, got {env!r}")
    overrides = {}
    for item in sets:
        key, eq, raw = item.partition("=")
        if not eq:
            raise CliError(EXIT_USAGE, f"--set expects KEY=VALUE, got '{item}'")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    _merge(cfg, overrides)
    if seed is not None:
        cfg["run.seed"] = int(seed)
    if pool is not None:
        cfg["pool.dir"] = pool
    if out is not None:
        cfg["run.out"] = out
    return cfg


def net_from(cfg: dict) -> NetConfig:
    try:
        return NetConfig(**{f.name: cfg[f"net.{f.name}"] for f in dc_fields(NetConfig)})
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))


def train_from(cfg: dict, **overrides) -> TrainConfig:
    kw = {f.name: cfg[f"train.{f.name}"] for f in dc_fields(TrainConfig)}
    kw.update(overrides)
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))


def group_specs(cfg: dict) -> list:
    try:
        return [phantoms.spec_from_dict(d) for d in cfg["data.groups"]]
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"data.groups: {exc}")


def echo_config(cfg: dict, directory, command: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtns.atomic_write(directory / f"config.{command}.json",
                      (dtns.canonical_json(cfg) + "\n").encode())


def _load_pool(cfg: dict) -> phantoms.MetaPool:
    pool_dir = Path(cfg["pool.dir"])
    if not (pool_dir / "manifest.json").exists():
        raise CliError(EXIT_MISSING,
                       f"no pool at {pool_dir} (run `duometa gendata` first)")
    return phantoms.load_pool(pool_dir)


def _run_dir(cfg: dict) -> Path:
    return Path(cfg["run.out"]) / f"seed{cfg['run.seed']}"


def _jsonl(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


# ----------------------------------------------------------- commands

def cmd_gendata(cfg: dict, force: bool = False) -> int:
    out = Path(cfg["pool.dir"])
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(EXIT_USAGE,
                       f"{out} already exists and is not empty; pass --force to regenerate")
    specs = group_specs(cfg)
    try:
        pool = phantoms.build_pool(specs, cfg["data.base_seed"],
                                   size=cfg["net.image_size"])
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    phantoms.save_pool(pool, out)
    echo_config(cfg, out, "gendata")
    digest = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
    print(f"pool: {out}  (image size {pool.size}, base seed {pool.base_seed})")
    for gi, spec in enumerate(pool.specs):
        role = "train" if gi < 3 else "test "
        split = pool.splits[spec.name]
        print(f"  [{role}] {spec.name}: {spec.subjects} subjects "
              f"({len(split['train'])} train / {len(split['val'])} val), "
              f"contrast {spec.contrast}, atrophy {spec.atrophy}, noise {spec.noise}")
    print(f"manifest sha256: {digest}")
    return EXIT_OK


def cmd_metatrain(cfg: dict, resume: bool = False) -> int:
    pool = _load_pool(cfg)
    net = net_from(cfg)
    tc = train_from(cfg)
    seed = cfg["run.seed"]
    out = _run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "metatrain")
    state = None
    if resume:
        state_path = out / "state.dtns"
        if not state_path.exists():
            raise CliError(EXIT_MISSING, f"nothing to resume: {state_path} is missing")
        state = engine.load_state(state_path)
        print(f"resuming from episode {state.t}")
    with open(out / "log.jsonl", "a" if resume else "w") as log:
        result = engine.meta_train(
            pool, net, tc, seed, out_dir=out,
            log_fn=lambda r: log.write(_jsonl({"kind": "episode", **r})),
            state=state)
        for t, v in result.val_history:
            log.write(_jsonl({"kind": "val", "episode": t, "val_loss": v}))
        log.write(_jsonl({"kind": "summary", "best_episode": result.best_episode,
                          "best_val": result.best_val, "diverged": result.diverged,
                          "episodes_run": result.state.t}))
    print(f"meta-train seed {seed}: {result.state.t} episodes, "
          f"best val {result.best_val:.6f} at episode {result.best_episode}")
    print(f"checkpoints: {out / 'best.dtns'}, {out / 'state.dtns'}")
    if result.diverged:
        raise CliError(EXIT_NUMERIC,
                       "training diverged; last good checkpoint retained")
    return EXIT_OK


def select_shots(pool: phantoms.MetaPool, group: str, shots: int, seed: int):
    """Seeded draw of distinct fine-tuning subjects from a group's train split."""
    candidates = pool.subjects(group, "train")
    if not 1 <= shots <= len(candidates):
        raise CliError(EXIT_USAGE,
                       f"ft.shots must be in [1, {len(candidates)}], got {shots}")
    rng = np.random.default_rng([seed, 3])
    idx = sorted(int(i) for i in rng.choice(len(candidates), size=shots, replace=False))
    images = np.stack([candidates[i][0] for i in idx])
    labels = np.stack([candidates[i][1] for i in idx])
    return (images, labels), idx


def cmd_finetune(cfg: dict) -> int:
    pool = _load_pool(cfg)
    net = net_from(cfg)
    seed = cfg["run.seed"]
    out = _run_dir(cfg)
    best_path = out / "best.dtns"
    if not best_path.exists():
        raise CliError(EXIT_MISSING, f"missing checkpoint: {best_path}")
    theta, phi, _ = engine.load_best(best_path)
    group = pool.test_group_name
    shots, idx = select_shots(pool, group, cfg["ft.shots"], seed)
    try:
        omega_ft = engine.fine_tune(net, theta, phi, shots,
                                    n_upsample_layers=cfg["ft.layers"],
                                    steps=cfg["ft.steps"], lr=cfg["ft.lr"])
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    records = [(f"phi.{n}", "head", t.data) for n, t in omega_ft.items()]
    dtns.save_checkpoint(out / "omega_ft.dtns", records,
                         {"seed": seed, "group": group, "shot_indices": idx,
                          "layers": cfg["ft.layers"], "steps": cfg["ft.steps"],
                          "lr": cfg["ft.lr"]})
    echo_config(cfg, out, "finetune")
    print(f"fine-tuned head on {group} shots {idx} "
          f"({cfg['ft.steps']} steps, last {cfg['ft.layers']} decoder blocks trainable)")
    print(f"wrote {out / 'omega_ft.dtns'}")
    return EXIT_OK


def _load_ft_head(path) -> ParamSet:
    records, _ = dtns.load_checkpoint(path)
    head = ParamSet("head")
    for name, _, arr in records:
        prefix, _, rest = name.partition(".")
        if prefix != "phi":
            raise dtns.FormatError(f"unknown record '{name}' in {path}")
        head.add(rest, Tensor(arr))
    return head


def cmd_eval(cfg: dict, oracle: bool = False, head: str = "auto") -> int:
    pool = _load_pool(cfg)
    out = _run_dir(cfg)
    dataset = pool.subjects(pool.test_group_name, "val")
    if oracle:
        report = metrics.report_from_pairs(
            [(labels, labels) for _, labels in dataset], fingerprint="oracle")
        stem = "report-oracle"
    else:
        net = net_from(cfg)
        best_path = out / "best.dtns"
        if not best_path.exists():
            raise CliError(EXIT_MISSING, f"missing checkpoint: {best_path}")
        theta, phi, _ = engine.load_best(best_path)
        ft_path = out / "omega_ft.dtns"
        if head == "ft" and not ft_path.exists():
            raise CliError(EXIT_MISSING, f"missing fine-tuned head: {ft_path}")
        if head in ("ft", "auto") and ft_path.exists():
            phi = _load_ft_head(ft_path)
            stem = "report"
        else:
            stem = "report-meta"
        report = metrics.evaluate(net, theta, phi, dataset)
    paths = metrics.write_report_files(report, out, stem=stem)
    echo_config(cfg, out, "eval")
    print(f"evaluated {report.n_subjects} subjects from {pool.test_group_name} "
          f"(head: {'oracle' if oracle else head})")
    print(report.table())
    print("wrote: " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _phantom_batch(spec, seeds, size):
    subs = [phantoms.generate_subject(spec, s, size=size) for s in seeds]
    return (np.stack([s.image for s in subs]),
            np.stack([s.labels for s in subs]))


def cmd_gradcheck(cfg: dict) -> int:
    checks = []

    toy = engine.quadratic_toy_report()
    toy_err = max(toy["rel_err_fd"],
                  abs(toy["domega_dtheta"] - toy["expected_domega_dtheta"]),
                  abs(toy["hypergrad"] - toy["expected_hypergrad"]))
    checks.append(("quadratic toy hypergradient", toy_err,
                   cfg["gradcheck.toy_tol"], toy_err < cfg["gradcheck.toy_tol"]))

    net = NetConfig(in_channels=cfg["net.in_channels"],
                    num_classes=cfg["net.num_classes"],
                    K=cfg["gradcheck.levels"],
                    base_width=cfg["gradcheck.base_width"],
                    image_size=cfg["gradcheck.image_size"])
    theta, omega = build_network(net, cfg["run.seed"])
    if theta.num_params() > cfg["train.fd_param_limit"]:
        raise CliError(EXIT_USAGE,
                       f"gradcheck extractor has {theta.num_params()} parameters, "
                       f"over the {cfg['train.fd_param_limit']} limit; shrink "
                       "gradcheck.base_width / gradcheck.levels")
    tc = train_from(cfg)
    weights = tc.loss_weights(net.K)
    specs = group_specs(cfg)
    nb = cfg["gradcheck.batch"]
    inner = _phantom_batch(specs[0], range(nb), net.image_size)
    outer = (_phantom_batch(specs[1], range(nb, 2 * nb), net.image_size),
             _phantom_batch(specs[2], range(2 * nb, 3 * nb), net.image_size))
    import warnings as _warnings

    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always", RuntimeWarning)
        fd = engine.hypergradient_fd_check(net, theta, omega, inner, outer,
                                           tc.lr, weights, inner_steps=tc.inner_steps,
                                           eps=tc.fd_eps,
                                           param_limit=cfg["train.fd_param_limit"])
        checks.append((f"segnet hypergradient vs FD ({theta.num_params()} params)",
                       fd.max_rel, cfg["gradcheck.net_tol"],
                       fd.max_rel < cfg["gradcheck.net_tol"]))

        inner_result = engine.inner_step(net, theta, omega, inner, tc.lr, weights)
        exact = engine.hypergradient(net, inner_result, outer, weights, mode="exact")
        first = engine.hypergradient(net, inner_result, outer, weights,
                                     mode="first-order")
    if any("no valid pairs" in str(w.message) for w in caught):
        print("note: at this image size some tissue pairs have no valid "
              "representations; those similarity terms contribute a constant 0")
    mode_ok = exact.indirect_norm > 0.0 and first.indirect_norm == 0.0
    checks.append(("indirect term only in exact mode "
                   f"(exact {exact.indirect_norm:.3e}, first-order {first.indirect_norm:.3e})",
                   exact.indirect_norm, "> 0", mode_ok))

    all_ok = True
    for label, value, tol, ok in checks:
        verdict = "PASS" if ok else "FAIL"
        bound = tol if isinstance(tol, str) else f"< {tol:g}"
        print(f"[{verdict}] {label}: {value:.3e} (tolerance {bound})")
        all_ok &= ok
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = [{"check": label, "value": value,
                "tolerance": tol if isinstance(tol, str) else float(tol), "ok": ok}
               for label, value, tol, ok in checks]
    dtns.atomic_write(out / "gradcheck.json",
                      (dtns.canonical_json(payload) + "\n").encode())
    echo_config(cfg, out, "gradcheck")
    if not all_ok:
        raise CliError(EXIT_NUMERIC, "gradient checks failed")
    return EXIT_OK


# ---------------------------------------------------------- ablations

def _variant_train_config(cfg: dict, variant: str) -> TrainConfig:
    if variant in ("A", "B"):
        return train_from(cfg, inter_weight=0.0, intra_weight=0.0)
    if variant == "C":
        return train_from(cfg, intra_weight=0.0)
    if variant == "D":
        return train_from(cfg, inter_weight=0.0)
    return train_from(cfg)


def ablation_job(payload: dict) -> dict:
    """Train + fine-tune + evaluate one (variant, seed) cell; worker-safe."""
    cfg = payload["cfg"]
    variant = payload["variant"]
    seed = payload["seed"]
    pool = phantoms.load_pool(cfg["pool.dir"])
    net = net_from(cfg)
    tc = _variant_train_config(cfg, variant)
    out = Path(cfg["run.out"]) / "ablations" / variant / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, f"ablation-{variant}")
    diverged = False
    with open(out / "log.jsonl", "w") as log:
        if variant == "A":
            theta, phi, losses = engine.train_supervised(
                pool, net, tc, seed,
                log_fn=lambda r: log.write(_jsonl({"kind": "step", **r})))
            records = ([(f"theta.{n}", "extractor", t.data) for n, t in theta.items()]
                       + [(f"phi.{n}", "head", t.data) for n, t in phi.items()])
            dtns.save_checkpoint(out / "best.dtns", records,
                                 {"episode": tc.episodes, "val_loss": losses[-1],
                                  "seed": seed})
        else:
            result = engine.meta_train(
                pool, net, tc, seed, out_dir=out,
                log_fn=lambda r: log.write(_jsonl({"kind": "episode", **r})))
            theta, phi = result.theta, result.phi
            diverged = result.diverged
    shots, idx = select_shots(pool, pool.test_group_name, cfg["ft.shots"], seed)
    omega_ft = engine.fine_tune(net, theta, phi, shots,
                                n_upsample_layers=cfg["ft.layers"],
                                steps=cfg["ft.steps"], lr=cfg["ft.lr"])
    dtns.save_checkpoint(out / "omega_ft.dtns",
                         [(f"phi.{n}", "head", t.data) for n, t in omega_ft.items()],
                         {"seed": seed, "shot_indices": idx})
    report = metrics.evaluate(net, theta, omega_ft,
                              pool.subjects(pool.test_group_name, "val"))
    metrics.write_report_files(report, out)
    return {"variant": variant, "seed": seed, "diverged": diverged,
            "foreground_dice": report.mean_foreground_dice(),
            "dice": report.dice_mean, "asd": report.asd_mean}


def _ablation_figure(summary: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [v for v in VARIANTS if v in summary]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    means = [summary[v]["mean"] for v in names]
    stds = [summary[v]["std"] for v in names]
    ax.bar(x, means, yerr=stds, color="#4878a8", capsize=4, zorder=2)
    for i, v in enumerate(names):
        pts = summary[v]["per_seed"]
        ax.scatter(np.full(len(pts), i), pts, s=12, color="#202020", zorder=3)
    ax.set_xticks(x, names)
    ax.set_ylabel("mean foreground Dice")
    ax.set_title("variant study (one-shot fine-tune on the unseen group)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_run_ablations(cfg: dict, jobs: int = 1, force: bool = False,
                      variants=VARIANTS) -> int:
    pool_dir = Path(cfg["pool.dir"])
    if force or not (pool_dir / "manifest.json").exists():
        cmd_gendata(cfg, force=True)
    seeds = [int(s) for s in cfg["run.seeds"]]
    if not seeds:
        raise CliError(EXIT_USAGE, "run.seeds must not be empty")
    payloads = [{"cfg": cfg, "variant": v, "seed": s}
                for v in variants for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(ablation_job, payloads))
    else:
        results = [ablation_job(p) for p in payloads]

    summary = {}
    for v in variants:
        vals = [r["foreground_dice"] for r in results if r["variant"] == v]
        mean, std = metrics.mean_std(vals)
        summary[v] = {"mean": mean, "std": std, "per_seed": vals,
                      "seeds": seeds}
    out = Path(cfg["run.out"]) / "ablations"
    out.mkdir(parents=True, exist_ok=True)
    dtns.atomic_write(out / "summary.json",
                      (dtns.canonical_json({"summary": summary,
                                            "runs": results}) + "\n").encode())
    rows = ["variant,mean_foreground_dice,std," +
            ",".join(f"seed{s}" for s in seeds)]
    for v in variants:
        rows.append(f"{v},{summary[v]['mean']:.6f},{summary[v]['std']:.6f}," +
                    ",".join(f"{x:.6f}" for x in summary[v]["per_seed"]))
    dtns.atomic_write(out / "summary.csv", ("\n".join(rows) + "\n").encode())
    _ablation_figure(summary, out / "summary.png")

    print(f"{'variant':<9}{'mean fg Dice':>14}{'std':>10}   per-seed")
    for v in variants:
        per = "  ".join(f"{x:.4f}" for x in summary[v]["per_seed"])
        print(f"{v:<9}{summary[v]['mean']:>14.4f}{summary[v]['std']:>10.4f}   {per}")
    ok = True
    for lo, hi in (("A", "B"), ("B", "E")):
        if lo in summary and hi in summary:
            gap = summary[hi]["mean"] - summary[lo]["mean"]
            verdict = "OK" if gap > 0 else "VIOLATED"
            print(f"ordering {hi} > {lo}: {verdict} (gap {gap:+.4f})")
            ok &= gap > 0
    print(f"wrote {out / 'summary.json'}, {out / 'summary.csv'}, {out / 'summary.png'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duometa",
        description="Bi-level meta-learning for cross-age tissue segmentation "
                    "on synthetic phantoms.")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the full default config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="flat JSON config file (dotted keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--pool", help="override pool.dir")
        sp.add_argument("--out", help="override run.out")

    sp = sub.add_parser("gendata", help="synthesize and persist the phantom pool")
    common(sp)
    sp.add_argument("--groups", help="JSON file holding a list of group spec objects")
    sp.add_argument("--force", action="store_true",
                    help="overwrite an existing non-empty pool directory")

    sp = sub.add_parser("metatrain", help="episodic bi-level training")
    common(sp)
    sp.add_argument("--hypergrad-mode", choices=engine.HYPERGRAD_MODES,
                    help="override train.hypergrad_mode")
    sp.add_argument("--resume", action="store_true",
                    help="continue from state.dtns in the run directory")

    sp = sub.add_parser("finetune", help="one-shot head adaptation on the unseen group")
    common(sp)
    sp.add_argument("--shots", type=int, help="override ft.shots")
    sp.add_argument("--ft-layers", type=int, help="override ft.layers")
    sp.add_argument("--steps", type=int, help="override ft.steps")
    sp.add_argument("--ft-lr", type=float, help="override ft.lr")

    sp = sub.add_parser("eval", help="evaluate on the unseen group's test split")
    common(sp)
    sp.add_argument("--oracle", action="store_true",
                    help="inject ground-truth labels as predictions (harness check)")
    sp.add_argument("--head", choices=("auto", "meta", "ft"), default="auto",
                    help="which head to evaluate (auto: fine-tuned when present)")

    sp = sub.add_parser("gradcheck", help="finite-difference hypergradient verification")
    common(sp)

    sp = sub.add_parser("run-paper-ablations",
                        help="chain gendata, variant training, fine-tuning, and "
                             "evaluation across the seed list")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated seed list overriding run.seeds")
    sp.add_argument("--jobs", type=int, default=1, help="parallel workers")
    sp.add_argument("--force", action="store_true", help="regenerate the pool")
    sp.add_argument("--variants", default=",".join(VARIANTS),
                    help="comma-separated subset of A,B,C,D,E")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(dtns.canonical_json(default_config()))
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.set, seed=args.seed,
                          pool=args.pool, out=args.out)
        if args.command == "gendata":
            if args.groups:
                gp = Path(args.groups)
                if not gp.exists():
                    raise CliError(EXIT_MISSING, f"groups file not found: {gp}")
                try:
                    groups = json.loads(gp.read_text())
                except json.JSONDecodeError as exc:
                    raise CliError(EXIT_USAGE, f"groups file is not valid JSON: {exc}")
                if not isinstance(groups, list):
                    raise CliError(EXIT_USAGE, "groups file must hold a JSON list")
                cfg["data.groups"] = groups
            return cmd_gendata(cfg, force=args.force)
        if args.command == "metatrain":
            if args.hypergrad_mode:
                cfg["train.hypergrad_mode"] = args.hypergrad_mode
            return cmd_metatrain(cfg, resume=args.resume)
        if args.command == "finetune":
            for flag, key in (("shots", "ft.shots"), ("ft_layers", "ft.layers"),
                              ("steps", "ft.steps"), ("ft_lr", "ft.lr")):
                value = getattr(args, flag)
                if value is not None:
                    cfg[key] = value
            return cmd_finetune(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, oracle=args.oracle, head=args.head)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "run-paper-ablations":
            if args.seeds:
                cfg["run.seeds"] = [int(s) for s in args.seeds.split(",") if s]
            variants = tuple(v for v in args.variants.split(",") if v)
            unknown = set(variants) - set(VARIANTS)
            if unknown:
                raise CliError(EXIT_USAGE, f"unknown variants: {sorted(unknown)}")
            return cmd_run_ablations(cfg, jobs=args.jobs, force=args.force,
                                     variants=variants)
        raise CliError(EXIT_USAGE, f"unknown command {args.command}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except dtns.FormatError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
