"""Synthetic lifespan-like phantom generator.

Each subject is a nested smooth blob on a randomly affine-warped
coordinate grid: an outer CSF ring, a GM band, and a WM core, with
per-group intensity contrasts that mimic how tissue appearance shifts
(and even inverts) across age groups. Geometry is evaluated
analytically per pixel, so images are exactly piecewise constant before
noise; there is no interpolation anywhere.

Default groups: "12m-like" (GM brighter than WM), "24m-like" (mildly
inverted), "elderly-like" (inverted, with CSF dilated into GM), and the
unseen "6m-like" group whose GM/WM means nearly coincide - the
isointense regime that makes adaptation hard.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dtns
from .losses import CSF, GM, WM

BG = 0
MIN_CLASS_FRACTION = 0.01
MAX_RETRIES = 10
MANIFEST_VERSION = 1

# radial fractions of the blob occupied by each shell
CSF_SHELL = 1.0
GM_SHELL = 0.82
WM_SHELL = 0.52
BLOB_RADIUS = 0.72


@dataclass(frozen=True)
class AgeGroupSpec:
    """Appearance recipe of one age-group-like dataset."""

    name: str
    contrast: tuple          # mean intensity (CSF, GM, WM), each in [0, 1]
    atrophy: int = 0         # pixels of CSF dilation into GM
    noise: float = 0.04
    blob_lobes: tuple = (2, 4)
    subjects: int = 20
    isointense: bool = False
    label_noise: float = 0.0  # fraction of boundary pixels flipped

    def __post_init__(self):
        if len(self.contrast) != 3 or any(not 0.0 <= m <= 1.0 for m in self.contrast):
            raise ValueError(f"{self.name}: contrast must be three means in [0, 1]")
        csf, gm, wm = self.contrast
        gaps = [abs(csf - gm), abs(csf - wm)] + ([] if self.isointense else [abs(gm - wm)])
        if any(g < 0.05 for g in gaps):
            raise ValueError(
                f"{self.name}: tissue means must be separated by >= 0.05 "
                "(mark the group isointense to allow a close GM/WM pair)")
        if self.atrophy < 0 or self.noise < 0 or self.subjects < 1:
            raise ValueError(f"{self.name}: atrophy/noise/subjects out of range")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"{self.name}: label_noise must lie in [0, 1)")
        lo, hi = self.blob_lobes
        if lo < 1 or hi < lo:
            raise ValueError(f"{self.name}: invalid blob lobe range")


DEFAULT_TRAIN_SPECS = (
    AgeGroupSpec("12m-like", contrast=(0.15, 0.65, 0.45)),
    AgeGroupSpec("24m-like", contrast=(0.15, 0.50, 0.62)),
    AgeGroupSpec("elderly-like", contrast=(0.20, 0.42, 0.68), atrophy=2),
)
DEFAULT_TEST_SPEC = AgeGroupSpec(
    "6m-like", contrast=(0.20, 0.52, 0.50), isointense=True)


@dataclass
class Subject:
    image: np.ndarray        # (1, H, W) float64 in [0, 1]
    labels: np.ndarray       # (H, W) int64 over {BG, CSF, GM, WM}
    group: str
    subject_id: str
    seed: int


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift a boolean mask without wraparound (borders drop out)."""
    out = np.zeros_like(mask)
    H, W = mask.shape
    ys = slice(max(dy, 0), H + min(dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    yd = slice(max(-dy, 0), H + min(-dy, 0))
    xd = slice(max(-dx, 0), W + min(-dx, 0))
    out[ys, xs] = mask[yd, xd]
    return out


def _dilate_csf(labels: np.ndarray, rounds: int) -> np.ndarray:
    lab = labels.copy()
    for _ in range(rounds):
        csf = lab == CSF
        near = (_shift(csf, 1, 0) | _shift(csf, -1, 0)
                | _shift(csf, 0, 1) | _shift(csf, 0, -1))
        lab[(lab == GM) & near] = CSF
    return lab


def _draw_geometry(rng: np.random.Generator, size: int, spec: AgeGroupSpec) -> np.ndarray:
    # fixed draw order: angle, scales, shear, shift, lobe count, lobe phases/amps
    angle = rng.uniform(0.0, 2.0 * np.pi)
    sx, sy = rng.uniform(0.85, 1.15, size=2)
    shear = rng.uniform(-0.15, 0.15)
    cy, cx = rng.uniform(-0.12, 0.12, size=2)
    lobes = int(rng.integers(spec.blob_lobes[0], spec.blob_lobes[1] + 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    amp = rng.uniform(0.03, 0.12, size=2)

    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    y = (ys - half) / half - cy
    x = (xs - half) / half - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * x - sa * y) / sx
    v = (sa * x + ca * y + shear * x) / sy
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    radius = BLOB_RADIUS * (1.0 + amp[0] * np.cos(lobes * phi + phase[0])
                            + amp[1] * np.cos((lobes + 1) * phi + phase[1]))
    rho = r / radius

    labels = np.full((size, size), BG, dtype=np.int64)
    labels[rho <= CSF_SHELL] = CSF
    labels[rho <= GM_SHELL] = GM
    labels[rho <= WM_SHELL] = WM
    return _dilate_csf(labels, spec.atrophy)


def _flip_boundary_labels(labels: np.ndarray, fraction: float,
                          rng: np.random.Generator) -> np.ndarray:
    lab = labels.copy()
    boundary = np.zeros_like(lab, dtype=bool)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        inside = _shift(np.ones_like(lab, dtype=bool), dy, dx)
        shifted = np.roll(np.roll(lab, dy, axis=0), dx, axis=1)
        boundary |= inside & (shifted != lab)
    ys, xs = np.nonzero(boundary)
    flip = rng.random(len(ys)) < fraction
    for yi, xi in zip(ys[flip], xs[flip]):
        dy, dx = ((1, 0), (-1, 0), (0, 1), (0, -1))[int(rng.integers(4))]
        ny, nx = yi + dy, xi + dx
        if 0 <= ny < lab.shape[0] and 0 <= nx < lab.shape[1]:
            lab[yi, xi] = labels[ny, nx]
    return lab


def generate_subject(spec: AgeGroupSpec, seed: int, size: int = 32,
                     group: str | None = None, subject_id: str = "") -> Subject:
    """Deterministic subject synthesis with a class-prevalence guard."""
    means = np.array([0.0, *spec.contrast])
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        labels = _draw_geometry(rng, size, spec)
        counts = np.bincount(labels.reshape(-1), minlength=4)
        if min(counts[CSF], counts[GM], counts[WM]) < MIN_CLASS_FRACTION * size * size:
            continue
        if spec.label_noise > 0.0:
            labels = _flip_boundary_labels(labels, spec.label_noise, rng)
        image = means[labels]
        if spec.noise > 0.0:
            image = image + spec.noise * rng.normal(size=labels.shape)
        image = np.clip(image, 0.0, 1.0)[None]
        return Subject(image.astype(np.float64), labels,
                       group or spec.name, subject_id, seed)
    raise ValueError(
        f"{spec.name}: could not reach {MIN_CLASS_FRACTION:.0%} pixels per tissue "
        f"in {MAX_RETRIES} attempts (seed {seed})")


@dataclass
class MetaPool:
    """Three training groups plus one unseen group, with fixed 80/20 splits."""

    specs: list              # 3 train specs followed by the test spec
    size: int
    base_seed: int
    members: dict = field(default_factory=dict)   # group -> list[Subject]
    splits: dict = field(default_factory=dict)    # group -> {"train": [...], "val": [...]}

    @property
    def train_group_names(self) -> tuple:
        return tuple(s.name for s in self.specs[:3])

    @property
    def test_group_name(self) -> str:
        return self.specs[3].name

    def spec_for(self, group: str) -> AgeGroupSpec:
        for s in self.specs:
            if s.name == group:
                return s
        raise KeyError(group)

    def subjects(self, group: str, split: str):
        return [(self.members[group][i].image, self.members[group][i].labels)
                for i in self.splits[group][split]]

    def sample_batch(self, group: str, split: str, n: int, rng: np.random.Generator):
        pool = self.splits[group][split]
        idx = rng.integers(0, len(pool), size=n)
        images = np.stack([self.members[group][pool[i]].image for i in idx])
        labels = np.stack([self.members[group][pool[i]].labels for i in idx])
        return images, labels


def subject_seed(base_seed: int, group_index: int, subject_index: int) -> int:
    """Stable per-subject seed; recorded in the manifest for regeneration."""
    seq = np.random.SeedSequence([base_seed, group_index, subject_index])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def build_pool(specs, base_seed: int, size: int = 32) -> MetaPool:
    """Generate every subject and assign deterministic 80/20 splits."""
    specs = list(specs)
    if len(specs) != 4:
        raise ValueError(f"need exactly 3 training specs + 1 test spec, got {len(specs)}")
    names = [s.name for s in specs]
    if len(set(names)) != 4:
        raise ValueError("group names must be unique")
    pool = MetaPool(specs, size, base_seed)
    for gi, spec in enumerate(specs):
        subs = []
        for si in range(spec.subjects):
            sid = f"s{si:03d}"
            subs.append(generate_subject(spec, subject_seed(base_seed, gi, si),
                                         size, spec.name, sid))
        pool.members[spec.name] = subs
        n_train = round(0.8 * spec.subjects)
        pool.splits[spec.name] = {"train": list(range(n_train)),
                                  "val": list(range(n_train, spec.subjects))}
    return pool


def save_pool(pool: MetaPool, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    groups = []
    for gi, spec in enumerate(pool.specs):
        gdir = root / spec.name
        gdir.mkdir(exist_ok=True)
        ids, seeds = [], []
        for sub in pool.members[spec.name]:
            dtns.save_tensor(gdir / f"{sub.subject_id}.img.dtns", sub.image)
            dtns.save_tensor(gdir / f"{sub.subject_id}.lbl.dtns",
                             sub.labels.astype(np.float64))
            ids.append(sub.subject_id)
            seeds.append(sub.seed)
        groups.append({
            "name": spec.name,
            "role": "train" if gi < 3 else "test",
            "spec": asdict(spec),
            "subject_ids": ids,
            "subject_seeds": seeds,
            "split": pool.splits[spec.name],
        })
    manifest = {"version": MANIFEST_VERSION, "size": pool.size,
                "base_seed": pool.base_seed, "groups": groups}
    dtns.atomic_write(root / "manifest.json",
                      (dtns.canonical_json(manifest) + "\n").encode())


def spec_from_dict(d: dict) -> AgeGroupSpec:
    d = dict(d)
    unknown = set(d) - {f for f in AgeGroupSpec.__dataclass_fields__}
    if unknown:
        raise ValueError(f"unknown group spec fields: {sorted(unknown)}")
    if "contrast" in d:
        d["contrast"] = tuple(d["contrast"])
    if "blob_lobes" in d:
        d["blob_lobes"] = tuple(d["blob_lobes"])
    return AgeGroupSpec(**d)


def load_pool(directory) -> MetaPool:
    import json

    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise dtns.FormatError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise dtns.FormatError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise dtns.FormatError(
            f"{path}: manifest version {manifest.get('version')} unsupported")
    specs = [spec_from_dict(g["spec"]) for g in manifest["groups"]]
    pool = MetaPool(specs, int(manifest["size"]), int(manifest["base_seed"]))
    for g in manifest["groups"]:
        name = g["name"]
        subs = []
        for sid, seed in zip(g["subject_ids"], g["subject_seeds"]):
            image = dtns.load_tensor(root / name / f"{sid}.img.dtns")
            labels = dtns.load_tensor(root / name / f"{sid}.lbl.dtns")
            subs.append(Subject(image, labels.astype(np.int64), name, sid, int(seed)))
        pool.members[name] = subs
        pool.splits[name] = {"train": list(g["split"]["train"]),
                             "val": list(g["split"]["val"])}
    return pool


def default_specs() -> list:
    return list(DEFAULT_TRAIN_SPECS) + [DEFAULT_TEST_SPEC]
