"""Synthetic multi-domain suites, splits, CSV ingestion and the Bayes oracle."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numeric import make_rng

SPLITS = ("train", "val", "test")
# 20% held out for test, the remainder divided 90/10 into train/val
DEFAULT_FRACTIONS = (0.72, 0.08, 0.20)


@dataclass
class DomainDataset:
    domain_id: str
    X: np.ndarray
    y: np.ndarray
    split: Optional[np.ndarray] = None  # per-row tag from SPLITS

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"{self.domain_id}: X {self.X.shape} and y {self.y.shape} disagree")

    def __len__(self):
        return self.X.shape[0]

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if self.split is None:
            raise ValueError(f"domain {self.domain_id!r} has not been split")
        rows = self.split == name
        return self.X[rows], self.y[rows]


@dataclass
class SyntheticSpec:
    family: str = "specific-blobs"  # specific-blobs | rotated-moons
    p: int = 3
    q: int = 1
    C: int = 4
    n: int = 500
    shared_dims: int = 8
    specific_dims: int = 4
    noise_sigma: float = 1.0
    shared_scale: float = 1.0
    specific_scale: float = 2.0
    angles: Optional[List[float]] = None  # degrees, moons only; p + q entries
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def validate(self) -> None:
        if self.family not in ("specific-blobs", "rotated-moons"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.p < 1 or self.q < 0 or self.n < 1 or self.C < 2:
            raise ValueError(f"invalid counts p={self.p}, q={self.q}, n={self.n}, C={self.C}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.family == "specific-blobs" and (self.shared_dims < 0 or self.specific_dims < 0
                                                or self.shared_dims + self.specific_dims == 0):
            raise ValueError("blobs need nonnegative dims with at least one feature")
        if self.family == "rotated-moons":
            if self.C != 2:
                raise ValueError(f"rotated-moons is binary; got C={self.C}")
            angles = self.moon_angles()
            if len(angles) != self.p + self.q:
                raise ValueError(f"need {self.p + self.q} angles, got {len(angles)}")
            if len(set(angles)) != len(angles):
                raise ValueError(f"angles must be distinct: {angles}")

    def moon_angles(self) -> List[float]:
        if self.angles is not None:
            return list(self.angles)
        return [15.0 * i for i in range(self.p + self.q)]

    @property
    def dim(self) -> int:
        if self.family == "rotated-moons":
            return 2
        return self.shared_dims + (self.p + self.q) * self.specific_dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


@dataclass
class DomainSuite:
    sources: List[DomainDataset]
    targets: List[DomainDataset]
    C: int
    spec: Optional[SyntheticSpec] = None
    generator: Optional[dict] = field(default=None, repr=False)  # true parameters, synthetic only

    def __post_init__(self):
        dims = {d.X.shape[1] for d in self.domains}
        if len(dims) > 1:
            raise ValueError(f"domains disagree on feature dimension: {sorted(dims)}")
        for d in self.domains:
            if d.y.size and (d.y.min() < 0 or d.y.max() >= self.C):
                raise ValueError(f"domain {d.domain_id!r} has labels outside [0, {self.C})")

    @property
    def domains(self) -> List[DomainDataset]:
        return list(self.sources) + list(self.targets)

    @property
    def source_ids(self) -> List[str]:
        return [d.domain_id for d in self.sources]

    @property
    def target_ids(self) -> List[str]:
        return [d.domain_id for d in self.targets]

    @property
    def dim(self) -> int:
        return self.domains[0].X.shape[1]

    def get(self, domain_id: str) -> DomainDataset:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"unknown domain {domain_id!r}")

    def fingerprint(self) -> str:
        """SHA-256 over ids, splits and raw bytes of every domain."""
        h = hashlib.sha256()
        h.update(json.dumps({"C": self.C, "sources": self.source_ids, "targets": self.target_ids}).encode())
        for d in self.domains:
            h.update(d.domain_id.encode())
            h.update(np.ascontiguousarray(d.X).tobytes())
            h.update(np.ascontiguousarray(d.y).tobytes())
            if d.split is not None:
                h.update("".join(s[0] for s in d.split).encode())
        return h.hexdigest()


def _domain_ids(p: int, q: int) -> Tuple[List[str], List[str]]:
    return [f"src{i}" for i in range(p)], [f"tgt{i}" for i in range(q)]


def _balanced_labels(rng: np.random.Generator, n: int, C: int) -> np.ndarray:
    y = np.arange(n) % C
    rng.shuffle(y)
    return y


def gen_specific_blobs(spec: SyntheticSpec) -> DomainSuite:
    """Gaussian blobs with one shared block and one private block per domain.

    Class means in the shared block are common to all domains. Domain ``d``
    additionally carries class-dependent means in its own block; every other
    domain sees pure noise there.
    """
    spec.validate()
    if spec.family != "specific-blobs":
        raise ValueError("spec.family must be 'specific-blobs'")
    rng = make_rng(spec.seed)
    n_dom = spec.p + spec.q
    shared_means = rng.normal(0.0, spec.shared_scale, size=(spec.C, spec.shared_dims))
    specific_means = rng.normal(0.0, spec.specific_scale, size=(n_dom, spec.C, spec.specific_dims))
    # full mean vector per (domain, class)
    means = np.zeros((n_dom, spec.C, spec.dim))
    means[:, :, :spec.shared_dims] = shared_means[None]
    for d in range(n_dom):
        lo = spec.shared_dims + d * spec.specific_dims
        means[d, :, lo:lo + spec.specific_dims] = specific_means[d]
    src_ids, tgt_ids = _domain_ids(spec.p, spec.q)
    datasets = []
    for d, did in enumerate(src_ids + tgt_ids):
        y = _balanced_labels(rng, spec.n, spec.C)
        X = means[d, y] + spec.noise_sigma * rng.normal(size=(spec.n, spec.dim))
        ds = DomainDataset(did, X, y)
        datasets.append(split_dataset(ds, spec.fractions, rng))
    return DomainSuite(datasets[:spec.p], datasets[spec.p:], spec.C, spec,
                       generator={"means": means})


def _moon_arcs(t: np.ndarray) -> np.ndarray:
    """Arc points for both classes at parameters t in [0, pi]; shape (2, len(t), 2)."""
    upper = np.stack([np.cos(t), np.sin(t)], axis=-1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=-1)
    return np.stack([upper, lower])


def rotation(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, -s], [s, c]])


def rotate(points: np.ndarray, deg: float) -> np.ndarray:
    return points @ rotation(deg).T


def gen_rotated_moons(spec: SyntheticSpec) -> DomainSuite:
    """Two-moons clouds, one rotation angle per domain (degrees)."""
    if spec.C != 2:
        raise ValueError(f"rotated-moons is binary; got C={spec.C}")
    spec.validate()
    if spec.family != "rotated-moons":
        raise ValueError("spec.family must be 'rotated-moons'")
    angles = spec.moon_angles()
    src_ids, tgt_ids = _domain_ids(spec.p, spec.q)
    datasets = []
    for d, did in enumerate(src_ids + tgt_ids):
        rng = make_rng([spec.seed, d])
        y = _balanced_labels(rng, spec.n, 2)
        t = rng.uniform(0.0, np.pi, size=spec.n)
        arcs = _moon_arcs(t)
        pts = arcs[y, np.arange(spec.n)] + spec.noise_sigma * rng.normal(size=(spec.n, 2))
        X = rotate(pts, angles[d])
        datasets.append(split_dataset(DomainDataset(did, X, y), spec.fractions, rng))
    return DomainSuite(datasets[:spec.p], datasets[spec.p:], 2, spec,
                       generator={"angles": angles})


def generate(spec: SyntheticSpec) -> DomainSuite:
    if spec.family == "specific-blobs":
        return gen_specific_blobs(spec)
    if spec.family == "rotated-moons":
        return gen_rotated_moons(spec)
    raise ValueError(f"unknown family {spec.family!r}")


def split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    n_train = int(round(n * fr[0]))
    n_val = min(int(round(n * fr[1])), n - n_train)
    return [n_train, n_val, n - n_train - n_val]


def split_dataset(ds: DomainDataset, fractions, rng: np.random.Generator) -> DomainDataset:
    """Tag rows train/val/test via a seeded permutation."""
    counts = split_counts(len(ds), fractions)
    perm = rng.permutation(len(ds))
    tags = np.empty(len(ds), dtype="<U5")
    bounds = np.cumsum([0] + counts)
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        tags[perm[lo:hi]] = name
    return DomainDataset(ds.domain_id, ds.X, ds.y, tags)


class DataFormatError(ValueError):
    pass


def load_delimited(path, domain_id: str) -> DomainDataset:
    """Read comma-separated float features with a trailing integer label."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no such file")
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}:{lineno}: need at least one feature and a label")
            if width is not None and len(row) - 1 != width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width} features, found {len(row) - 1}"
                )
            width = len(row) - 1
            try:
                feats = [float(c) for c in row[:-1]]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric feature cell") from None
            try:
                v = float(row[-1])
                if not v.is_integer():
                    raise ValueError
                label = int(v)
            except (ValueError, OverflowError):
                raise DataFormatError(f"{path}:{lineno}: label {row[-1]!r} is not an integer") from None
            if not np.all(np.isfinite(feats)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no rows")
    return DomainDataset(domain_id, np.array(rows), np.array(labels))


def _blob_bayes_predict(suite: DomainSuite, d: int, X: np.ndarray) -> np.ndarray:
    # equal priors, shared isotropic covariance: nearest class mean
    means = suite.generator["means"][d]
    dist = ((X[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return dist.argmin(axis=1)


def _moon_bayes_predict(suite: DomainSuite, d: int, X: np.ndarray, n_grid: int = 2048) -> np.ndarray:
    sigma = suite.spec.noise_sigma
    pts = rotate(X, -suite.generator["angles"][d])  # back to canonical orientation
    t = (np.arange(n_grid) + 0.5) * np.pi / n_grid
    arcs = _moon_arcs(t)  # (2, G, 2)
    sq = ((pts[:, None, None, :] - arcs[None]) ** 2).sum(axis=-1)  # (n, 2, G)
    if sigma == 0:
        return sq.min(axis=2).argmin(axis=1)
    # class likelihood = mean over the arc of the Gaussian kernel (midpoint quadrature)
    logk = -sq / (2.0 * sigma**2)
    m = logk.max(axis=(1, 2), keepdims=True)
    lik = np.exp(logk - m).mean(axis=2)
    return lik.argmax(axis=1)


def bayes_oracle_accuracy(suite: DomainSuite, domain_id: str, split: str = "test") -> float:
    """Accuracy of the exact Bayes classifier built from the generating parameters."""
    if suite.spec is None or suite.generator is None:
        raise ValueError("Bayes oracle needs a synthetic suite with known generating parameters")
    ids = suite.source_ids + suite.target_ids
    d = ids.index(domain_id)
    X, y = suite.get(domain_id).part(split)
    if suite.spec.family == "specific-blobs":
        pred = _blob_bayes_predict(suite, d, X)
    else:
        pred = _moon_bayes_predict(suite, d, X)
    return float(np.mean(pred == y))


# ---------------------------------------------------------------------------
# On-disk layout: one CSV per domain (rows ordered train, val, test) + manifest


MANIFEST = "manifest.json"


def _format_row(x: np.ndarray, label: int) -> str:
    return ",".join(repr(float(v)) for v in x) + f",{int(label)}"


def save_suite(suite: DomainSuite, out_dir) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    domains = []
    source_ids = set(suite.source_ids)
    for d in suite.domains:
        order = np.concatenate([np.flatnonzero(d.split == s) for s in SPLITS])
        fname = f"{d.domain_id}.csv"
        with open(os.path.join(out_dir, fname), "w", newline="") as fh:
            for i in order:
                fh.write(_format_row(d.X[i], d.y[i]) + "\n")
        files[d.domain_id] = fname
        domains.append({
            "id": d.domain_id,
            "role": "source" if d.domain_id in source_ids else "target",
            "file": fname,
            "counts": {s: int(np.sum(d.split == s)) for s in SPLITS},
        })
    manifest = {
        "schema_version": 1,
        "C": suite.C,
        "dim": suite.dim,
        "seed": suite.spec.seed if suite.spec else None,
        "spec": suite.spec.to_dict() if suite.spec else None,
        "domains": domains,
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files


def spec_from_dict(d: dict) -> SyntheticSpec:
    d = dict(d)
    d["fractions"] = tuple(d.get("fractions", DEFAULT_FRACTIONS))
    return SyntheticSpec(**d)


def load_suite(data_dir) -> DomainSuite:
    """Load a saved suite; synthetic suites are regenerated to recover oracle parameters."""
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: missing dataset manifest")
    with open(path) as fh:
        manifest = json.load(fh)
    sources, targets = [], []
    for entry in manifest["domains"]:
        ds = load_delimited(os.path.join(data_dir, entry["file"]), entry["id"])
        counts = entry["counts"]
        tags = np.array(sum(([s] * counts[s] for s in SPLITS), []), dtype="<U5")
        if tags.size != len(ds):
            raise DataFormatError(f"{entry['file']}: manifest counts {counts} do not match {len(ds)} rows")
        ds.split = tags
        (sources if entry["role"] == "source" else targets).append(ds)
    spec = spec_from_dict(manifest["spec"]) if manifest.get("spec") else None
    generator = generate(spec).generator if spec is not None else None
    return DomainSuite(sources, targets, manifest["C"], spec, generator)
