"""Patient bag data model: DSB binary I/O, spatial alignment checks,
synthetic cohort generation, and patient-level fold splitting.

A bag holds one patient's dual-resolution token arrays. Each low-resolution
token is spatially aligned to a lam x lam square of high-resolution tokens;
the high-token matrix stores squares contiguously, row-major within each
square.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class AlignmentViolation(ValueError):
    pass


class NonFiniteToken(ValueError):
    pass


class DuplicateCoordinate(ValueError):
    pass


class TooFewPatients(ValueError):
    pass


DSB_MAGIC = b"DSB1"
DSB_VERSION = 1
MANIFEST_HEADER = ["patient_id", "bag_path", "time", "event"]


@dataclass
class PatientBag:
    """Dual-resolution token bag for one patient.

    coords: (m, 3) int32 rows of (wsi_index, grid_x, grid_y).
    low_tokens: (m, d); high_tokens: (lam^2 * m, d), square-major.
    censor is 1 when the patient left observation alive.
    """

    patient_id: str
    lam: int
    coords: np.ndarray
    low_tokens: np.ndarray
    high_tokens: np.ndarray
    time: float = 0.0
    censor: int = 1

    @property
    def m(self):
        return self.low_tokens.shape[0]

    @property
    def d(self):
        return self.low_tokens.shape[1]

    def validate(self):
        if self.lam < 1:
            raise ValueError(f"{self.patient_id}: lam must be >= 1, got {self.lam}")
        if self.low_tokens.ndim != 2 or self.m < 1:
            raise ValueError(f"{self.patient_id}: low_tokens must be a non-empty matrix")
        if self.coords.shape != (self.m, 3):
            raise ValueError(f"{self.patient_id}: coords shape {self.coords.shape} != ({self.m}, 3)")
        if np.any(self.coords < 0):
            raise ValueError(f"{self.patient_id}: coordinates must be non-negative")
        if len({tuple(c) for c in self.coords.tolist()}) != self.m:
            raise DuplicateCoordinate(f"{self.patient_id}: duplicate (wsi, x, y) coordinate")
        expect = self.lam * self.lam * self.m
        if self.high_tokens.shape != (expect, self.d):
            raise AlignmentViolation(
                f"{self.patient_id}: high_tokens has {self.high_tokens.shape[0]} rows, "
                f"expected lam^2*m = {expect}")
        if not np.all(np.isfinite(self.low_tokens)) or not np.all(np.isfinite(self.high_tokens)):
            raise NonFiniteToken(f"{self.patient_id}: non-finite token value")
        if self.time < 0:
            raise ValueError(f"{self.patient_id}: negative follow-up time")
        if self.censor not in (0, 1):
            raise ValueError(f"{self.patient_id}: censor flag must be 0 or 1")
        return self


@dataclass
class Cohort:
    bags: list = field(default_factory=list)
    name: str = "cohort"
    # planted per-patient risk, populated by the synthetic generator only;
    # handy for diagnosing how much signal a cohort actually carries
    planted_risk: dict | None = None

    def validate(self):
        ids = [b.patient_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate patient_id in cohort")
        return self

    def __len__(self):
        return len(self.bags)


@dataclass
class CohortSplit:
    k: int
    assignments: dict
    val_fraction: float = 0.2

    def fold_ids(self, fold):
        return sorted(pid for pid, f in self.assignments.items() if f == fold)


@dataclass
class SynthConfig:
    n_patients: int = 100
    m: int = 16
    lam: int = 2
    d: int = 32
    signal_site: str = "both"
    signal_fraction: float = 0.5
    beta: float = 3.0
    censor_rate: float = 0.2
    seed: int = 0

    def validate(self):
        if min(self.n_patients, self.m, self.lam, self.d) < 1:
            raise ValueError("all sizes must be >= 1")
        if self.signal_site not in ("low", "high", "both"):
            raise ValueError(f"signal_site must be low|high|both, got {self.signal_site!r}")
        if not (0.0 < self.signal_fraction <= 1.0):
            raise ValueError("signal_fraction must be in (0, 1]")
        if not (0.0 <= self.censor_rate < 1.0):
            raise ValueError("censor_rate must be in [0, 1)")
        return self


def save_bag(bag, path):
    """Write a bag in the DSB binary layout (see README for the format)."""
    bag.validate()
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    coords = np.ascontiguousarray(bag.coords, dtype="<i4")
    low = np.ascontiguousarray(bag.low_tokens, dtype="<f4")
    high = np.ascontiguousarray(bag.high_tokens, dtype="<f4")
    blob = b"".join([
        DSB_MAGIC,
        struct.pack("<IIII", DSB_VERSION, bag.m, bag.lam, bag.d),
        coords.tobytes(),
        low.tobytes(),
        high.tobytes(),
    ])
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_bag(path, patient_id=None, time=0.0, censor=1):
    """Read a DSB file; survival metadata comes from the caller (manifest).

    Raises BadMagic, TruncatedFile, AlignmentViolation or NonFiniteToken
    on malformed input.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != DSB_MAGIC:
        raise BadMagic(f"{path}: not a DSB file")
    if len(blob) < 20:
        raise TruncatedFile(f"{path}: header truncated")
    version, m, lam, d = struct.unpack_from("<IIII", blob, 4)
    if version != DSB_VERSION:
        raise ValueError(f"{path}: unsupported DSB version {version}")
    if m < 1 or lam < 1 or d < 1:
        raise TruncatedFile(f"{path}: degenerate header (m={m}, lam={lam}, d={d})")
    off = 20
    coord_bytes = m * 3 * 4
    low_bytes = m * d * 4
    if len(blob) < off + coord_bytes + low_bytes:
        raise TruncatedFile(f"{path}: coordinate/low-token section truncated")
    coords = np.frombuffer(blob, dtype="<i4", count=m * 3, offset=off).reshape(m, 3)
    off += coord_bytes
    low = np.frombuffer(blob, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    off += low_bytes
    rest = len(blob) - off
    if rest % (4 * d) != 0:
        raise TruncatedFile(f"{path}: high-token section is not whole rows")
    rows = rest // (4 * d)
    if rows != lam * lam * m:
        raise AlignmentViolation(
            f"{path}: {rows} high-token rows, expected lam^2*m = {lam * lam * m}")
    high = np.frombuffer(blob, dtype="<f4", count=rows * d, offset=off).reshape(rows, d)
    if patient_id is None:
        patient_id = os.path.splitext(os.path.basename(path))[0]
    bag = PatientBag(
        patient_id=patient_id,
        lam=int(lam),
        coords=coords.astype(np.int32),
        low_tokens=low.astype(np.float32),
        high_tokens=high.astype(np.float32),
        time=float(time),
        censor=int(censor),
    )
    return bag.validate()


def write_manifest(path, rows):
    """rows: iterable of (patient_id, bag_path, time, event)."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for pid, bag_path, time, event in rows:
            writer.writerow([pid, bag_path, repr(float(time)), int(event)])
    os.replace(tmp, path)


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header {header} != {MANIFEST_HEADER}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            pid, bag_path, time, event = rec
            rows.append((pid, bag_path, float(time), int(event)))
    return rows


def save_cohort(cohort, out_dir, bag_subdir="bags"):
    """Materialize a cohort as DSB files plus a manifest CSV; returns manifest path."""
    cohort.validate()
    bag_dir = os.path.join(out_dir, bag_subdir)
    os.makedirs(bag_dir, exist_ok=True)
    rows = []
    for bag in cohort.bags:
        rel = os.path.join(bag_subdir, f"{bag.patient_id}.dsb")
        save_bag(bag, os.path.join(out_dir, rel))
        rows.append((bag.patient_id, rel, bag.time, 1 - bag.censor))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, rows)
    return manifest


def load_cohort(manifest_path, name=None):
    """Load every bag referenced by a manifest; fails fast on any missing file.

    The manifest stores event = 1 - censor; this converts back.
    """
    rows = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    missing = [p for _, p, _, _ in rows
               if not os.path.isfile(p if os.path.isabs(p) else os.path.join(base, p))]
    if missing:
        raise FileNotFoundError(f"manifest references missing bag file(s): {missing[0]}")
    bags = []
    for pid, rel, time, event in rows:
        path = rel if os.path.isabs(rel) else os.path.join(base, rel)
        bags.append(load_bag(path, patient_id=pid, time=time, censor=1 - event))
    if name is None:
        name = os.path.splitext(os.path.basename(manifest_path))[0]
    return Cohort(bags=bags, name=name).validate()


def canonical_order(bag):
    """Sort tokens by (wsi_index, grid_y, grid_x); pure and idempotent.

    The square belonging to each low token moves with it, so alignment
    is preserved. Needed because the low-stream convolution is
    order-sensitive.
    """
    c = bag.coords
    perm = np.lexsort((c[:, 1], c[:, 2], c[:, 0]))
    if np.array_equal(perm, np.arange(bag.m)):
        return bag
    sq = bag.lam * bag.lam
    high = bag.high_tokens.reshape(bag.m, sq, bag.d)[perm].reshape(-1, bag.d)
    return replace(
        bag,
        coords=bag.coords[perm].copy(),
        low_tokens=bag.low_tokens[perm].copy(),
        high_tokens=high.copy(),
    )


def discretize_coordinates(per_wsi_coords):
    """Map per-WSI (grid_x, grid_y) coordinates to a dense (u, v) domain.

    Within a WSI, u and v are dense ranks of the distinct grid_x / grid_y
    values (relative order kept, gaps collapsed). Successive WSIs are laid
    side by side along u with a 2-column gap. Returns one (n_i, 2) int
    array per input WSI, in input order.
    """
    out = []
    offset = 0
    for coords in per_wsi_coords:
        arr = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if len({tuple(c) for c in arr.tolist()}) != arr.shape[0]:
            raise DuplicateCoordinate("duplicate (grid_x, grid_y) within one WSI")
        xs = np.unique(arr[:, 0])
        ys = np.unique(arr[:, 1])
        u = np.searchsorted(xs, arr[:, 0]) + offset
        v = np.searchsorted(ys, arr[:, 1])
        out.append(np.stack([u, v], axis=1))
        offset = int(u.max()) + 2
    return out


def bag_grid_coords(bag):
    """Discretized (u, v) pairs for a bag's tokens, in token order.

    WSIs are processed in ascending wsi_index order for the side-by-side
    layout regardless of token order.
    """
    c = bag.coords
    uv = np.zeros((bag.m, 2), dtype=np.int64)
    wsis = np.unique(c[:, 0])
    groups = [np.nonzero(c[:, 0] == w)[0] for w in wsis]
    ranked = discretize_coordinates([c[idx][:, 1:3] for idx in groups])
    for idx, r in zip(groups, ranked):
        uv[idx] = r
    return uv


def generate_synthetic_cohort(cfg):
    """Cohort with a planted prognostic signal; deterministic given cfg.seed.

    Per patient: risk r ~ U(0,1); tokens are standard normal; a fixed unit
    direction scaled by r is added to the signal-bearing tokens; event time
    is exponential with rate exp(beta * r); an independent exponential
    censor time is calibrated so the censored fraction lands near
    censor_rate.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal(cfg.d)
    direction /= np.linalg.norm(direction)
    lam2 = cfg.lam * cfg.lam
    n_sig = max(1, int(round(cfg.signal_fraction * lam2)))
    side = int(math.ceil(math.sqrt(cfg.m)))

    coords = np.zeros((cfg.m, 3), dtype=np.int32)
    for j in range(cfg.m):
        coords[j] = (0, j % side, j // side)

    bags = []
    risks = np.empty(cfg.n_patients)
    events = np.empty(cfg.n_patients)
    censor_draws = np.empty(cfg.n_patients)
    planted = {}
    for i in range(cfg.n_patients):
        r = rng.uniform()
        low = rng.standard_normal((cfg.m, cfg.d))
        high = rng.standard_normal((lam2 * cfg.m, cfg.d))
        if cfg.signal_site in ("low", "both"):
            low += r * direction
        if cfg.signal_site in ("high", "both"):
            for j in range(cfg.m):
                picks = rng.choice(lam2, size=n_sig, replace=False)
                high[j * lam2 + picks] += r * direction
        risks[i] = r
        events[i] = rng.exponential(np.exp(-cfg.beta * r))
        censor_draws[i] = rng.uniform()
        pid = f"P{i:04d}"
        planted[pid] = r
        bags.append(PatientBag(
            patient_id=pid,
            lam=cfg.lam,
            coords=coords.copy(),
            low_tokens=low.astype(np.float32),
            high_tokens=high.astype(np.float32),
        ))

    if cfg.censor_rate == 0.0:
        times = events
        censored = np.zeros(cfg.n_patients, dtype=int)
    else:
        # bisect the censoring rate so the realized censored fraction
        # matches the target on this sample
        lo, hi = 1e-12, 1e12
        for _ in range(200):
            mu = math.sqrt(lo * hi)
            ct = -np.log(censor_draws) / mu
            frac = float(np.mean(ct < events))
            if frac < cfg.censor_rate:
                lo = mu
            else:
                hi = mu
        ct = -np.log(censor_draws) / mu
        censored = (ct < events).astype(int)
        times = np.minimum(events, ct)

    for i, bag in enumerate(bags):
        bag.time = float(times[i])
        bag.censor = int(censored[i])
        bag.validate()
    return Cohort(bags=bags, name=f"synth-{cfg.seed}", planted_risk=planted).validate()


def random_bag(m, lam, d, seed, patient_id="bag", time=1.0, censor=0):
    """Small random bag on a dense grid; handy for tests and gradient checks."""
    rng = np.random.default_rng(seed)
    side = int(math.ceil(math.sqrt(m)))
    coords = np.zeros((m, 3), dtype=np.int32)
    for j in range(m):
        coords[j] = (0, j % side, j // side)
    return PatientBag(
        patient_id=patient_id,
        lam=lam,
        coords=coords,
        low_tokens=rng.standard_normal((m, d)).astype(np.float32),
        high_tokens=rng.standard_normal((lam * lam * m, d)).astype(np.float32),
        time=float(time),
        censor=int(censor),
    ).validate()


def split_folds(cohort, k, seed):
    """Shuffled patient-level partition into k folds; sizes differ by <= 1."""
    n = len(cohort.bags)
    if k < 2 or n < k:
        raise TooFewPatients(f"need at least k={k} patients, have {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignments = {}
    for fold, chunk in enumerate(np.array_split(perm, k)):
        for idx in chunk:
            assignments[cohort.bags[int(idx)].patient_id] = fold
    return CohortSplit(k=k, assignments=assignments)
