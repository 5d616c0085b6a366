"""Synthetic two-modality survival data, the on-disk tensor format, manifests
and cross-validation folds.

Tensor files are ``b"AMHF"`` + version byte ``0x01``, a little-endian u32
rank, one u32 per dimension, then the float32 payload in row-major order.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .numerics import ConfigurationError, Tensor

MAGIC = b"AMHF"
VERSION = 1
MAX_RANK = 3
N_GENOMIC_GROUPS = 6
CENSOR_RATE = 0.3
MANIFEST_NAME = "manifest.csv"
META_NAME = "dataset.meta"
MANIFEST_HEADER = ["sample_id", "patho_path", "geno_path", "t", "c"]


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# --------------------------------------------------------------------------
# tensor files


def encode_tensor(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim > MAX_RANK:
        raise ConfigurationError(f"tensor files hold rank <= {MAX_RANK}, got rank {arr.ndim}")
    header = MAGIC + bytes([VERSION]) + struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    for i, expected in enumerate(MAGIC):
        if i >= len(buf):
            raise FormatError("truncated magic", i)
        if buf[i] != expected:
            raise FormatError("bad magic", i)
    if len(buf) < 5:
        raise FormatError("missing version byte", 4)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    if len(buf) < 9:
        raise FormatError("truncated rank field", len(buf))
    (ndim,) = struct.unpack_from("<I", buf, 5)
    if ndim > MAX_RANK:
        raise FormatError(f"rank {ndim} exceeds {MAX_RANK}", 5)
    dims_end = 9 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, 9)
    count = 1
    for i, dim in enumerate(dims):
        count *= dim
        if count * 4 > len(buf):
            raise FormatError(f"dimension {dim} overflows the payload", 9 + 4 * i)
    expected_len = dims_end + 4 * count
    if len(buf) < expected_len:
        raise FormatError("truncated payload", len(buf))
    if len(buf) > expected_len:
        raise FormatError("trailing bytes after payload", expected_len)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end).reshape(dims).astype(np.float32)


def write_tensor_file(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor_file(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# samples and manifests


@dataclass
class SampleBag:
    sample_id: str
    x_p: np.ndarray | None  # (n_p, d); None marks a missing modality
    x_g: np.ndarray | None  # (6, d)
    t: int
    c: int

    @property
    def d(self) -> int:
        return (self.x_p if self.x_p is not None else self.x_g).shape[1]


@dataclass
class ManifestRow:
    sample_id: str
    patho_path: str
    geno_path: str
    t: int
    c: int


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]
    meta: dict[str, str] = field(default_factory=dict)
    latent: dict[str, float] | None = None  # only set right after generation

    @property
    def ids(self) -> list[str]:
        return [r.sample_id for r in self.rows]

    @property
    def t_bins(self) -> int:
        return int(self.meta["t_bins"])

    @property
    def d(self) -> int:
        return int(self.meta["d"])

    def load(self, row: ManifestRow) -> SampleBag:
        x_p = read_tensor_file(self.root / row.patho_path)
        x_g = read_tensor_file(self.root / row.geno_path)
        return SampleBag(row.sample_id, x_p, x_g, row.t, row.c)

    def load_all(self) -> dict[str, SampleBag]:
        return {row.sample_id: self.load(row) for row in self.rows}


def write_manifest(root, rows: list[ManifestRow], meta: dict) -> Manifest:
    root = Path(root)
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("sample ids must be unique")
    with open(root / MANIFEST_NAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.sample_id, r.patho_path, r.geno_path, r.t, r.c])
    with open(root / META_NAME, "w", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")
    return Manifest(root, rows, {k: str(v) for k, v in meta.items()})


def read_manifest(path) -> Manifest:
    path = Path(path)
    root = path.parent if path.is_file() else path
    with open(root / MANIFEST_NAME, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ConfigurationError(f"unexpected manifest header {header}")
        rows = [ManifestRow(sid, pp, gp, int(t), int(c)) for sid, pp, gp, t, c in reader]
    meta = {}
    meta_path = root / META_NAME
    if meta_path.exists():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("manifest has duplicate sample ids")
    return Manifest(root, rows, meta)


# --------------------------------------------------------------------------
# synthetic generation


@dataclass
class PlantedSignal:
    patho_direction: np.ndarray
    geno_direction: np.ndarray
    geno_groups: list[int]
    thresholds: np.ndarray  # risk thresholds for bins 1..T-1


def planted_signal(seed: int, d: int, t_bins: int) -> PlantedSignal:
    rng = np.random.default_rng([seed, 7])
    u_p = rng.normal(size=d)
    u_g = rng.normal(size=d)
    groups = sorted(rng.choice(N_GENOMIC_GROUPS, size=2, replace=False).tolist())
    # equal-probability risk quantiles so that noise=0 gives balanced bins
    nd = NormalDist()
    thresholds = np.array([nd.inv_cdf(1.0 - k / t_bins) for k in range(1, t_bins)])
    return PlantedSignal(u_p / np.linalg.norm(u_p), u_g / np.linalg.norm(u_g), groups, thresholds)


def hazard_table(risk: float, thresholds: np.ndarray, noise: float) -> np.ndarray:
    """Discrete hazard per bin; increasing in risk, last bin absorbs everyone."""
    z = risk - thresholds
    if noise <= 0:
        h = (z > 0).astype(float)
    else:
        h = 1.0 / (1.0 + np.exp(-z / noise))
    return np.append(h, 1.0)


def event_distribution(hazards: np.ndarray) -> np.ndarray:
    surv_before = np.concatenate([[1.0], np.cumprod(1.0 - hazards)[:-1]])
    return surv_before * hazards


def generate_synthetic(out_dir, n_samples: int = 200, d: int = 16, n_p_range=(64, 256), t_bins: int = 4,
                       noise: float = 0.3, seed: int = 0, signal_scale: float = 1.5,
                       informative_fraction: float = 0.2) -> Manifest:
    """Write a synthetic cohort to ``out_dir`` and return its manifest.

    Each sample gets a latent risk r ~ N(0, 1). A random subset of pathology
    tokens and two fixed genomic groups carry ``signal_scale * r`` along a
    planted direction; everything else is unit Gaussian noise. Setting
    ``informative_fraction=0`` leaves the pathology bags pure noise. Event bins are
    drawn from a hazard increasing in r; with probability 0.3 a sample is
    censored at a bin drawn uniformly below its event bin.
    """
    lo, hi = n_p_range
    if n_samples < 10 or d < 4 or t_bins < 2 or not 1 <= lo <= hi or noise < 0:
        raise ConfigurationError(
            f"invalid generation settings: n_samples={n_samples}, d={d}, n_p_range={n_p_range}, "
            f"t_bins={t_bins}, noise={noise}")
    out = Path(out_dir)
    (out / "patho").mkdir(parents=True, exist_ok=True)
    (out / "geno").mkdir(parents=True, exist_ok=True)
    planted = planted_signal(seed, d, t_bins)
    rng = np.random.default_rng(seed)
    width = len(str(n_samples - 1))
    rows = []
    latent = {}
    for i in range(n_samples):
        sid = f"s{i:0{width}d}"
        r = rng.normal()
        latent[sid] = r
        n_p = int(rng.integers(lo, hi + 1))
        x_p = rng.normal(size=(n_p, d))
        n_inf = max(1, int(round(informative_fraction * n_p))) if informative_fraction > 0 else 0
        inf_idx = rng.choice(n_p, size=n_inf, replace=False)
        x_p[inf_idx] += signal_scale * r * planted.patho_direction
        x_g = rng.normal(size=(N_GENOMIC_GROUPS, d))
        x_g[planted.geno_groups] += signal_scale * r * planted.geno_direction
        probs = event_distribution(hazard_table(r, planted.thresholds, noise))
        t_event = int(rng.choice(t_bins, p=probs / probs.sum())) + 1
        c = int(rng.random() < CENSOR_RATE)
        t = t_event
        if c:
            t = int(rng.integers(1, t_event)) if t_event > 1 else 1
        write_tensor_file(out / "patho" / f"{sid}.amhf", x_p)
        write_tensor_file(out / "geno" / f"{sid}.amhf", x_g)
        rows.append(ManifestRow(sid, f"patho/{sid}.amhf", f"geno/{sid}.amhf", t, c))
    meta = {"d": d, "t_bins": t_bins, "seed": seed, "n_samples": n_samples,
            "n_p_min": lo, "n_p_max": hi, "noise": noise}
    manifest = write_manifest(out, rows, meta)
    manifest.latent = latent
    return manifest


# --------------------------------------------------------------------------
# folds, subsampling, binning


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    valid_ids: list[str]


def make_folds(ids: list[str], k: int = 5, seed: int = 0) -> list[FoldSplit]:
    if k < 2:
        raise ConfigurationError("need at least 2 folds")
    if k > len(ids):
        raise ConfigurationError(f"cannot split {len(ids)} samples into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    parts = np.array_split(perm, k)
    folds = []
    for i, part in enumerate(parts):
        valid = set(part.tolist())
        folds.append(FoldSplit(i, [ids[j] for j in perm if j not in valid], [ids[j] for j in part]))
    return folds


def subsample_patches(x_p: np.ndarray, n_s: int, rng: np.random.Generator | int) -> np.ndarray:
    """Uniform sample of ``n_s`` patches without replacement, original order kept."""
    if n_s < 1:
        raise ConfigurationError("N_s must be positive")
    if x_p.shape[0] <= n_s:
        return x_p
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    idx = np.sort(rng.choice(x_p.shape[0], size=n_s, replace=False))
    return x_p[idx]


def quantile_bins(times, censored, t_bins: int = 4) -> np.ndarray:
    """Discretize continuous times into 1..t_bins using quantiles of event times."""
    times = np.asarray(times, dtype=np.float64)
    events = times[np.asarray(censored) == 0]
    if events.size == 0:
        raise ConfigurationError("quantile binning needs at least one observed event")
    edges = np.quantile(events, np.arange(1, t_bins) / t_bins)
    return np.searchsorted(edges, times, side="right") + 1
