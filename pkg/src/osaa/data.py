"""Windowed-signal datasets, the on-disk format, intermediate-domain
construction, batching and the synthetic distant-domain generator.

Dataset directory layout::

    meta.json    {"n", "m", "c", "dtype": "f32le", "labeled", "name"}
    signals.bin  n * m float32 little-endian, row-major
    labels.bin   n uint8 class ids (only when labeled)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

DOMAINS = ("source", "intermediate", "target")


class DatasetError(ValueError):
    """A dataset directory is missing, malformed or inconsistent."""


@dataclass
class DomainDataset:
    signals: np.ndarray
    labels: Optional[np.ndarray]
    n_classes: int
    domain: str = "source"
    name: str = ""
    # ground-truth distant flags; only the synthetic generator fills this
    distant: Optional[np.ndarray] = field(default=None, repr=False)
    # (source rows, target rows) an intermediate domain was drawn from
    origin: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)
    # band-energy separability of the distant rows, measured at generation time
    detect_accuracy: Optional[float] = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float32)
        if self.signals.ndim != 2:
            raise DatasetError(f"signals must be a [N, m] matrix, got shape {self.signals.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.signals),):
                raise DatasetError(f"{len(self.signals)} signals but labels of shape {self.labels.shape}")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DatasetError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.signals.shape[0]

    @property
    def m(self) -> int:
        return self.signals.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, rows: np.ndarray) -> "DomainDataset":
        return replace(self, signals=self.signals[rows],
                       labels=None if self.labels is None else self.labels[rows],
                       distant=None if self.distant is None else self.distant[rows])

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)

    def content_hash(self) -> str:
        h = hashlib.sha256(self.signals.astype("<f4").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype(np.uint8).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- disk format

def save_dataset(ds: DomainDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if ds.n_classes > 256:
        raise DatasetError("labels.bin stores uint8 ids; at most 256 classes")
    meta = {"n": ds.n, "m": ds.m, "c": ds.n_classes, "dtype": "f32le", "labeled": ds.labeled, "name": ds.name}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (path / "signals.bin").write_bytes(ds.signals.astype("<f4").tobytes())
    if ds.labeled:
        (path / "labels.bin").write_bytes(ds.labels.astype(np.uint8).tobytes())
    elif (path / "labels.bin").exists():
        (path / "labels.bin").unlink()


def load_dataset(path: str | Path, domain: str = "source") -> DomainDataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise DatasetError(f"missing meta.json in dataset directory {path}")
    try:
        meta = json.loads(meta_file.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"meta.json in {path} is not valid JSON: {exc}") from None
    required = {"n", "m", "c", "dtype", "labeled"}
    missing = sorted(required - set(meta))
    if missing:
        raise DatasetError(f"meta.json in {path} lacks keys {missing}")
    if meta["dtype"] != "f32le":
        raise DatasetError(f"unsupported dtype {meta['dtype']!r} in {path}; expected 'f32le'")
    n, m, c = int(meta["n"]), int(meta["m"]), int(meta["c"])
    sig_file = path / "signals.bin"
    if not sig_file.is_file():
        raise DatasetError(f"missing signals.bin in {path}")
    raw = sig_file.read_bytes()
    if len(raw) != 4 * n * m:
        raise DatasetError(f"signals.bin in {path} holds {len(raw)} bytes; header n={n}, m={m} "
                           f"requires {4 * n * m}")
    signals = np.frombuffer(raw, dtype="<f4").reshape(n, m).astype(np.float32)
    labels = None
    if meta["labeled"]:
        lab_file = path / "labels.bin"
        if not lab_file.is_file():
            raise DatasetError(f"meta.json marks {path} as labeled but labels.bin is missing")
        lab = np.frombuffer(lab_file.read_bytes(), dtype=np.uint8)
        if lab.size != n:
            raise DatasetError(f"labels.bin in {path} has {lab.size} entries; header n={n}")
        if lab.size and lab.max() >= c:
            raise DatasetError(f"labels.bin in {path} contains class id {lab.max()} >= c={c}")
        labels = lab.astype(np.int64)
    return DomainDataset(signals, labels, c, domain=domain, name=str(meta.get("name", "")))


# ---------------------------------------------------------------- preparation

def split_dataset(ds: DomainDataset, test_fraction: float = 0.2, seed: int = 0
                  ) -> tuple[DomainDataset, DomainDataset]:
    """Random disjoint train/test partition covering every row."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    n_test = int(round(test_fraction * ds.n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def zscore_stats(ds: DomainDataset) -> tuple[np.float32, np.float32]:
    """Scalar mean and standard deviation, rounded to 32 bits so checkpoints store them exactly."""
    mu = np.float32(ds.signals.mean(dtype=np.float64))
    sd = np.float32(ds.signals.std(dtype=np.float64))
    return mu, (sd if sd > 0 else np.float32(1.0))


def apply_zscore(ds: DomainDataset, mu, sd) -> DomainDataset:
    mu, sd = np.float32(mu), np.float32(sd)
    return replace(ds, signals=((ds.signals - mu) / sd).astype(np.float32))


def zscore(train: DomainDataset, *others: DomainDataset) -> list[DomainDataset]:
    """Standardise every dataset with the train split's statistics."""
    mu, sd = zscore_stats(train)
    return [apply_zscore(d, mu, sd) for d in (train, *others)]


def build_intermediate(source: DomainDataset, target: DomainDataset, rng: np.random.Generator
                       ) -> DomainDataset:
    """Unlabeled union of floor(N_S/2) source rows and floor(N_T/2) target rows.

    Rows are drawn uniformly without replacement. ``origin`` on the result
    holds the chosen ``(source_rows, target_rows)`` so tests can audit membership.
    """
    if source.n == 0 or target.n == 0:
        raise DatasetError("build_intermediate needs non-empty source and target datasets")
    if source.m != target.m:
        raise DatasetError(f"source length m={source.m} differs from target length m={target.m}")
    s_rows = np.sort(rng.choice(source.n, size=source.n // 2, replace=False))
    t_rows = np.sort(rng.choice(target.n, size=target.n // 2, replace=False))
    signals = np.concatenate([source.signals[s_rows], target.signals[t_rows]], axis=0)
    distant = None
    if source.distant is not None:
        distant = np.concatenate([source.distant[s_rows], np.zeros(len(t_rows), dtype=bool)])
    return DomainDataset(signals, None, source.n_classes, domain="intermediate",
                         name=f"{source.name}+{target.name}", distant=distant, origin=(s_rows, t_rows))


def batch_iter(sizes: dict[str, int], batch_size: int, rng: np.random.Generator) -> Iterator[dict[str, np.ndarray]]:
    """Row indices for one epoch of aligned per-domain batches.

    Every domain is reshuffled at the start of the epoch. The epoch runs
    ``max_d floor(N_d / batch)`` steps; a domain that runs out is reshuffled and
    restarted, and ragged tails are dropped.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    for name, n in sizes.items():
        if n < batch_size:
            raise DatasetError(f"domain {name} has {n} samples, fewer than one batch of {batch_size}")
    perms = {d: rng.permutation(n) for d, n in sizes.items()}
    cursor = dict.fromkeys(sizes, 0)
    steps = max(n // batch_size for n in sizes.values())
    for _ in range(steps):
        batch = {}
        for d, n in sizes.items():
            if cursor[d] + batch_size > n:
                perms[d] = rng.permutation(n)
                cursor[d] = 0
            batch[d] = perms[d][cursor[d]:cursor[d] + batch_size]
            cursor[d] += batch_size
        yield batch


# ---------------------------------------------------------------- synthetic benchmark

@dataclass
class SynthSpec:
    """Parameters of the synthetic distant-domain benchmark.

    Frequencies are in cycles per sample. Class ``c`` bursts oscillate at
    ``base_freq * (c + 1)``; the target multiplies frequencies by
    ``freq_shift`` and amplitudes by ``amp_shift`` and adds an interference
    tone at ``interference_freq``. Distant source samples are narrow-band tones
    in ``[distant_band_lo, distant_band_hi]`` under heavy-tailed noise, overlaid
    with the target signature (bursts and interference) of class
    ``(c + 1) mod C`` scaled by ``distant_mislabel_gain``, and keep their own
    label ``c``. They are what a source-only model learns to misread the
    target with.
    """

    n_classes: int = 3
    length: int = 512
    n_per_domain: int = 600
    distant_fraction: float = 0.3
    base_freq: float = 0.03
    freq_shift: float = 1.15
    amp_shift: float = 0.7
    noise_std: float = 0.4
    bursts: int = 3
    distant_band_lo: float = 0.3
    distant_band_hi: float = 0.45
    distant_noise_df: float = 1.5
    distant_mislabel_gain: float = 1.0
    interference_freq: float = 0.2
    interference_amp: float = 1.0
    name: str = "synthetic"

    def validate(self) -> list[str]:
        errors = []
        if self.n_classes < 2:
            errors.append(f"n_classes: must be >= 2, got {self.n_classes}")
        if self.n_per_domain < self.n_classes:
            errors.append(f"n_per_domain: must be >= n_classes, got {self.n_per_domain}")
        if not 0.0 <= self.distant_fraction <= 1.0:
            errors.append(f"distant_fraction: must lie in [0, 1], got {self.distant_fraction}")
        if self.base_freq <= 0:
            errors.append(f"base_freq: must be > 0, got {self.base_freq}")
        elif self.length * self.base_freq < 2:
            errors.append(f"length: {self.length} samples hold fewer than two cycles of the lowest "
                          f"frequency {self.base_freq}")
        top = self.base_freq * self.n_classes * max(self.freq_shift, 1.0)
        if top >= 0.5:
            errors.append(f"freq_shift/base_freq: highest class frequency {top:.3f} reaches Nyquist")
        if not 0 < self.distant_band_lo < self.distant_band_hi < 0.5:
            errors.append("distant_band_lo/hi: need 0 < lo < hi < 0.5")
        elif self.distant_band_lo <= top:
            errors.append(f"distant_band_lo: {self.distant_band_lo} overlaps the class band (top {top:.3f})")
        if self.interference_amp < 0:
            errors.append(f"interference_amp: must be >= 0, got {self.interference_amp}")
        if not top < self.interference_freq < min(self.distant_band_lo, 0.5):
            errors.append(f"interference_freq: {self.interference_freq} must lie above the class band "
                          f"(top {top:.3f}) and below the distant band")
        if self.freq_shift <= 0 or self.amp_shift <= 0:
            errors.append("freq_shift/amp_shift: must be > 0")
        if self.noise_std < 0:
            errors.append(f"noise_std: must be >= 0, got {self.noise_std}")
        if self.distant_noise_df <= 0:
            errors.append(f"distant_noise_df: must be > 0, got {self.distant_noise_df}")
        return errors

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {unknown}")
        return cls(**d)


def _class_counts(n: int, c: int) -> list[int]:
    return [n // c + (1 if k < n % c else 0) for k in range(c)]


def _bursts(rng, n: int, m: int, freq: float, amp: float, bursts: int) -> np.ndarray:
    t = np.arange(m)
    out = np.zeros((n, m))
    width = m / (2.0 * bursts)
    for _ in range(bursts):
        centre = rng.uniform(0, m, size=(n, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
        f = freq * rng.uniform(0.95, 1.05, size=(n, 1))
        a = amp * rng.uniform(0.8, 1.2, size=(n, 1))
        env = np.exp(-0.5 * ((t - centre) / width) ** 2)
        out += a * env * np.sin(2 * np.pi * f * t + phase)
    return out


def band_energy_fraction(signals: np.ndarray, lo: float, hi: float) -> np.ndarray:
    spec = np.abs(np.fft.rfft(signals, axis=1)) ** 2
    freqs = np.fft.rfftfreq(signals.shape[1])
    band = (freqs >= lo) & (freqs <= hi)
    return spec[:, band].sum(axis=1) / np.maximum(spec.sum(axis=1), 1e-300)


def distant_detection_accuracy(signals: np.ndarray, distant: np.ndarray, lo: float, hi: float) -> float:
    """Best single-threshold accuracy of the band-energy fraction at flagging distant rows."""
    stat = band_energy_fraction(signals, lo, hi)
    order = np.sort(stat)
    cuts = np.concatenate([[order[0] - 1], (order[:-1] + order[1:]) / 2, [order[-1] + 1]])
    return float(max(np.mean((stat > t) == distant) for t in cuts))


def gen_synthetic(spec: SynthSpec, rng: np.random.Generator) -> tuple[DomainDataset, DomainDataset]:
    """Labeled source and target domains with injected distant source samples."""
    errors = spec.validate()
    if errors:
        raise ValueError("invalid synthetic spec: " + "; ".join(errors))
    C, m, N = spec.n_classes, spec.length, spec.n_per_domain

    t = np.arange(m)

    def interference(n: int) -> np.ndarray:
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
        return spec.interference_amp * np.sin(2 * np.pi * spec.interference_freq * t + phase)

    def domain(freq_mult: float, amp_mult: float, n_distant_per_class: list[int], shifted: bool):
        sig, lab, dist = [], [], []
        for c, count in enumerate(_class_counts(N, C)):
            n_far = n_distant_per_class[c]
            near = _bursts(rng, count - n_far, m, spec.base_freq * (c + 1) * freq_mult, amp_mult, spec.bursts)
            near += spec.noise_std * rng.standard_normal(near.shape)
            if shifted:
                near += interference(len(near))
            sig.append(near)
            if n_far:
                tone = rng.uniform(spec.distant_band_lo, spec.distant_band_hi, size=(n_far, 1))
                phase = rng.uniform(0, 2 * np.pi, size=(n_far, 1))
                far = 1.5 * np.sin(2 * np.pi * tone * t + phase)
                far += spec.noise_std * rng.standard_t(spec.distant_noise_df, size=(n_far, m)).clip(-50, 50)
                decoy = (c + 1) % C
                far += spec.distant_mislabel_gain * (_bursts(
                    rng, n_far, m, spec.base_freq * (decoy + 1) * spec.freq_shift, spec.amp_shift, spec.bursts)
                    + interference(n_far))
                sig.append(far)
            lab.append(np.full(count, c))
            dist.append(np.r_[np.zeros(count - n_far, bool), np.ones(n_far, bool)])
        signals = np.concatenate(sig).astype(np.float32)
        perm = rng.permutation(len(signals))
        return signals[perm], np.concatenate(lab)[perm], np.concatenate(dist)[perm]

    far_counts = [int(round(spec.distant_fraction * k)) for k in _class_counts(N, C)]
    s_sig, s_lab, s_far = domain(1.0, 1.0, far_counts, shifted=False)
    t_sig, t_lab, _ = domain(spec.freq_shift, spec.amp_shift, [0] * C, shifted=True)
    source = DomainDataset(s_sig, s_lab, C, domain="source", name=f"{spec.name}-source", distant=s_far)
    target = DomainDataset(t_sig, t_lab, C, domain="target", name=f"{spec.name}-target")
    if s_far.any() and not s_far.all():
        source.detect_accuracy = distant_detection_accuracy(
            s_sig, s_far, spec.distant_band_lo, spec.distant_band_hi)
    return source, target


def steps_per_epoch(sizes: dict[str, int], batch_size: int) -> int:
    return max(n // batch_size for n in sizes.values())

