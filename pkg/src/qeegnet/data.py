"""EEG epoch containers, the binary epoch file, synthetic data, preprocessing and splits.

Epoch file layout (all little-endian)::

    8 bytes   magic b"QEEG\\x00\\x01\\x00\\x00"
    u32 x 3   n_trials, n_channels, n_samples
    u32       n_classes
    f32       sample_rate
    u16 x N   labels, then subject ids, then session ids
    f32 x N*C*T  epochs, row-major

Channel names, provenance and the preprocessing log live in a JSON sidecar
next to the binary file (``<path>.json``).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigurationError, CorruptionError, FormatError, UnsupportedOperationError

MAGIC = b"QEEG\x00\x01\x00\x00"
_HEADER = np.dtype([("n_trials", "<u4"), ("n_channels", "<u4"), ("n_samples", "<u4"),
                    ("n_classes", "<u4"), ("sample_rate", "<f4")])

CROSS_SUBJECT = "cross_subject_91"
FIXED_TEST_KFOLD = "fixed_test_kfold"
LOSO = "loso"
PROTOCOLS = (CROSS_SUBJECT, FIXED_TEST_KFOLD, LOSO)

# subject lists carried as protocol metadata
KAGGLE_ERN_TEST_SUBJECTS = (1, 3, 4, 5, 8, 9, 10, 15, 19, 25)
PHYSIO_P300_SUBJECTS = (3, 4, 5, 6, 7, 9, 11)


@dataclass
class EpochSet:
    epochs: np.ndarray  # [n_trials, C, T], microvolts
    labels: np.ndarray
    subject_ids: np.ndarray
    session_ids: np.ndarray
    sample_rate: float
    channel_names: list[str] = field(default_factory=list)
    n_classes: int | None = None
    provenance: str = ""
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs)
        if self.epochs.ndim != 3:
            raise ConfigurationError(f"epochs must be [trials, channels, samples], got {self.epochs.shape}")
        n = self.epochs.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(n)
        self.session_ids = np.asarray(self.session_ids, dtype=np.int64).reshape(n)
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.epochs.shape[1])]
        if len(self.channel_names) != self.epochs.shape[1]:
            raise ConfigurationError("channel_names length does not match channel count")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if not self.sample_rate > 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_trials(self) -> int:
        return self.epochs.shape[0]

    @property
    def n_channels(self) -> int:
        return self.epochs.shape[1]

    @property
    def n_samples(self) -> int:
        return self.epochs.shape[2]

    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject_ids))

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return self.replace(epochs=self.epochs[idx], labels=self.labels[idx],
                            subject_ids=self.subject_ids[idx], session_ids=self.session_ids[idx])

    def replace(self, **changes) -> "EpochSet":
        fields = dict(epochs=self.epochs, labels=self.labels, subject_ids=self.subject_ids,
                      session_ids=self.session_ids, sample_rate=self.sample_rate,
                      channel_names=list(self.channel_names), n_classes=self.n_classes,
                      provenance=self.provenance, log=list(self.log))
        fields.update(changes)
        return EpochSet(**fields)

    def with_log(self, entry: dict, **changes) -> "EpochSet":
        out = self.replace(**changes)
        out.log.append(entry)
        return out

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()


# ---------------------------------------------------------------------------
# file format


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_epochs(x: EpochSet) -> bytes:
    header = np.array([(x.n_trials, x.n_channels, x.n_samples, x.n_classes, x.sample_rate)], dtype=_HEADER)
    for name, arr in (("labels", x.labels), ("subject_ids", x.subject_ids), ("session_ids", x.session_ids)):
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise ConfigurationError(f"{name} must fit in u16")
    parts = [MAGIC, header.tobytes()]
    parts += [a.astype("<u2").tobytes() for a in (x.labels, x.subject_ids, x.session_ids)]
    parts.append(np.ascontiguousarray(x.epochs, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_epochs(blob: bytes, meta: dict | None = None) -> EpochSet:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a QEEG epoch file (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.itemsize:
        raise CorruptionError("truncated header")
    h = np.frombuffer(blob, dtype=_HEADER, count=1, offset=off)[0]
    off += _HEADER.itemsize
    n, c, t = int(h["n_trials"]), int(h["n_channels"]), int(h["n_samples"])
    expected = off + 3 * 2 * n + 4 * n * c * t
    if len(blob) != expected:
        raise CorruptionError(f"payload is {len(blob)} bytes, expected {expected}")
    ids = []
    for _ in range(3):
        ids.append(np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64))
        off += 2 * n
    epochs = np.frombuffer(blob, dtype="<f4", count=n * c * t, offset=off).reshape(n, c, t).astype(np.float32)
    meta = meta or {}
    return EpochSet(epochs, ids[0], ids[1], ids[2], float(h["sample_rate"]),
                    channel_names=meta.get("channel_names", []), n_classes=int(h["n_classes"]),
                    provenance=meta.get("provenance", ""), log=meta.get("preprocessing", []))


def save_epochs(x: EpochSet, path) -> None:
    path = Path(path)
    path.write_bytes(encode_epochs(x))
    meta = {"format": "qeeg-epochs", "version": 1, "channel_names": list(x.channel_names),
            "provenance": x.provenance, "preprocessing": x.log}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_epochs(path) -> EpochSet:
    path = Path(path)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else None
    return decode_epochs(path.read_bytes(), meta)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Class ``c`` carries ``amplitude * sin(2 pi f_c t)`` on channels ``ch % n_classes == c``."""

    n_trials: int = 200
    n_channels: int = 4
    n_samples: int = 128
    n_classes: int = 2
    sample_rate: float = 128.0
    class_signal: list[tuple[float, float]] | None = None  # (Hz, microvolts) per class
    noise_sigma: float = 1.0
    n_subjects: int = 4
    n_sessions: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_trials", "n_channels", "n_samples", "n_classes", "n_subjects", "n_sessions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.class_signal is None:
            self.class_signal = [(6.0 + 4.0 * c, 10.0) for c in range(self.n_classes)]
        self.class_signal = [tuple(map(float, cs)) for cs in self.class_signal]
        if len(self.class_signal) != self.n_classes:
            raise ConfigurationError("class_signal needs one (frequency, amplitude) pair per class")
        for f, _ in self.class_signal:
            if not 0 < f < self.sample_rate / 2:
                raise ConfigurationError(
                    f"class frequency {f} Hz violates Nyquist limit {self.sample_rate / 2} Hz"
                )
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")


def class_channels(cls: int, n_channels: int, n_classes: int) -> np.ndarray:
    chans = np.arange(n_channels)
    if n_channels < n_classes:
        return chans
    return chans[chans % n_classes == cls]


def synth_generate(spec: SynthSpec) -> EpochSet:
    rng = np.random.default_rng(spec.seed)
    n, c, t = spec.n_trials, spec.n_channels, spec.n_samples
    time_axis = np.arange(t) / spec.sample_rate
    per_subject = math.ceil(n / spec.n_subjects)
    order = np.arange(n)
    subjects = 1 + order // per_subject
    within = order % per_subject
    labels = within % spec.n_classes
    sessions = 1 + (within * spec.n_sessions) // per_subject
    templates = np.zeros((spec.n_classes, c, t))
    for k, (freq, amp) in enumerate(spec.class_signal):
        templates[k, class_channels(k, c, spec.n_classes)] = amp * np.sin(2 * np.pi * freq * time_axis)
    epochs = templates[labels] + spec.noise_sigma * rng.standard_normal((n, c, t))
    perm = rng.permutation(n)
    return EpochSet(
        epochs[perm].astype(np.float32), labels[perm], subjects[perm], sessions[perm],
        spec.sample_rate, n_classes=spec.n_classes,
        provenance=f"synthetic seed={spec.seed}",
        log=[{"op": "synth", "class_signal": [list(cs) for cs in spec.class_signal],
              "noise_sigma": spec.noise_sigma, "seed": spec.seed}],
    )


# ---------------------------------------------------------------------------
# preprocessing


def bandpass_numtaps(sample_rate: float, low: float) -> int:
    n = int(round(4 * sample_rate / low))
    return n if n % 2 else n + 1


def bandpass_filter(x: EpochSet, low: float, high: float) -> EpochSet:
    """Zero-phase Hamming-windowed-sinc band-pass applied forward and backward."""
    nyq = x.sample_rate / 2
    if not 0 < low < high < nyq:
        raise ConfigurationError(f"band [{low}, {high}] Hz invalid for sample rate {x.sample_rate}")
    numtaps = bandpass_numtaps(x.sample_rate, low)
    taps = signal.firwin(numtaps, [low, high], pass_zero=False, window="hamming", fs=x.sample_rate)
    data = np.asarray(x.epochs, dtype=np.float64)
    if x.n_trials:
        data = signal.filtfilt(taps, [1.0], data, axis=-1, padlen=min(3 * numtaps, x.n_samples - 1))
    return x.with_log({"op": "bandpass", "low": low, "high": high, "numtaps": numtaps,
                       "window": "hamming", "zero_phase": True}, epochs=data)


def antialias_taps(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed low-pass for polyphase resampling.

    Each polyphase branch is rescaled to sum to ``1/up`` so that a constant
    input comes out exactly constant (``resample_poly`` multiplies by ``up``).
    """
    rate = max(up, down)
    taps = signal.firwin(20 * rate + 1, 1.0 / rate, window=("kaiser", 5.0))
    for phase in range(up):
        taps[phase::up] /= taps[phase::up].sum() * up
    return taps


def resample(x: EpochSet, target: float) -> EpochSet:
    """Polyphase resampling with the built-in anti-alias FIR; downsampling only."""
    if target > x.sample_rate:
        raise UnsupportedOperationError(f"upsampling {x.sample_rate} -> {target} Hz is not supported")
    if not target > 0:
        raise ConfigurationError("target rate must be positive")
    if target == x.sample_rate:
        return x.replace()
    ratio = Fraction(target / x.sample_rate).limit_denominator(10_000)
    n_out = int(round(x.n_samples * target / x.sample_rate))
    data = signal.resample_poly(np.asarray(x.epochs, dtype=np.float64), ratio.numerator,
                                ratio.denominator, axis=-1, padtype="line",
                                window=antialias_taps(ratio.numerator, ratio.denominator))
    if data.shape[-1] < n_out:
        data = np.concatenate([data, np.repeat(data[..., -1:], n_out - data.shape[-1], axis=-1)], axis=-1)
    data = data[..., :n_out]
    return x.with_log({"op": "resample", "from": x.sample_rate, "to": target,
                       "up": ratio.numerator, "down": ratio.denominator},
                      epochs=data, sample_rate=float(target))


def trim_samples(x: EpochSet, target_samples: int) -> EpochSet:
    """Keep the first ``target_samples`` of every epoch (trailing trim)."""
    if not 1 <= target_samples <= x.n_samples:
        raise ConfigurationError(f"cannot trim {x.n_samples} samples to {target_samples}")
    return x.with_log({"op": "trim", "from": x.n_samples, "to": target_samples},
                      epochs=x.epochs[..., :target_samples])


def window_segment(recording: np.ndarray, sample_rate: float, markers, labels, t_start: float,
                   t_end: float, subject_id: int = 0, session_id: int = 0,
                   channel_names: list[str] | None = None, n_classes: int | None = None) -> EpochSet:
    """Cut one epoch per event marker (seconds) over ``[marker + t_start, marker + t_end)``.

    Windows that fall outside the recording are skipped; the count is recorded
    in the log and reported with a warning.
    """
    recording = np.asarray(recording)
    if t_end <= t_start:
        raise ConfigurationError("window end must follow window start")
    c, total = recording.shape
    length = int(round((t_end - t_start) * sample_rate))
    epochs, kept, skipped = [], [], 0
    for marker, label in zip(markers, labels):
        start = int(round((marker + t_start) * sample_rate))
        if start < 0 or start + length > total:
            skipped += 1
            continue
        epochs.append(recording[:, start:start + length])
        kept.append(label)
    if skipped:
        warnings.warn(f"skipped {skipped} window(s) extending past the recording")
    n = len(kept)
    data = np.stack(epochs) if epochs else np.zeros((0, c, length), dtype=recording.dtype)
    return EpochSet(data, np.array(kept, dtype=np.int64), np.full(n, subject_id), np.full(n, session_id),
                    sample_rate, channel_names=channel_names or [], n_classes=n_classes,
                    log=[{"op": "window", "t_start": t_start, "t_end": t_end, "samples": length,
                          "epochs": n, "skipped": skipped}])


def zscore_stats(x: EpochSet, idx) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over the given trials (use training indices only)."""
    sel = np.asarray(x.epochs, dtype=np.float64)[np.asarray(idx, dtype=np.int64)]
    mean = sel.mean(axis=(0, 2))
    std = sel.std(axis=(0, 2))
    return mean, np.where(std > 0, std, 1.0)


def apply_zscore(x: EpochSet, mean, std) -> EpochSet:
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    data = (np.asarray(x.epochs, dtype=np.float64) - mean[None, :, None]) / std[None, :, None]
    return x.with_log({"op": "zscore", "mean": mean.tolist(), "std": std.tolist()}, epochs=data)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    protocol: str
    fold: int = 0
    params: dict = field(default_factory=dict)

    def check(self, n_trials: int) -> None:
        sets = [set(self.train_idx.tolist()), set(self.val_idx.tolist()), set(self.test_idx.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigurationError("split index sets overlap")
        if any(i < 0 or i >= n_trials for s in sets for i in s):
            raise ConfigurationError("split index out of range")

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "fold": self.fold, "params": self.params,
                "train": self.train_idx.tolist(), "val": self.val_idx.tolist(), "test": self.test_idx.tolist()}


def stratified_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split positions into (keep, held) so ``held`` has ``round(fraction * n)`` items.

    Per-class quotas use largest-remainder rounding, so each class is within
    one trial of its exact proportional share.
    """
    labels = np.asarray(labels)
    n = len(labels)
    n_held = int(math.floor(fraction * n + 0.5))
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * n_held / n if n else counts * 0.0
    quota = np.floor(exact).astype(int)
    leftover = n_held - quota.sum()
    if leftover:
        # ties between equal remainders broken by the seeded generator
        tiebreak = rng.permutation(len(classes))
        order = sorted(range(len(classes)), key=lambda k: (-(exact[k] - quota[k]), tiebreak[k]))
        for k in order[:leftover]:
            quota[k] += 1
    held = []
    for cls, q in zip(classes, quota):
        pos = np.flatnonzero(labels == cls)
        held.extend(rng.permutation(pos)[:q].tolist())
    held = np.sort(np.array(held, dtype=np.int64))
    keep = np.setdiff1d(np.arange(n), held)
    return keep, held


def _grouped_holdout(x: EpochSet, pool: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified holdout run separately inside every (subject, session) group of ``pool``."""
    train, val = [], []
    groups = sorted({(int(x.subject_ids[i]), int(x.session_ids[i])) for i in pool})
    for subj, sess in groups:
        members = pool[(x.subject_ids[pool] == subj) & (x.session_ids[pool] == sess)]
        keep, held = stratified_holdout(x.labels[members], fraction, rng)
        train.extend(members[keep].tolist())
        val.extend(members[held].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def _require_subjects(x: EpochSet, subjects) -> None:
    present = set(x.subjects())
    unknown = [s for s in subjects if s not in present]
    if unknown:
        raise ConfigurationError(f"unknown subject(s) {unknown}; data has {sorted(present)}")


def make_splits(x: EpochSet, protocol: str, params: dict | None = None, seed: int = 0) -> SplitPlan:
    """Train/validation/test indices for one fold of a split protocol.

    ``cross_subject_91``  params: ``target_subject``, ``val_fraction`` (0.1).
        Target subject -> test; every other (subject, session) is split
        90/10 stratified into train/validation.
    ``fixed_test_kfold``  params: ``test_subjects``, ``n_folds`` (4), ``fold``.
        Fixed test subjects; the remaining subjects are shuffled into
        ``n_folds`` groups, group ``fold`` validates and the rest train.
    ``loso``  params: ``held_out`` subject (or ``fold`` index into the sorted
        subject list), ``val_fraction`` (0.1).  Held-out subject -> test;
        validation is a stratified slice of the remaining subjects.
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    all_idx = np.arange(x.n_trials)
    frac = float(params.get("val_fraction", 0.1))
    if not 0 <= frac < 1:
        raise ConfigurationError("val_fraction must be in [0, 1)")

    if protocol == CROSS_SUBJECT:
        if "target_subject" not in params:
            raise ConfigurationError("cross_subject_91 needs target_subject")
        target = int(params["target_subject"])
        _require_subjects(x, [target])
        test = all_idx[x.subject_ids == target]
        train, val = _grouped_holdout(x, all_idx[x.subject_ids != target], frac, rng)
        fold = target
    elif protocol == FIXED_TEST_KFOLD:
        test_subjects = [int(s) for s in params.get("test_subjects", KAGGLE_ERN_TEST_SUBJECTS)]
        n_folds = int(params.get("n_folds", 4))
        fold = int(params.get("fold", 0))
        _require_subjects(x, test_subjects)
        if not 0 <= fold < n_folds:
            raise ConfigurationError(f"fold {fold} out of range for {n_folds} folds")
        rest = [s for s in x.subjects() if s not in test_subjects]
        if len(rest) < n_folds:
            raise ConfigurationError(f"{len(rest)} non-test subjects cannot fill {n_folds} folds")
        groups = np.array_split(rng.permutation(rest), n_folds)
        val_subjects = set(groups[fold].tolist())
        test = all_idx[np.isin(x.subject_ids, test_subjects)]
        val = all_idx[np.isin(x.subject_ids, list(val_subjects))]
        train = all_idx[np.isin(x.subject_ids, [s for s in rest if s not in val_subjects])]
        params = {**params, "test_subjects": test_subjects, "val_subjects": sorted(int(s) for s in val_subjects)}
    elif protocol == LOSO:
        subjects = x.subjects()
        if "held_out" in params:
            held = int(params["held_out"])
            _require_subjects(x, [held])
        else:
            fold = int(params.get("fold", 0))
            if not 0 <= fold < len(subjects):
                raise ConfigurationError(f"fold {fold} out of range for {len(subjects)} subjects")
            held = subjects[fold]
        fold = subjects.index(held)
        test = all_idx[x.subject_ids == held]
        train, val = _grouped_holdout(x, all_idx[x.subject_ids != held], frac, rng)
        params = {**params, "held_out": held}
    else:
        raise ConfigurationError(f"unknown split protocol {protocol!r}; expected one of {PROTOCOLS}")

    plan = SplitPlan(np.asarray(train, dtype=np.int64), np.asarray(val, dtype=np.int64),
                     np.asarray(test, dtype=np.int64), protocol, fold, params)
    plan.check(x.n_trials)
    return plan


def loso_plans(x: EpochSet, seed: int = 0, val_fraction: float = 0.1) -> list[SplitPlan]:
    return [make_splits(x, LOSO, {"held_out": s, "val_fraction": val_fraction}, seed) for s in x.subjects()]
