"""Manifests, WAV I/O, the character tokenizer, and the synthetic corpus.

Manifest lines are JSON objects with exactly the fields of
:class:`SampleRecord`. Audio is 16-bit PCM mono WAV at 16 kHz; anything
else is rejected rather than converted.
"""

from __future__ import annotations

import json
import warnings
import wave
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .branches import CLS_ID, PAD_ID, UNK_ID
from .dsp import SAMPLE_RATE, AudioBuffer
from .errors import ManifestError, UnsupportedFormatError, DataError
from .rng import PCG32, stream_id

TASKS = (0, 1, 2)
TASK_NAMES = {0: "ER", 1: "PR", 2: "ED"}
SPLITS = ("train", "internal_val", "dev")
MAX_SEQ_LEN = 256


@dataclass(frozen=True)
class SampleRecord:
    id: str
    subject_id: str
    task: int
    audio_path: str
    transcript: str
    label: int
    split: str


_FIELDS = [f.name for f in fields(SampleRecord)]


def _validate_record(obj, lineno: int) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    keys = set(obj)
    if keys != set(_FIELDS):
        missing, extra = set(_FIELDS) - keys, keys - set(_FIELDS)
        raise ManifestError(f"line {lineno}: missing fields {sorted(missing)}, unexpected {sorted(extra)}")
    for name in ("id", "subject_id", "audio_path", "transcript", "split"):
        if not isinstance(obj[name], str):
            raise ManifestError(f"line {lineno}: field {name!r} must be a string")
    if obj["task"] not in TASKS or isinstance(obj["task"], bool):
        raise ManifestError(f"line {lineno}: task must be 0, 1 or 2, got {obj['task']!r}")
    if obj["label"] not in (0, 1) or isinstance(obj["label"], bool):
        raise ManifestError(f"line {lineno}: label must be 0 or 1, got {obj['label']!r}")
    if obj["split"] not in SPLITS:
        raise ManifestError(f"line {lineno}: split must be one of {SPLITS}, got {obj['split']!r}")
    return SampleRecord(**obj)


class Manifest:
    """Validated, ordered collection of sample records."""

    def __init__(self, records=(), root: Path | str = "."):
        self.records: list[SampleRecord] = list(records)
        self.root = Path(root)
        self._validate()

    def _validate(self) -> None:
        seen_ids, seen_pairs, subject_label = set(), {}, {}
        for rec in self.records:
            if rec.id in seen_ids:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen_ids.add(rec.id)
            pair = (rec.subject_id, rec.task)
            if pair in seen_pairs:
                raise ManifestError(f"record {rec.id!r} duplicates subject {rec.subject_id!r} task {rec.task} "
                                    f"(already in {seen_pairs[pair]!r})")
            seen_pairs[pair] = rec.id
            prior = subject_label.setdefault(rec.subject_id, rec.label)
            if prior != rec.label:
                raise ManifestError(f"subject {rec.subject_id!r} has inconsistent labels (record {rec.id!r})")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, split: str | None = None, task: int | None = None) -> list[SampleRecord]:
        return [r for r in self.records
                if (split is None or r.split == split) and (task is None or r.task == task)]

    def audio_file(self, rec: SampleRecord) -> Path:
        path = Path(rec.audio_path)
        return path if path.is_absolute() else self.root / path

    def counts(self) -> dict:
        by_split = Counter(r.split for r in self.records)
        by_task = Counter(r.task for r in self.records)
        return {"split": {s: by_split.get(s, 0) for s in SPLITS},
                "task": {t: by_task.get(t, 0) for t in TASKS}}

    def duration_table(self) -> dict:
        """Hours of audio per (task, split) plus totals, laid out like a duration table."""
        table = {t: {s: 0.0 for s in SPLITS} for t in TASKS}
        for rec in self.records:
            table[rec.task][rec.split] += wav_seconds(self.audio_file(rec)) / 3600.0
        table["total"] = {s: sum(table[t][s] for t in TASKS) for s in SPLITS}
        return table

    def subject_labels(self) -> dict:
        return {r.subject_id: r.label for r in self.records}

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            records.append(_validate_record(obj, lineno))
    if not records:
        warnings.warn(f"manifest {path} is empty", stacklevel=2)
    return Manifest(records, root=path.parent)


# ---------------------------------------------------------------- WAV

def read_wav(path) -> AudioBuffer:
    """Decode 16-bit PCM mono 16 kHz WAV; samples are int16 / 32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if channels != 1:
                raise UnsupportedFormatError(f"{path}: {channels} channels, only mono is supported")
            if width != 2:
                raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
            if rate != SAMPLE_RATE:
                raise UnsupportedFormatError(f"{path}: {rate} Hz, only {SAMPLE_RATE} Hz is supported "
                                             f"(no resampling)")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from None
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples)


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM (rounded, clipped to int16)."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def wav_seconds(path) -> float:
    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnframes() / wf.getframerate()
    except (wave.Error, FileNotFoundError) as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- tokenizer

class Tokenizer:
    """Character vocabulary; ids 0/1/2 are pad/unk/cls, the rest follow codepoint order."""

    def __init__(self, chars=()):
        self.chars = sorted(set(chars))
        self.vocab = {c: i + 3 for i, c in enumerate(self.chars)}
        self.inverse = {i: c for c, i in self.vocab.items()}

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "Tokenizer":
        chars = set()
        for rec in manifest.select(split="train"):
            chars.update(rec.transcript)
        return cls(chars)

    def __len__(self):
        return len(self.vocab) + 3

    @property
    def vocab_size(self) -> int:
        return len(self)

    def encode(self, text: str, max_len: int = MAX_SEQ_LEN) -> np.ndarray:
        return encode_transcript(self, text, max_len)

    def decode(self, ids) -> str:
        return "".join(self.inverse.get(int(i), "") for i in ids if int(i) not in (PAD_ID, CLS_ID))

    def to_list(self) -> list[str]:
        return list(self.chars)


def encode_transcript(tok: Tokenizer, text: str, max_len: int = MAX_SEQ_LEN) -> np.ndarray:
    """Character ids, unknown characters -> unk, truncated or right-padded to max_len."""
    ids = [tok.vocab.get(ch, UNK_ID) for ch in text[:max_len]]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out


# ---------------------------------------------------------------- splits

SPLIT_FRACTIONS = {"train": 0.64, "internal_val": 0.16, "dev": 0.20}


def assign_splits(labels: dict, seed: int, fractions: dict = SPLIT_FRACTIONS) -> dict:
    """Stratified subject -> split assignment (500 subjects -> 320/80/100)."""
    out = {}
    by_label = defaultdict(list)
    for subject in sorted(labels):
        by_label[labels[subject]].append(subject)
    for label, subjects in sorted(by_label.items()):
        order = PCG32(seed, stream_id("split", label)).permutation(len(subjects))
        n = len(subjects)
        n_dev = int(round(n * fractions["dev"]))
        n_val = int(round(n * fractions["internal_val"]))
        for rank, idx in enumerate(order):
            split = "dev" if rank < n_dev else "internal_val" if rank < n_dev + n_val else "train"
            out[subjects[idx]] = split
    return out


# ---------------------------------------------------------------- synthetic corpus

CLASS_CENTERS_HZ = (600.0, 2000.0)
SYNTH_CHARS = [chr(0x4E00 + i) for i in range(48)]


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 600
    balance: float = 0.5
    audio_informativeness: float = 1.0
    text_informativeness: float = 1.0
    seconds: float = 1.0
    noise: float = 0.05
    seed: int = 0
    min_chars: int = 16
    max_chars: int = 48

    def __post_init__(self):
        if self.n_subjects < 2:
            raise DataError("need at least two subjects")
        for name in ("audio_informativeness", "text_informativeness"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.seconds * SAMPLE_RATE < 400:
            raise DataError("clips must cover at least one time-branch receptive field (400 samples)")


def _synth_audio(rng: PCG32, band_label: int, task: int, cfg: SynthConfig) -> np.ndarray:
    n = int(round(cfg.seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    center = CLASS_CENTERS_HZ[band_label] * (1.0 + 0.05 * task)
    freqs = center * (1.0 + rng.uniform(3, -0.1, 0.1))
    phases = rng.uniform(3, 0.0, 2 * np.pi)
    amps = rng.uniform(3, 0.1, 0.25)
    tone = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1, 1.0, 4.0)[0] * t + rng.uniform(1, 0, 6.28)[0])
    x = tone * envelope + cfg.noise * rng.normal(n)
    return np.clip(x, -0.99, 0.99)


def _synth_text(rng: PCG32, label: int, cfg: SynthConfig) -> str:
    half = len(SYNTH_CHARS) // 2
    length = int(rng.integers(1, cfg.max_chars - cfg.min_chars + 1)[0]) + cfg.min_chars
    own = rng.uniform(length) < cfg.text_informativeness
    idx = rng.integers(length, half)
    uniform = rng.integers(length, len(SYNTH_CHARS))
    chars = np.where(own, idx + label * half, uniform)
    return "".join(SYNTH_CHARS[i] for i in chars)


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Write ``audio/{id}.wav`` and ``manifest.jsonl`` under out_dir.

    Audio: three tones near a class-specific center frequency, under a slow
    amplitude envelope, plus white noise. With probability equal to the audio
    informativeness the center comes from the subject's label, otherwise from
    a fair coin. Transcripts: each character is drawn from the label's half of
    the alphabet with probability equal to the text informativeness, else
    uniformly from the whole alphabet.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    n = cfg.n_subjects
    n_pos = int(round(n * cfg.balance))
    perm = PCG32(cfg.seed, stream_id("labels")).permutation(n)
    labels = {f"subj{i:04d}": int(perm[i] < n_pos) for i in range(n)}
    splits = assign_splits(labels, cfg.seed)
    records = []
    for i in range(n):
        subject = f"subj{i:04d}"
        label = labels[subject]
        for task in TASKS:
            rec_id = f"{subject}_t{task}"
            rng = PCG32(cfg.seed, stream_id("sample", subject, task))
            band = label if rng.uniform(1)[0] < cfg.audio_informativeness else int(rng.integers(1, 2)[0])
            audio = _synth_audio(rng, band, task, cfg)
            text = _synth_text(rng, label, cfg)
            write_wav(out / "audio" / f"{rec_id}.wav", audio)
            records.append(SampleRecord(rec_id, subject, task, f"audio/{rec_id}.wav", text, label,
                                        splits[subject]))
    manifest = Manifest(records, root=out)
    manifest.write(out / "manifest.jsonl")
    return manifest
