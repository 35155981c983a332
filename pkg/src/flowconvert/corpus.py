"""Synthetic multi-accent, multi-speaker corpus.

Stands in for recorded speech so that conversion correctness has a ground
truth. An accent is modelled as the three factors a conversion model must
disentangle: a pronunciation table (which phonemes a word maps to), a set
of per-phoneme duration multipliers (speaking rate), and a spectral shift
(pronunciation color). A speaker is a fixed timbre offset plus a noise
level. Alignment is exact by construction: every mel frame belongs to a
known phoneme.

Accent pronunciation tables are built from a shared base lexicon by
(a) substituting a subset of phonemes, (b) replacing some words with
same-length variants whose phonemes are shifted (one inserted, one
dropped), and (c) resizing some words by a phoneme. (b) reproduces the
awkward case where source and target sequences have equal length but no
positional correspondence; (c) produces genuinely unequal lengths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import load_arrays, save_arrays
from .config import CorpusConfig
from .errors import ConfigurationError, ContractError, NumericError, UnknownIdError
from .seeding import derive_int, derive_rng

MANIFEST_VERSION = 1
SPLITS = ("train", "calib", "test")


def round_half_up(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest integer, ties away from zero upward (0.5 -> 1)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class PhonemeSequence:
    """Phoneme ids with per-phoneme frame durations."""

    phonemes: list[int]
    durations: list[int]

    def __post_init__(self):
        if len(self.phonemes) != len(self.durations):
            raise ContractError(
                f"phonemes ({len(self.phonemes)}) and durations ({len(self.durations)}) differ in length"
            )
        if any(d < 1 for d in self.durations):
            raise ContractError("all durations must be >= 1")
        self.phonemes = [int(p) for p in self.phonemes]
        self.durations = [int(d) for d in self.durations]

    @property
    def total_frames(self) -> int:
        return sum(self.durations)

    def __len__(self) -> int:
        return len(self.phonemes)


@dataclass
class MelSpectrogram:
    """T x D matrix of frame features."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ContractError(f"mel must be a T x D matrix with T,D >= 1, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise NumericError("mel contains non-finite entries")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class AccentSpec:
    """One accent: pronunciation table, speaking-rate multipliers,
    spectral shift and a trajectory (intonation) scale."""

    accent_id: str
    remap_table: dict[str, list[int]]
    duration_multipliers: dict[int, float]
    spectral_shift: np.ndarray
    trajectory_scale: float = 1.0

    def __post_init__(self):
        self.spectral_shift = np.asarray(self.spectral_shift, dtype=np.float64)
        if any(m <= 0 for m in self.duration_multipliers.values()):
            raise ConfigurationError(f"accent {self.accent_id}: duration multipliers must be positive")


@dataclass
class SpeakerSpec:
    speaker_id: str
    native_accent: str
    timbre_offset: np.ndarray
    noise_level: float

    def __post_init__(self):
        self.timbre_offset = np.asarray(self.timbre_offset, dtype=np.float64)
        if self.noise_level < 0:
            raise ConfigurationError(f"speaker {self.speaker_id}: noise_level must be >= 0")


@dataclass
class PhonemeInventory:
    """Corpus-wide acoustic assets: a static template, a trajectory
    direction/amplitude and a base duration per phoneme.

    The within-phoneme trajectory is a half-sine arc over *relative*
    position, so resampling a span to a different duration preserves the
    arc; this is what makes duration warping lossless in this world.
    """

    templates: np.ndarray        # n_phonemes x D
    trajectory_dirs: np.ndarray  # n_phonemes x D, unit rows
    trajectory_amps: np.ndarray  # n_phonemes
    base_durations: np.ndarray   # n_phonemes, ints >= 1

    @property
    def n_phonemes(self) -> int:
        return self.templates.shape[0]


@dataclass
class Utterance:
    utterance_id: str
    text: list[str]
    speaker_id: str
    accent_id: str
    phoneme_seq: PhonemeSequence
    mel: MelSpectrogram
    split: str = "train"

    def __post_init__(self):
        if self.mel.frame_count != self.phoneme_seq.total_frames:
            raise ContractError(
                f"utterance {self.utterance_id}: mel has {self.mel.frame_count} frames, "
                f"durations sum to {self.phoneme_seq.total_frames}"
            )


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    inventory: PhonemeInventory
    accents: dict[str, AccentSpec]
    speakers: dict[str, SpeakerSpec]
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def accent_ids(self) -> list[str]:
        return list(self.accents)

    @property
    def speaker_ids(self) -> list[str]:
        return list(self.speakers)

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [u for u in self.utterances if u.split == name]

    def utterance(self, utterance_id: str) -> Utterance:
        for u in self.utterances:
            if u.utterance_id == utterance_id:
                return u
        raise UnknownIdError(f"no utterance {utterance_id!r} in corpus")


# ---------------------------------------------------------------------------
# operations


def g2p(text: list[str], accent: AccentSpec) -> list[int]:
    """Pronounce ``text`` under ``accent``: concatenation of the accent's
    per-word phoneme lists, order preserved."""
    out: list[int] = []
    for word in text:
        if word not in accent.remap_table:
            raise UnknownIdError(f"word {word!r} not in remap table of accent {accent.accent_id!r}")
        out.extend(accent.remap_table[word])
    return out


def assign_durations(
    phonemes: list[int],
    accent: AccentSpec,
    base_durations: np.ndarray,
    rng: np.random.Generator,
    jitter: int = 1,
) -> PhonemeSequence:
    """Per-phoneme frame counts: round(base * accent multiplier) plus a
    bounded integer jitter, clamped to >= 1."""
    base = np.asarray(base_durations)
    durations = []
    for p in phonemes:
        if p < 0 or p >= len(base):
            raise UnknownIdError(f"phoneme {p} has no base duration")
        if p not in accent.duration_multipliers:
            raise UnknownIdError(f"phoneme {p} has no duration multiplier in accent {accent.accent_id!r}")
        d = round_half_up(float(base[p]) * accent.duration_multipliers[p])
        if jitter > 0:
            d += rng.integers(-jitter, jitter + 1)
        durations.append(max(1, int(d)))
    return PhonemeSequence(list(phonemes), durations)


def expected_durations(phonemes: list[int], accent: AccentSpec, base_durations: np.ndarray) -> list[int]:
    """Jitter-free durations for ``phonemes`` under ``accent`` (the
    deterministic part of assign_durations)."""
    base = np.asarray(base_durations)
    out = []
    for p in phonemes:
        if p < 0 or p >= len(base):
            raise UnknownIdError(f"phoneme {p} has no base duration")
        out.append(max(1, int(round_half_up(float(base[p]) * accent.duration_multipliers[p]))))
    return out


def render_mel(
    phoneme_seq: PhonemeSequence,
    speaker: SpeakerSpec,
    accent: AccentSpec,
    inventory: PhonemeInventory,
    seed: int,
) -> MelSpectrogram:
    """Procedural stand-in for recorded speech.

    Frame t inside phoneme p at relative position r of its span:

        template[p] + spectral_shift + timbre_offset
        + trajectory_scale * amp[p] * sin(pi * r) * dir[p]
        + noise_level * N(0, I)
    """
    phones = np.asarray(phoneme_seq.phonemes, dtype=np.int64)
    durs = np.asarray(phoneme_seq.durations, dtype=np.int64)
    if phones.size == 0:
        raise ContractError("cannot render an empty phoneme sequence")
    if phones.max() >= inventory.n_phonemes or phones.min() < 0:
        raise UnknownIdError("phoneme id outside inventory")

    frame_phone = np.repeat(phones, durs)
    # relative position (j + 0.5) / d of each frame within its span
    total = int(durs.sum())
    offsets = np.concatenate([[0], np.cumsum(durs)[:-1]])
    j = np.arange(total) - np.repeat(offsets, durs)
    rel = (j + 0.5) / np.repeat(durs, durs)

    arc = np.sin(np.pi * rel)[:, None]
    amp = accent.trajectory_scale * inventory.trajectory_amps[frame_phone][:, None]
    frames = (
        inventory.templates[frame_phone]
        + accent.spectral_shift[None, :]
        + speaker.timbre_offset[None, :]
        + amp * arc * inventory.trajectory_dirs[frame_phone]
    )
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(frames.shape)
    frames = frames + speaker.noise_level * noise
    return MelSpectrogram(frames)


# ---------------------------------------------------------------------------
# generation


def _make_inventory(config: CorpusConfig, seed: int) -> PhonemeInventory:
    rng = derive_rng(seed, "inventory")
    n, d = config.n_phonemes, config.mel_dim
    templates = config.template_scale * rng.standard_normal((n, d))
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(config.trajectory_amp_min, config.trajectory_amp_max, size=n)
    base = rng.integers(config.base_duration_min, config.base_duration_max + 1, size=n)
    return PhonemeInventory(templates, dirs, amps, base.astype(np.int64))


def _make_lexicon(config: CorpusConfig, seed: int) -> dict[str, list[int]]:
    rng = derive_rng(seed, "lexicon")
    lexicon = {}
    for w in range(config.n_words):
        length = int(rng.integers(config.phonemes_per_word_min, config.phonemes_per_word_max + 1))
        lexicon[f"w{w:04d}"] = [int(p) for p in rng.integers(0, config.n_phonemes, size=length)]
    return lexicon


def _make_accent(
    config: CorpusConfig, seed: int, index: int, lexicon: dict[str, list[int]],
    tempo: float, intonation: float,
) -> AccentSpec:
    rng = derive_rng(seed, "accent", index)
    n_ph = config.n_phonemes

    substituted = rng.choice(n_ph, size=config.n_phoneme_substitutions, replace=False)
    sub_map = {}
    for p in substituted:
        q = int(rng.integers(0, n_ph - 1))
        sub_map[int(p)] = q if q < p else q + 1  # never map a phoneme to itself

    words = list(lexicon)
    n_shift = int(round(config.shift_word_fraction * len(words)))
    n_resize = int(round(config.resize_word_fraction * len(words)))
    special = rng.choice(len(words), size=min(len(words), n_shift + n_resize), replace=False)
    shift_words = {words[i] for i in special[:n_shift]}
    resize_words = {words[i] for i in special[n_shift : n_shift + n_resize]}

    table: dict[str, list[int]] = {}
    for word, base_phones in lexicon.items():
        phones = [sub_map.get(p, p) for p in base_phones]
        if word in shift_words:
            pos = int(rng.integers(0, len(phones)))
            inserted = int(rng.integers(0, n_ph))
            phones = phones[:pos] + [inserted] + phones[pos:-1]  # same length, shifted tail
        elif word in resize_words:
            if rng.random() < 0.5 and len(phones) > 1:
                phones = phones[: len(phones) - 1]
            else:
                pos = int(rng.integers(0, len(phones) + 1))
                phones = phones[:pos] + [int(rng.integers(0, n_ph))] + phones[pos:]
        table[word] = phones

    multipliers = {
        p: float(tempo * rng.uniform(1 - config.tempo_phoneme_jitter, 1 + config.tempo_phoneme_jitter))
        for p in range(n_ph)
    }
    shift = config.accent_shift_scale * rng.standard_normal(config.mel_dim)
    return AccentSpec(f"acc{index}", table, multipliers, shift, trajectory_scale=intonation)


def _check_accent_distinctness(accents: dict[str, AccentSpec], n_words: int) -> None:
    ids = list(accents)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            ta, tb = accents[a].remap_table, accents[b].remap_table
            differing = sum(1 for w in ta if ta[w] != tb[w])
            if differing < 0.2 * n_words:
                raise ConfigurationError(
                    f"accents {a!r} and {b!r} differ on only {differing}/{n_words} words "
                    "(need >= 20%); increase n_phoneme_substitutions or word variant fractions"
                )


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Build the full corpus deterministically from (config, seed).

    Per-utterance randomness is derived from the master seed and the
    utterance's (speaker, index) key, never from generation order, so the
    result is identical no matter how generation is scheduled.
    """
    config.validate()
    inventory = _make_inventory(config, seed)
    lexicon = _make_lexicon(config, seed)

    order_rng = derive_rng(seed, "accent-order")
    tempos = np.linspace(config.tempo_min, config.tempo_max, config.n_accents)
    intonations = order_rng.permutation(
        np.linspace(config.intonation_min, config.intonation_max, config.n_accents)
    )
    accents = {}
    for i in range(config.n_accents):
        spec = _make_accent(config, seed, i, lexicon, float(tempos[i]), float(intonations[i]))
        accents[spec.accent_id] = spec
    _check_accent_distinctness(accents, config.n_words)

    speakers = {}
    accent_ids = list(accents)
    for i in range(config.n_speakers):
        rng = derive_rng(seed, "speaker", i)
        speakers[f"spk{i}"] = SpeakerSpec(
            speaker_id=f"spk{i}",
            native_accent=accent_ids[i % len(accent_ids)],
            timbre_offset=config.timbre_scale * rng.standard_normal(config.mel_dim),
            noise_level=float(rng.uniform(config.noise_min, config.noise_max)),
        )

    n_train = int(round(config.train_fraction * config.utterances_per_speaker))
    n_calib = int(round(config.calib_fraction * config.utterances_per_speaker))
    words = list(lexicon)

    utterances = []
    for si, speaker in enumerate(speakers.values()):
        accent = accents[speaker.native_accent]
        for u in range(config.utterances_per_speaker):
            rng = derive_rng(seed, "utterance", si, u)
            n_words = int(rng.integers(config.words_per_utterance_min, config.words_per_utterance_max + 1))
            text = [words[int(i)] for i in rng.integers(0, len(words), size=n_words)]
            phones = g2p(text, accent)
            seq = assign_durations(phones, accent, inventory.base_durations, rng,
                                   jitter=config.duration_jitter)
            mel = render_mel(seq, speaker, accent, inventory,
                             seed=derive_int(seed, "render", si, u))
            split = "train" if u < n_train else ("calib" if u < n_train + n_calib else "test")
            utterances.append(
                Utterance(f"utt_{speaker.speaker_id}_{u:03d}", text, speaker.speaker_id,
                          accent.accent_id, seq, mel, split=split)
            )
    return Corpus(config, seed, inventory, accents, speakers, utterances)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + one array file per utterance


def save_corpus(corpus: Corpus, out_dir: str | Path, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise ContractError(f"{out_dir} already holds a corpus; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = corpus.config
    manifest = {
        "format_version": MANIFEST_VERSION,
        "kind": "corpus",
        "seed": corpus.seed,
        "config": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "inventory": {
            "templates": corpus.inventory.templates.tolist(),
            "trajectory_dirs": corpus.inventory.trajectory_dirs.tolist(),
            "trajectory_amps": corpus.inventory.trajectory_amps.tolist(),
            "base_durations": corpus.inventory.base_durations.tolist(),
        },
        "accents": [
            {
                "accent_id": a.accent_id,
                "remap_table": a.remap_table,
                "duration_multipliers": [a.duration_multipliers[p] for p in range(cfg.n_phonemes)],
                "spectral_shift": a.spectral_shift.tolist(),
                "trajectory_scale": a.trajectory_scale,
            }
            for a in corpus.accents.values()
        ],
        "speakers": [
            {
                "speaker_id": s.speaker_id,
                "native_accent": s.native_accent,
                "timbre_offset": s.timbre_offset.tolist(),
                "noise_level": s.noise_level,
            }
            for s in corpus.speakers.values()
        ],
        "utterances": [
            {
                "utterance_id": u.utterance_id,
                "speaker_id": u.speaker_id,
                "accent_id": u.accent_id,
                "split": u.split,
                "text": u.text,
                "n_frames": u.mel.frame_count,
                "file": f"utts/{u.utterance_id}.fca",
            }
            for u in corpus.utterances
        ],
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    for u in corpus.utterances:
        save_arrays(
            out_dir / "utts" / f"{u.utterance_id}.fca",
            {
                "mel": u.mel.frames,
                "phonemes": np.asarray(u.phoneme_seq.phonemes, dtype=np.int64),
                "durations": np.asarray(u.phoneme_seq.durations, dtype=np.int64),
            },
            meta={
                "utterance_id": u.utterance_id,
                "speaker_id": u.speaker_id,
                "accent_id": u.accent_id,
                "split": u.split,
                "text": u.text,
            },
        )
    return manifest_path


def load_corpus(corpus_dir: str | Path) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ContractError(f"unsupported corpus format_version {manifest.get('format_version')!r}")

    config = CorpusConfig(**manifest["config"])
    inventory = PhonemeInventory(
        templates=np.asarray(manifest["inventory"]["templates"], dtype=np.float64),
        trajectory_dirs=np.asarray(manifest["inventory"]["trajectory_dirs"], dtype=np.float64),
        trajectory_amps=np.asarray(manifest["inventory"]["trajectory_amps"], dtype=np.float64),
        base_durations=np.asarray(manifest["inventory"]["base_durations"], dtype=np.int64),
    )
    accents = {}
    for a in manifest["accents"]:
        accents[a["accent_id"]] = AccentSpec(
            accent_id=a["accent_id"],
            remap_table={w: list(map(int, ph)) for w, ph in a["remap_table"].items()},
            duration_multipliers={p: m for p, m in enumerate(a["duration_multipliers"])},
            spectral_shift=np.asarray(a["spectral_shift"], dtype=np.float64),
            trajectory_scale=a["trajectory_scale"],
        )
    speakers = {
        s["speaker_id"]: SpeakerSpec(
            speaker_id=s["speaker_id"],
            native_accent=s["native_accent"],
            timbre_offset=np.asarray(s["timbre_offset"], dtype=np.float64),
            noise_level=s["noise_level"],
        )
        for s in manifest["speakers"]
    }

    utterances = []
    for row in manifest["utterances"]:
        arrays, meta = load_arrays(corpus_dir / row["file"])
        utterances.append(
            Utterance(
                utterance_id=row["utterance_id"],
                text=list(meta["text"]),
                speaker_id=row["speaker_id"],
                accent_id=row["accent_id"],
                phoneme_seq=PhonemeSequence(arrays["phonemes"].tolist(), arrays["durations"].tolist()),
                mel=MelSpectrogram(arrays["mel"]),
                split=row["split"],
            )
        )
    return Corpus(config, manifest["seed"], inventory, accents, speakers, utterances)
