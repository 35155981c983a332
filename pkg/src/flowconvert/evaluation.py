"""Objective proxies for perceptual evaluation.

Human listeners are replaced by frozen proxy classifiers trained on real
(non-converted) utterances from a split held out from conversion-model
training:

  accent / speaker   pooled classifiers over [frame mean, mean |frame
                     delta|] features; the delta channel carries
                     speaking-rate cues so duration errors cost accent
                     similarity
  phoneme            a frame-window classifier used as the transcription
                     stand-in; its run-length-collapsed argmax sequence is
                     scored against the true target phonemes with the
                     edit-distance error rate

Absolute listener scores are not reproducible; reports therefore target
orderings between systems plus significance structure (paired t-tests
with Holm-Bonferroni).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, MelSpectrogram, g2p
from .errors import ContractError, TrainingDivergedError, UnknownIdError
from .metrics import collapse_runs, holm_bonferroni, paired_t_test, score_ratio_matrix, wer
from .pipeline import ModelBundle, make_request, run_requests
from .seeding import derive_int, derive_rng

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# classifiers


class PooledNet(nn.Module):
    def __init__(self, in_dim: int, n_labels: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, n_labels))
        self.to(torch.float64)

    def forward(self, x):
        return self.net(x)


class FrameWindowNet(nn.Module):
    def __init__(self, in_dim: int, n_labels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, n_labels))
        self.to(torch.float64)

    def forward(self, x):
        return self.net(x)


PHONEME_WINDOW = 2  # frames of context on each side


def pooled_features(frames: np.ndarray) -> np.ndarray:
    """[mean over frames, mean absolute frame-to-frame difference]."""
    mean = frames.mean(axis=0)
    if frames.shape[0] > 1:
        delta = np.abs(np.diff(frames, axis=0)).mean(axis=0)
    else:
        delta = np.zeros_like(mean)
    return np.concatenate([mean, delta])


def window_features(frames: np.ndarray, window: int = PHONEME_WINDOW) -> np.ndarray:
    """Per-frame concatenation of the frames in [t-window, t+window],
    edge-replicated at the boundaries."""
    padded = np.pad(frames, ((window, window), (0, 0)), mode="edge")
    t = frames.shape[0]
    return np.concatenate([padded[k : k + t] for k in range(2 * window + 1)], axis=1)


@dataclass
class ProxyClassifier:
    kind: str  # accent | speaker | phoneme
    labels: list
    module: nn.Module
    trained: bool = False

    def _check_mel(self, mel) -> np.ndarray:
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ContractError("classifier input must be a T x D matrix with T >= 1")
        return frames

    def probabilities(self, mel) -> np.ndarray:
        """Class probabilities for the utterance (frame-level probabilities
        are mean-pooled for the phoneme kind)."""
        frames = self._check_mel(mel)
        with torch.no_grad():
            if self.kind == "phoneme":
                logits = self.module(torch.from_numpy(window_features(frames)))
                return torch.softmax(logits, dim=1).mean(dim=0).numpy()
            feats = torch.from_numpy(pooled_features(frames))
            return torch.softmax(self.module(feats), dim=0).numpy()

    def frame_probabilities(self, mel) -> np.ndarray:
        if self.kind != "phoneme":
            raise ContractError(f"{self.kind} classifier has no frame-level output")
        frames = self._check_mel(mel)
        with torch.no_grad():
            logits = self.module(torch.from_numpy(window_features(frames)))
            return torch.softmax(logits, dim=1).numpy()


def similarity_score(mel, classifier: ProxyClassifier, label) -> float:
    """The classifier's probability mass on ``label`` for the utterance."""
    if not classifier.trained:
        raise ContractError("classifier has not been trained")
    if label not in classifier.labels:
        raise UnknownIdError(f"label {label!r} not in classifier label space")
    probs = classifier.probabilities(mel)
    return float(probs[classifier.labels.index(label)])


def classify(mel, classifier: ProxyClassifier):
    if not classifier.trained:
        raise ContractError("classifier has not been trained")
    probs = classifier.probabilities(mel)
    return classifier.labels[int(np.argmax(probs))]


def phoneme_decode(mel, phoneme_classifier: ProxyClassifier) -> list:
    """Frame-wise argmax phoneme labels with consecutive duplicates merged."""
    if not phoneme_classifier.trained:
        raise ContractError("phoneme classifier has not been trained")
    if phoneme_classifier.kind != "phoneme":
        raise ContractError("phoneme_decode requires a phoneme classifier")
    probs = phoneme_classifier.frame_probabilities(mel)
    frame_labels = [phoneme_classifier.labels[i] for i in np.argmax(probs, axis=1)]
    return collapse_runs(frame_labels)


def _train_softmax(module, features: torch.Tensor, targets: torch.Tensor,
                   steps: int, batch_size: int, lr: float, rng, what: str) -> None:
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    n = features.shape[0]
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        loss = nn.functional.cross_entropy(module(features[idx]), targets[idx])
        if not math.isfinite(float(loss.detach())):
            raise TrainingDivergedError(f"{what} classifier loss became non-finite at step {step}",
                                        step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    module.eval()


def train_classifiers(corpus: Corpus, run_config, seed: int) -> dict[str, ProxyClassifier]:
    """Train the accent/speaker/phoneme proxies on the calib split (real
    utterances only, held out from conversion-model training)."""
    utts = corpus.split("calib")
    if not utts:
        raise ContractError("corpus has no calib utterances to train classifiers on")
    cfg = run_config.train_classifiers
    d = corpus.config.mel_dim

    pooled = torch.from_numpy(np.stack([pooled_features(u.mel.frames) for u in utts]))
    accent_labels = sorted(corpus.accents)
    speaker_labels = sorted(corpus.speakers)
    accent_targets = torch.as_tensor([accent_labels.index(u.accent_id) for u in utts])
    speaker_targets = torch.as_tensor([speaker_labels.index(u.speaker_id) for u in utts])

    frames = np.concatenate([window_features(u.mel.frames) for u in utts])
    frame_targets = np.concatenate(
        [np.repeat(u.phoneme_seq.phonemes, u.phoneme_seq.durations) for u in utts]
    )
    frames_t = torch.from_numpy(frames)
    frame_targets_t = torch.from_numpy(frame_targets)

    out: dict[str, ProxyClassifier] = {}
    specs = [
        ("accent", PooledNet(2 * d, len(accent_labels)), pooled, accent_targets, accent_labels),
        ("speaker", PooledNet(2 * d, len(speaker_labels)), pooled, speaker_targets, speaker_labels),
        ("phoneme", FrameWindowNet((2 * PHONEME_WINDOW + 1) * d, corpus.config.n_phonemes),
         frames_t, frame_targets_t, list(range(corpus.config.n_phonemes))),
    ]
    for kind, module, feats, targets, labels in specs:
        torch.manual_seed(derive_int(seed, "classifier-init", kind))
        # re-seed module params deterministically per kind
        for p in module.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)
            else:
                nn.init.zeros_(p)
        rng = derive_rng(seed, "classifier-batches", kind)
        batch = cfg.batch_size if kind != "phoneme" else max(cfg.batch_size, 512)
        _train_softmax(module, feats, targets, cfg.steps, batch, cfg.learning_rate, rng, kind)
        out[kind] = ProxyClassifier(kind, labels, module, trained=True)
    return out


# ---------------------------------------------------------------------------
# scoring and report assembly


@dataclass
class ScoredConversion:
    utterance_id: str
    source_accent: str
    source_speaker: str
    target_accent: str
    mode: str
    per: float
    accent_similarity: float
    speaker_similarity: float
    speaker_top1: bool


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    alpha: float
    modes: list[str]
    accents: list[str]
    n_test_utterances: int
    systems: dict[str, dict] = field(default_factory=dict)
    pairwise: dict[str, list[dict]] = field(default_factory=dict)
    common_rows: int = 0
    reference_scores: dict[str, float] = field(default_factory=dict)
    ratio_matrix: dict = field(default_factory=dict)
    source_ratio_matrix: dict = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)


def score_conversion(corpus: Corpus, classifiers: dict[str, ProxyClassifier],
                     utterance, target_accent: str, mode: str, mel) -> ScoredConversion:
    true_target = g2p(utterance.text, corpus.accents[target_accent])
    decoded = phoneme_decode(mel, classifiers["phoneme"])
    return ScoredConversion(
        utterance_id=utterance.utterance_id,
        source_accent=utterance.accent_id,
        source_speaker=utterance.speaker_id,
        target_accent=target_accent,
        mode=mode,
        per=wer(true_target, decoded),
        accent_similarity=similarity_score(mel, classifiers["accent"], target_accent),
        speaker_similarity=similarity_score(mel, classifiers["speaker"], utterance.speaker_id),
        speaker_top1=classify(mel, classifiers["speaker"]) == utterance.speaker_id,
    )


METRICS = ("per", "accent_similarity", "speaker_similarity")


def assemble_report(corpus: Corpus, classifiers: dict[str, ProxyClassifier],
                    rows: list[ScoredConversion], skipped: list[dict],
                    modes: list[str], alpha: float,
                    config_hash: str = "", seed: int = 0) -> EvalReport:
    accents = sorted(corpus.accents)
    test_utts = sorted(corpus.split("test"), key=lambda u: u.utterance_id)
    report = EvalReport(
        config_hash=config_hash, seed=seed, alpha=alpha, modes=list(modes),
        accents=accents, n_test_utterances=len(test_utts), skipped=list(skipped),
    )

    # reference: real target-accent recordings scored toward their own accent
    for accent in accents:
        own = [u for u in test_utts if u.accent_id == accent]
        report.reference_scores[accent] = float(np.mean(
            [similarity_score(u.mel, classifiers["accent"], accent) for u in own]
        )) if own else float("nan")

    by_mode: dict[str, list[ScoredConversion]] = {m: [] for m in modes}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row)
    for mode in modes:
        scored = by_mode.get(mode, [])
        if scored:
            report.systems[mode] = {
                "n": len(scored),
                "per": float(np.mean([r.per for r in scored])),
                "accent_similarity": float(np.mean([r.accent_similarity for r in scored])),
                "speaker_similarity": float(np.mean([r.speaker_similarity for r in scored])),
                "speaker_retention": float(np.mean([r.speaker_top1 for r in scored])),
            }
        else:
            report.systems[mode] = {"n": 0, "per": float("nan"), "accent_similarity": float("nan"),
                                    "speaker_similarity": float("nan"), "speaker_retention": float("nan")}

    # pairwise tests on the rows every evaluated mode scored (the aligned
    # subset, mirroring the equal-length evaluation restriction)
    keys_per_mode = [
        {(r.utterance_id, r.target_accent) for r in by_mode.get(m, [])} for m in modes
    ]
    common = set.intersection(*keys_per_mode) if keys_per_mode else set()
    report.common_rows = len(common)
    indexed = {
        (r.mode, r.utterance_id, r.target_accent): r for r in rows
    }
    ordered_keys = sorted(common)
    if len(modes) >= 2 and ordered_keys:
        for metric in METRICS:
            entries = []
            p_values = []
            for i in range(len(modes)):
                for j in range(i + 1, len(modes)):
                    a = [getattr(indexed[(modes[i], u, t)], metric) for u, t in ordered_keys]
                    b = [getattr(indexed[(modes[j], u, t)], metric) for u, t in ordered_keys]
                    p = paired_t_test(a, b)
                    entries.append({"pair": (modes[i], modes[j]), "p_value": p})
                    p_values.append(p)
            decisions = holm_bonferroni(p_values, alpha)
            for entry, reject in zip(entries, decisions):
                entry["reject"] = bool(reject)
            report.pairwise[metric] = entries

    # many-to-many ratio matrices from the attention system (the general one)
    attend_rows = by_mode.get("remap_warp_attend", [])
    converted: dict[tuple[str, str], list[float]] = {
        (s, t): [] for s in accents for t in accents if s != t
    }
    for r in attend_rows:
        converted[(r.source_accent, r.target_accent)].append(r.accent_similarity)
    report.ratio_matrix = score_ratio_matrix(converted, report.reference_scores)

    source_scores: dict[tuple[str, str], list[float]] = {
        (s, t): [] for s in accents for t in accents if s != t
    }
    for u in test_utts:
        for t in accents:
            if t != u.accent_id:
                source_scores[(u.accent_id, t)].append(
                    similarity_score(u.mel, classifiers["accent"], t)
                )
    report.source_ratio_matrix = score_ratio_matrix(source_scores, report.reference_scores)
    return report


def evaluate_systems(corpus: Corpus, models: ModelBundle,
                     classifiers: dict[str, ProxyClassifier],
                     modes: list[str], alpha: float = 0.05,
                     config_hash: str = "", seed: int = 0) -> EvalReport:
    """Convert the test split toward every non-source accent under each
    mode, score with the frozen proxies, and assemble the report. Rows a
    mode cannot handle (unequal phoneme counts for the explicit-alignment
    modes) are recorded as skipped, not fatal."""
    rows: list[ScoredConversion] = []
    skipped: list[dict] = []
    test_utts = sorted(corpus.split("test"), key=lambda u: u.utterance_id)
    for u in test_utts:
        for target in sorted(corpus.accents):
            if target == u.accent_id:
                continue
            for mode in modes:
                request = make_request(corpus, u.utterance_id, target, mode)
                (req, result, error), = run_requests([request], models)
                if error is not None:
                    skipped.append({"utterance_id": u.utterance_id, "target_accent": target,
                                    "mode": mode, "error": error})
                else:
                    rows.append(score_conversion(corpus, classifiers, u, target, mode, result.mel))
    return assemble_report(corpus, classifiers, rows, skipped, modes, alpha, config_hash, seed)


# ---------------------------------------------------------------------------
# report serialization


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _matrix_lines(matrix: dict, accents: list[str]) -> list[str]:
    header = "source".ljust(10) + "".join(a.ljust(12) for a in accents)
    lines = [header]
    for s in accents:
        cells = []
        for t in accents:
            cells.append(_fmt(matrix.get((s, t))) if s != t else "-")
        lines.append(s.ljust(10) + "".join(c.ljust(12) for c in cells))
    return lines


def render_report_text(report: EvalReport) -> str:
    out = io.StringIO()
    w = out.write
    w("flowconvert evaluation report\n")
    w(f"format_version: {REPORT_VERSION}\n")
    w(f"config_hash: {report.config_hash}\n")
    w(f"seed: {report.seed}\n")
    w(f"alpha: {_fmt(report.alpha)}\n")
    w(f"test_utterances: {report.n_test_utterances}\n")
    w(f"rows_common_to_all_modes: {report.common_rows}\n\n")

    w("[systems]\n")
    w("mode".ljust(20) + "n".rjust(6) + "per".rjust(12) + "accent_sim".rjust(12)
      + "speaker_sim".rjust(14) + "retention".rjust(12) + "\n")
    for mode in report.modes:
        s = report.systems.get(mode, {})
        w(mode.ljust(20) + str(s.get("n", 0)).rjust(6)
          + _fmt(s.get("per")).rjust(12) + _fmt(s.get("accent_similarity")).rjust(12)
          + _fmt(s.get("speaker_similarity")).rjust(14)
          + _fmt(s.get("speaker_retention")).rjust(12) + "\n")
    w("\n")

    w(f"[pairwise paired t-tests, holm-bonferroni at alpha={_fmt(report.alpha)}]\n")
    if not report.pairwise:
        w("(fewer than two systems; no pairwise tests)\n")
    for metric in sorted(report.pairwise):
        for entry in report.pairwise[metric]:
            a, b = entry["pair"]
            verdict = "significant" if entry["reject"] else "not-significant"
            w(f"{metric}: {a} vs {b}: p={_fmt(entry['p_value'])} {verdict}\n")
    w("\n")

    w("[reference accent-similarity scores on real recordings]\n")
    for accent in report.accents:
        w(f"{accent}: {_fmt(report.reference_scores.get(accent))}\n")
    w("\n")

    w("[accent-similarity ratio matrix: remap_warp_attend / target recordings]\n")
    for line in _matrix_lines(report.ratio_matrix, report.accents):
        w(line + "\n")
    w("\n")

    w("[source-baseline ratio matrix: unconverted source / target recordings]\n")
    for line in _matrix_lines(report.source_ratio_matrix, report.accents):
        w(line + "\n")
    w("\n")

    w("[skipped rows]\n")
    if not report.skipped:
        w("(none)\n")
    for row in report.skipped:
        w(f"{row['utterance_id']} -> {row['target_accent']} [{row['mode']}]: {row['error']}\n")
    return out.getvalue()


def write_report(report: EvalReport, out_dir) -> None:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(render_report_text(report))

    with open(out_dir / "systems_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n", "per", "accent_similarity", "speaker_similarity",
                         "speaker_retention"])
        for mode in report.modes:
            s = report.systems.get(mode, {})
            writer.writerow([mode, s.get("n", 0)] + [_fmt(s.get(k)) for k in
                            ("per", "accent_similarity", "speaker_similarity", "speaker_retention")])

    with open(out_dir / "pairwise_tests.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "system_a", "system_b", "p_value", "reject"])
        for metric in sorted(report.pairwise):
            for entry in report.pairwise[metric]:
                writer.writerow([metric, entry["pair"][0], entry["pair"][1],
                                 _fmt(entry["p_value"]), str(entry["reject"]).lower()])

    for name, matrix in (("ratio_matrix.csv", report.ratio_matrix),
                         ("ratio_matrix_source_baseline.csv", report.source_ratio_matrix)):
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_accent"] + report.accents)
            for s in report.accents:
                writer.writerow([s] + [
                    "-" if s == t else _fmt(matrix.get((s, t))) for t in report.accents
                ])

    machine = {
        "format_version": REPORT_VERSION,
        "config_hash": report.config_hash,
        "seed": report.seed,
        "alpha": report.alpha,
        "modes": report.modes,
        "accents": report.accents,
        "n_test_utterances": report.n_test_utterances,
        "common_rows": report.common_rows,
        "systems": report.systems,
        "pairwise": {
            metric: [
                {"pair": list(e["pair"]), "p_value": e["p_value"], "reject": e["reject"]}
                for e in entries
            ]
            for metric, entries in report.pairwise.items()
        },
        "reference_scores": report.reference_scores,
        "ratio_matrix": {f"{s}->{t}": v for (s, t), v in sorted(report.ratio_matrix.items())},
        "source_ratio_matrix": {f"{s}->{t}": v for (s, t), v in sorted(report.source_ratio_matrix.items())},
        "skipped": report.skipped,
    }
    (out_dir / "report.json").write_text(json.dumps(machine, sort_keys=True, indent=1) + "\n")
