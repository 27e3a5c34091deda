"""Homogeneity, diversity and gender-consistency metrics over conversions.

A conversion pairs one source utterance with one target face image. Its
"extracted embedding" is either the recalled face embedding itself
(``embedding`` mode) or a linear speaker probe applied to the mean decoded
frame (``output`` mode).
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .fileio import atomic_write_text, dumps
from .rng import SplitMix64
from .synth import SyntheticCorpus
from .trainer import FaceVcModel, ToyDecoder, decode

log = logging.getLogger(__name__)

MODES = ("embedding", "output")
_SELECT_SALT = 0x5E1
_SHR_SALT = 0x5A8
_SDR_SALT = 0x5D8


@dataclass
class EvalOptions:
    mode: str = "embedding"
    n_target_speakers: int = 8
    n_source_speakers: int = 4
    utterances_per_source: int = 6
    images_per_target: int = 3
    shr_shuffles: int = 500
    sdr_shuffles: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for f in fields(self):
            if f.name != "mode" and int(getattr(self, f.name)) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")


@dataclass
class ConversionRecord:
    source_speaker_id: int
    source_utterance_id: int
    target_speaker_id: int
    target_face_entity_id: int
    extracted_embedding: np.ndarray


@dataclass
class SpeakerProbe:
    """Least-squares map from mean-pooled frames (plus bias) to speaker embeddings."""

    weights: np.ndarray   # (frame_dim + 1, D)
    residual: float

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        pooled = np.asarray(frames).mean(axis=0)
        return np.append(pooled, 1.0) @ self.weights


def fit_probe(corpus: SyntheticCorpus, renderer: ToyDecoder) -> SpeakerProbe:
    utts = np.flatnonzero(np.isin(corpus.voice_speaker, corpus.train_speakers))
    n_features = renderer.w2.shape[0] + 1
    if utts.size < n_features:
        raise ConfigError(f"cannot fit speaker probe: {utts.size} training utterances for "
                          f"{n_features} probe features")
    x = np.stack([np.append(decode(renderer, corpus.content[u], corpus.voice_vectors[u],
                                   corpus.pitch[u]).mean(axis=0), 1.0) for u in utts])
    y = corpus.voice_vectors[utts]
    w, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < n_features:
        raise ConfigError(f"cannot fit speaker probe: design matrix rank {rank} < {n_features}")
    return SpeakerProbe(w, float(np.mean((x @ w - y) ** 2)))


def select_holdout(corpus: SyntheticCorpus, options: EvalOptions, seed: int):
    """Returns (sources, targets) as lists of (speaker_id, [entity indices])."""
    holdout = corpus.holdout_speakers
    if not holdout:
        raise ConfigError("corpus has no held-out speakers")
    need = options.n_target_speakers + options.n_source_speakers
    if len(holdout) < need:
        raise ConfigError(f"{len(holdout)} held-out speakers, evaluation needs {need}")
    targets = holdout[: options.n_target_speakers]
    sources = holdout[options.n_target_speakers: need]
    genders = [corpus.gender(t) for t in targets]
    if min(genders.count(0), genders.count(1)) < 2:
        raise ConfigError("evaluation needs at least two target speakers of each gender")
    rng = SplitMix64(seed).spawn(_SELECT_SALT)

    def pick(pool: np.ndarray, k: int, what: str, spk: int) -> list[int]:
        if pool.size < k:
            raise ConfigError(f"speaker {spk} has {pool.size} {what}, evaluation needs {k}")
        return sorted(int(i) for i in pool[rng.permutation(pool.size)[:k]])

    src = [(s, pick(corpus.utterances_of(s), options.utterances_per_source, "utterances", s)) for s in sources]
    tgt = [(t, pick(corpus.faces_of(t), options.images_per_target, "face images", t)) for t in targets]
    return src, tgt


def convert_all(model: FaceVcModel, corpus: SyntheticCorpus, options: EvalOptions, seed: int,
                probe: SpeakerProbe | None = None) -> list[ConversionRecord]:
    if model.dim != corpus.dim:
        raise ConfigError(f"dimension mismatch: model dim {model.dim}, corpus dim {corpus.dim}")
    if options.mode == "output" and probe is None:
        raise ConfigError("output mode needs a fitted speaker probe")
    sources, targets = select_holdout(corpus, options, seed)
    conds = {f: model.face_condition(corpus.face_vectors[f]) for _, faces in targets for f in faces}
    out = []
    for src_spk, utts in sources:
        for u in utts:
            for tgt_spk, faces in targets:
                for f in faces:
                    cond = conds[f]
                    if options.mode == "output":
                        frames = decode(model.decoder, corpus.content[u], cond, corpus.pitch[u])
                        emb = probe(frames)
                    else:
                        emb = cond.copy()
                    out.append(ConversionRecord(src_spk, int(corpus.voice_entity[u]), tgt_spk,
                                                int(corpus.face_entity[f]), emb))
    return out


# --- metrics -----------------------------------------------------------------

def _unit_rows(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), nx.NORM_FLOOR)


def _cos_matrix(records: list[ConversionRecord]) -> np.ndarray:
    # dot / sqrt(|a|^2 |b|^2) is exactly +-1 for parallel equal-norm rows
    x = np.asarray([r.extracted_embedding for r in records], dtype=np.float64)
    gram = x @ x.T
    sq = np.diag(gram)
    return gram / np.sqrt(np.maximum(np.outer(sq, sq), nx.NORM_FLOOR ** 4))


def _groups(records, key) -> dict:
    g = defaultdict(list)
    for i, r in enumerate(records):
        g[key(r)].append(i)
    return dict(sorted(g.items()))


def _shuffled_mean(records, group_key, admissible, n_shuffles: int, rng: SplitMix64, what: str) -> float:
    groups = {}
    for k, idx in _groups(records, group_key).items():
        if len(idx) < 2:
            log.warning("%s: group %s has %d record(s); excluded", what, k, len(idx))
            continue
        groups[k] = np.array(idx)
    if not groups:
        raise ConfigError(f"{what}: every group has fewer than 2 records")
    cos = _cos_matrix(records)
    vals = []
    for _ in range(n_shuffles):
        for idx in groups.values():
            n = idx.size
            perm = rng.permutation(n)
            keep = (perm != np.arange(n)) & admissible(idx, idx[perm])
            if keep.any():
                vals.append(float(cos[idx[keep], idx[perm][keep]].mean()))
    if not vals:
        raise ConfigError(f"{what}: no admissible pairs")
    return float(np.mean(vals))


def shr(records: list[ConversionRecord], n_shuffles: int = 500, seed: int = 0) -> float:
    """Speaker homogeneity by random matching within each target speaker."""
    face = np.array([r.target_face_entity_id for r in records])
    return _shuffled_mean(records, lambda r: r.target_speaker_id,
                          lambda i, j: face[i] != face[j], n_shuffles,
                          SplitMix64(seed).spawn(_SHR_SALT), "SHR")


def sdr(records: list[ConversionRecord], n_shuffles: int = 100, seed: int = 0) -> float:
    """Speaker diversity by random matching within each source speaker, across targets."""
    tgt = np.array([r.target_speaker_id for r in records])
    if np.unique(tgt).size < 2:
        raise ConfigError("SDR needs at least two target speakers")
    return _shuffled_mean(records, lambda r: r.source_speaker_id,
                          lambda i, j: tgt[i] != tgt[j], n_shuffles,
                          SplitMix64(seed).spawn(_SDR_SALT), "SDR")


def _pairs_within(records, group_key, admissible) -> list[tuple[int, int]]:
    pairs = []
    for idx in _groups(records, group_key).values():
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                if admissible(records[i], records[j]):
                    pairs.append((i, j))
    return pairs


def sho_pairs(records):
    return _pairs_within(records, lambda r: (r.source_utterance_id, r.target_speaker_id),
                         lambda a, b: a.target_face_entity_id != b.target_face_entity_id)


def sdo_pairs(records):
    return _pairs_within(records, lambda r: r.source_utterance_id,
                         lambda a, b: a.target_speaker_id != b.target_speaker_id)


def _pair_mean(records, pairs, what: str) -> float:
    if not pairs:
        raise ConfigError(f"{what}: no admissible pairs")
    cos = _cos_matrix(records)
    i, j = np.array(pairs).T
    return float(cos[i, j].mean())


def sho(records: list[ConversionRecord]) -> float:
    """Same source utterance, same target speaker, different face images."""
    return _pair_mean(records, sho_pairs(records), "SHO")


def sdo(records: list[ConversionRecord]) -> float:
    """Same source utterance, different target speakers."""
    if len({r.target_speaker_id for r in records}) < 2:
        raise ConfigError("SDO needs at least two target speakers")
    return _pair_mean(records, sdo_pairs(records), "SDO")


def gender_centroids(corpus: SyntheticCorpus) -> np.ndarray:
    train = np.isin(corpus.voice_speaker, corpus.train_speakers)
    genders = np.array([corpus.gender(int(s)) for s in corpus.voice_speaker])
    cents = []
    for g in (0, 1):
        sel = train & (genders == g)
        if not sel.any():
            raise ConfigError(f"no training voice embeddings for gender {g}")
        cents.append(corpus.voice_vectors[sel].mean(axis=0))
    return np.stack(cents)


def predict_gender(vectors, centroids: np.ndarray) -> np.ndarray:
    sims = _unit_rows(vectors) @ _unit_rows(centroids).T
    return (sims[:, 1] > sims[:, 0]).astype(int)


def gender_accuracy(records: list[ConversionRecord], corpus: SyntheticCorpus) -> float:
    if not records:
        raise ConfigError("no conversion records")
    pred = predict_gender([r.extracted_embedding for r in records], gender_centroids(corpus))
    truth = np.array([corpus.gender(r.target_speaker_id) for r in records])
    return float(np.mean(pred == truth))


# --- report ------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    n_conversions: int
    shr: float | None = None
    sho: float | None = None
    sdr: float | None = None
    sdo: float | None = None
    ga: float | None = None
    shr_shuffles: int = 500
    sdr_shuffles: int = 100
    per_target: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def per_target_table(records: list[ConversionRecord], corpus: SyntheticCorpus) -> dict:
    table = {}
    for spk in sorted({r.target_speaker_id for r in records}):
        sub = [r for r in records if r.target_speaker_id == spk]
        row = {"gender": corpus.gender(spk), "n_conversions": len(sub)}
        pairs = sho_pairs(sub)
        if pairs:
            row["sho"] = _pair_mean(sub, pairs, "SHO")
        table[str(spk)] = row
    return table


def evaluate(records: list[ConversionRecord], corpus: SyntheticCorpus, options: EvalOptions,
             seed: int, config_echo: dict | None = None) -> EvalReport:
    return EvalReport(
        mode=options.mode,
        n_conversions=len(records),
        shr=shr(records, options.shr_shuffles, seed),
        sho=sho(records),
        sdr=sdr(records, options.sdr_shuffles, seed),
        sdo=sdo(records),
        ga=gender_accuracy(records, corpus),
        shr_shuffles=options.shr_shuffles,
        sdr_shuffles=options.sdr_shuffles,
        per_target=per_target_table(records, corpus),
        config=config_echo or {},
    )


def emit_report(report: EvalReport, path) -> str:
    text = dumps(report.to_dict())
    atomic_write_text(path, text)
    return text


def pair_similarity_rows(records: list[ConversionRecord]) -> list[tuple]:
    """(metric, record_i, record_j, cosine) for every SHO and SDO pair."""
    cos = _cos_matrix(records)
    rows = [("sho", i, j, float(cos[i, j])) for i, j in sho_pairs(records)]
    rows += [("sdo", i, j, float(cos[i, j])) for i, j in sdo_pairs(records)]
    return rows
