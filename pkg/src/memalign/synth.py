"""Synthetic paired face/voice corpus, embedding archive format, 2-D PCA.

Every speaker has a latent identity ``z`` (dimension k) whose first
coordinate is the gender sign. Face and voice embeddings are two fixed
random linear views of ``z`` plus isotropic noise. This shared-latent
linear relation is a modelling assumption, not a measured property of
real face/voice encoders.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ArchiveError, ConfigError
from .fileio import atomic_write_bytes, read_bytes
from .rng import SplitMix64

_MIX_SALT = 0x51A7
_SPEAKER_SALT = 0x5EED0000


@dataclass(frozen=True)
class CorpusSpec:
    n_train_speakers: int = 200
    n_holdout_speakers: int = 12
    images_per_speaker: int = 20
    utterances_per_speaker: int = 20
    latent_dim: int = 8
    embedding_dim: int = 16
    face_noise: float = 0.05
    voice_noise: float = 0.05
    frames: int = 32
    content_dim: int = 8
    seed: int = 1

    def __post_init__(self):
        for name in ("n_train_speakers", "n_holdout_speakers", "images_per_speaker",
                     "utterances_per_speaker", "latent_dim", "embedding_dim", "content_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.frames, (int, np.integer)) or self.frames < 2:
            raise ConfigError(f"frames must be an integer >= 2, got {self.frames!r}")
        for name in ("face_noise", "voice_noise"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite number >= 0, got {value!r}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


class Modality(enum.IntEnum):
    VOICE = 0
    FACE = 1


@dataclass(frozen=True)
class SpeakerLatent:
    speaker_id: int
    z: np.ndarray
    gender: int


@dataclass
class EmbeddingRecord:
    speaker_id: int
    entity_id: int
    modality: Modality
    attribute: int
    vector: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.speaker_id == other.speaker_id and self.entity_id == other.entity_id
                and self.modality == other.modality and self.attribute == other.attribute
                and np.array_equal(self.vector, other.vector))


@dataclass
class UtteranceFeatures:
    speaker_id: int
    utterance_id: int
    content: np.ndarray   # (T, content_dim)
    pitch: np.ndarray     # (T,), z-normalised


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    speakers: list[SpeakerLatent]
    face_mix: np.ndarray
    voice_mix: np.ndarray
    face_vectors: np.ndarray
    face_speaker: np.ndarray
    face_entity: np.ndarray
    voice_vectors: np.ndarray
    voice_speaker: np.ndarray
    voice_entity: np.ndarray
    content: np.ndarray
    pitch: np.ndarray

    @property
    def dim(self) -> int:
        return self.face_vectors.shape[1]

    @property
    def train_speakers(self) -> list[int]:
        return [s.speaker_id for s in self.speakers[: self.spec.n_train_speakers]]

    @property
    def holdout_speakers(self) -> list[int]:
        return [s.speaker_id for s in self.speakers[self.spec.n_train_speakers:]]

    def gender(self, speaker_id: int) -> int:
        return self.speakers[speaker_id].gender

    def faces_of(self, speaker_id: int) -> np.ndarray:
        return np.flatnonzero(self.face_speaker == speaker_id)

    def utterances_of(self, speaker_id: int) -> np.ndarray:
        return np.flatnonzero(self.voice_speaker == speaker_id)

    def face_index(self, entity_id: int) -> int:
        hits = np.flatnonzero(self.face_entity == entity_id)
        if hits.size == 0:
            raise ConfigError(f"unknown face entity id {entity_id}")
        return int(hits[0])

    def utterance(self, index: int) -> UtteranceFeatures:
        return UtteranceFeatures(int(self.voice_speaker[index]), int(self.voice_entity[index]),
                                 self.content[index], self.pitch[index])

    def voice_centroid(self, speaker_id: int) -> np.ndarray:
        return self.voice_vectors[self.utterances_of(speaker_id)].mean(axis=0)

    def records(self, modality: Modality) -> list[EmbeddingRecord]:
        if modality == Modality.FACE:
            vecs, spk, ent = self.face_vectors, self.face_speaker, self.face_entity
        else:
            vecs, spk, ent = self.voice_vectors, self.voice_speaker, self.voice_entity
        return [EmbeddingRecord(int(s), int(e), Modality(modality), self.gender(int(s)), v.copy())
                for v, s, e in zip(vecs, spk, ent)]

    def replace_embeddings(self, records: list[EmbeddingRecord], modality: Modality) -> None:
        """Swap in externally supplied vectors keyed by (speaker_id, entity_id)."""
        if modality == Modality.FACE:
            spk, ent = self.face_speaker, self.face_entity
        else:
            spk, ent = self.voice_speaker, self.voice_entity
        lookup = {(r.speaker_id, r.entity_id): r for r in records}
        expected = {(int(s), int(e)) for s, e in zip(spk, ent)}
        if set(lookup) != expected or len(records) != len(expected):
            raise ConfigError(
                f"{modality.name.lower()} archive records do not match the corpus entities "
                f"({len(records)} records, {len(expected)} expected)")
        dims = {r.vector.size for r in records}
        if len(dims) != 1:
            raise ConfigError(f"{modality.name.lower()} archive mixes dimensions {sorted(dims)}")
        vecs = np.stack([np.asarray(lookup[(int(s), int(e))].vector, dtype=np.float64)
                         for s, e in zip(spk, ent)])
        if modality == Modality.FACE:
            self.face_vectors = vecs
        else:
            self.voice_vectors = vecs


def _mixing_map(rng: SplitMix64, dim: int, k: int) -> np.ndarray:
    """Random D x k map with orthogonal columns of norm sqrt(D/k)."""
    raw = rng.normal((dim, k))
    if dim < k:
        return raw / np.sqrt(k)
    q, r = np.linalg.qr(raw)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * np.sqrt(dim / k)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate_corpus(spec: CorpusSpec) -> SyntheticCorpus:
    root = SplitMix64(spec.seed)
    mix_rng = root.spawn(_MIX_SALT)
    d, k = spec.embedding_dim, spec.latent_dim
    w_face = _mixing_map(mix_rng, d, k)
    w_voice = _mixing_map(mix_rng, d, k)

    n_total = spec.n_train_speakers + spec.n_holdout_speakers
    speakers, faces, voices, contents, pitches = [], [], [], [], []
    for sid in range(n_total):
        local = sid if sid < spec.n_train_speakers else sid - spec.n_train_speakers
        gender = local % 2
        rng = root.spawn(_SPEAKER_SALT + sid)
        z = np.empty(k)
        z[0] = 1.0 if gender == 1 else -1.0
        z[1:] = rng.normal((k - 1,))
        speakers.append(SpeakerLatent(sid, z, gender))
        face_noise = rng.normal((spec.images_per_speaker, d))
        voice_noise = rng.normal((spec.utterances_per_speaker, d))
        faces.append(_f32(w_face @ z + spec.face_noise * face_noise))
        voices.append(_f32(w_voice @ z + spec.voice_noise * voice_noise))
        contents.append(rng.normal((spec.utterances_per_speaker, spec.frames, spec.content_dim)))
        raw = rng.normal((spec.utterances_per_speaker, spec.frames))
        raw -= raw.mean(axis=1, keepdims=True)
        pitches.append(raw / raw.std(axis=1, keepdims=True))

    n_img, n_utt = spec.images_per_speaker, spec.utterances_per_speaker
    ids = np.arange(n_total)
    return SyntheticCorpus(
        spec=spec,
        speakers=speakers,
        face_mix=w_face,
        voice_mix=w_voice,
        face_vectors=np.concatenate(faces),
        face_speaker=np.repeat(ids, n_img),
        face_entity=np.arange(n_total * n_img),
        voice_vectors=np.concatenate(voices),
        voice_speaker=np.repeat(ids, n_utt),
        voice_entity=np.arange(n_total * n_utt),
        content=np.concatenate(contents),
        pitch=np.concatenate(pitches),
    )


# --- embedding archive -------------------------------------------------------

MAGIC = b"XMEB"
VERSION = 1
HEADER = struct.Struct("<4sIII")
RECORD_HEAD = struct.Struct("<IIBBH")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("speaker", "<u4"), ("entity", "<u4"), ("modality", "u1"),
                     ("attribute", "u1"), ("reserved", "<u2"), ("vec", "<f4", (dim,))])


def encode_archive(records: list[EmbeddingRecord], dim: int | None = None) -> bytes:
    dims = {np.asarray(r.vector).size for r in records}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise ArchiveError(f"records disagree on dimension: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    body = np.zeros(len(records), dtype=_record_dtype(dim))
    for i, r in enumerate(records):
        body[i] = (r.speaker_id, r.entity_id, int(r.modality), r.attribute, 0,
                   np.asarray(r.vector, dtype=np.float32))
    return HEADER.pack(MAGIC, VERSION, len(records), dim) + body.tobytes()


def decode_archive(data: bytes, expected_dim: int | None = None) -> list[EmbeddingRecord]:
    if len(data) < HEADER.size:
        raise ArchiveError(f"truncated header: {len(data)} of {HEADER.size} bytes", offset=len(data))
    magic, version, count, dim = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if expected_dim is not None and dim != expected_dim:
        raise ArchiveError(f"dimension mismatch: archive has {dim}, expected {expected_dim}", offset=12)
    if count and dim == 0:
        raise ArchiveError("dimension must be >= 1 when records are present", offset=12)
    rec_size = RECORD_HEAD.size + 4 * dim
    need = HEADER.size + count * rec_size
    if len(data) < need:
        complete = (len(data) - HEADER.size) // rec_size
        raise ArchiveError(
            f"truncated: header declares {count} records of {rec_size} bytes, "
            f"only {complete} complete", offset=HEADER.size + complete * rec_size)
    if len(data) > need:
        raise ArchiveError(f"{len(data) - need} trailing bytes after last record", offset=need)
    body = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=HEADER.size)
    out = []
    for i, row in enumerate(body):
        at = HEADER.size + i * rec_size
        if row["modality"] > 1:
            raise ArchiveError(f"record {i}: invalid modality {row['modality']}", offset=at + 8)
        if row["attribute"] > 1:
            raise ArchiveError(f"record {i}: invalid attribute {row['attribute']}", offset=at + 9)
        if row["reserved"] != 0:
            raise ArchiveError(f"record {i}: reserved field is {row['reserved']}, expected 0", offset=at + 10)
        vec = row["vec"].astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise ArchiveError(f"record {i}: non-finite vector entry", offset=at + RECORD_HEAD.size)
        out.append(EmbeddingRecord(int(row["speaker"]), int(row["entity"]), Modality(int(row["modality"])),
                                   int(row["attribute"]), vec))
    return out


def write_archive(records: list[EmbeddingRecord], path, dim: int | None = None) -> None:
    atomic_write_bytes(path, encode_archive(records, dim))


def read_archive(path, expected_dim: int | None = None) -> list[EmbeddingRecord]:
    try:
        return decode_archive(read_bytes(path), expected_dim)
    except ArchiveError as exc:
        raise ArchiveError(f"{Path(path)}: {exc}") from exc


# --- 2-D projection ----------------------------------------------------------

def _leading_direction(cov: np.ndarray, rng: SplitMix64, tol: float, max_iter: int) -> np.ndarray:
    v = rng.normal((cov.shape[0],))
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return np.zeros_like(v)
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    nz = np.flatnonzero(np.abs(v) > 1e-15)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def pca_project_2d(vectors, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Project onto the top two principal directions (power iteration + deflation)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError(f"pca_project_2d needs at least 2 vectors of a shared dimension, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    rng = SplitMix64(0x9CA)
    dirs = []
    for _ in range(min(2, x.shape[1])):
        v = _leading_direction(cov, rng, tol, max_iter)
        dirs.append(v)
        cov = cov - (v @ cov @ v) * np.outer(v, v)
    proj = xc @ np.stack(dirs, axis=1)
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 1))])
    return proj
