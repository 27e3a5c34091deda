"""Memory-based face-voice alignment.

Two slot banks of identical shape: a voice-value bank that both
reconstructs speaker embeddings and supplies every recalled vector, and a
face-key bank that is only ever used for addressing. A face embedding is
mapped into voice space by attending over the face keys and mixing the
voice values with the resulting weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .rng import SplitMix64

VOICE_VALUE = "voice_value"
FACE_KEY = "face_key"


@dataclass
class MemoryBank:
    name: str
    slots: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.float64)
        if self.slots.ndim != 2 or min(self.slots.shape) < 1:
            raise ShapeError(f"{self.name} bank must be an N x D matrix, got shape {self.slots.shape}")
        if not np.all(np.isfinite(self.slots)):
            raise ConfigError(f"{self.name} bank contains non-finite entries")

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]


@dataclass
class MfvaModule:
    voice_value: MemoryBank
    face_key: MemoryBank
    temperature: float = 0.1
    detach_voice_weights: bool = True

    def __post_init__(self):
        if self.voice_value.slots.shape != self.face_key.slots.shape:
            raise ShapeError(
                f"bank shapes differ: voice_value {self.voice_value.slots.shape}, "
                f"face_key {self.face_key.slots.shape}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def n_slots(self) -> int:
        return self.voice_value.n_slots

    @property
    def dim(self) -> int:
        return self.voice_value.dim

    def params(self) -> dict[str, np.ndarray]:
        return {VOICE_VALUE: self.voice_value.slots, FACE_KEY: self.face_key.slots}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params().items()}


@dataclass
class RecallResult:
    weights: np.ndarray
    embedding: np.ndarray
    # forward intermediates kept for backpropagation
    query: np.ndarray = field(repr=False, default=None)
    scores: np.ndarray = field(repr=False, default=None)


def init_module(n_slots: int, dim: int, seed: int, temperature: float = 0.1,
                detach_voice_weights: bool = True) -> MfvaModule:
    """Both banks drawn i.i.d. N(0, 1/dim), voice bank first."""
    if n_slots < 1 or dim < 1:
        raise ConfigError(f"n_slots and dim must be >= 1, got n_slots={n_slots} dim={dim}")
    rng = SplitMix64(seed)
    scale = 1.0 / np.sqrt(dim)
    voice = rng.normal((n_slots, dim)) * scale
    face = rng.normal((n_slots, dim)) * scale
    return MfvaModule(MemoryBank(VOICE_VALUE, voice), MemoryBank(FACE_KEY, face),
                      temperature, detach_voice_weights)


def _check_query(q, module: MfvaModule, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (module.dim,):
        raise ShapeError(f"{name} has dimension {q.shape[-1] if q.ndim else 0}, module dimension is {module.dim}")
    return q


def attention_weights(query, bank: MemoryBank, temperature: float) -> np.ndarray:
    q = nx.as_vector(query, "query")
    if q.size != bank.dim:
        raise ShapeError(f"query has dimension {q.size}, {bank.name} bank has dimension {bank.dim}")
    return nx.softmax(nx.cosine_scores(q, bank.slots), temperature)


def _recall(query: np.ndarray, keys: np.ndarray, values: np.ndarray, temperature: float) -> RecallResult:
    scores = nx.cosine_scores(query, keys)
    w = nx.softmax(scores, temperature)
    return RecallResult(w, values.T @ w, query, scores)


def recall_speaker(s, module: MfvaModule) -> RecallResult:
    s = _check_query(s, module, "speaker embedding")
    return _recall(s, module.voice_value.slots, module.voice_value.slots, module.temperature)


def recall_face(h, module: MfvaModule) -> RecallResult:
    h = _check_query(h, module, "face embedding")
    return _recall(h, module.face_key.slots, module.voice_value.slots, module.temperature)


def recall_backward(result: RecallResult, grad_embedding: np.ndarray, module: MfvaModule,
                    key_name: str, grads: dict[str, np.ndarray]) -> None:
    """Accumulate into ``grads`` the gradient of ``grad_embedding . result.embedding``.

    ``key_name`` names the bank that produced the weights.
    """
    values = module.voice_value.slots
    keys = module.params()[key_name]
    grads[VOICE_VALUE] += np.outer(result.weights, grad_embedding)
    g_w = values @ grad_embedding
    _weights_backward(result, g_w, keys, module.temperature, grads[key_name])


def _weights_backward(result: RecallResult, grad_weights: np.ndarray, keys: np.ndarray,
                      temperature: float, out: np.ndarray) -> None:
    g_scores = nx.softmax_backward(result.weights, grad_weights, temperature)
    _, g_keys = nx.cosine_scores_backward(result.query, keys, result.scores, g_scores)
    out += g_keys


def store_loss(s, module: MfvaModule, grads: dict[str, np.ndarray] | None = None) -> float:
    """MSE between ``s`` and its reconstruction from the voice bank.

    When ``grads`` is given, the gradient w.r.t. the voice bank (through
    both the weights and the value mix) is accumulated into it.
    """
    r = recall_speaker(s, module)
    loss = nx.mse_loss(r.embedding, r.query)
    if grads is not None:
        recall_backward(r, nx.mse_grad(r.embedding, r.query), module, VOICE_VALUE, grads)
    return loss


def align_loss(s, h, module: MfvaModule, grads: dict[str, np.ndarray] | None = None) -> float:
    """KL(w_voice || w_face).

    With ``module.detach_voice_weights`` the voice-side distribution is a
    constant target and only the face bank receives gradient.
    """
    rv = recall_speaker(s, module)
    rf = recall_face(h, module)
    loss = nx.kl_divergence(rv.weights, rf.weights)
    if grads is not None:
        tau = module.temperature
        # softmax + KL collapse to (q - p) w.r.t. the face logits
        g_scores = (rf.weights - rv.weights) / tau
        _, g_keys = nx.cosine_scores_backward(rf.query, module.face_key.slots, rf.scores, g_scores)
        grads[FACE_KEY] += g_keys
        if not module.detach_voice_weights:
            p, q = rv.weights, rf.weights
            with np.errstate(divide="ignore", invalid="ignore"):
                g_p = np.where(p > 0, np.log(p) - np.log(q) + 1.0, 0.0)
            _weights_backward(rv, g_p, module.voice_value.slots, tau, grads[VOICE_VALUE])
    return loss


def interpolate_recall(w_a, w_b, alpha: float, module: MfvaModule) -> RecallResult:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != (module.n_slots,) or w_b.shape != (module.n_slots,):
        raise ShapeError(f"weight vectors must have length {module.n_slots}, got {w_a.shape} and {w_b.shape}")
    if alpha == 0.0:
        w = w_a.copy()
    elif alpha == 1.0:
        w = w_b.copy()
    else:
        w = (1.0 - alpha) * w_a + alpha * w_b
    return RecallResult(w, module.voice_value.slots.T @ w)


def module_to_dict(module: MfvaModule) -> dict:
    return {
        "n_slots": module.n_slots,
        "dim": module.dim,
        "temperature": module.temperature,
        "detach_voice_weights": module.detach_voice_weights,
        "voice_value": module.voice_value.slots.tolist(),
        "face_key": module.face_key.slots.tolist(),
    }


def module_from_dict(doc: dict) -> MfvaModule:
    try:
        voice = np.array(doc["voice_value"], dtype=np.float64)
        face = np.array(doc["face_key"], dtype=np.float64)
        module = MfvaModule(MemoryBank(VOICE_VALUE, voice), MemoryBank(FACE_KEY, face),
                            float(doc["temperature"]), bool(doc.get("detach_voice_weights", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed MFVA document: {exc}") from exc
    if module.n_slots != doc.get("n_slots", module.n_slots) or module.dim != doc.get("dim", module.dim):
        raise ConfigError("MFVA document n_slots/dim disagree with bank shapes")
    return module
