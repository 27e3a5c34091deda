"""Toy decoder, mixed-supervision losses, Adam with warmup/step decay, and
the two training phases (decoder pretraining, then face-conditioned
training with the memory in the loop).
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import mfva
from . import numerics as nx
from .errors import ConfigError, NumericError, ShapeError
from .rng import SplitMix64
from .synth import SyntheticCorpus

log = logging.getLogger(__name__)

RENDERER_SALT = 0xDEC0DE
_PRETRAIN_SALT = 0x9E7
_FIT_SALT = 0xF17
_INIT_SALT = 0x1A17


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 0.2
    steps: int = 2000
    batch_pairs: int = 8
    peak_lr: float = 1e-2
    lr_floor: float = 1e-6
    warmup_steps: int = 300
    decay_points: tuple[int, ...] = (800, 1200, 1600)
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    no_inter: bool = False
    no_mfva: bool = False
    no_pretrain: bool = False
    temperature: float = 0.1
    n_slots: int = 96
    detach_voice_weights: bool = True
    inter_updates_decoder: bool = False
    decoder_hidden: int = 32
    frame_dim: int = 20
    pretrain_steps: int = 2000
    pretrain_batch: int = 8
    pretrain_peak_lr: float = 1e-3
    pretrain_warmup_steps: int = 300
    pretrain_decay_points: tuple[int, ...] = (600, 800, 1000)

    def __post_init__(self):
        self.decay_points = tuple(int(p) for p in self.decay_points)
        self.pretrain_decay_points = tuple(int(p) for p in self.pretrain_decay_points)
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("steps", "pretrain_steps", "warmup_steps", "pretrain_warmup_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_pairs", "pretrain_batch", "n_slots", "decoder_hidden", "frame_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("peak_lr", "pretrain_peak_lr", "temperature", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.lr_floor:
            raise ConfigError(f"lr_floor must be >= 0, got {self.lr_floor}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        d["pretrain_decay_points"] = list(self.pretrain_decay_points)
        return d


# --- decoder -----------------------------------------------------------------

@dataclass
class ToyDecoder:
    """Per-frame ``W2 tanh(W1 [c_t, cond, f_t] + b1) + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    content_dim: int
    cond_dim: int

    def params(self) -> dict[str, np.ndarray]:
        return {"dec_w1": self.w1, "dec_b1": self.b1, "dec_w2": self.w2, "dec_b2": self.b2}

    def copy(self) -> "ToyDecoder":
        return ToyDecoder(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                          self.content_dim, self.cond_dim)

    def to_dict(self) -> dict:
        return {"content_dim": self.content_dim, "cond_dim": self.cond_dim,
                "w1": self.w1.tolist(), "b1": self.b1.tolist(),
                "w2": self.w2.tolist(), "b2": self.b2.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyDecoder":
        try:
            dec = cls(*(np.array(doc[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")),
                      int(doc["content_dim"]), int(doc["cond_dim"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed decoder document: {exc}") from exc
        if dec.w1.shape != (dec.b1.size, dec.content_dim + dec.cond_dim + 1) or dec.w2.shape != (dec.b2.size, dec.b1.size):
            raise ConfigError("decoder document has inconsistent parameter shapes")
        return dec


def init_decoder(content_dim: int, cond_dim: int, hidden: int, out_dim: int, seed: int) -> ToyDecoder:
    """Weights N(0, 1/fan_in), zero biases."""
    rng = SplitMix64(seed)
    fan_in = content_dim + cond_dim + 1
    w1 = rng.normal((hidden, fan_in)) / np.sqrt(fan_in)
    w2 = rng.normal((out_dim, hidden)) / np.sqrt(hidden)
    return ToyDecoder(w1, np.zeros(hidden), w2, np.zeros(out_dim), content_dim, cond_dim)


def ground_truth_renderer(corpus: SyntheticCorpus, hidden: int, out_dim: int) -> ToyDecoder:
    """Frozen random decoder that produces the target frames for every utterance."""
    spec = corpus.spec
    return init_decoder(spec.content_dim, corpus.dim, hidden, out_dim, spec.seed ^ RENDERER_SALT)


@dataclass
class _DecodeCache:
    inputs: np.ndarray
    hidden: np.ndarray


def _decode(dec: ToyDecoder, content, cond, pitch) -> tuple[np.ndarray, _DecodeCache]:
    content = np.asarray(content, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if content.ndim != 2 or pitch.ndim != 1 or content.shape[0] != pitch.shape[0]:
        raise ShapeError(f"content has {content.shape[0] if content.ndim else 0} frames, pitch has "
                         f"{pitch.shape[0] if pitch.ndim else 0}; they must match")
    if content.shape[1] != dec.content_dim or cond.shape != (dec.cond_dim,):
        raise ShapeError(f"decoder expects content dim {dec.content_dim} and conditioning dim {dec.cond_dim}, "
                         f"got {content.shape[1]} and {cond.shape[-1] if cond.ndim else 0}")
    t = content.shape[0]
    x = np.empty((t, dec.w1.shape[1]))
    x[:, : dec.content_dim] = content
    x[:, dec.content_dim: dec.content_dim + dec.cond_dim] = cond
    x[:, -1] = pitch
    z = np.tanh(x @ dec.w1.T + dec.b1)
    return z @ dec.w2.T + dec.b2, _DecodeCache(x, z)


def decode(dec: ToyDecoder, content, cond, pitch) -> np.ndarray:
    return _decode(dec, content, cond, pitch)[0]


def _decode_backward(dec: ToyDecoder, cache: _DecodeCache, grad_out: np.ndarray,
                     want_params: bool = True) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Returns (parameter grads, grad w.r.t. the conditioning vector)."""
    g_z = grad_out @ dec.w2
    g_a = g_z * (1.0 - cache.hidden ** 2)
    g_x = g_a @ dec.w1
    g_cond = g_x[:, dec.content_dim: dec.content_dim + dec.cond_dim].sum(axis=0)
    grads = {}
    if want_params:
        grads = {"dec_w1": g_a.T @ cache.inputs, "dec_b1": g_a.sum(axis=0),
                 "dec_w2": grad_out.T @ cache.hidden, "dec_b2": grad_out.sum(axis=0)}
    return grads, g_cond


def reconstruction_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """mse + l1 and its gradient w.r.t. ``pred``."""
    return (nx.mse_loss(pred, target) + nx.l1_loss(pred, target),
            nx.mse_grad(pred, target) + nx.l1_grad(pred, target))


# --- face-conditioned model --------------------------------------------------

@dataclass
class FaceVcModel:
    """Decoder plus the face-to-conditioning path.

    The path is the memory module, or with the ``no_mfva`` ablation a plain
    affine projection ``proj_w @ h + proj_b``.
    """

    decoder: ToyDecoder
    module: mfva.MfvaModule | None = None
    proj_w: np.ndarray | None = None
    proj_b: np.ndarray | None = None

    def __post_init__(self):
        if (self.module is None) == (self.proj_w is None):
            raise ConfigError("model needs exactly one of an MFVA module or an affine projection")
        if self.dim != self.decoder.cond_dim:
            raise ShapeError(f"conditioning dimension {self.dim} does not match decoder {self.decoder.cond_dim}")

    @property
    def uses_memory(self) -> bool:
        return self.module is not None

    @property
    def dim(self) -> int:
        return self.module.dim if self.module is not None else self.proj_w.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = dict(self.module.params()) if self.module is not None else {"proj_w": self.proj_w, "proj_b": self.proj_b}
        p.update(self.decoder.params())
        return p

    def face_condition(self, h) -> np.ndarray:
        return self._condition(h)[0]

    def _condition(self, h):
        if self.module is not None:
            r = mfva.recall_face(h, self.module)
            return r.embedding, r
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.proj_w.shape[1],):
            raise ShapeError(f"face embedding has dimension {h.shape[-1] if h.ndim else 0}, model dimension is {self.dim}")
        return self.proj_w @ h + self.proj_b, h

    def _condition_backward(self, cache, grad_cond: np.ndarray, grads: dict) -> None:
        if self.module is not None:
            mfva.recall_backward(cache, grad_cond, self.module, mfva.FACE_KEY, grads)
        else:
            grads["proj_w"] += np.outer(grad_cond, cache)
            grads["proj_b"] += grad_cond

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params().items()}


def init_projection(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = SplitMix64(seed)
    return rng.normal((dim, dim)) / np.sqrt(dim), np.zeros(dim)


def intra_loss(model: FaceVcModel, content, pitch, target, h, grads: dict | None = None) -> float:
    """Reconstruct speaker A's frames conditioned on A's recalled face embedding."""
    cond, ccache = model._condition(h)
    pred, dcache = _decode(model.decoder, content, cond, pitch)
    loss, g_pred = reconstruction_loss(pred, np.asarray(target, dtype=np.float64))
    if grads is not None:
        g_params, g_cond = _decode_backward(model.decoder, dcache, g_pred)
        for k, v in g_params.items():
            grads[k] += v
        model._condition_backward(ccache, g_cond, grads)
    return loss


def inter_loss(model: FaceVcModel, content, pitch, s_target, h_target, grads: dict | None = None,
               updates_decoder: bool = False) -> float:
    """Match the conversion driven by B's recalled face to the one driven by B's voice.

    The voice-driven conversion is a constant target. Unless
    ``updates_decoder`` is set, the decoder receives no gradient from this
    term.
    """
    x_speech = decode(model.decoder, content, s_target, pitch)
    cond, ccache = model._condition(h_target)
    x_face, dcache = _decode(model.decoder, content, cond, pitch)
    loss, g_pred = reconstruction_loss(x_face, x_speech)
    if grads is not None:
        g_params, g_cond = _decode_backward(model.decoder, dcache, g_pred, want_params=updates_decoder)
        for k, v in g_params.items():
            grads[k] += v
        model._condition_backward(ccache, g_cond, grads)
    return loss


@dataclass(frozen=True)
class PairBatch:
    """Speaker A (intra + inter source) and speaker B (inter target).

    Indices point into the corpus utterance and face arrays.
    """

    utt_a: int
    face_a: int
    utt_b: int
    face_b: int


@dataclass
class LossBreakdown:
    total: float = 0.0
    store: float = 0.0
    align: float = 0.0
    intra: float = 0.0
    inter: float = 0.0

    def __iadd__(self, other):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def scaled(self, c: float) -> "LossBreakdown":
        return LossBreakdown(*(getattr(self, f.name) * c for f in fields(self)))


class TrainingData:
    """Corpus view plus cached ground-truth target frames."""

    def __init__(self, corpus: SyntheticCorpus, renderer: ToyDecoder):
        self.corpus = corpus
        self.renderer = renderer
        self._targets: dict[int, np.ndarray] = {}

    def target(self, utt: int) -> np.ndarray:
        x = self._targets.get(utt)
        if x is None:
            c = self.corpus
            x = decode(self.renderer, c.content[utt], c.voice_vectors[utt], c.pitch[utt])
            self._targets[utt] = x
        return x


def _axpy(dst: dict, src: dict, c: float) -> None:
    for k, v in src.items():
        dst[k] += c * v


def total_loss(batch: PairBatch, model: FaceVcModel, data: TrainingData, config: TrainConfig,
               grads: dict | None = None) -> LossBreakdown:
    """Weighted sum lambda1*store + lambda2*align + lambda3*inter + intra.

    Store and align are averaged over speakers A and B.
    """
    c = data.corpus
    if c.voice_speaker[batch.utt_a] == c.voice_speaker[batch.utt_b]:
        raise ConfigError("inter-speaker pair must use two distinct speakers")
    s_a, s_b = c.voice_vectors[batch.utt_a], c.voice_vectors[batch.utt_b]
    h_a, h_b = c.face_vectors[batch.face_a], c.face_vectors[batch.face_b]
    out = LossBreakdown()
    part = None if grads is None else model.zero_grads()

    if model.uses_memory:
        for s, h in ((s_a, h_a), (s_b, h_b)):
            out.store += 0.5 * mfva.store_loss(s, model.module, part)
        if part is not None:
            _axpy(grads, part, 0.5 * config.lambda1)
            part = model.zero_grads()
        for s, h in ((s_a, h_a), (s_b, h_b)):
            out.align += 0.5 * mfva.align_loss(s, h, model.module, part)
        if part is not None:
            _axpy(grads, part, 0.5 * config.lambda2)
            part = model.zero_grads()

    out.intra = intra_loss(model, c.content[batch.utt_a], c.pitch[batch.utt_a], data.target(batch.utt_a), h_a, grads)

    if not config.no_inter:
        out.inter = inter_loss(model, c.content[batch.utt_a], c.pitch[batch.utt_a], s_b, h_b, part,
                               updates_decoder=config.inter_updates_decoder)
        if part is not None:
            _axpy(grads, part, config.lambda3)

    out.total = config.lambda1 * out.store + config.lambda2 * out.align + config.lambda3 * out.inter + out.intra
    return out


# --- optimisation ------------------------------------------------------------

def learning_rate(step: int, peak: float, warmup: int, decay_points, floor: float = 1e-6,
                  factor: float = 0.5) -> float:
    """Linear warmup from ``floor`` to ``peak``, then ``factor`` at each decay point reached."""
    if step < warmup:
        return floor + (peak - floor) * step / warmup
    n_decays = sum(1 for p in decay_points if step >= p)
    return peak * factor ** n_decays


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _threads() -> int:
    raw = os.environ.get("MEMALIGN_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# --- phases ------------------------------------------------------------------

@dataclass
class PretrainResult:
    decoder: ToyDecoder
    history: list[float]
    initial_heldout_loss: float
    final_heldout_loss: float


def heldout_reconstruction(dec: ToyDecoder, data: TrainingData, utts) -> float:
    c = data.corpus
    losses = [reconstruction_loss(decode(dec, c.content[u], c.voice_vectors[u], c.pitch[u]), data.target(u))[0]
              for u in utts]
    return float(np.mean(losses))


def pretrain(corpus: SyntheticCorpus, config: TrainConfig, decoder: ToyDecoder | None = None,
             renderer: ToyDecoder | None = None) -> PretrainResult:
    """Fit the decoder to ground-truth frames conditioned on true speaker embeddings."""
    train_utts = np.flatnonzero(np.isin(corpus.voice_speaker, corpus.train_speakers))
    if train_utts.size == 0:
        raise ConfigError("training corpus has no utterances")
    if renderer is None:
        renderer = ground_truth_renderer(corpus, config.decoder_hidden, config.frame_dim)
    data = TrainingData(corpus, renderer)
    dec = decoder.copy() if decoder is not None else init_decoder(
        corpus.spec.content_dim, corpus.dim, config.decoder_hidden, config.frame_dim,
        SplitMix64(config.seed).spawn(_INIT_SALT).seed)
    heldout = [int(corpus.utterances_of(s)[0]) for s in corpus.holdout_speakers]
    initial = heldout_reconstruction(dec, data, heldout) if heldout else float("nan")

    rng = SplitMix64(config.seed).spawn(_PRETRAIN_SALT)
    opt = Adam(dec.params(), config.beta1, config.beta2, config.adam_eps)
    history = []
    for step in range(config.pretrain_steps):
        picks = train_utts[rng.integers(train_utts.size, config.pretrain_batch)]
        grads = {k: np.zeros_like(v) for k, v in dec.params().items()}
        total = 0.0
        for u in picks:
            pred, cache = _decode(dec, corpus.content[u], corpus.voice_vectors[u], corpus.pitch[u])
            loss, g_pred = reconstruction_loss(pred, data.target(u))
            g, _ = _decode_backward(dec, cache, g_pred)
            _axpy(grads, g, 1.0 / len(picks))
            total += loss / len(picks)
        if not np.isfinite(total):
            raise NumericError(f"pretraining loss became non-finite at step {step}")
        history.append(total)
        lr = learning_rate(step, config.pretrain_peak_lr, config.pretrain_warmup_steps,
                           config.pretrain_decay_points, config.lr_floor, config.decay_factor)
        opt.step(grads, lr)
    final = heldout_reconstruction(dec, data, heldout) if heldout else float("nan")
    return PretrainResult(dec, history, initial, final)


@dataclass
class TrainedModel:
    model: FaceVcModel
    config: TrainConfig
    metadata: dict = field(default_factory=dict)
    history: list[LossBreakdown] = field(default_factory=list)


def init_model(corpus: SyntheticCorpus, config: TrainConfig, decoder: ToyDecoder | None) -> FaceVcModel:
    root = SplitMix64(config.seed).spawn(_INIT_SALT)
    if decoder is None:
        decoder = init_decoder(corpus.spec.content_dim, corpus.dim, config.decoder_hidden,
                               config.frame_dim, root.seed)
    else:
        decoder = decoder.copy()
    if decoder.cond_dim != corpus.dim:
        raise ShapeError(f"decoder conditioning dimension {decoder.cond_dim} does not match corpus dimension {corpus.dim}")
    if config.no_mfva:
        w, b = init_projection(corpus.dim, root.spawn(2).seed)
        return FaceVcModel(decoder, proj_w=w, proj_b=b)
    module = mfva.init_module(config.n_slots, corpus.dim, root.spawn(1).seed,
                              config.temperature, config.detach_voice_weights)
    return FaceVcModel(decoder, module=module)


def sample_batch(corpus: SyntheticCorpus, speakers: list[int], n_pairs: int, rng: SplitMix64) -> list[PairBatch]:
    n = len(speakers)
    max_pairs = n * (n - 1)
    if n < 2:
        raise ConfigError("training needs at least two speakers")
    n_pairs = min(n_pairs, max_pairs)
    seen, out = set(), []
    while len(out) < n_pairs:
        a = int(rng.integers(n))
        b = int(rng.integers(n - 1))
        b = b + 1 if b >= a else b
        if (a, b) in seen:
            continue
        seen.add((a, b))
        sa, sb = speakers[a], speakers[b]
        ua, ub = corpus.utterances_of(sa), corpus.utterances_of(sb)
        fa, fb = corpus.faces_of(sa), corpus.faces_of(sb)
        out.append(PairBatch(int(ua[rng.integers(ua.size)]), int(fa[rng.integers(fa.size)]),
                             int(ub[rng.integers(ub.size)]), int(fb[rng.integers(fb.size)])))
    return out


def fit(corpus: SyntheticCorpus, config: TrainConfig, decoder: ToyDecoder | None = None,
        renderer: ToyDecoder | None = None,
        on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainedModel:
    """Face-conditioned training with mixed supervision."""
    speakers = corpus.train_speakers
    if not speakers:
        raise ConfigError("training corpus is empty")
    if decoder is None and not config.no_pretrain:
        raise ConfigError("a pretrained decoder is required unless no_pretrain is set")
    if renderer is None:
        renderer = ground_truth_renderer(corpus, config.decoder_hidden, config.frame_dim)
    data = TrainingData(corpus, renderer)
    model = init_model(corpus, config, None if config.no_pretrain else decoder)
    opt = Adam(model.params(), config.beta1, config.beta2, config.adam_eps)
    rng = SplitMix64(config.seed).spawn(_FIT_SALT)
    n_threads = _threads()
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None

    def one(batch):
        g = model.zero_grads()
        return total_loss(batch, model, data, config, g), g

    history: list[LossBreakdown] = []
    try:
        for step in range(config.steps):
            batches = sample_batch(corpus, speakers, config.batch_pairs, rng)
            results = list(pool.map(one, batches)) if pool else [one(b) for b in batches]
            grads = model.zero_grads()
            losses = LossBreakdown()
            w = 1.0 / len(results)
            for lb, g in results:  # fixed reduction order
                losses += lb.scaled(w)
                _axpy(grads, g, w)
            if not np.isfinite(losses.total):
                raise NumericError(f"training loss became non-finite at step {step}")
            history.append(losses)
            if on_step is not None:
                on_step(step, losses)
            lr = learning_rate(step, config.peak_lr, config.warmup_steps, config.decay_points,
                               config.lr_floor, config.decay_factor)
            opt.step(grads, lr)
    finally:
        if pool is not None:
            pool.shutdown()
    meta = {"steps": config.steps}
    if history:
        meta["final_losses"] = asdict(history[-1])
    return TrainedModel(model, config, meta, history)


# --- serialisation -----------------------------------------------------------

MODEL_FORMAT = "memalign-model"


def model_to_dict(model: FaceVcModel, config: TrainConfig, phase: str, metadata: dict) -> dict:
    doc = {"format": MODEL_FORMAT, "version": 1, "phase": phase, "config": config.to_dict()}
    if model.module is not None:
        doc["mfva"] = mfva.module_to_dict(model.module)
    else:
        doc["projection"] = {"w": model.proj_w.tolist(), "b": model.proj_b.tolist()}
    doc["decoder"] = model.decoder.to_dict()
    doc["metadata"] = metadata
    return doc


def model_from_dict(doc: dict) -> tuple[FaceVcModel | None, ToyDecoder, TrainConfig, dict]:
    """Returns (model or None for a decoder-only document, decoder, config, metadata)."""
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"not a {MODEL_FORMAT} document")
    decoder = ToyDecoder.from_dict(doc["decoder"])
    config = TrainConfig.from_dict(doc.get("config", {}))
    model = None
    if "mfva" in doc:
        model = FaceVcModel(decoder, module=mfva.module_from_dict(doc["mfva"]))
    elif "projection" in doc:
        p = doc["projection"]
        model = FaceVcModel(decoder, proj_w=np.array(p["w"], dtype=np.float64), proj_b=np.array(p["b"], dtype=np.float64))
    return model, decoder, config, doc.get("metadata", {})


def decoder_to_doc(decoder: ToyDecoder, config: TrainConfig, metadata: dict) -> dict:
    return {"format": MODEL_FORMAT, "version": 1, "phase": "pretrain", "config": config.to_dict(),
            "decoder": decoder.to_dict(), "metadata": metadata}


def fit_store(targets, module: mfva.MfvaModule, steps: int = 2000, peak_lr: float = 1e-2,
              warmup_steps: int = 100, decay_points=(), beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[float]:
    """Train the voice bank on the store loss alone, full batch.

    Returns the mean store loss before each step.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    params = {mfva.VOICE_VALUE: module.voice_value.slots}
    opt = Adam(params, beta1, beta2, eps)
    history = []
    for step in range(steps):
        grads = {k: np.zeros_like(v) for k, v in module.params().items()}
        total = sum(mfva.store_loss(t, module, grads) for t in targets) / len(targets)
        if not np.isfinite(total):
            raise NumericError(f"store loss became non-finite at step {step}")
        history.append(total)
        grads[mfva.VOICE_VALUE] /= len(targets)
        opt.step(grads, learning_rate(step, peak_lr, warmup_steps, decay_points))
    return history
