"""Finite-difference verification of every analytic loss gradient."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mfva
from . import numerics as nx
from .rng import SplitMix64
from .trainer import FaceVcModel, ToyDecoder, decode, intra_loss, inter_loss

# Central differences straddle the L1 kink when a residual is within ~h of
# zero; problems closer than this margin are redrawn.
KINK_MARGIN = 1e-3

LOSSES = ("store", "align", "intra", "inter")


@dataclass
class Problem:
    """One random small configuration of every loss input."""

    model: FaceVcModel
    s: np.ndarray
    h: np.ndarray
    content: np.ndarray
    pitch: np.ndarray
    target: np.ndarray


def random_problem(seed: int, n_slots: int = 5, dim: int = 4, content_dim: int = 3, hidden: int = 6,
                   frame_dim: int = 3, frames: int = 4, detach: bool = True) -> Problem:
    rng = SplitMix64(seed)
    while True:
        p = _draw_problem(rng, n_slots, dim, content_dim, hidden, frame_dim, frames, detach)
        if _min_residual(p) > KINK_MARGIN:
            return p


def _min_residual(p: Problem) -> float:
    dec = p.model.decoder
    x_face = decode(dec, p.content, p.model.face_condition(p.h), p.pitch)
    x_speech = decode(dec, p.content, p.s, p.pitch)
    return float(min(np.abs(x_face - p.target).min(), np.abs(x_face - x_speech).min()))


def _draw_problem(rng, n_slots, dim, content_dim, hidden, frame_dim, frames, detach) -> Problem:
    tau = 0.1 + 0.9 * rng.uniform()
    module = mfva.MfvaModule(mfva.MemoryBank(mfva.VOICE_VALUE, rng.normal((n_slots, dim))),
                             mfva.MemoryBank(mfva.FACE_KEY, rng.normal((n_slots, dim))), tau, detach)
    fan_in = content_dim + dim + 1
    dec = ToyDecoder(rng.normal((hidden, fan_in)) / np.sqrt(fan_in), 0.1 * rng.normal((hidden,)),
                     rng.normal((frame_dim, hidden)) / np.sqrt(hidden), 0.1 * rng.normal((frame_dim,)),
                     content_dim, dim)
    return Problem(FaceVcModel(dec, module=module), rng.normal((dim,)), rng.normal((dim,)),
                   rng.normal((frames, content_dim)), rng.normal((frames,)), rng.normal((frames, frame_dim)))


def loss_fn(name: str, p: Problem, inter_updates_decoder: bool = False):
    """Returns ``f(grads_or_None) -> loss`` for the named loss on problem ``p``."""
    m = p.model
    if name == "store":
        return lambda g: mfva.store_loss(p.s, m.module, g)
    if name == "align":
        return lambda g: mfva.align_loss(p.s, p.h, m.module, g)
    if name == "intra":
        return lambda g: intra_loss(m, p.content, p.pitch, p.target, p.h, g)
    if name == "inter":
        return lambda g: inter_loss(m, p.content, p.pitch, p.s, p.h, g, inter_updates_decoder)
    raise KeyError(name)


def checked_blocks(name: str, p: Problem, inter_updates_decoder: bool = False) -> list[str]:
    blocks = {
        "store": [mfva.VOICE_VALUE],
        "align": [mfva.FACE_KEY] + ([] if p.model.module.detach_voice_weights else [mfva.VOICE_VALUE]),
        "intra": [mfva.VOICE_VALUE, mfva.FACE_KEY, "dec_w1", "dec_b1", "dec_w2", "dec_b2"],
        "inter": [mfva.VOICE_VALUE, mfva.FACE_KEY],
    }[name]
    if name == "inter" and inter_updates_decoder:
        blocks = blocks + ["dec_w1", "dec_b1", "dec_w2", "dec_b2"]
    return blocks


def _value_fn(name: str, p: Problem, inter_updates_decoder: bool):
    """Loss value for the finite-difference side.

    With decoder updates on, the pseudo-parallel target stays frozen at its
    unperturbed value, since the analytic gradient treats it as a constant.
    """
    if name == "inter" and inter_updates_decoder:
        frozen = decode(p.model.decoder, p.content, p.s, p.pitch)
        return lambda g: intra_loss(p.model, p.content, p.pitch, frozen, p.h, g)
    return loss_fn(name, p, inter_updates_decoder)


def block_errors(name: str, p: Problem, h: float = 1e-5, inter_updates_decoder: bool = False) -> dict[str, float]:
    grads = p.model.zero_grads()
    loss_fn(name, p, inter_updates_decoder)(grads)
    f = _value_fn(name, p, inter_updates_decoder)
    params = p.model.params()
    out = {}
    for block in checked_blocks(name, p, inter_updates_decoder):
        arr = params[block]
        orig = arr.copy()

        def at(x, arr=arr):
            arr[...] = x
            return f(None)

        numeric = nx.finite_difference_gradient(at, orig, h)
        arr[...] = orig
        out[block] = nx.relative_error(grads[block], numeric)
    return out


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=dict)
    worst_block: dict[str, str] = field(default_factory=dict)
    n_configs: int = 0

    def failing(self, tol: float) -> list[str]:
        return [k for k, v in self.max_error.items() if not v < tol]


def run_suite(seed: int = 0, n_configs: int = 100, h: float = 1e-5) -> GradcheckReport:
    root = SplitMix64(seed)
    rep = GradcheckReport(n_configs=n_configs)
    for name in LOSSES:
        rep.max_error[name] = 0.0
    for i in range(n_configs):
        p = random_problem(root.spawn(i).seed)
        for name in LOSSES:
            for block, err in block_errors(name, p, h).items():
                if err >= rep.max_error[name]:
                    rep.max_error[name] = err
                    rep.worst_block[name] = block
    return rep
