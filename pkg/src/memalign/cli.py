"""Command-line entry point: gen, pretrain, train, eval, gradcheck, interp, recall.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import evaluate as ev
from . import mfva
from .config import RunConfig, load_run_config
from .errors import ConfigError, MemalignError, StorageError
from .fileio import atomic_write_text, dumps, read_json
from .gradcheck import LOSSES, run_suite
from .synth import (CorpusSpec, Modality, SyntheticCorpus, generate_corpus, pca_project_2d,
                    read_archive, write_archive)
from .numerics import cosine_similarity
from .trainer import (FaceVcModel, TrainConfig, decoder_to_doc, fit, ground_truth_renderer, model_from_dict,
                      model_to_dict, pretrain)

log = logging.getLogger("memalign")

CORPUS_FILE = "corpus.json"
FACE_ARCHIVE = "face.xmeb"
VOICE_ARCHIVE = "voice.xmeb"


# --- helpers -----------------------------------------------------------------

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _run_config(args, **overrides) -> RunConfig:
    values = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return load_run_config(args.config, values)


def load_corpus(directory) -> SyntheticCorpus:
    """Regenerate a corpus from its spec file; archives present in the
    directory replace the generated embeddings."""
    directory = Path(directory)
    spec_path = directory / CORPUS_FILE
    if not spec_path.exists():
        raise StorageError(f"{spec_path} not found")
    doc = read_json(spec_path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{spec_path}: corpus spec must be a JSON object")
    corpus = generate_corpus(CorpusSpec.from_dict(doc))
    dim = None  # the first archive read fixes the dimension for the second
    for name, modality in ((FACE_ARCHIVE, Modality.FACE), (VOICE_ARCHIVE, Modality.VOICE)):
        path = directory / name
        if path.exists():
            records = read_archive(path, dim)
            corpus.replace_embeddings(records, modality)
            dim = corpus.dim if modality == Modality.FACE else dim
    if corpus.face_vectors.shape[1] != corpus.voice_vectors.shape[1]:
        raise ConfigError(f"face embeddings have dim {corpus.face_vectors.shape[1]} but voice embeddings "
                          f"have dim {corpus.voice_vectors.shape[1]}")
    return corpus


def load_model_doc(path):
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: model document must be a JSON object")
    return model_from_dict(doc)


def _require_model(path) -> tuple[FaceVcModel, TrainConfig, dict]:
    model, _, config, meta = load_model_doc(path)
    if model is None:
        raise ConfigError(f"{path} holds only a pretrained decoder, not a trained model")
    return model, config, meta


def _require_memory(model: FaceVcModel, path) -> mfva.MfvaModule:
    if not model.uses_memory:
        raise ConfigError(f"{path} was trained without the memory module; slot weights are unavailable")
    return model.module


def _loss_path(out: Path, given) -> Path:
    return Path(given) if given else out.with_name(out.stem + ".loss.csv")


# --- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _run_config(args)
    corpus = generate_corpus(cfg.corpus)
    out = Path(args.out)
    write_archive(corpus.records(Modality.FACE), out / FACE_ARCHIVE)
    write_archive(corpus.records(Modality.VOICE), out / VOICE_ARCHIVE)
    atomic_write_text(out / CORPUS_FILE, dumps(cfg.corpus.to_dict()))
    log.info("wrote %d face and %d voice records (dim %d) to %s",
             corpus.face_vectors.shape[0], corpus.voice_vectors.shape[0], corpus.dim, out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args, pretrain_steps=args.steps)
    corpus = load_corpus(args.corpus)
    result = pretrain(corpus, cfg.train)
    meta = {"corpus": corpus.spec.to_dict(), "steps": cfg.train.pretrain_steps,
            "heldout_loss_initial": result.initial_heldout_loss,
            "heldout_loss_final": result.final_heldout_loss}
    if result.history:
        meta["final_loss"] = result.history[-1]
    out = Path(args.out)
    atomic_write_text(_loss_path(out, args.loss_csv),
                      _csv_text(["step", "loss"], list(enumerate(result.history))))
    atomic_write_text(out, dumps(decoder_to_doc(result.decoder, cfg.train, meta)))
    log.info("pretrain: held-out reconstruction %.6g -> %.6g", result.initial_heldout_loss,
             result.final_heldout_loss)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, steps=args.steps,
                      no_inter=True if args.no_inter else None,
                      no_mfva=True if args.no_mfva else None,
                      no_pretrain=True if args.no_pretrain else None)
    tc = cfg.train
    corpus = load_corpus(args.corpus)
    decoder = None
    if not tc.no_pretrain:
        if not args.pretrained:
            raise ConfigError("a pretrained model (--pretrained) is required unless --no-pretrain is given")
        _, decoder, _, _ = load_model_doc(args.pretrained)
        if decoder.w1.shape[0] != tc.decoder_hidden or decoder.w2.shape[0] != tc.frame_dim:
            raise ConfigError(f"pretrained decoder has hidden {decoder.w1.shape[0]} / frame dim "
                              f"{decoder.w2.shape[0]}, config asks for {tc.decoder_hidden} / {tc.frame_dim}")
        if decoder.cond_dim != corpus.dim:
            raise ConfigError(f"dimension mismatch: pretrained decoder dim {decoder.cond_dim}, corpus dim {corpus.dim}")
    trained = fit(corpus, tc, decoder)
    meta = dict(trained.metadata)
    meta["corpus"] = corpus.spec.to_dict()
    out = Path(args.out)
    rows = [(i, h.total, h.store, h.align, h.intra, h.inter) for i, h in enumerate(trained.history)]
    atomic_write_text(_loss_path(out, args.loss_csv),
                      _csv_text(["step", "total", "store", "align", "intra", "inter"], rows))
    atomic_write_text(out, dumps(model_to_dict(trained.model, tc, "train", meta)))
    if trained.history:
        last = trained.history[-1]
        print(f"final total={last.total!r} store={last.store!r} align={last.align!r} "
              f"intra={last.intra!r} inter={last.inter!r}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args, mode=args.mode)
    model, model_cfg, _ = _require_model(args.model)
    corpus = load_corpus(args.corpus)
    if model.dim != corpus.dim:
        raise ConfigError(f"dimension mismatch: model dim {model.dim}, corpus dim {corpus.dim}")
    probe = None
    if cfg.eval.mode == "output":
        probe = ev.fit_probe(corpus, ground_truth_renderer(corpus, model_cfg.decoder_hidden, model_cfg.frame_dim))
    records = ev.convert_all(model, corpus, cfg.eval, cfg.seed, probe)
    echo = {"seed": cfg.seed, "eval": {k: getattr(cfg.eval, k) for k in ev.EvalOptions.__dataclass_fields__},
            "corpus": corpus.spec.to_dict(), "model": model_cfg.to_dict()}
    if probe is not None:
        echo["probe_residual"] = probe.residual
    report = ev.evaluate(records, corpus, cfg.eval, cfg.seed, echo)
    if args.pairs_csv:
        rows = [(m, records[i].source_utterance_id, records[i].target_face_entity_id,
                 records[j].source_utterance_id, records[j].target_face_entity_id, c)
                for m, i, j, c in ev.pair_similarity_rows(records)]
        atomic_write_text(args.pairs_csv, _csv_text(
            ["metric", "utterance_a", "face_a", "utterance_b", "face_b", "cosine"], rows))
    if args.pca_csv:
        pts = pca_project_2d([r.extracted_embedding for r in records])
        rows = [(r.target_speaker_id, corpus.gender(r.target_speaker_id), r.source_utterance_id,
                 r.target_face_entity_id, float(x), float(y)) for r, (x, y) in zip(records, pts)]
        atomic_write_text(args.pca_csv, _csv_text(
            ["target_speaker", "gender", "source_utterance", "face_entity", "pc1", "pc2"], rows))
    ev.emit_report(report, args.report)
    log.info("SHR=%.4f SHO=%.4f SDR=%.4f SDO=%.4f GA=%.4f over %d conversions",
             report.shr, report.sho, report.sdr, report.sdo, report.ga, report.n_conversions)
    return 0


def cmd_gradcheck(args) -> int:
    if not args.eps > 0:
        raise ConfigError(f"--eps must be > 0, got {args.eps}")
    rep = run_suite(args.seed if args.seed is not None else 0, args.configs, args.eps)
    for name in LOSSES:
        print(f"{name} max_rel_err={rep.max_error[name]!r} block={rep.worst_block.get(name, '-')}")
    failing = rep.failing(args.tol)
    if failing:
        print("FAIL: " + ", ".join(f"{n}[{rep.worst_block.get(n, '-')}]" for n in failing), file=sys.stderr)
        return 2
    return 0


def cmd_interp(args) -> int:
    if args.steps < 2:
        raise ConfigError(f"--steps must be >= 2, got {args.steps}")
    model, _, _ = _require_model(args.model)
    module = _require_memory(model, args.model)
    corpus = load_corpus(args.corpus)
    if corpus.dim != module.dim:
        raise ConfigError(f"dimension mismatch: model dim {module.dim}, corpus dim {corpus.dim}")
    ia, ib = corpus.face_index(args.face_a), corpus.face_index(args.face_b)
    spk_a, spk_b = int(corpus.face_speaker[ia]), int(corpus.face_speaker[ib])
    w_a = mfva.recall_face(corpus.face_vectors[ia], module).weights
    w_b = mfva.recall_face(corpus.face_vectors[ib], module).weights
    cent_a, cent_b = corpus.voice_centroid(spk_a), corpus.voice_centroid(spk_b)
    rows = []
    for i in range(args.steps):
        alpha = i / (args.steps - 1)
        r = mfva.interpolate_recall(w_a, w_b, alpha, module)
        rows.append([alpha, cosine_similarity(r.embedding, cent_a), cosine_similarity(r.embedding, cent_b)]
                    + r.weights.tolist() + r.embedding.tolist())
    header = (["alpha", "cos_to_a", "cos_to_b"] + [f"w{i}" for i in range(module.n_slots)]
              + [f"e{i}" for i in range(module.dim)])
    atomic_write_text(args.out, _csv_text(header, rows))
    log.info("interpolated face %d (speaker %d) -> face %d (speaker %d) over %d steps",
             args.face_a, spk_a, args.face_b, spk_b, args.steps)
    return 0


def cmd_recall(args) -> int:
    model, _, _ = _require_model(args.model)
    module = _require_memory(model, args.model)
    records = read_archive(args.face_embedding)
    if records and records[0].vector.size != module.dim:
        raise ConfigError(f"dimension mismatch: archive dim {records[0].vector.size}, model dim {module.dim}")
    if args.entity:
        wanted = set(args.entity)
        records = [r for r in records if r.entity_id in wanted]
        missing = wanted - {r.entity_id for r in records}
        if missing:
            raise ConfigError(f"unknown entity id(s): {sorted(missing)}")
    rows = []
    for rec in records:
        r = mfva.recall_face(rec.vector, module)
        rows.append([rec.speaker_id, rec.entity_id] + r.weights.tolist() + r.embedding.tolist())
    header = (["speaker_id", "entity_id"] + [f"w{i}" for i in range(module.n_slots)]
              + [f"e{i}" for i in range(module.dim)])
    atomic_write_text(args.out, _csv_text(header, rows))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")

    p = argparse.ArgumentParser(prog="memalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain the decoder on true speaker embeddings")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train the face-conditioned model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pretrained", help="model document written by `pretrain`")
    s.add_argument("--steps", type=int)
    s.add_argument("--loss-csv")
    s.add_argument("--no-inter", action="store_true")
    s.add_argument("--no-mfva", action="store_true")
    s.add_argument("--no-pretrain", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="convert held-out speakers and score them")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=ev.MODES)
    s.add_argument("--report", required=True)
    s.add_argument("--pairs-csv")
    s.add_argument("--pca-csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all loss gradients")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--configs", type=int, default=100)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("interp", parents=[common], help="blend the slot weights of two face images")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--face-a", type=int, required=True)
    s.add_argument("--face-b", type=int, required=True)
    s.add_argument("--steps", type=int, default=11)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("recall", parents=[common], help="slot weights and recalled embeddings for face embeddings")
    s.add_argument("--model", required=True)
    s.add_argument("--face-embedding", required=True, help="XMEB archive of face embeddings")
    s.add_argument("--entity", type=int, action="append", help="restrict to these entity ids")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_recall)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MemalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
