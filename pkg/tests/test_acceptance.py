"""Acceptance criteria, one test per criterion.

Each test records a single pass/fail line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""
import csv
import json
import math
import time

import numpy as np
import pytest
from metric_oracles import oracle_sdo, oracle_sdr, oracle_sho, oracle_shr, toy_records

from memalign import evaluate as ev
from memalign import mfva, synth
from memalign.cli import main
from memalign.errors import ArchiveError
from memalign.gradcheck import LOSSES, run_suite
from memalign.numerics import kl_divergence
from memalign.synth import CorpusSpec, EmbeddingRecord, Modality, generate_corpus
from memalign.trainer import fit_store, model_from_dict


def load_report(pipe, name):
    return json.loads(pipe.path(f"{name}.report.json").read_text())


def trained_module(pipe):
    model, _, _, _ = model_from_dict(json.loads(pipe.path("full.json").read_text()))
    return model.module


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    rep = run_suite(seed=0, n_configs=100, h=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(rep.max_error[name] for name in LOSSES)
    detail = ", ".join(f"{n}={rep.max_error[n]:.1e}" for n in LOSSES) + f", {elapsed:.1f}s"
    acceptance.check(1, "analytic gradients match central differences", worst < 1e-4 and elapsed < 30
                     and rep.n_configs == 100, detail)


def test_memory_capacity(acceptance):
    spec = CorpusSpec(n_train_speakers=8, n_holdout_speakers=1, images_per_speaker=1, utterances_per_speaker=1,
                      face_noise=0.0, voice_noise=0.0, frames=2, seed=1)
    corpus = generate_corpus(spec)
    targets = np.stack([corpus.voice_centroid(s) for s in corpus.train_speakers])
    module = mfva.init_module(32, spec.embedding_dim, seed=1, temperature=0.1)
    t0 = time.perf_counter()
    fit_store(targets, module, steps=2000)
    elapsed = time.perf_counter() - t0
    worst = max(mfva.store_loss(t, module) for t in targets)
    acceptance.check(2, "store-only training memorises 8 speakers", worst < 1e-3 and elapsed < 10,
                     f"max mse={worst:.1e}, {elapsed:.1f}s")


def test_kl_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst_gap, min_kl = 0.0, math.inf
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        direct = 0.0
        for pi, qi in zip(p.tolist(), q.tolist()):
            direct += pi * math.log(pi / qi)
        got = kl_divergence(p, q)
        worst_gap = max(worst_gap, abs(got - direct))
        min_kl = min(min_kl, got)
    acceptance.check(3, "KL matches direct summation; Gibbs inequality", worst_gap <= 1e-12 and min_kl >= 0,
                     f"max gap={worst_gap:.1e}, min KL={min_kl:.2e}")


def test_metric_oracles(acceptance):
    records = toy_records(np.random.default_rng(4), n_targets=4, n_images=3, n_utts=3)
    gaps = {
        "shr": abs(ev.shr(records, 500, seed=1) - oracle_shr(records)),
        "sdr": abs(ev.sdr(records, 100, seed=1) - oracle_sdr(records)),
        "sho": abs(ev.sho(records) - oracle_sho(records)),
        "sdo": abs(ev.sdo(records) - oracle_sdo(records)),
    }
    ok = gaps["shr"] < 0.01 and gaps["sdr"] < 0.01 and gaps["sho"] <= 1e-12 and gaps["sdo"] <= 1e-12
    acceptance.check(4, "metrics agree with exhaustive enumeration", ok,
                     ", ".join(f"{k} gap={v:.1e}" for k, v in gaps.items()))


@pytest.mark.slow
def test_end_to_end_ordering(default_pipeline, acceptance):
    r = load_report(default_pipeline, "full")
    t = default_pipeline.timings
    runtime = t["gen"] + t["pretrain"] + t["train_full"] + t["eval_full"]
    ok = r["sho"] > r["sdo"] and r["shr"] > r["sdr"] and r["ga"] >= 0.95 and runtime < 300
    acceptance.check(5, "held-out SHO > SDO, SHR > SDR, GA >= 0.95", ok,
                     f"SHO={r['sho']:.4f} SDO={r['sdo']:.4f} SHR={r['shr']:.4f} SDR={r['sdr']:.4f} "
                     f"GA={r['ga']:.3f}, {runtime:.0f}s")


@pytest.mark.slow
def test_ablation_ordering(default_pipeline, acceptance):
    full, no_mfva, no_inter = (load_report(default_pipeline, n) for n in ("full", "no_mfva", "no_inter"))
    ok = no_mfva["ga"] <= full["ga"] and no_mfva["sho"] <= full["sho"] and no_inter["sdo"] >= full["sdo"]
    acceptance.check(6, "ablations do not beat the full model", ok,
                     f"SHO full={full['sho']:.4f} no-mfva={no_mfva['sho']:.4f}; "
                     f"GA full={full['ga']:.3f} no-mfva={no_mfva['ga']:.3f}; "
                     f"SDO full={full['sdo']:.4f} no-inter={no_inter['sdo']:.4f}")


@pytest.mark.slow
def test_interpolation_monotone(default_pipeline, acceptance, tmp_path):
    corpus = generate_corpus(CorpusSpec.from_dict(json.loads((default_pipeline.corpus / "corpus.json").read_text())))
    # fixed pair: first female and first male held-out target, first image of each
    female = next(s for s in corpus.holdout_speakers if corpus.gender(s) == 0)
    male = next(s for s in corpus.holdout_speakers if corpus.gender(s) == 1)
    face_a = int(corpus.face_entity[corpus.faces_of(female)[0]])
    face_b = int(corpus.face_entity[corpus.faces_of(male)[0]])
    out = tmp_path / "interp.csv"
    code = main(["interp", "--model", str(default_pipeline.path("full.json")), "--corpus", str(default_pipeline.corpus),
                 "--face-a", str(face_a), "--face-b", str(face_b), "--steps", "11", "--out", str(out), "--quiet"])
    assert code == 0
    with open(out) as fh:
        cos_b = np.array([float(r["cos_to_b"]) for r in csv.DictReader(fh)])
    worst = float(np.min(np.diff(cos_b)))
    acceptance.check(7, "cosine to B centroid non-decreasing in alpha", len(cos_b) == 11 and worst >= -1e-6,
                     f"faces {face_a}->{face_b}, min step={worst:+.2e}")


RERUN_CONFIG = {
    "n_train_speakers": 10, "n_holdout_speakers": 12, "images_per_speaker": 4, "utterances_per_speaker": 6,
    "embedding_dim": 8, "latent_dim": 4, "frames": 5, "content_dim": 3, "seed": 9,
    "steps": 25, "warmup_steps": 5, "decay_points": [15], "n_slots": 12, "decoder_hidden": 6, "frame_dim": 4,
    "pretrain_steps": 25, "pretrain_warmup_steps": 5, "pretrain_decay_points": [15],
    "utterances_per_source": 2, "images_per_target": 2, "shr_shuffles": 50, "sdr_shuffles": 20,
}


def _run_everything(root, capsys):
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RERUN_CONFIG))
    c, common = str(root / "corpus"), ["--config", str(cfg), "--quiet"]
    stdout = {}
    for name, argv in (
        ("gen", ["gen", "--out", c]),
        ("pretrain", ["pretrain", "--corpus", c, "--out", str(root / "pre.json")]),
        ("train", ["train", "--corpus", c, "--pretrained", str(root / "pre.json"), "--out", str(root / "m.json")]),
        ("train_ablation", ["train", "--corpus", c, "--no-pretrain", "--no-mfva", "--out", str(root / "p.json")]),
        ("eval", ["eval", "--corpus", c, "--model", str(root / "m.json"), "--report", str(root / "r.json"),
                  "--pairs-csv", str(root / "pairs.csv"), "--pca-csv", str(root / "pca.csv")]),
        ("eval_output", ["eval", "--corpus", c, "--model", str(root / "m.json"), "--mode", "output",
                         "--report", str(root / "r_out.json")]),
        ("interp", ["interp", "--corpus", c, "--model", str(root / "m.json"), "--face-a", "40", "--face-b", "44",
                    "--out", str(root / "interp.csv")]),
        ("recall", ["recall", "--model", str(root / "m.json"), "--face-embedding", str(root / "corpus" / "face.xmeb"),
                    "--out", str(root / "recall.csv")]),
        ("gradcheck", ["gradcheck", "--configs", "10", "--seed", "9"]),
    ):
        assert main(argv + common) == 0, name
        stdout[name] = capsys.readouterr().out
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return files, stdout


def test_determinism(tmp_path, capsys, acceptance):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    files_a, out_a = _run_everything(tmp_path / "a", capsys)
    files_b, out_b = _run_everything(tmp_path / "b", capsys)
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k)) + sorted(set(files_b) - set(files_a))
    differing += [f"stdout:{k}" for k in out_a if out_a[k] != out_b[k]]
    acceptance.check(8, "every command reruns byte-identically", not differing,
                     f"{len(files_a)} files compared" + (f", differing: {differing}" if differing else ""))


def test_format_robustness(tmp_path, acceptance):
    corpus = generate_corpus(CorpusSpec(n_train_speakers=10, n_holdout_speakers=12, images_per_speaker=3,
                                        utterances_per_speaker=3, frames=2))
    problems = []
    for modality in Modality:
        recs = corpus.records(modality)
        synth.write_archive(recs, tmp_path / "x.xmeb")
        back = synth.read_archive(tmp_path / "x.xmeb")
        if back != recs or any(a.vector.astype(np.float32).tobytes() != b.vector.astype(np.float32).tobytes()
                               for a, b in zip(recs, back)):
            problems.append(f"{modality.name} round trip")

    gen_dir = tmp_path / "corpus"
    assert main(["gen", "--out", str(gen_dir), "--quiet", "--config", str(_write(tmp_path / "c.json", {
        "n_train_speakers": 10, "images_per_speaker": 3, "utterances_per_speaker": 6, "frames": 2}))]) == 0
    good = (gen_dir / "face.xmeb").read_bytes()
    other_dim = synth.encode_archive([EmbeddingRecord(0, 0, Modality.VOICE, 0, np.zeros(7))])
    cases = {
        "magic": (b"XMEZ" + good[4:], "magic", 0),
        "truncated": (good[:-3], "truncated", None),
        "dimension": (None, "dimension mismatch", 12),
    }
    for label, (face_bytes, needle, offset) in cases.items():
        case_dir = tmp_path / label
        case_dir.mkdir()
        for name in ("corpus.json", "face.xmeb", "voice.xmeb"):
            (case_dir / name).write_bytes((gen_dir / name).read_bytes())
        if face_bytes is not None:
            (case_dir / "face.xmeb").write_bytes(face_bytes)
            data = face_bytes
            expected_dim = None
        else:
            (case_dir / "voice.xmeb").write_bytes(other_dim)
            data, expected_dim = other_dim, corpus.dim
        try:
            synth.decode_archive(data, expected_dim)
            problems.append(f"{label}: no error")
        except ArchiveError as exc:
            if needle not in str(exc) or (offset is not None and exc.offset != offset):
                problems.append(f"{label}: {exc}")
        code = main(["pretrain", "--corpus", str(case_dir), "--out", str(tmp_path / "p.json"), "--steps", "0", "--quiet"])
        if code != 3:
            problems.append(f"{label}: exit {code}")
    acceptance.check(9, "archive round trip; corruption gives structured errors and exit 3", not problems,
                     "; ".join(problems) or "round trip bit-exact, magic/truncation/dimension -> exit 3")


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.mark.slow
def test_scale_invariance(default_pipeline, acceptance):
    module = trained_module(default_pipeline)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        h = rng.normal(size=module.dim)
        base = mfva.recall_face(h, module).embedding
        for lam in (0.5, 2.0, 10.0):
            worst = max(worst, float(np.max(np.abs(mfva.recall_face(lam * h, module).embedding - base))))
    acceptance.check(10, "recall_face is invariant to query scale", worst <= 1e-9, f"max deviation={worst:.1e}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
