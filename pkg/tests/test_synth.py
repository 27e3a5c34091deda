import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memalign import synth
from memalign.errors import ArchiveError, ConfigError
from memalign.evaluate import gender_centroids, predict_gender
from memalign.numerics import cosine_similarity
from memalign.rng import SplitMix64
from memalign.synth import CorpusSpec, EmbeddingRecord, Modality


class TestSplitMix64:
    def test_reference_outputs(self):
        # published SplitMix64 reference stream for seed 0
        assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF

    def test_matches_scalar_reference(self):
        def scalar(seed, n):
            mask, state, out = (1 << 64) - 1, seed, []
            for _ in range(n):
                state = (state + 0x9E3779B97F4A7C15) & mask
                z = state
                z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
                z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
                out.append(z ^ (z >> 31))
            return out
        for seed in (0, 1, 12345, 2 ** 64 - 1):
            assert [int(v) for v in SplitMix64(seed).next_u64(20)] == scalar(seed, 20)

    def test_blocks_concatenate(self):
        a = SplitMix64(9)
        b = SplitMix64(9)
        joined = np.concatenate([a.next_u64(3), a.next_u64(5)])
        np.testing.assert_array_equal(joined, b.next_u64(8))

    def test_uniform_range_and_moments(self):
        u = SplitMix64(3).uniform((100_000,))
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.005

    def test_normal_moments(self):
        z = SplitMix64(5).normal((100_000,))
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1) < 0.02

    def test_odd_count_drops_trailing_value(self):
        a = SplitMix64(2).normal((3,))
        b = SplitMix64(2).normal((4,))
        np.testing.assert_array_equal(a, b[:3])

    def test_spawn_is_deterministic_and_distinct(self):
        root = SplitMix64(1)
        x = root.spawn(7).next_u64(4)
        np.testing.assert_array_equal(x, SplitMix64(1).spawn(7).next_u64(4))
        assert not np.array_equal(x, root.spawn(8).next_u64(4))

    def test_permutation(self):
        p = SplitMix64(4).permutation(50)
        assert sorted(p.tolist()) == list(range(50))


class TestCorpusSpec:
    @pytest.mark.parametrize("field,value", [
        ("n_train_speakers", 0), ("images_per_speaker", 0), ("embedding_dim", 0),
        ("face_noise", -0.1), ("frames", 1), ("latent_dim", 0),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError, match=field):
            CorpusSpec(**{field: value})

    def test_dict_round_trip(self):
        spec = CorpusSpec(seed=3, embedding_dim=12)
        assert CorpusSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            CorpusSpec.from_dict({"bogus": 1})

    def test_defaults(self):
        spec = CorpusSpec()
        assert (spec.latent_dim, spec.embedding_dim, spec.frames, spec.content_dim) == (8, 16, 32, 8)
        assert spec.face_noise == spec.voice_noise == 0.05


class TestGenerate:
    def test_cardinalities(self, small_spec, small_corpus):
        c, s = small_corpus, small_spec
        n = s.n_train_speakers + s.n_holdout_speakers
        assert c.face_vectors.shape == (n * s.images_per_speaker, s.embedding_dim)
        assert c.voice_vectors.shape == (n * s.utterances_per_speaker, s.embedding_dim)
        assert c.content.shape == (n * s.utterances_per_speaker, s.frames, s.content_dim)
        assert not set(c.train_speakers) & set(c.holdout_speakers)
        assert len(c.holdout_speakers) == s.n_holdout_speakers

    def test_default_scale(self):
        spec = CorpusSpec(images_per_speaker=1, utterances_per_speaker=1, frames=2)
        c = synth.generate_corpus(spec)
        assert len(c.train_speakers) == 200 and len(c.holdout_speakers) == 12

    def test_deterministic(self, small_spec, small_corpus):
        again = synth.generate_corpus(small_spec)
        for field in ("face_vectors", "voice_vectors", "content", "pitch", "face_mix", "voice_mix"):
            assert getattr(again, field).tobytes() == getattr(small_corpus, field).tobytes()

    def test_seed_changes_corpus(self, small_spec, small_corpus):
        other = synth.generate_corpus(dataclasses.replace(small_spec, seed=small_spec.seed + 1))
        assert not np.array_equal(other.face_vectors, small_corpus.face_vectors)

    def test_latent_structure(self, small_corpus):
        for sp in small_corpus.speakers:
            assert sp.z[0] == (1.0 if sp.gender == 1 else -1.0)
            assert np.all(np.isfinite(sp.z))

    @pytest.mark.parametrize("n_train,n_hold", [(10, 12), (7, 5), (1, 1)])
    def test_gender_balance(self, n_train, n_hold):
        spec = CorpusSpec(n_train_speakers=n_train, n_holdout_speakers=n_hold, images_per_speaker=1,
                          utterances_per_speaker=1, frames=2)
        c = synth.generate_corpus(spec)
        for group in (c.train_speakers, c.holdout_speakers):
            g = [c.gender(s) for s in group]
            assert g.count(1) == len(g) // 2
            assert g.count(0) == len(g) - len(g) // 2

    def test_pitch_normalised(self, small_corpus):
        assert np.max(np.abs(small_corpus.pitch.mean(axis=1))) < 1e-9
        assert np.max(np.abs(small_corpus.pitch.var(axis=1) - 1)) < 1e-6

    def test_noiseless(self, small_spec):
        c = synth.generate_corpus(dataclasses.replace(small_spec, face_noise=0.0, voice_noise=0.0))
        for sid in c.train_speakers[:4]:
            faces = c.face_vectors[c.faces_of(sid)]
            voices = c.voice_vectors[c.utterances_of(sid)]
            assert np.all(faces == faces[0]) and np.all(voices == voices[0])
            assert cosine_similarity(voices[0], voices[-1]) == pytest.approx(1.0, abs=1e-12)
        cents = [c.voice_centroid(s) for s in c.train_speakers]
        for i in range(len(cents)):
            for j in range(i + 1, len(cents)):
                assert abs(cosine_similarity(cents[i], cents[j])) < 1

    def test_vectors_are_float32_exact(self, small_corpus):
        v = small_corpus.voice_vectors
        assert np.array_equal(v, v.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("seed", [11, 12])
    @pytest.mark.parametrize("dim", [8, 16])
    def test_gender_separable(self, seed, dim):
        spec = CorpusSpec(n_train_speakers=40, n_holdout_speakers=2, images_per_speaker=2,
                          utterances_per_speaker=5, embedding_dim=dim, voice_noise=0.1, frames=2, seed=seed)
        c = synth.generate_corpus(spec)
        cents = gender_centroids(c)
        pred = predict_gender(c.voice_vectors, cents)
        truth = np.array([c.gender(int(s)) for s in c.voice_speaker])
        assert np.mean(pred == truth) >= 0.99

    def test_face_index(self, small_corpus):
        assert small_corpus.face_index(int(small_corpus.face_entity[5])) == 5
        with pytest.raises(ConfigError):
            small_corpus.face_index(10 ** 9)


class TestArchive:
    def test_round_trip_bit_exact(self, small_corpus, tmp_path):
        for modality in Modality:
            recs = small_corpus.records(modality)
            path = tmp_path / f"{modality.name}.xmeb"
            synth.write_archive(recs, path)
            back = synth.read_archive(path)
            assert back == recs
            assert synth.encode_archive(back) == path.read_bytes()

    def test_layout(self):
        rec = EmbeddingRecord(3, 9, Modality.FACE, 1, np.array([1.5, -2.0]))
        data = synth.encode_archive([rec])
        assert data[:16] == b"XMEB" + struct.pack("<III", 1, 1, 2)
        assert data[16:] == struct.pack("<IIBBH2f", 3, 9, 1, 1, 0, 1.5, -2.0)

    def test_empty(self, tmp_path):
        path = tmp_path / "e.xmeb"
        synth.write_archive([], path, dim=4)
        assert path.stat().st_size == 16
        assert synth.read_archive(path) == []

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e6, 1e6, width=32, allow_subnormal=False), min_size=3, max_size=3), max_size=6))
    def test_round_trip_property(self, rows):
        recs = [EmbeddingRecord(i, 2 * i, Modality(i % 2), (i // 2) % 2, np.array(r, dtype=np.float64))
                for i, r in enumerate(rows)]
        assert synth.decode_archive(synth.encode_archive(recs, dim=3)) == recs

    def _data(self, small_corpus):
        return synth.encode_archive(small_corpus.records(Modality.VOICE)[:4])

    def test_bad_magic(self, small_corpus):
        data = b"XMEC" + self._data(small_corpus)[4:]
        with pytest.raises(ArchiveError, match="magic") as exc:
            synth.decode_archive(data)
        assert exc.value.offset == 0
        assert exc.value.exit_code == 3

    def test_bad_version(self, small_corpus):
        data = bytearray(self._data(small_corpus))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(ArchiveError, match="version") as exc:
            synth.decode_archive(bytes(data))
        assert exc.value.offset == 4

    @pytest.mark.parametrize("cut", [1, 10, 33])
    def test_truncated_records(self, small_corpus, cut):
        data = self._data(small_corpus)
        with pytest.raises(ArchiveError, match="truncated") as exc:
            synth.decode_archive(data[:-cut])
        rec = 12 + 4 * small_corpus.dim
        assert (exc.value.offset - 16) % rec == 0

    def test_truncated_header(self):
        with pytest.raises(ArchiveError, match="header"):
            synth.decode_archive(b"XMEB\x01\x00")

    def test_dimension_mismatch(self, small_corpus):
        with pytest.raises(ArchiveError, match="dimension") as exc:
            synth.decode_archive(self._data(small_corpus), expected_dim=small_corpus.dim + 1)
        assert exc.value.offset == 12

    def test_trailing_bytes(self, small_corpus):
        with pytest.raises(ArchiveError, match="trailing"):
            synth.decode_archive(self._data(small_corpus) + b"\0")

    def test_mixed_dims_refused(self):
        recs = [EmbeddingRecord(0, 0, Modality.VOICE, 0, np.zeros(2)),
                EmbeddingRecord(0, 1, Modality.VOICE, 0, np.zeros(3))]
        with pytest.raises(ArchiveError):
            synth.encode_archive(recs)

    def test_replace_embeddings_checks_entities(self, small_spec, tmp_path):
        c = synth.generate_corpus(small_spec)
        recs = c.records(Modality.FACE)
        with pytest.raises(ConfigError):
            c.replace_embeddings(recs[:-1], Modality.FACE)
        swapped = [dataclasses.replace(r, vector=r.vector * 2) for r in recs]
        c.replace_embeddings(swapped, Modality.FACE)
        np.testing.assert_array_equal(c.face_vectors[3], recs[3].vector * 2)


class TestPca:
    def test_planar_points_preserve_distances(self, rng):
        pts2 = rng.normal(size=(30, 2)) * [3.0, 1.0]
        basis = np.linalg.qr(rng.normal(size=(10, 2)))[0]
        proj = synth.pca_project_2d(pts2 @ basis.T)
        d_in = np.linalg.norm(pts2[:, None] - pts2[None], axis=-1)
        d_out = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-6)

    def test_identical_points(self):
        np.testing.assert_array_equal(synth.pca_project_2d(np.ones((5, 4))), np.zeros((5, 2)))

    def test_two_clusters(self, rng):
        a = rng.normal(scale=0.1, size=(20, 6))
        b = rng.normal(scale=0.1, size=(20, 6))
        b[:, 2] += 5.0
        x = synth.pca_project_2d(np.vstack([a, b]))[:, 0]
        labels = np.repeat([0, 1], 20)
        # 1-D silhouette, computed directly
        sil = []
        for i in range(40):
            d = np.abs(x - x[i])
            same = labels == labels[i]
            a_i = d[same].sum() / (same.sum() - 1)
            b_i = d[~same].mean()
            sil.append((b_i - a_i) / max(a_i, b_i))
        assert np.mean(sil) > 0.9

    def test_too_few(self):
        with pytest.raises(ConfigError):
            synth.pca_project_2d(np.ones((1, 3)))
