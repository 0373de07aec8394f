import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from embedatlas.store import (
    DatasetManifest,
    EmbeddingMatrix,
    StoreError,
    cosine,
    load_embeddings,
    load_metadata,
    normalize_rows,
    parse_manifest,
    read_embeddings,
    synth_centroids,
    synth_dataset,
    write_embeddings,
    write_manifest,
    write_metadata,
)


def make_matrix(vectors, ids=None, normalized=False):
    vectors = np.asarray(vectors, dtype=np.float32)
    if ids is None:
        ids = np.arange(vectors.shape[0], dtype=np.uint64)
    return EmbeddingMatrix(ids=ids, vectors=vectors, normalized=normalized)


class TestManifest:
    def write_dataset(self, tmp_path, count=3, dim=4, extra=None):
        matrix = make_matrix(np.random.default_rng(0).normal(size=(count, dim)))
        write_embeddings(tmp_path / "emb.aaem", matrix)
        doc = {
            "name": "toy",
            "point_count": count,
            "dim": dim,
            "embeddings_path": "emb.aaem",
        }
        doc.update(extra or {})
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        return tmp_path / "manifest.json"

    def test_minimal_manifest(self, tmp_path):
        path = self.write_dataset(tmp_path, count=3, dim=4)
        m = parse_manifest(path)
        assert m.name == "toy"
        assert m.point_count == 3
        assert m.dim == 4
        assert m.embeddings_path == "emb.aaem"
        assert m.metadata_path is None

    def test_count_mismatch(self, tmp_path):
        path = self.write_dataset(tmp_path, count=3, dim=4)
        doc = json.loads(path.read_text())
        doc["point_count"] = 5
        path.write_text(json.dumps(doc))
        with pytest.raises(StoreError, match="count mismatch"):
            parse_manifest(path)

    def test_dim_mismatch(self, tmp_path):
        path = self.write_dataset(tmp_path, count=3, dim=4)
        doc = json.loads(path.read_text())
        doc["dim"] = 8
        path.write_text(json.dumps(doc))
        with pytest.raises(StoreError, match="dim mismatch"):
            parse_manifest(path)

    def test_media_url_template(self, tmp_path):
        path = self.write_dataset(
            tmp_path, extra={"media_url_template": "https://host/a/{id}.ogg"}
        )
        m = parse_manifest(path)
        assert m.resolve_media_url(7) == "https://host/a/7.ogg"

    def test_template_without_placeholder(self, tmp_path):
        path = self.write_dataset(tmp_path, extra={"media_url_template": "https://host/a.ogg"})
        with pytest.raises(StoreError, match="placeholder"):
            parse_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_manifest(tmp_path / "nope.json")

    def test_malformed_document(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(StoreError, match="malformed"):
            parse_manifest(path)

    def test_missing_required_field(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"name": "x", "point_count": 1, "dim": 2}))
        with pytest.raises(StoreError, match="embeddings_path"):
            parse_manifest(path)

    def test_write_manifest_round_trip(self, tmp_path):
        self.write_dataset(tmp_path, count=3, dim=4)
        manifest = DatasetManifest(
            name="toy",
            point_count=3,
            dim=4,
            embeddings_path="emb.aaem",
            media_url_template="x/{id}",
            default_classes=("a", "b"),
        )
        write_manifest(tmp_path / "manifest.json", manifest)
        assert parse_manifest(tmp_path / "manifest.json") == manifest


class TestContainer:
    def test_direct_decode(self, tmp_path):
        vectors = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_embeddings(tmp_path / "e.aaem", make_matrix(vectors))
        m = read_embeddings(tmp_path / "e.aaem")
        assert m.n == 2 and m.dim == 3
        assert not m.normalized
        np.testing.assert_array_equal(m.vectors, vectors)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "e.aaem"
        write_embeddings(path, make_matrix(np.ones((2, 3), dtype=np.float32)))
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(StoreError, match="truncated payload"):
            read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.aaem"
        write_embeddings(path, make_matrix(np.ones((1, 2), dtype=np.float32)))
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(StoreError, match="bad magic"):
            read_embeddings(path)

    def test_nan_names_row(self, tmp_path):
        path = tmp_path / "e.aaem"
        good = make_matrix(np.ones((3, 2), dtype=np.float32))
        write_embeddings(path, good)
        data = bytearray(path.read_bytes())
        # corrupt row 1, component 0 with a NaN
        offset = 24 + 3 * 8 + 1 * 2 * 4
        data[offset : offset + 4] = np.float32("nan").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(StoreError, match="row 1"):
            read_embeddings(path)

    def test_load_cross_checks_manifest(self, tmp_path):
        write_embeddings(tmp_path / "e.aaem", make_matrix(np.ones((2, 3), dtype=np.float32)))
        manifest = DatasetManifest(name="x", point_count=4, dim=3, embeddings_path="e.aaem")
        with pytest.raises(StoreError, match="count mismatch"):
            load_embeddings(manifest, tmp_path)

    @settings(
        max_examples=25,
        deadline=None,
        suppress_health_check=[HealthCheck.function_scoped_fixture],
    )
    @given(
        n=st.integers(1, 40),
        d=st.integers(1, 16),
        data=st.data(),
    )
    def test_round_trip_bit_exact(self, tmp_path, n, d, data):
        # the target file is overwritten per example, so reusing tmp_path is safe
        vectors = data.draw(
            arrays(
                np.float32,
                (n, d),
                elements=st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False),
            )
        )
        ids = np.sort(
            data.draw(
                st.lists(st.integers(0, 2**63), min_size=n, max_size=n, unique=True).map(
                    lambda xs: np.array(xs, dtype=np.uint64)
                )
            )
        )
        matrix = make_matrix(vectors, ids=ids)
        path = tmp_path / "rt.aaem"
        write_embeddings(path, matrix)
        back = read_embeddings(path)
        np.testing.assert_array_equal(back.ids, matrix.ids)
        assert back.vectors.tobytes() == matrix.vectors.tobytes()


class TestMatrixValidation:
    def test_unsorted_ids_rejected(self):
        with pytest.raises(StoreError, match="sorted"):
            make_matrix(np.ones((2, 2), dtype=np.float32), ids=np.array([3, 1], dtype=np.uint64))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(StoreError, match="sorted"):
            make_matrix(np.ones((2, 2), dtype=np.float32), ids=np.array([1, 1], dtype=np.uint64))

    def test_row_of(self):
        m = make_matrix(np.ones((3, 2), dtype=np.float32), ids=np.array([2, 5, 9], dtype=np.uint64))
        assert m.row_of(5) == 1
        with pytest.raises(KeyError):
            m.row_of(4)

    def test_false_normalized_claim_rejected(self):
        with pytest.raises(StoreError, match="unit-norm"):
            make_matrix(2.0 * np.ones((2, 2), dtype=np.float32), normalized=True)


class TestNormalize:
    def test_three_four_five(self):
        m = normalize_rows(make_matrix([[0.0, 3.0, 4.0]]))
        np.testing.assert_allclose(m.vectors[0], [0.0, 0.6, 0.8], atol=1e-7)
        assert m.normalized

    def test_unit_row_unchanged(self):
        m = normalize_rows(make_matrix([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(m.vectors[0], [1.0, 0.0, 0.0], atol=1e-7)

    def test_zero_row_names_id(self):
        with pytest.raises(StoreError, match="id 7"):
            normalize_rows(
                make_matrix([[1.0, 0.0], [0.0, 0.0]], ids=np.array([3, 7], dtype=np.uint64))
            )

    @settings(max_examples=30, deadline=None)
    @given(
        data=arrays(
            np.float32,
            (5, 6),
            elements=st.floats(-100, 100, width=32, allow_nan=False, allow_infinity=False),
        )
    )
    def test_idempotent(self, data):
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        if (norms == 0).any():
            data = data + np.float32(1.0)
        once = normalize_rows(make_matrix(data))
        twice = normalize_rows(once)
        np.testing.assert_allclose(twice.vectors, once.vectors, atol=1e-7)


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -2.0, 5.0])
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal(self):
        assert cosine([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero vector"):
            cosine([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(
        a=arrays(np.float64, 6, elements=st.floats(-50, 50, allow_nan=False)),
        b=arrays(np.float64, 6, elements=st.floats(-50, 50, allow_nan=False)),
        scale=st.floats(1e-3, 1e3),
    )
    def test_symmetry_and_scale_invariance(self, a, b, scale):
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            a = a + 1.0
            b = b - 1.0
        assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-12)
        assert cosine(a * scale, b) == pytest.approx(cosine(a, b), abs=1e-6)
        assert -1.0 <= cosine(a, b) <= 1.0


class TestSynth:
    def test_deterministic(self):
        m1, l1 = synth_dataset(k=2, n=5, d=8, spread=0.01, seed=1)
        m2, l2 = synth_dataset(k=2, n=5, d=8, spread=0.01, seed=1)
        assert m1.vectors.tobytes() == m2.vectors.tobytes()
        np.testing.assert_array_equal(l1, l2)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            synth_dataset(k=0, n=5, d=8, spread=0.1, seed=0)
        with pytest.raises(ValueError):
            synth_dataset(k=2, n=5, d=8, spread=0.0, seed=0)

    def test_tight_clusters_separate(self):
        # brute-force check: every point is closer (cosine) to all of its own
        # cluster than to any point of another cluster
        m, labels = synth_dataset(k=3, n=10, d=16, spread=0.0001, seed=3)
        sims = m.vectors.astype(np.float64) @ m.vectors.astype(np.float64).T
        for i in range(m.n):
            same = labels == labels[i]
            same_i = same.copy()
            same_i[i] = False
            assert sims[i][same_i].min() >= sims[i][~same].max()

    def test_one_nn_label_agreement(self):
        m, labels = synth_dataset(k=50, n=40, d=64, spread=0.05, seed=7)
        sims = m.vectors.astype(np.float64) @ m.vectors.astype(np.float64).T
        np.fill_diagonal(sims, -np.inf)
        nn = np.argmax(sims, axis=1)
        agreement = float(np.mean(labels[nn] == labels))
        assert agreement >= 0.99

    def test_centroids_match_generator(self):
        m, labels = synth_dataset(k=4, n=100, d=32, spread=0.01, seed=11)
        cents = synth_centroids(k=4, d=32, seed=11)
        # with tiny spread the empirical cluster mean stays close to the centroid
        for c in range(4):
            mean = m.vectors[labels == c].mean(axis=0)
            mean /= np.linalg.norm(mean)
            assert float(mean @ cents[c]) > 0.999


class TestMetadata:
    def test_load_and_resolve(self, tmp_path):
        write_metadata(
            tmp_path / "meta.jsonl",
            [
                {"id": 0, "title": "zero", "labels": ["a"]},
                {"id": 2, "description": "two"},
            ],
        )
        meta = load_metadata(
            tmp_path / "meta.jsonl",
            ids=np.array([0, 1, 2], dtype=np.uint64),
            media_url_template="http://x/{id}.ogg",
        )
        assert meta[0].title == "zero"
        assert meta[0].labels == ("a",)
        assert meta[2].media_url == "http://x/2.ogg"

    def test_unknown_id_rejected(self, tmp_path):
        write_metadata(tmp_path / "meta.jsonl", [{"id": 9}])
        with pytest.raises(StoreError, match="unknown id 9"):
            load_metadata(tmp_path / "meta.jsonl", ids=np.array([0, 1], dtype=np.uint64))
