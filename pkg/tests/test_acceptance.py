"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The expensive fixtures
(10k-point pipeline, 1M-point pyramid) are session-scoped and shared.
"""

import base64
import contextlib
import json
import threading
import time

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from embedatlas.ann import (
    build_forest,
    exact_knn,
    load_forest,
    query,
    recall_at_k,
    save_forest,
)
from embedatlas.cli import cli
from embedatlas.config import ServiceConfig
from embedatlas.service import AtlasService, DatasetState, create_app
from embedatlas.store import (
    DatasetManifest,
    EmbeddingMatrix,
    normalize_rows,
    read_embeddings,
    synth_centroids,
    synth_dataset,
    write_embeddings,
)
from embedatlas.tiles import (
    Tile,
    TileKey,
    assign_ranks,
    build_pyramid,
    deserialize_tile,
    serialize_tile,
    tiles_for_viewport,
)
from embedatlas.tsne import (
    Projection2D,
    SparseAffinities,
    TsneConfig,
    bh_gradient,
    exact_gradient,
    first_post_exaggeration_index,
    kl_divergence,
    read_projection,
    run_tsne,
    write_projection,
)
from embedatlas.zeroshot import ClassSet, classify, unassigned_assignment


@contextlib.contextmanager
def criterion(name):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE FAIL: {name}")
        raise
    print(f"\nACCEPTANCE PASS: {name} ({time.monotonic() - started:.1f}s)")


def seeded_queries(matrix, count, seed, noise=0.1):
    """Queries near the data manifold: stored points plus Gaussian noise,
    renormalized - the distribution semantic search actually sees."""
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, matrix.n, size=count)
    qs = matrix.vectors[rows].astype(np.float64)
    qs += noise * rng.standard_normal(qs.shape)
    return qs / np.linalg.norm(qs, axis=1, keepdims=True)


def random_affinities(n, neighbors, seed):
    rng = np.random.default_rng(seed)
    rows = np.repeat(np.arange(n), neighbors)
    cols = rng.integers(0, n, size=n * neighbors)
    keep = rows != cols
    vals = rng.random(n * neighbors)[keep]
    return SparseAffinities.from_conditional(rows[keep], cols[keep], vals, n)


def test_ann_recall():
    with criterion(
        "ANN recall@10 >= 0.90 at search_k=2000, non-decreasing in search_k, < 60 s"
    ):
        started = time.monotonic()
        matrix, _ = synth_dataset(k=20, n=500, d=64, spread=0.1, seed=42)
        forest = build_forest(matrix)  # default n_trees=20, leaf_size=32
        queries = seeded_queries(matrix, 100, seed=123)

        exact = [[i for i, _ in exact_knn(matrix, q, k=10)] for q in queries]

        def mean_recall(search_k):
            total = 0.0
            for q, ex in zip(queries, exact):
                approx = [i for i, _ in query(forest, matrix, q, k=10, search_k=search_k)]
                total += recall_at_k(approx, ex)
            return total / len(queries)

        grid = [200, 500, 1000, 2000, matrix.n]
        recalls = [mean_recall(sk) for sk in grid]
        elapsed = time.monotonic() - started

        print(f"  recalls over search_k {grid}: {[round(r, 4) for r in recalls]}")
        assert recalls[grid.index(2000)] >= 0.90
        assert all(b >= a - 1e-9 for a, b in zip(recalls, recalls[1:])), recalls
        assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_tsne_gradient_correctness():
    with criterion(
        "t-SNE gradients: finite-difference match (20 instances, rel 1e-4), "
        "bh(theta=0) within 1e-9, bh(theta=0.5) cosine >= 0.99 at N=500"
    ):
        h = 1e-5
        for seed in range(20):
            n = 30
            P = random_affinities(n, 5, seed=seed)
            Y = np.random.default_rng(1000 + seed).normal(size=(n, 2))
            g = exact_gradient(Y, P)
            for i in range(n):
                for c in range(2):
                    yp = Y.copy()
                    yp[i, c] += h
                    ym = Y.copy()
                    ym[i, c] -= h
                    fd = (kl_divergence(P, yp) - kl_divergence(P, ym)) / (2 * h)
                    if abs(g[i, c]) < 1e-8:
                        assert abs(fd - g[i, c]) < 1e-8
                    else:
                        assert abs(fd - g[i, c]) / abs(g[i, c]) < 1e-4

            np.testing.assert_allclose(bh_gradient(Y, P, 0.0), g, atol=1e-9)

        n = 500
        P = random_affinities(n, 10, seed=77)
        Y = np.random.default_rng(77).normal(size=(n, 2))
        g_exact = exact_gradient(Y, P)
        g_bh = bh_gradient(Y, P, 0.5)
        cos = float(
            np.dot(g_exact.ravel(), g_bh.ravel())
            / (np.linalg.norm(g_exact) * np.linalg.norm(g_bh))
        )
        print(f"  theta=0.5 flattened-gradient cosine: {cos:.6f}")
        assert cos >= 0.99


def test_projection_quality():
    with criterion(
        "projection: 1-NN label purity >= 0.95 on 3 tight clusters, "
        "final KL below first post-exaggeration KL, < 120 s"
    ):
        started = time.monotonic()
        matrix, labels = synth_dataset(k=3, n=50, d=16, spread=0.01, seed=5)
        forest = build_forest(matrix, n_trees=10, leaf_size=16, seed=1)
        config = TsneConfig(perplexity=30.0, iterations=1000, seed=3)
        projection = run_tsne(matrix, forest, config)
        elapsed = time.monotonic() - started

        coords = projection.coords.astype(np.float64)
        d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        purity = float((labels[d2.argmin(axis=1)] == labels).mean())

        first_post = float(projection.kl_history[first_post_exaggeration_index(config)])
        final = float(projection.kl_history[-1])
        print(f"  purity={purity:.3f} first-post-EE KL={first_post:.4f} final KL={final:.4f}")
        assert purity >= 0.95
        assert final < first_post
        assert elapsed < 120.0, f"took {elapsed:.1f}s"


def test_zero_shot_accuracy():
    with criterion("zero-shot with true centroids: accuracy 1.0 on 50 tight clusters"):
        matrix, labels = synth_dataset(k=50, n=40, d=64, spread=0.01, seed=9)
        class_set = ClassSet(
            names=tuple(f"class-{i}" for i in range(50)),
            embeddings=synth_centroids(k=50, d=64, seed=9),
        )
        assignment = classify(matrix, class_set)
        accuracy = float((assignment.class_index == labels).mean())
        print(f"  accuracy={accuracy}")
        assert accuracy == 1.0


def test_tile_partition():
    with criterion(
        "tiles at N=100k, budget 1000: exact partition, budget below cap, "
        "byte-identical rebuild, 1000 random tiles round-trip"
    ):
        n = 100_000
        rng = np.random.default_rng(31)
        projection = Projection2D(
            ids=np.arange(n, dtype=np.uint64),
            coords=rng.uniform(-50, 50, size=(n, 2)).astype(np.float32),
        )
        pyramid = build_pyramid(projection, tile_budget=1000, seed=8)

        all_ids = np.concatenate([t.ids for t in pyramid.tiles.values()])
        assert all_ids.size == n
        np.testing.assert_array_equal(np.sort(all_ids), projection.ids)

        for key, tile in pyramid.tiles.items():
            if key.z < 24:
                assert tile.count <= 1000

        again = build_pyramid(projection, tile_budget=1000, seed=8)
        assert set(pyramid.tiles) == set(again.tiles)
        for key in pyramid.tiles:
            assert serialize_tile(pyramid.tiles[key]) == serialize_tile(again.tiles[key])

        keys = sorted(pyramid.tiles)
        picks = rng.choice(len(keys), size=1000, replace=True)
        for pick in picks:
            tile = pyramid.tiles[keys[pick]]
            buf = serialize_tile(tile)
            assert serialize_tile(deserialize_tile(buf)) == buf
        print(f"  {len(pyramid.tiles)} tiles, max zoom {pyramid.manifest.max_zoom}")


@pytest.fixture(scope="session")
def pipeline_10k(tmp_path_factory):
    """Full CLI pipeline over a 10,000-point synthetic dataset."""
    root = tmp_path_factory.mktemp("accept") / "tenk"
    runner = CliRunner()
    steps = [
        ["synth", "-k", "5", "-n", "2000", "-d", "64", "--spread", "0.05",
         "--seed", "17", "--out", str(root)],
        ["ingest", str(root / "manifest.json")],
        ["index", str(root), "--seed", "4"],
        ["project", str(root), "--perplexity", "30", "--iterations", "250",
         "--early-exaggeration-iters", "100", "--seed", "6"],
        ["tile", str(root), "--tile-budget", "500", "--seed", "2"],
    ]
    for step in steps:
        result = runner.invoke(cli, step, catch_exceptions=False)
        assert result.exit_code == 0, f"{step} failed: {result.output}"
    truth = json.loads((root / "truth.json").read_text())
    return root, np.array(truth["labels"]), np.array(truth["centroids"])


def test_service_end_to_end(pipeline_10k):
    with criterion(
        "service e2e on 10k points: centroid text query >= 9/10 same-cluster, "
        "9 self-excluding neighbors, no mixed-version tile responses under "
        "32 concurrent readers"
    ):
        root, labels, centroids = pipeline_10k
        service = AtlasService(ServiceConfig())
        service.load_root(root)
        app = create_app(service)
        client = TestClient(app)

        # semantic search with a centroid-derived text query
        for cluster in (0, 3):
            text = "vector:" + json.dumps([float(x) for x in centroids[cluster]])
            body = client.post(
                "/api/datasets/tenk/search", json={"text": text, "k": 10}
            ).json()
            hits = body["results"]
            assert len(hits) == 10
            same = sum(1 for h in hits if labels[h["id"]] == cluster)
            print(f"  cluster {cluster}: {same}/10 same-cluster results")
            assert same >= 9

        # audio-query route is deterministic end to end
        payload = base64.b64encode(b"synthetic-waveform").decode()
        first = client.post(
            "/api/datasets/tenk/search",
            json={"audio_base64": payload, "audio_format": "wav", "k": 5},
        ).json()
        second = client.post(
            "/api/datasets/tenk/search",
            json={"audio_base64": payload, "audio_format": "wav", "k": 5},
        ).json()
        assert first == second

        # detail view: 9 neighbors, self excluded
        detail = client.get("/api/datasets/tenk/points/1234").json()
        assert len(detail["neighbors"]) == 9
        assert all(n["id"] != 1234 for n in detail["neighbors"])

        # reclassification under concurrent tile readers: every response is
        # wholly one version
        v1 = client.post(
            "/api/datasets/tenk/classify", json={"class_names": ["first"]}
        ).json()["class_set_version"]
        assert v1 == 1
        state_v1 = service.datasets["tenk"]
        snapshot = {1: dict(state_v1.tile_bytes)}

        keys = sorted(state_v1.tile_bytes)
        stop = threading.Event()
        observations = []
        errors = []

        def reader(worker):
            local = TestClient(app)
            i = worker
            while not stop.is_set():
                key = keys[i % len(keys)]
                response = local.get(
                    f"/api/datasets/tenk/tiles/{key.z}/{key.x}/{key.y}"
                )
                if response.status_code != 200:
                    errors.append(response.status_code)
                else:
                    observations.append(
                        (int(response.headers["X-Class-Version"]), key, response.content)
                    )
                i += 7

        threads = [threading.Thread(target=reader, args=(w,)) for w in range(32)]
        for t in threads:
            t.start()
        class_names = ["vector:" + json.dumps([float(x) for x in c]) for c in centroids]
        v2 = client.post(
            "/api/datasets/tenk/classify", json={"class_names": class_names}
        ).json()["class_set_version"]
        time.sleep(0.3)
        stop.set()
        for t in threads:
            t.join(timeout=15)
        assert v2 == 2
        snapshot[2] = dict(service.datasets["tenk"].tile_bytes)

        assert not errors
        assert observations
        versions = {v for v, _, _ in observations}
        assert versions <= {1, 2}, versions
        for version, key, content in observations:
            assert content == snapshot[version][key], (
                f"tile {key} bytes do not match version {version} snapshot"
            )
        print(
            f"  {len(observations)} concurrent tile reads, versions seen: {sorted(versions)}"
        )

        # classification with the true centroids recovers the generator labels
        assignment = service.datasets["tenk"].assignment
        assert (assignment.class_index == labels).all()


@pytest.fixture(scope="session")
def million_point_service():
    """1M random points pre-tiled and served; matrix and forest are minimal
    real artifacts since only the tile path is exercised."""
    n = 1_000_000
    rng = np.random.default_rng(64)
    vectors = rng.standard_normal((n, 4)).astype(np.float32)
    matrix = normalize_rows(EmbeddingMatrix(ids=np.arange(n, dtype=np.uint64), vectors=vectors))
    forest = build_forest(matrix, n_trees=1, leaf_size=n, seed=0)
    projection = Projection2D(
        ids=matrix.ids, coords=rng.uniform(-100, 100, size=(n, 2)).astype(np.float32)
    )
    pyramid = build_pyramid(projection, tile_budget=1000, seed=5)
    state = DatasetState(
        manifest=DatasetManifest(
            name="million", point_count=n, dim=4, embeddings_path="unused.aaem"
        ),
        matrix=matrix,
        forest=forest,
        projection=projection,
        metadata={},
        pyramid=pyramid,
        tile_bytes={k: serialize_tile(t) for k, t in pyramid.tiles.items()},
        class_set=None,
        assignment=unassigned_assignment(n),
        labels=[],
        version=0,
    )
    service = AtlasService(ServiceConfig())
    service.add_dataset(state)
    return service, pyramid


def test_scalability_proxy(million_point_service):
    with criterion(
        "scalability: 1M points pre-tiled, p99 tile latency < 50 ms over 1000 "
        "random viewports, payload bounded by tiles x budget"
    ):
        service, pyramid = million_point_service
        client = TestClient(create_app(service))
        extent = pyramid.manifest.extent
        max_zoom = pyramid.manifest.max_zoom
        budget = pyramid.manifest.tile_budget
        rng = np.random.default_rng(7)

        latencies = []
        for _ in range(1000):
            z = int(rng.integers(0, max_zoom + 1))
            span_x = min(extent.width, extent.width / (1 << z) * float(rng.uniform(1.0, 2.5)))
            span_y = min(extent.height, extent.height / (1 << z) * float(rng.uniform(1.0, 2.5)))
            x0 = float(rng.uniform(extent.min_x, extent.max_x - span_x))
            y0 = float(rng.uniform(extent.min_y, extent.max_y - span_y))
            keys = tiles_for_viewport(extent, (x0, y0, x0 + span_x, y0 + span_y), z)
            assert keys, "viewport inside the extent must intersect tiles"
            payload_points = 0
            for key in keys:
                t0 = time.perf_counter()
                response = client.get(
                    f"/api/datasets/million/tiles/{key.z}/{key.x}/{key.y}"
                )
                latencies.append(time.perf_counter() - t0)
                assert response.status_code == 200
                payload_points += deserialize_tile(response.content).count
            assert payload_points <= len(keys) * budget

        latencies = np.array(latencies)
        p50 = float(np.percentile(latencies, 50) * 1000)
        p99 = float(np.percentile(latencies, 99) * 1000)
        print(f"  {latencies.size} tile requests, p50={p50:.2f}ms p99={p99:.2f}ms")
        assert p99 < 50.0


def test_format_round_trips(tmp_path):
    with criterion("format round-trips bit-exact: AAEM, AAFO, AAPJ, AATL"):
        rng = np.random.default_rng(2024)

        # AAEM: embeddings container
        for trial in range(20):
            n = int(rng.integers(1, 200))
            d = int(rng.integers(1, 32))
            matrix = EmbeddingMatrix(
                ids=np.sort(rng.choice(2**60, size=n, replace=False)).astype(np.uint64),
                vectors=rng.standard_normal((n, d)).astype(np.float32),
            )
            path = tmp_path / "m.aaem"
            write_embeddings(path, matrix)
            back = read_embeddings(path)
            assert back.ids.tobytes() == matrix.ids.tobytes()
            assert back.vectors.tobytes() == matrix.vectors.tobytes()
            write_embeddings(path, back)
            second = path.read_bytes()
            write_embeddings(path, matrix)
            assert path.read_bytes() == second

        # AAFO: forest files
        for trial in range(5):
            m, _ = synth_dataset(
                k=3, n=60, d=8, spread=0.2, seed=int(rng.integers(0, 1000))
            )
            forest = build_forest(m, n_trees=3, leaf_size=8, seed=trial)
            path = tmp_path / "f.aafo"
            save_forest(path, forest)
            first = path.read_bytes()
            save_forest(path, load_forest(path))
            assert path.read_bytes() == first

        # AAPJ: projections
        for trial in range(20):
            n = int(rng.integers(1, 300))
            proj = Projection2D(
                ids=np.arange(n, dtype=np.uint64),
                coords=rng.standard_normal((n, 2)).astype(np.float32),
                kl_history=rng.random(int(rng.integers(0, 9))).astype(np.float32),
            )
            path = tmp_path / "p.aapj"
            write_projection(path, proj)
            first = path.read_bytes()
            write_projection(path, read_projection(path))
            assert path.read_bytes() == first

        # AATL: tiles
        for trial in range(100):
            n = int(rng.integers(0, 400))
            z = int(rng.integers(0, 25))
            side = 1 << z
            tile = Tile(
                key=TileKey(z, int(rng.integers(0, side)), int(rng.integers(0, side))),
                ids=np.sort(rng.choice(2**50, size=n, replace=False)).astype(np.uint64),
                x=rng.standard_normal(n).astype(np.float32),
                y=rng.standard_normal(n).astype(np.float32),
                class_index=rng.integers(0, 2**16, size=n).astype(np.uint16),
                rank=rng.random(n).astype(np.float32),
            )
            buf = serialize_tile(tile)
            assert serialize_tile(deserialize_tile(buf)) == buf
