"""Operator CLI: synth -> ingest -> index -> project -> tile -> serve, plus
offline search.

Exit codes: 0 success, 1 validation failure, 2 missing prerequisite artifact,
3 runtime failure. Every stage writes plain files into the dataset root so
the pipeline is inspectable and resumable. Flags mirror config fields; a
JSON --config supplies defaults and ATLAS_* environment variables override
the file (explicit flags win).
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .ann import (
    DEFAULT_LEAF_SIZE,
    DEFAULT_N_TREES,
    build_forest,
    load_forest,
    query,
    save_forest,
)
from .config import ENV_PREFIX, ServiceConfig, load_config
from .embedder import EmbedderError, make_embedder
from .service import (
    FOREST_FILE,
    NORMALIZED_EMBEDDINGS,
    PROJECTION_FILE,
    PYRAMID_DIR,
    AtlasService,
    create_app,
    load_dataset_state,
)
from .store import (
    DatasetManifest,
    load_embeddings,
    normalize_rows,
    parse_manifest,
    read_embeddings,
    synth_centroids,
    synth_dataset,
    write_embeddings,
    write_manifest,
    write_metadata,
)
from .tiles import DEFAULT_TILE_BUDGET, build_pyramid, write_pyramid
from .tsne import (
    TsneConfig,
    TsneDivergenceError,
    read_projection,
    run_tsne,
    write_projection,
)

EXIT_VALIDATION = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def pipeline_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as exc:
            _fail(EXIT_MISSING_ARTIFACT, str(exc))
        except (ValueError, KeyError) as exc:
            _fail(EXIT_VALIDATION, str(exc))
        except TsneDivergenceError as exc:
            _fail(EXIT_RUNTIME, str(exc))
        except EmbedderError as exc:
            _fail(EXIT_RUNTIME, str(exc))

    return wrapper


@click.group()
def cli():
    """Embedding atlas pipeline and server."""


def _root_manifest(root: Path) -> DatasetManifest:
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing {manifest_path}; run ingest on a dataset root")
    return parse_manifest(manifest_path)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run {stage} first")
    return path


@cli.command("synth")
@click.option("--clusters", "-k", "k", type=int, required=True, help="cluster count")
@click.option("--per-cluster", "-n", "n", type=int, required=True, help="points per cluster")
@click.option("--dim", "-d", "d", type=int, required=True, help="embedding dimension")
@click.option("--spread", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--media-template", type=str, default=None, help="media URL template with {id}")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@pipeline_command
def cmd_synth(k, n, d, spread, seed, media_template, out):
    """Generate a synthetic clustered dataset root."""
    matrix, labels = synth_dataset(k=k, n=n, d=d, spread=spread, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.aaem", matrix)
    write_metadata(
        out / "metadata.jsonl",
        [
            {
                "id": int(pid),
                "title": f"sample {int(pid)}",
                "labels": [f"cluster-{int(label)}"],
            }
            for pid, label in zip(matrix.ids, labels)
        ],
    )
    manifest = DatasetManifest(
        name=out.name,
        point_count=matrix.n,
        dim=matrix.dim,
        embeddings_path="embeddings.aaem",
        metadata_path="metadata.jsonl",
        media_url_template=media_template,
    )
    write_manifest(out / "manifest.json", manifest)
    truth = {
        "labels": labels.tolist(),
        "centroids": synth_centroids(k=k, d=d, seed=seed).tolist(),
    }
    (out / "truth.json").write_text(json.dumps(truth))
    click.echo(f"synth: wrote {matrix.n} points (k={k}, d={d}) to {out}")


@cli.command("ingest")
@click.argument("manifest_path", type=click.Path(path_type=Path))
@pipeline_command
def cmd_ingest(manifest_path):
    """Validate and normalize the embeddings a manifest references."""
    manifest = parse_manifest(manifest_path)
    root = manifest_path.parent
    matrix = load_embeddings(manifest, root)
    matrix = normalize_rows(matrix)
    write_embeddings(root / NORMALIZED_EMBEDDINGS, matrix)
    click.echo(
        f"ingest: {manifest.name}: {matrix.n} points, dim {matrix.dim}, "
        f"normalized store at {root / NORMALIZED_EMBEDDINGS}"
    )


@cli.command("index")
@click.argument("root", type=click.Path(path_type=Path))
@click.option("--n-trees", type=int, default=DEFAULT_N_TREES, show_default=True)
@click.option("--leaf-size", type=int, default=DEFAULT_LEAF_SIZE, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, envvar=ENV_PREFIX + "SEED")
@pipeline_command
def cmd_index(root, n_trees, leaf_size, seed):
    """Build the ANN forest over the ingested store."""
    _root_manifest(root)
    store = _require(root / NORMALIZED_EMBEDDINGS, "ingest")
    matrix = replace(read_embeddings(store), normalized=True)
    forest = build_forest(matrix, n_trees=n_trees, leaf_size=leaf_size, seed=seed)
    save_forest(root / FOREST_FILE, forest)
    click.echo(
        f"index: {n_trees} trees, leaf size {leaf_size}, seed {seed} "
        f"-> {root / FOREST_FILE}"
    )


@cli.command("project")
@click.argument("root", type=click.Path(path_type=Path))
@click.option("--perplexity", type=float, default=30.0, show_default=True)
@click.option("--theta", type=float, default=0.5, show_default=True)
@click.option("--iterations", type=int, default=1000, show_default=True)
@click.option("--learning-rate", type=float, default=200.0, show_default=True)
@click.option("--early-exaggeration", type=float, default=12.0, show_default=True)
@click.option("--early-exaggeration-iters", type=int, default=250, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, envvar=ENV_PREFIX + "SEED")
@pipeline_command
def cmd_project(
    root, perplexity, theta, iterations, learning_rate, early_exaggeration,
    early_exaggeration_iters, seed,
):
    """Project the store to 2D; prints KL every 50 iterations."""
    _root_manifest(root)
    store = _require(root / NORMALIZED_EMBEDDINGS, "ingest")
    forest_path = _require(root / FOREST_FILE, "index")
    matrix = replace(read_embeddings(store), normalized=True)
    forest = load_forest(forest_path, expected_dim=matrix.dim)
    config = TsneConfig(
        perplexity=perplexity,
        theta=theta,
        iterations=iterations,
        learning_rate=learning_rate,
        early_exaggeration_factor=early_exaggeration,
        early_exaggeration_iters=early_exaggeration_iters,
        momentum_switch_iter=early_exaggeration_iters,
        seed=seed,
    )
    projection = run_tsne(
        matrix,
        forest,
        config,
        progress=lambda it, kl: click.echo(f"project: iter {it} KL {kl:.6f}"),
    )
    write_projection(root / PROJECTION_FILE, projection)
    click.echo(f"project: wrote {projection.n} coords -> {root / PROJECTION_FILE}")


@cli.command("tile")
@click.argument("root", type=click.Path(path_type=Path))
@click.option("--tile-budget", type=int, default=DEFAULT_TILE_BUDGET, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, envvar=ENV_PREFIX + "SEED")
@pipeline_command
def cmd_tile(root, tile_budget, seed):
    """Build the tile pyramid from the projection."""
    _root_manifest(root)
    projection = read_projection(_require(root / PROJECTION_FILE, "project"))
    pyramid = build_pyramid(projection, tile_budget=tile_budget, seed=seed)
    write_pyramid(root / PYRAMID_DIR, pyramid)
    click.echo(
        f"tile: {len(pyramid.tiles)} tiles, max zoom {pyramid.manifest.max_zoom} "
        f"-> {root / PYRAMID_DIR}"
    )


@cli.command("serve")
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--host", type=str, default=None)
@click.option("--port", type=int, default=None)
@click.option(
    "--dataset-root",
    "dataset_roots",
    type=click.Path(path_type=Path),
    multiple=True,
    help="dataset root directory; repeatable",
)
@click.option("--embedder-url", type=str, default=None)
@click.option("--check", is_flag=True, help="load datasets, report, and exit")
@pipeline_command
def cmd_serve(config_path, host, port, dataset_roots, embedder_url, check):
    """Serve the atlas API over HTTP."""
    config = load_config(config_path)
    if host is not None:
        config.listen_host = host
    if port is not None:
        config.listen_port = port
    if embedder_url is not None:
        config.embedder_url = embedder_url
    roots = [Path(r) for r in dataset_roots] or [Path(r) for r in config.dataset_roots]
    if not roots:
        raise ValueError("no dataset roots given (--dataset-root or config)")
    service = AtlasService(config)
    for root in roots:
        name = service.load_root(root)
        state = service.datasets[name]
        click.echo(f"serve: loaded '{name}' ({state.matrix.n} points, dim {state.matrix.dim})")
    if check:
        click.echo("serve: check complete")
        return
    import uvicorn

    uvicorn.run(create_app(service), host=config.listen_host, port=config.listen_port)


@cli.command("search")
@click.argument("root", type=click.Path(path_type=Path))
@click.option("--text", type=str, default=None)
@click.option("--audio-file", type=click.Path(path_type=Path), default=None)
@click.option("--id", "point_id", type=int, default=None)
@click.option("--k", type=int, default=10, show_default=True)
@click.option(
    "--embedder-url", type=str, default="mock:", envvar=ENV_PREFIX + "EMBEDDER_URL"
)
@pipeline_command
def cmd_search(root, text, audio_file, point_id, k, embedder_url):
    """Query a prepared dataset root; prints a result table."""
    given = [q for q in (text, audio_file, point_id) if q is not None]
    if len(given) != 1:
        raise ValueError("provide exactly one of --text, --audio-file, --id")
    state = load_dataset_state(root)
    if point_id is not None:
        # self-retrieval included: the queried point lists first
        row = state.matrix.row_of(point_id)
        q = state.matrix.vectors[row].astype(np.float64)
        q /= np.linalg.norm(q)
    elif text is not None:
        embedder = make_embedder(embedder_url)
        q = embedder.embed_text([text], state.matrix.dim)[0].astype(np.float64)
    else:
        payload = Path(audio_file).read_bytes()
        embedder = make_embedder(embedder_url)
        q = embedder.embed_audio(payload, Path(audio_file).suffix.lstrip("."), state.matrix.dim)
        q = q.astype(np.float64)
    hits = query(state.forest, state.matrix, q, k=min(k, state.matrix.n))
    click.echo(f"{'rank':>4}  {'id':>12}  {'similarity':>10}  title")
    for pos, (row, sim) in enumerate(hits, start=1):
        pid = int(state.matrix.ids[row])
        meta = state.metadata.get(pid)
        title = meta.title if meta and meta.title else ""
        click.echo(f"{pos:>4}  {pid:>12}  {sim:>10.6f}  {title}")


def main(argv: list[str] | None = None) -> None:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_VALIDATION)
    except click.Abort:
        sys.exit(EXIT_RUNTIME)
    sys.exit(0)


if __name__ == "__main__":
    main()
