"""Command line entry points.

``compute`` and ``dispatch`` are the two chain runtimes; ``bench``
sweeps configurations; ``inspect-partitions`` previews a split;
``serve`` hosts the HTTP front end and ``client`` talks to it.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .bench import BenchPlan, run_bench, shape_link
from .codec import CodecSpec
from .dispatcher import ChainConfig, NodeAddress, configure
from .errors import DeferError
from .metrics import CSV_HEADER, EnergyParams, csv_rows, per_node_energy
from .model import load_model, load_tensor, save_tensor
from .node import ComputeNode
from .partition import auto_cuts, partition_model, partition_summary
from .wire import ChunkConfig


@click.group()
def main():
    """Pipelined model-parallel inference over networked compute nodes."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--model-port", type=int, required=True)
@click.option("--weights-port", type=int, required=True)
@click.option("--data-port", type=int, required=True)
@click.option("--log-metrics", type=click.Path(dir_okay=False), default=None,
              help="Write this node's metrics JSON here on exit.")
@click.option("--chunk-bytes", type=int, default=512 * 1024, show_default=True)
@click.option("--queue-depth", type=int, default=16, show_default=True)
@click.option("--compute-delay-per-layer-ms", type=float, default=0.0,
              help="Injected synthetic compute per layer per inference.")
@click.option("--jitter-ms", type=float, default=0.0,
              help="Uniform random extra delay per inference.")
@click.option("--jitter-seed", type=int, default=None)
@click.option("--link-latency-ms", type=float, default=0.0)
@click.option("--link-bandwidth-mbps", type=float, default=0.0)
def compute(host, model_port, weights_port, data_port, log_metrics, chunk_bytes,
            queue_depth, compute_delay_per_layer_ms, jitter_ms, jitter_seed,
            link_latency_ms, link_bandwidth_mbps):
    """Run one compute node until the chain shuts down."""
    try:
        node = ComputeNode(
            host=host,
            model_port=model_port,
            weights_port=weights_port,
            data_port=data_port,
            queue_depth=queue_depth,
            chunk=ChunkConfig(chunk_bytes),
            compute_delay_per_layer_s=compute_delay_per_layer_ms / 1e3,
            jitter_max_s=jitter_ms / 1e3,
            jitter_seed=jitter_seed,
            **shape_link(link_latency_ms, link_bandwidth_mbps),
        )
        node.start()
    except OSError as e:
        click.echo(f"bind failed: {e}", err=True)
        sys.exit(2)
    click.echo(f"ports model={node.model_port} weights={node.weights_port} "
               f"data={node.data_port}")
    sys.stdout.flush()
    clean = node.run()
    if log_metrics:
        Path(log_metrics).write_text(node.metrics.to_json() + "\n")
    if not clean:
        click.echo(f"node exited uncleanly: {node.error}", err=True)
        sys.exit(1)


def _load_inputs(path: Path) -> list[tuple[str, np.ndarray]]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".tensor")
        if not files:
            raise click.ClickException(f"no .tensor files in {path}")
        return [(p.stem, load_tensor(p)) for p in files]
    return [(path.stem, load_tensor(path))]


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--nodes", "nodes_text", required=True,
              help="Comma-separated host:model_port:weights_port:data_port.")
@click.option("--inputs", "inputs_path", required=True, type=click.Path(exists=True),
              help="A .tensor file or a directory of them.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for result tensors (defaults alongside inputs).")
@click.option("--data-codec", default="bin32+lz", show_default=True)
@click.option("--weights-codec", default="bin32+lz", show_default=True)
@click.option("--arch-codec", default="text", show_default=True)
@click.option("--chunk-bytes", type=int, default=512 * 1024, show_default=True)
@click.option("--window", type=int, default=16, show_default=True)
@click.option("--metrics-csv", type=click.Path(dir_okay=False), default=None,
              help="Write the run's metrics CSV here (stdout otherwise).")
@click.option("--tdp-watts", type=float, default=15.0, show_default=True)
def dispatch(model_path, nodes_text, inputs_path, out_dir, data_codec,
             weights_codec, arch_codec, chunk_bytes, window, metrics_csv,
             tdp_watts):
    """Partition a model across nodes and stream inputs through the chain."""
    graph = load_model(model_path)
    try:
        addresses = tuple(NodeAddress.parse(t) for t in nodes_text.split(","))
        cfg = ChainConfig(
            nodes=addresses,
            arch_spec=CodecSpec.parse(arch_codec),
            weights_spec=CodecSpec.parse(weights_codec),
            data_spec=CodecSpec.parse(data_codec),
            chunk=ChunkConfig(chunk_bytes),
            window=window,
        )
    except ValueError as e:
        raise click.ClickException(str(e)) from e
    inputs = _load_inputs(Path(inputs_path))
    try:
        session = configure(graph, cfg)
        outputs = session.infer_stream([t for _, t in inputs])
        report = session.shutdown()
    except DeferError as e:
        raise click.ClickException(str(e)) from e
    target = Path(out_dir) if out_dir else Path(inputs_path).parent / "results"
    target.mkdir(parents=True, exist_ok=True)
    for (name, _), out in zip(inputs, outputs):
        save_tensor(out, target / f"{name}.tensor")
    click.echo(f"wrote {len(outputs)} results to {target}", err=True)

    data_spec = cfg.data_spec
    compression = "LZ" if data_spec.compression == "LZ" else "Uncompressed"
    rows = [CSV_HEADER] + csv_rows(
        Path(model_path).name, len(addresses), data_spec.serialization,
        compression, report, EnergyParams(tdp_watts=tdp_watts))
    text = "\n".join(rows) + "\n"
    if metrics_csv:
        Path(metrics_csv).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--plan", "plan_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML (or, on Python 3.11+, TOML) bench plan.")
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False))
@click.option("--verbose", "-v", is_flag=True)
def bench(plan_path, out_csv, verbose):
    """Sweep node counts x codec configs and write the metrics CSV."""
    try:
        plan = BenchPlan.load(plan_path)
        log = (lambda s: click.echo(s, err=True)) if verbose else (lambda s: None)
        _, summary = run_bench(plan, out_csv, log=log)
    except DeferError as e:
        raise click.ClickException(str(e)) from e
    click.echo(f"wrote {out_csv}", err=True)
    for (k, name), tput in summary.items():
        click.echo(f"k={k:<2d} {name:<10s} {tput:8.3f} cycles/s", err=True)


@main.command("inspect-partitions")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("-k", "--nodes", "k", type=int, required=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
def inspect_partitions(model_path, k, csv_path):
    """Show how a model would split across k nodes."""
    graph = load_model(model_path)
    try:
        parts = partition_model(graph, auto_cuts(graph, k))
    except DeferError as e:
        raise click.ClickException(str(e)) from e
    rows = partition_summary(parts)
    for row in rows:
        click.echo(
            f"partition {row['index']}: {row['layer_count']} layers, "
            f"{row['weight_bytes']} weight bytes, "
            f"input shape {tuple(row['input_shape'])}")
        click.echo(f"  layers: {', '.join(row['layers'])}")
    if csv_path:
        lines = ["index,layer_count,weight_bytes,input_shape,layers"]
        for row in rows:
            shape = "x".join(str(d) for d in row["input_shape"])
            lines.append(f"{row['index']},{row['layer_count']},"
                         f"{row['weight_bytes']},{shape},"
                         f"{' '.join(row['layers'])}")
        Path(csv_path).write_text("\n".join(lines) + "\n")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Host the dispatcher behind an HTTP API."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port, log_level="info")


@main.group()
@click.option("--url", default="http://127.0.0.1:8000", show_default=True)
@click.pass_context
def client(ctx, url):
    """Thin HTTP client for a running ``defer serve``."""
    ctx.obj = url.rstrip("/")


def _request(url: str, method: str, path: str, payload: dict | None = None):
    import httpx

    r = httpx.request(method, url + path, json=payload, timeout=120.0)
    if r.status_code >= 400:
        detail = r.json().get("detail", r.text) if r.content else r.text
        raise click.ClickException(f"{r.status_code}: {detail}")
    return r.json()


@client.command("configure")
@click.option("--model", "model_path", required=True)
@click.option("--nodes", "nodes_text", required=True,
              help="Comma-separated host:mp:wp:dp (paths are server-local).")
@click.option("--data-codec", default="bin32+lz", show_default=True)
@click.option("--weights-codec", default="bin32+lz", show_default=True)
@click.pass_obj
def client_configure(url, model_path, nodes_text, data_codec, weights_codec):
    nodes = []
    for text in nodes_text.split(","):
        a = NodeAddress.parse(text)
        nodes.append({"host": a.host, "model_port": a.model_port,
                      "weights_port": a.weights_port, "data_port": a.data_port})
    doc = _request(url, "POST", "/chain/configure", {
        "model_path": model_path, "nodes": nodes,
        "data_codec": data_codec, "weights_codec": weights_codec,
    })
    click.echo(json.dumps(doc, indent=2))


@client.command("infer")
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", type=click.Path(dir_okay=False),
              default=None)
@click.pass_obj
def client_infer(url, input_path, output_path):
    t = load_tensor(input_path)
    doc = _request(url, "POST", "/infer", {
        "tensor": {"shape": list(t.shape),
                   "values": [float(v) for v in t.reshape(-1)]},
    })
    out = np.array(doc["tensor"]["values"], dtype=np.float32).reshape(
        doc["tensor"]["shape"])
    if output_path:
        save_tensor(out, output_path)
        click.echo(f"sequence {doc['sequence']} -> {output_path}", err=True)
    else:
        click.echo(json.dumps(doc))


@client.command("shutdown")
@click.pass_obj
def client_shutdown(url):
    click.echo(json.dumps(_request(url, "POST", "/chain/shutdown"), indent=2))


@client.command("health")
@click.pass_obj
def client_health(url):
    click.echo(json.dumps(_request(url, "GET", "/health")))


if __name__ == "__main__":
    main()
