"""HTTP front end for the dispatcher: configure a chain once, then let
any number of clients push tensors through it.

The service owns at most one live chain.  POST /infer submissions
pipeline through the chain concurrently; each request waits only for its
own sequence number.
"""

from __future__ import annotations

import threading
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .codec import CodecSpec
from .dispatcher import ChainConfig, ChainSession, NodeAddress, configure
from .errors import DeferError
from .metrics import EnergyParams, MetricsReport, per_node_energy
from .model import as_tensor, load_model
from .partition import auto_cuts, partition_model, partition_summary
from .wire import ChunkConfig


class TensorModel(BaseModel):
    shape: list[int] = Field(min_length=1)
    values: list[float]

    @classmethod
    def from_numpy(cls, t: np.ndarray) -> "TensorModel":
        return cls(shape=list(t.shape), values=[float(v) for v in t.reshape(-1)])

    def to_numpy(self) -> np.ndarray:
        t = as_tensor(np.array(self.values, dtype=np.float32))
        expected = int(np.prod(self.shape))
        if t.size != expected:
            raise HTTPException(422, f"{t.size} values for shape {self.shape}")
        return t.reshape(self.shape)


class NodeSpec(BaseModel):
    host: str
    model_port: int
    weights_port: int
    data_port: int

    def to_address(self) -> NodeAddress:
        return NodeAddress(self.host, self.model_port,
                           self.weights_port, self.data_port)


class ConfigureRequest(BaseModel):
    model_path: str
    nodes: list[NodeSpec] = Field(min_length=1)
    arch_codec: str = "text"
    weights_codec: str = "bin32+lz"
    data_codec: str = "bin32+lz"
    window: int = 16
    chunk_bytes: int = 512 * 1024


class PartitionInfo(BaseModel):
    index: int
    layers: list[str]
    layer_count: int
    weight_bytes: int
    input_shape: list[int]
    output_shape: list[int]


class ConfigureResponse(BaseModel):
    nodes: int
    partitions: list[PartitionInfo]


class InferRequest(BaseModel):
    tensor: TensorModel
    timeout_seconds: float = 60.0


class InferResponse(BaseModel):
    sequence: int
    tensor: TensorModel


class MetricsResponse(BaseModel):
    cycles_completed: int
    window_seconds: float
    throughput_cps: float
    overhead_seconds: float
    payload_bytes: dict[str, int]
    per_node_energy_joules: list[float]


class InspectRequest(BaseModel):
    model_path: str
    nodes: int = Field(ge=1)


class InspectResponse(BaseModel):
    partitions: list[PartitionInfo]


class _State:
    def __init__(self):
        self.lock = threading.Lock()
        self.session: ChainSession | None = None
        self.summary: list[dict] = []


def _report_response(report: MetricsReport) -> MetricsResponse:
    return MetricsResponse(
        cycles_completed=report.cycles_completed,
        window_seconds=report.window_seconds,
        throughput_cps=report.throughput,
        overhead_seconds=report.overhead_seconds,
        payload_bytes=report.payload_bytes,
        per_node_energy_joules=per_node_energy(report, EnergyParams()),
    )


def create_app() -> FastAPI:
    state = _State()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        with state.lock:
            if state.session is not None:
                try:
                    state.session.shutdown(timeout=10.0)
                except DeferError:
                    state.session.abort()
                state.session = None

    app = FastAPI(title="defer dispatcher", version=__version__,
                  lifespan=lifespan)

    @app.get("/health")
    def health():
        return {"status": "ok", "chain_configured": state.session is not None}

    @app.post("/chain/configure", response_model=ConfigureResponse)
    def chain_configure(req: ConfigureRequest):
        try:
            graph = load_model(req.model_path)
            cfg = ChainConfig(
                nodes=tuple(n.to_address() for n in req.nodes),
                arch_spec=CodecSpec.parse(req.arch_codec),
                weights_spec=CodecSpec.parse(req.weights_codec),
                data_spec=CodecSpec.parse(req.data_codec),
                chunk=ChunkConfig(req.chunk_bytes),
                window=req.window,
            )
        except (OSError, ValueError, DeferError) as e:
            raise HTTPException(422, str(e)) from e
        with state.lock:
            if state.session is not None:
                raise HTTPException(409, "a chain is already configured")
            try:
                session = configure(graph, cfg)
            except DeferError as e:
                raise HTTPException(502, str(e)) from e
            state.session = session
            state.summary = partition_summary(session.partitions)
        return ConfigureResponse(
            nodes=len(req.nodes),
            partitions=[PartitionInfo(**row) for row in state.summary])

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        session = state.session
        if session is None:
            raise HTTPException(409, "no chain configured")
        tensor = req.tensor.to_numpy()
        try:
            seq = session.submit(tensor)
            out = session.result_for(seq, timeout=req.timeout_seconds)
        except TimeoutError as e:
            raise HTTPException(504, str(e)) from e
        except DeferError as e:
            raise HTTPException(502, str(e)) from e
        return InferResponse(sequence=seq, tensor=TensorModel.from_numpy(out))

    @app.get("/chain/partitions", response_model=InspectResponse)
    def chain_partitions():
        if state.session is None:
            raise HTTPException(409, "no chain configured")
        return InspectResponse(
            partitions=[PartitionInfo(**row) for row in state.summary])

    @app.post("/chain/shutdown", response_model=MetricsResponse)
    def chain_shutdown():
        with state.lock:
            session = state.session
            if session is None:
                raise HTTPException(409, "no chain configured")
            try:
                report = session.shutdown()
            except DeferError as e:
                session.abort()
                raise HTTPException(502, str(e)) from e
            finally:
                state.session = None
        return _report_response(report)

    @app.post("/partitions/inspect", response_model=InspectResponse)
    def partitions_inspect(req: InspectRequest):
        try:
            graph = load_model(req.model_path)
            parts = partition_model(graph, auto_cuts(graph, req.nodes))
        except (OSError, DeferError) as e:
            raise HTTPException(422, str(e)) from e
        return InspectResponse(
            partitions=[PartitionInfo(**row) for row in partition_summary(parts)])

    return app


app = create_app()
