"""Exception types shared across the package."""


class DeferError(Exception):
    """Base class for all errors raised by this package."""


# --- model graph ---

class ModelInvalid(DeferError):
    """A layer graph violates a structural invariant."""


class CycleDetected(ModelInvalid):
    """The layer graph contains a cycle."""


class ShapeMismatch(DeferError):
    """A tensor shape is incompatible with a layer's expectation."""

    def __init__(self, layer_id: str, message: str):
        super().__init__(f"layer {layer_id!r}: {message}")
        self.layer_id = layer_id


class MissingWeight(DeferError):
    """A layer references a weight tensor that is not present."""


# --- partitioning ---

class InvalidCut(DeferError):
    """A requested cut edge is not a bridge of the layer graph."""


class CutOrderError(DeferError):
    """Cut edges are duplicated or not listed in topological order."""


class Unpartitionable(DeferError):
    """The graph cannot be split into the requested number of partitions."""


# --- codec ---

class MalformedBlob(DeferError):
    """An encoded tensor blob cannot be parsed."""


class UnknownCodec(DeferError):
    """A blob names a codec id this build does not understand."""


class CorruptStream(DeferError):
    """A compressed byte stream fails to decompress cleanly."""


# --- wire protocol ---

class BadMagic(DeferError):
    """A frame does not start with the protocol magic bytes."""


class TruncatedFrame(DeferError):
    """The stream ended in the middle of a frame."""


class ChunkOverflow(DeferError):
    """A chunk header declares more bytes than the frame has left."""


# --- chain runtime ---

class NodeUnreachable(DeferError):
    """A compute node could not be connected during configuration."""

    def __init__(self, index: int, message: str = ""):
        super().__init__(f"node {index}: {message or 'unreachable'}")
        self.index = index


class ConfigRejected(DeferError):
    """A compute node refused its partition."""

    def __init__(self, index: int, reason: str):
        super().__init__(f"node {index} rejected configuration: {reason}")
        self.index = index
        self.reason = reason


class ChainBroken(DeferError):
    """A connection in the inference chain was lost mid-stream."""

    def __init__(self, index: int, message: str = ""):
        super().__init__(f"chain broken at node {index}: {message}")
        self.index = index


class OrderViolation(DeferError):
    """Result sequence numbers regressed or repeated."""


# --- bench harness ---

class PortBindFailure(DeferError):
    """A required local port could not be bound."""


class ChildCrashed(DeferError):
    """A supervised child process exited abnormally."""

    def __init__(self, index: int, detail: str = ""):
        super().__init__(f"compute node process {index} crashed: {detail}")
        self.index = index
