"""Pool hidden states into fixed-size user vectors; persist and ensemble them.

EMB1 file layout (little-endian):
  magic "EMB1", version u16, N u64, D u32,
  N user ids sorted ascending, each a u16 byte length + UTF-8 bytes,
  N*D float32 values, row-major, rows in user-id order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import CodeDictionary, SchemaConfig, UserSequence
from .gateway import EndpointConfig, HttpGateway, hidden_states_remote
from .serializer import serialize_pipe
from .tinylm import TinyLM, checkpoint_bytes, tokenize

RAW_PIPE = "raw-pipe"


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSource:
    model_digest: str
    k: int
    k_effective: int
    text_variant: str
    layer_range: str


@dataclass(frozen=True)
class UserEmbedding:
    user_id: str
    vector: np.ndarray
    source: EmbeddingSource


@dataclass(frozen=True)
class EmbeddingMatrix:
    user_ids: tuple[str, ...]
    matrix: np.ndarray  # (N, D) float32
    source: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.user_ids):
            raise ValueError("matrix rows must match user id count")
        if len(set(self.user_ids)) != len(self.user_ids):
            raise ValueError("duplicate user ids")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, user_id: str) -> np.ndarray:
        return self.matrix[self.user_ids.index(user_id)]


def mean_pool_last_k(hidden_states: np.ndarray | Sequence[np.ndarray], k: int) -> np.ndarray:
    """Average the last min(k, L) block outputs elementwise, then over tokens.

    ``hidden_states`` holds the L transformer block outputs, each (T, d).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    stack = np.asarray(hidden_states, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError(f"expected (L, T, d) hidden states, got shape {stack.shape}")
    L, T, _ = stack.shape
    if L < 1 or T < 1:
        raise ValueError("need at least one layer and one token")
    k_eff = min(k, L)
    return stack[L - k_eff :].mean(axis=0).mean(axis=0)


class LocalModelBackend:
    """Serves hidden states straight from an in-process model."""

    def __init__(self, model: TinyLM):
        self.model = model
        self.model_digest = hashlib.sha256(checkpoint_bytes(model)).hexdigest()
        self.n_layers = model.config.n_layers

    def hidden_states(self, text: str) -> np.ndarray:
        stream = tokenize(text).truncate(self.model.config.context_len)
        return self.model.forward(stream).hidden


class RemoteModelBackend:
    """Serves hidden states over the wire contract; see the gateway module."""

    def __init__(self, endpoint: EndpointConfig | HttpGateway, model_id: str):
        self.endpoint = endpoint
        self.model_digest = f"remote:{model_id}"
        self.model_id = model_id
        self.n_layers: int | None = None

    def hidden_states(self, text: str) -> np.ndarray:
        stack, _ = hidden_states_remote(text, self.model_id, self.endpoint)
        self.n_layers = stack.shape[0] - 1
        return stack


def embed_user(
    backend,
    sequence: UserSequence,
    schema: SchemaConfig,
    k: int = 8,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
    text_variant: str = RAW_PIPE,
    enriched_text: str | None = None,
    include_embedding_layer: bool = False,
) -> UserEmbedding:
    """One fixed-size vector for a user: serialize, run the model, mean-pool.

    The pooling window is the last min(k, L) transformer blocks; the embedding
    layer's output joins the window only when the flag is set and k >= L.
    ``k_effective`` in the source metadata records the realized window size.
    """
    if text_variant == RAW_PIPE:
        text = serialize_pipe(sequence, schema, dictionaries).text
    else:
        if enriched_text is None:
            raise ValueError(f"text_variant {text_variant!r} needs enriched_text")
        text = enriched_text
    stack = backend.hidden_states(text)  # (L+1, T, d)
    n_blocks = stack.shape[0] - 1
    if include_embedding_layer and k >= n_blocks + 1:
        layers = stack
        layer_range = f"embedding+blocks[0:{n_blocks}]"
    else:
        layers = stack[1:]
        k_eff = min(k, n_blocks)
        layer_range = f"blocks[{n_blocks - k_eff}:{n_blocks}]"
    vector = mean_pool_last_k(layers, k)
    k_eff = min(k, layers.shape[0])
    if not np.all(np.isfinite(vector)):
        raise ValueError(f"non-finite embedding for user {sequence.user_id!r}")
    return UserEmbedding(
        user_id=sequence.user_id,
        vector=vector,
        source=EmbeddingSource(backend.model_digest, k, k_eff, text_variant, layer_range),
    )


def build_matrix(embeddings: Sequence[UserEmbedding], source: dict | None = None) -> EmbeddingMatrix:
    ordered = sorted(embeddings, key=lambda e: e.user_id)
    ids = tuple(e.user_id for e in ordered)
    matrix = np.stack([e.vector for e in ordered]).astype(np.float32)
    return EmbeddingMatrix(ids, matrix, source or {})


def concat_embeddings(*matrices: EmbeddingMatrix) -> EmbeddingMatrix:
    """Column-wise ensemble; all inputs must cover the same user set."""
    if not matrices:
        raise ValueError("need at least one matrix")
    base = set(matrices[0].user_ids)
    for m in matrices[1:]:
        other = set(m.user_ids)
        if other != base:
            diff = sorted(base.symmetric_difference(other))
            raise ValueError(f"user sets differ; symmetric difference: {diff}")
    ids = tuple(sorted(base))
    blocks = []
    for m in matrices:
        index = {uid: i for i, uid in enumerate(m.user_ids)}
        blocks.append(m.matrix[[index[uid] for uid in ids]])
    return EmbeddingMatrix(
        ids,
        np.hstack(blocks).astype(np.float32),
        {"concat_of": [m.source for m in matrices]},
    )


_MAGIC = b"EMB1"
_VERSION = 1


def save_matrix(matrix: EmbeddingMatrix, path: Path | str) -> None:
    order = np.argsort(np.asarray(matrix.user_ids, dtype=object))
    ids = [matrix.user_ids[i] for i in order]
    rows = np.ascontiguousarray(matrix.matrix[order], dtype="<f4")
    with Path(path).open("wb") as out:
        out.write(_MAGIC)
        out.write(struct.pack("<HQI", _VERSION, len(ids), rows.shape[1]))
        for uid in ids:
            raw = uid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise EmbeddingFormatError(f"user id too long: {uid[:32]!r}...")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
        out.write(rows.tobytes())


def load_matrix(path: Path | str) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    header = struct.calcsize("<4sHQI")
    if len(raw) < header:
        raise EmbeddingFormatError(f"{path}: file shorter than header")
    magic, version, n, d = struct.unpack_from("<4sHQI", raw)
    if magic != _MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    offset = header
    ids: list[str] = []
    for _ in range(n):
        if offset + 2 > len(raw):
            raise EmbeddingFormatError(f"{path}: truncated in user id table")
        (length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        if offset + length > len(raw):
            raise EmbeddingFormatError(f"{path}: truncated in user id table")
        ids.append(raw[offset : offset + length].decode("utf-8"))
        offset += length
    expected = n * d * 4
    actual = len(raw) - offset
    if actual != expected:
        raise EmbeddingFormatError(
            f"{path}: expected {expected} bytes of float data, found {actual}"
        )
    if ids != sorted(ids):
        raise EmbeddingFormatError(f"{path}: user ids not sorted")
    if len(set(ids)) != len(ids):
        raise EmbeddingFormatError(f"{path}: duplicate user ids")
    matrix = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    return EmbeddingMatrix(tuple(ids), matrix.copy(), {"path": str(path)})
