"""On-disk store for precomputed per-image feature vectors.

Two-file layout chosen for portability: ``index.json`` describing the
records and ``features.bin`` holding raw little-endian float32 values.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INDEX_FILE = "index.json"
PAYLOAD_FILE = "features.bin"


class FeatureStoreError(Exception):
    """Raised when a store's index and payload disagree."""


@dataclass
class FeatureStore:
    """Immutable map image_id -> float32 vector of length ``dim``."""

    dim: int
    index: dict[str, tuple[int, int]]  # image_id -> (offset, length) in floats
    payload: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)
        for image_id, (offset, length) in self.index.items():
            if length != self.dim:
                raise FeatureStoreError(
                    f"record {image_id!r} has length {length}, store dim is {self.dim}")
            if offset < 0 or offset + length > self.payload.size:
                raise FeatureStoreError(
                    f"record {image_id!r} addresses floats beyond payload size {self.payload.size}")
        spans = sorted(self.index.items(), key=lambda kv: kv[1][0])
        for (_, (a_off, a_len)), (b_id, (b_off, _)) in zip(spans, spans[1:]):
            if b_off < a_off + a_len:
                raise FeatureStoreError(f"record {b_id!r} overlaps a previous record")

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def image_ids(self) -> list[str]:
        return list(self.index)

    def vector(self, image_id: str) -> np.ndarray:
        offset, length = self.index[image_id]
        return self.payload[offset:offset + length].copy()


def build_feature_store(vectors: dict[str, np.ndarray], dim: int) -> FeatureStore:
    """Pack per-image vectors (in the given order) into one store."""
    index: dict[str, tuple[int, int]] = {}
    parts = []
    offset = 0
    for image_id, vec in vectors.items():
        arr = np.asarray(vec, dtype=np.float32).ravel()
        if arr.size != dim:
            raise FeatureStoreError(f"vector for {image_id!r} has {arr.size} floats, expected {dim}")
        index[image_id] = (offset, dim)
        parts.append(arr)
        offset += dim
    payload = np.concatenate(parts) if parts else np.empty(0, dtype=np.float32)
    return FeatureStore(dim=dim, index=index, payload=payload)


def write_feature_store(store: FeatureStore, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = [
        {"image_id": image_id, "offset": offset, "length": length}
        for image_id, (offset, length) in store.index.items()
    ]
    with open(directory / INDEX_FILE, "w", encoding="utf-8") as fh:
        json.dump({"dim": store.dim, "records": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    store.payload.astype("<f4").tofile(directory / PAYLOAD_FILE)


def read_feature_store(directory) -> FeatureStore:
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    payload_path = directory / PAYLOAD_FILE
    if not index_path.exists() or not payload_path.exists():
        raise FeatureStoreError(f"no feature store at {directory}")
    with open(index_path, encoding="utf-8") as fh:
        header = json.load(fh)
    raw = payload_path.read_bytes()
    if len(raw) % 4 != 0:
        raise FeatureStoreError(f"payload size {len(raw)} is not a multiple of 4 bytes")
    payload = np.frombuffer(raw, dtype="<f4")
    index = {r["image_id"]: (r["offset"], r["length"]) for r in header["records"]}
    if len(index) != len(header["records"]):
        raise FeatureStoreError("duplicate image_id in index")
    return FeatureStore(dim=header["dim"], index=index, payload=payload)
