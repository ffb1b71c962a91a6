"""The broker's main index: merged provider shards with exhaustive ranked search.

Each shard is treated as the authoritative snapshot of one provider's
archive: merging upserts every entry and drops previously indexed images the
new shard no longer mentions. Queries are an exact linear scan ranked by the
texture distance, ascending (smaller = more similar), with a total
deterministic tie order.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable

from .errors import ContractError, DecodeError, ParameterError
from .gabor import TextureFeatureVector, feature_distance
from .wire import Reader, Writer

SNAPSHOT_MAGIC = b"FIDX"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ImageDescriptor:
    """What a client gets per result: where the image lives plus a free preview."""

    provider_url: str
    image_id: str
    thumbnail: bytes
    similarity: float = 0.0

    def __post_init__(self) -> None:
        if not self.thumbnail:
            raise ContractError(f"descriptor {self.image_id!r} is missing its thumbnail")
        if self.similarity < 0:
            raise ContractError("similarity must be non-negative")

    def key(self) -> tuple[str, str]:
        return (self.provider_url, self.image_id)

    def write_to(self, w: Writer) -> None:
        w.text(self.provider_url).text(self.image_id).blob(self.thumbnail)
        w.f64(self.similarity)

    @classmethod
    def read_from(cls, r: Reader) -> "ImageDescriptor":
        provider_url, image_id = r.text(), r.text()
        thumbnail = r.blob()
        similarity = r.f64()
        try:
            return cls(provider_url, image_id, thumbnail, similarity)
        except ContractError as exc:
            raise DecodeError(str(exc)) from exc


@dataclass(frozen=True)
class IndexEntry:
    descriptor: ImageDescriptor
    feature: TextureFeatureVector

    def __post_init__(self) -> None:
        if not self.feature.normalized:
            raise ContractError(
                f"index entry {self.descriptor.image_id!r} carries an unnormalized feature"
            )

    def write_to(self, w: Writer) -> None:
        self.descriptor.write_to(w)
        w.blob(self.feature.to_bytes())

    @classmethod
    def read_from(cls, r: Reader) -> "IndexEntry":
        descriptor = ImageDescriptor.read_from(r)
        feature = TextureFeatureVector.from_bytes(r.blob())
        try:
            return cls(descriptor, feature)
        except ContractError as exc:
            raise DecodeError(str(exc)) from exc


@dataclass(frozen=True)
class IndexShard:
    """One provider's full archive indexed: the unit an index agent brings home."""

    provider_url: str
    entries: tuple[IndexEntry, ...]
    generated_at: float
    skipped: tuple[str, ...] = ()  # archive files that failed to decode

    def __post_init__(self) -> None:
        for entry in self.entries:
            if entry.descriptor.provider_url != self.provider_url:
                raise ContractError(
                    f"shard for {self.provider_url!r} contains an entry for "
                    f"{entry.descriptor.provider_url!r}"
                )

    def to_bytes(self) -> bytes:
        w = Writer()
        w.text(self.provider_url).f64(self.generated_at)
        w.u32(len(self.skipped))
        for name in self.skipped:
            w.text(name)
        w.u32(len(self.entries))
        for entry in self.entries:
            entry.write_to(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "IndexShard":
        r = Reader(data)
        provider_url = r.text()
        generated_at = r.f64()
        skipped = tuple(r.text() for _ in range(r.u32()))
        entries = tuple(IndexEntry.read_from(r) for _ in range(r.u32()))
        r.expect_end()
        try:
            return cls(provider_url, entries, generated_at, skipped)
        except ContractError as exc:
            raise DecodeError(str(exc)) from exc


@dataclass
class _ProviderSlot:
    merged_at: float
    entries: dict[str, IndexEntry] = field(default_factory=dict)


class MainIndex:
    """Merged shards with concurrent readers and exclusive writers.

    Mutation replaces the published state wholesale, so a reader never
    observes a partially applied shard.
    """

    def __init__(self, clock: Callable[[], float] = time.time):
        self._clock = clock
        self._lock = threading.Lock()
        self._providers: dict[str, _ProviderSlot] = {}

    def __len__(self) -> int:
        return sum(len(slot.entries) for slot in self._providers.values())

    def merge_shard(self, shard: IndexShard) -> None:
        """Upsert the shard's provider; absent images are pruned (shard is authoritative)."""
        for entry in shard.entries:
            if not entry.feature.normalized:
                raise ContractError("shard rejected: unnormalized feature")
        slot = _ProviderSlot(merged_at=self._clock())
        for entry in shard.entries:
            slot.entries[entry.descriptor.image_id] = entry
        with self._lock:
            providers = dict(self._providers)
            providers[shard.provider_url] = slot
            self._providers = providers

    def provider_staleness(self, provider_url: str) -> float | None:
        slot = self._providers.get(provider_url)
        if slot is None:
            return None
        return self._clock() - slot.merged_at

    def provider_urls(self) -> list[str]:
        return sorted(self._providers)

    def entries(self) -> list[IndexEntry]:
        snapshot = self._providers
        return [
            entry
            for url in sorted(snapshot)
            for _, entry in sorted(snapshot[url].entries.items())
        ]

    def lookup(self, provider_url: str, image_id: str) -> IndexEntry | None:
        slot = self._providers.get(provider_url)
        if slot is None:
            return None
        return slot.entries.get(image_id)

    def query(self, feature: TextureFeatureVector, k: int) -> list[ImageDescriptor]:
        """Exhaustive scan ranked ascending by distance, ties by (provider, id)."""
        if k < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        if not feature.normalized:
            raise ContractError("query feature must be rotation-normalized")
        ranked = sorted(
            (
                (feature_distance(feature, entry.feature), entry.descriptor)
                for entry in self.entries()
            ),
            key=lambda pair: (pair[0], pair[1].provider_url, pair[1].image_id),
        )
        return [replace(desc, similarity=dist) for dist, desc in ranked[:k]]

    def snapshot(self) -> bytes:
        snapshot = self._providers
        w = Writer()
        w.raw(SNAPSHOT_MAGIC).u16(SNAPSHOT_VERSION)
        w.u32(len(snapshot))
        for url in sorted(snapshot):
            slot = snapshot[url]
            w.text(url).f64(slot.merged_at)
            w.u32(len(slot.entries))
            for _, entry in sorted(slot.entries.items()):
                entry.write_to(w)
        return w.getvalue()

    def restore(self, data: bytes) -> None:
        """Replace contents from snapshot bytes; on any decode error the index is untouched."""
        r = Reader(data)
        if r.raw(4) != SNAPSHOT_MAGIC:
            raise DecodeError("not an index snapshot (bad magic)")
        version = r.u16()
        if version != SNAPSHOT_VERSION:
            raise DecodeError(f"unsupported snapshot version {version}")
        providers: dict[str, _ProviderSlot] = {}
        for _ in range(r.u32()):
            url = r.text()
            slot = _ProviderSlot(merged_at=r.f64())
            for _ in range(r.u32()):
                entry = IndexEntry.read_from(r)
                if entry.descriptor.provider_url != url:
                    raise DecodeError("snapshot entry filed under the wrong provider")
                slot.entries[entry.descriptor.image_id] = entry
            providers[url] = slot
        r.expect_end()
        with self._lock:
            self._providers = providers
