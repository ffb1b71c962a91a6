"""An image provider's agent endpoint.

The provider is the only holder of full-resolution image bytes. Index tasks
run against the local archive and ship back features plus thumbnails, never
the images themselves; full images leave only through the license gate, and
always carry the purchaser's identity as a watermark.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import images, watermark
from .errors import (
    AccessDeniedError,
    DecodeError,
    ImageBrokerError,
    InputError,
    NotFoundError,
    ParameterError,
    TrustError,
)
from .gabor import FilterBankParams, build_filter_bank, extract_feature
from .index import ImageDescriptor, IndexEntry, IndexShard
from .protocol import (
    KIND_INDEX,
    KIND_SEARCH,
    RETRIEVED,
    DENIED,
    FAILED,
    MISSING,
    AgentEnvelope,
    IndexTask,
    RetrievalOutcome,
    SearchResults,
    SearchTask,
    decode_envelope,
    encode_envelope,
    sign,
    verify,
)

DEFAULT_CERT_TTL = 3600


@dataclass
class LicenseRecord:
    token: str
    image_id: str  # "*" licenses any image
    purchaser_id: str  # "" leaves the purchaser unbound
    uses_remaining: int

    def covers(self, image_id: str, purchaser_id: str) -> bool:
        if self.image_id not in ("*", image_id):
            return False
        if self.purchaser_id and self.purchaser_id != purchaser_id:
            return False
        return True


class LicenseStore:
    """Flat JSON records, loaded at startup and rewritten on every decrement."""

    def __init__(self, path: Path):
        self._path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, LicenseRecord] = {}
        if self._path.exists():
            for raw in json.loads(self._path.read_text()):
                record = LicenseRecord(
                    token=raw["token"],
                    image_id=raw.get("imageId", "*"),
                    purchaser_id=raw.get("purchaserId", ""),
                    uses_remaining=int(raw["usesRemaining"]),
                )
                self._records[record.token] = record

    def consume(self, token: str, image_id: str, purchaser_id: str) -> None:
        """Atomic check-and-decrement; raises AccessDeniedError when not allowed."""
        with self._lock:
            record = self._records.get(token)
            if record is None:
                raise AccessDeniedError(f"unknown license token for {image_id!r}")
            if not record.covers(image_id, purchaser_id):
                raise AccessDeniedError(f"license does not cover {image_id!r}")
            if record.uses_remaining <= 0:
                raise AccessDeniedError(f"license for {image_id!r} is exhausted")
            record.uses_remaining -= 1
            self._persist()

    def remaining(self, token: str) -> int | None:
        record = self._records.get(token)
        return None if record is None else record.uses_remaining

    def _persist(self) -> None:
        payload = [
            {
                "token": r.token,
                "imageId": r.image_id,
                "purchaserId": r.purchaser_id,
                "usesRemaining": r.uses_remaining,
            }
            for r in self._records.values()
        ]
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2))
        os.replace(tmp, self._path)


@dataclass
class ProviderConfig:
    provider_url: str
    archive_dir: Path
    manifest_path: Path
    licenses_path: Path
    trust: dict[str, bytes]  # peer principal (broker URL) -> shared secret
    thumbnail_max: int = images.THUMBNAIL_MAX
    cert_ttl: int = DEFAULT_CERT_TTL


class ProviderNode:
    def __init__(self, config: ProviderConfig, clock: Callable[[], float] = time.time):
        self.config = config
        self._clock = clock
        self._licenses = LicenseStore(config.licenses_path)
        self._manifest: dict[str, str] = dict(
            sorted(json.loads(Path(config.manifest_path).read_text()).items())
        )
        self._banks: dict[FilterBankParams, object] = {}
        self._bank_lock = threading.Lock()

    # --- archive access ---------------------------------------------------

    def image_ids(self) -> list[str]:
        return list(self._manifest)

    def _image_path(self, image_id: str) -> Path:
        rel = self._manifest.get(image_id)
        if rel is None:
            raise NotFoundError(f"unknown image id {image_id!r}")
        return Path(self.config.archive_dir) / rel

    def _read_image(self, image_id: str) -> bytes:
        path = self._image_path(image_id)
        try:
            return path.read_bytes()
        except OSError as exc:
            raise NotFoundError(f"archive file missing for {image_id!r}: {exc}") from exc

    def _bank(self, params: FilterBankParams):
        with self._bank_lock:
            bank = self._banks.get(params)
            if bank is None:
                bank = build_filter_bank(params)
                self._banks[params] = bank
            return bank

    # --- agent task execution ----------------------------------------------

    def execute_index_agent(self, envelope: AgentEnvelope) -> IndexShard:
        """Index the whole archive with the task's bank parameters.

        Undecodable files are skipped and reported in the shard; the archive
        itself is never written to.
        """
        if envelope.kind != KIND_INDEX:
            raise ParameterError(f"expected an index envelope, got {envelope.kind!r}")
        verify(envelope, self.config.trust, self._clock())
        task = IndexTask.from_bytes(envelope.state)
        bank = self._bank(task.bank_params)
        entries = []
        skipped = []
        for image_id in self._manifest:
            try:
                data = self._read_image(image_id)
                feature = extract_feature(images.prepare_for_indexing(data), bank)
                thumbnail = images.make_thumbnail(data, self.config.thumbnail_max)
            except (InputError, NotFoundError):
                skipped.append(image_id)
                continue
            entries.append(IndexEntry(
                descriptor=ImageDescriptor(self.config.provider_url, image_id, thumbnail),
                feature=feature,
            ))
        return IndexShard(
            provider_url=self.config.provider_url,
            entries=tuple(entries),
            generated_at=self._clock(),
            skipped=tuple(skipped),
        )

    def get_thumbnail(self, image_id: str) -> bytes:
        """Free preview; no credentials involved."""
        return images.make_thumbnail(self._read_image(image_id), self.config.thumbnail_max)

    def retrieve_full(self, image_id: str, token: str, purchaser_id: str) -> bytes:
        """License-gated full image, watermarked with the purchaser identity.

        Delivered as lossless PNG so the mark survives transport; the archive
        original is never modified.
        """
        original = self._read_image(image_id)  # not-found beats access-denied
        self._licenses.consume(token, image_id, purchaser_id)
        raster = images.decode_raster(original)
        return images.encode_png(watermark.embed(raster, purchaser_id))

    def execute_search_agent(self, envelope: AgentEnvelope) -> SearchResults:
        """Per-item retrieval; one item's failure never aborts the batch."""
        if envelope.kind != KIND_SEARCH:
            raise ParameterError(f"expected a search envelope, got {envelope.kind!r}")
        verify(envelope, self.config.trust, self._clock())
        task = SearchTask.from_bytes(envelope.state)
        outcomes = []
        for item in task.items:
            try:
                data = self.retrieve_full(item.image_id, item.license_token,
                                          item.purchaser_id)
                outcomes.append(RetrievalOutcome(item.image_id, RETRIEVED, data))
            except NotFoundError as exc:
                outcomes.append(RetrievalOutcome(item.image_id, MISSING, str(exc).encode()))
            except AccessDeniedError as exc:
                outcomes.append(RetrievalOutcome(item.image_id, DENIED, str(exc).encode()))
            except ImageBrokerError as exc:
                outcomes.append(RetrievalOutcome(item.image_id, FAILED, str(exc).encode()))
        return SearchResults(tuple(outcomes))

    # --- wire entry ---------------------------------------------------------

    def handle_envelope(self, data: bytes) -> bytes:
        """Inbound POST /agents body -> encoded reply envelope."""
        envelope = decode_envelope(data)
        reply_to = envelope.itinerary[-1]
        if envelope.kind == KIND_INDEX:
            shard = self.execute_index_agent(envelope)
            reply = AgentEnvelope(
                kind=KIND_INDEX,
                agent_id=envelope.agent_id,
                itinerary=(reply_to,),
                state=shard.to_bytes(),
            )
        elif envelope.kind == KIND_SEARCH:
            results = self.execute_search_agent(envelope)
            reply = AgentEnvelope(
                kind=KIND_SEARCH,
                agent_id=envelope.agent_id,
                itinerary=(reply_to,),
                state=results.to_bytes(),
            )
        else:
            raise ParameterError(f"provider cannot host {envelope.kind!r} agents")
        secret = self.config.trust.get(reply_to)
        if secret is None:
            raise TrustError("unknown-issuer", f"no shared secret for {reply_to!r}")
        signed_reply = sign(
            reply,
            secret,
            issuer=self.config.provider_url,
            subject=reply_to,
            not_after=int(self._clock()) + self.config.cert_ttl,
        )
        return encode_envelope(signed_reply)


def load_provider_config(path: str | Path) -> ProviderConfig:
    """Provider config file: documented JSON keys, secrets referenced as file paths."""
    path = Path(path)
    raw = json.loads(path.read_text())
    base = path.parent
    try:
        trust = {
            peer: (base / secret_file).read_bytes().strip()
            for peer, secret_file in raw["trust"].items()
        }
        return ProviderConfig(
            provider_url=raw["providerUrl"],
            archive_dir=base / raw["archiveDir"],
            manifest_path=base / raw["manifest"],
            licenses_path=base / raw["licenses"],
            trust=trust,
            thumbnail_max=int(raw.get("thumbnailMax", images.THUMBNAIL_MAX)),
            cert_ttl=int(raw.get("certTtlSeconds", DEFAULT_CERT_TTL)),
        )
    except KeyError as exc:
        raise DecodeError(f"provider config is missing key {exc}") from exc
