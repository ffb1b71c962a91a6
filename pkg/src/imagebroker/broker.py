"""The broker: parked sessions, on-demand indexing, ranked answers, retrieval fan-out.

A client's surrogate session lives here for the duration of its application.
Queries trigger index-agent dispatch for providers whose shard is stale or
missing, rank over the merged main index, and hand the result back either
wrapped in a messenger envelope or as a bare message, depending on the
session's interaction mode.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import (
    DecodeError,
    ImageBrokerError,
    NotFoundError,
    ParameterError,
    SessionError,
    TrustError,
)
from .gabor import (
    FilterBankParams,
    TextureFeatureVector,
    build_filter_bank,
    extract_feature,
)
from .images import prepare_for_indexing
from .index import IndexShard, MainIndex
from .protocol import (
    KIND_INDEX,
    KIND_MESSENGER,
    KIND_PARKED,
    MODE_MESSENGER,
    MISSING,
    QUERY_BY_FEATURE,
    QUERY_BY_IMAGE,
    AgentEnvelope,
    ParkedState,
    QueryMessage,
    ResultMessage,
    RetrievalOutcome,
    SearchItem,
    SearchResults,
    decode_envelope,
    encode_envelope,
    make_index,
    make_messenger,
    make_search,
    open_messenger,
    sign,
    verify,
)
from .transport import Transport
from .wire import Writer

DEFAULT_REINDEX_MAX_AGE = 600.0
DEFAULT_SESSION_IDLE_TIMEOUT = 1800.0
DEFAULT_CERT_TTL = 3600


@dataclass
class BrokerConfig:
    broker_url: str
    provider_urls: tuple[str, ...]
    trust: dict[str, bytes]  # peer principal (client id or provider URL) -> secret
    reindex_max_age: float = DEFAULT_REINDEX_MAX_AGE
    session_idle_timeout: float = DEFAULT_SESSION_IDLE_TIMEOUT
    default_k: int = 10
    bank_params: FilterBankParams = field(default_factory=FilterBankParams)
    cert_ttl: int = DEFAULT_CERT_TTL

    def __post_init__(self) -> None:
        if not self.provider_urls:
            raise ParameterError("broker needs at least one provider URL")
        if self.reindex_max_age <= 0 or self.session_idle_timeout <= 0:
            raise ParameterError("durations must be positive")
        if self.default_k < 1:
            raise ParameterError("defaultK must be >= 1")


@dataclass
class ParkedSession:
    session_id: str
    agent_id: str
    client_issuer: str
    reply_address: str
    mode: str
    created_at: float
    last_active_at: float
    last_query: QueryMessage | None = None
    last_result: ResultMessage | None = None


@dataclass(frozen=True)
class Transmission:
    """One result delivery: the wire bytes plus the decoded content they carry."""

    mode: str
    data: bytes
    content: ResultMessage


@dataclass
class DispatchReport:
    merged: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RetrievalItem:
    provider_url: str
    image_id: str
    license_token: str


class Broker:
    def __init__(
        self,
        config: BrokerConfig,
        transport: Transport,
        clock: Callable[[], float] = time.time,
    ):
        self.config = config
        self._transport = transport
        self._clock = clock
        self.index = MainIndex(clock=clock)
        self.bank = build_filter_bank(config.bank_params)
        self._sessions: dict[str, ParkedSession] = {}
        self._sessions_lock = threading.Lock()

    # --- sessions -----------------------------------------------------------

    def host_parked_agent(self, envelope: AgentEnvelope) -> str:
        """Verify and camp the client's surrogate; runs any initial query."""
        if envelope.kind != KIND_PARKED:
            raise ParameterError(f"expected a parked envelope, got {envelope.kind!r}")
        verify(envelope, self.config.trust, self._clock())
        state = ParkedState.from_bytes(envelope.state)
        now = self._clock()
        with self._sessions_lock:
            if any(s.agent_id == envelope.agent_id for s in self._sessions.values()):
                raise SessionError(
                    f"agent {envelope.agent_id!r} already has a live session"
                )
            session = ParkedSession(
                session_id=uuid.uuid4().hex,
                agent_id=envelope.agent_id,
                client_issuer=envelope.certificate.issuer,
                reply_address=state.reply_address,
                mode=state.mode,
                created_at=now,
                last_active_at=now,
            )
            self._sessions[session.session_id] = session
        if state.initial_query is not None:
            query = QueryMessage(
                session_id=session.session_id,
                payload_kind=state.initial_query.payload_kind,
                payload=state.initial_query.payload,
                k=state.initial_query.k,
            )
            self.handle_query(query)
        return session.session_id

    def _session(self, session_id: str) -> ParkedSession:
        session = self._sessions.get(session_id)
        if session is None:
            raise SessionError(f"unknown session {session_id!r}")
        session.last_active_at = self._clock()
        return session

    def expire_sessions(self, now: float | None = None) -> int:
        """Drop sessions idle beyond the configured timeout; returns how many."""
        now = self._clock() if now is None else now
        with self._sessions_lock:
            stale = [
                sid for sid, s in self._sessions.items()
                if now - s.last_active_at > self.config.session_idle_timeout
            ]
            for sid in stale:
                del self._sessions[sid]
        return len(stale)

    def session_count(self) -> int:
        return len(self._sessions)

    # --- indexing -----------------------------------------------------------

    def dispatch_index_agents(self, provider_urls: list[str] | None = None) -> DispatchReport:
        """Send index tasks to providers and merge the shards they return.

        An unreachable or misbehaving provider is recorded and skipped; the
        surviving shards still merge. Network calls run outside the index lock.
        """
        providers = list(provider_urls if provider_urls is not None
                         else self.config.provider_urls)
        report = DispatchReport()
        if not providers:
            return report
        envelopes = make_index(providers, self.config.bank_params, self.config.broker_url)
        shards: list[tuple[str, bytes]] = []

        def visit(env: AgentEnvelope) -> tuple[str, bytes]:
            provider_url = env.itinerary[0]
            secret = self.config.trust.get(provider_url)
            if secret is None:
                raise TrustError("unknown-issuer", f"no shared secret for {provider_url!r}")
            wire = encode_envelope(sign(
                env, secret,
                issuer=self.config.broker_url,
                subject=provider_url,
                not_after=int(self._clock()) + self.config.cert_ttl,
            ))
            return provider_url, self._transport.send_envelope(provider_url, wire)

        with ThreadPoolExecutor(max_workers=min(8, len(envelopes))) as pool:
            futures = {pool.submit(visit, env): env.itinerary[0] for env in envelopes}
            for future, provider_url in futures.items():
                try:
                    shards.append(future.result())
                except ImageBrokerError as exc:
                    report.failures[provider_url] = str(exc)

        for provider_url, reply_bytes in shards:
            try:
                reply = decode_envelope(reply_bytes)
                verify(reply, self.config.trust, self._clock())
                if reply.kind != KIND_INDEX or reply.certificate.issuer != provider_url:
                    raise TrustError("bad-mac", "index reply from unexpected principal")
                shard = IndexShard.from_bytes(reply.state)
                if shard.provider_url != provider_url:
                    raise DecodeError("shard claims a different provider")
                self.index.merge_shard(shard)
                report.merged.append(provider_url)
            except ImageBrokerError as exc:
                report.failures[provider_url] = str(exc)
        return report

    def ensure_fresh_index(self) -> DispatchReport:
        stale = [
            url for url in self.config.provider_urls
            if (age := self.index.provider_staleness(url)) is None
            or age > self.config.reindex_max_age
        ]
        if not stale:
            return DispatchReport()
        return self.dispatch_index_agents(stale)

    # --- querying -----------------------------------------------------------

    def _query_feature(self, message: QueryMessage) -> TextureFeatureVector:
        if message.payload_kind == QUERY_BY_FEATURE:
            feature = TextureFeatureVector.from_bytes(message.payload)
            if not feature.normalized:
                raise ParameterError("query feature must be rotation-normalized")
            return feature
        if message.payload_kind == QUERY_BY_IMAGE:
            return extract_feature(prepare_for_indexing(message.payload), self.bank)
        raise ParameterError(f"unknown query payload kind {message.payload_kind}")

    def handle_query(self, message: QueryMessage) -> ResultMessage:
        """Re-index stale providers, rank, remember the result on the session."""
        session = self._session(message.session_id)
        if message.k < 1:
            raise ParameterError(f"k must be >= 1, got {message.k}")
        feature = self._query_feature(message)
        self.ensure_fresh_index()
        descriptors = tuple(self.index.query(feature, message.k))
        result = ResultMessage(session.session_id, "ok", descriptors)
        session.last_query = message
        session.last_result = result
        return result

    # --- retrieval ------------------------------------------------------------

    def create_search_agents(
        self,
        session_id: str,
        items: list[RetrievalItem],
        purchaser_id: str,
    ) -> list[RetrievalOutcome]:
        """Fan out one search agent per provider; outcomes in request order."""
        self._session(session_id)
        outcomes: dict[int, RetrievalOutcome] = {}
        by_provider: dict[str, list[tuple[int, RetrievalItem]]] = {}
        for pos, item in enumerate(items):
            if self.index.lookup(item.provider_url, item.image_id) is None:
                outcomes[pos] = RetrievalOutcome(
                    item.image_id, MISSING,
                    f"({item.provider_url}, {item.image_id}) is not in the index".encode(),
                )
            else:
                by_provider.setdefault(item.provider_url, []).append((pos, item))

        for provider_url, provider_items in by_provider.items():
            search_items = [
                SearchItem(item.image_id, item.license_token, purchaser_id)
                for _, item in provider_items
            ]
            try:
                secret = self.config.trust.get(provider_url)
                if secret is None:
                    raise TrustError("unknown-issuer",
                                     f"no shared secret for {provider_url!r}")
                env = make_search(provider_url, search_items, self.config.broker_url)
                wire = encode_envelope(sign(
                    env, secret,
                    issuer=self.config.broker_url,
                    subject=provider_url,
                    not_after=int(self._clock()) + self.config.cert_ttl,
                ))
                reply = decode_envelope(self._transport.send_envelope(provider_url, wire))
                verify(reply, self.config.trust, self._clock())
                results = SearchResults.from_bytes(reply.state)
                if len(results.outcomes) != len(provider_items):
                    raise DecodeError("provider answered the wrong number of items")
                for (pos, _), outcome in zip(provider_items, results.outcomes):
                    outcomes[pos] = outcome
            except ImageBrokerError as exc:
                for pos, item in provider_items:
                    outcomes[pos] = RetrievalOutcome(
                        item.image_id, "error", str(exc).encode()
                    )
        return [outcomes[pos] for pos in range(len(items))]

    # --- result delivery ---------------------------------------------------------

    def deliver_result(self, session_id: str) -> Transmission:
        """Package the session's last result per its interaction mode.

        Both modes carry the identical ResultMessage; messenger mode wraps it
        in a signed agent envelope (and pays that envelope's overhead).
        """
        session = self._session(session_id)
        if session.last_result is None:
            raise NotFoundError(f"session {session_id!r} has no result yet")
        result = session.last_result
        if session.mode == MODE_MESSENGER:
            secret = self.config.trust.get(session.client_issuer)
            if secret is None:
                raise TrustError("unknown-issuer",
                                 f"no shared secret for {session.client_issuer!r}")
            env = make_messenger(session.reply_address or session.client_issuer, result)
            data = encode_envelope(sign(
                env, secret,
                issuer=self.config.broker_url,
                subject=session.client_issuer,
                not_after=int(self._clock()) + self.config.cert_ttl,
            ))
            return Transmission(MODE_MESSENGER, data, result)
        return Transmission(session.mode, result.to_bytes(), result)

    # --- wire entry -----------------------------------------------------------

    def handle_envelope(self, data: bytes) -> bytes:
        """Inbound POST /agents body -> reply bytes.

        Parked envelopes open a session (reply: session id). Messenger
        envelopes carry a query in and the result back out, wrapped the same
        way they arrived.
        """
        envelope = decode_envelope(data)
        if envelope.kind == KIND_PARKED:
            session_id = self.host_parked_agent(envelope)
            return Writer().text(session_id).getvalue()
        if envelope.kind == KIND_MESSENGER:
            verify(envelope, self.config.trust, self._clock())
            content = open_messenger(envelope.state)
            if not isinstance(content, QueryMessage):
                raise ParameterError("inbound messenger must carry a query")
            self.handle_query(content)
            return self.deliver_result(content.session_id).data
        if envelope.kind == KIND_INDEX:
            # a shard pushed back by a provider (push-style merge)
            verify(envelope, self.config.trust, self._clock())
            shard = IndexShard.from_bytes(envelope.state)
            if shard.provider_url != envelope.certificate.issuer:
                raise TrustError("bad-mac", "shard pushed by a different principal")
            self.index.merge_shard(shard)
            return Writer().text("merged").getvalue()
        raise ParameterError(f"broker cannot host {envelope.kind!r} agents")


def load_broker_config(path: str | Path) -> BrokerConfig:
    """Broker config file: documented JSON keys, secrets referenced as file paths."""
    path = Path(path)
    raw = json.loads(path.read_text())
    base = path.parent
    try:
        trust = {
            peer: (base / secret_file).read_bytes().strip()
            for peer, secret_file in raw["trust"].items()
        }
        bank_raw = raw.get("bank", {})
        bank = FilterBankParams(
            scales=int(bank_raw.get("scales", 5)),
            orientations=int(bank_raw.get("orientations", 6)),
            low_freq=float(bank_raw.get("lowFreq", 0.05)),
            high_freq=float(bank_raw.get("highFreq", 0.4)),
            kernel_size=int(bank_raw.get("kernelSize", 31)),
        )
        return BrokerConfig(
            broker_url=raw["brokerUrl"],
            provider_urls=tuple(raw["providers"]),
            trust=trust,
            reindex_max_age=float(raw.get("reindexMaxAgeSeconds", DEFAULT_REINDEX_MAX_AGE)),
            session_idle_timeout=float(
                raw.get("sessionIdleTimeoutSeconds", DEFAULT_SESSION_IDLE_TIMEOUT)
            ),
            default_k=int(raw.get("defaultK", 10)),
            bank_params=bank,
            cert_ttl=int(raw.get("certTtlSeconds", DEFAULT_CERT_TTL)),
        )
    except KeyError as exc:
        raise DecodeError(f"broker config is missing key {exc}") from exc
