"""Signed task envelopes and the query/result message pair.

A migrating agent is represented on the wire as a kind-tagged envelope:
an itinerary of hosts, an opaque kind-specific state payload, and a
certificate carrying an HMAC-SHA256 over the canonical encoding of every
other field, keyed by a secret shared between issuer and verifier. Hosts
interpret the kind against their own handler registry; no code moves.

The refined interaction mode replaces the result-shuttling messenger agent
with two bare messages (QueryMessage, ResultMessage) that ride the same
canonical encoding without envelope framing.
"""

from __future__ import annotations

import hashlib
import hmac as hmaclib
import uuid
from dataclasses import dataclass, replace
from urllib.parse import urlparse

from .errors import DecodeError, ParameterError, TrustError
from .gabor import FilterBankParams
from .index import ImageDescriptor
from .wire import Reader, Writer

PROTOCOL_VERSION = 1
MAC_LEN = 32

KIND_PARKED = "parked"
KIND_MESSENGER = "messenger"
KIND_INDEX = "index"
KIND_SEARCH = "search"

_KIND_CODES = {KIND_PARKED: 1, KIND_MESSENGER: 2, KIND_INDEX: 3, KIND_SEARCH: 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

MODE_MESSENGER = "messenger"
MODE_MESSAGES = "messages"
_MODE_CODES = {MODE_MESSENGER: 1, MODE_MESSAGES: 2}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


@dataclass(frozen=True)
class Certificate:
    issuer: str
    subject: str
    not_after: int  # unix seconds
    mac: bytes

    def write_to(self, w: Writer) -> None:
        w.text(self.issuer).text(self.subject).u64(self.not_after)
        w.raw(self.mac)

    @classmethod
    def read_from(cls, r: Reader) -> "Certificate":
        return cls(issuer=r.text(), subject=r.text(), not_after=r.u64(),
                   mac=r.raw(MAC_LEN))


@dataclass(frozen=True)
class AgentEnvelope:
    kind: str
    agent_id: str
    itinerary: tuple[str, ...]
    state: bytes
    certificate: Certificate | None = None
    version: int = PROTOCOL_VERSION

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODES:
            raise ParameterError(f"unknown agent kind {self.kind!r}")
        if not self.itinerary:
            raise ParameterError("itinerary must not be empty")

    def signable_bytes(self) -> bytes:
        """Canonical encoding of everything the mac must cover."""
        w = Writer()
        w.u16(self.version).u8(_KIND_CODES[self.kind]).text(self.agent_id)
        w.u16(len(self.itinerary))
        for hop in self.itinerary:
            w.text(hop)
        w.blob(self.state)
        if self.certificate is not None:
            w.text(self.certificate.issuer).text(self.certificate.subject)
            w.u64(self.certificate.not_after)
        return w.getvalue()

    def describe(self) -> str:
        """Diagnostic text rendering; never fed into the mac."""
        lines = [
            f"version: {self.version}",
            f"kind: {self.kind}",
            f"agent_id: {self.agent_id}",
            f"itinerary: {' -> '.join(self.itinerary)}",
            f"state: {len(self.state)} bytes",
        ]
        if self.certificate:
            lines.append(
                f"certificate: {self.certificate.issuer} -> {self.certificate.subject}"
                f" (until {self.certificate.not_after})"
            )
        return "\n".join(lines)


def encode_envelope(env: AgentEnvelope) -> bytes:
    if env.certificate is None:
        raise ParameterError("refusing to encode an unsigned envelope")
    w = Writer()
    w.u16(env.version).u8(_KIND_CODES[env.kind]).text(env.agent_id)
    w.u16(len(env.itinerary))
    for hop in env.itinerary:
        w.text(hop)
    w.blob(env.state)
    env.certificate.write_to(w)
    return w.getvalue()


def decode_envelope(data: bytes) -> AgentEnvelope:
    r = Reader(data)
    version = r.u16()
    if version != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported protocol version {version}")
    code = r.u8()
    if code not in _CODE_KINDS:
        raise DecodeError(f"unknown agent kind code {code}")
    agent_id = r.text()
    itinerary = tuple(r.text() for _ in range(r.u16()))
    state = r.blob()
    certificate = Certificate.read_from(r)
    r.expect_end()
    if not itinerary:
        raise DecodeError("envelope itinerary is empty")
    return AgentEnvelope(kind=_CODE_KINDS[code], agent_id=agent_id,
                         itinerary=itinerary, state=state,
                         certificate=certificate, version=version)


def sign(env: AgentEnvelope, secret: bytes, *, issuer: str, subject: str,
         not_after: int) -> AgentEnvelope:
    """Attach a certificate whose mac covers every envelope field."""
    unsigned = replace(env, certificate=Certificate(issuer, subject, not_after, b""))
    mac = hmaclib.new(secret, unsigned.signable_bytes(), hashlib.sha256).digest()
    return replace(env, certificate=Certificate(issuer, subject, not_after, mac))


def verify(env: AgentEnvelope, trust: dict[str, bytes], now: float) -> None:
    """Raise TrustError unless the envelope's certificate is valid right now."""
    cert = env.certificate
    if cert is None:
        raise TrustError("missing", "envelope carries no certificate")
    if cert.not_after < now:
        raise TrustError("expired", f"certificate expired at {cert.not_after}")
    secret = trust.get(cert.issuer)
    if secret is None:
        raise TrustError("unknown-issuer", f"no shared secret for issuer {cert.issuer!r}")
    expected = hmaclib.new(secret, env.signable_bytes(), hashlib.sha256).digest()
    if not hmaclib.compare_digest(expected, cert.mac):
        raise TrustError("bad-mac", "envelope was mutated after signing")


def _require_url(url: str) -> str:
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https", "inproc") or not parsed.netloc:
        raise ParameterError(f"malformed host URL {url!r}")
    return url


# --- query / result messages -------------------------------------------------

QUERY_BY_FEATURE = 1
QUERY_BY_IMAGE = 2


@dataclass(frozen=True)
class QueryMessage:
    session_id: str
    payload_kind: int  # QUERY_BY_FEATURE or QUERY_BY_IMAGE
    payload: bytes
    k: int

    def to_bytes(self) -> bytes:
        w = Writer()
        w.text(self.session_id).u8(self.payload_kind).blob(self.payload).u32(self.k)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QueryMessage":
        r = Reader(data)
        msg = cls._read(r)
        r.expect_end()
        return msg

    @classmethod
    def _read(cls, r: Reader) -> "QueryMessage":
        session_id = r.text()
        payload_kind = r.u8()
        if payload_kind not in (QUERY_BY_FEATURE, QUERY_BY_IMAGE):
            raise DecodeError(f"unknown query payload kind {payload_kind}")
        return cls(session_id, payload_kind, r.blob(), r.u32())


@dataclass(frozen=True)
class ResultMessage:
    session_id: str
    status: str
    descriptors: tuple[ImageDescriptor, ...]

    def to_bytes(self) -> bytes:
        w = Writer()
        w.text(self.session_id).text(self.status)
        w.u32(len(self.descriptors))
        for desc in self.descriptors:
            desc.write_to(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResultMessage":
        r = Reader(data)
        session_id, status = r.text(), r.text()
        descriptors = tuple(ImageDescriptor.read_from(r) for _ in range(r.u32()))
        r.expect_end()
        return cls(session_id, status, descriptors)


# --- kind-specific state payloads ---------------------------------------------


@dataclass(frozen=True)
class ParkedState:
    reply_address: str
    mode: str
    initial_query: QueryMessage | None  # session_id is empty until hosted

    def to_bytes(self) -> bytes:
        w = Writer()
        w.text(self.reply_address).u8(_MODE_CODES[self.mode])
        if self.initial_query is None:
            w.u8(0)
        else:
            w.u8(1).blob(self.initial_query.to_bytes())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParkedState":
        r = Reader(data)
        reply_address = r.text()
        mode_code = r.u8()
        if mode_code not in _CODE_MODES:
            raise DecodeError(f"unknown session mode code {mode_code}")
        initial = None
        if r.u8() == 1:
            initial = QueryMessage.from_bytes(r.blob())
        r.expect_end()
        return cls(reply_address, _CODE_MODES[mode_code], initial)


@dataclass(frozen=True)
class IndexTask:
    bank_params: FilterBankParams

    def to_bytes(self) -> bytes:
        p = self.bank_params
        w = Writer()
        w.u32(p.scales).u32(p.orientations).f64(p.low_freq).f64(p.high_freq)
        w.u32(p.kernel_size)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "IndexTask":
        r = Reader(data)
        scales, orientations = r.u32(), r.u32()
        low, high = r.f64(), r.f64()
        size = r.u32()
        r.expect_end()
        try:
            return cls(FilterBankParams(scales, orientations, low, high, size))
        except ParameterError as exc:
            raise DecodeError(f"invalid filter bank parameters: {exc}") from exc


@dataclass(frozen=True)
class SearchItem:
    image_id: str
    license_token: str
    purchaser_id: str


@dataclass(frozen=True)
class SearchTask:
    items: tuple[SearchItem, ...]

    def to_bytes(self) -> bytes:
        w = Writer()
        w.u32(len(self.items))
        for item in self.items:
            w.text(item.image_id).text(item.license_token).text(item.purchaser_id)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SearchTask":
        r = Reader(data)
        items = tuple(
            SearchItem(r.text(), r.text(), r.text()) for _ in range(r.u32())
        )
        r.expect_end()
        return cls(items)


RETRIEVED = "ok"
DENIED = "denied"
MISSING = "not-found"
FAILED = "error"
_STATUS_CODES = {RETRIEVED: 1, DENIED: 2, MISSING: 3, FAILED: 4}
_CODE_STATUSES = {v: k for k, v in _STATUS_CODES.items()}


@dataclass(frozen=True)
class RetrievalOutcome:
    image_id: str
    status: str
    payload: bytes = b""  # watermarked image when ok, reason text otherwise

    def reason(self) -> str:
        return "" if self.status == RETRIEVED else self.payload.decode("utf-8", "replace")


@dataclass(frozen=True)
class SearchResults:
    outcomes: tuple[RetrievalOutcome, ...]

    def to_bytes(self) -> bytes:
        w = Writer()
        w.u32(len(self.outcomes))
        for out in self.outcomes:
            if out.status not in _STATUS_CODES:
                raise ParameterError(f"unknown retrieval status {out.status!r}")
            w.text(out.image_id).u8(_STATUS_CODES[out.status]).blob(out.payload)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SearchResults":
        r = Reader(data)
        outcomes = []
        for _ in range(r.u32()):
            image_id = r.text()
            code = r.u8()
            if code not in _CODE_STATUSES:
                raise DecodeError(f"unknown retrieval status code {code}")
            outcomes.append(RetrievalOutcome(image_id, _CODE_STATUSES[code], r.blob()))
        r.expect_end()
        return cls(tuple(outcomes))


# --- envelope factories -------------------------------------------------------


def fresh_agent_id() -> str:
    return uuid.uuid4().hex


def make_parked(
    broker_url: str,
    query: QueryMessage | None = None,
    *,
    reply_address: str = "",
    mode: str = MODE_MESSAGES,
    agent_id: str | None = None,
) -> AgentEnvelope:
    """Unsigned parked-agent envelope; sign() it before sending."""
    _require_url(broker_url)
    if mode not in _MODE_CODES:
        raise ParameterError(f"unknown session mode {mode!r}")
    state = ParkedState(reply_address, mode, query).to_bytes()
    return AgentEnvelope(
        kind=KIND_PARKED,
        agent_id=agent_id or fresh_agent_id(),
        itinerary=(broker_url,),
        state=state,
    )


def make_index(
    provider_urls: list[str],
    bank_params: FilterBankParams,
    broker_url: str,
) -> list[AgentEnvelope]:
    """One unsigned index-task envelope per distinct provider (go, come back)."""
    if not provider_urls:
        raise ParameterError("at least one provider URL is required")
    _require_url(broker_url)
    state = IndexTask(bank_params).to_bytes()
    seen: dict[str, None] = {}
    for url in provider_urls:
        seen.setdefault(_require_url(url))
    return [
        AgentEnvelope(
            kind=KIND_INDEX,
            agent_id=fresh_agent_id(),
            itinerary=(url, broker_url),
            state=state,
        )
        for url in seen
    ]


def make_search(
    provider_url: str,
    items: list[SearchItem],
    broker_url: str,
) -> AgentEnvelope:
    _require_url(provider_url)
    _require_url(broker_url)
    return AgentEnvelope(
        kind=KIND_SEARCH,
        agent_id=fresh_agent_id(),
        itinerary=(provider_url, broker_url),
        state=SearchTask(tuple(items)).to_bytes(),
    )


def make_messenger(
    destination: str,
    content: QueryMessage | ResultMessage,
    *,
    agent_id: str | None = None,
) -> AgentEnvelope:
    """Messenger-mode shuttle wrapping either a query or a result."""
    w = Writer()
    if isinstance(content, QueryMessage):
        w.u8(1)
    else:
        w.u8(2)
    w.blob(content.to_bytes())
    return AgentEnvelope(
        kind=KIND_MESSENGER,
        agent_id=agent_id or fresh_agent_id(),
        itinerary=(destination,),
        state=w.getvalue(),
    )


def open_messenger(state: bytes) -> QueryMessage | ResultMessage:
    r = Reader(state)
    tag = r.u8()
    body = r.blob()
    r.expect_end()
    if tag == 1:
        return QueryMessage.from_bytes(body)
    if tag == 2:
        return ResultMessage.from_bytes(body)
    raise DecodeError(f"unknown messenger content tag {tag}")
