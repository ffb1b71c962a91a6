"""How envelopes travel between hosts.

The broker and providers exchange encoded envelopes through a Transport,
so the same service code runs against in-process handlers (tests, the
benchmark) or real HTTP peers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from .errors import NetworkError


class Transport(Protocol):
    def send_envelope(self, url: str, data: bytes) -> bytes: ...


class InProcessTransport:
    """Routes envelopes to registered handler callables keyed by URL."""

    def __init__(self) -> None:
        self._handlers: dict[str, Callable[[bytes], bytes]] = {}

    def register(self, url: str, handler: Callable[[bytes], bytes]) -> None:
        self._handlers[url] = handler

    def unregister(self, url: str) -> None:
        self._handlers.pop(url, None)

    def send_envelope(self, url: str, data: bytes) -> bytes:
        handler = self._handlers.get(url)
        if handler is None:
            raise NetworkError(f"no route to {url}")
        return handler(data)


class HttpTransport:
    """POSTs envelopes to the peer's /agents endpoint."""

    def __init__(self, timeout: float = 30.0):
        self._timeout = timeout

    def send_envelope(self, url: str, data: bytes) -> bytes:
        try:
            response = requests.post(
                url.rstrip("/") + "/agents",
                data=data,
                headers={"Content-Type": "application/octet-stream"},
                timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise NetworkError(f"cannot reach {url}: {exc}") from exc
        if response.status_code != 200:
            raise NetworkError(
                f"{url} answered {response.status_code}: {response.text[:200]}"
            )
        return response.content


@dataclass
class TrafficLog:
    """Byte tally per direction, fed by CountingTransport."""

    sent: int = 0
    received: int = 0
    round_trips: int = 0
    calls: list[tuple[str, int, int]] = field(default_factory=list)

    def record(self, url: str, sent: int, received: int) -> None:
        self.sent += sent
        self.received += received
        self.round_trips += 1
        self.calls.append((url, sent, received))

    def reset(self) -> None:
        self.sent = 0
        self.received = 0
        self.round_trips = 0
        self.calls.clear()


class CountingTransport:
    """Wraps another transport and tallies payload bytes both ways."""

    def __init__(self, inner: Transport, log: TrafficLog | None = None):
        self._inner = inner
        self.log = log if log is not None else TrafficLog()

    def send_envelope(self, url: str, data: bytes) -> bytes:
        reply = self._inner.send_envelope(url, data)
        self.log.record(url, len(data), len(reply))
        return reply
