"""Benchmark of the three client interaction styles over a constrained link.

Strategies:
  traditional     - per-query request/response; the first query also pays the
                    one-time client setup download (the applet analog).
  parkedMessenger - a parked surrogate at the broker; queries and results
                    shuttle inside messenger agent envelopes.
  parkedMessages  - the refinement: same parked surrogate, but bare query and
                    result messages replace the messenger.

Cost model: every exchange is one round trip costing
rtt + 8 * (payload + overhead) / bandwidth. ``envelope_bytes`` is the size of
an agent envelope carrying a query, so the envelope framing overhead is
``envelope_bytes - query_bytes`` and a result-bearing envelope weighs
``framing + result_bytes``. Reported times are model outputs, not ground
truth; the meaningful artifact is the ordering of the strategies.

Integration mode drives the real broker/provider stack in-process, counts
the bytes each exchange actually produced, and prices them with the same
link formula.
"""

from __future__ import annotations

import json
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ParameterError
from .protocol import (
    MODE_MESSAGES,
    MODE_MESSENGER,
    QUERY_BY_FEATURE,
    QueryMessage,
    decode_envelope,
    encode_envelope,
    make_messenger,
    make_parked,
    open_messenger,
    sign,
)

TRADITIONAL = "traditional"
PARKED_MESSENGER = "parkedMessenger"
PARKED_MESSAGES = "parkedMessages"
STRATEGIES = (TRADITIONAL, PARKED_MESSENGER, PARKED_MESSAGES)

FIRST = "first"
SUBSEQUENT = "subsequent"


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bits_per_sec: float = 64_000.0
    rtt_seconds: float = 0.3
    per_request_overhead_bytes: float = 200.0

    def __post_init__(self) -> None:
        if (self.bandwidth_bits_per_sec <= 0 or self.rtt_seconds <= 0
                or self.per_request_overhead_bytes <= 0):
            raise ParameterError("link model values must be positive")

    def round_trip_seconds(self, payload_bytes: float) -> float:
        return self.rtt_seconds + 8.0 * (
            payload_bytes + self.per_request_overhead_bytes
        ) / self.bandwidth_bits_per_sec


@dataclass(frozen=True)
class StrategyModel:
    strategy: str
    setup_bytes: float = 0.0
    envelope_bytes: float = 8_000.0
    query_bytes: float = 2_000.0
    result_bytes: float = 2_000.0
    broker_processing_seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        for name in ("setup_bytes", "envelope_bytes", "query_bytes",
                     "result_bytes", "broker_processing_seconds"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.envelope_bytes < self.query_bytes:
            raise ParameterError(
                "envelope_bytes is the size of an envelope carrying the query; "
                "it cannot be smaller than query_bytes"
            )

    @property
    def envelope_framing(self) -> float:
        return self.envelope_bytes - self.query_bytes

    def transfers(self, is_first: bool) -> list[float]:
        """Round-trip payload sizes in bytes, per the strategy's schedule."""
        exchange = self.query_bytes + self.result_bytes
        messenger_trip = self.envelope_bytes + self.envelope_framing + self.result_bytes
        if self.strategy == TRADITIONAL:
            return [self.setup_bytes, exchange] if is_first else [exchange]
        if self.strategy == PARKED_MESSENGER:
            return [self.envelope_bytes, messenger_trip] if is_first else [messenger_trip]
        # parked + messages
        return [self.envelope_bytes, exchange] if is_first else [exchange]


def simulate_query(
    strategy: StrategyModel,
    link: LinkModel,
    is_first: bool,
    jitter_seconds: float = 0.0,
    rng: random.Random | None = None,
) -> float:
    """Deterministic closed-form cost, plus optional zero-mean jitter."""
    total = sum(link.round_trip_seconds(b) for b in strategy.transfers(is_first))
    total += strategy.broker_processing_seconds
    if jitter_seconds > 0.0 and rng is not None:
        total += rng.uniform(-jitter_seconds, jitter_seconds)
    return total


@dataclass(frozen=True)
class PhaseStats:
    mean: float
    median: float
    stddev: float
    n: int

    @classmethod
    def of(cls, samples: Iterable[float]) -> "PhaseStats":
        values = list(samples)
        if not values:
            raise ParameterError("cannot summarize zero samples")
        return cls(
            mean=statistics.fmean(values),
            median=statistics.median(values),
            stddev=statistics.pstdev(values),
            n=len(values),
        )


@dataclass
class BenchReport:
    cells: dict[tuple[str, str], PhaseStats] = field(default_factory=dict)

    def stats(self, strategy: str, phase: str) -> PhaseStats:
        return self.cells[(strategy, phase)]

    def ordering(self, phase: str) -> list[str]:
        """Strategies sorted by mean time for the phase, fastest first."""
        return sorted(STRATEGIES, key=lambda s: self.cells[(s, phase)].mean)

    def to_csv(self) -> str:
        lines = ["strategy,phase,mean_s,median_s,stddev_s,n"]
        for strategy in STRATEGIES:
            for phase in (FIRST, SUBSEQUENT):
                cell = self.cells[(strategy, phase)]
                lines.append(
                    f"{strategy},{phase},{cell.mean:.6f},{cell.median:.6f},"
                    f"{cell.stddev:.6f},{cell.n}"
                )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BenchConfig:
    link: LinkModel = field(default_factory=LinkModel)
    strategies: tuple[StrategyModel, ...] = ()
    jitter_seconds: float = 0.0

    def strategy(self, name: str) -> StrategyModel:
        for model in self.strategies:
            if model.strategy == name:
                return model
        raise ParameterError(f"config has no model for strategy {name!r}")


def default_config() -> BenchConfig:
    """The documented defaults: 64 kbps, 0.3 s rtt, 200 KB traditional setup."""
    return BenchConfig(
        link=LinkModel(),
        strategies=(
            StrategyModel(TRADITIONAL, setup_bytes=200_000.0),
            StrategyModel(PARKED_MESSENGER),
            StrategyModel(PARKED_MESSAGES),
        ),
    )


def load_config(path: str | Path) -> BenchConfig:
    raw = json.loads(Path(path).read_text())
    link_raw = raw.get("link", {})
    link = LinkModel(
        bandwidth_bits_per_sec=float(link_raw.get("bandwidthBitsPerSec", 64_000)),
        rtt_seconds=float(link_raw.get("rttSeconds", 0.3)),
        per_request_overhead_bytes=float(link_raw.get("perRequestOverheadBytes", 200)),
    )
    strategies = []
    defaults = {s.strategy: s for s in default_config().strategies}
    for name in STRATEGIES:
        entry = raw.get("strategies", {}).get(name, {})
        base = defaults[name]
        strategies.append(StrategyModel(
            strategy=name,
            setup_bytes=float(entry.get("setupBytes", base.setup_bytes)),
            envelope_bytes=float(entry.get("envelopeBytes", base.envelope_bytes)),
            query_bytes=float(entry.get("queryBytes", base.query_bytes)),
            result_bytes=float(entry.get("resultBytes", base.result_bytes)),
            broker_processing_seconds=float(
                entry.get("brokerProcessingSeconds", base.broker_processing_seconds)),
        ))
    return BenchConfig(link=link, strategies=tuple(strategies),
                       jitter_seconds=float(raw.get("jitterSeconds", 0.0)))


def run_bench(config: BenchConfig, n_queries: int, seed: int = 0) -> BenchReport:
    """1 first + (n_queries - 1) subsequent simulated queries per strategy."""
    if n_queries < 1:
        raise ParameterError(f"n_queries must be >= 1, got {n_queries}")
    rng = random.Random(seed)
    report = BenchReport()
    for model in config.strategies:
        first = [simulate_query(model, config.link, True,
                                config.jitter_seconds, rng)]
        subsequent = [
            simulate_query(model, config.link, False, config.jitter_seconds, rng)
            for _ in range(n_queries - 1)
        ]
        report.cells[(model.strategy, FIRST)] = PhaseStats.of(first)
        report.cells[(model.strategy, SUBSEQUENT)] = PhaseStats.of(
            subsequent if subsequent else first)
    return report


# --- integration mode ---------------------------------------------------------


def run_integration_bench(
    config: BenchConfig,
    n_queries: int,
    workdir: str | Path,
    images_per_provider: int = 4,
) -> BenchReport:
    """Drive the real broker/provider stack and price actual wire bytes.

    Exchanges run over an in-process transport; each one is converted to
    virtual seconds with the same round-trip formula the simulation uses, so
    the orderings reflect the byte sizes the real protocol produces. The
    index is pre-warmed outside the timed region.
    """
    from .synth import build_demo_stack, texture_patch
    from .images import write_pgm, prepare_for_indexing
    from .gabor import extract_feature

    if n_queries < 1:
        raise ParameterError(f"n_queries must be >= 1, got {n_queries}")
    stack = build_demo_stack(Path(workdir), images_per_provider=images_per_provider)
    broker = stack.broker
    broker.dispatch_index_agents()
    link = config.link

    query_image = write_pgm(texture_patch(0))
    feature = extract_feature(prepare_for_indexing(query_image), broker.bank)
    feature_bytes = feature.to_bytes()
    k = 5
    not_after = int(time.time()) + 3600

    def signed_parked(mode: str, initial: QueryMessage | None):
        env = make_parked(broker.config.broker_url, initial, mode=mode)
        return encode_envelope(sign(env, stack.client_secret,
                                    issuer=stack.client_id,
                                    subject=broker.config.broker_url,
                                    not_after=not_after))

    def open_session(mode: str) -> tuple[str, float]:
        initial = QueryMessage("", QUERY_BY_FEATURE, feature_bytes, k)
        wire = signed_parked(mode, initial)
        reply = broker.handle_envelope(wire)
        from .wire import Reader
        session_id = Reader(reply).text()
        return session_id, float(len(wire) + len(reply))

    def poll_result(session_id: str) -> float:
        transmission = broker.deliver_result(session_id)
        return float(len(transmission.data))

    def bare_exchange(session_id: str) -> float:
        message = QueryMessage(session_id, QUERY_BY_FEATURE, feature_bytes, k)
        result = broker.handle_query(message)
        return float(len(message.to_bytes()) + len(result.to_bytes()))

    def messenger_exchange(session_id: str) -> float:
        message = QueryMessage(session_id, QUERY_BY_FEATURE, feature_bytes, k)
        env = make_messenger(broker.config.broker_url, message)
        wire = encode_envelope(sign(env, stack.client_secret,
                                    issuer=stack.client_id,
                                    subject=broker.config.broker_url,
                                    not_after=not_after))
        reply = broker.handle_envelope(wire)
        open_messenger(decode_envelope(reply).state)  # client-side unwrap
        return float(len(wire) + len(reply))

    report = BenchReport()
    for model in config.strategies:
        mode = MODE_MESSENGER if model.strategy == PARKED_MESSENGER else MODE_MESSAGES
        first_seconds = 0.0
        if model.strategy == TRADITIONAL:
            session_id, open_bytes = open_session(MODE_MESSAGES)
            # client bootstrap download (the applet analog) plus session open
            first_seconds += link.round_trip_seconds(model.setup_bytes + open_bytes)
            first_seconds += link.round_trip_seconds(bare_exchange(session_id))
        else:
            session_id, open_bytes = open_session(mode)
            first_seconds += link.round_trip_seconds(open_bytes)
            first_seconds += link.round_trip_seconds(poll_result(session_id))
        subsequent = []
        for _ in range(n_queries - 1):
            if model.strategy == PARKED_MESSENGER:
                nbytes = messenger_exchange(session_id)
            else:
                nbytes = bare_exchange(session_id)
            subsequent.append(link.round_trip_seconds(nbytes))
        report.cells[(model.strategy, FIRST)] = PhaseStats.of([first_seconds])
        report.cells[(model.strategy, SUBSEQUENT)] = PhaseStats.of(
            subsequent if subsequent else [first_seconds])
    return report
