import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from imagebroker.broker import Broker, BrokerConfig
from imagebroker.images import encode_png, write_pgm
from imagebroker.provider import ProviderConfig, ProviderNode
from imagebroker.transport import InProcessTransport

from helpers import texture_patch

BROKER_URL = "inproc://broker"
PROVIDER_A = "inproc://provider-a"
PROVIDER_B = "inproc://provider-b"
CLIENT_ID = "client-1"
CLIENT_SECRET = b"client-shared-secret"
PROVIDER_SECRETS = {
    PROVIDER_A: b"broker-provider-a-secret",
    PROVIDER_B: b"broker-provider-b-secret",
}


class FakeClock:
    def __init__(self, start: float = 1_700_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def build_archive(root: Path, provider_url: str, seeds: range) -> tuple[Path, Path, Path]:
    """Write a small archive: PNG and PGM textures, a manifest and licenses."""
    archive = root / "archive"
    archive.mkdir(parents=True)
    manifest = {}
    for i, seed in enumerate(seeds):
        image_id = f"tex{i:02d}"
        img = texture_patch(seed)
        if i % 2 == 0:
            path = archive / f"{image_id}.png"
            path.write_bytes(encode_png(img.pixels))
        else:
            path = archive / f"{image_id}.pgm"
            path.write_bytes(write_pgm(img))
        manifest[image_id] = path.name
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    licenses = [
        {"token": "wildcard-many", "imageId": "*", "purchaserId": "", "usesRemaining": 50},
        {"token": "tex00-once", "imageId": "tex00", "purchaserId": "", "usesRemaining": 1},
        {"token": "spent", "imageId": "*", "purchaserId": "", "usesRemaining": 0},
        {"token": "alice-only", "imageId": "*", "purchaserId": "alice", "usesRemaining": 9},
    ]
    licenses_path = root / "licenses.json"
    licenses_path.write_text(json.dumps(licenses, indent=2))
    return archive, manifest_path, licenses_path


@dataclass
class Stack:
    broker: Broker
    providers: dict[str, ProviderNode]
    transport: InProcessTransport
    clock: FakeClock
    corpus: dict[str, dict[str, Path]]  # provider_url -> image_id -> file path

    def image_bytes(self, provider_url: str, image_id: str) -> bytes:
        return self.corpus[provider_url][image_id].read_bytes()


def make_provider(root: Path, provider_url: str, seeds: range, clock: FakeClock) -> ProviderNode:
    archive, manifest_path, licenses_path = build_archive(root, provider_url, seeds)
    config = ProviderConfig(
        provider_url=provider_url,
        archive_dir=archive,
        manifest_path=manifest_path,
        licenses_path=licenses_path,
        trust={BROKER_URL: PROVIDER_SECRETS[provider_url]},
    )
    return ProviderNode(config, clock=clock)


def make_stack(root: Path, provider_count: int = 2, images_per_provider: int = 10) -> Stack:
    clock = FakeClock()
    transport = InProcessTransport()
    providers = {}
    corpus: dict[str, dict[str, Path]] = {}
    urls = [PROVIDER_A, PROVIDER_B][:provider_count]
    for p, url in enumerate(urls):
        node = make_provider(
            root / f"provider{p}", url,
            range(p * 1000, p * 1000 + images_per_provider), clock,
        )
        providers[url] = node
        transport.register(url, node.handle_envelope)
        corpus[url] = {
            image_id: Path(node.config.archive_dir) / rel
            for image_id, rel in json.loads(
                Path(node.config.manifest_path).read_text()).items()
        }
    trust = {CLIENT_ID: CLIENT_SECRET}
    trust.update({url: PROVIDER_SECRETS[url] for url in urls})
    broker = Broker(
        BrokerConfig(
            broker_url=BROKER_URL,
            provider_urls=tuple(urls),
            trust=trust,
            reindex_max_age=3600.0,
            session_idle_timeout=1800.0,
            default_k=10,
        ),
        transport,
        clock=clock,
    )
    transport.register(BROKER_URL, broker.handle_envelope)
    return Stack(broker=broker, providers=providers, transport=transport,
                 clock=clock, corpus=corpus)


@pytest.fixture(scope="session")
def stack(tmp_path_factory) -> Stack:
    """Shared 2-provider stack; tests must not mutate its licenses destructively."""
    return make_stack(tmp_path_factory.mktemp("stack"))


@pytest.fixture()
def fresh_stack(tmp_path) -> Stack:
    """Isolated stack for tests that consume licenses or reconfigure things."""
    return make_stack(tmp_path, images_per_provider=4)


# --- real HTTP stack -----------------------------------------------------------


@dataclass
class HttpStack:
    broker_url: str
    provider_urls: list[str]
    client_id: str
    client_secret: bytes
    secret_file: Path
    image_dir: Path
    servers: list


def _free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="session")
def http_stack(tmp_path_factory) -> HttpStack:
    from imagebroker.broker import Broker as RealBroker, BrokerConfig
    from imagebroker.httpd import serve_broker, serve_provider, start_in_background
    from imagebroker.provider import ProviderConfig as PConfig, ProviderNode as PNode
    from imagebroker.synth import build_demo_archive
    from imagebroker.transport import HttpTransport

    root = tmp_path_factory.mktemp("http")
    broker_port = _free_port()
    broker_url = f"http://127.0.0.1:{broker_port}"
    client_id, client_secret = "demo-client", b"demo-client-secret"

    servers = []
    provider_urls = []
    trust = {client_id: client_secret}
    image_dir = None
    for p in range(2):
        secret = f"http-pair-{p}".encode()
        archive, manifest, licenses = build_demo_archive(
            root / f"provider{p}", count=10, seed_base=p * 500)
        if image_dir is None:
            image_dir = archive
        node = PNode(PConfig(
            provider_url="placeholder",  # fixed below once the port is known
            archive_dir=archive,
            manifest_path=manifest,
            licenses_path=licenses,
            trust={broker_url: secret},
        ))
        server = serve_provider(node, port=0)
        port = server.server_address[1]
        url = f"http://127.0.0.1:{port}"
        node.config.provider_url = url
        provider_urls.append(url)
        trust[url] = secret
        start_in_background(server)
        servers.append(server)

    broker = RealBroker(
        BrokerConfig(
            broker_url=broker_url,
            provider_urls=tuple(provider_urls),
            trust=trust,
            reindex_max_age=3600.0,
        ),
        HttpTransport(timeout=10.0),
    )
    broker_server = serve_broker(broker, port=broker_port)
    start_in_background(broker_server)
    servers.append(broker_server)

    secret_file = root / "client.secret"
    secret_file.write_bytes(client_secret)

    stack = HttpStack(
        broker_url=broker_url,
        provider_urls=provider_urls,
        client_id=client_id,
        client_secret=client_secret,
        secret_file=secret_file,
        image_dir=image_dir,
        servers=servers,
    )
    yield stack
    for server in servers:
        server.shutdown()
        server.server_close()
