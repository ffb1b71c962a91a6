"""Synthetic texture generation and demo environment assembly.

Used by the benchmark's integration mode, the CLI's demo setup, and the test
suite, so every runnable surface shares one fixture recipe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .broker import Broker, BrokerConfig
from .images import GrayImage, encode_png, write_pgm
from .provider import ProviderConfig, ProviderNode
from .transport import InProcessTransport


def texture_patch(seed: int, size: int = 128) -> GrayImage:
    """Reproducible texture: a few random gratings plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(3):
        freq = rng.uniform(0.05, 0.35)
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img += rng.uniform(0.4, 1.0) * np.sin(
            2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase
        )
    img += rng.normal(0.0, 0.35, (size, size))
    img -= img.min()
    img *= 255.0 / max(img.max(), 1e-9)
    return GrayImage.from_array(np.round(img).astype(np.uint8))


def build_demo_archive(root: Path, count: int, seed_base: int) -> tuple[Path, Path, Path]:
    """Archive directory + manifest + licenses for a demo provider."""
    archive = root / "archive"
    archive.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i in range(count):
        image_id = f"tex{i:02d}"
        img = texture_patch(seed_base + i)
        if i % 2 == 0:
            path = archive / f"{image_id}.png"
            path.write_bytes(encode_png(img.pixels))
        else:
            path = archive / f"{image_id}.pgm"
            path.write_bytes(write_pgm(img))
        manifest[image_id] = path.name
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    licenses_path = root / "licenses.json"
    licenses_path.write_text(json.dumps([
        {"token": "demo-license", "imageId": "*", "purchaserId": "",
         "usesRemaining": 1000},
        {"token": "demo-spent", "imageId": "*", "purchaserId": "",
         "usesRemaining": 0},
    ], indent=2))
    return archive, manifest_path, licenses_path


@dataclass
class DemoStack:
    broker: Broker
    providers: dict[str, ProviderNode]
    transport: InProcessTransport
    client_id: str
    client_secret: bytes


def build_demo_stack(workdir: Path, images_per_provider: int = 4,
                     provider_count: int = 2) -> DemoStack:
    """In-process broker plus providers over freshly generated archives."""
    workdir = Path(workdir)
    broker_url = "inproc://broker"
    client_id, client_secret = "demo-client", b"demo-client-secret"
    transport = InProcessTransport()
    providers: dict[str, ProviderNode] = {}
    trust: dict[str, bytes] = {client_id: client_secret}
    for p in range(provider_count):
        url = f"inproc://provider-{p}"
        secret = f"broker-provider-{p}-secret".encode()
        archive, manifest, licenses = build_demo_archive(
            workdir / f"provider{p}", images_per_provider, seed_base=p * 1000)
        node = ProviderNode(ProviderConfig(
            provider_url=url,
            archive_dir=archive,
            manifest_path=manifest,
            licenses_path=licenses,
            trust={broker_url: secret},
        ))
        providers[url] = node
        transport.register(url, node.handle_envelope)
        trust[url] = secret
    broker = Broker(
        BrokerConfig(
            broker_url=broker_url,
            provider_urls=tuple(providers),
            trust=trust,
            reindex_max_age=3600.0,
        ),
        transport,
    )
    transport.register(broker_url, broker.handle_envelope)
    return DemoStack(broker=broker, providers=providers, transport=transport,
                     client_id=client_id, client_secret=client_secret)
