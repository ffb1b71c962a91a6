"""Command-line entry point: services, scripted flows, and the benchmark.

Exit codes: 0 ok, 2 usage, 3 network, 4 not-found, 5 access-denied,
6 input/decode.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
import time
from pathlib import Path

import requests

from . import bench as benchmod
from .broker import Broker, load_broker_config
from .errors import (
    AccessDeniedError,
    DecodeError,
    ImageBrokerError,
    InputError,
    NetworkError,
    NotFoundError,
    ParameterError,
    SessionError,
    TrustError,
)
from .gabor import FilterBankParams, build_filter_bank, extract_feature
from .httpd import serve_broker, serve_provider
from .images import prepare_for_indexing
from .protocol import (
    MODE_MESSAGES,
    MODE_MESSENGER,
    QUERY_BY_IMAGE,
    QueryMessage,
    decode_envelope,
    encode_envelope,
    make_parked,
    open_messenger,
    sign,
    verify,
)
from .provider import ProviderNode, load_provider_config
from .transport import HttpTransport
from .wire import Reader

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NETWORK = 3
EXIT_NOT_FOUND = 4
EXIT_ACCESS_DENIED = 5
EXIT_INPUT = 6

_HTTP_EXIT = {403: EXIT_ACCESS_DENIED, 404: EXIT_NOT_FOUND, 400: EXIT_INPUT}


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _fail_from_response(response: requests.Response) -> CliFailure:
    try:
        message = response.json().get("message", response.text)
    except ValueError:
        message = response.text
    code = _HTTP_EXIT.get(response.status_code, EXIT_NETWORK)
    return CliFailure(code, f"{response.status_code}: {message}")


def _post(url: str, **kwargs) -> requests.Response:
    try:
        response = requests.post(url, timeout=60, **kwargs)
    except requests.RequestException as exc:
        raise CliFailure(EXIT_NETWORK, f"cannot reach {url}: {exc}") from exc
    if response.status_code != 200:
        raise _fail_from_response(response)
    return response


def _get(url: str, **kwargs) -> requests.Response:
    try:
        response = requests.get(url, timeout=60, **kwargs)
    except requests.RequestException as exc:
        raise CliFailure(EXIT_NETWORK, f"cannot reach {url}: {exc}") from exc
    if response.status_code != 200:
        raise _fail_from_response(response)
    return response


def _read_secret(path: str) -> bytes:
    try:
        return Path(path).read_bytes().strip()
    except OSError as exc:
        raise CliFailure(EXIT_INPUT, f"cannot read secret file {path!r}: {exc}") from exc


def _read_image(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliFailure(EXIT_INPUT, f"cannot read image {path!r}: {exc}") from exc


def _open_session(args, initial_query: QueryMessage | None, mode: str) -> str:
    secret = _read_secret(args.secret_file)
    envelope = make_parked(args.broker, initial_query, mode=mode)
    signed_env = sign(envelope, secret, issuer=args.client_id, subject=args.broker,
                      not_after=int(time.time()) + 3600)
    response = _post(f"{args.broker.rstrip('/')}/agents",
                     data=encode_envelope(signed_env),
                     headers={"Content-Type": "application/octet-stream"})
    return Reader(response.content).text()


# --- subcommands ---------------------------------------------------------------


def cmd_serve_broker(args) -> int:
    config = load_broker_config(args.config)
    broker = Broker(config, HttpTransport())
    server = serve_broker(broker, host=args.host, port=args.port)
    print(f"broker {config.broker_url} listening on {args.host}:{args.port}, "
          f"providers: {', '.join(config.provider_urls)}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_serve_provider(args) -> int:
    config = load_provider_config(args.config)
    provider = ProviderNode(config)
    server = serve_provider(provider, host=args.host, port=args.port)
    print(f"provider {config.provider_url} listening on {args.host}:{args.port}, "
          f"{len(provider.image_ids())} images")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_index(args) -> int:
    response = _post(f"{args.broker.rstrip('/')}/admin/reindex")
    report = response.json()
    for url in report["merged"]:
        print(f"merged {url}")
    for url, reason in report["failures"].items():
        print(f"failed {url}: {reason}", file=sys.stderr)
    return EXIT_OK if not report["failures"] else EXIT_NETWORK


def cmd_query(args) -> int:
    data = _read_image(args.image)
    mode = MODE_MESSENGER if args.mode == "messenger" else MODE_MESSAGES
    initial = QueryMessage("", QUERY_BY_IMAGE, data, args.k)
    session_id = _open_session(args, initial, mode)
    base = args.broker.rstrip("/")
    if args.format == "json":
        response = _get(f"{base}/sessions/{session_id}/result",
                        headers={"Accept": "application/json"})
        print(response.text)
        return EXIT_OK
    response = _get(f"{base}/sessions/{session_id}/result")
    if mode == MODE_MESSENGER:
        envelope = decode_envelope(response.content)
        secret = _read_secret(args.secret_file)
        verify(envelope, {args.broker: secret}, time.time())
        result = open_messenger(envelope.state)
    else:
        from .protocol import ResultMessage
        result = ResultMessage.from_bytes(response.content)
    print(f"session {session_id}", file=sys.stderr)  # varies per run; stdout stays stable
    print(f"{len(result.descriptors)} results ({mode} mode)")
    print(f"{'rank':>4}  {'similarity':>12}  {'provider':<24} image")
    for rank, desc in enumerate(result.descriptors, start=1):
        print(f"{rank:>4}  {desc.similarity:>12.6f}  {desc.provider_url:<24} "
              f"{desc.image_id}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    try:
        provider_url, image_id = args.id.rsplit("/", 1)
    except ValueError:
        raise CliFailure(EXIT_USAGE, "--id must look like providerUrl/imageId")
    session_id = _open_session(args, None, MODE_MESSAGES)
    base = args.broker.rstrip("/")
    body = {
        "purchaserId": args.purchaser,
        "items": [{
            "providerUrl": provider_url,
            "imageId": image_id,
            "licenseToken": args.license or "",
        }],
    }
    response = _post(f"{base}/sessions/{session_id}/retrieve", json=body)
    item = response.json()["items"][0]
    if item["status"] == "ok":
        Path(args.out).write_bytes(base64.b64decode(item["imageBase64"]))
        print(f"wrote {args.out}")
        return EXIT_OK
    print(f"{item['status']}: {item.get('reason', '')}", file=sys.stderr)
    if item["status"] == "not-found":
        return EXIT_NOT_FOUND
    if item["status"] == "denied":
        return EXIT_ACCESS_DENIED
    return EXIT_NETWORK


def cmd_extract_feature(args) -> int:
    data = _read_image(args.image)
    bank = build_filter_bank(FilterBankParams())
    feature = extract_feature(prepare_for_indexing(data), bank)
    print(" ".join(f"{v:.6f}" for v in feature.components()))
    return EXIT_OK


def cmd_bench(args) -> int:
    config = benchmod.load_config(args.config) if args.config else benchmod.default_config()
    if args.integration:
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            report = benchmod.run_integration_bench(config, args.queries, tmp)
    else:
        report = benchmod.run_bench(config, args.queries, args.seed)
    csv = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv)
    print(csv, end="")
    first = report.ordering(benchmod.FIRST)
    sub = report.ordering(benchmod.SUBSEQUENT)
    print(f"# first-query ordering: {' < '.join(first)}")
    print(f"# subsequent ordering:  {' <= '.join(sub)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imagebroker",
        description="Distributed texture-based image retrieval: services, "
                    "scripted client flows, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-broker", help="run the broker service")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8440)

    p = sub.add_parser("serve-provider", help="run a provider agent server")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8450)

    p = sub.add_parser("index", help="force the broker to re-index every provider")
    p.add_argument("--broker", required=True)

    p = sub.add_parser("query", help="query by example image")
    p.add_argument("--broker", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--mode", choices=["messenger", "messages"], default="messages")
    p.add_argument("--client-id", default="demo-client")
    p.add_argument("--secret-file", required=True)
    p.add_argument("--format", choices=["table", "json"], default="table")

    p = sub.add_parser("retrieve", help="retrieve a licensed, watermarked full image")
    p.add_argument("--broker", required=True)
    p.add_argument("--id", required=True, help="providerUrl/imageId")
    p.add_argument("--license", default="")
    p.add_argument("--purchaser", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--client-id", default="demo-client")
    p.add_argument("--secret-file", required=True)

    p = sub.add_parser("extract-feature", help="print an image's texture feature")
    p.add_argument("--image", required=True)

    p = sub.add_parser("bench", help="run the interaction-methodology benchmark")
    p.add_argument("--config")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--integration", action="store_true",
                   help="drive the real in-process stack instead of the closed form")

    return parser


_HANDLERS = {
    "serve-broker": cmd_serve_broker,
    "serve-provider": cmd_serve_provider,
    "index": cmd_index,
    "query": cmd_query,
    "retrieve": cmd_retrieve,
    "extract-feature": cmd_extract_feature,
    "bench": cmd_bench,
}

_ERROR_EXIT = [
    ((TrustError, AccessDeniedError), EXIT_ACCESS_DENIED),
    ((NotFoundError, SessionError), EXIT_NOT_FOUND),
    ((NetworkError,), EXIT_NETWORK),
    ((InputError, DecodeError), EXIT_INPUT),
    ((ParameterError,), EXIT_USAGE),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ImageBrokerError as exc:
        for classes, code in _ERROR_EXIT:
            if isinstance(exc, classes):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
