"""Distributed query-by-example image retrieval.

A broker indexes provider-held image archives by sending signed index tasks
to the data, answers texture-similarity queries over the merged index, and
brokers license-gated retrieval of watermarked full images. A benchmark
harness compares the client interaction styles over a simulated slow link.
"""

__version__ = "0.1.0"
