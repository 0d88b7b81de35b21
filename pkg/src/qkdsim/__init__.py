"""Deterministic QKD sub-network simulator.

BB84 over a simulated quantum channel, Cascade reconciliation, Toeplitz
privacy amplification, a synchronized key store with stream demultiplexing,
trusted-node multi-hop relay, and a miniature IKE/TLS-style handshake that
consumes the resulting key material.
"""

__version__ = "0.1.0"
