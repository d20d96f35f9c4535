"""Federated rounds, aggregation and the two transports."""

from fedcd.federation.engine import (MODES, FederationConfig, LocalClient, aggregate_phi,
                                     aggregate_proxies, aggregation_windows, broadcast_apply,
                                     init_client, run_dsfcd, run_federated, run_sps,
                                     select_clients, vote_combine)
from fedcd.federation.protocol import (MsgType, ProtocolError, RoundMessage, tcp_decode,
                                       tcp_encode)

__all__ = [
    "MODES", "FederationConfig", "LocalClient", "MsgType", "ProtocolError", "RoundMessage",
    "aggregate_phi", "aggregate_proxies", "aggregation_windows", "broadcast_apply",
    "init_client", "run_dsfcd", "run_federated", "run_sps", "select_clients", "tcp_decode",
    "tcp_encode", "vote_combine",
]
