"""Encrypted block-wise split-learning protocol between one server and K clients."""

from .aggregation import fedavg, secure_aggregate
from .messages import Channel, CommLedger, Message
from .partition import dirichlet_partition
from .roles import (
    ClientState,
    ServerState,
    client_relay,
    encrypted_loss_and_grad,
    server_block_eval,
    upload_encrypted_dataset,
)
from .runner import (
    Federation,
    comm_cost_model,
    run_adaptation,
    run_plaintext_oracle,
    run_round,
    setup_federation,
)

__all__ = [
    "Channel",
    "ClientState",
    "CommLedger",
    "Federation",
    "Message",
    "ServerState",
    "client_relay",
    "comm_cost_model",
    "dirichlet_partition",
    "encrypted_loss_and_grad",
    "fedavg",
    "run_adaptation",
    "run_plaintext_oracle",
    "run_round",
    "secure_aggregate",
    "server_block_eval",
    "setup_federation",
    "upload_encrypted_dataset",
]
