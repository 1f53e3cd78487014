"""Client and server state and the individual protocol steps.

Every step runs under ``audit.acting_as`` for the party executing it, so the
audit log can attribute decryptions and backbone reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import audit, he
from ..adapter import AdapterParams, HeadParams
from ..data import Dataset
from ..kernels import KernelConfig
from ..privacy import (
    DEFAULT_NOISE_MULTIPLIER,
    NoiseMaskLedger,
    PermutationSet,
    SamplingMask,
    apply_permutation,
    gen_permutations,
    sbs_mask,
)
from ..transformer import APPROXIMATED, BlockParams, EmbedParams, ModelConfig, block_forward, embed
from .messages import CIPHERTEXT, SERVER

# RNG stream tags: every random draw is keyed by (seed, tag, round, client, ...)
TAG_BATCH = 1
TAG_PERM = 2
TAG_MASK = 3
TAG_NOISE = 4
TAG_KEY = 5
TAG_PARTITION = 6
TAG_INIT = 7


def stream(seed: int, tag: int, *keys) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *keys])


def batch_indices(seed: int, round: int, client_index: int, step: int, n_k: int, n: int) -> np.ndarray:
    """Server-side batch draw: min(n, N_k) indices without replacement."""
    return np.sort(stream(seed, TAG_BATCH, round, client_index, step).choice(n_k, size=min(n, n_k), replace=False))


def one_hot(y, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(y)]


class FrozenBlocks:
    """Server-held approximated backbone; every access is attributed to the caller."""

    def __init__(self, blocks):
        self._blocks = tuple(blocks)

    def __len__(self):
        return len(self._blocks)

    def block(self, l: int) -> BlockParams:
        log = audit.current_log()
        if log is not None:
            log.note_block_read(audit.current_actor())
        return self._blocks[l]

    def arrays(self) -> list:
        """All backbone tensors (for audit scans only)."""
        out = []
        for b in self._blocks:
            out.extend(vars(b).values())
        return out


@dataclass
class ClientState:
    client_id: str
    index: int
    key: he.KeyHandle
    data: Dataset
    theta: AdapterParams
    eta: HeadParams
    # plaintext block outputs the client kept, per (round, step); filled when record_views is set
    views: dict = field(default_factory=dict)
    record_views: bool = False

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass
class EncryptedDataset:
    x: he.Ciphertext
    y: he.Ciphertext
    b0: he.Ciphertext

    def __len__(self):
        return self.x.shape[0]


@dataclass
class RoundState:
    batch: np.ndarray
    perms: Optional[PermutationSet]
    mask: Optional[SamplingMask]
    noise: NoiseMaskLedger
    client_index: int

    def selected(self, l: int) -> bool:
        return self.mask is None or self.mask[l]


@dataclass
class ServerState:
    model_config: ModelConfig
    kernels: KernelConfig
    embed_params: EmbedParams
    blocks: FrozenBlocks
    scales: list
    seed: int = 0
    permutation: bool = False
    sbs: str = "off"
    noise_multiplier: float = DEFAULT_NOISE_MULTIPLIER
    batch_size: int = 16
    datasets: dict = field(default_factory=dict)
    rounds: dict = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def begin_round(self, client_id: str, client_index: int, round: int, step: int = 0) -> RoundState:
        n_k = len(self.datasets[client_id])
        batch = batch_indices(self.seed, round, client_index, step, n_k, self.batch_size)
        L = self.num_blocks
        perms = gen_permutations(len(batch), L, stream(self.seed, TAG_PERM, round, client_index, step)) if self.permutation else None
        mask = None
        if self.sbs != "off":
            mask = sbs_mask(L, self.sbs == "constrained", stream(self.seed, TAG_MASK, round, client_index, step))
        st = RoundState(batch=batch, perms=perms, mask=mask, noise=NoiseMaskLedger(), client_index=client_index)
        self.rounds[(client_id, round, step)] = st
        return st

    def round_state(self, client_id: str, round: int, step: int = 0) -> RoundState:
        try:
            return self.rounds[(client_id, round, step)]
        except KeyError:
            raise KeyError(f"no round state for client {client_id!r}, round {round}, step {step}") from None

    def end_round(self, client_id: str, round: int, step: int = 0) -> None:
        # the last block is never relayed back, so its noise entry (if any) is dropped here
        self.rounds.pop((client_id, round, step), None)


def upload_encrypted_dataset(client: ClientState, server: ServerState, channel, num_classes: int) -> EncryptedDataset:
    """Client encrypts inputs and one-hot labels; server embeds under encryption."""
    with audit.acting_as(client.client_id):
        x_ct = he.encrypt(client.key, np.asarray(client.data.x, dtype=np.float64))
        y_ct = he.encrypt(client.key, one_hot(client.data.y, num_classes))
        channel.send(client.client_id, SERVER, 0, "inputs", CIPHERTEXT, x_ct)
        channel.send(client.client_id, SERVER, 0, "labels", CIPHERTEXT, y_ct)
    with audit.acting_as(SERVER):
        b0 = embed(x_ct, server.embed_params)
        ds = EncryptedDataset(x=x_ct, y=y_ct, b0=b0)
        server.datasets[client.client_id] = ds
    return ds


def server_block_eval(server: ServerState, client_id: str, round: int, l: int, h: he.Ciphertext, step: int = 0):
    """Approximated block l on ciphertext h, noise masked if not selected, then permuted by Π_l."""
    with audit.acting_as(SERVER):
        st = server.round_state(client_id, round, step)
        p = server.blocks.block(l)
        out = block_forward(h, p, APPROXIMATED, server.kernels, server.model_config.num_heads, server.scales[l])
        if not st.selected(l):
            rng = stream(server.seed, TAG_NOISE, round, st.client_index, step, l)
            out = st.noise.mask(out, (client_id, round, step, l), rng, server.scales[l].out_scale, server.noise_multiplier)
        if st.perms is not None:
            out = apply_permutation(out, st.perms.per_block[l])
        return out


def server_receive_relay(server: ServerState, client_id: str, round: int, l: int, c: he.Ciphertext, step: int = 0):
    """Undo Π_l and the noise of block l on a relayed ciphertext."""
    with audit.acting_as(SERVER):
        st = server.round_state(client_id, round, step)
        if st.perms is not None:
            c = apply_permutation(c, st.perms.per_block[l].inverse())
        if not st.selected(l):
            c = st.noise.unmask(c, (client_id, round, step, l))
        return c


def client_relay(client: ClientState, c: he.Ciphertext, keep: bool = True):
    """Decrypt and re-encrypt; returns (fresh ciphertext, plaintext or None)."""
    with audit.acting_as(client.client_id):
        plain = he.decrypt(client.key, c)
        fresh = he.encrypt(client.key, plain)
    return fresh, (plain if keep else None)


def encrypted_loss_and_grad(server: ServerState, client_id: str, round: int, logits: he.Ciphertext, step: int = 0):
    """E(mean squared error) and E(dLoss/dlogits) against Π_{L+1}-permuted labels.

    The loss averages over all n x C entries, so the gradient is
    2 (logits - y) / (n C).
    """
    with audit.acting_as(SERVER):
        st = server.round_state(client_id, round, step)
        y = server.datasets[client_id].y.take(st.batch, axis=0)
        if st.perms is not None:
            y = apply_permutation(y, st.perms.label)
        if tuple(logits.shape) != tuple(y.shape):
            raise ValueError(f"logits shape {tuple(logits.shape)} does not match label batch {tuple(y.shape)}")
        diff = logits - y
        m = diff.size
        loss = (diff * diff).sum() * (1.0 / m)
        grad = diff * (2.0 / m)
        return loss, grad


def mse_loss_and_grad(logits: np.ndarray, y_onehot: np.ndarray):
    """Plaintext counterpart of :func:`encrypted_loss_and_grad`."""
    diff = logits - y_onehot
    m = diff.size
    return float((diff * diff).sum() * (1.0 / m)), diff * (2.0 / m)


def client_holds_backbone(client: ClientState, server: ServerState) -> bool:
    """True if any client-side array shares memory with a backbone tensor."""
    backbone = [np.asarray(a) for a in server.blocks.arrays()]
    mine = [client.theta.w_down, client.theta.w_up, client.theta.alpha, client.eta.weight, client.eta.bias]
    for round_views in client.views.values():
        mine.extend(v for v in round_views if v is not None)
    return any(np.shares_memory(np.asarray(a), b) for a in mine for b in backbone)
