"""Round orchestration, the plaintext split-learning oracle and the cost model."""

from __future__ import annotations

import contextvars
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import audit, he
from ..adapter import AdapterParams, HeadParams, forward_logits, init_adapter, init_head, local_update, step_lr
from ..config import ExperimentConfig, FederationConfig
from ..data import Dataset, balanced_accuracy
from ..privacy import sbs_expected_count
from ..transformer import APPROXIMATED, TransformerModel, block_forward, embed
from .aggregation import fedavg, from_fixed, masked_submission, ring_sum, sample_weights, to_fixed
from .messages import AGGREGATE, CIPHERTEXT, DOWN, MASK_META, RELATIVES, SERVER, Channel, CommLedger
from .partition import dirichlet_partition
from .roles import (
    TAG_INIT,
    TAG_KEY,
    TAG_PARTITION,
    ClientState,
    FrozenBlocks,
    ServerState,
    batch_indices,
    client_relay,
    encrypted_loss_and_grad,
    mse_loss_and_grad,
    one_hot,
    server_block_eval,
    server_receive_relay,
    upload_encrypted_dataset,
)

logger = logging.getLogger(__name__)

MB = 1_000_000


# parameter flattening for aggregation


def flatten_params(theta: AdapterParams, eta: HeadParams) -> np.ndarray:
    parts = [theta.w_down, theta.w_up, theta.alpha, eta.weight, eta.bias]
    return np.concatenate([np.ravel(np.asarray(p, dtype=np.float64)) for p in parts])


def unflatten_params(vec: np.ndarray, like_theta: AdapterParams, like_eta: HeadParams):
    shapes = [np.shape(p) for p in (like_theta.w_down, like_theta.w_up, like_theta.alpha, like_eta.weight, like_eta.bias)]
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(np.array(vec[pos : pos + n]).reshape(s))
        pos += n
    if pos != vec.size:
        raise ValueError("parameter vector length does not match the model")
    return AdapterParams(out[0], out[1], out[2]), HeadParams(out[3], out[4])


# cost model


def comm_cost_model(n_k: int, num_blocks: int, c_bytes: float, sbs: bool = False, faithful: bool = False) -> float:
    """Bytes of encrypted intermediate representations sent to one client.

    N_k * L * C without SBS; N_k * E[S] * C with SBS.  ``faithful`` counts
    noise-masked non-selected blocks as transmitted too, which brings the
    SBS cost back to N_k * L * C.
    """
    if n_k < 0 or num_blocks < 1 or not c_bytes > 0:
        raise ValueError("need n_k >= 0, num_blocks >= 1 and c_bytes > 0")
    blocks = sbs_expected_count(num_blocks, 1) if (sbs and not faithful) else num_blocks
    return n_k * blocks * c_bytes


def ir_sample_bytes(seq_len: int, model_dim: int, params: he.EncryptionParams, element_bytes: int = 8) -> int:
    return he.expanded_bytes(seq_len * model_dim * element_bytes, params.expansion_ratio)


# setup


@dataclass
class Federation:
    server: ServerState
    clients: list
    test: Dataset
    num_classes: int
    fed: FederationConfig
    seed: int
    ledger: CommLedger
    # plaintext approximated block outputs of the test set, for evaluation only
    eval_blocks: list = field(default_factory=list)
    round_logs: list = field(default_factory=list)


def initial_adapter(student: TransformerModel, fed: FederationConfig, seed: int):
    cfg = student.config
    theta = init_adapter(cfg.num_blocks, cfg.model_dim, fed.adapter_rank, seed=[seed, TAG_INIT, 0])
    eta = init_head(cfg.model_dim, cfg.num_classes, seed=[seed, TAG_INIT, 1])
    return theta, eta


def client_partitions(train: Dataset, fed: FederationConfig, seed: int) -> list:
    return dirichlet_partition(train.y, fed.num_clients, fed.dirichlet_alpha, [seed, TAG_PARTITION])


def eval_block_outputs(student: TransformerModel, x, kernels) -> list:
    b = embed(x, student.embed)
    out = []
    for p, s in zip(student.blocks, student.scales):
        b = block_forward(b, p, APPROXIMATED, kernels, student.config.num_heads, s)
        out.append(b)
    return out


def setup_federation(
    student: TransformerModel,
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    fed: Optional[FederationConfig] = None,
) -> Federation:
    fed = fed or cfg.federation
    seed = cfg.seed
    server = ServerState(
        model_config=student.config,
        kernels=cfg.kernels,
        embed_params=student.embed,
        blocks=FrozenBlocks(student.blocks),
        scales=list(student.scales),
        seed=seed,
        permutation=fed.permutation,
        sbs=fed.sbs,
        noise_multiplier=fed.noise_multiplier,
        batch_size=fed.batch_size,
    )
    theta, eta = initial_adapter(student, fed, seed)
    ledger = CommLedger()
    channel = Channel(ledger)
    clients = []
    for i, idx in enumerate(client_partitions(train, fed, seed)):
        cid = f"client{i}"
        key = he.keygen(cid, cfg.he, seed=[seed, TAG_KEY, i])
        c = ClientState(client_id=cid, index=i, key=key, data=train.subset(idx), theta=theta, eta=eta)
        upload_encrypted_dataset(c, server, channel, student.config.num_classes)
        clients.append(c)
    return Federation(
        server=server,
        clients=clients,
        test=test,
        num_classes=student.config.num_classes,
        fed=fed,
        seed=seed,
        ledger=ledger,
        eval_blocks=eval_block_outputs(student, test.x, cfg.kernels),
    )


def evaluate(blocks: list, labels, theta: AdapterParams, eta: HeadParams, num_classes: int) -> dict:
    logits = forward_logits(blocks, theta, eta)
    loss, _ = mse_loss_and_grad(logits, one_hot(labels, num_classes))
    return {
        "balanced_accuracy": balanced_accuracy(labels, np.argmax(logits, axis=-1), num_classes),
        "mse": loss,
    }


# one client's share of a round


def client_step(fed: Federation, client: ClientState, round: int, step: int, lr: float, channel: Channel) -> dict:
    server = fed.server
    cid = client.client_id
    L = server.num_blocks
    with audit.acting_as(SERVER):
        st = server.begin_round(cid, client.index, round, step)
    disclosed = None
    if st.perms is not None:
        disclosed = channel.send(SERVER, cid, round, "relatives", RELATIVES, st.perms.disclosed)
    if st.mask is not None:
        channel.send(SERVER, cid, round, "mask", MASK_META, st.mask)
    with audit.acting_as(SERVER):
        h = server.datasets[cid].b0.take(st.batch, axis=0)
    received = []
    for l in range(L):
        out = server_block_eval(server, cid, round, l, h, step)
        channel.send(SERVER, cid, round, f"block{l + 1}", CIPHERTEXT, out, block=l + 1)
        fresh, plain = client_relay(client, out, keep=st.selected(l))
        received.append(plain)
        if l < L - 1:
            channel.send(cid, SERVER, round, f"relay{l + 1}", CIPHERTEXT, fresh, block=l + 1)
            h = server_receive_relay(server, cid, round, l, fresh, step)
    mask = None if st.mask is None else st.mask.tolist()
    if all(b is None for b in received):
        # nothing usable this step (possible only with unconstrained SBS): no update
        server.end_round(cid, round, step)
        return {"round": round, "client": cid, "step": step, "loss": None, "mask": mask, "batch": len(st.batch), "seed": server.seed}
    with audit.acting_as(cid):
        logits = forward_logits(received, client.theta, client.eta, mask=mask, disclosed=disclosed)
        logits_ct = he.encrypt(client.key, logits)
    channel.send(cid, SERVER, round, "logits", CIPHERTEXT, logits_ct)
    loss_ct, grad_ct = encrypted_loss_and_grad(server, cid, round, logits_ct, step)
    channel.send(SERVER, cid, round, "loss", CIPHERTEXT, loss_ct)
    channel.send(SERVER, cid, round, "grad", CIPHERTEXT, grad_ct)
    with audit.acting_as(cid):
        loss = float(he.decrypt(client.key, loss_ct))
        grad = he.decrypt(client.key, grad_ct)
        client.theta, client.eta = local_update(received, mask, grad, client.theta, client.eta, lr, disclosed)
        if client.record_views:
            client.views[(round, step)] = received
    server.end_round(cid, round, step)
    return {"round": round, "client": cid, "step": step, "loss": loss, "mask": mask, "batch": len(st.batch), "seed": server.seed}


def _run_client(fed: Federation, client: ClientState, round: int, lr: float):
    channel = Channel(CommLedger())
    logs = [client_step(fed, client, round, s, lr, channel) for s in range(fed.fed.local_steps)]
    return channel.ledger.messages, logs


def aggregate_round(fed: Federation, round: int, channel: Channel) -> None:
    """Secure aggregation of N_k-weighted client updates, then broadcast."""
    weights = sample_weights([c.num_samples for c in fed.clients])
    k = len(fed.clients)
    subs = []
    for c, w in zip(fed.clients, weights):
        with audit.acting_as(c.client_id):
            vec = flatten_params(c.theta, c.eta) * w
            with np.errstate(over="ignore"):
                sub = masked_submission(vec, c.index, k, fed.seed, round) if k > 1 else to_fixed(vec)
            if k == 1:
                logger.warning("single client: update submitted without masking")
        subs.append(channel.send(c.client_id, SERVER, round, "update", AGGREGATE, sub))
    with audit.acting_as(SERVER):
        with np.errstate(over="ignore"):
            total = from_fixed(ring_sum(subs))
    for c in fed.clients:
        agg = channel.send(SERVER, c.client_id, round, "global", AGGREGATE, total)
        c.theta, c.eta = unflatten_params(agg, c.theta, c.eta)


def run_round(fed: Federation, round: int, lr: float, parallel: int = 1) -> list:
    """All clients train on one batch each (in parallel if asked), then aggregate."""
    if parallel > 1 and len(fed.clients) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [
                pool.submit(contextvars.copy_context().run, _run_client, fed, c, round, lr) for c in fed.clients
            ]
            results = [f.result() for f in futures]
    else:
        results = [_run_client(fed, c, round, lr) for c in fed.clients]
    logs = []
    # merge per-client traffic in client order so the ledger is deterministic
    for msgs, client_logs in results:
        fed.ledger.extend(msgs)
        logs.extend(client_logs)
    aggregate_round(fed, round, Channel(fed.ledger))
    for entry in logs:
        entry["bytes_up"] = fed.ledger.total(round=round, client=entry["client"], direction="up")
        entry["bytes_down"] = fed.ledger.total(round=round, client=entry["client"], direction=DOWN)
    fed.round_logs.extend(logs)
    return logs


def round_lr(fed_cfg: FederationConfig, round: int) -> float:
    if not fed_cfg.lr_schedule:
        return fed_cfg.lr
    return step_lr(fed_cfg.lr, round - 1, fed_cfg.rounds)


def run_adaptation(fed: Federation, rounds: Optional[int] = None, parallel: int = 1, audit_log=None) -> dict:
    """T rounds of the protocol; per-round global balanced accuracy on the test set."""
    T = fed.fed.rounds if rounds is None else rounds
    history = []
    c0 = fed.clients[0]
    history.append({"round": 0, **evaluate(fed.eval_blocks, fed.test.y, c0.theta, c0.eta, fed.num_classes), "loss": None})
    with audit.recording(audit_log) as log:
        for t in range(1, T + 1):
            logs = run_round(fed, t, round_lr(fed.fed, t), parallel)
            losses = [e["loss"] for e in logs if e["loss"] is not None]
            metrics = evaluate(fed.eval_blocks, fed.test.y, c0.theta, c0.eta, fed.num_classes)
            history.append({"round": t, **metrics, "loss": float(np.mean(losses)) if losses else None})
    return build_report(fed, history, log)


def build_report(fed: Federation, history: list, log) -> dict:
    L = fed.server.num_blocks
    cfg = fed.server.model_config
    any_ct = next(iter(fed.server.datasets.values())).b0
    c_bytes = ir_sample_bytes(cfg.seq_len, cfg.model_dim, any_ct.params, any_ct.element_bytes)
    processed = sum(e["batch"] for e in fed.round_logs)
    rounds_only = [m for m in fed.ledger.messages if m.round >= 1]
    down = sum(m.nbytes for m in rounds_only if m.direction == DOWN and m.kind != AGGREGATE)
    ir_down = sum(m.nbytes for m in rounds_only if m.direction == DOWN and m.kind == CIPHERTEXT and m.block is not None)
    predicted = comm_cost_model(processed, L, c_bytes, sbs=fed.fed.sbs != "off", faithful=True)
    predicted_skip = comm_cost_model(processed, L, c_bytes, sbs=fed.fed.sbs != "off", faithful=False)
    return {
        "rounds": history,
        "final_balanced_accuracy": history[-1]["balanced_accuracy"],
        "initial_balanced_accuracy": history[0]["balanced_accuracy"],
        "comm": {
            "total_bytes": fed.ledger.total(),
            "setup_bytes": fed.ledger.total(round=0),
            "downlink_round_bytes": down,
            "downlink_ir_bytes": ir_down,
            "uplink_round_bytes": sum(m.nbytes for m in rounds_only if m.direction != DOWN and m.kind != AGGREGATE),
            "aggregation_bytes": sum(m.nbytes for m in rounds_only if m.kind == AGGREGATE),
            "ir_sample_bytes": c_bytes,
            "samples_processed": processed,
            "cost_model_bytes": predicted,
            "cost_model_skip_bytes": predicted_skip,
            "metadata_overhead": (down - predicted) / predicted if predicted else 0.0,
            "messages": len(fed.ledger),
        },
        "audit": {
            "server_decrypts_of_client_keys": log.server_decrypts_of_client_keys(),
            "client_block_reads": log.client_block_reads(),
            "violations": list(log.violations),
        },
        "adapter": {"theta": fed.clients[0].theta, "eta": fed.clients[0].eta},
    }


# plaintext split-learning oracle


def run_plaintext_oracle(student: TransformerModel, cfg: ExperimentConfig, train: Dataset, test: Dataset, fed=None) -> dict:
    """Same seeds, partition, batches and updates with no encryption and no defenses."""
    fed = fed or cfg.federation
    seed = cfg.seed
    theta, eta = initial_adapter(student, fed, seed)
    parts = client_partitions(train, fed, seed)
    data = [train.subset(idx) for idx in parts]
    b0 = [embed(np.asarray(d.x, dtype=np.float64), student.embed) for d in data]
    onehot = [one_hot(d.y, student.config.num_classes) for d in data]
    weights = sample_weights([len(d) for d in data])
    states = [(theta, eta) for _ in data]
    eval_blocks = eval_block_outputs(student, test.x, cfg.kernels)
    history = [{"round": 0, **evaluate(eval_blocks, test.y, theta, eta, student.config.num_classes)}]
    for t in range(1, fed.rounds + 1):
        lr = round_lr(fed, t)
        new_states = []
        for i, (th, et) in enumerate(states):
            for s in range(fed.local_steps):
                batch = batch_indices(seed, t, i, s, len(data[i]), fed.batch_size)
                h = b0[i][batch]
                received = []
                for p, sc in zip(student.blocks, student.scales):
                    h = block_forward(h, p, APPROXIMATED, cfg.kernels, student.config.num_heads, sc)
                    received.append(h)
                logits = forward_logits(received, th, et)
                _, grad = mse_loss_and_grad(logits, onehot[i][batch])
                th, et = local_update(received, None, grad, th, et, lr)
            new_states.append((th, et))
        agg = fedavg([flatten_params(th, et) for th, et in new_states], weights)
        theta, eta = unflatten_params(agg, theta, eta)
        states = [(theta, eta) for _ in data]
        history.append({"round": t, **evaluate(eval_blocks, test.y, theta, eta, student.config.num_classes)})
    return {
        "rounds": history,
        "final_balanced_accuracy": history[-1]["balanced_accuracy"],
        "adapter": {"theta": theta, "eta": eta},
    }
