"""Client-side low-rank parallel adapter and classification head.

The adapter reads frozen block outputs through a residual chain and never
needs gradients of the backbone.  Everything here runs in plaintext on the
client, so the exact GELU is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from .autodiff import SGD, Tensor, parameter
from .privacy import DisclosedRelatives, client_align_chain
from .transformer import HeadParams, classify

__all__ = [
    "AdapterParams",
    "HeadParams",
    "NonFiniteUpdateError",
    "adapter_chain",
    "adapter_chain_masked",
    "adapter_g",
    "head_forward",
    "init_adapter",
    "init_head",
    "local_update",
    "step_lr",
]


class NonFiniteUpdateError(FloatingPointError):
    pass


@dataclass
class AdapterParams:
    w_down: object  # (L, model_dim, rank)
    w_up: object  # (L, rank, model_dim)
    alpha: object  # (L,)

    @property
    def num_blocks(self) -> int:
        return int(np.shape(self.alpha)[0])

    @property
    def rank(self) -> int:
        return int(np.shape(self.w_down)[-1])

    @property
    def model_dim(self) -> int:
        return int(np.shape(self.w_down)[1])

    def __post_init__(self):
        L, d, r = np.shape(self.w_down)
        if np.shape(self.w_up) != (L, r, d) or np.shape(self.alpha) != (L,):
            raise ValueError("inconsistent adapter shapes")
        if not 1 <= r < d:
            raise ValueError(f"rank must satisfy 1 <= r < model_dim, got r={r}, model_dim={d}")


def init_adapter(num_blocks: int, model_dim: int, rank: Optional[int] = None, seed: int = 0) -> AdapterParams:
    """Random projections with alpha = 0, so the chain starts as the identity on b_L."""
    r = rank if rank is not None else max(1, model_dim // 4)
    rng = np.random.default_rng(seed)
    return AdapterParams(
        w_down=rng.normal(0.0, 1.0 / np.sqrt(model_dim), (num_blocks, model_dim, r)),
        w_up=rng.normal(0.0, 1.0 / np.sqrt(r), (num_blocks, r, model_dim)),
        alpha=np.zeros(num_blocks),
    )


def init_head(model_dim: int, num_classes: int, seed: int = 0) -> HeadParams:
    rng = np.random.default_rng(seed)
    return HeadParams(weight=rng.normal(0.0, 1.0 / np.sqrt(model_dim), (model_dim, num_classes)), bias=np.zeros(num_classes))


def adapter_g(z, l: int, theta: AdapterParams):
    """alpha_l * GELU(z W_d^l) W_u^l over the last axis."""
    if z.shape[-1] != theta.model_dim:
        raise ValueError(f"adapter expects model_dim {theta.model_dim}, got {z.shape[-1]}")
    return K.exact_gelu(z @ theta.w_down[l]) @ theta.w_up[l] * theta.alpha[l]


def adapter_chain(blocks, theta: AdapterParams):
    """h_0 = b_L; h_l = g_l(b_l + h_{l-1}) + h_{l-1}; returns h_L."""
    return adapter_chain_masked(blocks, None, theta)


def adapter_chain_masked(blocks, mask, theta: AdapterParams):
    """As :func:`adapter_chain` with b_l replaced by 0 where the mask is false."""
    L = len(blocks)
    if L != theta.num_blocks:
        raise ValueError(f"adapter has {theta.num_blocks} blocks, got {L} block outputs")
    shape = tuple(blocks[0].shape)
    if any(tuple(b.shape) != shape for b in blocks):
        raise ValueError("block outputs differ in shape")
    keep = [True] * L if mask is None else list(mask)
    zero = blocks[0] * 0.0
    b = [blk if k else zero for blk, k in zip(blocks, keep)]
    h = b[L - 1]
    for l in range(L):
        h = adapter_g(b[l] + h, l, theta) + h
    return h


def head_forward(h, eta: HeadParams):
    """Logits from token-level features: mean over tokens, then affine."""
    if h.shape[-1] != np.shape(eta.weight)[0]:
        raise ValueError(f"head expects features of size {np.shape(eta.weight)[0]}, got {h.shape[-1]}")
    return classify(h, eta)


def step_lr(base_lr: float, round_index: int, total_rounds: int, milestones=(0.5, 0.8), gamma: float = 0.1) -> float:
    """Step schedule: multiply by gamma at each milestone fraction of the run."""
    drops = sum(round_index >= int(m * total_rounds) for m in milestones) if total_rounds > 0 else 0
    return base_lr * gamma**drops


def _as_params(theta: AdapterParams, eta: HeadParams):
    t = AdapterParams(parameter(theta.w_down), parameter(theta.w_up), parameter(theta.alpha))
    e = HeadParams(parameter(eta.weight), parameter(eta.bias))
    return t, e


def forward_logits(received, theta, eta, mask=None, disclosed: Optional[DisclosedRelatives] = None):
    """Logits from the client's received block outputs.

    Without ``disclosed`` the blocks are taken as aligned (no permutation).
    ``received`` entries may be None for blocks whose plaintext was not kept.
    """
    if disclosed is None:
        n = len(next(b for b in received if b is not None))
        disclosed = DisclosedRelatives.identity(n, len(received))
    return client_align_chain(
        received,
        disclosed,
        lambda l, z: adapter_g(z, l, theta),
        lambda h: head_forward(h, eta),
        mask=mask,
    )


def local_update(
    received,
    mask,
    loss_grad,
    theta: AdapterParams,
    eta: HeadParams,
    lr: float,
    disclosed: Optional[DisclosedRelatives] = None,
):
    """One SGD step on adapter and head given dLoss/dlogits.

    ``loss_grad`` is the gradient of the batch loss w.r.t. the logits the
    client produced (same frame and shape).  Gradients never reach the
    backbone: block outputs enter as constants.  Returns new (theta, eta).
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    g = np.asarray(loss_grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteUpdateError("loss gradient contains non-finite values")
    t, e = _as_params(theta, eta)
    received = [None if b is None else Tensor(b) for b in received]
    logits = forward_logits(received, t, e, mask=mask, disclosed=disclosed)
    if logits.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match logits {logits.shape}")
    logits.backward(g)
    params = [t.w_down, t.w_up, t.alpha, e.weight, e.bias]
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteUpdateError("non-finite parameter gradient")
    SGD(params, lr).step()
    new_theta = AdapterParams(t.w_down.data, t.w_up.data, t.alpha.data)
    new_eta = HeadParams(e.weight.data, e.bias.data)
    return new_theta, new_eta
