"""Desk-scale pre-norm transformer encoder with exact and approximated variants.

The same forward code runs on numpy arrays (inference), autodiff tensors
(training) and ciphertexts (server-side encrypted inference, approximated
variant only).  Also hosts teacher training, per-site calibration of the
approximated kernels and the two-stage distillation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import kernels as K
from .autodiff import Adam, Tensor, parameter

logger = logging.getLogger(__name__)

EXACT = "exact"
APPROXIMATED = "approximated"
VARIANTS = (EXACT, APPROXIMATED)


class DistillationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 3
    model_dim: int = 16
    num_heads: int = 2
    ffn_dim: int = 32
    seq_len: int = 16
    num_classes: int = 4
    patch_dim: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 5.0
    stage1_epochs: int = 15
    stage2_epochs: int = 15
    learning_rates: tuple = (3e-3, 1e-3)
    batch_size: int = 16
    # weight of a ground-truth cross-entropy term added to stage II (0 = pure prediction-layer loss)
    stage2_ce_weight: float = 0.0
    teacher_epochs: int = 20
    teacher_lr: float = 3e-3

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.teacher_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if len(self.learning_rates) != 2 or min(self.learning_rates) <= 0:
            raise ValueError("learning_rates must be two positive reals")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "learning_rates", tuple(float(v) for v in self.learning_rates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learning_rates"] = list(self.learning_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "learning_rates" in d:
            d["learning_rates"] = tuple(d["learning_rates"])
        return cls(**d)


@dataclass
class EmbedParams:
    w: object  # (patch_dim, model_dim)
    b: object  # (model_dim,)
    pos: object  # (seq_len, model_dim)


@dataclass
class BlockParams:
    wq: object
    bq: object
    wk: object
    bk: object
    wv: object
    bv: object
    wo: object
    bo: object
    w1: object
    b1: object
    w2: object
    b2: object
    ln1_g: object
    ln1_b: object
    ln2_g: object
    ln2_b: object


@dataclass
class HeadParams:
    weight: object  # (model_dim, num_classes)
    bias: object  # (num_classes,)


@dataclass(frozen=True)
class SiteScales:
    """Public plaintext constants of one approximated block."""

    attn_shift: float = 0.0
    softmax_max: float = 16.0
    ln1_max: float = 16.0
    ln2_max: float = 16.0
    # typical magnitude of the block output, used to size masking noise
    out_scale: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "SiteScales":
        return cls(*[float(v) for v in a])


@dataclass
class TransformerModel:
    config: ModelConfig
    embed: EmbedParams
    blocks: list
    head: HeadParams
    scales: list = field(default_factory=list)

    def __post_init__(self):
        if not self.scales:
            self.scales = [SiteScales() for _ in self.blocks]


def map_params(obj, fn: Callable):
    """Apply ``fn`` to every array field of a parameter dataclass."""
    return type(obj)(**{f.name: fn(getattr(obj, f.name)) for f in fields(obj)})


def param_arrays(obj) -> list:
    return [getattr(obj, f.name) for f in fields(obj)]


def model_tensors(model: TransformerModel) -> list:
    """All parameter leaves of a model in declaration order."""
    out = param_arrays(model.embed)
    for blk in model.blocks:
        out += param_arrays(blk)
    return out + param_arrays(model.head)


def map_model(model: TransformerModel, fn: Callable) -> TransformerModel:
    return TransformerModel(
        config=model.config,
        embed=map_params(model.embed, fn),
        blocks=[map_params(b, fn) for b in model.blocks],
        head=map_params(model.head, fn),
        scales=list(model.scales),
    )


def copy_model(model: TransformerModel) -> TransformerModel:
    return map_model(model, lambda a: np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64, copy=True))


def init_model(config: ModelConfig, seed: int = 0, init_std: Optional[float] = None) -> TransformerModel:
    """Random model.  ``init_std=None`` scales each matrix by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    d, f = config.model_dim, config.ffn_dim

    def mat(n_in, n_out):
        std = init_std if init_std is not None else 1.0 / math.sqrt(n_in)
        return rng.normal(0.0, std, size=(n_in, n_out))

    def vec(n):
        return np.zeros(n)

    embed = EmbedParams(
        w=mat(config.patch_dim, d), b=vec(d), pos=rng.normal(0.0, 0.1 if init_std is None else init_std, (config.seq_len, d))
    )
    blocks = [
        BlockParams(
            wq=mat(d, d), bq=vec(d), wk=mat(d, d), bk=vec(d), wv=mat(d, d), bv=vec(d), wo=mat(d, d), bo=vec(d),
            w1=mat(d, f), b1=vec(f), w2=mat(f, d), b2=vec(d),
            ln1_g=np.ones(d), ln1_b=vec(d), ln2_g=np.ones(d), ln2_b=vec(d),
        )
        for _ in range(config.num_blocks)
    ]
    head = HeadParams(weight=mat(d, config.num_classes), bias=vec(config.num_classes))
    return TransformerModel(config=config, embed=embed, blocks=blocks, head=head)


# forward pass


def embed(x, p: EmbedParams):
    """Affine token embedding plus positional offsets; x has shape (..., seq_len, patch_dim)."""
    if x.shape[-1] != np.shape(p.w)[0] or x.shape[-2] != np.shape(p.pos)[0]:
        raise ValueError(f"input shape {tuple(x.shape)} does not match embedding ({np.shape(p.pos)[0]}, {np.shape(p.w)[0]})")
    return x @ p.w + p.b + p.pos


def attention_scores(q, k, d_k: int):
    """Un-normalized attention Q K^T / sqrt(d_k) over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"head dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    return (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))


def _split_heads(x, h: int):
    shape = tuple(x.shape)
    return x.reshape(*shape[:-1], h, shape[-1] // h).swapaxes(-2, -3)


def _merge_heads(x):
    x = x.swapaxes(-2, -3)
    shape = tuple(x.shape)
    return x.reshape(*shape[:-2], shape[-2] * shape[-1])


def _layernorm(x, g, b, variant, kernels, scale):
    if variant == EXACT:
        return K.exact_layernorm(x, g, b, kernels.ln_eps)
    return K.approx_layernorm(x, g, b, kernels, scale=scale)


def block_forward(
    x,
    p: BlockParams,
    variant: str,
    kernels: K.KernelConfig,
    num_heads: int,
    scales: Optional[SiteScales] = None,
    return_attention: bool = False,
    probe: Optional[dict] = None,
):
    """One pre-norm encoder block on x of shape (..., seq_len, model_dim).

    ``probe``, when given, receives the inputs of every approximated site
    (for calibration).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    s = scales or SiteScales()
    h = _layernorm(x, p.ln1_g, p.ln1_b, variant, kernels, s.ln1_max)
    q = _split_heads(h @ p.wq + p.bq, num_heads)
    k = _split_heads(h @ p.wk + p.bk, num_heads)
    v = _split_heads(h @ p.wv + p.bv, num_heads)
    scores = attention_scores(q, k, q.shape[-1])
    if variant == EXACT:
        attn = K.exact_softmax(scores)
    else:
        attn = K.approx_softmax(scores, kernels, shift=s.attn_shift, scale=s.softmax_max)
    x = x + _merge_heads(attn @ v) @ p.wo + p.bo
    h2 = _layernorm(x, p.ln2_g, p.ln2_b, variant, kernels, s.ln2_max)
    pre = h2 @ p.w1 + p.b1
    act = K.exact_gelu(pre) if variant == EXACT else K.quad_gelu(pre, kernels.gelu_coeffs)
    out = x + act @ p.w2 + p.b2
    if probe is not None:
        probe["scores"] = scores
        probe["out"] = out
    if return_attention:
        return out, scores
    return out


def classify(h, p: HeadParams):
    """Mean-pool the tokens, then an affine map to class logits."""
    return h.mean(axis=-2) @ p.weight + p.bias


def forward(model: TransformerModel, x, variant: str, kernels: K.KernelConfig, collect: bool = False):
    """Logits for raw inputs x of shape (batch, seq_len, patch_dim).

    With ``collect`` also returns a dict holding ``hidden`` (embedding output
    followed by every block output) and ``attention`` (per-block scores).
    """
    b = embed(x, model.embed)
    hidden, attention = [b], []
    for p, s in zip(model.blocks, model.scales):
        b, a = block_forward(b, p, variant, kernels, model.config.num_heads, s, return_attention=True)
        hidden.append(b)
        attention.append(a)
    logits = classify(b, model.head)
    if collect:
        return logits, {"hidden": hidden, "attention": attention}
    return logits


def block_outputs(model: TransformerModel, x, variant: str, kernels: K.KernelConfig) -> list:
    """[b_1 .. b_L] for a batch, plaintext."""
    _, trace = forward(model, x, variant, kernels, collect=True)
    return trace["hidden"][1:]


# calibration


def _variance_max(x, eps) -> float:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return float(np.max(x.var(axis=-1) + eps))


def calibrate(model: TransformerModel, x, kernels: K.KernelConfig) -> list:
    """Per-block site constants from a plaintext pass over calibration data.

    Runs block by block so each site is calibrated on the inputs the
    approximated model will actually produce upstream of it.
    """
    scales = []
    b = np.asarray(embed(x, _arrays(model.embed)))
    for p in model.blocks:
        p = _arrays(p)
        ln1 = K.calibrated_max([_variance_max(b, kernels.ln_eps)])
        h = K.exact_layernorm(b, p.ln1_g, p.ln1_b, kernels.ln_eps)
        q = _split_heads(h @ p.wq + p.bq, model.config.num_heads)
        k = _split_heads(h @ p.wk + p.bk, model.config.num_heads)
        scores = attention_scores(q, k, q.shape[-1])
        shift = float(scores.max())
        sums = K.approx_exp(scores - shift, kernels.exp_degree).sum(axis=-1)
        partial = SiteScales(attn_shift=shift, softmax_max=K.calibrated_max(sums), ln1_max=ln1)
        # second LayerNorm sees the attention residual of the approximated path
        x_mid = _attention_half(b, p, kernels, model.config.num_heads, partial)
        ln2 = K.calibrated_max([_variance_max(x_mid, kernels.ln_eps)])
        site = replace(partial, ln2_max=ln2)
        b = block_forward(b, p, APPROXIMATED, kernels, model.config.num_heads, site)
        scales.append(replace(site, out_scale=float(np.std(b))))
    return scales


def _attention_half(x, p, kernels, num_heads, s):
    h = K.approx_layernorm(x, p.ln1_g, p.ln1_b, kernels, scale=s.ln1_max)
    q = _split_heads(h @ p.wq + p.bq, num_heads)
    k = _split_heads(h @ p.wk + p.bk, num_heads)
    v = _split_heads(h @ p.wv + p.bv, num_heads)
    attn = K.approx_softmax(attention_scores(q, k, q.shape[-1]), kernels, shift=s.attn_shift, scale=s.softmax_max)
    return x + _merge_heads(attn @ v) @ p.wo + p.bo


def _arrays(obj):
    return map_params(obj, lambda a: a.data if isinstance(a, Tensor) else a)


# distillation losses


def attention_distill_loss(student_a, teacher_a, h: int):
    if tuple(student_a.shape) != tuple(teacher_a.shape):
        raise ValueError(f"attention shapes differ: {tuple(student_a.shape)} vs {tuple(teacher_a.shape)}")
    d = student_a - teacher_a
    return (d * d).sum() * (1.0 / h)


def hidden_distill_loss(student_h, teacher_h):
    if tuple(student_h.shape) != tuple(teacher_h.shape):
        raise ValueError(f"hidden shapes differ: {tuple(student_h.shape)} vs {tuple(teacher_h.shape)}")
    d = student_h - teacher_h
    return (d * d).sum()


def log_softmax(z):
    """Log-softmax over the last axis; works on Tensor and ndarray."""
    if isinstance(z, Tensor):
        shifted = z - np.max(z.data, axis=-1, keepdims=True)
        return shifted - shifted.exp().sum(axis=-1, keepdims=True).log()
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def prediction_distill_loss(student_logits, teacher_logits, tau: float):
    """Cross-entropy of softmax(student / tau) against target softmax(teacher / tau), batch mean."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    target = K.exact_softmax(t / tau)
    logp = log_softmax(student_logits * (1.0 / tau))
    n = int(np.prod(target.shape[:-1])) if target.ndim > 1 else 1
    return -(logp * target).sum() * (1.0 / n)


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    onehot = np.eye(logits.shape[-1])[labels]
    return -(log_softmax(logits) * onehot).sum() * (1.0 / len(labels))


# training


def _trainable(model: TransformerModel):
    tmodel = map_model(model, parameter)
    return tmodel, model_tensors(tmodel)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_teacher(
    model: TransformerModel, x, y, kernels: K.KernelConfig, epochs: int, lr: float, batch_size: int = 16, seed: int = 0
):
    """Fit the exact model with cross-entropy; returns (model, per-epoch mean loss)."""
    rng = np.random.default_rng(seed)
    tmodel, params = _trainable(model)
    opt = Adam(params, lr)
    history = []
    for _ in range(epochs):
        losses = []
        for idx in _batches(len(x), batch_size, rng):
            opt.zero_grad()
            loss = cross_entropy(forward(tmodel, x[idx], EXACT, kernels), y[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return copy_model(tmodel), history


def stage1_loss(student_trace, teacher_trace, num_heads: int, batch: int):
    """Attention + hidden distillation summed over blocks; block 0 is the embedding output."""
    la = 0.0
    for sa, ta in zip(student_trace["attention"], teacher_trace["attention"]):
        la = attention_distill_loss(sa, ta, num_heads) + la
    lh = 0.0
    for sh, th in zip(student_trace["hidden"], teacher_trace["hidden"]):
        lh = hidden_distill_loss(sh, th) + lh
    return la * (1.0 / batch), lh * (1.0 / batch)


def _value(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def evaluate_distillation(student, teacher, x, y, kernels, cfg: DistillConfig) -> dict:
    t_logits, t_trace = forward(teacher, x, EXACT, kernels, collect=True)
    s_logits, s_trace = forward(student, x, APPROXIMATED, kernels, collect=True)
    la, lh = stage1_loss(s_trace, t_trace, student.config.num_heads, len(x))
    lp = prediction_distill_loss(s_logits, t_logits, cfg.temperature)
    return {
        "loss_attention": _value(la),
        "loss_hidden": _value(lh),
        "loss_prediction": _value(lp),
        "student_accuracy": float(np.mean(np.argmax(s_logits, axis=-1) == y)) if y is not None else float("nan"),
    }


def two_stage_distill(
    teacher: TransformerModel,
    student: TransformerModel,
    x,
    kernels: K.KernelConfig,
    cfg: DistillConfig,
    y=None,
    seed: int = 0,
    student_variant: str = APPROXIMATED,
):
    """Distill ``teacher`` (exact) into ``student`` on auxiliary inputs ``x``.

    Stage I minimizes attention + hidden losses for ``stage1_epochs``, stage
    II the temperature-softened prediction loss.  Site constants are
    recalibrated before every epoch, and again mid-epoch if an update pushes
    a kernel input out of range.  Returns (student, rows) where rows
    holds one metrics dict per epoch; epoch 0 is the evaluation before any
    update.
    """
    rng = np.random.default_rng(seed)
    student = copy_model(student)
    approx = student_variant == APPROXIMATED
    if approx:
        student.scales = calibrate(student, x, kernels)
    t_logits_all, t_trace_all = forward(teacher, x, EXACT, kernels, collect=True)

    def row(epoch, stage):
        m = _eval_with_variant(student, teacher, x, y, kernels, cfg, student_variant)
        total = m["loss_attention"] + m["loss_hidden"] if stage == 1 else m["loss_prediction"]
        return {"epoch": epoch, "stage": stage, **m, "loss_total": total}

    rows = [row(0, 1 if cfg.stage1_epochs > 0 else 2)]
    total_epochs = cfg.stage1_epochs + cfg.stage2_epochs
    tmodel, params = _trainable(student)
    opt = Adam(params, cfg.learning_rates[0])
    for epoch in range(1, total_epochs + 1):
        stage = 1 if epoch <= cfg.stage1_epochs else 2
        if stage == 2 and epoch == cfg.stage1_epochs + 1:
            opt = Adam(params, cfg.learning_rates[1])
        if approx:
            tmodel.scales = calibrate(tmodel, x, kernels)
        for idx in _batches(len(x), cfg.batch_size, rng):
            opt.zero_grad()
            try:
                s_logits, s_trace = forward(tmodel, x[idx], student_variant, kernels, collect=True)
            except K.KernelDomainError:
                if not approx:
                    raise
                # weights drifted past the epoch's calibration: refresh once and retry
                tmodel.scales = calibrate(tmodel, x, kernels)
                try:
                    s_logits, s_trace = forward(tmodel, x[idx], student_variant, kernels, collect=True)
                except K.KernelDomainError as exc:
                    raise DistillationError(f"kernel input out of range at epoch {epoch}: {exc}") from None
            if stage == 1:
                t_trace = {k: [v[idx] for v in vals] for k, vals in t_trace_all.items()}
                la, lh = stage1_loss(s_trace, t_trace, student.config.num_heads, len(idx))
                loss = la + lh
            else:
                loss = prediction_distill_loss(s_logits, t_logits_all[idx], cfg.temperature)
                if cfg.stage2_ce_weight and y is not None:
                    loss = loss + cross_entropy(s_logits, y[idx]) * cfg.stage2_ce_weight
            if not np.isfinite(loss.data):
                raise DistillationError(f"non-finite loss at epoch {epoch} (stage {stage})")
            loss.backward()
            opt.step()
        student = copy_model(tmodel)
        if approx:
            student.scales = calibrate(student, x, kernels)
        rows.append(row(epoch, stage))
        logger.debug("distill epoch %d stage %d loss %.6g", epoch, stage, rows[-1]["loss_total"])
    if approx:
        student.scales = calibrate(student, x, kernels)
    return student, rows


def _eval_with_variant(student, teacher, x, y, kernels, cfg, variant):
    if variant == APPROXIMATED:
        return evaluate_distillation(student, teacher, x, y, kernels, cfg)
    t_logits, t_trace = forward(teacher, x, EXACT, kernels, collect=True)
    s_logits, s_trace = forward(student, x, variant, kernels, collect=True)
    la, lh = stage1_loss(s_trace, t_trace, student.config.num_heads, len(x))
    return {
        "loss_attention": _value(la),
        "loss_hidden": _value(lh),
        "loss_prediction": _value(prediction_distill_loss(s_logits, t_logits, cfg.temperature)),
        "student_accuracy": float(np.mean(np.argmax(s_logits, axis=-1) == y)) if y is not None else float("nan"),
    }
