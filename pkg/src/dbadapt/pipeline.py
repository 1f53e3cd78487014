"""End-to-end helpers: config -> teacher -> distilled student -> task data."""

from __future__ import annotations

from dataclasses import dataclass

from . import data as D
from .config import ExperimentConfig
from .transformer import TransformerModel, init_model, train_teacher, two_stage_distill


@dataclass
class Backbone:
    teacher: TransformerModel
    student: TransformerModel
    distill_rows: list
    teacher_history: list


def build_backbone(cfg: ExperimentConfig) -> Backbone:
    """Pretrain the exact teacher on auxiliary data, then distill the approximated student."""
    mc = cfg.model
    aux = D.auxiliary_dataset(cfg.data, mc.num_classes, mc.seq_len, mc.patch_dim, cfg.seed)
    dc = cfg.distill
    teacher, history = train_teacher(
        init_model(mc, cfg.seed), aux.x, aux.y, cfg.kernels, dc.teacher_epochs, dc.teacher_lr, dc.batch_size, cfg.seed
    )
    # the student starts from the teacher's weights
    student, rows = two_stage_distill(teacher, teacher, aux.x, cfg.kernels, dc, y=aux.y, seed=cfg.seed)
    return Backbone(teacher=teacher, student=student, distill_rows=rows, teacher_history=history)


def task_data(cfg: ExperimentConfig):
    mc = cfg.model
    return D.task_datasets(cfg.data, mc.num_classes, mc.seq_len, mc.patch_dim, cfg.seed)
