"""Training objectives: supervised CE, L_C, L_MSUC, L_CTSA and their sum."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import IGNORE
from .errors import DimensionError

huber = T.huber

#: number of CE calls that found no labelled pixel (loss defined as 0)
empty_target_warnings = 0

CSV_HEADER = ["step", "l_s", "l_c", "l_msuc", "l_ctsa", "total", "mf1", "mf2", "mf3", "mf4"]


@dataclass
class LossReport:
    l_s: float = 0.0
    l_c: float = 0.0
    l_msuc: float = 0.0
    l_ctsa: float = 0.0
    masked_fraction_per_stage: list = field(default_factory=lambda: [0.0] * 4)

    @property
    def total(self):
        return self.l_s + self.l_c + self.l_msuc + self.l_ctsa

    def csv_row(self, step):
        vals = [self.l_s, self.l_c, self.l_msuc, self.l_ctsa, self.total,
                *self.masked_fraction_per_stage]
        return [str(step)] + [repr(float(v)) for v in vals]


def supervised_loss(logits, labels, ignore_index=IGNORE):
    """Mean pixelwise cross-entropy over non-ignored pixels (0 if none)."""
    global empty_target_warnings
    labels = np.asarray(labels)
    if not np.any(labels != ignore_index):
        empty_target_warnings += 1
    return T.cross_entropy(logits, labels, ignore_index)


def consistency_loss(student_probs, teacher_probs_aligned, rho=1.0):
    """Mean Huber distance between student and (detached) teacher probabilities."""
    if student_probs.shape != teacher_probs_aligned.shape:
        raise DimensionError(f"student {student_probs.shape} vs teacher "
                             f"{teacher_probs_aligned.shape}")
    target = T.stop_gradient(T.as_tensor(teacher_probs_aligned))
    return T.mean(huber(T.sub(student_probs, target), rho))


def msuc_loss(student_feats, teacher_feats_aligned, unc, threshold, rho=1.0):
    """Uncertainty-masked multi-scale feature consistency.

    Per stage: channel-mean Huber distance, summed over pixels whose
    uncertainty is below ``threshold`` and divided by their count; a stage
    with no passing pixel adds exactly 0. ``unc`` is a list of four maps
    (N, h_i, w_i), an object with a ``pyramid`` attribute, or None for the
    unmasked variant. Returns (loss, masked fraction per stage).
    """
    if len(student_feats) != 4 or len(teacher_feats_aligned) != 4:
        raise DimensionError("expected four stage features for student and teacher")
    pyramid = getattr(unc, "pyramid", unc)
    total = None
    fractions = []
    for i, (vs, vt) in enumerate(zip(student_feats, teacher_feats_aligned)):
        if vs.shape != vt.shape:
            raise DimensionError(f"stage {i + 1}: student {vs.shape} vs teacher {vt.shape}")
        n, _, h, w = vs.shape
        if pyramid is None:
            mask = np.ones((n, h, w), dtype=vs.dtype)
        else:
            u = np.asarray(pyramid[i])
            if u.shape != (n, h, w):
                raise DimensionError(f"stage {i + 1}: uncertainty {u.shape} vs features "
                                     f"{(n, h, w)}")
            mask = (u < threshold).astype(vs.dtype)
        count = float(mask.sum())
        fractions.append(count / mask.size)
        if count == 0:
            continue
        per_pixel = T.mean(huber(T.sub(T.stop_gradient(T.as_tensor(vt)), vs), rho), axis=1)
        term = T.mul_scalar(T.sum(T.mul(per_pixel, T.Tensor._wrap(mask))), 1.0 / count)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.Tensor(0.0)
    return total, fractions


def ctsa_loss(ctsa_logits, pseudo_student, ignore_index=IGNORE):
    """CE of the attention-path prediction against detached student pseudo-labels."""
    return supervised_loss(ctsa_logits, pseudo_student, ignore_index)
