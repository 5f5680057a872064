"""Deterministic mean-teacher training loop with the four-term objective.

Every random draw comes from ``np.random.default_rng([seed, index, purpose])``
so each purpose (augmentation, dropout, MC sampling, data order) has its own
stream. Skipping one purpose, e.g. the MC passes of the unmasked variant,
leaves every other draw untouched.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as A
from . import checkpoint
from . import losses as L
from . import tensor as T
from .ctsa import CtsaParams, ctsa_forward
from .data import atomic_write_text, load_images
from .errors import ConfigurationError, NumericDomainError
from .metrics import ConfusionMatrix, metrics_from
from .model import SegModel, StageSpec, param_kind
from .teacher import (LN2, EmaState, ThresholdSchedule, ema_update, entropy_pyramid,
                      estimate_uncertainty, threshold_at)

MODES = ("onlysup", "nouc", "msuc", "ctsa", "muca")

# rng purposes
_ORDER_L, _ORDER_U, _WEAK_L, _WEAK_U, _STRONG, _DROP_L, _DROP_U, _MC, _INIT = range(9)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr0: float = 0.007
    lr_min: float = 0.00007
    weight_decay: float = 0.0001
    ema_alpha: float = 0.99
    mc_passes: int = 8
    rho: float = 1.0
    h_max: float = LN2
    seed: int = 0
    labeled_ratio: float = 0.05
    mode: str = "muca"
    momentum: float = 0.9
    steps_per_epoch: int = 20
    ctsa_heads: int = 2
    augment_labeled: bool = True
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.lr_min > self.lr0:
            raise ConfigurationError(f"lr_min {self.lr_min} exceeds lr0 {self.lr0}")
        if min(self.epochs, self.batch_labeled, self.batch_unlabeled, self.steps_per_epoch) < 1:
            raise ConfigurationError("epochs, batch sizes and steps_per_epoch must be >= 1")
        if self.mc_passes < 2:
            raise ConfigurationError(f"mc_passes must be >= 2, got {self.mc_passes}")
        if not self.h_max > 0:
            raise ConfigurationError(f"h_max must be positive, got {self.h_max}")

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, values):
        """Build from string (or typed) values, e.g. a parsed config file."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw


def lr_at(cfg, epoch):
    """Poly(0.9) decay per epoch, floored at lr_min."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return max(cfg.lr0 * (1.0 - epoch / cfg.epochs) ** 0.9, cfg.lr_min)


def _rng(cfg, index, purpose):
    return np.random.default_rng([cfg.seed, index, purpose])


# ---------------------------------------------------------------- optimiser


class SGD:
    """Momentum SGD; weight decay only on tensors tagged 'weight'."""

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named}

    def decays(self, name):
        return param_kind(name) == "weight"

    def step(self, lr):
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay and self.decays(name):
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            v = self.velocity[name]
            v *= p.data.dtype.type(self.momentum)
            v += g
            p.data = p.data - p.data.dtype.type(lr) * v
            p.grad = None


@dataclass
class Models:
    student: SegModel
    teacher: SegModel
    ctsa: CtsaParams
    optimizer: SGD
    ema: EmaState

    @classmethod
    def create(cls, cfg, spec=None):
        spec = spec or StageSpec(dropout_rate=cfg.dropout_rate)
        student = SegModel(spec, seed=cfg.seed)
        teacher = student.copy(requires_grad=False)
        ctsa = CtsaParams.init(spec.channels[-1], cfg.ctsa_heads,
                               seed=[cfg.seed, 0, _INIT])
        named = student.named_parameters()
        if cfg.mode in ("ctsa", "muca"):
            named = named + ctsa.named_parameters()
        opt = SGD(named, cfg.momentum, cfg.weight_decay)
        return cls(student, teacher, ctsa, opt, EmaState(cfg.ema_alpha))


@dataclass
class StepBatch:
    """Raw images and labels drawn for one step."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray = None


# ---------------------------------------------------------------- one step


def _check(name, value, step, dump):
    if not math.isfinite(value):
        err = NumericDomainError(f"step {step}: loss term {name} is {value}")
        err.term = name
        err.dump = dict(dump, step=step, term=name, value=value)
        raise err


def weak_view(images, labels, rng):
    """Weak geometry per image; labels follow with out-of-frame set to IGNORE."""
    xs, ys, recs = [], [], []
    for i, img in enumerate(images):
        x, rec = A.weak_augment(img, rng)
        xs.append(x)
        recs.append(rec)
        if labels is not None:
            ys.append(A.apply_to_labels(rec, labels[i]))
    return np.stack(xs), (np.stack(ys) if labels is not None else None), recs


def strong_view(weak_images, rng):
    """Photometric + CutMix on top of the weak view, donors from the same batch."""
    xs, recs = [], []
    for i, img in enumerate(weak_images):
        x, rec = A.strong_augment(img, weak_images, rng, index=i)
        xs.append(x)
        recs.append(rec)
    return np.stack(xs), recs


def student_pseudo_labels(student, x_raw, weak_recs, strong_recs):
    """Eval-mode student labels on raw images, pushed through both views."""
    with T.no_grad():
        pred = student.forward(T.Tensor(x_raw), "eval").logits.data.argmax(axis=1)
    geo = np.stack([A.apply_geometry(p, r, nearest=True, fill=A.IGNORE)
                    for p, r in zip(pred, weak_recs)])
    return A.mix_maps(geo, strong_recs, 1)


def train_step(cfg, models, batch, step, lr=None):
    """One optimisation step; returns the LossReport of its four terms."""
    lr = cfg.lr0 if lr is None else lr
    student, teacher = models.student, models.teacher
    report = L.LossReport()
    x_l, y_l = batch.x_labeled, batch.y_labeled
    if cfg.augment_labeled:
        x_l, y_l, _ = weak_view(x_l, y_l, _rng(cfg, step, _WEAK_L))
    dump = {}
    out_l = student.forward(T.Tensor(x_l), "train", _rng(cfg, step, _DROP_L))
    l_s = L.supervised_loss(out_l.logits, y_l)
    report.l_s = float(l_s.item())
    _check("l_s", report.l_s, step, dump)
    total = l_s
    if cfg.mode != "onlysup":
        if batch.x_unlabeled is None or len(batch.x_unlabeled) == 0:
            raise ConfigurationError(f"mode {cfg.mode} needs unlabeled images")
        x_w, _, weak_recs = weak_view(batch.x_unlabeled, None, _rng(cfg, step, _WEAK_U))
        x_s, strong_recs = strong_view(x_w, _rng(cfg, step, _STRONG))
        out_s = student.forward(T.Tensor(x_s), "train", _rng(cfg, step, _DROP_U))
        with T.no_grad():
            out_t = teacher.forward(T.Tensor(x_w), "eval")
            probs_t = T.softmax(out_t.logits, axis=1).data
        probs_t = A.mix_maps(probs_t, strong_recs, 1)
        feats_t = [A.mix_maps(v.data, strong_recs, 2 ** (i + 1))
                   for i, v in enumerate(out_t.features)]
        l_c = L.consistency_loss(T.softmax(out_s.logits, axis=1), probs_t, cfg.rho)
        report.l_c = float(l_c.item())
        _check("l_c", report.l_c, step, dump)
        total = T.add(total, l_c)

        if cfg.mode in ("nouc", "msuc", "muca"):
            pyramid, threshold = None, math.inf
            if cfg.mode != "nouc":
                unc = estimate_uncertainty(teacher, x_w, cfg.mc_passes, _rng(cfg, step, _MC))
                pyramid = entropy_pyramid(A.mix_maps(unc.entropy, strong_recs, 1))
                threshold = threshold_at(ThresholdSchedule(cfg.h_max, cfg.total_steps), step)
            l_m, fractions = L.msuc_loss(out_s.features, feats_t, pyramid, threshold, cfg.rho)
            report.l_msuc = float(l_m.item())
            report.masked_fraction_per_stage = fractions
            dump["threshold"] = threshold
            _check("l_msuc", report.l_msuc, step, dump)
            total = T.add(total, l_m)

        if cfg.mode in ("ctsa", "muca"):
            pseudo = student_pseudo_labels(student, batch.x_unlabeled, weak_recs, strong_recs)
            recon = ctsa_forward(models.ctsa, out_s.features[3], T.Tensor._wrap(feats_t[3]))
            logits_c = student.decode(list(out_s.features[:3]) + [recon])
            l_ct = L.ctsa_loss(logits_c, pseudo)
            report.l_ctsa = float(l_ct.item())
            _check("l_ctsa", report.l_ctsa, step, dump)
            total = T.add(total, l_ct)

    T.backward(total)
    models.optimizer.step(lr)
    ema_update(teacher, student, models.ema)
    return report


# ---------------------------------------------------------------- data


class Sampler:
    """Fixed, seed-determined batch order.

    Unlabeled: each epoch walks a fresh permutation (cycled when the pool
    is smaller than one epoch's draw). Labeled: a stream of permutations,
    consumed batch_labeled indices per step across epoch boundaries.
    """

    def __init__(self, cfg, n_labeled, n_unlabeled):
        if n_labeled < 1:
            raise ConfigurationError("no labeled images in the manifest")
        self.cfg, self.n_l, self.n_u = cfg, n_labeled, n_unlabeled

    def labeled(self, step):
        b = self.cfg.batch_labeled
        out = []
        for pos in range(step * b, (step + 1) * b):
            cycle, k = divmod(pos, self.n_l)
            out.append(int(_rng(self.cfg, cycle, _ORDER_L).permutation(self.n_l)[k]))
        return out

    def unlabeled(self, step):
        if self.n_u == 0:
            return []
        b = self.cfg.batch_unlabeled
        epoch, within = divmod(step, self.cfg.steps_per_epoch)
        need = self.cfg.steps_per_epoch * b
        reps = -(-need // self.n_u)
        rng = _rng(self.cfg, epoch, _ORDER_U)
        order = np.concatenate([rng.permutation(self.n_u) for _ in range(reps)])
        return [int(i) for i in order[within * b:(within + 1) * b]]


@dataclass
class Pools:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray

    @classmethod
    def from_manifest(cls, manifest):
        xl, yl = load_images(manifest, manifest.pool("labeled"), True)
        un = manifest.pool("unlabeled")
        xu = load_images(manifest, un, False)[0] if un else xl[:0]
        return cls(xl, yl, xu)

    def batch(self, sampler, step, with_unlabeled=True):
        li = sampler.labeled(step)
        ui = sampler.unlabeled(step) if with_unlabeled else []
        xu = self.x_unlabeled[ui] if ui else None
        return StepBatch(self.x_labeled[li], self.y_labeled[li], xu)


# ---------------------------------------------------------------- evaluation


def _chunks(n, size):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def confusion(model, images, labels, num_classes, ctsa=None, teacher=None, chunk=16):
    """Eval-mode confusion matrix. With ``ctsa`` (and its ``teacher``), V4 is
    replaced by the attention reconstruction before decoding."""
    cm = ConfusionMatrix(num_classes)
    for sl in _chunks(len(images), chunk):
        x = T.Tensor(images[sl])
        with T.no_grad():
            if ctsa is None:
                logits = model.forward(x, "eval").logits
            else:
                feats = model.encode(x, "eval")
                recon = ctsa_forward(ctsa, feats[3], teacher.encode(x, "eval")[3])
                logits = model.decode(list(feats[:3]) + [recon])
        cm.accumulate(logits.data.argmax(axis=1), labels[sl])
    return cm


def evaluate(model, images, labels, num_classes, ctsa=None, teacher=None):
    return metrics_from(confusion(model, images, labels, num_classes, ctsa, teacher))


def validate(model, manifest, split="val", ctsa=None, teacher=None):
    pairs = manifest.pool(split)
    if not pairs:
        raise ConfigurationError(f"split {split!r} is empty")
    images, labels = load_images(manifest, pairs, True)
    return evaluate(model, images, labels, manifest.num_classes, ctsa, teacher)


# ---------------------------------------------------------------- full run


def config_header(cfg):
    return "# " + " ".join(f"{k}={v!r}" for k, v in cfg.to_dict().items())


@dataclass
class TrainResult:
    best_miou: float
    best_epoch: int
    final_miou: float
    reports: list = field(default_factory=list)
    history: list = field(default_factory=list)


def train(cfg, manifest, out_dir, log=None, val_images=None):
    """Run ``cfg.epochs`` epochs; writes loss.csv, val.csv, best/last checkpoints
    and the best checkpoint's validation metrics under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if abs(manifest.labeled_ratio - cfg.labeled_ratio) > 1e-12:
        manifest = manifest.with_ratio(cfg.labeled_ratio)
    pools = Pools.from_manifest(manifest)
    with_u = cfg.mode != "onlysup"
    if with_u and len(pools.x_unlabeled) == 0:
        raise ConfigurationError(f"mode {cfg.mode} needs unlabeled images")
    if val_images is None:
        val_images = load_images(manifest, manifest.pool("val"), True)
    spec = StageSpec(num_classes=manifest.num_classes, dropout_rate=cfg.dropout_rate)
    models = Models.create(cfg, spec)
    sampler = Sampler(cfg, len(pools.x_labeled), len(pools.x_unlabeled))
    header = config_header(cfg)
    rows = [header, ",".join(L.CSV_HEADER)]
    val_rows = [header, "epoch,lr,val_miou,val_mf1,val_oa,val_kappa"]
    result = TrainResult(-1.0, -1, 0.0)
    meta = cfg.to_dict()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for _ in range(cfg.steps_per_epoch):
            rep = train_step(cfg, models, pools.batch(sampler, step, with_u), step, lr)
            rows.append(",".join(rep.csv_row(step)))
            result.reports.append(rep)
            step += 1
        rep = evaluate(models.teacher, *val_images, manifest.num_classes)
        val_rows.append(f"{epoch},{lr!r},{rep.miou!r},{rep.mf1!r},{rep.oa!r},{rep.kappa!r}")
        result.history.append(rep.miou)
        result.final_miou = rep.miou
        atomic_write_text(out / "loss.csv", "\n".join(rows) + "\n")
        atomic_write_text(out / "val.csv", "\n".join(val_rows) + "\n")
        if rep.miou > result.best_miou:
            result.best_miou, result.best_epoch = rep.miou, epoch
            checkpoint.save(out / "best.ckpt", models.student, models.teacher, models.ctsa,
                            dict(meta, epoch=epoch, val_miou=repr(rep.miou)))
            atomic_write_text(out / "metrics.csv", rep.to_csv())
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.6f} loss={rows[-1].split(',')[5]} "
                f"val_miou={rep.miou:.4f}")
    checkpoint.save(out / "last.ckpt", models.student, models.teacher, models.ctsa,
                    dict(meta, epoch=cfg.epochs - 1, val_miou=repr(result.final_miou)))
    result.models = models
    return result
