"""Teacher pretraining, frozen-teacher distillation and cross-validation.

Every random stream is derived from the run seed, the fold index and a fixed
purpose tag, so any fold can be rerun on its own and gives the same result
whether folds run serially or in worker processes.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import encode
from .config import COMPONENTS, RunConfig, ScheduleConfig
from .dataio import Dataset, generate_synthetic
from .errors import ConfigError, ContractError, DataError, NumericalError
from .losses import LossWeights, cross_entropy, focal_loss, logit_kd, relation_loss
from .metrics import confusion_matrix, accuracy, macro_f1, predict
from .models import StudentModel, TeacherModel
from .projectors import GwlProjector, PcaProjector
from .tensor import Parameter, Tensor, no_grad

_PURPOSES = {"split": 1, "teacher": 2, "student": 3, "projector": 4, "sampler": 5, "heuristic": 6, "folds": 7}


def derive_seed(base: int, fold: int, purpose: str) -> int:
    return int(np.random.SeedSequence([int(base), int(fold), _PURPOSES[purpose]]).generate_state(1)[0])


# ---------------------------------------------------------------- weighting


def heuristic_weights(scores: Sequence[float]) -> np.ndarray:
    """Normalize per-component reference scores into loss weights.

    Order is (ce, proj1, proj2, logits, relation).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (len(COMPONENTS),):
        raise ConfigError(f"need {len(COMPONENTS)} scores, got {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ConfigError(f"heuristic scores must be finite and >= 0, got {s.tolist()}")
    total = s.sum()
    if total == 0:
        raise ConfigError("heuristic scores are all zero")
    return s / total


def active_components(weights: LossWeights, enabled: Sequence[str] = COMPONENTS) -> list[str]:
    """Components that are both enabled and carry a positive weight, in canonical order."""
    unknown = set(enabled) - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown loss components {sorted(unknown)}")
    lam = weights.as_dict()
    return [c for c in COMPONENTS if c in enabled and lam[c] > 0]


def restrict(weights: LossWeights, enabled: Sequence[str]) -> LossWeights:
    """Copy of ``weights`` with every component outside ``enabled`` forced to 0."""
    zeroed = {c: 0.0 for c in COMPONENTS if c not in enabled}
    return dataclasses.replace(weights, **zeroed)


def total_loss(components, weights: LossWeights):
    """``sum_k lambda_k L_k``; missing or zero-weight components are skipped."""
    if not isinstance(components, Mapping):
        components = dict(zip(COMPONENTS, components))
    total = 0.0
    for name, lam in weights.as_dict().items():
        if lam > 0 and name in components:
            total = components[name] * lam + total
    return total


# ---------------------------------------------------------------- sampling


def wrs_weights(labels) -> np.ndarray:
    """Per-sample weight ``1 / n_c`` of the sample's class."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot weight an empty dataset")
    counts = np.bincount(labels)
    return 1.0 / counts[labels]


def weighted_sample(weights, size: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(w), size=size, replace=True, p=w / w.sum())


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, weights=None) -> list[np.ndarray]:
    """Shuffled mini-batches for one epoch (weighted draws with replacement when
    ``weights`` is given).  A trailing singleton batch is folded into the
    previous one because the relation loss needs two samples."""
    order = rng.permutation(n) if weights is None else weighted_sample(weights, n, rng)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def stratified_kfold(labels, k: int, seed: int) -> list[np.ndarray]:
    """``k`` disjoint folds whose per-class counts differ by at most one.

    Each class is shuffled and dealt round-robin; the dealing position carries
    over from one class to the next, so classes smaller than ``k`` are spread
    across folds instead of piling into the first ones.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < k:
        raise DataError(f"{len(labels)} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    pointer = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        for idx in members:
            folds[pointer].append(int(idx))
            pointer = (pointer + 1) % k
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def stratified_split(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split positions ``0..N-1`` into (train, held-out) with ``fraction`` of
    each class held out (at least one sample, leaving one for training)."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_held = int(round(len(members) * fraction))
        if len(members) >= 2:
            n_held = min(max(n_held, 1), len(members) - 1)
        else:
            n_held = 0
        held.extend(members[:n_held].tolist())
        train.extend(members[n_held:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(held, dtype=np.int64))


# ---------------------------------------------------------------- optimization


def lr_at(epoch: int, sched: ScheduleConfig) -> float:
    """Linear warmup from ``lr / warmup`` to ``lr``, then cosine decay to ``eta_min``."""
    base, w, total = sched.lr, sched.warmup, sched.epochs
    if epoch < w:
        start = base / w
        return start + (base - start) * epoch / w
    return sched.eta_min + 0.5 * (base - sched.eta_min) * (1.0 + math.cos(math.pi * (epoch - w) / (total - w)))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def _snapshot(params: Sequence[Parameter]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[Parameter], state: list[np.ndarray]) -> None:
    for p, arr in zip(params, state):
        p.data[...] = arr


def _check_finite(values: Mapping[str, Tensor], epoch: int, step: int) -> None:
    for name, t in values.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite {name} loss at epoch {epoch}, step {step}", component=name)


def fit(
    params: Sequence[Parameter],
    step_losses: Callable[[np.ndarray], dict[str, Tensor]],
    combine: Callable[[dict[str, Tensor]], Tensor],
    validate: Callable[[], dict[str, float]],
    sched: ScheduleConfig,
    n_train: int,
    rng: np.random.Generator,
    sample_weights=None,
    on_train: Callable[[bool], None] = lambda mode: None,
) -> tuple[list[dict], int, float]:
    """Generic mini-batch loop with early stopping on validation macro-F1.

    Only a strict improvement replaces the retained best.  When ``validate``
    also reports a ``loss``, an equal F1 with a strictly lower loss counts as
    an improvement, so a saturated F1 still selects a meaningful checkpoint.
    At the end the best parameters are restored.  Returns (per-epoch trace,
    best epoch, best F1).
    """
    opt = AdamW(params, lr=sched.lr, weight_decay=sched.weight_decay)
    trace: list[dict] = []
    best_f1, best_loss, best_epoch, best_state, waited = -1.0, math.inf, -1, _snapshot(params), 0
    for epoch in range(sched.epochs):
        lr = lr_at(epoch, sched)
        on_train(True)
        sums: dict[str, float] = {}
        batches = epoch_batches(n_train, sched.batch_size, rng, sample_weights)
        for step, idx in enumerate(batches):
            opt.zero_grad()
            parts = step_losses(idx)
            _check_finite(parts, epoch, step)
            loss = combine(parts)
            loss.backward()
            norm = clip_grad_norm(params, sched.clip_norm)
            if not math.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm at epoch {epoch}, step {step}", component="gradient")
            opt.step(lr)
            for name, t in parts.items():
                sums[name] = sums.get(name, 0.0) + t.item()
            sums["total"] = sums.get("total", 0.0) + loss.item()
        on_train(False)
        scores = validate()
        record = {"epoch": epoch, "lr": lr}
        record.update({name: value / len(batches) for name, value in sums.items()})
        record.update({f"val_{k}": v for k, v in scores.items()})
        trace.append(record)
        f1, loss_v = scores["macro_f1"], scores.get("loss", math.inf)
        if f1 > best_f1 or (f1 == best_f1 and loss_v < best_loss):
            best_f1, best_loss, best_epoch, best_state, waited = f1, loss_v, epoch, _snapshot(params), 0
        else:
            waited += 1
            if waited >= sched.patience:
                break
    _restore(params, best_state)
    return trace, best_epoch, best_f1


def _scores(model, ds: Dataset) -> dict[str, float]:
    cm = confusion_matrix(ds.labels, predict(model, ds.images), ds.num_classes)
    return {"accuracy": accuracy(cm), "macro_f1": macro_f1(cm)}


def _val_scores(model, ds: Dataset, batch_size: int = 64) -> dict[str, float]:
    """Accuracy, macro-F1 and mean cross-entropy; the loss breaks F1 ties in ``fit``."""
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with no_grad():
            for start in range(0, len(ds), batch_size):
                chunks.append(model(ds.images[start : start + batch_size]).logits.data)
    finally:
        model.train(was_training)
    logits = np.concatenate(chunks)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    cm = confusion_matrix(ds.labels, logits.argmax(axis=1), ds.num_classes)
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    return {"accuracy": accuracy(cm), "macro_f1": macro_f1(cm), "loss": loss}


def _supervised_loss(cfg: RunConfig, logits: Tensor, labels, smoothing: float) -> Tensor:
    if cfg.imbalance.mode == "focal":
        return focal_loss(logits, labels, cfg.imbalance.alpha, cfg.imbalance.gamma)
    return cross_entropy(logits, labels, smoothing)


def _sample_weights(cfg: RunConfig, ds: Dataset):
    return wrs_weights(ds.labels) if cfg.imbalance.mode == "wrs" else None


# ---------------------------------------------------------------- teacher


def teacher_config(cfg: RunConfig, ds: Dataset):
    return dataclasses.replace(cfg.teacher, image_side=ds.image_side, channels=ds.channels)


def student_config(cfg: RunConfig, ds: Dataset):
    return dataclasses.replace(cfg.student, image_side=ds.image_side, channels=ds.channels)


def build_teacher(cfg: RunConfig, ds: Dataset, seed: int) -> TeacherModel:
    return TeacherModel(teacher_config(cfg, ds), ds.num_classes, seed=seed)


def _fit_teacher(cfg: RunConfig, teacher: TeacherModel, train: Dataset, val: Dataset,
                 sched: ScheduleConfig, seed: int) -> tuple[list[dict], int]:
    rng = np.random.default_rng(derive_seed(seed, 0, "sampler"))

    def step_losses(idx):
        out = teacher(train.images[idx])
        return {"ce": _supervised_loss(cfg, out.logits, train.labels[idx], 0.0)}

    trace, best_epoch, _ = fit(
        teacher.parameters(),
        step_losses,
        lambda parts: parts["ce"],
        lambda: _val_scores(teacher, val),
        sched,
        len(train),
        rng,
        _sample_weights(cfg, train),
        teacher.train,
    )
    return trace, best_epoch


def pretrain_teacher(cfg: RunConfig, image_side: int, channels: int) -> dict[str, np.ndarray]:
    """Teacher weights (classifier head excluded) learned on the auxiliary corpus.

    Depends only on the model, schedule and ``pretrain`` sections, so every
    fold of a run starts from the same weights.
    """
    corpus = generate_synthetic(cfg.pretrain.synthetic_spec(image_side, channels))
    tr, va = stratified_split(corpus.labels, cfg.cv.val_fraction, cfg.pretrain.seed)
    teacher = build_teacher(cfg, corpus, seed=derive_seed(cfg.pretrain.seed, 0, "teacher"))
    sched = dataclasses.replace(cfg.teacher_train, epochs=cfg.pretrain.epochs)
    # the auxiliary corpus is balanced; imbalance handling belongs to the task
    plain = with_overrides(cfg, imbalance=dataclasses.replace(cfg.imbalance, mode="none"))
    _fit_teacher(plain, teacher, corpus.subset(tr), corpus.subset(va), sched, cfg.pretrain.seed)
    return {k: v for k, v in teacher.state_dict().items() if not k.startswith("head.")}


def train_teacher(cfg: RunConfig, train: Dataset, val: Dataset, seed: int = 0,
                  init_state: Mapping[str, np.ndarray] | None = None) -> TeacherModel:
    """Fit the teacher with the supervised loss, keep the best validation
    checkpoint and freeze it.  ``init_state`` (e.g. from
    :func:`pretrain_teacher`) overrides the matching initial weights.
    The trace lands in ``teacher.history``."""
    teacher = build_teacher(cfg, train, seed=derive_seed(seed, 0, "teacher"))
    if init_state:
        state = teacher.state_dict()
        unknown = set(init_state) - set(state)
        if unknown:
            raise ContractError(f"initial teacher state has unknown entries {sorted(unknown)}")
        state.update(init_state)
        teacher.load_state_dict(state)
    trace, best_epoch = _fit_teacher(cfg, teacher, train, val, cfg.teacher_train, seed)
    teacher.freeze()
    teacher.history = trace
    teacher.best_epoch = best_epoch
    return teacher


def teacher_checksum(teacher: TeacherModel) -> str:
    return hashlib.sha256(encode(teacher.state_dict())).hexdigest()


# ---------------------------------------------------------------- distillation


class Distiller:
    """Student plus the projectors needed by the active loss components."""

    def __init__(self, cfg: RunConfig, teacher: TeacherModel | None, ds: Dataset, weights: LossWeights,
                 enabled: Sequence[str] = COMPONENTS, seed: int = 0):
        weights.validate()
        self.cfg = cfg
        self.weights = weights
        self.active = active_components(weights, enabled)
        needs_teacher = any(c != "ce" for c in self.active)
        if needs_teacher and teacher is None:
            raise ContractError(f"components {self.active} need a teacher")
        if teacher is not None and not getattr(teacher, "frozen", False):
            raise ContractError("the teacher must be frozen before distillation")
        self.teacher = teacher
        self.student = StudentModel(
            student_config(cfg, ds), ds.num_classes, seed=derive_seed(seed, 0, "student"),
            expected_grid=teacher.grid if teacher is not None else None,
        )
        proj_seed = derive_seed(seed, 0, "projector")
        c_feat = self.student.feature_channels
        self.pca = self.gwl = None
        if "proj1" in self.active:
            self.pca = PcaProjector(c_feat, teacher.cfg.embed_dim, cfg.kd.mask_p, cfg.kd.proj1_dropout, seed=proj_seed)
        if "proj2" in self.active:
            self.gwl = GwlProjector(c_feat, teacher.cfg.embed_dim, teacher.grid, cfg.kd.proj2_dropout, seed=proj_seed + 1)

    def modules(self):
        return [m for m in (self.student, self.pca, self.gwl) if m is not None]

    def parameters(self) -> list[Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def train(self, mode: bool = True) -> None:
        for m in self.modules():
            m.train(mode)

    def losses(self, images: np.ndarray, labels: np.ndarray) -> dict[str, Tensor]:
        """Loss terms of the active components only."""
        out = self.student(images)
        parts: dict[str, Tensor] = {}
        teacher_out = None
        if any(c != "ce" for c in self.active):
            with no_grad():
                teacher_out = self.teacher(images).detached()
        w = self.weights
        for name in self.active:
            if name == "ce":
                parts[name] = _supervised_loss(self.cfg, out.logits, labels, w.label_smoothing)
            elif name == "logits":
                parts[name] = logit_kd(out.logits, teacher_out.logits, w.temperature)
            elif name == "relation":
                terms = relation_loss(teacher_out.logits.softmax(axis=-1), out.logits.softmax(axis=-1), w.beta1, w.beta2)
                parts[name] = terms.total
            elif name == "proj1":
                parts[name] = self.pca.loss(out.features, teacher_out)
            elif name == "proj2":
                parts[name] = self.gwl.loss(out.features, teacher_out)
        return parts

    def objective(self, parts: dict[str, Tensor]) -> Tensor:
        return total_loss(parts, self.weights)


@dataclass
class FoldResult:
    fold: int
    seed: int
    components: list
    lambdas: dict
    best_epoch: int
    val_macro_f1: float
    test_accuracy: float
    test_macro_f1: float
    trace: list
    wall_clock: float = 0.0
    teacher_checksum: str | None = None
    teacher_test: dict | None = None
    heuristic: dict | None = None  # measured solo scores and the lambdas they gave
    student_state: dict | None = field(default=None, repr=False, compare=False)
    teacher_state: dict | None = field(default=None, repr=False, compare=False)
    student: StudentModel | None = field(default=None, repr=False, compare=False)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "fold": self.fold,
            "seed": self.seed,
            "components": list(self.components),
            "lambdas": dict(self.lambdas),
            "best_epoch": self.best_epoch,
            "val_macro_f1": self.val_macro_f1,
            "test_accuracy": self.test_accuracy,
            "test_macro_f1": self.test_macro_f1,
            "teacher_checksum": self.teacher_checksum,
            "teacher_test": self.teacher_test,
            "heuristic": self.heuristic,
            "trace": self.trace,
        }
        if timing:
            out["wall_clock_s"] = self.wall_clock
        return out


def distill(
    cfg: RunConfig,
    teacher: TeacherModel | None,
    train: Dataset,
    val: Dataset,
    test: Dataset | None,
    weights: LossWeights,
    enabled: Sequence[str] = COMPONENTS,
    seed: int = 0,
    fold: int = 0,
    schedule: ScheduleConfig | None = None,
) -> FoldResult:
    """Train a student against a frozen teacher and score the best checkpoint on ``test``."""
    start = time.perf_counter()
    sched = schedule or cfg.student_train
    d = Distiller(cfg, teacher, train, weights, enabled, seed)
    rng = np.random.default_rng(derive_seed(seed, 0, "sampler"))
    trace, best_epoch, best_f1 = fit(
        d.parameters(),
        lambda idx: d.losses(train.images[idx], train.labels[idx]),
        d.objective,
        lambda: _val_scores(d.student, val),
        sched,
        len(train),
        rng,
        _sample_weights(cfg, train),
        d.train,
    )
    test_scores = _scores(d.student, test) if test is not None else {"accuracy": float("nan"), "macro_f1": float("nan")}
    lam = restrict(weights, d.active).as_dict()
    return FoldResult(
        fold=fold,
        seed=seed,
        components=list(d.active),
        lambdas=lam,
        best_epoch=best_epoch,
        val_macro_f1=best_f1,
        test_accuracy=test_scores["accuracy"],
        test_macro_f1=test_scores["macro_f1"],
        trace=trace,
        wall_clock=time.perf_counter() - start,
        student_state=d.student.state_dict(),
        student=d.student,
    )


def train_student(cfg: RunConfig, train: Dataset, val: Dataset, test: Dataset | None, seed: int = 0) -> FoldResult:
    """Plain supervised student training (no teacher)."""
    weights = cfg.kd.loss_weights([1.0, 0.0, 0.0, 0.0, 0.0])
    return distill(cfg, None, train, val, test, weights, ("ce",), seed=seed)


# ---------------------------------------------------------------- heuristic lambdas


def estimate_scores(cfg: RunConfig, teacher: TeacherModel, train: Dataset, val: Dataset, seed: int = 0) -> list[float]:
    """Validation macro-F1 (in percent) of a student trained on each component alone.

    Each solo run uses a stratified ``kd.heuristic_fraction`` subset of
    ``train`` for ``kd.heuristic_epochs`` epochs without early stopping; the
    score is the best validation F1 seen.
    """
    kd = cfg.kd
    if kd.heuristic_fraction < 1.0:
        keep, _ = stratified_split(train.labels, 1.0 - kd.heuristic_fraction, derive_seed(seed, 0, "heuristic"))
        subset = train.subset(keep)
    else:
        subset = train
    epochs = kd.heuristic_epochs
    sched = dataclasses.replace(
        cfg.student_train, epochs=epochs, warmup=min(cfg.student_train.warmup, epochs - 1), patience=epochs
    )
    scores = []
    for i, name in enumerate(COMPONENTS):
        solo = [0.0] * len(COMPONENTS)
        solo[i] = 1.0
        result = distill(cfg, teacher, subset, val, None, kd.loss_weights(solo), (name,), seed=seed, schedule=sched)
        scores.append(100.0 * result.val_macro_f1)
    return scores


def resolve_lambdas(cfg: RunConfig, teacher: TeacherModel | None, train: Dataset, val: Dataset, seed: int):
    """Return (lambdas, scores or None) according to ``kd.lambda_source``."""
    if cfg.kd.lambda_source == "explicit":
        return np.asarray(cfg.kd.lambdas, dtype=np.float64), None
    scores = cfg.kd.heuristic_scores
    if scores is None:
        scores = estimate_scores(cfg, teacher, train, val, seed)
    return heuristic_weights(scores), [float(s) for s in scores]


# ---------------------------------------------------------------- cross-validation

ABLATIONS: dict[str, tuple[str, ...]] = {
    "CE": ("ce",),
    "CE+Proj1+Proj2": ("ce", "proj1", "proj2"),
    "CE+Relation": ("ce", "relation"),
    "CE+Logits": ("ce", "logits"),
    "CE+Logits+Relation": ("ce", "logits", "relation"),
    "CE+Logits+Proj1+Proj2": ("ce", "logits", "proj1", "proj2"),
    "Full": COMPONENTS,
}


def combo_name(components: Sequence[str]) -> str:
    for name, combo in ABLATIONS.items():
        if set(combo) == set(components):
            return name
    return "+".join(c for c in COMPONENTS if c in components)


@dataclass
class FoldSplit:
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def fold_splits(cfg: RunConfig, ds: Dataset) -> list[FoldSplit]:
    folds = stratified_kfold(ds.labels, cfg.cv.folds, derive_seed(cfg.seed, 0, "folds"))
    splits = []
    for k, test in enumerate(folds):
        rest = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != k]))
        tr, va = stratified_split(ds.labels[rest], cfg.cv.val_fraction, derive_seed(cfg.seed, k, "split"))
        splits.append(FoldSplit(k, rest[tr], rest[va], test))
    return splits


def load_teacher(cfg: RunConfig, ds: Dataset, path: str) -> TeacherModel:
    from .checkpoint import load_checkpoint

    teacher = build_teacher(cfg, ds, seed=0)
    teacher.load_state_dict(load_checkpoint(path))
    return teacher.freeze()


def initial_teacher_state(cfg: RunConfig, ds: Dataset):
    if cfg.cv.teacher_mode == "per_fold" and cfg.pretrain.enabled:
        return pretrain_teacher(cfg, ds.image_side, ds.channels)
    return None


def run_fold(cfg: RunConfig, ds: Dataset, split: FoldSplit, combos: Sequence[Sequence[str]],
             init_state: Mapping[str, np.ndarray] | None = None) -> list[FoldResult]:
    """One outer fold: teacher, lambdas, then one student per component combo."""
    seed = derive_seed(cfg.seed, split.fold, "student")
    train, val, test = ds.subset(split.train), ds.subset(split.val), ds.subset(split.test)
    if cfg.cv.teacher_mode == "checkpoint":
        teacher = load_teacher(cfg, ds, cfg.cv.teacher_checkpoint)
    else:
        teacher = train_teacher(cfg, train, val, seed=derive_seed(cfg.seed, split.fold, "teacher"),
                                init_state=init_state)
    before = teacher_checksum(teacher)
    teacher_test = _scores(teacher, test)
    lambdas, scores = resolve_lambdas(cfg, teacher, train, val, seed)
    base = cfg.kd.loss_weights(lambdas)
    results = []
    for combo in combos:
        res = distill(cfg, teacher, train, val, test, restrict(base, combo), combo, seed=seed, fold=split.fold)
        res.teacher_test = teacher_test
        if scores is not None:
            res.heuristic = {"scores": dict(zip(COMPONENTS, scores)),
                             "lambdas": dict(zip(COMPONENTS, lambdas.tolist()))}
        results.append(res)
    after = teacher_checksum(teacher)
    if after != before:
        raise ContractError(f"teacher parameters changed during distillation in fold {split.fold}")
    state = teacher.state_dict()
    for res in results:
        res.teacher_checksum = after
        res.teacher_state = state
    return results


def _fold_job(args):
    cfg, ds, split, combos, init_state = args
    results = run_fold(cfg, ds, split, combos, init_state)
    for r in results:
        r.student = None  # keep the payload small across processes
    return split.fold, results


def run_folds(cfg: RunConfig, ds: Dataset, combos: Sequence[Sequence[str]],
              on_fold: Callable[[int, list[FoldResult]], None] | None = None) -> list[list[FoldResult]]:
    """Run every fold (in ``cv.jobs`` processes) and return results ordered by fold.

    ``on_fold`` sees each finished fold as it completes.  A failing fold does
    not stop the others; the first error is re-raised after all have run.
    """
    splits = fold_splits(cfg, ds)
    init_state = initial_teacher_state(cfg, ds)
    results: dict[int, list[FoldResult]] = {}
    errors: list[tuple[int, BaseException]] = []
    if cfg.cv.jobs == 1:
        for split in splits:
            try:
                results[split.fold] = run_fold(cfg, ds, split, combos, init_state)
            except Exception as exc:  # noqa: BLE001 - re-raised below
                errors.append((split.fold, exc))
                continue
            if on_fold:
                on_fold(split.fold, results[split.fold])
    else:
        with ProcessPoolExecutor(max_workers=cfg.cv.jobs) as pool:
            futures = {pool.submit(_fold_job, (cfg, ds, s, combos, init_state)): s.fold for s in splits}
            for fut, k in futures.items():
                try:
                    _, res = fut.result()
                except Exception as exc:  # noqa: BLE001
                    errors.append((k, exc))
                    continue
                results[k] = res
                if on_fold:
                    on_fold(k, res)
    if errors:
        fold, exc = errors[0]
        exc.partial_results = [results[k] for k in sorted(results)]
        raise exc
    return [results[k] for k in sorted(results)]


def aggregate(results: Sequence[FoldResult]) -> dict[str, float]:
    """Mean and sample standard deviation of the test metrics."""
    out = {}
    for key in ("test_accuracy", "test_macro_f1"):
        values = np.array([getattr(r, key) for r in results], dtype=np.float64)
        out[f"{key}_mean"] = float(values.mean())
        out[f"{key}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    out["folds"] = len(results)
    return out


def run_cv(cfg: RunConfig, ds: Dataset, on_fold=None) -> tuple[list[FoldResult], dict]:
    per_fold = run_folds(cfg, ds, [tuple(cfg.kd.components)], on_fold)
    results = [fold[0] for fold in per_fold]
    return results, aggregate(results)


def run_ablation(cfg: RunConfig, ds: Dataset, combos: Mapping[str, Sequence[str]] | None = None,
                 on_fold=None) -> dict[str, tuple[list[FoldResult], dict]]:
    """Every combo shares the fold's teacher and lambdas."""
    combos = dict(ABLATIONS if combos is None else combos)
    per_fold = run_folds(cfg, ds, list(combos.values()), on_fold)
    out = {}
    for i, name in enumerate(combos):
        results = [fold[i] for fold in per_fold]
        out[name] = (results, aggregate(results))
    return out


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Deep copy of ``cfg`` with whole sections or top-level fields replaced."""
    new = copy.deepcopy(cfg)
    for name, value in sections.items():
        setattr(new, name, value)
    return new
