"""Student/teacher assembly, distillation losses, and the training loop.

The student is the 6-layer spiking stack (channel plan from the published
architecture table, reduced widths for desk runs); the teacher is a plain
10-layer graph-conv / temporal-conv stack run once per modality.  Feature
distillation bridges teacher taps into spike form through the translation
module and aligns them with student taps via cosine distance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .blocks import (AdjacencySet, SaSgcLayer, StcLayer, channel_map,
                     partition_branches)
from .data import ModalityBundle, SkeletonTopology
from .encoding import SscConfig, SscEncoder
from .fusion import (MODALITY_ORDER, FusionWeights, SpikeMultimodalFusion,
                     fuse_modalities)
from .module import (Adam, BatchNorm, Linear, Module, Parameter, SGD,
                     kaiming_normal, load_checkpoint, save_checkpoint)
from .neurons import LifConfig, sn_layer
from .tensor import (DimensionError, InvalidInputError, NumericalError, Tape,
                     Tensor, add, backward, concat, conv2d, depthwise_conv2d,
                     div, exp, log, matmul, max_, mean, mul, permute, relu,
                     reshape, scale, slice_, softmax, sqrt, sub, sum_)


# ---------------------------------------------------------------------------
# Layer plans (architecture table)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerPlan:
    in_channels: int
    widths: tuple[int, ...]
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise InvalidInputError("widths and strides must align")

    def pairs(self) -> list[tuple[int, int]]:
        ins = [self.in_channels] + list(self.widths[:-1])
        return list(zip(ins, self.widths))

    def describe(self) -> list[str]:
        return [f"{i}/{o}" + ("(stride=2)" if s == 2 else "")
                for (i, o), s in zip(self.pairs(), self.strides)]


STUDENT_PLAN_FULL = LayerPlan(3, (64, 64, 128, 128, 256, 256), (1, 1, 2, 1, 2, 1))
STUDENT_PLAN_TOY = LayerPlan(3, (16, 16, 32, 32, 64, 64), (1, 1, 2, 1, 2, 1))
TEACHER_PLAN_FULL = LayerPlan(3, (64, 64, 64, 64, 128, 128, 128, 256, 256, 256),
                              (1, 1, 1, 1, 2, 1, 1, 2, 1, 1))
TEACHER_PLAN_TOY = LayerPlan(3, (16, 16, 16, 16, 32, 32, 32, 64, 64, 64),
                             (1, 1, 1, 1, 2, 1, 1, 2, 1, 1))

STUDENT_TAP_LAYERS = (3, 5)   # 1-indexed block outputs exposed for distillation
TEACHER_TAP_LAYERS = (5, 8)


def plan_hash(plan: LayerPlan, num_classes: int, spike_steps: int,
              num_joints: int, smf_enabled: bool) -> str:
    payload = json.dumps({
        "in": plan.in_channels, "widths": plan.widths, "strides": plan.strides,
        "classes": num_classes, "spike_steps": spike_steps,
        "joints": num_joints, "smf": smf_enabled,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Loss weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    beta: tuple[float, float] = (0.5, 0.5)
    gamma: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for group in (self.alpha, self.beta, self.gamma):
            if any(v < 0 for v in group):
                raise InvalidInputError("loss weights must be nonnegative")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(logits: Tensor) -> Tensor:
    m = max_(logits, axis=1, keepdims=True)
    lse = add(log(sum_(exp(sub(logits, m)), axis=1, keepdims=True)), m)
    return sub(logits, lse)


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy averaged over the batch."""
    labels = np.asarray(labels)
    num_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError(
            f"labels must be in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = sum_(mul(_log_softmax(logits), Tensor(onehot)), axis=1)
    return scale(mean(picked), -1.0)


def accuracy(logits: Tensor | np.ndarray, labels: np.ndarray) -> float:
    data = logits.data if isinstance(logits, Tensor) else logits
    return float((data.argmax(axis=1) == labels).mean())


def aggregate_soft_labels(y_b: Tensor, y_j: Tensor, y_bm: Tensor, y_jm: Tensor,
                          weights: LossWeights) -> Tensor:
    """Weighted sum of the per-modality teacher logits.

    Summed pairwise so the equal-weight case collapses to the input
    bit-exactly.
    """
    ys = (y_b, y_j, y_bm, y_jm)
    shapes = {y.shape for y in ys}
    if len(shapes) != 1:
        raise DimensionError(f"soft label shapes differ: {sorted(shapes)}")
    a = ys[0] if weights.alpha[0] == 1.0 else scale(ys[0], weights.alpha[0])
    b = ys[1] if weights.alpha[1] == 1.0 else scale(ys[1], weights.alpha[1])
    c = ys[2] if weights.alpha[2] == 1.0 else scale(ys[2], weights.alpha[2])
    d = ys[3] if weights.alpha[3] == 1.0 else scale(ys[3], weights.alpha[3])
    return add(add(a, b), add(c, d))


def sdk_loss(y: Tensor, y_mm: Tensor) -> Tensor:
    """Per-sample L2 norm of the logit gap, batch averaged."""
    if y.shape != y_mm.shape:
        raise DimensionError(f"logit shapes differ: {y.shape} vs {y_mm.shape}")
    diff = sub(y, y_mm)
    return mean(sqrt(sum_(mul(diff, diff), axis=1)))


def _flatten_per_sample(t: Tensor) -> Tensor:
    """[S,B,D,V,T] -> [B, S*D*V*T] (rank-2 inputs pass through)."""
    if t.ndim == 2:
        return t
    if t.ndim != 5:
        raise DimensionError(f"expected rank-5 feature tap, got {t.shape}")
    moved = permute(t, (1, 0, 2, 3, 4))
    return reshape(moved, (t.shape[1], -1))


def fkd_loss(t_translated: Tensor, t_student: Tensor) -> Tensor:
    """Mean cosine distance between flattened per-sample feature taps.

    Samples where either vector is all zero contribute distance 1
    (cosine defined as 0); both vectors are normalized first, which makes
    the loss exactly scale-invariant for power-of-two scalings.
    """
    if t_translated.shape != t_student.shape:
        raise DimensionError(
            f"tap shapes differ: {t_translated.shape} vs {t_student.shape}")
    a = _flatten_per_sample(t_translated)
    b = _flatten_per_sample(t_student)
    na = sqrt(sum_(mul(a, a), axis=1))
    nb = sqrt(sum_(mul(b, b), axis=1))
    dot = sum_(mul(a, b), axis=1)
    valid = ((na.data > 0) & (nb.data > 0)).astype(np.float32)
    mask = Tensor(valid)
    denom = add(mul(mul(na, nb), mask), Tensor(1.0 - valid))
    cos = div(mul(dot, mask), denom)
    ones = Tensor(np.ones(cos.shape, dtype=np.float32))
    return mean(sub(ones, cos))


def total_loss(l_task: Tensor, l_sdk: Optional[Tensor],
               l_fkd1: Optional[Tensor], l_fkd2: Optional[Tensor],
               weights: LossWeights) -> Tensor:
    """gamma-weighted combination; zero-weighted terms are skipped so the
    task-only configuration is bit-identical to gamma1 * task loss."""
    g1, g2, g3 = weights.gamma
    out = l_task if g1 == 1.0 else scale(l_task, g1)
    if g2 != 0.0 and l_sdk is not None:
        out = add(out, scale(l_sdk, g2))
    if g3 != 0.0 and (l_fkd1 is not None or l_fkd2 is not None):
        b1, b2 = weights.beta
        fkd = None
        if l_fkd1 is not None and b1 != 0.0:
            fkd = scale(l_fkd1, b1)
        if l_fkd2 is not None and b2 != 0.0:
            term = scale(l_fkd2, b2)
            fkd = term if fkd is None else add(fkd, term)
        if fkd is not None:
            out = add(out, fkd if g3 == 1.0 else scale(fkd, g3))
    return out


# ---------------------------------------------------------------------------
# Student model
# ---------------------------------------------------------------------------

class MkSgnModel(Module):
    """4x SSC -> MI fusion -> 6 SA-SGC+STC blocks -> SN -> GAP -> FC head."""

    def __init__(self, num_classes: int, topo: SkeletonTopology,
                 plan: LayerPlan = STUDENT_PLAN_TOY,
                 lif: LifConfig = LifConfig(), spike_steps: int = 4,
                 smic_hidden: int = 64, smic_lr: float = 1e-3,
                 attention_scale: float = 0.125, temporal_kernel: int = 5,
                 dropout: float = 0.0, smf_enabled: bool = True,
                 rng: Optional[np.random.Generator] = None,
                 shuffle_seed: int = 0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.topo = topo
        self.plan = plan
        self.lif = lif
        self.spike_steps = spike_steps
        self.dropout = dropout
        self.smf_enabled = smf_enabled
        self.adjacency = partition_branches(topo)
        ssc_cfg = SscConfig(spike_steps=spike_steps, hidden_channels=plan.in_channels)
        self.encoders = [SscEncoder(3, ssc_cfg, lif, rng) for _ in MODALITY_ORDER]
        self.smf = SpikeMultimodalFusion(plan.in_channels, smic_hidden, lif, rng,
                                         lr=smic_lr, shuffle_seed=shuffle_seed)
        self.sgc_layers = []
        self.stc_layers = []
        for (cin, cout), stride in zip(plan.pairs(), plan.strides):
            self.sgc_layers.append(SaSgcLayer(cin, cout, self.adjacency.num_branches,
                                              lif, rng, attention_scale))
            self.stc_layers.append(StcLayer(cout, lif, rng, kernel_t=temporal_kernel,
                                            stride=stride))
        self.head = Linear(plan.widths[-1], num_classes, rng)
        self._dropout_rng = np.random.default_rng(rng.integers(2 ** 32))

    # -- plumbing ------------------------------------------------------------

    def plan_hash(self) -> str:
        return plan_hash(self.plan, self.num_classes, self.spike_steps,
                         self.topo.num_joints, self.smf_enabled)

    def task_parameters(self) -> list[Parameter]:
        """Everything the task optimizer owns (fusion estimators excluded)."""
        return [p for name, p in self.named_parameters()
                if not name.startswith("smf.")]

    def encode(self, bundle: dict[str, np.ndarray | Tensor],
               relaxed: bool = False, probe=None) -> list[Tensor]:
        """Run each modality through its own encoder, fusion order."""
        spikes = []
        for enc, name in zip(self.encoders, MODALITY_ORDER):
            x = bundle[name]
            if not isinstance(x, Tensor):
                x = Tensor(x)
            if probe is not None:
                probe.encoder_conv(enc, x)
            spikes.append(enc(x, relaxed=relaxed))
        return spikes

    def fusion_weights(self, spikes: list[Tensor]) -> FusionWeights:
        if not self.smf_enabled:
            w = np.zeros(4, dtype=np.float32)
            w[MODALITY_ORDER.index("joint")] = 1.0
            return FusionWeights(w)
        return self.smf.weights(spikes)

    # -- forward -------------------------------------------------------------

    def forward(self, bundle: dict[str, np.ndarray | Tensor],
                weights: Optional[FusionWeights] = None,
                relaxed: bool = False, probe=None,
                ) -> tuple[Tensor, dict[int, Tensor], dict]:
        """Returns (logits [B, U], taps {layer -> feature}, run info)."""
        spikes = self.encode(bundle, relaxed=relaxed, probe=probe)
        if weights is None:
            weights = self.fusion_weights(spikes)
        if self.smf_enabled:
            x = fuse_modalities(spikes, weights)
        else:
            x = spikes[MODALITY_ORDER.index("joint")]
        rates = {"fused_input": float(np.abs(x.data).mean())}
        taps: dict[int, Tensor] = {}
        for i, (sgc, stc) in enumerate(zip(self.sgc_layers, self.stc_layers), start=1):
            h = sgc.sgc(x, self.adjacency, relaxed=relaxed, probe=probe)
            h_sa = sgc.ssa(h, relaxed=relaxed, probe=probe)
            x = stc(h_sa, relaxed=relaxed, probe=probe)
            rates[f"block{i}"] = float((x.data != 0).mean())
            if i in STUDENT_TAP_LAYERS:
                taps[i] = x
        final = sn_layer(x, self.lif, relaxed=relaxed)
        pooled = mean(final, axis=(3, 4))           # [S, B, D]
        if self.dropout > 0.0 and self.training:
            keep = 1.0 - self.dropout
            mask = (self._dropout_rng.uniform(size=pooled.shape) < keep
                    ).astype(np.float32) / keep
            pooled = mul(pooled, Tensor(mask))
        s, b, d = pooled.shape
        if probe is not None:
            probe.head_linear(self.head, final)
        logits = self.head(reshape(pooled, (s * b, d)))
        logits = mean(reshape(logits, (s, b, self.num_classes)), axis=0)
        info = {"rates": rates, "fusion_weights": weights}
        return logits, taps, info


# ---------------------------------------------------------------------------
# Teacher model (plain GC-TC stack, real-valued)
# ---------------------------------------------------------------------------

class GcTcUnit(Module):
    """Graph conv + temporal conv with a residual, ReLU activations.

    Teacher layout is [B, C, T, V]; the temporal conv slides over T and
    carries the stride, the residual projects when shape changes.
    """

    def __init__(self, in_channels: int, out_channels: int, num_branches: int,
                 rng: np.random.Generator, kernel_t: int = 5, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.kernel_t = kernel_t
        self.w_branches = [
            Parameter(kaiming_normal(rng, (in_channels, out_channels), in_channels))
            for _ in range(num_branches)
        ]
        self.bn_gc = BatchNorm(out_channels, axis=1)
        self.w_t = Parameter(kaiming_normal(
            rng, (out_channels, out_channels, kernel_t, 1), out_channels * kernel_t))
        self.b_t = Parameter(np.zeros(out_channels, dtype=np.float32))
        self.bn_tc = BatchNorm(out_channels, axis=1)
        self.w_res = None
        self.bn_res = None
        if in_channels != out_channels or stride != 1:
            self.w_res = Parameter(kaiming_normal(
                rng, (in_channels, out_channels), in_channels))
            self.bn_res = BatchNorm(out_channels, axis=1)

    def forward(self, x: Tensor, adj: AdjacencySet, probe=None) -> Tensor:
        if probe is not None:
            probe.teacher_unit(self, x)
        agg = None
        for k in range(len(self.w_branches)):
            mixed = matmul(x, Tensor(adj.matrices[k].T))  # joints on the last axis
            term = channel_map(mixed, self.w_branches[k], axis=1)
            agg = term if agg is None else add(agg, term)
        h = relu(self.bn_gc(agg))
        pad_t = (self.kernel_t - 1) // 2
        y = self.bn_tc(conv2d(h, self.w_t, self.b_t,
                              stride=(self.stride, 1), padding=(pad_t, 0)))
        res = x
        if self.stride == 2:
            res = slice_(res, (slice(None), slice(None), slice(0, None, 2), slice(None)))
        if self.w_res is not None:
            res = self.bn_res(channel_map(res, self.w_res, axis=1))
        return relu(add(y, res))


class GcTcStack(Module):
    """One teacher stream: units plus a GAP+FC head."""

    def __init__(self, num_classes: int, plan: LayerPlan, num_branches: int,
                 rng: np.random.Generator, kernel_t: int = 5):
        super().__init__()
        self.units = [GcTcUnit(cin, cout, num_branches, rng, kernel_t, stride)
                      for (cin, cout), stride in zip(plan.pairs(), plan.strides)]
        self.fc = Linear(plan.widths[-1], num_classes, rng)

    def forward(self, x: Tensor, adj: AdjacencySet, probe=None,
                ) -> tuple[Tensor, dict[int, Tensor]]:
        taps: dict[int, Tensor] = {}
        for i, unit in enumerate(self.units, start=1):
            x = unit(x, adj, probe=probe)
            if i in TEACHER_TAP_LAYERS:
                taps[i] = x
        pooled = mean(x, axis=(2, 3))
        return self.fc(pooled), taps


class TeacherModel(Module):
    """Per-modality GC-TC stacks sharing the adjacency, separate heads."""

    def __init__(self, num_classes: int, topo: SkeletonTopology,
                 plan: LayerPlan = TEACHER_PLAN_TOY,
                 rng: Optional[np.random.Generator] = None, kernel_t: int = 5):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.plan = plan
        self.topo = topo
        self.adjacency = partition_branches(topo)
        self.streams = [GcTcStack(num_classes, plan, self.adjacency.num_branches,
                                  rng, kernel_t) for _ in MODALITY_ORDER]

    def plan_hash(self) -> str:
        return plan_hash(self.plan, self.num_classes, 1, self.topo.num_joints, False)

    def forward(self, bundle: dict[str, np.ndarray | Tensor], probe=None,
                ) -> tuple[dict[str, Tensor], dict[str, dict[int, Tensor]]]:
        logits: dict[str, Tensor] = {}
        taps: dict[str, dict[int, Tensor]] = {}
        for stream, name in zip(self.streams, MODALITY_ORDER):
            x = bundle[name]
            if not isinstance(x, Tensor):
                x = Tensor(x)
            logits[name], taps[name] = stream(x, self.adjacency, probe=probe)
        return logits, taps


# ---------------------------------------------------------------------------
# Feature translation module
# ---------------------------------------------------------------------------

class FtmBranch(Module):
    """Concat-fuse 4 teacher taps, then translate into student-shaped spikes.

    Fusion is a depthwise 3x3 + pointwise mix with BN; translation expands
    a spike-step axis, 1x1-projects to the paired student channel count,
    and binarizes.
    """

    def __init__(self, teacher_channels: int, target_channels: int,
                 spike_steps: int, lif: LifConfig, rng: np.random.Generator):
        super().__init__()
        cat = 4 * teacher_channels
        self.cat_channels = cat
        self.target_channels = target_channels
        self.spike_steps = spike_steps
        self.lif = lif
        self.w_depthwise = Parameter(kaiming_normal(rng, (cat, 3, 3), 9))
        self.w_pointwise = Parameter(kaiming_normal(rng, (cat, cat), cat))
        self.bn_fuse = BatchNorm(cat, axis=1)
        self.w_translate = Parameter(kaiming_normal(rng, (cat, target_channels), cat))
        self.bn_translate = BatchNorm(target_channels, axis=2)

    def forward(self, taps: Sequence[Tensor], relaxed: bool = False,
                probe=None) -> Tensor:
        shapes = {t.shape for t in taps}
        if len(shapes) != 1:
            raise DimensionError(f"teacher tap shapes differ: {sorted(shapes)}")
        cat = concat(list(taps), axis=1)            # [B, 4C, T, V]
        if cat.shape[1] != self.cat_channels:
            raise DimensionError(
                f"FTM expects {self.cat_channels} concatenated channels, "
                f"got {cat.shape[1]}")
        cat = permute(cat, (0, 1, 3, 2))            # [B, 4C, V, T]
        if probe is not None:
            probe.ftm_branch(self, cat)
        fused = depthwise_conv2d(cat, self.w_depthwise, stride=1, padding=1)
        fused = channel_map(fused, self.w_pointwise, axis=1)
        fused = self.bn_fuse(fused)
        expanded = reshape(fused, (1,) + fused.shape)
        expanded = concat([expanded] * self.spike_steps, axis=0) \
            if self.spike_steps > 1 else expanded
        y = channel_map(expanded, self.w_translate, axis=2)
        y = self.bn_translate(y)
        return sn_layer(y, self.lif, relaxed=relaxed)


class FtmModule(Module):
    """Two branches: teacher layer-5 -> student layer-3, layer-8 -> layer-5."""

    def __init__(self, teacher_plan: LayerPlan, student_plan: LayerPlan,
                 spike_steps: int, lif: LifConfig,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        t5 = teacher_plan.widths[TEACHER_TAP_LAYERS[0] - 1]
        t8 = teacher_plan.widths[TEACHER_TAP_LAYERS[1] - 1]
        s3 = student_plan.widths[STUDENT_TAP_LAYERS[0] - 1]
        s5 = student_plan.widths[STUDENT_TAP_LAYERS[1] - 1]
        self.branch_mid = FtmBranch(t5, s3, spike_steps, lif, rng)
        self.branch_high = FtmBranch(t8, s5, spike_steps, lif, rng)

    def translate(self, teacher_taps: dict[str, dict[int, Tensor]],
                  relaxed: bool = False, probe=None) -> tuple[Tensor, Tensor]:
        mid = [teacher_taps[m][TEACHER_TAP_LAYERS[0]] for m in MODALITY_ORDER]
        high = [teacher_taps[m][TEACHER_TAP_LAYERS[1]] for m in MODALITY_ORDER]
        return (self.branch_mid(mid, relaxed=relaxed, probe=probe),
                self.branch_high(high, relaxed=relaxed, probe=probe))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class DivergenceError(RuntimeError):
    """Raised when the loss turns non-finite; carries firing-rate diagnostics."""

    def __init__(self, message: str, rates: dict[str, float]):
        dump = ", ".join(f"{k}={v:.3f}" for k, v in sorted(rates.items()))
        super().__init__(f"{message} (layer firing rates: {dump})")
        self.rates = rates


@dataclass
class TrainSettings:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 16
    lr_step_epoch: int = 50
    lr_decay: float = 0.1
    kd: frozenset = frozenset()          # subset of {"soft", "feature"}
    early_stop_train_acc: Optional[float] = None
    seed: int = 0


def batch_tensors(bundle: ModalityBundle, idx: np.ndarray) -> dict[str, Tensor]:
    return {name: Tensor(arr[idx]) for name, arr in bundle.as_dict().items()}


class Trainer:
    """Single-model training loop: fusion ascent, forward, loss, SGD step."""

    def __init__(self, model: MkSgnModel, bundle: ModalityBundle,
                 labels: np.ndarray, settings: TrainSettings,
                 loss_weights: LossWeights = LossWeights(),
                 teacher: Optional[TeacherModel] = None,
                 ftm: Optional[FtmModule] = None,
                 metrics_writer=None):
        self.model = model
        self.bundle = bundle
        self.labels = np.asarray(labels)
        self.settings = settings
        self.loss_weights = loss_weights
        self.teacher = teacher
        self.ftm = ftm
        self.metrics_writer = metrics_writer
        if settings.kd and (teacher is None or ftm is None) and \
                ("feature" in settings.kd or "soft" in settings.kd):
            if teacher is None:
                raise InvalidInputError("distillation requested but no teacher given")
            if "feature" in settings.kd and ftm is None:
                raise InvalidInputError("feature distillation requested but no FTM")
        params = model.task_parameters()
        if ftm is not None and "feature" in settings.kd:
            params = params + ftm.parameters()
        self.optimizer = SGD(params, lr=settings.lr, momentum=settings.momentum,
                             weight_decay=settings.weight_decay)
        self._rng = np.random.default_rng(settings.seed)
        self.global_step = 0
        if teacher is not None:
            teacher.eval()

    # -- one optimization step ----------------------------------------------

    def train_step(self, batch: dict[str, Tensor], labels: np.ndarray) -> dict:
        model = self.model
        settings = self.settings
        model.train()

        if model.smf_enabled and not model.smf.frozen:
            spikes = model.encode(batch)
            model.smf.train_step(spikes)
            weights = model.fusion_weights(spikes)
        else:
            weights = model.fusion_weights([])

        teacher_logits = teacher_taps = None
        if self.teacher is not None and settings.kd:
            logits_d, taps_d = self.teacher(batch)
            teacher_logits = {k: v.detach() for k, v in logits_d.items()}
            teacher_taps = {m: {i: t.detach() for i, t in d.items()}
                            for m, d in taps_d.items()}

        with Tape() as tape:
            logits, taps, info = model(batch, weights=weights)
            l_task = task_loss(logits, labels)
            l_sdk = l_fkd1 = l_fkd2 = None
            if "soft" in settings.kd and teacher_logits is not None:
                y_mm = aggregate_soft_labels(
                    teacher_logits["bone"], teacher_logits["joint"],
                    teacher_logits["bone_motion"], teacher_logits["joint_motion"],
                    self.loss_weights)
                l_sdk = sdk_loss(logits, y_mm)
            if "feature" in settings.kd and teacher_taps is not None:
                t_mid, t_high = self.ftm.translate(teacher_taps)
                l_fkd1 = fkd_loss(t_mid, taps[STUDENT_TAP_LAYERS[0]])
                l_fkd2 = fkd_loss(t_high, taps[STUDENT_TAP_LAYERS[1]])
            loss = total_loss(l_task, l_sdk, l_fkd1, l_fkd2, self.loss_weights)
            if not np.isfinite(loss.data).all():
                raise DivergenceError("training loss is non-finite", info["rates"])
            backward(loss, tape)

        self.optimizer.step()
        self.optimizer.zero_grad()
        self.global_step += 1
        metrics = {
            "step": self.global_step,
            "l_task": float(l_task.data),
            "l_sdk": float(l_sdk.data) if l_sdk is not None else 0.0,
            "l_fkd": float(l_fkd1.data * self.loss_weights.beta[0]
                           + l_fkd2.data * self.loss_weights.beta[1])
            if l_fkd1 is not None else 0.0,
            "loss": float(loss.data),
            "acc": accuracy(logits, labels),
            "rates": info["rates"],
        }
        if self.metrics_writer is not None:
            self.metrics_writer(metrics)
        return metrics

    # -- epochs ---------------------------------------------------------------

    def run(self, epochs: Optional[int] = None) -> list[dict]:
        settings = self.settings
        epochs = epochs if epochs is not None else settings.epochs
        n = self.labels.shape[0]
        history = []
        for epoch in range(epochs):
            if epoch == settings.lr_step_epoch:
                self.optimizer.lr *= settings.lr_decay
            order = self._rng.permutation(n)
            epoch_acc = []
            epoch_loss = []
            for start in range(0, n, settings.batch_size):
                idx = order[start:start + settings.batch_size]
                metrics = self.train_step(batch_tensors(self.bundle, idx),
                                          self.labels[idx])
                epoch_acc.append(metrics["acc"] * len(idx))
                epoch_loss.append(metrics["loss"] * len(idx))
            summary = {"epoch": epoch,
                       "train_acc": float(np.sum(epoch_acc) / n),
                       "train_loss": float(np.sum(epoch_loss) / n)}
            history.append(summary)
            stop_at = settings.early_stop_train_acc
            if stop_at is not None and summary["train_acc"] >= stop_at:
                break
        return history


def evaluate(model: MkSgnModel, bundle: ModalityBundle, labels: np.ndarray,
             batch_size: int = 32) -> dict:
    """Top-1 accuracy and per-class confusion counts on a fixed split."""
    model.eval()
    labels = np.asarray(labels)
    n = labels.shape[0]
    confusion = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    correct = 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits, _, _ = model(batch_tensors(bundle, idx))
        pred = logits.data.argmax(axis=1)
        for p, t in zip(pred, labels[idx]):
            confusion[t, p] += 1
        correct += int((pred == labels[idx]).sum())
    return {"accuracy": correct / n, "confusion": confusion}


# ---------------------------------------------------------------------------
# Teacher training (toy-scale, before distillation)
# ---------------------------------------------------------------------------

def train_teacher(teacher: TeacherModel, bundle: ModalityBundle,
                  labels: np.ndarray, epochs: int = 20, batch_size: int = 16,
                  lr: float = 0.05, seed: int = 0,
                  early_stop_train_acc: Optional[float] = 0.995) -> list[dict]:
    """Supervised training of the four teacher streams (summed CE)."""
    labels = np.asarray(labels)
    optimizer = SGD(teacher.parameters(), lr=lr, momentum=0.9, weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    history = []
    teacher.train()
    for epoch in range(epochs):
        order = rng.permutation(n)
        accs, losses = [], []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = batch_tensors(bundle, idx)
            with Tape() as tape:
                logits, _ = teacher(batch)
                loss = None
                for name in MODALITY_ORDER:
                    term = task_loss(logits[name], labels[idx])
                    loss = term if loss is None else add(loss, term)
                loss = scale(loss, 0.25)
                if not np.isfinite(loss.data).all():
                    raise DivergenceError("teacher loss is non-finite", {})
                backward(loss, tape)
            optimizer.step()
            optimizer.zero_grad()
            fused = np.mean([logits[m].data for m in MODALITY_ORDER], axis=0)
            accs.append(accuracy(fused, labels[idx]) * len(idx))
            losses.append(float(loss.data) * len(idx))
        summary = {"epoch": epoch, "train_acc": float(np.sum(accs) / n),
                   "train_loss": float(np.sum(losses) / n)}
        history.append(summary)
        if early_stop_train_acc is not None and \
                summary["train_acc"] >= early_stop_train_acc:
            break
    teacher.eval()
    return history


# ---------------------------------------------------------------------------
# Checkpoints and teacher-output files
# ---------------------------------------------------------------------------

def save_model(path, model: Module, plan_hash_value: str) -> None:
    save_checkpoint(path, plan_hash_value, model.state_dict())


def load_model(path, model: Module, expected_hash: Optional[str] = None) -> str:
    found_hash, arrays = load_checkpoint(path)
    if expected_hash is not None and found_hash != expected_hash:
        raise InvalidInputError(
            f"checkpoint plan hash {found_hash[:12]} does not match "
            f"expected {expected_hash[:12]}")
    model.load_state_dict(arrays)
    return found_hash


def dump_teacher_outputs(path, teacher: TeacherModel, bundle: ModalityBundle,
                         batch_size: int = 32) -> None:
    """Precompute per-sample teacher logits and taps into a blob container."""
    teacher.eval()
    n = next(iter(bundle.as_dict().values())).shape[0]
    arrays: dict[str, np.ndarray] = {}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits, taps = teacher(batch_tensors(bundle, idx))
        for m in MODALITY_ORDER:
            for row, i in enumerate(idx):
                arrays[f"{i}/logits/{m}"] = logits[m].data[row]
                for layer, tap in taps[m].items():
                    arrays[f"{i}/tap{layer}/{m}"] = tap.data[row]
    save_checkpoint(path, teacher.plan_hash(), arrays)


def load_teacher_outputs(path) -> tuple[str, dict[str, np.ndarray]]:
    return load_checkpoint(path)


class StoredTeacher:
    """File-backed stand-in for a frozen teacher (precomputed outputs)."""

    def __init__(self, path):
        self.plan_hash, self._arrays = load_teacher_outputs(path)

    def __call__(self, batch_indices: np.ndarray,
                 ) -> tuple[dict[str, Tensor], dict[str, dict[int, Tensor]]]:
        logits = {}
        taps: dict[str, dict[int, Tensor]] = {m: {} for m in MODALITY_ORDER}
        for m in MODALITY_ORDER:
            logits[m] = Tensor(np.stack(
                [self._arrays[f"{i}/logits/{m}"] for i in batch_indices]))
            for layer in TEACHER_TAP_LAYERS:
                taps[m][layer] = Tensor(np.stack(
                    [self._arrays[f"{i}/tap{layer}/{m}"] for i in batch_indices]))
        return logits, taps
