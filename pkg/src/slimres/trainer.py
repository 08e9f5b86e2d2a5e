"""Width-resolution mutual learning training step and run loop.

Each step samples a sandwich of sub-networks (smallest width, largest width,
two random widths), assigns the largest one the highest resolution and the
others random resolutions, trains the largest against ground truth and the
rest against the largest network's predicted distribution, and accumulates
all gradients into the shared store before a single optimizer update.

Because views alias the shared parameters, the gradient a slice receives is
automatically the sum of that slice's gradients across every sampled
sub-network; slices only the largest network reaches receive only its
gradient.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core import SlimmableModelSpec, SlimmableNetwork, check_width
from .data import augment_batch, make_multires_batch
from .errors import NonFiniteLossError

TRAINING_MODES = (
    "mutualnet",
    "usnet_baseline",
    "multiscale_aug_single",
    "multiscale_aug_usnet",
    "independent",
)


@dataclass(frozen=True)
class TrainStepPlan:
    """Sampled sub-networks for one step; entry 0 is the teacher when present.

    `subnets` are (width, resolution) pairs. A plan with `has_teacher` trains
    entry 0 with cross-entropy on ground truth and the remaining entries
    against the teacher's predictions; without a teacher every entry trains
    on ground truth.
    """

    subnets: tuple[tuple[float, int], ...]
    has_teacher: bool = True

    def __post_init__(self):
        for w, _ in self.subnets:
            check_width(w)

    @property
    def teacher(self) -> tuple[float, int]:
        if not self.has_teacher:
            raise ValueError("plan has no teacher entry")
        return self.subnets[0]

    @property
    def students(self) -> tuple[tuple[float, int], ...]:
        return self.subnets[1:] if self.has_teacher else self.subnets

    def validate_sandwich(self, lower: float, resolution_set) -> None:
        widths = sorted(w for w, _ in self.subnets)
        res = set(resolution_set)
        if len(self.subnets) != 4 or not self.has_teacher:
            raise ValueError("sandwich plan must hold 4 entries with a teacher")
        if not math.isclose(widths[0], lower) or not math.isclose(widths[-1], 1.0):
            raise ValueError("sandwich plan must contain the lower bound and width 1.0")
        if not all(lower < w < 1.0 for w in widths[1:3]):
            raise ValueError("random widths must lie strictly inside the open interval")
        if self.teacher[1] != max(res):
            raise ValueError("teacher must run at the maximum resolution")
        if any(r not in res for _, r in self.subnets):
            raise ValueError("plan resolutions must come from the configured set")


def sample_plan(
    lower: float,
    resolution_set,
    rng: random.Random,
    res_rng: random.Random | None = None,
) -> TrainStepPlan:
    """Sandwich sample: lower bound, width 1.0 and two uniform random widths.

    The full-width teacher always takes the maximum resolution; the other
    three entries draw uniformly (with replacement) from the resolution set.
    Width draws come from `rng` and resolution draws from `res_rng` so modes
    that skip resolution sampling stay width-aligned under a shared seed.
    """
    check_width(lower)
    if lower >= 1.0:
        raise ValueError(
            f"degenerate width range: lower bound {lower} must be < 1.0"
        )
    resolutions = list(resolution_set)
    if not resolutions:
        raise ValueError("resolution set must be non-empty")
    if res_rng is None:
        res_rng = rng

    def draw_width():
        while True:
            a = rng.uniform(lower, 1.0)
            if lower < a < 1.0:
                return a

    widths = [lower, draw_width(), draw_width()]
    r_max = max(resolutions)
    entries = [(1.0, r_max)]
    entries += [(w, res_rng.choice(resolutions)) for w in widths]
    return TrainStepPlan(subnets=tuple(entries), has_teacher=True)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step losses; `total` is what the optimizer minimizes."""

    loss_full: float
    loss_sub: tuple[float, ...]

    @property
    def total(self) -> float:
        return self.loss_full + sum(self.loss_sub)


def _forward_losses(plan, net, images, labels):
    """Returns (total tensor, LossBreakdown, detached lead-entry logits)."""
    if labels.min() < 0 or labels.max() >= net.spec.num_classes:
        raise ValueError("label out of range for the classifier")
    base = images.shape[-1]
    wanted = sorted({r for _, r in plan.subnets}, reverse=True)
    pyramid = make_multires_batch(images, base, wanted)

    if plan.has_teacher:
        t_width, t_res = plan.teacher
        teacher_logits = net(pyramid[t_res], width=t_width)
        loss_full = F.cross_entropy(teacher_logits, labels)
        # constant target: no gradient reaches the teacher through students
        teacher_logp = F.log_softmax(teacher_logits, dim=1).detach()
        sub_losses = []
        for w, r in plan.students:
            student_logits = net(pyramid[r], width=w)
            sub_losses.append(
                F.kl_div(
                    F.log_softmax(student_logits, dim=1),
                    teacher_logp,
                    reduction="batchmean",
                    log_target=True,
                )
            )
        total = loss_full + sum(sub_losses) if sub_losses else loss_full
        breakdown = LossBreakdown(
            loss_full=float(loss_full.detach()),
            loss_sub=tuple(float(s.detach()) for s in sub_losses),
        )
        lead_logits = teacher_logits.detach()
    else:
        ce_losses = []
        lead_logits = None
        for w, r in plan.subnets:
            logits = net(pyramid[r], width=w)
            if lead_logits is None:
                lead_logits = logits.detach()
            ce_losses.append(F.cross_entropy(logits, labels))
        total = sum(ce_losses)
        breakdown = LossBreakdown(
            loss_full=float(ce_losses[0].detach()),
            loss_sub=tuple(float(s.detach()) for s in ce_losses[1:]),
        )
    return total, breakdown, lead_logits


def compute_losses(
    plan: TrainStepPlan,
    net: SlimmableNetwork,
    images: torch.Tensor,
    labels: torch.Tensor,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Cross-entropy for the teacher, KL to the teacher for each student.

    `images` is the per-sample augmented crop at the base resolution; every
    entry sees a bilinear resize of the same crop. The teacher's distribution
    is detached, so student losses push no gradient through the teacher's
    forward pass.
    """
    total, breakdown, _ = _forward_losses(plan, net, images, labels)
    return total, breakdown


def train_step(
    plan: TrainStepPlan,
    net: SlimmableNetwork,
    images: torch.Tensor,
    labels: torch.Tensor,
    optimizer: torch.optim.Optimizer,
) -> LossBreakdown:
    """One accumulated-gradient update across every sub-network in the plan."""
    optimizer.zero_grad(set_to_none=True)
    total, breakdown, _ = _forward_losses(plan, net, images, labels)
    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss: full={breakdown.loss_full} sub={breakdown.loss_sub}"
        )
    total.backward()
    optimizer.step()
    return breakdown


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("schedule needs epochs >= 1 and batch_size >= 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_total: float
    loss_full: float
    loss_sub_mean: float
    teacher_acc: float
    seconds: float


def _plan_for_mode(mode, spec, width_rng, res_rng, independent_config):
    resolutions = spec.resolutions
    r_max = max(resolutions)
    lower = spec.width_lower_bound
    if mode == "mutualnet":
        return sample_plan(lower, resolutions, width_rng, res_rng)
    if mode == "usnet_baseline":
        plan = sample_plan(lower, (r_max,), width_rng, res_rng)
        return plan
    if mode == "multiscale_aug_usnet":
        shared = res_rng.choice(list(resolutions))
        plan = sample_plan(lower, resolutions, width_rng, res_rng)
        entries = tuple((w, shared) for w, _ in plan.subnets)
        return TrainStepPlan(subnets=entries, has_teacher=True)
    if mode == "multiscale_aug_single":
        shared = res_rng.choice(list(resolutions))
        return TrainStepPlan(subnets=((1.0, shared),), has_teacher=False)
    if mode == "independent":
        w, r = independent_config
        return TrainStepPlan(subnets=((w, r),), has_teacher=False)
    raise ValueError(f"unknown training mode {mode!r}; expected one of {TRAINING_MODES}")


def run_training(
    mode: str,
    spec: SlimmableModelSpec,
    train_dataset,
    schedule: TrainSchedule,
    seed: int = 0,
    independent_config: tuple[float, int] | None = None,
    augment: bool = True,
    on_epoch=None,
) -> tuple[SlimmableNetwork, list[EpochMetrics]]:
    """Train a shared weight store in one of the comparison modes.

    Modes: `mutualnet` is the full method; `usnet_baseline` keeps sandwich
    sampling and distillation at one fixed (maximum) resolution;
    `multiscale_aug_single` trains one full-width network at a per-iteration
    random resolution; `multiscale_aug_usnet` gives all sandwich entries one
    shared per-iteration random resolution; `independent` trains a single
    fixed (width, resolution) with cross-entropy only.
    """
    if mode not in TRAINING_MODES:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {TRAINING_MODES}")
    schedule.validate()
    if independent_config is None:
        independent_config = (1.0, max(spec.resolutions))
    else:
        spec.config(*independent_config)  # validates against grids

    torch.manual_seed(seed)
    net = SlimmableNetwork(spec)
    net.train()
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=schedule.lr,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )

    width_rng = random.Random(seed)
    res_rng = random.Random(seed + 0x9E3779B9)
    aug_gen = torch.Generator().manual_seed(seed + 1)
    loader_gen = torch.Generator().manual_seed(seed + 2)

    base_res = max(spec.resolutions)
    loader = torch.utils.data.DataLoader(
        train_dataset,
        batch_size=schedule.batch_size,
        shuffle=True,
        generator=loader_gen,
        num_workers=0,
        drop_last=True,
    )
    steps_per_epoch = len(loader)
    if steps_per_epoch == 0:
        raise ValueError("training dataset smaller than one batch")
    total_steps = steps_per_epoch * schedule.epochs
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
        if schedule.cosine
        else None
    )

    history: list[EpochMetrics] = []
    for epoch in range(schedule.epochs):
        t0 = time.time()
        sums = {"total": 0.0, "full": 0.0, "sub": 0.0}
        correct = 0
        seen = 0
        for images, labels in loader:
            if images.shape[-1] != base_res:
                images = F.interpolate(
                    images, size=(base_res, base_res), mode="bilinear", align_corners=False
                )
            if augment:
                images = augment_batch(images, aug_gen)
            plan = _plan_for_mode(mode, spec, width_rng, res_rng, independent_config)
            optimizer.zero_grad(set_to_none=True)
            total, breakdown, lead_logits = _forward_losses(plan, net, images, labels)
            if not math.isfinite(breakdown.total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}: "
                    f"full={breakdown.loss_full} sub={breakdown.loss_sub}"
                )
            total.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            sums["total"] += breakdown.total
            sums["full"] += breakdown.loss_full
            sums["sub"] += (
                sum(breakdown.loss_sub) / len(breakdown.loss_sub) if breakdown.loss_sub else 0.0
            )
            correct += int((lead_logits.argmax(1) == labels).sum())
            seen += labels.shape[0]
        metrics = EpochMetrics(
            epoch=epoch,
            lr=optimizer.param_groups[0]["lr"],
            loss_total=sums["total"] / steps_per_epoch,
            loss_full=sums["full"] / steps_per_epoch,
            loss_sub_mean=sums["sub"] / steps_per_epoch,
            teacher_acc=correct / max(1, seen),
            seconds=time.time() - t0,
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return net, history
