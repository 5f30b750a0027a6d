"""Staged optimization: stage plans with parameter freezing, warmup-cosine
learning rate schedule, deterministic batch order, and a step/cost ledger."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch

from .data import InstructExample, MixtureConfig, MixtureSource, build_mixture
from .images import RawImage
from .modeling import VLM, ContextOverflowError, format_prompt

COMPONENTS = ("backbone", "projector", "lm")
PROCEDURES = (
    "multi-stage",
    "single-stage",
    "single-stage-full-finetune",
    "multi-stage-full-finetune",
)


@dataclass
class Hyperparameters:
    batch_size: int = 128
    max_grad_norm: float = 1.0
    weight_decay: float = 0.1
    peak_lr: float = 2e-5
    warmup_ratio: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.batch_size, self.max_grad_norm, self.weight_decay + 1, self.peak_lr) <= 0:
            raise ValueError("hyperparameters must be positive")
        if not 0 < self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in (0,1)")


@dataclass
class Stage:
    name: str
    trainable: frozenset
    batch_size: int
    peak_lr: float
    data_subset: str  # 'align' | 'instruct' | 'all'

    def __post_init__(self):
        self.trainable = frozenset(self.trainable)
        bad = self.trainable - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown components {sorted(bad)}")
        if not self.trainable:
            raise ValueError("stage must train a nonempty set")
        if "projector" not in self.trainable:
            raise ValueError("projector must be trainable in every stage")


@dataclass
class StagePlan:
    procedure: str
    stages: list[Stage]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan needs at least one stage")


def make_stage_plan(procedure: str, h: Hyperparameters | None = None) -> StagePlan:
    h = h or Hyperparameters()
    align = Stage(
        name="align",
        trainable={"projector"},
        batch_size=2 * h.batch_size,
        peak_lr=1e-3,
        data_subset="align",
    )
    if procedure == "multi-stage":
        finetune = Stage("finetune", {"projector", "lm"}, h.batch_size, h.peak_lr, "instruct")
        return StagePlan(procedure, [align, finetune])
    if procedure == "multi-stage-full-finetune":
        finetune = Stage(
            "finetune", {"backbone", "projector", "lm"}, h.batch_size, h.peak_lr, "instruct"
        )
        return StagePlan(procedure, [align, finetune])
    if procedure == "single-stage":
        return StagePlan(
            procedure, [Stage("finetune", {"projector", "lm"}, h.batch_size, h.peak_lr, "instruct")]
        )
    if procedure == "single-stage-full-finetune":
        return StagePlan(
            procedure,
            [
                Stage(
                    "finetune",
                    {"backbone", "projector", "lm"},
                    h.batch_size,
                    h.peak_lr,
                    "instruct",
                )
            ],
        )
    raise ValueError(f"unknown procedure {procedure!r}; expected one of {PROCEDURES}")


def lr_at(h: Hyperparameters, step: int, total_steps: int, peak_lr: float | None = None) -> float:
    """Linear warmup to peak over round(warmup_ratio * total), cosine to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps}]")
    peak = h.peak_lr if peak_lr is None else peak_lr
    warmup = int(round(h.warmup_ratio * total_steps))
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    frac = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Ledger


@dataclass
class StageRecord:
    name: str
    steps: int = 0
    examples: int = 0
    skipped: int = 0
    trainable_params: int = 0
    param_steps: int = 0
    final_loss: float | None = None
    mean_loss: float | None = None
    losses: list[float] = field(default_factory=list)


@dataclass
class TrainLedger:
    stages: list[StageRecord] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    @property
    def total_param_steps(self) -> int:
        return sum(s.param_steps for s in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages]}


def planned_stage_steps(examples: int, batch_size: int) -> int:
    return math.ceil(examples / batch_size)


def planned_cost_report(
    plan: StagePlan, subset_sizes: dict[str, int], epoch_count: float = 1.0
) -> dict:
    """Pre-run cost estimate for a plan over datasets of the given sizes.

    Work per stage is measured in fractional optimizer steps
    (epochs * examples / batch), so stage shares are invariant to scaling
    every dataset by a common factor.
    """
    stages = []
    for stage in plan.stages:
        size = subset_sizes.get(stage.data_subset)
        if size is None:
            size = subset_sizes.get("all")
        if size is None:
            raise ValueError(f"no size for stage subset {stage.data_subset!r}")
        work = epoch_count * size / stage.batch_size
        stages.append({"name": stage.name, "data_subset": stage.data_subset, "steps": work})
    total = sum(s["steps"] for s in stages)
    for s in stages:
        s["step_share"] = s["steps"] / total if total else 0.0
    return {"total_steps": total, "stages": stages}


def cost_report(ledger: TrainLedger) -> dict:
    """Per-stage share of total steps and of trainable-parameter-steps."""
    total_steps = ledger.total_steps
    total_ps = ledger.total_param_steps
    stages = []
    for s in ledger.stages:
        stages.append(
            {
                "name": s.name,
                "steps": s.steps,
                "step_share": s.steps / total_steps if total_steps else 0.0,
                "param_steps": s.param_steps,
                "param_step_share": s.param_steps / total_ps if total_ps else 0.0,
            }
        )
    return {"total_steps": total_steps, "total_param_steps": total_ps, "stages": stages}


# ---------------------------------------------------------------------------
# Training loop


def _component_modules(model: VLM) -> dict:
    return {"backbone": model.backbones, "projector": model.projector, "lm": model.lm}


def _make_optimizer(model: VLM, stage: Stage, h: Hyperparameters) -> torch.optim.AdamW:
    decay, no_decay = [], []
    comps = _component_modules(model)
    for comp in sorted(stage.trainable):
        for name, p in comps[comp].named_parameters():
            if not p.requires_grad:
                continue
            # biases and normalization parameters are excluded from decay
            if name.endswith("bias") or ".ln" in name or name.startswith("ln"):
                no_decay.append(p)
            else:
                decay.append(p)
    groups = [
        {"params": decay, "weight_decay": h.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        groups, lr=0.0, betas=(h.adam_beta1, h.adam_beta2), eps=h.adam_eps
    )


class _ImageCache:
    def __init__(self, images: dict):
        self.images = images
        # 1x1 gray stand-in keeps language-only examples in the same batch path
        self.blank = RawImage(128 * torch.ones(1, 1, 3, dtype=torch.uint8).numpy())

    def get(self, ref: str | None) -> RawImage:
        if ref is None:
            return self.blank
        img = self.images[ref]
        return img if isinstance(img, RawImage) else RawImage(img)


def train(
    plan: StagePlan,
    data: dict[str, list[InstructExample]],
    model: VLM,
    h: Hyperparameters,
    seed: int,
    images: dict | None = None,
    epoch_count: float = 1.0,
    include_language_only: bool = True,
    log_every: int = 0,
) -> tuple[VLM, TrainLedger]:
    """Run every stage of `plan` over the given data subsets.

    `data` maps subset name ('align'/'instruct'/'all') to example lists;
    `images` maps image_ref to pixel arrays (or RawImage). Batch order is a
    pure function of (seed, config). Frozen parameters are never touched.
    """
    torch.set_num_threads(1)  # order-fixed reductions keep runs bit-identical
    cache = _ImageCache(images or {})
    ledger = TrainLedger()

    for stage_idx, stage in enumerate(plan.stages):
        subset = data.get(stage.data_subset)
        if subset is None:
            subset = data.get("all")
        if subset is None:
            raise ValueError(f"no data for stage subset {stage.data_subset!r}")
        stream = build_mixture(
            MixtureConfig(
                sources=[MixtureSource(name=stage.data_subset, examples=subset)],
                include_language_only=include_language_only,
                epoch_count=epoch_count,
                seed=seed + stage_idx,
            )
        )

        comps = _component_modules(model)
        for comp, module in comps.items():
            module.requires_grad_(comp in stage.trainable)
        # features are read from the penultimate block, so the final ViT block
        # never enters the graph and must not be handed to the optimizer
        for bb in model.backbones:
            bb.blocks[-1].requires_grad_(False)
        optimizer = _make_optimizer(model, stage, h)
        trainable_params = sum(
            p.numel() for p in model.parameters() if p.requires_grad
        )

        total_steps = planned_stage_steps(len(stream), stage.batch_size)
        rec = StageRecord(name=stage.name, trainable_params=trainable_params)
        losses = rec.losses
        step = 0
        for start in range(0, len(stream), stage.batch_size):
            batch = stream[start : start + stage.batch_size]
            encs, imgs, kept = [], [], 0
            for ex in batch:
                enc = format_prompt(model.cfg.prompt_style, ex.prompt, ex.response)
                imgs.append(cache.get(ex.image_ref))
                encs.append(enc)
                kept += 1
            try:
                loss = model.example_loss(imgs, encs)
            except ContextOverflowError:
                rec.skipped += len(batch)
                continue
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at stage {stage.name!r} step {step}: {loss.item()}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad], h.max_grad_norm
            )
            lr = lr_at(h, step, total_steps, peak_lr=stage.peak_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            step += 1
            rec.steps = step
            rec.examples += kept
            rec.param_steps += trainable_params
            losses.append(float(loss.item()))
            rec.final_loss = losses[-1]
            if log_every and step % log_every == 0:
                print(f"[{stage.name}] step {step}/{total_steps} loss {losses[-1]:.4f}")
        if losses:
            rec.mean_loss = sum(losses) / len(losses)
        ledger.stages.append(rec)

    model.requires_grad_(True)
    return model, ledger
