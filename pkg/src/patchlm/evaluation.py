"""Evaluation harness: greedy-decoded predictions scored per task family
(open-ended VQA, localization at an IoU threshold, closed-set multiple
choice), with line-delimited transcripts."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field

from .data import (
    BBox,
    OPTION_LETTERS,
    ParseFailure,
    QARecord,
    apply_trigger_prompt,
    decode_bbox,
)

FAMILIES = ("vqa", "localization", "closed-set")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_WS_RE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, trim trailing period."""
    t = text.strip().lower()
    if t.endswith("."):
        t = t[:-1]
    t = t.translate(_PUNCT_TABLE)
    return _WS_RE.sub(" ", t).strip()


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def score_vqa(prediction: str, references: list[str]) -> float:
    """Exact match for few references; annotator-consensus rule for >= 10."""
    if not references:
        raise ValueError("need at least one reference answer")
    pred = normalize_answer(prediction)
    if not pred:
        return 0.0
    norm_refs = [normalize_answer(r) for r in references]
    if len(norm_refs) >= 10:
        matches = sum(1 for r in norm_refs if r == pred)
        return min(matches / 3.0, 1.0)
    return 1.0 if pred in norm_refs else 0.0


def score_localization(prediction: str, gt: BBox, threshold: float) -> tuple[int, bool]:
    """Returns (score, parse_failed)."""
    try:
        box = decode_bbox(prediction)
    except ParseFailure:
        return 0, True
    return (1 if iou(box, gt) >= threshold else 0), False


def score_closed_set(prediction: str, gold: str, options: list[str]) -> int:
    """Accept the option letter or the option text; 1 iff it resolves to gold."""
    if gold not in options:
        raise ValueError(f"gold {gold!r} not among options")
    pred = normalize_answer(prediction)
    resolved = None
    for i, opt in enumerate(options):
        if pred == normalize_answer(OPTION_LETTERS[i]) or pred == normalize_answer(opt):
            resolved = opt
            break
    return 1 if resolved == gold else 0


# ---------------------------------------------------------------------------
# Tasks and records


@dataclass
class EvalExample:
    id: str
    image_ref: str | None
    text: str  # raw question / referring expression (trigger applied at run time)
    references: list[str] = field(default_factory=list)  # vqa references
    gold_option: str | None = None  # closed-set gold
    gt_bbox_text: str | None = None  # localization target encoding


@dataclass
class EvalTask:
    name: str
    family: str
    examples: list[EvalExample]
    threshold: float | None = None  # localization only
    options: list[str] | None = None  # closed-set only
    task_kind: str = "vqa"  # data-mixture kind used for trigger prompting

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "localization" and self.threshold is None:
            raise ValueError("localization tasks need a threshold")
        if self.family == "closed-set" and not self.options:
            raise ValueError("closed-set tasks need options")


@dataclass
class EvalRecord:
    task_name: str
    scores: list[float]
    transcript: list[dict]

    @property
    def accuracy(self) -> float:
        return 100.0 * sum(self.scores) / len(self.scores) if self.scores else 0.0


def task_prompt(task: EvalTask, ex: EvalExample) -> str:
    options = task.options if task.task_kind == "multiple-choice" else None
    return apply_trigger_prompt(task.task_kind, ex.text, options)


def run_benchmark(generate, task: EvalTask, images: dict | None = None) -> EvalRecord:
    """Score `generate(image_ref, prompt) -> text` over every task example.

    `generate` is typically a closure over a VLM's greedy decoder; an oracle
    stub works equally well for scorer sanity checks.
    """
    scores: list[float] = []
    transcript: list[dict] = []
    for ex in task.examples:
        prompt = task_prompt(task, ex)
        flags = []
        try:
            prediction = generate(ex.image_ref, prompt)
        except Exception as e:  # generation failure scores 0, flagged
            prediction = ""
            flags.append(f"generation-error:{type(e).__name__}")
        if task.family == "vqa":
            score = score_vqa(prediction, ex.references)
        elif task.family == "localization":
            gt = decode_bbox(ex.gt_bbox_text)
            s, failed = score_localization(prediction, gt, task.threshold)
            score = float(s)
            if failed:
                flags.append("parse-failure")
        else:
            score = float(score_closed_set(prediction, ex.gold_option, task.options))
        scores.append(score)
        transcript.append(
            {"id": ex.id, "prompt": prompt, "prediction": prediction, "score": score, "flags": flags}
        )
    return EvalRecord(task_name=task.name, scores=scores, transcript=transcript)


# ---------------------------------------------------------------------------
# Task construction from synthetic QA records


def tasks_from_records(records: list[QARecord]) -> dict[str, EvalTask]:
    """Split raw synthetic records into one EvalTask per benchmark family."""
    buckets: dict[str, list[EvalExample]] = {
        "color-vqa": [],
        "counting": [],
        "spatial": [],
        "presence": [],
        "localization": [],
    }
    for r in records:
        if r.task_kind == "vqa":
            buckets["color-vqa"].append(
                EvalExample(id=r.id, image_ref=r.image_ref, text=r.text, references=[r.answer])
            )
        elif r.task_kind == "multiple-choice":
            ex = EvalExample(id=r.id, image_ref=r.image_ref, text=r.text, gold_option=r.answer)
            if len(r.options) == 16:
                buckets["counting"].append(ex)
            elif r.options[0] == "True":
                buckets["spatial"].append(ex)
            else:
                buckets["presence"].append(ex)
        elif r.task_kind == "localization":
            buckets["localization"].append(
                EvalExample(id=r.id, image_ref=r.image_ref, text=r.text, gt_bbox_text=r.answer)
            )
    from .data import COUNT_OPTIONS, TF_OPTIONS, YN_OPTIONS

    return {
        "color-vqa": EvalTask("color-vqa", "vqa", buckets["color-vqa"], task_kind="vqa"),
        "counting": EvalTask(
            "counting",
            "closed-set",
            buckets["counting"],
            options=list(COUNT_OPTIONS),
            task_kind="multiple-choice",
        ),
        "spatial": EvalTask(
            "spatial",
            "closed-set",
            buckets["spatial"],
            options=list(TF_OPTIONS),
            task_kind="multiple-choice",
        ),
        "presence": EvalTask(
            "presence",
            "closed-set",
            buckets["presence"],
            options=list(YN_OPTIONS),
            task_kind="multiple-choice",
        ),
        "localization": EvalTask(
            "localization",
            "localization",
            buckets["localization"],
            threshold=0.5,
            task_kind="localization",
        ),
    }


# ---------------------------------------------------------------------------
# Task file / transcript serialization


def write_task(path, task: EvalTask) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "task": task.name,
            "family": task.family,
            "task_kind": task.task_kind,
            "threshold": task.threshold,
            "options": task.options,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in task.examples:
            f.write(
                json.dumps(
                    {
                        "id": ex.id,
                        "image": ex.image_ref,
                        "text": ex.text,
                        "references": ex.references,
                        "gold": ex.gold_option,
                        "bbox": ex.gt_bbox_text,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_task(path) -> EvalTask:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        examples = []
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            examples.append(
                EvalExample(
                    id=rec["id"],
                    image_ref=rec["image"],
                    text=rec["text"],
                    references=rec.get("references") or [],
                    gold_option=rec.get("gold"),
                    gt_bbox_text=rec.get("bbox"),
                )
            )
    return EvalTask(
        name=header["task"],
        family=header["family"],
        examples=examples,
        threshold=header.get("threshold"),
        options=header.get("options"),
        task_kind=header.get("task_kind", "vqa"),
    )


def write_transcript(path, record: EvalRecord) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            json.dumps({"task": record.task_name, "accuracy": record.accuracy}, sort_keys=True)
            + "\n"
        )
        for row in record.transcript:
            f.write(json.dumps(row, sort_keys=True) + "\n")
