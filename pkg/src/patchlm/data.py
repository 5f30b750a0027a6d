"""Training-mixture schemas: trigger prompts, bbox string codec, synthetic
desk-scale dataset generation, and deterministic mixture streams.

Dataset files are line-delimited JSON records {id, image, task_kind, prompt,
response}; images live beside the file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

TASK_KINDS = (
    "caption",
    "vqa",
    "multiple-choice",
    "localization",
    "region-caption",
    "conversation",
    "language-only",
)

TRIGGER_VQA = "Answer the question using a single word or phrase."
TRIGGER_MC = "Answer with the option's letter from the given choices directly."
TRIGGER_CAPTION = "Provide a one-sentence caption for the provided image."
TRIGGER_LOCALIZATION = "Provide the bounding box coordinates of the region this sentence describes."
TRIGGER_REGION_CAPTION = "Provide a short description of the region within this bounding box."


class ParseFailure(ValueError):
    pass


# ---------------------------------------------------------------------------
# Records


@dataclass
class InstructExample:
    id: str
    task_kind: str
    prompt: str
    response: str
    image_ref: str | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task_kind {self.task_kind!r}")
        if (self.task_kind == "language-only") != (self.image_ref is None):
            raise ValueError("language-only examples (and only those) must omit image_ref")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image": self.image_ref,
            "task_kind": self.task_kind,
            "prompt": self.prompt,
            "response": self.response,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InstructExample":
        return cls(
            id=rec["id"],
            task_kind=rec["task_kind"],
            prompt=rec["prompt"],
            response=rec["response"],
            image_ref=rec.get("image"),
        )


def write_dataset(path, examples: list[InstructExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def read_dataset(path) -> list[InstructExample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(InstructExample.from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Bounding boxes


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min <= self.x_max <= 1.0 and 0.0 <= self.y_min <= self.y_max <= 1.0):
            raise ValueError(f"invalid normalized bbox {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


_BBOX_RE = re.compile(
    r"\[\s*([0-9]*\.?[0-9]+)\s*,\s*([0-9]*\.?[0-9]+)\s*,\s*([0-9]*\.?[0-9]+)\s*,\s*([0-9]*\.?[0-9]+)\s*\]"
)


def encode_bbox(b: BBox) -> str:
    return f"[{b.x_min:.3f}, {b.y_min:.3f}, {b.x_max:.3f}, {b.y_max:.3f}]"


def decode_bbox(text: str) -> BBox:
    m = _BBOX_RE.search(text)
    if m is None:
        raise ParseFailure(f"no bracketed four-number bbox in {text!r}")
    vals = [float(g) for g in m.groups()]
    try:
        return BBox(*vals)
    except ValueError as e:
        raise ParseFailure(str(e)) from e


# ---------------------------------------------------------------------------
# Trigger prompts

OPTION_LETTERS = "ABCDEFGHIJKLMNOP"


def apply_trigger_prompt(task_kind: str, text: str, options: list[str] | None = None) -> str:
    """Append the fixed per-task trigger string to a question/expression."""
    if (options is not None) != (task_kind == "multiple-choice"):
        raise ValueError("options must be given exactly for multiple-choice tasks")
    if task_kind == "vqa":
        return f"{text} {TRIGGER_VQA}"
    if task_kind == "multiple-choice":
        rendered = " ".join(f"{OPTION_LETTERS[i]}. {opt}" for i, opt in enumerate(options))
        return f"{text} {rendered} {TRIGGER_MC}"
    if task_kind == "caption":
        return TRIGGER_CAPTION if not text else f"{text} {TRIGGER_CAPTION}"
    if task_kind == "localization":
        return f"{text} {TRIGGER_LOCALIZATION}"
    if task_kind == "region-caption":
        return f"{text} {TRIGGER_REGION_CAPTION}"
    if task_kind in ("conversation", "language-only"):
        return text
    raise ValueError(f"unknown task_kind {task_kind!r}")


# ---------------------------------------------------------------------------
# Synthetic shape-scene generator

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 190),
    "orange": (240, 140, 30),
}
SHAPES = ("square", "circle", "triangle", "diamond")
MAX_OBJECTS = 4  # keeps count answers well inside 0..15


@dataclass
class SceneObject:
    shape: str
    color: str
    x0: int
    y0: int
    size: int

    def bbox(self, canvas: int) -> BBox:
        return BBox(
            round(self.x0 / canvas, 3),
            round(self.y0 / canvas, 3),
            round((self.x0 + self.size) / canvas, 3),
            round((self.y0 + self.size) / canvas, 3),
        )


def _draw_scene(objects: list[SceneObject], canvas: int) -> np.ndarray:
    im = Image.new("RGB", (canvas, canvas), (235, 235, 235))
    draw = ImageDraw.Draw(im)
    for obj in objects:
        x0, y0 = obj.x0, obj.y0
        x1, y1 = x0 + obj.size - 1, y0 + obj.size - 1
        rgb = COLORS[obj.color]
        if obj.shape == "square":
            draw.rectangle([x0, y0, x1, y1], fill=rgb)
        elif obj.shape == "circle":
            draw.ellipse([x0, y0, x1, y1], fill=rgb)
        elif obj.shape == "triangle":
            draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) // 2, y0)], fill=rgb)
        else:  # diamond inscribed in the same tight bbox
            cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
            draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=rgb)
    return np.asarray(im)


def _place_objects(rng: np.random.Generator, canvas: int, count: int) -> list[SceneObject]:
    """Place non-overlapping shapes; both colors and shape kinds are unique
    within a scene, so questions naming either are unambiguous and a
    color-mask pixel scan can recover each object's extent."""
    color_idx = rng.permutation(len(COLORS))[:count]
    shape_idx = rng.permutation(len(SHAPES))[:count]
    color_names = list(COLORS)
    objects: list[SceneObject] = []
    for ci, si in zip(color_idx, shape_idx):
        color = color_names[int(ci)]
        shape = SHAPES[int(si)]
        for _ in range(200):
            size = int(rng.integers(canvas // 8, canvas // 4))
            x0 = int(rng.integers(0, canvas - size + 1))
            y0 = int(rng.integers(0, canvas - size + 1))
            clear = all(
                x0 + size + 1 < o.x0 or o.x0 + o.size + 1 < x0 or y0 + size + 1 < o.y0 or o.y0 + o.size + 1 < y0
                for o in objects
            )
            if clear:
                objects.append(SceneObject(shape, color, x0, y0, size))
                break
        else:
            raise RuntimeError("could not place a non-overlapping object")
    return objects


LANGUAGE_ONLY_PAIRS = [
    ("What is two plus two?", "Four."),
    ("Name a primary color.", "Red."),
    ("Is water wet? Answer yes or no.", "Yes."),
    ("Spell the word cat.", "C-A-T."),
    ("What day follows Monday?", "Tuesday."),
    ("How many legs does a spider have?", "Eight."),
]

COUNT_OPTIONS = [str(k) for k in range(16)]
TF_OPTIONS = ["True", "False"]
YN_OPTIONS = ["Yes", "No"]


@dataclass
class QARecord:
    """Raw (untriggered) question/answer for one scene and task kind.

    The same record feeds training (trigger applied, answer rendered per the
    task's response format) and evaluation (trigger applied at scoring time),
    keeping the prompt strings byte-identical between the two.
    """

    id: str
    task_kind: str
    text: str
    answer: str
    image_ref: str | None = None
    options: list[str] | None = None

    def to_instruct(self) -> InstructExample:
        prompt = apply_trigger_prompt(self.task_kind, self.text, self.options)
        response = self.answer
        if self.task_kind == "multiple-choice":
            response = OPTION_LETTERS[self.options.index(self.answer)]
        return InstructExample(
            id=self.id,
            task_kind=self.task_kind,
            prompt=prompt,
            response=response,
            image_ref=self.image_ref,
        )


def synth_records(
    seed: int,
    n: int,
    canvas: int = 224,
    include_language_only: bool = True,
) -> tuple[list[QARecord], dict[str, np.ndarray]]:
    """Generate n shape scenes and one raw QA record per task kind per image."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > 100000:
        raise ValueError("n too large for unique scene layouts")
    rng = np.random.default_rng(seed)
    records: list[QARecord] = []
    images: dict[str, np.ndarray] = {}

    for i in range(n):
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        objects = _place_objects(rng, canvas, count)
        img_ref = f"img_{i:05d}.png"
        images[img_ref] = _draw_scene(objects, canvas)
        target = objects[int(rng.integers(0, len(objects)))]

        records.append(
            QARecord(
                id=f"{i:05d}-vqa",
                task_kind="vqa",
                text=f"What color is the {target.shape}?",
                answer=target.color,
                image_ref=img_ref,
            )
        )
        records.append(
            QARecord(
                id=f"{i:05d}-count",
                task_kind="multiple-choice",
                text="How many shapes are in the image?",
                answer=str(count),
                image_ref=img_ref,
                options=list(COUNT_OPTIONS),
            )
        )
        # spatial True/False; polarity coin keeps the split roughly balanced
        a, b = objects[0], objects[-1]
        if len(objects) == 1:
            stmt, truth = f"The {a.color} {a.shape} is alone in the image.", True
        else:
            actually_left = a.x0 + a.size / 2 < b.x0 + b.size / 2
            if bool(rng.integers(0, 2)):
                stmt = f"The {a.color} {a.shape} is to the left of the {b.color} {b.shape}."
                truth = actually_left
            else:
                stmt = f"The {a.color} {a.shape} is to the right of the {b.color} {b.shape}."
                truth = not actually_left
        records.append(
            QARecord(
                id=f"{i:05d}-spatial",
                task_kind="multiple-choice",
                text=f"{stmt} Is this true or false?",
                answer="True" if truth else "False",
                image_ref=img_ref,
                options=list(TF_OPTIONS),
            )
        )
        # presence Yes/No, alternating polarity for an exactly balanced split
        if i % 2 == 0:
            presence_q = f"Is there a {target.color} {target.shape} in the image?"
            presence_a = "Yes"
        else:
            present = {(o.color, o.shape) for o in objects}
            absent = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
            color, shape = absent[int(rng.integers(0, len(absent)))]
            presence_q = f"Is there a {color} {shape} in the image?"
            presence_a = "No"
        records.append(
            QARecord(
                id=f"{i:05d}-presence",
                task_kind="multiple-choice",
                text=presence_q,
                answer=presence_a,
                image_ref=img_ref,
                options=list(YN_OPTIONS),
            )
        )
        bbox_str = encode_bbox(target.bbox(canvas))
        records.append(
            QARecord(
                id=f"{i:05d}-loc",
                task_kind="localization",
                text=f"the {target.color} {target.shape}",
                answer=bbox_str,
                image_ref=img_ref,
            )
        )
        records.append(
            QARecord(
                id=f"{i:05d}-regcap",
                task_kind="region-caption",
                text=bbox_str,
                answer=f"the {target.color} {target.shape}",
                image_ref=img_ref,
            )
        )
        names = " and ".join(f"a {o.color} {o.shape}" for o in objects)
        records.append(
            QARecord(
                id=f"{i:05d}-cap",
                task_kind="caption",
                text="",
                answer=f"An image with {names}.",
                image_ref=img_ref,
            )
        )
        if include_language_only:
            q, ans = LANGUAGE_ONLY_PAIRS[i % len(LANGUAGE_ONLY_PAIRS)]
            records.append(
                QARecord(id=f"{i:05d}-lang", task_kind="language-only", text=q, answer=ans)
            )
    return records, images


def synth_generate(
    seed: int,
    n: int,
    canvas: int = 224,
    out_dir: Path | str | None = None,
    include_language_only: bool = True,
) -> tuple[list[InstructExample], dict[str, np.ndarray]]:
    """Generate n shape scenes as trigger-prompted training examples.

    Returns (examples, images keyed by image_ref). When out_dir is given the
    PNGs and a dataset.jsonl are also written there.
    """
    records, images = synth_records(seed, n, canvas, include_language_only)
    examples = [r.to_instruct() for r in records]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for ref, arr in images.items():
            Image.fromarray(arr).save(out_dir / ref)
        write_dataset(out_dir / "dataset.jsonl", examples)
    return examples, images


# ---------------------------------------------------------------------------
# Mixture composition


@dataclass
class MixtureSource:
    name: str
    examples: list[InstructExample] = field(default_factory=list)
    path: str | None = None

    def resolve(self) -> list[InstructExample]:
        if self.examples:
            return self.examples
        if self.path is None:
            raise ValueError(f"source {self.name!r} has neither examples nor a path")
        p = Path(self.path)
        if not p.exists():
            raise FileNotFoundError(f"source {self.name!r}: missing path {p}")
        return read_dataset(p)


@dataclass
class MixtureConfig:
    sources: list[MixtureSource]
    include_language_only: bool = True
    epoch_count: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ValueError("at least one dataset source required")
        if self.epoch_count <= 0:
            raise ValueError("epoch_count must be > 0")


def build_mixture(cfg: MixtureConfig) -> list[InstructExample]:
    """Deterministic example stream: shuffled full passes, final pass truncated
    so the stream has round(epoch_count * N) examples."""
    pool: list[InstructExample] = []
    for src in cfg.sources:
        pool.extend(src.resolve())
    if not cfg.include_language_only:
        pool = [ex for ex in pool if ex.task_kind != "language-only"]
    n = len(pool)
    total = int(round(cfg.epoch_count * n))
    stream: list[InstructExample] = []
    epoch = 0
    while len(stream) < total:
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        stream.extend(pool[int(j)] for j in order)
        epoch += 1
    return stream[:total]
