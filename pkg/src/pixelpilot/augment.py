"""Turn UI-element annotations into click-instruction training records.

Each annotation names one element on a screenshot. Short instruction
templates are filled from its labels, and the target is a click at the box
centre, expressed in the grounder's model coordinate space.
"""

from __future__ import annotations

import json
import logging
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .grammar import (
    DEFAULT_MODEL_EXTENT,
    Click,
    Point,
    format_model_turn,
    parse_action,
    scale_point,
    serialize_action,
    to_model_space,
)
from .resources import read_text

logger = logging.getLogger(__name__)

PLATFORMS = ("web", "mobile", "desktop")
PLACEHOLDERS = frozenset({"element", "type", "name", "purpose", "function"})
# which annotation field fills each placeholder
FIELD_FOR = {
    "element": "element_type",
    "type": "element_type",
    "name": "name",
    "purpose": "purpose",
    "function": "purpose",
}
SCHEMA_VERSION = 1
SEARCH_RADIUS = 4


class MissingField(ValueError):
    pass


class NoApplicableTemplate(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class UiAnnotation:
    id: str
    image_ref: str
    platform: str
    bbox: tuple[float, float, float, float]
    image_size: tuple[int, int]
    element_type: str = ""
    ocr_text: str = ""
    name: str = ""
    purpose: str = ""
    expected_result: str = ""

    def __post_init__(self):
        if self.platform not in PLATFORMS:
            raise ValueError(f"annotation {self.id}: unknown platform {self.platform!r}")
        x1, y1, x2, y2 = self.bbox
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"annotation {self.id}: bad image size {self.image_size}")
        if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
            raise ValueError(f"annotation {self.id}: bbox {self.bbox} outside {w}x{h} image")


@dataclass(frozen=True)
class InstructionTemplate:
    pattern: str
    fields: tuple[str, ...] = field(init=False, default=())

    def __post_init__(self):
        try:
            names = [f for _, f, _, _ in string.Formatter().parse(self.pattern) if f is not None]
        except ValueError as exc:
            raise ValueError(f"template {self.pattern!r}: {exc}") from None
        unknown = sorted(set(names) - PLACEHOLDERS)
        if unknown or "" in names:
            raise ValueError(f"template {self.pattern!r} uses unknown placeholders {unknown or ['{}']}")
        object.__setattr__(self, "fields", tuple(dict.fromkeys(names)))


@dataclass(frozen=True)
class TrainingSample:
    image_ref: str
    instruction: str
    target_action: str
    source_annotation_id: str

    def __post_init__(self):
        if re.search(r"\{(?:%s)\}" % "|".join(PLACEHOLDERS), self.instruction):
            raise ValueError(f"unresolved placeholder in {self.instruction!r}")


@dataclass
class AugmentResult:
    samples: list[TrainingSample]
    notes: list[str]

    def __iter__(self):
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


# -- loading ------------------------------------------------------------------------

def load_templates(path: str | Path | None = None) -> list[InstructionTemplate]:
    """One pattern per line; blank lines and ``#`` comments are skipped."""
    text = read_text("templates.txt") if path is None else Path(path).read_text(encoding="utf-8")
    return [InstructionTemplate(ln.strip()) for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def wave_ui_record(raw: dict, n: int = 0) -> UiAnnotation:
    """Map one record of the published Wave-UI annotation layout."""
    w, h = raw["resolution"]
    return UiAnnotation(
        id=str(raw.get("id", n)),
        image_ref=str(raw.get("image") or raw.get("image_path") or ""),
        platform=str(raw["platform"]).lower(),
        bbox=tuple(float(v) for v in raw["bbox"]),
        image_size=(int(w), int(h)),
        element_type=raw.get("type") or "",
        ocr_text=raw.get("OCR") or "",
        name=raw.get("name") or "",
        purpose=raw.get("purpose") or "",
        expected_result=raw.get("expectation") or "",
    )


def load_annotations(path: str | Path) -> list[UiAnnotation]:
    """Read a JSON list or JSONL file of Wave-UI records."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    if path.suffix == ".json":
        records = json.loads(text)
    else:
        records = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    return [wave_ui_record(r, n) for n, r in enumerate(records)]


# -- pipeline ---------------------------------------------------------------------------

def platform_counts(entries: list[UiAnnotation]) -> Counter:
    return Counter(e.platform for e in entries)


def filter_web_subset(entries: list[UiAnnotation]) -> list[UiAnnotation]:
    web = [e for e in entries if e.platform == "web"]
    logger.info("kept %d web entries of %d (%d non-web)", len(web), len(entries), len(entries) - len(web))
    return web


def render_template(template: InstructionTemplate, entry: UiAnnotation) -> str:
    values = {}
    for name in template.fields:
        value = " ".join(getattr(entry, FIELD_FOR[name]).split())
        if not value:
            raise MissingField(f"annotation {entry.id} has no {FIELD_FOR[name]} for {{{name}}}")
        values[name] = value
    return template.pattern.format_map(values)


def target_point(entry: UiAnnotation, model_extent: tuple[int, int] = DEFAULT_MODEL_EXTENT) -> Point | None:
    """Model-space click at the box centre that lands back inside the box.

    Rounding can push a centre on a tiny box out of it once scaled to pixels,
    so nearby model points are tried, closest first. ``None`` if none fits.
    """
    x1, y1, x2, y2 = entry.bbox
    centre = to_model_space((x1 + x2) / 2, (y1 + y2) / 2, entry.image_size, model_extent)
    mw, mh = model_extent
    candidates = sorted(
        ((dx, dy) for dx in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1) for dy in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d),
    )
    for dx, dy in candidates:
        mx, my = centre.x + dx, centre.y + dy
        if not (0 <= mx <= mw and 0 <= my <= mh):
            continue
        p = Point(mx, my)
        px = scale_point(p, model_extent, entry.image_size)
        if x1 <= px.x <= x2 and y1 <= px.y <= y2:
            return p
    return None


def augment(
    entries: list[UiAnnotation],
    templates: list[InstructionTemplate],
    variants_per_entry: int,
    seed: int,
    *,
    model_extent: tuple[int, int] = DEFAULT_MODEL_EXTENT,
) -> AugmentResult:
    """Pick up to ``variants_per_entry`` usable templates per entry, seeded per entry id."""
    if not templates:
        raise ValueError("need at least one template")
    if variants_per_entry < 1:
        raise ValueError("variants_per_entry must be positive")
    samples: list[TrainingSample] = []
    notes: list[str] = []
    seen: set[tuple[str, str]] = set()
    for entry in entries:
        rendered = []
        for i, t in enumerate(templates):
            try:
                rendered.append((i, render_template(t, entry)))
            except MissingField:
                continue
        if not rendered:
            notes.append(f"{entry.id}: {NoApplicableTemplate.__name__}")
            continue
        point = target_point(entry, model_extent)
        if point is None:
            notes.append(f"{entry.id}: bbox too small to hold a click target")
            continue
        rng = random.Random(f"{seed}:{entry.id}")
        chosen = sorted(rng.sample(rendered, min(variants_per_entry, len(rendered))))
        action = serialize_action(Click(point))
        for _, text in chosen:
            key = (entry.image_ref, text)
            if key in seen:
                continue
            seen.add(key)
            samples.append(TrainingSample(entry.image_ref, text, action, entry.id))
    return AugmentResult(samples, notes)


def training_record(sample: TrainingSample) -> dict:
    """Conversation-style record in the common multimodal SFT layout."""
    reply = format_model_turn(f"I will {sample.instruction[0].lower()}{sample.instruction[1:]}.", parse_action(sample.target_action))
    return {
        "schema_version": SCHEMA_VERSION,
        "id": sample.source_annotation_id,
        "messages": [
            {"role": "user", "content": f"<image>{sample.instruction}"},
            {"role": "assistant", "content": reply},
        ],
        "images": [sample.image_ref],
    }


def emit_training_file(samples: list[TrainingSample], path: str | Path) -> int:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for s in samples:
                fh.write(json.dumps(training_record(s), ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None
    return len(samples)
