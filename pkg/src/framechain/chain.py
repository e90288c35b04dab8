"""Canonical data types and serialization for keyframe chains and run artifacts.

A reasoning run produces an ordered chain of keyframe images paired with
captions, a structured record of the reasoning outputs, and the image/caption
pairs used to tune the generator. Everything here is a plain value type with
deterministic writers: identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SLUG_RE = re.compile(r"^[a-z0-9_]+$")
LOSSLESS_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")

CSV_HEADER = '"file_name","text"'


@dataclass(frozen=True)
class PromptSpec:
    """User prompt plus the slug used for run directories."""

    text: str
    scenario_id: str

    def validate(self) -> "PromptSpec":
        if not self.text.strip():
            raise ValidationError("prompt text must be non-empty")
        if not SLUG_RE.match(self.scenario_id):
            raise ValidationError(
                f"scenario_id {self.scenario_id!r} must match [a-z0-9_]+"
            )
        return self


@dataclass(frozen=True)
class TextualThought:
    """Caption or edit instruction at one position of the chain."""

    index: int
    text: str

    def validate(self) -> "TextualThought":
        if self.index < 0:
            raise ValidationError("thought index must be >= 0")
        if not self.text:
            raise ValidationError("thought text must be non-empty")
        return self


@dataclass(frozen=True)
class VisualThought:
    """Keyframe image at one position of the chain.

    ``image`` is an (H, W, 3) array of 8-bit channel values; ``file_path`` is
    the relative path the image is (or will be) persisted under.
    """

    index: int
    image: np.ndarray
    file_path: str

    def validate(self) -> "VisualThought":
        if self.index < 0:
            raise ValidationError("thought index must be >= 0")
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"keyframe image must be (H, W, 3), got {img.shape}")
        if img.shape[0] < 8 or img.shape[1] < 8:
            raise ValidationError("keyframe image must be at least 8x8")
        if img.min() < 0 or img.max() > 255:
            raise ValidationError("keyframe pixel values must lie in [0, 255]")
        if not self.file_path.lower().endswith(LOSSLESS_EXTENSIONS):
            raise ValidationError(
                f"keyframe file_path {self.file_path!r} must use a lossless raster extension"
            )
        return self


@dataclass
class ThoughtChain:
    """Paired keyframe images and captions, ordered by chain position."""

    visual: list[VisualThought]
    textual: list[TextualThought]

    def __len__(self) -> int:
        return len(self.visual)

    def validate(self) -> "ThoughtChain":
        if len(self.visual) != len(self.textual):
            raise ValidationError(
                f"chain has {len(self.visual)} images but {len(self.textual)} captions"
            )
        if len(self.visual) < 1:
            raise ValidationError("chain must contain at least one keyframe")
        for i, (vis, txt) in enumerate(zip(self.visual, self.textual)):
            vis.validate()
            txt.validate()
            if vis.index != i or txt.index != i:
                raise ValidationError("chain indices must be contiguous from 0")
        return self


@dataclass
class ReasoningRecord:
    """Structured output of one reasoning run.

    ``key_frames`` holds the edit instructions for keyframes 1..N-1; the first
    keyframe is captioned by ``concise_prompt``.
    """

    input_prompt: str
    thoughts: str
    consequences: str
    context_frame: str
    concise_prompt: str
    key_frames: list[str] = field(default_factory=list)

    FIELDS = (
        "input_prompt",
        "thoughts",
        "consequences",
        "context_frame",
        "concise_prompt",
        "key_frames",
    )

    def validate(self) -> "ReasoningRecord":
        for name in self.FIELDS[:-1]:
            if not getattr(self, name):
                raise ValidationError(f"reasoning record field {name!r} must be non-empty")
        for i, caption in enumerate(self.key_frames):
            if not caption:
                raise ValidationError(f"key_frames[{i}] must be non-empty")
        return self

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass(frozen=True)
class TuningPair:
    """One image/caption pair used as tuning supervision."""

    file_name: str
    text: str

    def validate(self) -> "TuningPair":
        if not self.file_name:
            raise ValidationError("tuning pair file_name must be non-empty")
        if not self.text:
            raise ValidationError("tuning pair text must be non-empty")
        return self


@dataclass
class RunManifest:
    """Per-run provenance: config hash, seed, stage timings, artifact paths."""

    config_hash: str
    seed: int
    stage_timings: dict[str, float] = field(default_factory=dict)
    artifact_paths: dict[str, str] = field(default_factory=dict)
    substep_timings: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)

    STAGES = ("reasoning", "tuning", "sampling")

    def validate(self, complete: bool = False) -> "RunManifest":
        if self.seed < 0:
            raise ValidationError("manifest seed must be unsigned")
        for stage, seconds in self.stage_timings.items():
            if stage not in self.STAGES:
                raise ValidationError(f"unknown stage {stage!r} in manifest timings")
            if seconds < 0:
                raise ValidationError("stage timings must be >= 0")
        if complete and set(self.stage_timings) != set(self.STAGES):
            raise ValidationError(
                "a complete manifest must cover exactly the stages "
                f"{set(self.STAGES)}, got {set(self.stage_timings)}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "stage_timings": self.stage_timings,
            "substep_timings": self.substep_timings,
            "artifact_paths": self.artifact_paths,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(
            config_hash=data["config_hash"],
            seed=data["seed"],
            stage_timings=dict(data.get("stage_timings", {})),
            artifact_paths=dict(data.get("artifact_paths", {})),
            substep_timings={k: dict(v) for k, v in data.get("substep_timings", {}).items()},
            flags=dict(data.get("flags", {})),
        )


def write_reasoning_json(record: ReasoningRecord, path, scenario_id: str) -> Path:
    """Write ``record`` as a JSON file keyed by ``scenario_id``.

    The file holds one top-level object with exactly the six record fields in
    declaration order, UTF-8 encoded with 4-space indentation. Identical
    records produce byte-identical files.
    """
    record.validate()
    if not SLUG_RE.match(scenario_id):
        raise ValidationError(f"scenario_id {scenario_id!r} must match [a-z0-9_]+")
    path = Path(path)
    payload = json.dumps({scenario_id: record.to_dict()}, indent=4, ensure_ascii=False)
    path.write_text(payload + "\n", encoding="utf-8")
    return path


def read_reasoning_json(path) -> tuple[str, ReasoningRecord]:
    """Inverse of :func:`write_reasoning_json`."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if len(data) != 1:
        raise ValidationError("reasoning JSON must hold exactly one scenario")
    scenario_id, fields = next(iter(data.items()))
    missing = set(ReasoningRecord.FIELDS) - set(fields)
    if missing:
        raise ValidationError(f"reasoning JSON missing fields {sorted(missing)}")
    return scenario_id, ReasoningRecord(**{k: fields[k] for k in ReasoningRecord.FIELDS})


def _csv_cell(value: str) -> str:
    return '"' + value.replace('"', '""') + '"'


def write_tuning_csv(pairs: list[TuningPair], path) -> Path:
    """Write image/caption pairs as a two-column CSV.

    The first line is exactly ``"file_name","text"``; every cell is
    double-quoted with interior quotes doubled, so captions may contain commas
    and quotes and still parse back identically.
    """
    if not pairs:
        raise ValidationError("tuning CSV requires at least one pair")
    lines = [CSV_HEADER]
    for pair in pairs:
        pair.validate()
        lines.append(_csv_cell(pair.file_name) + "," + _csv_cell(pair.text))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_tuning_csv(path) -> list[TuningPair]:
    """Inverse of :func:`write_tuning_csv` (standard CSV semantics)."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0] != ["file_name", "text"]:
        raise ValidationError("tuning CSV must start with the file_name/text header")
    return [TuningPair(file_name=row[0], text=row[1]).validate() for row in rows[1:]]


def pairs_from_chain(chain: ThoughtChain, record: ReasoningRecord) -> list[TuningPair]:
    """Build tuning pairs: keyframe 0 gets the concise prompt, the rest get
    their edit instructions, in chain order."""
    chain.validate()
    record.validate()
    if len(record.key_frames) != len(chain) - 1:
        raise ValidationError(
            f"record has {len(record.key_frames)} key_frames for a chain of "
            f"{len(chain)} images; expected {len(chain) - 1}"
        )
    captions = [record.concise_prompt] + list(record.key_frames)
    pairs = []
    for vis, caption in zip(chain.visual, captions):
        file_name = Path(vis.file_path).name
        pairs.append(TuningPair(file_name=file_name, text=caption).validate())
    return pairs
