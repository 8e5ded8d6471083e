"""Sample records, dataset manifests and split bookkeeping.

A manifest is a UTF-8 text file: the header line ``avfd-manifest v1``, one
JSON line with manifest-level fields (name, version, metadata), then one JSON
record per line. File references are stored as written, relative paths being
resolved against the manifest's directory. ``http(s)://`` references are kept
as links and never fetched.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError, ValidationError

MANIFEST_HEADER = "avfd-manifest v1"

LABELS = ("real", "fake")
SCENARIOS = ("talking", "singing")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class AudioRef:
    path: str
    sample_rate: int


@dataclass(frozen=True)
class SampleRecord:
    """One labeled audio-visual clip.

    ``frame_refs`` and ``mouth_refs`` are the per-frame image sequences (same
    length T), ``audio_ref`` the waveform of the whole clip.
    """

    id: str
    frame_refs: tuple[str, ...]
    mouth_refs: tuple[str, ...]
    audio_ref: AudioRef
    label: str
    scenario: str
    split: str
    mask_ref: str | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frame_refs", tuple(self.frame_refs))
        object.__setattr__(self, "mouth_refs", tuple(self.mouth_refs))
        if not self.id:
            raise ValidationError("record id must be a non-empty string")
        if len(self.frame_refs) < 1:
            raise ValidationError(f"{self.id}: needs at least one frame")
        if len(self.frame_refs) != len(self.mouth_refs):
            raise ValidationError(
                f"{self.id}: {len(self.frame_refs)} frames but {len(self.mouth_refs)} mouth crops"
            )
        for name, value, allowed in (
            ("label", self.label, LABELS),
            ("scenario", self.scenario, SCENARIOS),
            ("split", self.split, SPLITS),
        ):
            if value not in allowed:
                raise ValidationError(f"{self.id}: {name}={value!r} not in {allowed}")
        if self.audio_ref.sample_rate <= 0:
            raise ValidationError(f"{self.id}: sample rate must be positive")

    @property
    def num_frames(self) -> int:
        return len(self.frame_refs)

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "frame_refs": list(self.frame_refs),
            "mouth_refs": list(self.mouth_refs),
            "audio_ref": {"path": self.audio_ref.path, "sample_rate": self.audio_ref.sample_rate},
            "mask_ref": self.mask_ref,
            "label": self.label,
            "scenario": self.scenario,
            "split": self.split,
        }
        if self.meta:
            out["meta"] = dict(self.meta)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "SampleRecord":
        try:
            audio = obj["audio_ref"]
            return cls(
                id=str(obj["id"]),
                frame_refs=tuple(obj["frame_refs"]),
                mouth_refs=tuple(obj["mouth_refs"]),
                audio_ref=AudioRef(str(audio["path"]), int(audio["sample_rate"])),
                mask_ref=obj.get("mask_ref"),
                label=obj["label"],
                scenario=obj["scenario"],
                split=obj["split"],
                meta=dict(obj.get("meta") or {}),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed record: {exc!r}") from exc

    def refs(self) -> Iterable[str]:
        yield from self.frame_refs
        yield from self.mouth_refs
        yield self.audio_ref.path
        if self.mask_ref is not None:
            yield self.mask_ref


def is_url(ref: str) -> bool:
    return ref.startswith(("http://", "https://"))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    name: str = "dataset"
    version: str = "1"
    metadata: Mapping[str, object] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        dupes = [k for k, n in Counter(r.id for r in self.records).items() if n > 1]
        if dupes:
            raise ValidationError(f"duplicate record ids: {sorted(dupes)}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, ref: str) -> str:
        """Absolute path for a local reference, unchanged for URLs."""
        if is_url(ref) or os.path.isabs(ref) or self.root is None:
            return ref
        return str(self.root / ref)

    def split(self, name: str) -> "DatasetManifest":
        return dataclasses.replace(self, records=tuple(r for r in self.records if r.split == name))

    def check_real_only_training(self) -> None:
        bad = [r.id for r in self.records if r.split == "train" and r.label != "real"]
        if bad:
            raise ValidationError(f"fake samples in train split: {', '.join(bad)}")

    def check_files(self) -> None:
        for rec in self.records:
            for ref in rec.refs():
                if not is_url(ref) and not os.path.exists(self.resolve(ref)):
                    raise ValidationError(f"{rec.id}: dangling reference {ref}")


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [MANIFEST_HEADER]
    head = {"name": manifest.name, "version": manifest.version, "metadata": dict(manifest.metadata)}
    lines.append(json.dumps(head, ensure_ascii=False))
    lines.extend(json.dumps(r.to_json(), ensure_ascii=False) for r in manifest.records)
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")
    return path


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest file.

    Raises:
        ParseError: wrong header or a line that is not valid JSON.
        ValidationError: duplicate ids, dangling local references, a fake
            record in the train split, or an invalid field value.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ParseError(f"{path}: missing header {MANIFEST_HEADER!r}")
    if len(lines) < 2:
        raise ParseError(f"{path}: missing manifest metadata line")
    try:
        head = json.loads(lines[1])
        objs = [json.loads(ln) for ln in lines[2:] if ln.strip()]
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(head, dict):
        raise ParseError(f"{path}: metadata line is not an object")
    manifest = DatasetManifest(
        records=tuple(SampleRecord.from_json(o) for o in objs),
        name=str(head.get("name", "dataset")),
        version=str(head.get("version", "1")),
        metadata=dict(head.get("metadata") or {}),
        root=path.parent.resolve(),
    )
    manifest.check_real_only_training()
    if check_files:
        manifest.check_files()
    return manifest


def split_counts(manifest: DatasetManifest) -> dict[tuple[str, str, str], int]:
    """Counts per (split, label, scenario); every combination is present."""
    counts = {key: 0 for key in itertools.product(SPLITS, LABELS, SCENARIOS)}
    for rec in manifest.records:
        counts[(rec.split, rec.label, rec.scenario)] += 1
    return counts
