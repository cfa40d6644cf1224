"""Dataset manifests: class / recording / location provenance per item, unit policies, leakage audit."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from bofbench.audio_io import SampleBuffer, decode, normalize, probe, segment_bounds
from bofbench.errors import AudioError, ManifestError

logger = logging.getLogger(__name__)

COLUMNS = ("item_id", "audio_path", "class_label", "recording_id", "location_id", "segment_index")
SEGMENT_SEP = "#"


@dataclass(frozen=True)
class UnitPolicy:
    kind: str = "whole_recording"
    unit_seconds: float | None = None

    def __post_init__(self):
        if self.kind == "whole_recording":
            if self.unit_seconds is not None:
                raise ValueError("whole_recording policy takes no unit length")
        elif self.kind == "segmented":
            if self.unit_seconds is None or self.unit_seconds <= 0:
                raise ValueError("segmented policy needs a positive unit length")
        else:
            raise ValueError(f"unknown unit policy {self.kind!r}")

    @property
    def segmented(self) -> bool:
        return self.kind == "segmented"

    @classmethod
    def parse(cls, text: str) -> UnitPolicy:
        """``whole`` / ``whole_recording`` or ``segmented:<seconds>``."""
        text = text.strip()
        if text in ("whole", "whole_recording"):
            return cls()
        kind, _, secs = text.partition(":")
        if kind == "segmented" and secs:
            try:
                return cls("segmented", float(secs))
            except ValueError:
                pass
        raise ValueError(f"cannot parse unit policy {text!r}; use 'whole' or 'segmented:<seconds>'")

    def __str__(self):
        return "whole_recording" if not self.segmented else f"segmented:{self.unit_seconds:g}"


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    audio_path: Path
    class_label: str
    recording_id: str
    location_id: str
    segment_index: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    items: tuple
    unit_policy: UnitPolicy = UnitPolicy()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        problems = validate_entries(self.items, self.unit_policy)
        if problems:
            raise ManifestError(f"manifest {self.name!r} is invalid:\n  " + "\n  ".join(problems))

    def __len__(self):
        return len(self.items)

    @property
    def item_ids(self) -> tuple:
        return tuple(e.item_id for e in self.items)

    @property
    def labels(self) -> tuple:
        return tuple(e.class_label for e in self.items)

    @property
    def classes(self) -> list[str]:
        return sorted({e.class_label for e in self.items})


def validate_entries(items, policy: UnitPolicy) -> list[str]:
    problems = []
    ids = Counter(e.item_id for e in items)
    problems += [f"duplicate item_id {i!r}" for i, c in ids.items() if c > 1]
    keys = Counter((e.recording_id, e.segment_index) for e in items)
    problems += [f"duplicate (recording_id, segment_index) {k!r}" for k, c in keys.items() if c > 1]
    for e in items:
        if policy.segmented and e.segment_index is None:
            problems.append(f"item {e.item_id!r} lacks a segment index under {policy}")
        if not policy.segmented and e.segment_index is not None:
            problems.append(f"item {e.item_id!r} has a segment index under {policy}")
    per_class = Counter(e.class_label for e in items)
    if len(per_class) < 2:
        problems.append(f"need at least 2 classes, found {len(per_class)}")
    problems += [f"class {c!r} has only {n} item(s) under {policy}" for c, n in sorted(per_class.items()) if n < 2]
    return problems


def _read_rows(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ManifestError(f"{path}: missing columns {missing}")
            return [(n, row) for n, row in enumerate(reader, start=2)]
    except OSError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def expand_segments(entries, policy: UnitPolicy) -> list[ManifestEntry]:
    """Turn recording-level entries into unit-level entries using WAV header lengths."""
    out = []
    for e in entries:
        if e.segment_index is not None:
            out.append(e)
            continue
        info = probe(e.audio_path)
        bounds = segment_bounds(info.n_frames, info.sample_rate, policy.unit_seconds)
        if not bounds:
            logger.warning(
                "%s: %.1f s recording yields no %g s unit; dropped",
                e.item_id, info.n_frames / info.sample_rate, policy.unit_seconds,
            )
        out += [replace(e, item_id=f"{e.item_id}{SEGMENT_SEP}{k}", segment_index=k) for k in range(len(bounds))]
    return out


def shipped_manifest(name: str) -> Path:
    """Path of a manifest bundled with the package (``qmul`` or ``aucodefr07``)."""
    ref = resources.files("bofbench") / "manifests" / f"{name}.csv"
    if not ref.is_file():
        raise ManifestError(f"no shipped manifest named {name!r}")
    return Path(str(ref))


def resolve_manifest(spec) -> Path:
    """``shipped:<name>`` names a bundled manifest; anything else is a filesystem path."""
    text = str(spec)
    if text.startswith("shipped:"):
        return shipped_manifest(text.partition(":")[2])
    return Path(spec)


def load_manifest(
    path,
    policy: UnitPolicy | str | None = None,
    name: str | None = None,
    audio_root=None,
) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Rows with an empty ``segment_index`` describe whole recordings; under a
    segmented policy they are expanded into one entry per unit.  Rows with a
    ``segment_index`` are already unit-level and require a segmented policy.
    Relative audio paths resolve against ``audio_root`` if given, else the
    manifest's directory.
    """
    path = resolve_manifest(path)
    base = Path(audio_root) if audio_root is not None else path.parent
    if isinstance(policy, str):
        policy = UnitPolicy.parse(policy)
    policy = policy or UnitPolicy()
    problems = []
    entries = []
    for lineno, row in _read_rows(path):
        vals = {k: (row.get(k) or "").strip() for k in COLUMNS}
        empty = [k for k in COLUMNS[:5] if not vals[k]]
        if empty:
            problems.append(f"row {lineno}: empty {', '.join(empty)}")
            continue
        audio = Path(vals["audio_path"])
        if not audio.is_absolute():
            audio = base / audio
        if not audio.is_file():
            problems.append(f"row {lineno}: audio file not found: {audio}")
        seg = None
        if vals["segment_index"]:
            try:
                seg = int(vals["segment_index"])
            except ValueError:
                problems.append(f"row {lineno}: segment_index {vals['segment_index']!r} is not an integer")
        entries.append((lineno, ManifestEntry(
            vals["item_id"], audio, vals["class_label"], vals["recording_id"], vals["location_id"], seg
        )))
    seen = {}
    for lineno, e in entries:
        if e.item_id in seen:
            problems.append(f"row {lineno}: duplicate item_id {e.item_id!r} (first at row {seen[e.item_id]})")
        seen.setdefault(e.item_id, lineno)
    if problems:
        raise ManifestError(f"{path}:\n  " + "\n  ".join(problems))
    items = [e for _, e in entries]
    if policy.segmented:
        try:
            items = expand_segments(items, policy)
        except AudioError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
    return DatasetManifest(name or path.stem, tuple(items), policy)


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for e in entries:
            audio = Path(e.audio_path)
            try:
                audio = audio.relative_to(path.parent)
            except ValueError:
                pass
            seg = "" if e.segment_index is None else e.segment_index
            w.writerow([e.item_id, audio.as_posix(), e.class_label, e.recording_id, e.location_id, seg])


def materialize_recording(audio_path: Path, entries, policy: UnitPolicy, do_normalize: bool):
    try:
        buf = decode(audio_path, source_id=entries[0].recording_id)
    except AudioError as exc:
        raise AudioError(f"item {entries[0].item_id!r}: {exc}") from exc
    if do_normalize:
        buf = normalize(buf)
    if not policy.segmented:
        return [(e.item_id, buf) for e in entries]
    bounds = segment_bounds(len(buf), buf.sample_rate, policy.unit_seconds)
    out = []
    for e in entries:
        if e.segment_index >= len(bounds):
            raise AudioError(f"item {e.item_id!r}: segment {e.segment_index} beyond the {len(bounds)} units of {audio_path}")
        a, b = bounds[e.segment_index]
        out.append((e.item_id, SampleBuffer(buf.samples[a:b], buf.sample_rate, buf.source_id, e.segment_index)))
    return out


def materialize(manifest: DatasetManifest, normalize: bool = False, workers: int = 1) -> list[tuple[str, SampleBuffer]]:
    """Decode every recording once and cut it into the manifest's units, in manifest order.

    Normalization, when requested, is applied per recording before segmentation.
    """
    groups = defaultdict(list)
    for e in manifest.items:
        groups[e.audio_path].append(e)
    jobs = list(groups.items())

    def run(job):
        return materialize_recording(job[0], job[1], manifest.unit_policy, normalize)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    by_id = dict(pair for chunk in results for pair in chunk)
    return [(e.item_id, by_id[e.item_id]) for e in manifest.items]


def leakage_summary(manifest: DatasetManifest) -> dict:
    """Per-class counts and the fraction of same-class item pairs that share a recording."""
    by_class = defaultdict(list)
    for e in manifest.items:
        by_class[e.class_label].append(e)
    classes = {}
    for label in sorted(by_class):
        members = by_class[label]
        recs = Counter(e.recording_id for e in members)
        n = len(members)
        pairs = n * (n - 1) // 2
        shared = sum(c * (c - 1) // 2 for c in recs.values())
        classes[label] = {
            "items": n,
            "recordings": len(recs),
            "locations": len({e.location_id for e in members}),
            "pairs": pairs,
            "same_recording_pairs": shared,
            "leakage_fraction": shared / pairs if pairs else 0.0,
        }
    return {
        "dataset": manifest.name,
        "unit_policy": str(manifest.unit_policy),
        "items": len(manifest),
        "classes": classes,
    }

