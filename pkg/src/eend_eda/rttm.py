"""RTTM and frame-label files, and conversion between segments and frame activities.

RTTM lines look like::

    SPEAKER <file> <chan> <onset> <duration> <NA> <NA> <speaker> <NA> <NA>

Frame-label files are plain text: a ``#frame_period <seconds>`` header
followed by one ``<speaker-id> <0/1 string>`` line per speaker, e.g.::

    #frame_period 0.1
    spk0 0011110000
    spk1 0000011100
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RttmError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    speaker: str
    onset: float
    duration: float

    @property
    def offset(self):
        return self.onset + self.duration


@dataclass
class Annotation:
    recording_id: str
    segments: list[Segment] = field(default_factory=list)

    @property
    def speakers(self):
        """Speaker ids in order of first appearance."""
        return list(dict.fromkeys(s.speaker for s in self.segments))

    def end(self):
        return max((s.offset for s in self.segments), default=0.0)


@dataclass
class ActivityMatrix:
    """Binary S x T speech activities with one speaker id per row."""

    matrix: np.ndarray
    frame_period: float
    speakers: list[str] | None = None

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.int8)
        if mat.ndim == 1:
            mat = mat[None]
        if mat.ndim != 2:
            raise ValueError(f"activity matrix must be 2-D, got shape {mat.shape}")
        self.matrix = mat
        if self.speakers is None:
            self.speakers = [f"spk{i}" for i in range(self.matrix.shape[0])]
        if len(self.speakers) != self.matrix.shape[0]:
            raise ValueError("one speaker id per row is required")

    @property
    def num_speakers(self):
        return self.matrix.shape[0]

    @property
    def num_frames(self):
        return self.matrix.shape[1]


def parse_rttm(text):
    """Parse RTTM text into annotations grouped by recording, in file order."""
    groups: dict[str, Annotation] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith(";;"):
            continue
        fields = stripped.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError as exc:
            raise RttmError(f"line {lineno}: bad onset/duration {fields[3]!r} {fields[4]!r}") from exc
        if duration < 0 or onset < 0:
            raise RttmError(f"line {lineno}: negative onset or duration")
        if not np.isfinite(onset) or not np.isfinite(duration):
            raise RttmError(f"line {lineno}: non-finite time")
        ann = groups.setdefault(fields[1], Annotation(fields[1]))
        if duration > 0:
            ann.segments.append(Segment(fields[7], onset, duration))
    return list(groups.values())


def read_rttm(path):
    return parse_rttm(Path(path).read_text())


def emit_rttm(annotations):
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    lines = []
    for ann in annotations:
        for seg in sorted(ann.segments, key=lambda s: (s.onset, s.speaker)):
            lines.append(f"SPEAKER {ann.recording_id} 1 {seg.onset:.3f} {seg.duration:.3f} "
                         f"<NA> <NA> {seg.speaker} <NA> <NA>")
    return "\n".join(lines) + ("\n" if lines else "")


def write_rttm(path, annotations):
    Path(path).write_text(emit_rttm(annotations))


def rasterize(annotation, frame_period, num_frames, speakers=None):
    """Frame t is active for a speaker iff its center (t + 0.5) * period lies in a segment."""
    if frame_period <= 0:
        raise ValueError("frame period must be positive")
    speakers = list(speakers) if speakers is not None else annotation.speakers
    index = {s: i for i, s in enumerate(speakers)}
    mat = np.zeros((len(speakers), num_frames), dtype=np.int8)
    for seg in annotation.segments:
        if seg.speaker not in index:
            continue
        # first/last frame whose center falls in [onset, offset)
        lo = max(int(np.ceil(seg.onset / frame_period - 0.5 - 1e-9)), 0)
        hi = min(int(np.ceil(seg.offset / frame_period - 0.5 - 1e-9)), num_frames)
        if hi > lo:
            mat[index[seg.speaker], lo:hi] = 1
    return ActivityMatrix(mat, frame_period, speakers)


def segmentize(activity, recording_id="rec"):
    """Merge runs of active frames into maximal segments."""
    segs = []
    fp = activity.frame_period
    for spk, row in zip(activity.speakers, activity.matrix):
        padded = np.concatenate([[0], row.astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(padded))
        for start, stop in zip(edges[::2], edges[1::2]):
            segs.append(Segment(spk, start * fp, (stop - start) * fp))
    segs.sort(key=lambda s: (s.onset, s.speaker))
    return Annotation(recording_id, segs)


def write_labels(path, activity):
    lines = [f"#frame_period {activity.frame_period!r}"]
    for spk, row in zip(activity.speakers, activity.matrix):
        lines.append(f"{spk} {''.join('1' if v else '0' for v in row)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path, num_frames=None):
    """Read a frame-label file; ``num_frames`` is needed only when it has no speaker rows."""
    frame_period, speakers, rows = None, [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#frame_period"):
            frame_period = float(line.split()[1])
            continue
        parts = line.split()
        if len(parts) != 2 or set(parts[1]) - {"0", "1"}:
            raise RttmError(f"{path}:{lineno}: expected '<speaker> <0/1 string>'")
        speakers.append(parts[0])
        rows.append(np.frombuffer(parts[1].encode(), dtype=np.uint8) - ord("0"))
    if frame_period is None:
        raise RttmError(f"{path}: missing #frame_period header")
    if rows and len({len(r) for r in rows}) != 1:
        raise RttmError(f"{path}: rows differ in length")
    width = len(rows[0]) if rows else (num_frames or 0)
    mat = np.array(rows, dtype=np.int8).reshape(len(rows), width)
    return ActivityMatrix(mat, frame_period, speakers)
