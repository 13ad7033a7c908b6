"""Synchronized-lyrics dataset handling.

Parsing and validation of labeled, time-stamped lyric lines, decomposition
of tracks into intro / synch / outro regions, greedy chunking of the synch
region into training segments of at most ~30 s, and duration statistics.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import csv
import io
import json
import re
import statistics
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

CHUNK_SECONDS = 30.0


class EmotionLabel(IntEnum):
    """The five crowd-sourced emotion labels, in their fixed code order."""

    SADNESS = 0
    JOY = 1
    FEAR = 2
    ANGER = 3
    DISGUST = 4

    @classmethod
    def parse(cls, name: str) -> "EmotionLabel":
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown emotion label: {name!r}") from None

    def __str__(self) -> str:
        return self.name.lower()


ALL_LABELS: tuple[EmotionLabel, ...] = tuple(EmotionLabel)


@dataclass(frozen=True)
class DatasetRow:
    """One labeled, time-stamped lyric segment of a track."""

    id: int
    text: str
    start: float
    end: float
    emotion: EmotionLabel

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"track id must be non-negative, got {self.id}")
        if not self.text.strip():
            raise ValidationError("lyric text is empty")
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValidationError("start/end must be finite")
        if self.start < 0:
            raise ValidationError(f"start must be non-negative, got {self.start}")
        if self.end <= self.start:
            raise ValidationError(
                f"end ({self.end}) must be greater than start ({self.start})"
            )

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Interval:
    """Half-open or closed time interval; only start/end matter here."""

    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class TrackSegmentation:
    """Intro / synch / outro decomposition of one track."""

    track_id: int
    intro: Interval
    synch: Interval
    outro: Interval
    rows: tuple[DatasetRow, ...]

    @property
    def track_duration(self) -> float:
        return self.outro.end


@dataclass(frozen=True)
class Chunk:
    """A run of consecutive same-label rows, capped at ~30 s.

    A chunk longer than the cap can only arise from a single row whose own
    duration exceeds it; such chunks carry ``oversize=True`` and the audio
    path later truncates them.
    """

    track_id: int
    start: float
    end: float
    text: str
    label: EmotionLabel
    rows: tuple[DatasetRow, ...]
    oversize: bool = False

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentStats:
    """Summary statistics over a population of segment durations, seconds."""

    min: float
    max: float
    mean: float
    std: float
    perc_70: float
    perc_90: float

    FIELD_ORDER = ("min", "max", "mean", "std", "perc_70", "perc_90")


@dataclass(frozen=True)
class TrackMeta:
    """Sidecar record supplying what the row schema lacks: track duration."""

    id: int
    duration_seconds: float
    audio_path: str = ""


def _decode(source) -> str:
    """Accept bytes, str, or a (binary or text) file object."""
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def _row_from_fields(id_s, text, start_s, end_s, emotion_s, line: int) -> DatasetRow:
    try:
        track_id = int(id_s)
        start = float(start_s)
        end = float(end_s)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed record: {exc}", line=line) from None
    try:
        return DatasetRow(track_id, str(text), start, end, EmotionLabel.parse(emotion_s))
    except ValidationError as exc:
        raise ValidationError(str(exc), line=line) from None


def parse_dataset(source, format: str = "jsonl") -> list[DatasetRow]:
    """Parse a dataset stream into validated rows, preserving order.

    ``format`` is ``"jsonl"`` (one object per line with keys id, text, start,
    end, emotion) or ``"csv"`` (header ``id,text,start,end,emotion``,
    RFC-4180 quoting). Errors carry the offending line number.
    """
    text = _decode(source)
    if format == "jsonl":
        return _parse_jsonl(text)
    if format == "csv":
        return _parse_csv(text)
    raise ValueError(f"unknown dataset format: {format!r}")


_JSON_KEYS = ("id", "text", "start", "end", "emotion")


def _parse_jsonl(text: str) -> list[DatasetRow]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise ValidationError("record is not an object", line=lineno)
        missing = [k for k in _JSON_KEYS if k not in obj]
        if missing:
            raise ValidationError(f"missing keys: {', '.join(missing)}", line=lineno)
        rows.append(
            _row_from_fields(
                obj["id"], obj["text"], obj["start"], obj["end"], obj["emotion"], lineno
            )
        )
    return rows


_CSV_HEADER = ["id", "text", "start", "end", "emotion"]


def _parse_csv(text: str) -> list[DatasetRow]:
    reader = csv.reader(io.StringIO(text))
    rows = []
    header = None
    for record in reader:
        if header is None:
            header = [h.strip() for h in record]
            if header != _CSV_HEADER:
                raise ValidationError(
                    f"expected header {','.join(_CSV_HEADER)!r}, got {','.join(header)!r}",
                    line=1,
                )
            continue
        if not record or (len(record) == 1 and not record[0].strip()):
            continue
        if len(record) != 5:
            raise ValidationError(
                f"expected 5 fields, got {len(record)}", line=reader.line_num
            )
        rows.append(_row_from_fields(*record, line=reader.line_num))
    if header is None:
        raise ValidationError("empty CSV: missing header", line=1)
    return rows


def rows_to_jsonl(rows: Iterable[DatasetRow]) -> str:
    """Serialize rows to JSONL; floats round-trip exactly."""
    lines = []
    for r in rows:
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "text": r.text,
                    "start": r.start,
                    "end": r.end,
                    "emotion": str(r.emotion),
                },
                ensure_ascii=False,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def rows_to_csv(rows: Iterable[DatasetRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_CSV_HEADER)
    for r in rows:
        writer.writerow([r.id, r.text, repr(r.start), repr(r.end), str(r.emotion)])
    return out.getvalue()


_LRC_LINE = re.compile(r"^\[(\d+):(\d{1,2}(?:\.\d+)?)\]\s?(.*)$")
_LRC_DEFAULT_LINE_SECONDS = 5.0


def parse_lrc(source, default_label: EmotionLabel, track_id: int) -> list[DatasetRow]:
    """Parse an LRC file (``[mm:ss.xx] text`` lines) into labeled rows.

    Each line ends where the next begins; the final line gets the median
    observed line duration (5 s when there is only one line). LRC carries no
    emotion labels, so every row receives ``default_label``. Lines with empty
    text are dropped before the adjacency rule is applied.
    """
    text = _decode(source)
    stamped: list[tuple[float, str, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        m = _LRC_LINE.match(line.strip())
        if not m:
            raise ValidationError(f"unparseable timestamp in {line.strip()!r}", line=lineno)
        minutes, seconds, lyric = m.groups()
        t = int(minutes) * 60 + float(seconds)
        if stamped and t < stamped[-1][0]:
            raise ValidationError(
                f"timestamp {t:.2f} decreases below {stamped[-1][0]:.2f}", line=lineno
            )
        if lyric.strip():
            stamped.append((t, lyric.strip(), lineno))
    if not stamped:
        return []
    gaps = [b[0] - a[0] for a, b in zip(stamped, stamped[1:])]
    median_gap = statistics.median(gaps) if gaps else _LRC_DEFAULT_LINE_SECONDS
    if median_gap <= 0:
        median_gap = _LRC_DEFAULT_LINE_SECONDS
    rows = []
    for i, (start, lyric, lineno) in enumerate(stamped):
        end = stamped[i + 1][0] if i + 1 < len(stamped) else start + median_gap
        try:
            rows.append(DatasetRow(track_id, lyric, start, end, default_label))
        except ValidationError as exc:
            raise ValidationError(str(exc), line=lineno) from None
    return rows


def segment_track(rows: Sequence[DatasetRow], track_duration: float) -> TrackSegmentation:
    """Decompose one track into intro, synch, and outro regions.

    Rows must belong to a single track, be sortable by start, and not overlap;
    ``track_duration`` must cover the last row's end.
    """
    if not rows:
        raise ValidationError("cannot segment an empty row list")
    track_ids = {r.id for r in rows}
    if len(track_ids) != 1:
        raise ValidationError(f"rows span multiple tracks: {sorted(track_ids)}")
    ordered = tuple(sorted(rows, key=lambda r: (r.start, r.end)))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise ValidationError(
                f"overlapping rows in track {a.id}: "
                f"[{a.start}, {a.end}] {a.text!r} and [{b.start}, {b.end}] {b.text!r}"
            )
    last_end = ordered[-1].end
    if track_duration < last_end:
        raise ValidationError(
            f"track_duration {track_duration} is shorter than last row end {last_end}"
        )
    first_start = ordered[0].start
    return TrackSegmentation(
        track_id=ordered[0].id,
        intro=Interval(0.0, first_start),
        synch=Interval(first_start, last_end),
        outro=Interval(last_end, track_duration),
        rows=ordered,
    )


def chunk_segments(seg: TrackSegmentation, max_seconds: float = CHUNK_SECONDS) -> list[Chunk]:
    """Greedy left-to-right chunking of the synch rows.

    A chunk is closed when adding the next row would push its span past
    ``max_seconds`` or the label changes. Every chunk keeps at least one row,
    so a single over-long row becomes one oversize chunk.
    """
    chunks: list[Chunk] = []
    pending: list[DatasetRow] = []

    def close():
        start, end = pending[0].start, pending[-1].end
        chunks.append(
            Chunk(
                track_id=pending[0].id,
                start=start,
                end=end,
                text=" ".join(r.text for r in pending),
                label=pending[0].emotion,
                rows=tuple(pending),
                oversize=end - start > max_seconds,
            )
        )
        pending.clear()

    for row in seg.rows:
        if pending and (
            row.emotion != pending[0].emotion
            or row.end - pending[0].start > max_seconds
        ):
            close()
        pending.append(row)
    if pending:
        close()
    return chunks


def compute_stats(durations: Sequence[float]) -> SegmentStats:
    """Min/max/mean/population-std and linearly interpolated percentiles."""
    if len(durations) == 0:
        raise ValidationError("cannot compute statistics of an empty list")
    d = np.asarray(durations, dtype=np.float64)
    return SegmentStats(
        min=float(d.min()),
        max=float(d.max()),
        mean=float(d.mean()),
        std=float(d.std()),
        perc_70=float(np.percentile(d, 70)),
        perc_90=float(np.percentile(d, 90)),
    )


_REGIONS = ("all", "synch", "intro", "outro")


def region_durations(segmentations: Iterable[TrackSegmentation], which: str) -> list[float]:
    """Duration population for one statistics column.

    ``"all"`` pools every region's length across tracks; the other choices
    select a single region.
    """
    if which not in _REGIONS:
        raise ValueError(f"which must be one of {_REGIONS}, got {which!r}")
    out: list[float] = []
    for seg in segmentations:
        regions = {
            "synch": seg.synch.length,
            "intro": seg.intro.length,
            "outro": seg.outro.length,
        }
        if which == "all":
            out.extend(regions.values())
        else:
            out.append(regions[which])
    return out


def stats_by_region(
    segmentations: Sequence[TrackSegmentation], which: str
) -> SegmentStats:
    return compute_stats(region_durations(segmentations, which))


def class_distribution(rows: Sequence[DatasetRow]) -> dict[EmotionLabel, float]:
    """Percentage of rows per emotion; every label is present in the result."""
    if not rows:
        raise ValidationError("cannot compute a class distribution of zero rows")
    counts = {label: 0 for label in ALL_LABELS}
    for r in rows:
        counts[r.emotion] += 1
    total = len(rows)
    return {label: 100.0 * c / total for label, c in counts.items()}


def group_by_track(rows: Iterable[DatasetRow]) -> dict[int, list[DatasetRow]]:
    grouped: dict[int, list[DatasetRow]] = {}
    for r in rows:
        grouped.setdefault(r.id, []).append(r)
    return grouped


def segment_all(
    rows: Iterable[DatasetRow], meta: Mapping[int, TrackMeta]
) -> list[TrackSegmentation]:
    """Segment every track in the dataset using sidecar durations."""
    out = []
    for track_id, track_rows in sorted(group_by_track(rows).items()):
        if track_id not in meta:
            raise ValidationError(f"no metadata for track {track_id}")
        out.append(segment_track(track_rows, meta[track_id].duration_seconds))
    return out


_META_HEADER = ["id", "duration_seconds", "audio_path"]


def read_track_meta(source) -> dict[int, TrackMeta]:
    """Read the track-metadata sidecar CSV ``id,duration_seconds,audio_path``."""
    reader = csv.reader(io.StringIO(_decode(source)))
    meta: dict[int, TrackMeta] = {}
    header = None
    for record in reader:
        if header is None:
            header = [h.strip() for h in record]
            if header != _META_HEADER:
                raise ValidationError(
                    f"expected header {','.join(_META_HEADER)!r}, got {','.join(header)!r}",
                    line=1,
                )
            continue
        if not record or (len(record) == 1 and not record[0].strip()):
            continue
        if len(record) != 3:
            raise ValidationError(
                f"expected 3 fields, got {len(record)}", line=reader.line_num
            )
        try:
            track_id = int(record[0])
            duration = float(record[1])
        except ValueError as exc:
            raise ValidationError(f"malformed record: {exc}", line=reader.line_num) from None
        if duration <= 0:
            raise ValidationError(
                f"duration must be positive, got {duration}", line=reader.line_num
            )
        if track_id in meta:
            raise ValidationError(f"duplicate track id {track_id}", line=reader.line_num)
        meta[track_id] = TrackMeta(track_id, duration, record[2])
    if header is None:
        raise ValidationError("empty metadata CSV: missing header", line=1)
    return meta


def track_meta_to_csv(meta: Iterable[TrackMeta]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_META_HEADER)
    for m in meta:
        writer.writerow([m.id, repr(m.duration_seconds), m.audio_path])
    return out.getvalue()
