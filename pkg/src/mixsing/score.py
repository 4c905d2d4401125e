"""Score input: parsing, Hangul decomposition and frame alignment.

A score is an ordered list of monophonic note events.  ``align_to_frames``
stretches it into two frame-rate id sequences (pitch and phoneme) that line up
with mel-spectrogram frames.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AlignmentError, FormatError, InputError, ParameterError, RangeError, VocabError

SAMPLE_RATE = 16000
HOP = 200

REST = "R"
SILENCE = -1

HANGUL_BASE = 0xAC00
HANGUL_LAST = 0xD7A3
N_MEDIAL = 21
N_FINAL = 28  # includes the empty final

INITIALS = "ㄱㄲㄴㄷㄸㄹㅁㅂㅃㅅㅆㅇㅈㅉㅊㅋㅌㅍㅎ"
MEDIALS = "ㅏㅐㅑㅒㅓㅔㅕㅖㅗㅘㅙㅚㅛㅜㅝㅞㅟㅠㅡㅢㅣ"
FINALS = "ㄱㄲㄳㄴㄵㄶㄷㄹㄺㄻㄼㄽㄾㄿㅀㅁㅂㅄㅅㅆㅇㅈㅊㅋㅌㅍㅎ"  # final index 1..27


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    start_s: float
    end_s: float
    syllable: str

    @property
    def is_rest(self) -> bool:
        return self.syllable == REST


@dataclass
class Score:
    notes: list[NoteEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.notes)

    @property
    def end_s(self) -> float:
        return self.notes[-1].end_s if self.notes else 0.0


@dataclass(frozen=True)
class PhonemeTriple:
    onset: int
    nucleus: int
    coda: int | None


@dataclass
class Vocab:
    """Phoneme and pitch id tables.

    Phoneme ids: PAD, REST, then 19 initials, 21 medials and 27 finals.
    Pitch ids: 0 is silence, 1..24 are MIDI notes ``base_note``..``base_note+23``.
    """

    base_note: int = 55
    n_notes: int = 24

    PAD: int = 0
    REST: int = 1
    ONSET0: int = 2
    NUCLEUS0: int = 2 + len(INITIALS)
    CODA0: int = 2 + len(INITIALS) + len(MEDIALS)

    @property
    def phoneme_size(self) -> int:
        return self.CODA0 + len(FINALS)

    @property
    def pitch_size(self) -> int:
        return self.n_notes + 1

    @property
    def silence(self) -> int:
        return 0

    def pitch_id(self, midi: int) -> int:
        if midi == SILENCE:
            return self.silence
        if not self.base_note <= midi < self.base_note + self.n_notes:
            raise RangeError(
                f"pitch {midi} outside vocabulary {self.base_note}..{self.base_note + self.n_notes - 1}"
            )
        return midi - self.base_note + 1

    def midi_of(self, pitch_id: int) -> int:
        if pitch_id == self.silence:
            return SILENCE
        if not 1 <= pitch_id <= self.n_notes:
            raise VocabError(f"pitch id {pitch_id} out of range")
        return self.base_note + pitch_id - 1

    def symbol(self, phoneme_id: int) -> str:
        if phoneme_id == self.PAD:
            return "<pad>"
        if phoneme_id == self.REST:
            return "<rest>"
        if self.ONSET0 <= phoneme_id < self.NUCLEUS0:
            return INITIALS[phoneme_id - self.ONSET0]
        if self.NUCLEUS0 <= phoneme_id < self.CODA0:
            return MEDIALS[phoneme_id - self.NUCLEUS0]
        if self.CODA0 <= phoneme_id < self.phoneme_size:
            return FINALS[phoneme_id - self.CODA0]
        raise VocabError(f"phoneme id {phoneme_id} out of range")

    def role(self, phoneme_id: int) -> str:
        """One of ``pad``, ``rest``, ``onset``, ``nucleus``, ``coda``."""
        if phoneme_id == self.PAD:
            return "pad"
        if phoneme_id == self.REST:
            return "rest"
        if phoneme_id < self.NUCLEUS0:
            return "onset"
        if phoneme_id < self.CODA0:
            return "nucleus"
        if phoneme_id < self.phoneme_size:
            return "coda"
        raise VocabError(f"phoneme id {phoneme_id} out of range")


DEFAULT_VOCAB = Vocab()


def is_hangul_syllable(ch: str) -> bool:
    return len(ch) == 1 and HANGUL_BASE <= ord(ch) <= HANGUL_LAST


def decompose_hangul(syllable: str, vocab: Vocab = DEFAULT_VOCAB) -> PhonemeTriple:
    if not is_hangul_syllable(syllable):
        raise InputError(f"{syllable!r} is not a precomposed Hangul syllable")
    offset = ord(syllable) - HANGUL_BASE
    initial, rem = divmod(offset, N_MEDIAL * N_FINAL)
    medial, final = divmod(rem, N_FINAL)
    coda = vocab.CODA0 + final - 1 if final else None
    return PhonemeTriple(vocab.ONSET0 + initial, vocab.NUCLEUS0 + medial, coda)


def jamo_of(triple: PhonemeTriple, vocab: Vocab = DEFAULT_VOCAB) -> tuple[str, str, str | None]:
    coda = vocab.symbol(triple.coda) if triple.coda is not None else None
    return vocab.symbol(triple.onset), vocab.symbol(triple.nucleus), coda


# --------------------------------------------------------------------------
# JSON scores


def _validate(notes: list[NoteEvent]) -> Score:
    notes = sorted(notes, key=lambda n: n.start_s)
    for n in notes:
        if not (math.isfinite(n.start_s) and math.isfinite(n.end_s)) or n.start_s < 0:
            raise FormatError(f"bad note times {n.start_s}..{n.end_s}")
        if n.end_s <= n.start_s:
            raise FormatError(f"note ends before it starts: {n}")
        if n.is_rest:
            if n.pitch != SILENCE:
                raise FormatError(f"rest must carry pitch {SILENCE}, got {n.pitch}")
        else:
            if not is_hangul_syllable(n.syllable):
                raise FormatError(f"syllable {n.syllable!r} is not Hangul")
            if not 0 <= n.pitch <= 127:
                raise FormatError(f"pitch {n.pitch} is not a MIDI note number")
    for prev, cur in zip(notes, notes[1:]):
        if cur.start_s < prev.end_s:
            raise FormatError(f"overlapping notes at {cur.start_s:.3f}s")
    return Score(notes)


def parse_score_json(data: bytes | str) -> Score:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid score JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("notes"), list):
        raise FormatError('score JSON must be an object with a "notes" list')
    notes = []
    for i, raw in enumerate(doc["notes"]):
        try:
            pitch = raw["pitch"]
            if isinstance(pitch, bool) or not isinstance(pitch, int):
                raise TypeError("pitch must be an integer")
            notes.append(
                NoteEvent(int(pitch), float(raw["start_s"]), float(raw["end_s"]), str(raw["syllable"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"note {i}: {exc}") from exc
    return _validate(notes)


def serialize_score_json(score: Score) -> str:
    notes = [
        {"pitch": n.pitch, "start_s": n.start_s, "end_s": n.end_s, "syllable": n.syllable}
        for n in score.notes
    ]
    return json.dumps({"notes": notes}, ensure_ascii=False)


# --------------------------------------------------------------------------
# Standard MIDI files


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise FormatError("truncated variable-length quantity")
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise FormatError("variable-length quantity longer than 4 bytes")


def _chunks(data: bytes):
    pos = 0
    while pos + 8 <= len(data):
        kind = data[pos : pos + 4]
        (size,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) != size:
            raise FormatError(f"truncated {kind!r} chunk")
        yield kind, body
        pos += 8 + size


def _track_events(body: bytes):
    """Yield ``(abs_tick, kind, a, b)`` for note and tempo events."""
    pos = 0
    tick = 0
    status = None
    while pos < len(body):
        delta, pos = _read_vlq(body, pos)
        tick += delta
        if pos >= len(body):
            raise FormatError("truncated track event")
        b = body[pos]
        if b == 0xFF:
            if pos + 1 >= len(body):
                raise FormatError("truncated meta event")
            meta = body[pos + 1]
            length, pos = _read_vlq(body, pos + 2)
            payload = body[pos : pos + length]
            pos += length
            if meta == 0x51:
                if length != 3:
                    raise FormatError("bad tempo event")
                yield tick, "tempo", int.from_bytes(payload, "big"), 0
            elif meta == 0x2F:
                return
            continue
        if b in (0xF0, 0xF7):
            length, pos = _read_vlq(body, pos + 1)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise FormatError("running status without a prior status byte")
        kind = status & 0xF0
        nbytes = 1 if kind in (0xC0, 0xD0) else 2
        args = body[pos : pos + nbytes]
        if len(args) != nbytes:
            raise FormatError("truncated channel event")
        pos += nbytes
        if kind == 0x90 and args[1] > 0:
            yield tick, "on", args[0], args[1]
        elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
            yield tick, "off", args[0], 0


class _TempoMap:
    def __init__(self, changes: list[tuple[int, int]], ppq: int):
        self.ppq = ppq
        # (start tick, tempo in us per quarter note, seconds at start tick)
        self.segments: list[tuple[int, int, float]] = [(0, 500000, 0.0)]
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            start, prev_tempo, base = self.segments[-1]
            if tick == start:
                self.segments[-1] = (start, tempo, base)
            else:
                self.segments.append((tick, tempo, base + self._span(tick - start, prev_tempo)))

    def _span(self, ticks: int, tempo: int) -> float:
        return ticks * tempo / (self.ppq * 1e6)

    def seconds(self, tick: int) -> float:
        start, tempo, base = next(seg for seg in reversed(self.segments) if seg[0] <= tick)
        return base + self._span(tick - start, tempo)


def parse_smf(data: bytes, lyrics: Sequence[str]) -> Score:
    """Read a format 0/1 Standard MIDI File, pairing the i-th note with ``lyrics[i]``."""
    chunks = list(_chunks(data))
    if not chunks or chunks[0][0] != b"MThd":
        raise FormatError("missing MThd header")
    header = chunks[0][1]
    if len(header) < 6:
        raise FormatError("short MThd header")
    fmt, _ntracks, division = struct.unpack(">HHH", header[:6])
    if fmt == 2:
        raise FormatError("SMF format 2 is not supported")
    if fmt not in (0, 1):
        raise FormatError(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise FormatError("SMPTE time division is not supported")
    ppq = division

    events = []
    for order, (kind, body) in enumerate(c for c in chunks[1:] if c[0] == b"MTrk"):
        for seq, ev in enumerate(_track_events(body)):
            events.append((ev[0], order, seq, ev))
    tempo = _TempoMap([(ev[0], ev[2]) for _, _, _, ev in events if ev[1] == "tempo"], ppq)

    # offs before ons at equal ticks so back-to-back notes are not overlaps
    rank = {"off": 0, "tempo": 1, "on": 2}
    events.sort(key=lambda e: (e[0], rank[e[3][1]], e[1], e[2]))
    spans: list[tuple[int, int, int]] = []
    active: tuple[int, int] | None = None
    for tick, _, _, (_, kind, note, _vel) in events:
        if kind == "on":
            if active is not None:
                raise FormatError(f"overlapping notes at tick {tick}")
            active = (note, tick)
        elif kind == "off" and active is not None and active[0] == note:
            spans.append((active[0], active[1], tick))
            active = None
    if active is not None:
        raise FormatError("note without a matching note-off")
    if len(spans) != len(lyrics):
        raise AlignmentError(f"{len(spans)} notes but {len(lyrics)} lyric syllables")

    notes = [
        NoteEvent(pitch, tempo.seconds(on), tempo.seconds(off), syl)
        for (pitch, on, off), syl in zip(spans, lyrics)
    ]
    return _validate(notes)


# --------------------------------------------------------------------------
# frame alignment


@dataclass
class FrameAlignment:
    frames: int
    pitch_ids: np.ndarray
    phoneme_ids: np.ndarray
    note_index: np.ndarray  # index into score.notes, -1 for implicit rests

    def __post_init__(self):
        if not (len(self.pitch_ids) == len(self.phoneme_ids) == len(self.note_index) == self.frames):
            raise AlignmentError("alignment sequences must all have length `frames`")


def time_to_frame(t: float, sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> int:
    if t < 0:
        raise ParameterError("time must be non-negative")
    return int(math.floor(t * sample_rate / hop + 0.5))


def allocate(n: int, k: int, has_coda: bool) -> tuple[int, int, int]:
    """Split an ``n``-frame note into (onset, nucleus, coda) frame counts.

    Consonants get ``k`` frames each, clamped so the nucleus keeps at least
    one frame.
    """
    if n < 1:
        raise ParameterError("a note needs at least one frame")
    if k < 0:
        raise ParameterError("k must be non-negative")
    k_eff = min(k, (n - 1) // (2 if has_coda else 1))
    coda = k_eff if has_coda else 0
    return k_eff, n - k_eff - coda, coda


def note_spans(score: Score, sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> list[tuple[int, int]]:
    """Frame span ``[start, end)`` for every event, after rounding."""
    spans = []
    voiced_end = 0  # frames before this may be taken from a rest
    for n in score.notes:
        s = time_to_frame(n.start_s, sample_rate, hop)
        e = time_to_frame(n.end_s, sample_rate, hop)
        if not n.is_rest:
            if e == s:
                if s <= voiced_end:
                    raise AlignmentError(f"note at {n.start_s:.4f}s rounds to zero frames")
                s -= 1
            voiced_end = e
        spans.append((s, e))
    return spans


def align_to_frames(
    score: Score,
    k: int = 3,
    total_frames: int | None = None,
    vocab: Vocab = DEFAULT_VOCAB,
    sample_rate: int = SAMPLE_RATE,
    hop: int = HOP,
) -> FrameAlignment:
    if k < 0:
        raise ParameterError("k must be non-negative")
    spans = note_spans(score, sample_rate, hop)
    last = max((e for _, e in spans), default=0)
    frames = last if total_frames is None else total_frames
    if frames < last:
        raise RangeError(f"total_frames={frames} is shorter than the score ({last} frames)")

    pitch = np.full(frames, vocab.silence, dtype=np.int32)
    phon = np.full(frames, vocab.REST, dtype=np.int32)
    owner = np.full(frames, -1, dtype=np.int32)
    for i, (note, (s, e)) in enumerate(zip(score.notes, spans)):
        if e <= s:
            continue
        owner[s:e] = i
        if note.is_rest:
            continue
        pitch[s:e] = vocab.pitch_id(note.pitch)
        triple = decompose_hangul(note.syllable, vocab)
        n_on, n_nuc, n_coda = allocate(e - s, k, triple.coda is not None)
        phon[s : s + n_on] = triple.onset
        phon[s + n_on : s + n_on + n_nuc] = triple.nucleus
        if n_coda:
            phon[e - n_coda : e] = triple.coda
    return FrameAlignment(frames, pitch, phon, owner)
