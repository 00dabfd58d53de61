"""Synthetic paired audio-video event data with exact onset ground truth,
exactly invertible toy encoders, and a streaming dataset container.

Events are audible impulses with decay and visible bright discs that start at
the same media time, so temporal alignment of a generated sample can be scored
against the ground-truth timestamps with no learned components involved.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import torch

from .backbone import AUDIO, TokenSequence, patchify_video, unpatchify_video

MAGIC = b"AVDS"
VERSION = 1


class DatasetFormatError(Exception):
    """Raised on malformed or truncated dataset containers."""


@dataclass
class DataGenConfig:
    duration: float = 5.16
    fps: float = 6.0
    height: int = 12
    width: int = 16
    channels: int = 1
    audio_rate: float = 24.0     # audio tokens per second (eta_a)
    audio_channels: int = 4      # raw samples folded into one token
    n_events_min: int = 1
    n_events_max: int = 4
    event_classes: int = 2
    min_event_gap: float = 0.5   # >= 2 video frames at 6 fps, keeps onsets unambiguous
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.fps <= 0 or self.audio_rate <= 0:
            raise ValueError("duration and rates must be positive")
        if self.n_events_min < 0 or self.n_events_max < self.n_events_min:
            raise ValueError("bad event count range")

    @property
    def n_frames(self) -> int:
        return round(self.duration * self.fps)

    @property
    def n_audio_tokens(self) -> int:
        return round(self.duration * self.audio_rate)

    @property
    def raw_rate(self) -> float:
        """Raw waveform samples per second."""
        return self.audio_rate * self.audio_channels

    @property
    def n_audio_samples(self) -> int:
        return self.n_audio_tokens * self.audio_channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class AVSample:
    audio: np.ndarray                 # [n_audio_samples] float32, unit amplitude
    video: np.ndarray                 # [F, H, W, C] float32 in [0, 1]
    events: list[float]
    duration: float
    audio_prompt: Optional[list[int]] = None
    video_prompt: Optional[list[int]] = None

    def __post_init__(self):
        for t in self.events:
            if not 0.0 <= t < self.duration:
                raise ValueError(f"event time {t} outside [0, {self.duration})")


# Per-class event signatures. Audio: impulse with exponential decay at a
# class-specific rate. Video: bright disc at a class-specific center, visible
# for two frames.
_AUDIO_DECAY = (60.0, 25.0)
_DISC_CENTER = ((0.5, 0.25), (0.5, 0.75))   # (row, col) fractions
_DISC_RADIUS = 2.5
_VIDEO_BACKGROUND = 0.1
_VIDEO_FLASH = (1.0, 0.5)                   # intensity over the two event frames


def _draw_event_times(cfg: DataGenConfig, rng: np.random.Generator) -> list[float]:
    n = int(rng.integers(cfg.n_events_min, cfg.n_events_max + 1))
    times: list[float] = []
    # rejection sampling with the minimum gap; margin keeps the 2-frame flash
    # inside the clip
    hi = cfg.duration - 2.0 / cfg.fps
    for _ in range(1000):
        if len(times) == n:
            break
        t = float(rng.uniform(0.0, hi))
        if all(abs(t - u) >= cfg.min_event_gap for u in times):
            times.append(t)
    return sorted(times)


def gen_sample(cfg: DataGenConfig, rng: np.random.Generator) -> AVSample:
    """Deterministic per generator state; audio and video signatures start at
    the exact same media times."""
    cls = int(rng.integers(cfg.event_classes))
    events = _draw_event_times(cfg, rng)

    audio = np.zeros(cfg.n_audio_samples, dtype=np.float32)
    decay = _AUDIO_DECAY[cls % len(_AUDIO_DECAY)]
    tgrid = np.arange(cfg.n_audio_samples) / cfg.raw_rate
    for t in events:
        idx = round(t * cfg.raw_rate)
        if idx >= cfg.n_audio_samples:
            continue
        tail = tgrid[idx:] - tgrid[idx]
        audio[idx:] = np.maximum(audio[idx:], np.exp(-decay * tail).astype(np.float32))

    video = np.full((cfg.n_frames, cfg.height, cfg.width, cfg.channels),
                    _VIDEO_BACKGROUND, dtype=np.float32)
    cy = _DISC_CENTER[cls % len(_DISC_CENTER)][0] * cfg.height
    cx = _DISC_CENTER[cls % len(_DISC_CENTER)][1] * cfg.width
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width]
    disc = ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= _DISC_RADIUS ** 2
    for t in events:
        frame = round(t * cfg.fps)
        for k, intensity in enumerate(_VIDEO_FLASH):
            if frame + k < cfg.n_frames:
                v = video[frame + k, :, :, 0]
                v[disc] = np.maximum(v[disc], intensity)

    return AVSample(
        audio=audio, video=video, events=events, duration=cfg.duration,
        audio_prompt=[cls + 1], video_prompt=[cls + 1],
    )


# ---------------------------------------------------------------------------
# Toy encoders (exactly invertible)
# ---------------------------------------------------------------------------


def encode_audio(waveform: np.ndarray, cfg: DataGenConfig) -> TokenSequence:
    """Frame the waveform into non-overlapping windows stacked into channels.

    Pure reshape: decode inverts bit-exactly. Lengths not divisible by the
    window are right-padded with zeros; the pad is recorded on the sequence.
    """
    w = cfg.audio_channels
    n = len(waveform)
    pad = (-n) % w
    if pad:
        waveform = np.concatenate([waveform, np.zeros(pad, dtype=waveform.dtype)])
    tokens = torch.from_numpy(np.ascontiguousarray(waveform)).reshape(-1, w)
    return TokenSequence(data=tokens, modality=AUDIO, eta=cfg.audio_rate, pad=pad)


def decode_audio(tokens: TokenSequence) -> np.ndarray:
    wave = tokens.data.detach().cpu().numpy().reshape(-1)
    if tokens.pad:
        wave = wave[: -tokens.pad]
    return wave


def encode_video(frames: np.ndarray, cfg: DataGenConfig, patch: int = 2) -> TokenSequence:
    return patchify_video(torch.from_numpy(np.ascontiguousarray(frames)), patch, cfg.fps)


def decode_video(tokens: TokenSequence, cfg: DataGenConfig, patch: int = 2) -> np.ndarray:
    return unpatchify_video(tokens, patch, cfg.channels).detach().cpu().numpy()


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


def _write_record(fh, sample: AVSample) -> None:
    meta = {
        "audio_len": len(sample.audio),
        "video_shape": list(sample.video.shape),
        "events": sample.events,
        "duration": sample.duration,
        "audio_prompt": sample.audio_prompt,
        "video_prompt": sample.video_prompt,
    }
    meta_b = json.dumps(meta).encode()
    audio_b = sample.audio.astype("<f4").tobytes()
    video_b = sample.video.astype("<f4").tobytes()
    body = struct.pack("<I", len(meta_b)) + meta_b + audio_b + video_b
    fh.write(struct.pack("<I", len(body)))
    fh.write(body)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _parse_record(body: bytes) -> AVSample:
    if len(body) < 4:
        raise DatasetFormatError("record too short")
    (meta_len,) = struct.unpack("<I", body[:4])
    if 4 + meta_len > len(body):
        raise DatasetFormatError("corrupted record: metadata length exceeds record")
    meta = json.loads(body[4:4 + meta_len])
    audio_len = int(meta["audio_len"])
    video_shape = tuple(meta["video_shape"])
    n_video = int(np.prod(video_shape))
    expected = 4 + meta_len + 4 * (audio_len + n_video)
    if expected != len(body):
        raise DatasetFormatError(
            f"corrupted record: payload is {len(body)} bytes, expected {expected}"
        )
    off = 4 + meta_len
    audio = np.frombuffer(body, dtype="<f4", count=audio_len, offset=off).copy()
    video = np.frombuffer(body, dtype="<f4", count=n_video,
                          offset=off + 4 * audio_len).copy().reshape(video_shape)
    return AVSample(
        audio=audio, video=video, events=list(meta["events"]),
        duration=float(meta["duration"]),
        audio_prompt=meta["audio_prompt"], video_prompt=meta["video_prompt"],
    )


def write_dataset(path, samples, cfg: DataGenConfig) -> None:
    samples = list(samples)
    header = json.dumps({"config": cfg.to_dict(), "n_samples": len(samples)}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for s in samples:
            _write_record(fh, s)
    with open(str(path) + ".manifest.txt", "w") as fh:
        fh.write(f"config_digest: {cfg.digest()}\n")
        fh.write(f"seed: {cfg.seed}\n")
        fh.write(f"n_samples: {len(samples)}\n")


def read_header(path) -> tuple[DataGenConfig, int]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise DatasetFormatError("not an avflow dataset file")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        header = json.loads(_read_exact(fh, header_len))
    return DataGenConfig(**header["config"]), int(header["n_samples"])


def iter_dataset(path) -> Iterator[AVSample]:
    """Stream samples one record at a time; never holds the whole file."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise DatasetFormatError("not an avflow dataset file")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        json.loads(_read_exact(fh, header_len))
        while True:
            lead = fh.read(4)
            if not lead:
                return
            if len(lead) != 4:
                raise DatasetFormatError("truncated record length")
            (rec_len,) = struct.unpack("<I", lead)
            yield _parse_record(_read_exact(fh, rec_len))


def read_dataset(path) -> tuple[DataGenConfig, list[AVSample]]:
    cfg, n = read_header(path)
    samples = list(iter_dataset(path))
    if len(samples) != n:
        raise DatasetFormatError(f"header promises {n} samples, found {len(samples)}")
    return cfg, samples


def generate_dataset(cfg: DataGenConfig, n_samples: int) -> list[AVSample]:
    """Per-sample derived seeds, so any subset can be regenerated independently."""
    out = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        out.append(gen_sample(cfg, rng))
    return out
