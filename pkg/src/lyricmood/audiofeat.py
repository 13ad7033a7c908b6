"""Audio decoding, resampling, log-mel spectrograms, and source separation.

The feature pipeline is WAV -> mono 12 kHz -> (separator) -> ~30 s crop ->
power STFT (512/256, Hann, no padding) -> 128 HTK-mel bands -> log10.
Separation is pluggable: identity pass-through, a band-pass spectral-mask
baseline, or pre-separated vocal stems loaded from disk.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import FormatError, ValidationError

TARGET_SAMPLE_RATE = 12_000
N_MELS = 128
N_DFT = 512
N_HOP = 256
LOG_FLOOR = 1e-10
CLIP_SECONDS = 30.0


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValidationError("samples must be one-dimensional mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("samples contain non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """128 x T log-power mel feature with its extraction parameters."""

    values: np.ndarray
    n_mels: int = N_MELS
    n_dft: int = N_DFT
    n_hop: int = N_HOP
    sample_rate: int = TARGET_SAMPLE_RATE

    @property
    def frame_count(self) -> int:
        return self.values.shape[1]


def decode_wav(source) -> AudioClip:
    """Decode RIFF/WAVE PCM 16-bit or IEEE float 32-bit, 1-2 channels, to mono.

    16-bit samples are scaled by 1/32768; stereo channels are averaged.
    """
    data = source if isinstance(source, bytes) else source.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")
    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"truncated {chunk_id.decode('latin1')!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            raw = body
        pos += 8 + size + (size & 1)
    if fmt is None or raw is None:
        raise FormatError("missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise FormatError(f"unsupported channel count {channels}")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(raw[: len(raw) - len(raw) % 2], dtype="<i2")
        samples = samples.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(raw[: len(raw) - len(raw) % 4], dtype="<f4")
        samples = samples.astype(np.float64)
    else:
        raise FormatError(
            f"unsupported codec: format tag {audio_format}, {bits}-bit"
        )
    if channels == 2:
        samples = samples[: len(samples) - len(samples) % 2]
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples, sample_rate)


def encode_wav(clip: AudioClip, fmt: str = "float32") -> bytes:
    """Serialize a clip as PCM16 or float32 WAV bytes."""
    if fmt == "float32":
        payload = clip.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    elif fmt == "pcm16":
        scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        payload = scaled.astype("<i2").tobytes()
        audio_format, bits = 1, 16
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        clip.sample_rate,
        clip.sample_rate * block_align,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    return header + payload


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, clip: AudioClip, fmt: str = "float32") -> None:
    Path(path).write_bytes(encode_wav(clip, fmt))


def resample(clip: AudioClip, target_sr: int = TARGET_SAMPLE_RATE) -> AudioClip:
    """Kaiser-windowed polyphase resampling; 12 kHz input passes through."""
    if clip.sample_rate < 8000:
        raise ValidationError(f"sample rate {clip.sample_rate} below supported 8 kHz")
    if clip.sample_rate == target_sr:
        return clip
    g = gcd(clip.sample_rate, target_sr)
    up, down = target_sr // g, clip.sample_rate // g
    out = resample_poly(clip.samples, up, down, window=("kaiser", 5.0))
    n_out = round(len(clip.samples) * target_sr / clip.sample_rate)
    if len(out) < n_out:
        out = np.concatenate([out, np.zeros(n_out - len(out))])
    return AudioClip(out[:n_out], target_sr)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, n_dft: int = N_DFT, n_hop: int = N_HOP) -> int:
    return (n_samples - n_dft) // n_hop + 1


def stft_power(clip: AudioClip, n_dft: int = N_DFT, n_hop: int = N_HOP) -> np.ndarray:
    """Magnitude-squared one-sided DFT of Hann-windowed frames, no padding.

    Returns a (n_dft // 2 + 1) x T matrix with T = floor((N - n_dft)/n_hop) + 1.
    """
    x = clip.samples
    if len(x) < n_dft:
        raise ValidationError(
            f"clip of {len(x)} samples is shorter than one {n_dft}-sample frame"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, n_dft)[::n_hop]
    spectrum = np.fft.rfft(frames * hann_window(n_dft), axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_dft: int = N_DFT,
    sample_rate: int = TARGET_SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular peak-1 filters with HTK-mel-spaced centers, [n_mels, bins]."""
    if f_max is None:
        f_max = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_freqs = np.arange(n_dft // 2 + 1) * sample_rate / n_dft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_freqs - lower) / (center - lower)
    down = (upper - bin_freqs) / (upper - center)
    return np.clip(np.minimum(up, down), 0.0, 1.0)


def mel_band_centers(
    n_mels: int = N_MELS,
    sample_rate: int = TARGET_SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    if f_max is None:
        f_max = sample_rate / 2.0
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def mel_spectrogram(clip: AudioClip) -> MelSpectrogram:
    """Log10 mel-power features of a 12 kHz mono clip."""
    if clip.sample_rate != TARGET_SAMPLE_RATE:
        raise ValidationError(
            f"expected a {TARGET_SAMPLE_RATE} Hz clip, got {clip.sample_rate} Hz"
        )
    power = stft_power(clip)
    mel = mel_filterbank() @ power
    return MelSpectrogram(np.log10(mel + LOG_FLOOR))


class SourceSeparator:
    """Pluggable vocal-extraction stage; outputs keep length and sample rate."""

    name = "base"

    def apply(
        self,
        clip: AudioClip,
        track_id: int | None = None,
        start_seconds: float = 0.0,
    ) -> AudioClip:
        raise NotImplementedError


class IdentitySeparator(SourceSeparator):
    """Mixture pass-through (no separation)."""

    name = "identity"

    def apply(self, clip, track_id=None, start_seconds=0.0):
        return clip


class SpectralMaskSeparator(SourceSeparator):
    """Soft STFT-domain mask retaining the 200-4000 Hz vocal band."""

    name = "baseline"

    def __init__(
        self,
        low_hz: float = 200.0,
        high_hz: float = 4000.0,
        stop_gain: float = 0.03,
        transition_hz: float = 100.0,
    ):
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.stop_gain = stop_gain
        self.transition_hz = transition_hz

    def _gains(self, n_dft: int, sample_rate: int) -> np.ndarray:
        freqs = np.arange(n_dft // 2 + 1) * sample_rate / n_dft
        tr = self.transition_hz
        rise = np.clip((freqs - (self.low_hz - tr)) / tr, 0.0, 1.0)
        fall = np.clip(((self.high_hz + tr) - freqs) / tr, 0.0, 1.0)
        band = 0.5 - 0.5 * np.cos(np.pi * np.minimum(rise, fall))
        return self.stop_gain + (1.0 - self.stop_gain) * band

    def apply(self, clip, track_id=None, start_seconds=0.0):
        n = len(clip)
        if n < N_DFT:
            return clip
        hop, win = N_HOP, hann_window(N_DFT)
        n_frames = -(-(n - N_DFT) // hop) + 1
        padded = np.zeros((n_frames - 1) * hop + N_DFT)
        padded[:n] = clip.samples
        frames = np.lib.stride_tricks.sliding_window_view(padded, N_DFT)[::hop]
        spectrum = np.fft.rfft(frames * win, axis=1)
        spectrum *= self._gains(N_DFT, clip.sample_rate)
        pieces = np.fft.irfft(spectrum, n=N_DFT, axis=1)
        out = np.zeros_like(padded)
        envelope = np.zeros_like(padded)
        for i in range(n_frames):
            sl = slice(i * hop, i * hop + N_DFT)
            out[sl] += pieces[i]
            envelope[sl] += win
        out /= np.maximum(envelope, 1e-3)
        return AudioClip(out[:n], clip.sample_rate)


class ExternalStemsSeparator(SourceSeparator):
    """Loads pre-separated vocal stems ``<stems_dir>/<track_id>.vocals.wav``."""

    name = "stems"

    def __init__(self, stems_dir):
        self.stems_dir = Path(stems_dir)

    def apply(self, clip, track_id=None, start_seconds=0.0):
        if track_id is None:
            raise ValidationError("stem separation needs the clip's track id")
        path = self.stems_dir / f"{track_id}.vocals.wav"
        if not path.exists():
            raise FileNotFoundError(
                f"vocal stem for track {track_id} not found at {path}"
            )
        stem = read_wav(path)
        if stem.sample_rate != clip.sample_rate:
            stem = resample(stem, clip.sample_rate)
        first = round(start_seconds * clip.sample_rate)
        piece = stem.samples[first : first + len(clip)]
        if len(piece) < len(clip):
            piece = np.concatenate([piece, np.zeros(len(clip) - len(piece))])
        return AudioClip(piece, clip.sample_rate)


def make_separator(strategy: str, stems_dir=None) -> SourceSeparator:
    if strategy == "identity":
        return IdentitySeparator()
    if strategy == "baseline":
        return SpectralMaskSeparator()
    if strategy == "stems":
        if stems_dir is None:
            raise ValueError("the stems strategy needs a stems directory")
        return ExternalStemsSeparator(stems_dir)
    raise ValueError(f"unknown separator strategy {strategy!r}")


def separate(
    clip: AudioClip,
    separator: SourceSeparator,
    track_id: int | None = None,
    start_seconds: float = 0.0,
) -> AudioClip:
    out = separator.apply(clip, track_id=track_id, start_seconds=start_seconds)
    if len(out) != len(clip) or out.sample_rate != clip.sample_rate:
        raise ValidationError(
            f"separator {separator.name!r} changed length or rate"
        )
    return out


def crop_or_pad(clip: AudioClip, seconds: float = CLIP_SECONDS) -> AudioClip:
    """Head-aligned truncation or tail zero-padding to an exact length."""
    n = round(seconds * clip.sample_rate)
    if len(clip) == n:
        return clip
    if len(clip) > n:
        return AudioClip(clip.samples[:n], clip.sample_rate)
    return AudioClip(
        np.concatenate([clip.samples, np.zeros(n - len(clip))]), clip.sample_rate
    )


_MELS_MAGIC = b"MELS"
_MELS_VERSION = 1


def save_mels(path, mel: MelSpectrogram) -> None:
    """Feature-cache format: magic MELS, u32 version, u32 n_mels, u32 T, f32 LE."""
    n_mels, frames = mel.values.shape
    header = _MELS_MAGIC + struct.pack("<III", _MELS_VERSION, n_mels, frames)
    Path(path).write_bytes(header + mel.values.astype("<f4").tobytes())


def load_mels(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _MELS_MAGIC:
        raise FormatError(f"{path}: not a MELS feature file")
    version, n_mels, frames = struct.unpack_from("<III", data, 4)
    if version != _MELS_VERSION:
        raise FormatError(f"{path}: unsupported MELS version {version}")
    need = 16 + 4 * n_mels * frames
    if len(data) < need:
        raise FormatError(f"{path}: truncated MELS payload")
    values = np.frombuffer(data, dtype="<f4", count=n_mels * frames, offset=16)
    return MelSpectrogram(values.astype(np.float64).reshape(n_mels, frames), n_mels=n_mels)
