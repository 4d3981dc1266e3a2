"""Waveform container, WAV I/O and synthetic mixture generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import WavFormatError

SAMPLE_RATE = 16000

__all__ = [
    "SAMPLE_RATE", "Waveform", "MixtureSpec", "read_wav", "write_wav",
    "mix_at_snr", "measured_snr_db", "synth_speech", "synth_noise",
    "make_mixture",
]


@dataclass(frozen=True)
class Waveform:
    """Mono real-valued signal.

    ``samples`` is stored as a float64 1-D array in nominal range [-1, 1].
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains NaN or Inf samples")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class MixtureSpec:
    snr_db: float
    seed: int
    duration_s: float
    noise: str = "white"

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or IEEE-float32 WAV file.

    PCM16 samples are scaled by 1/32768, so full-scale positive maps to
    32767/32768.
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as exc:
        raise WavFormatError(f"{path}: corrupt or unsupported WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    """Write ``w`` as PCM16 (rounded, clipped) or float32."""
    x = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    if encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    scipy.io.wavfile.write(path, w.sample_rate, data)


def measured_snr_db(speech, noise) -> float:
    s = np.asarray(getattr(speech, "samples", speech), dtype=np.float64)
    n = np.asarray(getattr(noise, "samples", noise), dtype=np.float64)
    return float(10.0 * np.log10(np.dot(s, s) / np.dot(n, n)))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float):
    """Scale ``noise`` to the requested full-utterance SNR and add it.

    Returns ``(noisy, scaled_noise)``.
    """
    if len(speech) != len(noise):
        raise ValueError(f"length mismatch: {len(speech)} vs {len(noise)}")
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("sample rate mismatch")
    es, en = speech.energy(), noise.energy()
    if es <= 0.0:
        raise ValueError("speech has zero energy")
    if en <= 0.0:
        raise ValueError("noise has zero energy")
    gain = np.sqrt(es / (en * 10.0 ** (snr_db / 10.0)))
    scaled = gain * noise.samples
    return (Waveform(speech.samples + scaled, speech.sample_rate),
            Waveform(scaled, noise.sample_rate))


def _formant_envelope(freqs, formants, bandwidths):
    env = np.zeros_like(freqs)
    for fc, bw in zip(formants, bandwidths):
        env += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    return env


def synth_speech(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE,
                 lead_silence_s: float = 0.1, rms: float = 0.1,
                 pause_s=(0.02, 0.12), voiced_prob: float = 0.8) -> Waveform:
    """Speech-like test signal: voiced syllables with gliding pitch and
    formant-shaped harmonics, interleaved with fricative bursts and pauses.

    Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    n_total = int(round(duration_s * sample_rate))
    out = np.zeros(n_total)
    pos = int(round(lead_silence_s * sample_rate))
    nyq = sample_rate / 2
    while pos < n_total:
        seg = int(rng.uniform(0.08, 0.25) * sample_rate)
        seg = min(seg, n_total - pos)
        if seg < 16:
            break
        t = np.arange(seg) / sample_rate
        env = np.sin(np.pi * np.arange(seg) / seg) ** 0.6
        if rng.random() < voiced_prob:
            f0 = rng.uniform(90.0, 220.0) * (1.0 + rng.uniform(-0.2, 0.2) * t / t[-1])
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate
            formants = [rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2300, 3500)]
            bws = [rng.uniform(60, 150), rng.uniform(80, 200), rng.uniform(120, 250)]
            sig = np.zeros(seg)
            for h in range(1, int(4000 / f0.max()) + 1):
                amp = _formant_envelope(np.array([h * f0.mean()]), formants, bws)[0]
                sig += amp / np.sqrt(h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        else:
            lo = rng.uniform(2000, 4000)
            sos = scipy.signal.butter(4, [lo, min(lo + 3000, nyq * 0.95)], btype="band",
                                      fs=sample_rate, output="sos")
            sig = scipy.signal.sosfilt(sos, rng.standard_normal(seg)) * 0.5
        out[pos:pos + seg] += env * sig * rng.uniform(0.5, 1.0)
        pos += seg + int(rng.uniform(*pause_s) * sample_rate)
    active = out[out != 0.0]
    if active.size:
        out *= rms / np.sqrt(np.mean(active ** 2))
    return Waveform(out, sample_rate)


def synth_noise(kind: str, duration_s: float, seed: int,
                sample_rate: int = SAMPLE_RATE, n_tones: int = 6) -> Waveform:
    """Seeded noise: ``white`` Gaussian, ``tonal`` sinusoid bed, or ``mixed``."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if kind == "white":
        return Waveform(rng.standard_normal(n) * 0.1, sample_rate)
    if kind in ("tonal", "mixed"):
        bed = np.zeros(n)
        for _ in range(n_tones):
            f = rng.uniform(100.0, 6000.0)
            bed += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        bed *= 0.1 / np.sqrt(np.mean(bed ** 2))
        if kind == "mixed":
            bed += rng.standard_normal(n) * 0.1
        return Waveform(bed, sample_rate)
    raise ValueError(f"unknown noise kind {kind!r}")


def make_mixture(spec: MixtureSpec, sample_rate: int = SAMPLE_RATE):
    """Build ``(noisy, speech, scaled_noise)`` for a mixture spec."""
    speech = synth_speech(spec.duration_s, spec.seed, sample_rate)
    noise = synth_noise(spec.noise, spec.duration_s, spec.seed + 7919, sample_rate)
    noisy, scaled = mix_at_snr(speech, noise, spec.snr_db)
    return noisy, speech, scaled
