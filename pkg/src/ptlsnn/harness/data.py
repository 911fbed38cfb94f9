"""Dataset ingestion (MNIST IDX files) and synthetic two-source mixtures."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


def _read_bytes(path):
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic):
    """Parse an unsigned-byte IDX file; returns a uint8 array of the declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(f"{path}: truncated data ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Images as float32 ``[N, 28, 28]`` in ``[0, 1]`` and int64 labels."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DataFormatError("labels must lie in 0..9")
    return images.astype(np.float32) / np.float32(255.0), labels.astype(np.int64)


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_dir(directory):
    """``{"train": (x, y), "test": (x, y)}`` from the four standard IDX file names."""
    out = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        out[split] = load_mnist_idx(_find(directory, f"{prefix}-images-idx3-ubyte"), _find(directory, f"{prefix}-labels-idx1-ubyte"))
    return out


def default_mnist_dir():
    """``$PTLSNN_MNIST_DIR`` if set, else the bundled 5,000-digit subset."""
    env = os.environ.get("PTLSNN_MNIST_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[3] / "data" / "mnist5k"


def train_val_split(n, val_fraction=0.1, seed=0):
    """Shuffled ``(train_idx, val_idx)`` with ``round(n * val_fraction)`` validation samples."""
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# --------------------------------------------------------------------- STFT


class DenseSTFT:
    """Hann-window STFT of fixed-length signals as explicit real matrices.

    ``analyze`` maps ``(B, n)`` signals to real and imaginary parts of shape
    ``(B, frames * bins)``. ``synthesize`` is the least-squares inverse, so
    masking and resynthesis are plain matrix products with easy adjoints.
    """

    def __init__(self, length=512, frame=64, hop=32):
        self.length, self.frame, self.hop = length, frame, hop
        # half-frame padding at both ends so every sample sees two windows
        starts = np.arange(-(frame - hop), length, hop)
        bins = frame // 2 + 1
        win = np.hanning(frame + 1)[:-1]  # periodic Hann
        k = np.arange(bins)[:, None] * np.arange(frame)[None, :]
        cos = np.cos(2 * np.pi * k / frame) * win
        sin = -np.sin(2 * np.pi * k / frame) * win
        re = np.zeros((len(starts), bins, length))
        im = np.zeros_like(re)
        for f, s in enumerate(starts):
            lo, hi = max(s, 0), min(s + frame, length)
            re[f, :, lo:hi] = cos[:, lo - s : hi - s]
            im[f, :, lo:hi] = sin[:, lo - s : hi - s]
        self.n_frames, self.n_bins = len(starts), bins
        self.A_re = re.reshape(-1, length)
        self.A_im = im.reshape(-1, length)
        pinv = np.linalg.pinv(np.vstack([self.A_re, self.A_im]))
        self.S_re = pinv[:, : self.A_re.shape[0]]
        self.S_im = pinv[:, self.A_re.shape[0] :]

    @property
    def n_coeffs(self):
        return self.n_frames * self.n_bins

    def analyze(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.A_re.T, x @ self.A_im.T

    def synthesize(self, re, im):
        return re @ self.S_re.T + im @ self.S_im.T

    def apply_mask(self, mask, re, im):
        return self.synthesize(mask * re, mask * im)

    def mask_adjoint(self, grad_signal, re, im):
        """Gradient w.r.t. the mask of :meth:`apply_mask` given the gradient w.r.t. its output."""
        return (grad_signal @ self.S_re) * re + (grad_signal @ self.S_im) * im

    def features(self, x):
        """Log-compressed magnitude spectrogram, the separator's input."""
        re, im = self.analyze(x)
        return np.log1p(np.sqrt(re * re + im * im)).astype(np.float32)


# --------------------------------------------------------------------- mixtures


@dataclass
class MixtureSet:
    mixtures: np.ndarray  # (n, length)
    sources: np.ndarray  # (n, 2, length)
    snr_db: np.ndarray  # (n,) requested energy ratio source 1 : source 2

    def __len__(self):
        return len(self.mixtures)


def _band_noise(rng, length, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.fft.rfftfreq(length)  # cycles per sample, 0..0.5
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n=length)


def _harmonic_tone(rng, length, f_lo, f_hi):
    t = np.arange(length)
    f0 = rng.uniform(f_lo, f_lo + 0.04)
    out = np.zeros(length)
    h = 1
    while h * f0 <= f_hi:
        out += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        h += 1
    return out


def _edge_fade(length, n=32):
    w = np.ones(length)
    ramp = np.hanning(2 * n)[:n]
    w[:n], w[-n:] = ramp, ramp[::-1]
    return w


def measured_snr_db(s1, s2):
    return 10.0 * np.log10(np.sum(s1**2, axis=-1) / np.sum(s2**2, axis=-1))


def synth_mixture_gen(seed, n, length=512, snr_range=(0.0, 5.0)):
    """``n`` mixtures of low-band noise and a high-band harmonic tone.

    Source 1 is noise band-limited to a random band under 0.08 cycles/sample;
    source 2 a harmonic series with random fundamental and partial amplitudes
    in 0.2-0.48 cycles/sample. Both fade in and out over 32 samples so the
    frame edges carry no broadband transient. Source 2 is scaled so that the energy ratio
    of source 1 to source 2 equals an SNR drawn uniformly from ``snr_range``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    mix = np.empty((n, length))
    src = np.empty((n, 2, length))
    snr = rng.uniform(*snr_range, size=n)
    fade = _edge_fade(length)
    for i in range(n):
        s1 = _band_noise(rng, length, rng.uniform(0.005, 0.02), rng.uniform(0.05, 0.08)) * fade
        s2 = _harmonic_tone(rng, length, 0.2, 0.48) * fade
        s1 /= np.sqrt(np.mean(s1**2))
        s2 *= np.sqrt(np.sum(s1**2) / np.sum(s2**2) / 10 ** (snr[i] / 10))
        src[i, 0], src[i, 1] = s1, s2
        mix[i] = s1 + s2
    return MixtureSet(mix, src, snr)


def oracle_mask_estimates(data: MixtureSet, stft: DenseSTFT):
    """Ideal ratio mask separation, ``(n, 2, length)`` estimates."""
    mags = []
    for k in range(2):
        re, im = stft.analyze(data.sources[:, k])
        mags.append(np.sqrt(re * re + im * im))
    re, im = stft.analyze(data.mixtures)
    total = mags[0] + mags[1] + 1e-12
    return np.stack([stft.apply_mask(m / total, re, im) for m in mags], axis=1)
