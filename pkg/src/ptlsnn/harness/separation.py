"""Two-source mask estimation on synthetic mixtures.

The network maps a log-magnitude spectrogram of the mixture to two sigmoid
masks; each masked mixture spectrum is resynthesized and scored against the
references under the better of the two source assignments (PIT). Training
minimizes the negative mean PIT SI-SDR.
"""

from __future__ import annotations

import numpy as np

from ..metrics import pit_si_sdr, si_sdr_batch
from ..nn.losses import sigmoid
from .data import DenseSTFT, MixtureSet


class SeparationTask:
    def __init__(self, stft: DenseSTFT | None = None):
        self.stft = stft or DenseSTFT()

    @property
    def n_features(self):
        return self.stft.n_coeffs

    def architecture(self, hidden=(256, 256)):
        return "-".join(str(d) for d in (self.n_features, *hidden, 2 * self.n_features))

    def make_xy(self, data: MixtureSet):
        """Network inputs and packed targets ``[mixture | source 1 | source 2]``."""
        x = self.stft.features(data.mixtures)
        y = np.concatenate([data.mixtures, data.sources[:, 0], data.sources[:, 1]], axis=1)
        return x, y

    def _unpack(self, y):
        n = self.stft.length
        return y[:, :n], y[:, n : 2 * n], y[:, 2 * n :]

    def estimates(self, logits, mixtures):
        """``(B, 2, length)`` resynthesized sources from mask logits."""
        K = self.n_features
        m = sigmoid(np.asarray(logits, dtype=np.float64))
        re, im = self.stft.analyze(mixtures)
        return np.stack([self.stft.apply_mask(m[:, :K], re, im), self.stft.apply_mask(m[:, K:], re, im)], axis=1)

    def loss(self, logits, y):
        """Negative mean PIT SI-SDR and its gradient w.r.t. the mask logits."""
        K = self.n_features
        mix, s1, s2 = self._unpack(np.asarray(y, dtype=np.float64))
        m = sigmoid(np.asarray(logits, dtype=np.float64))
        re, im = self.stft.analyze(mix)
        e1 = self.stft.apply_mask(m[:, :K], re, im)
        e2 = self.stft.apply_mask(m[:, K:], re, im)
        v11, g11 = si_sdr_batch(e1, s1)
        v22, g22 = si_sdr_batch(e2, s2)
        v12, g12 = si_sdr_batch(e1, s2)
        v21, g21 = si_sdr_batch(e2, s1)
        ident = (v11 + v22) / 2 >= (v12 + v21) / 2
        score = np.where(ident, (v11 + v22) / 2, (v12 + v21) / 2)
        B = len(score)
        sel = ident[:, None]
        ge1 = -np.where(sel, g11, g12) / (2 * B)
        ge2 = -np.where(sel, g22, g21) / (2 * B)
        gm = np.concatenate([self.stft.mask_adjoint(ge1, re, im), self.stft.mask_adjoint(ge2, re, im)], axis=1)
        return float(-score.mean()), (gm * m * (1 - m)).astype(np.asarray(logits).dtype)

    def metric(self, logits, y):
        """Mean PIT SI-SDR (dB, capped) over the batch."""
        mix, s1, s2 = self._unpack(np.asarray(y, dtype=np.float64))
        est = self.estimates(logits, mix)
        refs = np.stack([s1, s2], axis=1)
        return float(np.mean([pit_si_sdr(e, r)[0] for e, r in zip(est, refs)]))
