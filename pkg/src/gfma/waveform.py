"""Transmitter chain, oversampled baseband superposition and matched filters.

The raw waveform is kept at sub-chip rate (``q`` samples per chip).  Its buffer
spans ``n_t + 1`` symbol slots: ``n_t = n_s + alpha_max`` observation slots
plus one guard slot so the chip/fraction tail of the latest packet is never
truncated.  The chip matched filter averages the ``q`` sub-samples of each
chip at the receiver timing reference; production noise is injected per
sub-sample with variance ``q * noise_var`` so each chip-MF output sees
variance ``noise_var``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # only for annotations; model imports this module at runtime
    from .model import DeviceProfile, FrameRealization, SystemConfig


# --- channel-coding hook and differential encoding ---

class Codec:
    """Pluggable channel code. ``decode(encode(x)) == x`` on noiseless bits."""

    def encode(self, bits: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, bits: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def coded_len(self, payload_len: int) -> int:
        raise NotImplementedError

    def payload_len(self, coded_len: int) -> int:
        raise NotImplementedError


class IdentityCodec(Codec):
    def encode(self, bits):
        return np.asarray(bits, dtype=np.int8).copy()

    def decode(self, bits):
        return np.asarray(bits, dtype=np.int8).copy()

    def coded_len(self, payload_len):
        return payload_len

    def payload_len(self, coded_len):
        return coded_len


class RepetitionCodec(Codec):
    """n-fold repetition with majority-vote decoding (ties decode to 0)."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("repetition factor must be >= 1")
        self.n = n

    def encode(self, bits):
        return np.repeat(np.asarray(bits, dtype=np.int8), self.n)

    def decode(self, bits):
        b = np.asarray(bits, dtype=np.int8)
        if b.size % self.n:
            raise ValueError("coded length is not a multiple of the repetition factor")
        votes = b.reshape(-1, self.n).sum(axis=1)
        return (votes * 2 > self.n).astype(np.int8)

    def coded_len(self, payload_len):
        return payload_len * self.n

    def payload_len(self, coded_len):
        if coded_len % self.n:
            raise ValueError("coded length is not a multiple of the repetition factor")
        return coded_len // self.n


def get_codec(spec: dict | str | None) -> Codec:
    """Codec from a config snippet: ``"identity"`` or ``{"kind": "repetition", "n": 3}``."""
    if spec is None or spec == "identity" or spec == {"kind": "identity"}:
        return IdentityCodec()
    if isinstance(spec, dict) and spec.get("kind") == "repetition":
        return RepetitionCodec(int(spec["n"]))
    raise ValueError(f"unknown codec spec {spec!r}")


def differential_encode(coded_bits: np.ndarray, reference_bit: int = 0) -> np.ndarray:
    """out[i] = out[i-1] XOR in[i] with out[-1] := reference_bit; length preserved."""
    b = np.asarray(coded_bits, dtype=np.int8)
    out = np.bitwise_xor.accumulate(b)
    if reference_bit:
        out = out ^ 1
    return out


def packetize(coded_bits: np.ndarray, reference_bit: int = 0) -> np.ndarray:
    """Transmitted bit stream: the reference bit followed by the differential chain.

    Differential decoding of this stream recovers ``coded_bits`` exactly, for
    either cluster labeling and any reference value.
    """
    return np.concatenate(([np.int8(reference_bit)],
                           differential_encode(coded_bits, reference_bit)))


def bits_to_symbols(bits: np.ndarray) -> np.ndarray:
    """Antipodal map pinned as 0 -> +1, 1 -> -1."""
    return 1.0 - 2.0 * np.asarray(bits, dtype=float)


# --- waveform synthesis and filtering ---

@dataclass
class Waveform:
    """Complex baseband at sub-chip rate; ``samples`` spans n_t + 1 symbol slots."""

    samples: np.ndarray
    q: int


@dataclass
class ObservationWindow:
    """Truncated chip-MF output: columns alpha_bar .. alpha_bar + L - 1."""

    r: np.ndarray
    alpha_bar: int

    @property
    def window_len(self) -> int:
        return self.r.shape[1]


def delay_subsamples(profile: "DeviceProfile", q: int) -> int:
    """Device delay in sub-samples; xi must sit on the 1/q grid."""
    xi_q = profile.xi * q
    if abs(xi_q - round(xi_q)) > 1e-9:
        raise ValueError(f"xi={profile.xi} is off the 1/{q} oversampling grid")
    return (profile.alpha * profile.n_c + profile.beta) * q + int(round(xi_q))


def synthesize_frame(profiles: list["DeviceProfile"], frame: "FrameRealization",
                     config: "SystemConfig", rng: np.random.Generator | None = None,
                     chip_noise: np.ndarray | None = None) -> Waveform:
    """Superpose the active devices' delayed spread packets plus AWGN.

    ``chip_noise`` (shape n_c x (n_t + 1)) switches to shared-noise test mode:
    the given chip-level noise is held constant over each chip's q sub-samples,
    which makes this path bit-comparable with the linear model.  Otherwise
    i.i.d. complex Gaussian noise of variance ``q * noise_var`` is injected per
    sub-sample when ``rng`` is given.
    """
    n_c, q = config.n_c, config.q
    total = (config.n_t + 1) * n_c * q
    out = np.zeros(total, dtype=complex)
    for k in frame.active_set:
        p = profiles[k]
        off = delay_subsamples(p, q)
        chips = (frame.symbols[k][:, None] * p.code[None, :]).ravel()
        seg = np.repeat(chips, q)
        out[off:off + seg.size] += frame.g[k] * seg
    if chip_noise is not None:
        if chip_noise.shape != (n_c, config.n_t + 1):
            raise ValueError("chip_noise must have shape (n_c, n_t + 1)")
        out += np.repeat(chip_noise.T.ravel(), q)
    elif rng is not None and config.noise_var > 0:
        scale = np.sqrt(q * config.noise_var / 2.0)
        out += scale * (rng.standard_normal(total) + 1j * rng.standard_normal(total))
    return Waveform(samples=out, q=q)


def chip_matched_filter(waveform: Waveform, config: "SystemConfig") -> np.ndarray:
    """Full observation matrix (n_c x n_t): entry (i, j) averages chip i of slot j."""
    n_c, q, n_t = config.n_c, config.q, config.n_t
    need = n_t * n_c * q
    if waveform.samples.size < need:
        raise ValueError("waveform too short for the configured frame")
    return waveform.samples[:need].reshape(n_t, n_c, q).mean(axis=2).T


def observation_window(obs: np.ndarray, config: "SystemConfig") -> ObservationWindow:
    """Slice the identification window out of the full observation matrix."""
    a, L = config.alpha_bar, config.window_len
    return ObservationWindow(r=obs[:, a:a + L].copy(), alpha_bar=a)


def sequence_matched_filter(waveform: Waveform, profile: "DeviceProfile",
                            config: "SystemConfig") -> np.ndarray:
    """Normalized per-symbol correlation with the device's own delayed code.

    y_i = (1 / (n_c q)) * sum over the n_c*q sub-samples of symbol slot i
    (at the device's own delay) of waveform * code; a single noiseless active
    device yields exactly g_k * b_{k,i}.
    """
    n_c, q, n_s = config.n_c, config.q, config.n_s
    off = delay_subsamples(profile, q)
    seg = waveform.samples[off:off + n_s * n_c * q].reshape(n_s, n_c * q)
    return seg @ np.repeat(profile.code.astype(float), q) / (n_c * q)


def linear_model_frame(profiles: list["DeviceProfile"], frame: "FrameRealization",
                       config: "SystemConfig", rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None,
                       dictionary=None) -> np.ndarray:
    """Fast path: the full observation matrix R = X G B + W without waveform synthesis.

    ``noise`` (n_c x n_t complex) enables the shared-noise mode used to compare
    against the waveform path bit-for-bit.
    """
    from .model import build_dictionary

    x = (dictionary or build_dictionary(profiles)).x
    n_t = config.n_t
    h = np.zeros((2 * len(profiles), n_t), dtype=complex)
    for k in frame.active_set:
        a = profiles[k].alpha
        gs = frame.g[k] * frame.symbols[k]
        h[2 * k + 1, a:a + config.n_s] = gs
        hi = min(a + 1 + config.n_s, n_t)
        h[2 * k, a + 1:hi] = gs[:hi - (a + 1)]
    r = x @ h
    if noise is not None:
        r = r + noise
    elif rng is not None and config.noise_var > 0:
        scale = np.sqrt(config.noise_var / 2.0)
        r = r + scale * (rng.standard_normal(r.shape) + 1j * rng.standard_normal(r.shape))
    return r


def linear_model_window(profiles: list["DeviceProfile"], frame: "FrameRealization",
                        config: "SystemConfig", rng: np.random.Generator | None = None,
                        dictionary=None) -> ObservationWindow:
    """Only the L identification-window columns of the linear model."""
    from .model import build_dictionary

    x = (dictionary or build_dictionary(profiles)).x
    a_bar, L = config.alpha_bar, config.window_len
    h = np.zeros((2 * len(profiles), L), dtype=complex)
    cols = np.arange(a_bar, a_bar + L)
    for k in frame.active_set:
        a = profiles[k].alpha
        gs = frame.g[k] * frame.symbols[k]
        h[2 * k, :] = gs[cols - a - 1]
        h[2 * k + 1, :] = gs[cols - a]
    r = x @ h
    if rng is not None and config.noise_var > 0:
        scale = np.sqrt(config.noise_var / 2.0)
        r = r + scale * (rng.standard_normal(r.shape) + 1j * rng.standard_normal(r.shape))
    return ObservationWindow(r=r, alpha_bar=a_bar)


# --- fixture replay ---

def save_window(path: str | Path, window: ObservationWindow, seed: int | None = None) -> None:
    """Binary matrix container plus JSON sidecar (dims, alpha_bar, seed)."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), window.r)
    sidecar = {"n_c": window.r.shape[0], "window_len": window.r.shape[1],
               "alpha_bar": window.alpha_bar, "seed": seed}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_window(path: str | Path) -> ObservationWindow:
    path = Path(path)
    r = np.load(path.with_suffix(".npy"))
    meta = json.loads(path.with_suffix(".json").read_text())
    return ObservationWindow(r=r, alpha_bar=meta["alpha_bar"])
