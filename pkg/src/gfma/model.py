"""System configuration, random scenario generation, and the dictionary.

Conventions used throughout the package:

* time is normalized: one chip lasts 1, one symbol lasts ``n_c`` chips;
* a device delay decomposes as ``tau = alpha * n_c + beta + xi`` with integer
  symbol part ``alpha``, integer chip part ``beta`` and fractional chip part
  ``xi`` in [0, 1) quantized to the oversampling grid (multiples of ``1/q``);
* the dictionary is a real ``n_c x 2*k_u`` matrix whose column pair
  ``(2k, 2k+1)`` holds the signatures ``(x_k0, x_k1)`` carrying the previous
  and the current symbol of device ``k``;
* fading: ``g_k = sqrt(eta_k p_k) * gbreve_k`` with
  ``gbreve_k ~ CN(rician_mean, rician_var)``. The complex mean absorbs the
  unknown carrier phase, so ``|gbreve_k|`` is Rician with K-factor
  ``|mean|^2 / var``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import waveform as wf

SNR_CONVENTIONS = ("per_device", "summed")


@dataclass(frozen=True)
class ActivityModel:
    """Per-frame activity: i.i.d. Bernoulli across devices.

    ``fixed``: activation probability is the constant ``p_a``.
    ``uniform``: a fresh ``p_a ~ U[0, p_max]`` is drawn for every frame
    (unknown, time-varying activity).
    """

    kind: str
    p_a: float = 0.0
    p_max: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown activity kind {self.kind!r}")
        if not 0.0 <= self.p_a <= 1.0 or not 0.0 <= self.p_max <= 1.0:
            raise ValueError("activity probabilities must lie in [0, 1]")
        if self.kind == "fixed" and self.p_a > self.p_max:
            object.__setattr__(self, "p_max", self.p_a)

    @classmethod
    def fixed(cls, p_a: float) -> "ActivityModel":
        return cls(kind="fixed", p_a=p_a, p_max=p_a)

    @classmethod
    def uniform(cls, p_max: float) -> "ActivityModel":
        return cls(kind="uniform", p_a=0.0, p_max=p_max)

    @property
    def mean_activity(self) -> float:
        """Average activation probability (P_a, or p_max/2 for the uniform model)."""
        return self.p_a if self.kind == "fixed" else self.p_max / 2.0

    def draw(self, k_u: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
        """Draw the frame's activation probability and the active mask."""
        p = self.p_a if self.kind == "fixed" else float(rng.uniform(0.0, self.p_max))
        return p, rng.random(k_u) < p


@dataclass(frozen=True)
class SystemConfig:
    """Static system parameters shared by all modules.

    ``window_len`` (L) and ``alpha_bar`` describe the identification window:
    columns ``alpha_bar .. alpha_bar + L - 1`` of the chip-matched-filter
    output.  ``alpha_bar`` must exceed the largest symbol delay so that every
    active device contributes a full column pair to each window column.
    """

    k_u: int
    n_c: int
    n_s: int
    window_len: int
    alpha_bar: int
    activity: ActivityModel
    q: int = 8
    snr_db: float = 10.0
    noise_var: float = 1.0
    rician_mean: complex = complex(np.sqrt(0.1), np.sqrt(0.1))
    rician_var: float = 1.0
    seed: int = 0
    alpha_max: int = 5
    snr_convention: str = "per_device"

    def __post_init__(self):
        if self.k_u <= self.n_c:
            raise ValueError("underdetermined regime requires k_u > n_c")
        if self.q < 1:
            raise ValueError("oversampling factor q must be >= 1")
        if self.noise_var < 0 or self.rician_var < 0:
            raise ValueError("variances must be nonnegative")
        if self.alpha_bar <= self.alpha_max:
            raise ValueError("window start alpha_bar must exceed alpha_max")
        # conservative window bound assumes the smallest delay can be 0
        if not 1 <= self.window_len <= self.n_s - self.alpha_bar:
            raise ValueError("need 1 <= window_len <= n_s - alpha_bar")
        if self.snr_convention not in SNR_CONVENTIONS:
            raise ValueError(f"snr_convention must be one of {SNR_CONVENTIONS}")

    @property
    def n_t(self) -> int:
        """Observation-matrix length in symbols (frame sized n_s + alpha_max)."""
        return self.n_s + self.alpha_max

    @property
    def overloading(self) -> float:
        return self.k_u / self.n_c

    @property
    def k_factor(self) -> float:
        if self.rician_var == 0:
            return np.inf
        return abs(self.rician_mean) ** 2 / self.rician_var


@dataclass(frozen=True)
class DeviceProfile:
    """Per-device statics: spreading code, delay triple, link budget, fading law."""

    code: np.ndarray
    alpha: int
    beta: int
    xi: float
    pathloss: float = 1.0
    power: float = 1.0
    rician_mean: complex = complex(np.sqrt(0.1), np.sqrt(0.1))
    rician_var: float = 1.0

    @property
    def n_c(self) -> int:
        return self.code.size

    @property
    def delay_chips(self) -> float:
        """tau_k in chips: alpha*n_c + beta + xi."""
        return self.alpha * self.n_c + self.beta + self.xi

    @property
    def gamma(self) -> float:
        """Mean received power eta_k p_k (sigma_k^2 + |mu_k|^2)."""
        return self.pathloss * self.power * (self.rician_var + abs(self.rician_mean) ** 2)


@dataclass(frozen=True)
class Dictionary:
    """Real ``n_c x 2*k_u`` matrix of delayed signature pairs."""

    x: np.ndarray

    @property
    def n_c(self) -> int:
        return self.x.shape[0]

    @property
    def k_u(self) -> int:
        return self.x.shape[1] // 2


@dataclass
class FrameRealization:
    """One beacon period: who is active, their fading, symbols and payloads."""

    active_set: np.ndarray
    g: np.ndarray
    symbols: np.ndarray
    payloads: dict[int, np.ndarray] = field(default_factory=dict)
    p_a_used: float = 0.0


def generate_codes(k_u: int, n_c: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k_u`` independent equiprobable +-1 spreading codes of length ``n_c``."""
    if k_u < 1 or n_c < 1:
        raise ValueError("k_u and n_c must be >= 1")
    return (rng.integers(0, 2, size=(k_u, n_c)) * 2 - 1).astype(np.int8)


def build_signature_pair(code: np.ndarray, beta: int, xi: float) -> tuple[np.ndarray, np.ndarray]:
    """Signature pair (x0, x1) of a device with chip delay ``beta`` and fraction ``xi``.

    The stacked vector [x1; x0] is the convex combination
    ``(1-xi) * shift_beta(code) + xi * shift_{beta+1}(code)`` in R^{2 n_c};
    x1 carries the current symbol, x0 the previous one.
    """
    code = np.asarray(code, dtype=float)
    n_c = code.size
    if not 0 <= beta <= n_c - 1:
        raise ValueError(f"beta must lie in [0, {n_c - 1}]")
    if not 0.0 <= xi < 1.0:
        raise ValueError("xi must lie in [0, 1)")
    stacked = np.zeros(2 * n_c)
    stacked[beta:beta + n_c] += (1.0 - xi) * code
    stacked[beta + 1:beta + 1 + n_c] += xi * code
    return stacked[n_c:].copy(), stacked[:n_c].copy()


def build_dictionary(profiles: list[DeviceProfile]) -> Dictionary:
    """Assemble the dictionary, column pair (x_k0, x_k1) per device."""
    n_c = profiles[0].n_c
    if any(p.n_c != n_c for p in profiles):
        raise ValueError("all profiles must share the code length n_c")
    x = np.zeros((n_c, 2 * len(profiles)))
    for k, p in enumerate(profiles):
        x0, x1 = build_signature_pair(p.code, p.beta, p.xi)
        x[:, 2 * k] = x0
        x[:, 2 * k + 1] = x1
    return Dictionary(x=x)


def calibrate_power(config: SystemConfig, profiles: list[DeviceProfile]) -> tuple[float, np.ndarray]:
    """Received-power level ``varsigma`` and transmit powers realizing the target SNR.

    Power control inverts the pathloss (p_k eta_k = varsigma for all k).  The
    average system SNR is ``mean_activity * sum_k nu_k p_k eta_k / noise_var``
    with ``nu_k = |mu_k|^2 + sigma_k^2``; under the ``per_device`` convention
    the sum is read per device (mean over k), under ``summed`` over all k_u.
    """
    theta = 10.0 ** (config.snr_db / 10.0)
    p_bar = config.activity.mean_activity
    nu = np.array([p.rician_var + abs(p.rician_mean) ** 2 for p in profiles])
    if p_bar == 0.0:
        # no device ever transmits; the SNR constraint is vacuous
        return 0.0, np.zeros(len(profiles))
    denom = nu.mean() if config.snr_convention == "per_device" else nu.sum()
    varsigma = theta * config.noise_var / (p_bar * denom)
    powers = varsigma / np.array([p.pathloss for p in profiles])
    return float(varsigma), powers


def sample_profiles(config: SystemConfig, rng: np.random.Generator,
                    pathloss: np.ndarray | None = None) -> list[DeviceProfile]:
    """Draw the static scenario: codes, delays and power-controlled link budgets.

    Delays follow the uniform laws alpha ~ U_d[0, alpha_max],
    beta ~ U_d[0, n_c - 1]; xi is uniform on the 1/q grid so the waveform and
    linear-model paths agree exactly.
    """
    codes = generate_codes(config.k_u, config.n_c, rng)
    alphas = rng.integers(0, config.alpha_max + 1, size=config.k_u)
    betas = rng.integers(0, config.n_c, size=config.k_u)
    xis = rng.integers(0, config.q, size=config.k_u) / config.q
    eta = np.ones(config.k_u) if pathloss is None else np.asarray(pathloss, dtype=float)
    profiles = [
        DeviceProfile(code=codes[k], alpha=int(alphas[k]), beta=int(betas[k]), xi=float(xis[k]),
                      pathloss=float(eta[k]), rician_mean=config.rician_mean,
                      rician_var=config.rician_var)
        for k in range(config.k_u)
    ]
    _, powers = calibrate_power(config, profiles)
    return [replace(p, power=float(pw)) for p, pw in zip(profiles, powers)]


def sample_frame(config: SystemConfig, profiles: list[DeviceProfile],
                 rng: np.random.Generator, codec: wf.Codec | None = None) -> FrameRealization:
    """Draw one beacon period: activity, fading and the encoded symbol streams.

    Active devices send ``n_s`` antipodal symbols: a random reference symbol
    followed by the differentially encoded codec output (bit 0 -> +1,
    bit 1 -> -1).  Inactive devices transmit zeros.
    """
    codec = codec or wf.IdentityCodec()
    payload_len = codec.payload_len(config.n_s - 1)
    p_a_used, active = config.activity.draw(config.k_u, rng)
    realized_alpha_max = max(p.alpha for p in profiles)
    if config.alpha_bar <= realized_alpha_max:
        raise ValueError("alpha_bar must exceed the realized maximum symbol delay")

    g = np.zeros(config.k_u, dtype=complex)
    symbols = np.zeros((config.k_u, config.n_s))
    payloads: dict[int, np.ndarray] = {}
    for k in np.nonzero(active)[0]:
        p = profiles[k]
        gbreve = p.rician_mean + (rng.standard_normal() + 1j * rng.standard_normal()) \
            * np.sqrt(p.rician_var / 2.0)
        g[k] = np.sqrt(p.pathloss * p.power) * gbreve
        payload = rng.integers(0, 2, size=payload_len).astype(np.int8)
        ref = int(rng.integers(0, 2))
        bits = wf.packetize(codec.encode(payload), ref)
        symbols[k] = wf.bits_to_symbols(bits)
        payloads[int(k)] = payload
    return FrameRealization(active_set=np.nonzero(active)[0], g=g, symbols=symbols,
                            payloads=payloads, p_a_used=p_a_used)


def sample_scenario(config: SystemConfig, rng: np.random.Generator,
                    codec: wf.Codec | None = None) -> tuple[list[DeviceProfile], FrameRealization]:
    """Statics plus one frame realization in a single call."""
    profiles = sample_profiles(config, rng)
    return profiles, sample_frame(config, profiles, rng, codec)


# --- JSON snapshots (regression fixtures) ---

def scenario_to_dict(profiles: list[DeviceProfile], frame: FrameRealization) -> dict:
    return {
        "profiles": [
            {
                "code": p.code.astype(int).tolist(),
                "alpha": p.alpha, "beta": p.beta, "xi": p.xi,
                "pathloss": p.pathloss, "power": p.power,
                "rician_mean": [p.rician_mean.real, p.rician_mean.imag],
                "rician_var": p.rician_var,
            }
            for p in profiles
        ],
        "frame": {
            "active_set": frame.active_set.tolist(),
            "g": [[z.real, z.imag] for z in frame.g],
            "symbols": frame.symbols.tolist(),
            "payloads": {str(k): v.astype(int).tolist() for k, v in frame.payloads.items()},
            "p_a_used": frame.p_a_used,
        },
    }


def scenario_from_dict(d: dict) -> tuple[list[DeviceProfile], FrameRealization]:
    profiles = [
        DeviceProfile(code=np.array(p["code"], dtype=np.int8), alpha=p["alpha"], beta=p["beta"],
                      xi=p["xi"], pathloss=p["pathloss"], power=p["power"],
                      rician_mean=complex(*p["rician_mean"]), rician_var=p["rician_var"])
        for p in d["profiles"]
    ]
    f = d["frame"]
    frame = FrameRealization(
        active_set=np.array(f["active_set"], dtype=int),
        g=np.array([complex(re, im) for re, im in f["g"]]),
        symbols=np.array(f["symbols"]),
        payloads={int(k): np.array(v, dtype=np.int8) for k, v in f["payloads"].items()},
        p_a_used=f["p_a_used"],
    )
    return profiles, frame


def save_scenario(path: str | Path, profiles: list[DeviceProfile], frame: FrameRealization) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(profiles, frame)))


def load_scenario(path: str | Path) -> tuple[list[DeviceProfile], FrameRealization]:
    return scenario_from_dict(json.loads(Path(path).read_text()))
