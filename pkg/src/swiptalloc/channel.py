"""Channel generation and link-rate evaluation.

Channel power gains combine free-space path loss with Rician block fading,
i.i.d. across users and slots.  Generation is counter-based (Philox keyed by
seed and trial index) so independent trials can run concurrently and still
reproduce bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SPEED_OF_LIGHT = 299792458.0


def dbm_to_watts(x_dbm):
    """dBm -> Watts."""
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(x_watts):
    """Watts -> dBm; rejects non-positive powers."""
    x = np.asarray(x_watts, dtype=float)
    if np.any(x <= 0):
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * np.log10(x) + 30.0


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: geometry, budgets and QoS targets.

    All powers in Watts; distances in meters; rates in bits/s/Hz.  The rate
    requirement and distance are broadcast to all K users when given as
    scalars.
    """

    K: int = 10
    T: int = 64
    P_max: float = float(dbm_to_watts(46.0))
    P_av: float = float(0.2 * dbm_to_watts(46.0))
    C_req: tuple = 3.0
    noise_power: float = 1e-15
    f_c: float = 915e6
    G_tx: float = 10.0 ** 1.8
    G_rx: float = 1.0
    path_loss_exponent: float = 2.0
    distances: tuple = 10.0
    rician_K: float = 1.0
    seed: int = 0
    trials: int = 50
    c_req_vec: np.ndarray = field(init=False, repr=False)
    distance_vec: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ConfigError("K and T must be at least 1")
        if not (0 < self.P_av <= self.P_max):
            raise ConfigError("need 0 < P_av <= P_max")
        if self.noise_power <= 0:
            raise ConfigError("noise power must be positive")
        if self.rician_K < 0:
            raise ConfigError("Rician factor must be nonnegative")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        c = np.broadcast_to(np.asarray(self.C_req, dtype=float), (self.K,)).copy()
        d = np.broadcast_to(np.asarray(self.distances, dtype=float), (self.K,)).copy()
        if np.any(c < 0):
            raise ConfigError("rate requirements must be nonnegative")
        if np.any(d <= 0):
            raise ConfigError("distances must be positive")
        object.__setattr__(self, "c_req_vec", c)
        object.__setattr__(self, "distance_vec", d)

    def replace(self, **kw):
        """Return a copy with some fields overridden."""
        from dataclasses import asdict

        data = {k: v for k, v in asdict(self).items()
                if k not in ("c_req_vec", "distance_vec")}
        data.update(kw)
        return ScenarioConfig(**data)


@dataclass(frozen=True)
class ChannelRealization:
    """K x T matrix of nonnegative channel power gains."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 2:
            raise ValueError("channel matrix must be 2-D (users x slots)")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("channel gains must be finite and nonnegative")
        object.__setattr__(self, "h", h)


def path_gain(d, f_c, G_tx=1.0, G_rx=1.0, exponent=2.0):
    """Free-space style path gain G_tx*G_rx*(c/(4 pi f_c))^2 * d^(-exponent)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0) or f_c <= 0:
        raise ValueError("distance and carrier frequency must be positive")
    lam = SPEED_OF_LIGHT / f_c
    out = G_tx * G_rx * (lam / (4.0 * np.pi)) ** 2 * d ** (-exponent)
    return float(out) if np.isscalar(d) or d.ndim == 0 else out


def rician_power_sample(rician_K, rng, size=None):
    """Draw |g|^2 with g Rician-faded, normalized so E|g|^2 = 1.

    rician_K is the LOS-to-scattered power ratio (linear); 0 reduces to
    Rayleigh fading.
    """
    if rician_K < 0:
        raise ValueError("Rician factor must be nonnegative")
    los = np.sqrt(rician_K / (rician_K + 1.0))
    scatter = np.sqrt(1.0 / (2.0 * (rician_K + 1.0)))
    g = (los + scatter * rng.standard_normal(size)) + 1j * scatter * rng.standard_normal(size)
    return np.abs(g) ** 2


def generate_realization(config: ScenarioConfig, trial: int = 0) -> ChannelRealization:
    """Generate h_k(n) = path_gain(d_k) * |g_k(n)|^2, deterministic per (seed, trial)."""
    rng = np.random.Generator(np.random.Philox(key=(config.seed, trial)))
    gains = path_gain(config.distance_vec, config.f_c, config.G_tx,
                      config.G_rx, config.path_loss_exponent)
    fading = rician_power_sample(config.rician_K, rng, size=(config.K, config.T))
    return ChannelRealization(h=gains[:, None] * fading)


def capacity(p, h, noise_power):
    """Shannon rate log2(1 + p*h/noise) in bits/s/Hz."""
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(p < 0) or np.any(h < 0):
        raise ValueError("power and channel gain must be nonnegative")
    return np.log2(1.0 + p * h / noise_power)
