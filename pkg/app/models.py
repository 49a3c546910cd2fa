"""
Forward Models

EM31 effective-conductivity model of a two-layer ice/water column, analytic
likelihoods used to validate surrogates, a modal interface geometry, a
synthetic tilt nuisance, a linear-Gaussian test model, an adapter for
external black-box executables, and joint (parameter, data) sample
generation for surrogate training.

Nuisance inputs are drawn per sample and then discarded, which marginalizes
them out of the learned likelihood.
"""

import logging
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import BLACKBOX_PROTOCOL_VERSION, SEQTM_BLACKBOX_TIMEOUT
from app.sbi import JointSampleSet

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1024
MAX_TILT_DEG = 5.0


class Em31Config(BaseModel):
    """Conductivities in mS/m.

    sigma_i and sigma_w defaults are not measured values: they are chosen so
    that sigma_eff(2 m) is close to 630 mS/m, making sigma_eps = 63 a ten
    percent noise level.
    """

    model_config = ConfigDict(extra="forbid")

    sigma_i: float = Field(20.0, ge=0)
    sigma_w: float = Field(2400.0, gt=0)
    sigma_eps: float = Field(63.0, gt=0)

    @model_validator(mode="after")
    def check_conductivities(self):
        if not self.sigma_w > self.sigma_i:
            raise ValueError("sigma_w must exceed sigma_i")
        return self


def _thickness(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("ice thickness must be non-negative")
    return theta


def em31_sigma_eff(theta, cfg: Optional[Em31Config] = None):
    """sigma_I (1 - R) + sigma_W R with R = 1 / sqrt(4 theta^2 + 1)."""
    cfg = cfg or Em31Config()
    theta = _thickness(theta)
    r = 1.0 / np.sqrt(4.0 * theta ** 2 + 1.0)
    return cfg.sigma_i * (1.0 - r) + cfg.sigma_w * r


def em31_sigma_eff_derivative(theta, cfg: Optional[Em31Config] = None):
    cfg = cfg or Em31Config()
    theta = _thickness(theta)
    dr = -4.0 * theta * (4.0 * theta ** 2 + 1.0) ** -1.5
    return (cfg.sigma_w - cfg.sigma_i) * dr


def analytic_gaussian_loglik(y, theta, cfg: Optional[Em31Config] = None, normalized: bool = False):
    """-((y - sigma_eff(theta)) / sigma_eps)^2 / 2, optionally with the Gaussian constant."""
    cfg = cfg or Em31Config()
    r = (np.asarray(y, dtype=float) - em31_sigma_eff(theta, cfg)) / cfg.sigma_eps
    value = -0.5 * r ** 2
    if normalized:
        value = value - 0.5 * np.log(2.0 * np.pi) - np.log(cfg.sigma_eps)
    return value


def analytic_gaussian_loglik_grad(y, theta, cfg: Optional[Em31Config] = None):
    """Derivative of analytic_gaussian_loglik in theta."""
    cfg = cfg or Em31Config()
    r = (np.asarray(y, dtype=float) - em31_sigma_eff(theta, cfg)) / cfg.sigma_eps
    return r / cfg.sigma_eps * em31_sigma_eff_derivative(theta, cfg)


def multiplicative_loglik(y, h, noise_logpdf: Callable[[np.ndarray], np.ndarray]):
    """log pi(y | theta) for y = H(theta) * eps: -log|h| + log p_eps(y / h)."""
    h = np.asarray(h, dtype=float)
    return -np.log(np.abs(h)) + noise_logpdf(np.asarray(y, dtype=float) / h)


def tilt_surrogate_model(theta, alpha, cfg: Optional[Em31Config] = None, max_tilt: float = MAX_TILT_DEG):
    """Synthetic tilt effect: sigma_eff(theta) * cos^2(alpha), alpha in degrees within [0, max_tilt]."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha < 0) | (alpha > max_tilt)):
        raise ValueError(f"tilt angle must lie in [0, {max_tilt:g}] degrees")
    return em31_sigma_eff(theta, cfg) * np.cos(np.deg2rad(alpha)) ** 2


@dataclass(frozen=True)
class InterfaceGeometry:
    """Ice/water interface z(x) = theta_0 + sum_k theta_k sin(k pi (x - a) / (b - a)).

    Sine modes on the measurement domain [a, b] are a configurable default
    shape, not a measured one.
    """

    n_modes: int = 0
    domain: Tuple[float, float] = (0.0, 100.0)

    def __post_init__(self):
        if self.n_modes < 0:
            raise ValueError("mode count must be non-negative")
        a, b = self.domain
        if not b > a:
            raise ValueError("domain must be an increasing interval")

    @property
    def n_coeffs(self) -> int:
        return self.n_modes + 1

    def modes(self, x) -> np.ndarray:
        """Mode values [1, Psi_1(x), ..., Psi_m(x)], shape x.shape + (m + 1,)."""
        x = np.asarray(x, dtype=float)
        a, b = self.domain
        if np.any((x < a) | (x > b)):
            raise ValueError(f"position outside the domain [{a:g}, {b:g}]")
        k = np.arange(1, self.n_modes + 1)
        sines = np.sin(k * np.pi * ((x[..., None] - a) / (b - a)))
        return np.concatenate([np.ones(x.shape + (1,)), sines], axis=-1)

    def height(self, coeffs, x) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.n_coeffs:
            raise ValueError(f"expected {self.n_coeffs} coefficients")
        return np.sum(self.modes(x) * coeffs, axis=-1)


def interface_height(geom: InterfaceGeometry, coeffs, x):
    return geom.height(coeffs, x)


# ----------------------------------------------------------------------
# Forward models
# ----------------------------------------------------------------------

class ForwardModel(ABC):
    """Batched H_t(theta, xi, eta): parameters, noise and nuisance to data.

    Every call adds the number of evaluated samples to n_calls.
    """

    model_id = "model"
    n_theta = 1
    n_y = 1
    n_noise = 1
    n_nuisance = 0

    def __init__(self):
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def n_calls(self) -> int:
        return self._calls

    def reset_calls(self):
        with self._lock:
            self._calls = 0

    def sample_noise(self, rng: np.random.Generator, n: int, t: int) -> np.ndarray:
        return rng.standard_normal((n, self.n_noise))

    def sample_nuisance(self, rng: np.random.Generator, n: int, t: int) -> np.ndarray:
        return np.empty((n, self.n_nuisance))

    def __call__(self, theta, xi, eta, t: int) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        with self._lock:
            self._calls += theta.shape[0]
        return np.atleast_2d(self.evaluate(theta, np.atleast_2d(xi), np.atleast_2d(eta), t)).reshape(theta.shape[0], self.n_y)

    @abstractmethod
    def evaluate(self, theta: np.ndarray, xi: np.ndarray, eta: np.ndarray, t: int) -> np.ndarray:
        ...


class Em31Model(ForwardModel):
    """y = sigma_eff(theta) + sigma_eps xi."""

    model_id = "em31"

    def __init__(self, cfg: Optional[Em31Config] = None):
        super().__init__()
        self.cfg = cfg or Em31Config()

    def evaluate(self, theta, xi, eta, t):
        return em31_sigma_eff(theta[:, 0], self.cfg)[:, None] + self.cfg.sigma_eps * xi


class GaussianLinearModel(ForwardModel):
    """y = A theta + noise_std xi."""

    model_id = "gaussian-linear"

    def __init__(self, matrix=None, noise_std: float = 1.0):
        super().__init__()
        self.matrix = np.eye(1) if matrix is None else np.atleast_2d(np.asarray(matrix, dtype=float))
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        self.noise_std = float(noise_std)
        self.n_y, self.n_theta = self.matrix.shape
        self.n_noise = self.n_y

    def evaluate(self, theta, xi, eta, t):
        return theta @ self.matrix.T + self.noise_std * xi


class ModalEm31Model(ForwardModel):
    """EM31 reading over a modal interface, measured at positions[t - 1].

    With tilt enabled the device angle alpha ~ U[0, max_tilt_deg] is a nuisance
    input; freeze_nuisance pins it to 0 in the nuisance sampler, which gives
    a surrogate that ignores the tilt.
    """

    model_id = "em31-modal"

    def __init__(self, geometry: InterfaceGeometry, positions: Sequence[float],
                 cfg: Optional[Em31Config] = None, tilt: bool = False, freeze_nuisance: bool = False,
                 max_tilt_deg: float = MAX_TILT_DEG):
        super().__init__()
        self.geometry = geometry
        self.positions = np.asarray(positions, dtype=float)
        if self.positions.size == 0:
            raise ValueError("at least one measurement position is required")
        geometry.modes(self.positions)
        self.cfg = cfg or Em31Config()
        self.tilt = tilt
        self.freeze_nuisance = freeze_nuisance
        if not 0 < max_tilt_deg < 90:
            raise ValueError("max_tilt_deg must lie in (0, 90)")
        self.max_tilt_deg = float(max_tilt_deg)
        self.n_theta = geometry.n_coeffs
        self.n_nuisance = 1 if tilt else 0

    def position(self, t: int) -> float:
        return float(self.positions[(t - 1) % self.positions.size])

    def sample_nuisance(self, rng, n, t):
        if not self.tilt:
            return np.empty((n, 0))
        if self.freeze_nuisance:
            return np.zeros((n, 1))
        return rng.uniform(0.0, self.max_tilt_deg, size=(n, 1))

    def evaluate(self, theta, xi, eta, t):
        thickness = self.geometry.height(theta, self.position(t))
        if self.tilt:
            signal = tilt_surrogate_model(thickness, eta[:, 0], self.cfg, self.max_tilt_deg)
        else:
            signal = em31_sigma_eff(thickness, self.cfg)
        return signal[:, None] + self.cfg.sigma_eps * xi


class ExternalModel(ForwardModel):
    """Black-box executable speaking the line protocol.

    Input: a header line "<protocol> <n_theta> <n_y> <n_noise> <n_nuisance>",
    then one line per sample "t theta... xi... eta..." (whitespace separated).
    Output: the same header line, then one line per sample with n_y values;
    a line that does not parse (or holds nan) marks a failed sample.
    """

    model_id = "external"

    def __init__(self, command: Union[str, Sequence[str]], n_theta: int, n_y: int,
                 n_noise: Optional[int] = None, n_nuisance: int = 0,
                 timeout: float = SEQTM_BLACKBOX_TIMEOUT):
        super().__init__()
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.n_theta, self.n_y = int(n_theta), int(n_y)
        self.n_noise = self.n_y if n_noise is None else int(n_noise)
        self.n_nuisance = int(n_nuisance)
        self.timeout = timeout

    def sample_nuisance(self, rng, n, t):
        return rng.standard_normal((n, self.n_nuisance))

    def header(self) -> str:
        return f"{BLACKBOX_PROTOCOL_VERSION} {self.n_theta} {self.n_y} {self.n_noise} {self.n_nuisance}"

    def evaluate(self, theta, xi, eta, t):
        lines = [self.header()]
        for row in np.hstack([theta, xi, eta]):
            lines.append(" ".join([str(t)] + [repr(float(v)) for v in row]))
        proc = subprocess.run(self.command, input="\n".join(lines) + "\n", capture_output=True,
                              text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"black-box model exited with {proc.returncode}: {proc.stderr.strip()}")
        out = proc.stdout.splitlines()
        if not out or out[0].split()[0] != BLACKBOX_PROTOCOL_VERSION:
            raise RuntimeError(f"black-box model did not answer with protocol {BLACKBOX_PROTOCOL_VERSION}")
        rows = out[1:]
        if len(rows) != theta.shape[0]:
            raise RuntimeError(f"black-box model returned {len(rows)} rows for {theta.shape[0]} samples")
        result = np.full((theta.shape[0], self.n_y), np.nan)
        for i, line in enumerate(rows):
            try:
                values = [float(v) for v in line.split()]
            except ValueError:
                continue
            if len(values) == self.n_y:
                result[i] = values
        return result


# ----------------------------------------------------------------------
# Joint samples
# ----------------------------------------------------------------------

def _evaluate_chunk(model: ForwardModel, proposal, t: int, n: int,
                    seed_seq: np.random.SeedSequence) -> Tuple[np.ndarray, np.ndarray, int]:
    rng = np.random.default_rng(seed_seq)
    theta = np.atleast_2d(proposal.sample(n, rng)).reshape(n, model.n_theta)
    xi = model.sample_noise(rng, n, t)
    eta = model.sample_nuisance(rng, n, t)
    try:
        y = model(theta, xi, eta, t)
    except Exception as e:
        logger.warning(f"Model failed on a batch of {n} samples ({e}), retrying row by row")
        y = np.full((n, model.n_y), np.nan)
        for i in range(n):
            try:
                y[i] = model(theta[i:i + 1], xi[i:i + 1], eta[i:i + 1], t)[0]
            except Exception as row_error:
                logger.debug(f"Row {i} failed: {row_error}")
    ok = np.all(np.isfinite(y), axis=1) & np.all(np.isfinite(theta), axis=1)
    return theta[ok], y[ok], int(n - ok.sum())


def generate_joint_samples(model: ForwardModel, proposal, t: int, n: int, seed: int,
                           workers: int = 1, chunk_size: int = CHUNK_SIZE) -> JointSampleSet:
    """Rows (theta_i, H_t(theta_i, xi_i, eta_i)) with theta_i ~ proposal.

    Each chunk of rows gets its own random stream spawned from (seed, t), so
    results do not depend on the worker schedule. Failed rows are skipped.
    """
    if n < 1:
        raise ValueError("n must be positive")
    sizes = [min(chunk_size, n - start) for start in range(0, n, chunk_size)]
    streams = np.random.SeedSequence([seed, t]).spawn(len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda args: _evaluate_chunk(model, proposal, t, *args), zip(sizes, streams)))
    else:
        chunks = [_evaluate_chunk(model, proposal, t, size, stream) for size, stream in zip(sizes, streams)]
    theta = np.vstack([c[0] for c in chunks])
    y = np.vstack([c[1] for c in chunks])
    skipped = sum(c[2] for c in chunks)
    if skipped:
        logger.warning(f"Step {t}: skipped {skipped} of {n} samples after model failures")
    if theta.shape[0] == 0:
        raise RuntimeError(f"Step {t}: every model evaluation failed")
    return JointSampleSet(theta, y, t, skipped=skipped, seed=seed, model_id=model.model_id)


def simulate_observations(model: ForwardModel, theta_ref, n_steps: int, seed: int) -> np.ndarray:
    """Observations y_1..y_T at a fixed parameter, one noise/nuisance draw per step."""
    theta_ref = np.atleast_2d(np.asarray(theta_ref, dtype=float))
    out = np.empty((n_steps, model.n_y))
    for t in range(1, n_steps + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t, 7]))
        out[t - 1] = model(theta_ref, model.sample_noise(rng, 1, t), model.sample_nuisance(rng, 1, t), t)[0]
    return out
