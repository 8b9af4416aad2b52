"""Synthetic labeled trajectories and the analytic image renderer.

The generator produces a damped/periodic planar oscillator embedded into
R^D through a fixed orthonormal map plus a small smooth nonlinearity, so
trajectories are genuinely curved in state space. Low regime parameters
decay ("steady", class 0); high ones stay periodic ("unsteady", class 1).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import binio
from .errors import ConfigError, InputError
from .numcore import Rng

DATASET_MAGIC = b"DYN1"


@dataclass(frozen=True)
class Condition:
    tau: float
    mu: float
    class_label: Optional[int] = None


@dataclass(frozen=True)
class StateFrame:
    x: np.ndarray
    condition: Condition


@dataclass
class Trajectory:
    xs: np.ndarray          # (S, D) embedded states
    ss: np.ndarray          # (S, 2) latent oscillator states
    taus: np.ndarray        # (S,) phase times in [0, 1]
    alphas: np.ndarray      # (S,) ordering parameter, i/(S-1)
    mu: float
    zeta: float
    omega: float
    class_label: int

    def __len__(self):
        return self.xs.shape[0]

    def frame(self, i):
        cond = Condition(float(self.taus[i]), self.mu, self.class_label)
        return StateFrame(self.xs[i], cond)

    def frames(self):
        return [self.frame(i) for i in range(len(self))]


class OscillatorMap:
    """Fixed seeded embedding R^2 -> R^D and its iterative inverse."""

    def __init__(self, q, u, amp):
        self.q = np.asarray(q, dtype=np.float64)
        self.u = np.asarray(u, dtype=np.float64)
        self.amp = float(amp)

    @classmethod
    def create(cls, dim, rng, amp=0.1, u_norm=2.5):
        if dim < 2:
            raise ConfigError("state dimension must be at least 2", field="D")
        q, _ = np.linalg.qr(rng.stream("embed-q").normal((dim, 2)))
        u = rng.stream("embed-u").normal((dim, 2))
        u *= u_norm / np.linalg.svd(u, compute_uv=False)[0]
        return cls(q, u, amp)

    def embed(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        return s @ self.q.T + self.amp * np.tanh(s @ self.u.T)

    def invert(self, x, tol=1e-14, max_iter=100):
        """Recover latent coordinates; the map is a contraction, so the
        fixed-point iteration converges geometrically."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = x @ self.q
        for _ in range(max_iter):
            s_next = (x - self.amp * np.tanh(s @ self.u.T)) @ self.q
            if np.max(np.abs(s_next - s)) < tol:
                s = s_next
                break
            s = s_next
        return s


@dataclass
class Dataset:
    trajectories: list
    splits: list                    # per-trajectory "train" / "test"
    seed: int
    mapping: OscillatorMap
    mu_range: tuple
    mu_threshold: float
    t_max: float = 1.0
    center: tuple = (0.0, 0.0)      # latent fixed point the cycles orbit
    state_dim: int = field(init=False)

    def __post_init__(self):
        self.state_dim = self.trajectories[0].xs.shape[1]

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def stack(self, split):
        """Flatten a split into aligned per-frame arrays."""
        idx = self.indices(split)
        if not idx:
            raise InputError(f"no trajectories in split {split!r}")
        trajs = [self.trajectories[i] for i in idx]
        return {
            "x": np.concatenate([t.xs for t in trajs]),
            "s": np.concatenate([t.ss for t in trajs]),
            "tau": np.concatenate([t.taus for t in trajs]),
            "alpha": np.concatenate([t.alphas for t in trajs]),
            "mu": np.concatenate([np.full(len(t), t.mu) for t in trajs]),
            "label": np.concatenate(
                [np.full(len(t), t.class_label, dtype=np.int64) for t in trajs]
            ),
            "traj": np.concatenate(
                [np.full(len(t), i, dtype=np.int64) for i, t in zip(idx, trajs)]
            ),
        }


def class_from_mu(mu, mu_threshold):
    """Deterministic regime label: periodic (1) at or above the threshold."""
    return int(np.asarray(mu) >= mu_threshold)


def generate_oscillator(
    n_traj,
    frames_per_traj,
    mu_range,
    D=12,
    seed=0,
    test_fraction=1.0 / 6.0,
    t_max=0.75,
    nonlin_amp=0.1,
    zeta_max=0.8,
    center=None,
):
    """Generate a blocked-split Dataset of oscillator trajectories.

    The planar cycle orbits a seeded off-origin fixed point (the mean state
    a decaying regime relaxes toward), so the embedded trajectories do not
    sit on a sphere around the state-space origin. The default window
    observes three quarters of a turn: an open arc keeps phase time
    identifiable from the state, while t_max=1.0 yields one exact period.
    """
    if n_traj < 2:
        raise ConfigError("need at least 2 trajectories", field="n_traj")
    if frames_per_traj < 8:
        raise ConfigError("need at least 8 frames per trajectory", field="frames_per_traj")
    lo, hi = float(mu_range[0]), float(mu_range[1])
    if hi < lo:
        raise ConfigError(f"empty interval [{lo}, {hi}]", field="mu_range")
    if D < 2:
        raise ConfigError("state dimension must be at least 2", field="D")

    rng = Rng(seed).stream("dynsim")
    mapping = OscillatorMap.create(D, rng, amp=nonlin_amp)
    if center is None:
        center = 0.6 * rng.stream("center").normal(2)
    center = np.asarray(center, dtype=np.float64)
    mu_threshold = 0.5 * (lo + hi)
    S = int(frames_per_traj)
    taus = np.linspace(0.0, 1.0, S)
    alphas = np.arange(S, dtype=np.float64) / (S - 1)

    trajectories = []
    for i in range(n_traj):
        sub = rng.stream("traj").substream(i)
        mu = lo + (hi - lo) * sub.uniform()
        u = 0.0 if hi == lo else (mu - lo) / (hi - lo)
        omega = 2.0 * np.pi
        label = class_from_mu(mu, mu_threshold)
        if label == 1:
            zeta = 0.0
        else:
            zeta = zeta_max * (mu_threshold - mu) / max(mu_threshold - lo, 1e-300)
        t = taus * t_max
        # The regime parameter sets the orbit radius; phase time sets the
        # angle. Keeping the factors geometrically separate is what lets a
        # good embedding disentangle them.
        radius = (1.0 + 0.25 * u) * np.exp(-zeta * t)
        ss = center + np.stack(
            [radius * np.cos(omega * t), radius * np.sin(omega * t)], axis=1
        )
        trajectories.append(
            Trajectory(
                xs=mapping.embed(ss),
                ss=ss,
                taus=taus.copy(),
                alphas=alphas.copy(),
                mu=float(mu),
                zeta=float(zeta),
                omega=float(omega),
                class_label=label,
            )
        )

    n_test = max(1, int(round(n_traj * test_fraction)))
    order = rng.stream("split").permutation(n_traj)
    splits = ["train"] * n_traj
    for j in order[:n_test]:
        splits[j] = "test"
    return Dataset(
        trajectories=trajectories,
        splits=splits,
        seed=int(seed),
        mapping=mapping,
        mu_range=(lo, hi),
        mu_threshold=float(mu_threshold),
        t_max=float(t_max),
        center=(float(center[0]), float(center[1])),
    )


# Renderer geometry: two isotropic bumps; amplitudes are linear in the
# recovered latent coordinates (zero state -> uniform zero image) and each
# bump's center moves along a diagonal driven by the other coordinate.
_CENTER_GAIN = 0.55


def render(frame, grid, mapping):
    """Deterministic analytic grayscale field for a state frame, in [0, 1]."""
    if grid < 8:
        raise InputError("render grid must be at least 8")
    x = frame.x if isinstance(frame, StateFrame) else np.asarray(frame)
    s = mapping.invert(x)[0]
    return render_latent(s, grid)


def render_latent(s, grid):
    s1, s2 = float(s[0]), float(s[1])
    ctr = (grid - 1) / 2.0
    sigma = grid / 7.0
    c1 = (ctr * (1.0 + _CENTER_GAIN * s2), ctr * (1.0 - _CENTER_GAIN * s2))
    c2 = (ctr * (1.0 - _CENTER_GAIN * s1), ctr * (1.0 + _CENTER_GAIN * s1))
    rows = np.arange(grid, dtype=np.float64)[:, None]
    cols = np.arange(grid, dtype=np.float64)[None, :]
    bump1 = np.exp(-((rows - c1[0]) ** 2 + (cols - c1[1]) ** 2) / (2.0 * sigma**2))
    bump2 = np.exp(-((rows - c2[0]) ** 2 + (cols - c2[1]) ** 2) / (2.0 * sigma**2))
    # Magnitude of the signed field: negative-quadrant states render as
    # bright bumps too, so no seeded orbit placement can go all-dark.
    return np.clip(np.abs(s1 * bump1 + s2 * bump2), 0.0, 1.0)


def render_lipschitz_bound(grid):
    """Per-pixel bound on |d image / d latent|; slopes stay below this."""
    ctr = (grid - 1) / 2.0
    sigma = grid / 7.0
    center_term = _CENTER_GAIN * ctr * np.sqrt(2.0) * np.exp(-0.5) / sigma
    return np.sqrt(2.0) * (1.0 + center_term)


def save_dataset(ds, path):
    meta = {
        "seed": ds.seed,
        "mu_range": list(ds.mu_range),
        "mu_threshold": ds.mu_threshold,
        "t_max": ds.t_max,
        "center": list(ds.center),
        "amp": ds.mapping.amp,
        "splits": ds.splits,
        "labels": [t.class_label for t in ds.trajectories],
    }
    arrays = {
        "q": ds.mapping.q,
        "u": ds.mapping.u,
        "mus": np.array([t.mu for t in ds.trajectories]),
        "zetas": np.array([t.zeta for t in ds.trajectories]),
        "omegas": np.array([t.omega for t in ds.trajectories]),
        "xs": np.stack([t.xs for t in ds.trajectories]),
        "ss": np.stack([t.ss for t in ds.trajectories]),
        "taus": np.stack([t.taus for t in ds.trajectories]),
        "alphas": np.stack([t.alphas for t in ds.trajectories]),
    }
    binio.write_envelope(path, DATASET_MAGIC, meta, arrays)


def load_dataset(path):
    meta, arr = binio.read_envelope(path, DATASET_MAGIC)
    mapping = OscillatorMap(arr["q"], arr["u"], meta["amp"])
    trajectories = []
    for i in range(arr["xs"].shape[0]):
        trajectories.append(
            Trajectory(
                xs=arr["xs"][i],
                ss=arr["ss"][i],
                taus=arr["taus"][i],
                alphas=arr["alphas"][i],
                mu=float(arr["mus"][i]),
                zeta=float(arr["zetas"][i]),
                omega=float(arr["omegas"][i]),
                class_label=int(meta["labels"][i]),
            )
        )
    return Dataset(
        trajectories=trajectories,
        splits=list(meta["splits"]),
        seed=int(meta["seed"]),
        mapping=mapping,
        mu_range=tuple(meta["mu_range"]),
        mu_threshold=float(meta["mu_threshold"]),
        t_max=float(meta["t_max"]),
        center=tuple(meta["center"]),
    )
