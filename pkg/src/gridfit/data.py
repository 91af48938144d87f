"""Measurement containers."""

from dataclasses import dataclass, field, replace

import numpy as np

FLAT_START = np.exp(-2j * np.pi / 3 * np.arange(3))


def source_phasors(vmag, ang_ab_deg=None, ang_ac_deg=None):
    """Phasors from three magnitudes and the a-b / a-c angle differences.

    Phase a is the angle reference.  Missing angles default to the nominal
    +120 / -120 degrees.
    """
    vmag = np.asarray(vmag, dtype=float)
    shape = vmag.shape[:-1]
    ab = np.full(shape, 120.0) if ang_ab_deg is None else np.asarray(ang_ab_deg, dtype=float)
    ac = np.full(shape, -120.0) if ang_ac_deg is None else np.asarray(ang_ac_deg, dtype=float)
    ang = np.stack([np.zeros(shape), -np.deg2rad(ab), -np.deg2rad(ac)], axis=-1)
    return vmag * np.exp(1j * ang)


def phasor_angles(u):
    """``(ang_ab_deg, ang_ac_deg)`` of a phasor stack, wrapped to (-180, 180]."""
    ang = np.angle(u)

    def wrap(d):
        d = np.rad2deg(d)
        return (d + 180.0) % 360.0 - 180.0

    return wrap(ang[..., 0] - ang[..., 1]), wrap(ang[..., 0] - ang[..., 2])


@dataclass
class TimeSeriesSet:
    """Per-meter series over instants ``t = 0..T``, all per-unit.

    ``p``/``q`` are consumption (positive = load), shape ``(T+1, M)``;
    ``v`` is the measured voltage magnitude; ``source`` holds the source node
    phasors, shape ``(T+1, 3)``.  ``v_clean`` keeps the noiseless voltages when
    the set is synthetic; ``w_true`` the generating parameters.
    """

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    source: np.ndarray
    meter_ids: tuple = ()
    w_true: np.ndarray = None
    v_clean: np.ndarray = None
    p_clean: np.ndarray = None
    q_clean: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.source = np.asarray(self.source, dtype=complex)
        if not (self.p.shape == self.q.shape == self.v.shape):
            raise ValueError("p, q and v series must have identical shapes")
        if self.source.shape != (self.p.shape[0], 3):
            raise ValueError("source series must have shape (T+1, 3)")

    @property
    def T(self):
        return self.p.shape[0] - 1

    @property
    def n_meters(self):
        return self.p.shape[1]

    @property
    def full_batch(self):
        return np.arange(1, self.T + 1)

    def subset_meters(self, cols, meter_ids=None):
        cols = list(cols)

        def pick(a):
            return None if a is None else a[:, cols]

        return replace(
            self,
            p=self.p[:, cols],
            q=self.q[:, cols],
            v=self.v[:, cols],
            v_clean=pick(self.v_clean),
            p_clean=pick(self.p_clean),
            q_clean=pick(self.q_clean),
            meter_ids=tuple(meter_ids) if meter_ids is not None else tuple(self.meter_ids[c] for c in cols),
            w_true=None,
        )
