"""Feeder topology, line-parameter vectors and nodal admittance assembly.

Conventions used throughout the package:

* node ``nodes[0]`` is the source; the remaining ``N`` nodes carry state,
  indexed ``0..N-1`` in file order.
* the parameter vector ``w`` has 12 entries per line, lines in file order,
  ``[raa, rab, rac, rbb, rbc, rcc, xaa, xab, xac, xbb, xbc, xcc]`` per line.
  The admittance vector ``xi`` uses the same layout with ``g``/``b``.
* the real state of one node is ``[Re ua, Re ub, Re uc, Im ua, Im ub, Im uc]``.
* everything internal is per-unit: line-to-neutral voltage base and
  per-phase power base (``base_kva / 3``).
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .blockmath import COND_CAP, SingularMatrix, embed, woodbury_parts
from .errors import FeederError, MissingReading, UnknownConnection

PHASES = "abc"
UPPER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
PARAM_NAMES = tuple(f"r{PHASES[i]}{PHASES[j]}" for i, j in UPPER) + tuple(
    f"x{PHASES[i]}{PHASES[j]}" for i, j in UPPER
)
CONNECTIONS = ("AN", "BN", "CN", "AB", "BC", "CA", "ABC")

# phase weights used to spread a metered complex power over the node phases
_SPREAD = {
    "AN": (1.0, 0.0, 0.0),
    "BN": (0.0, 1.0, 0.0),
    "CN": (0.0, 0.0, 1.0),
    "AB": (0.5, 0.5, 0.0),
    "BC": (0.0, 0.5, 0.5),
    "CA": (0.5, 0.0, 0.5),
    "ABC": (1 / 3, 1 / 3, 1 / 3),
}


def sym_from_upper(vals):
    """3x3 symmetric matrices from the 6 upper-triangle values (last axis)."""
    vals = np.asarray(vals, dtype=float)
    out = np.empty(vals.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(UPPER):
        out[..., i, j] = vals[..., k]
        out[..., j, i] = vals[..., k]
    return out


def upper_from_sym(mat):
    mat = np.asarray(mat)
    return np.stack([mat[..., i, j] for i, j in UPPER], axis=-1)


@dataclass(frozen=True)
class LineParameters:
    """Upper-triangle resistance and reactance of one line, per-unit."""

    r: tuple
    x: tuple

    def __post_init__(self):
        if len(self.r) != 6 or len(self.x) != 6:
            raise FeederError("a line needs exactly 6 r and 6 x values")
        object.__setattr__(self, "r", tuple(float(v) for v in self.r))
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))

    @classmethod
    def from_matrices(cls, R, X):
        return cls(tuple(upper_from_sym(R)), tuple(upper_from_sym(X)))

    @classmethod
    def from_vector(cls, vals):
        vals = list(vals)
        return cls(tuple(vals[:6]), tuple(vals[6:]))

    @property
    def R(self):
        return sym_from_upper(self.r)

    @property
    def X(self):
        return sym_from_upper(self.x)

    @property
    def Z(self):
        return self.R + 1j * self.X

    def as_vector(self):
        return np.array(self.r + self.x)

    def scaled(self, factor):
        return LineParameters(tuple(v * factor for v in self.r), tuple(v * factor for v in self.x))


@dataclass(frozen=True)
class Line:
    name: str
    from_node: str
    to_node: str
    params: LineParameters


@dataclass(frozen=True)
class LoadSpec:
    """A metered load.

    ``phase`` is the phase whose voltage magnitude a three-phase (``ABC``)
    meter reports; it is ignored for other connections.
    """

    meter_id: str
    node: str
    connection: str
    phase: str = "a"
    pseudo: bool = False

    def __post_init__(self):
        if self.connection not in CONNECTIONS:
            raise UnknownConnection(f"meter {self.meter_id}: unknown connection {self.connection!r}")
        if self.phase not in PHASES:
            raise UnknownConnection(f"meter {self.meter_id}: unknown phase {self.phase!r}")

    @property
    def measured_phases(self):
        """Phase indices entering the meter voltage: one, or an ordered pair."""
        if self.connection == "ABC":
            return (PHASES.index(self.phase),)
        if len(self.connection) == 2 and self.connection[1] == "N":
            return (PHASES.index(self.connection[0].lower()),)
        return tuple(PHASES.index(c.lower()) for c in self.connection)


@dataclass(frozen=True)
class FeederModel:
    nodes: tuple
    lines: tuple
    loads: tuple
    base_kv: float = 4.16
    base_kva: float = 5000.0
    name: str = "feeder"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "loads", tuple(self.loads))
        self._validate()

    def _validate(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise FeederError("duplicate node ids")
        if len(self.nodes) < 2:
            raise FeederError("a feeder needs a source and at least one other node")
        known = set(self.nodes)
        for line in self.lines:
            if line.from_node not in known or line.to_node not in known:
                raise FeederError(f"line {line.name} references an unknown node")
            if line.from_node == line.to_node:
                raise FeederError(f"line {line.name} has identical endpoints")
        if len({ln.name for ln in self.lines}) != len(self.lines):
            raise FeederError("duplicate line names")
        for load in self.loads:
            if load.node not in known:
                raise FeederError(f"meter {load.meter_id} references unknown node {load.node}")
            if load.node == self.source:
                raise FeederError(f"meter {load.meter_id} sits on the source node")
        if len({ld.meter_id for ld in self.loads}) != len(self.loads):
            raise FeederError("duplicate meter ids")
        # connectivity
        seen = {self.source}
        stack = [self.source]
        adj = self.adjacency
        while stack:
            n = stack.pop()
            for k, _ in adj[n]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        if seen != known:
            raise FeederError(f"feeder is not connected: {sorted(known - seen)} unreachable")

    @property
    def source(self):
        return self.nodes[0]

    @property
    def state_nodes(self):
        return self.nodes[1:]

    @property
    def n_state(self):
        return len(self.nodes) - 1

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def n_meters(self):
        return len(self.loads)

    @cached_property
    def state_index(self):
        """Map node id -> state index; the source maps to -1."""
        idx = {n: i - 1 for i, n in enumerate(self.nodes)}
        return idx

    @cached_property
    def adjacency(self):
        adj = {n: [] for n in self.nodes}
        for li, line in enumerate(self.lines):
            adj[line.from_node].append((line.to_node, li))
            adj[line.to_node].append((line.from_node, li))
        return adj

    @property
    def v_base(self):
        """Line-to-neutral voltage base in volts."""
        return self.base_kv * 1000.0 / np.sqrt(3.0)

    @property
    def s_base(self):
        """Per-phase power base in kVA."""
        return self.base_kva / 3.0

    @property
    def z_base(self):
        """Impedance base in ohms."""
        return self.base_kv**2 * 1000.0 / self.base_kva

    def params_vector(self):
        return np.concatenate([ln.params.as_vector() for ln in self.lines]) if self.lines else np.zeros(0)

    def with_params(self, w):
        w = np.asarray(w, dtype=float)
        check_vector_length(w, self.n_lines)
        lines = tuple(
            replace(ln, params=LineParameters.from_vector(w[12 * i : 12 * i + 12]))
            for i, ln in enumerate(self.lines)
        )
        return replace(self, lines=lines)

    def line_index(self, a, b):
        """Index of the line joining nodes ``a`` and ``b`` (either orientation)."""
        for li, ln in enumerate(self.lines):
            if {ln.from_node, ln.to_node} == {a, b}:
                return li
        raise FeederError(f"no line between {a} and {b}")


def check_vector_length(w, n_lines):
    if w.shape != (12 * n_lines,):
        raise FeederError(f"parameter vector must have length {12 * n_lines}, got {w.shape}")


def line_matrices(w):
    """``(R, X)`` stacks of shape ``(L, 3, 3)`` from a parameter vector."""
    w = np.asarray(w, dtype=float).reshape(-1, 2, 6)
    return sym_from_upper(w[:, 0]), sym_from_upper(w[:, 1])


def vector_from_matrices(R, X):
    return np.concatenate([upper_from_sym(R), upper_from_sym(X)], axis=-1).reshape(-1)


def _line_admittances(w, cond_cap=COND_CAP):
    R, X = line_matrices(w)
    try:
        G, B, _ = woodbury_parts(R, X, cond_cap)
        return G, B
    except SingularMatrix:
        pass
    # locate the offending line for the message
    G = np.empty_like(R)
    B = np.empty_like(X)
    for li in range(R.shape[0]):
        try:
            G[li], B[li], _ = woodbury_parts(R[li], X[li], cond_cap)
        except SingularMatrix as exc:
            raise SingularMatrix(f"line {li}: {exc}") from None
    return G, B


def params_to_admittance(w, cond_cap=COND_CAP):
    """Line conductances/susceptances ``xi`` in the parameter-vector layout.

    ``G = (R + X R^-1 X)^-1`` and ``B = -G X R^-1`` per line.
    """
    G, B = _line_admittances(w, cond_cap)
    return vector_from_matrices(G, B)


def admittance_to_params(xi, cond_cap=COND_CAP):
    """Inverse map of :func:`params_to_admittance` (the same split, applied to G + jB)."""
    return params_to_admittance(xi, cond_cap)


def embed_nodewise(mat, n):
    """Real form of a ``3n x 3n`` complex matrix in node-wise ``[Re; Im]`` ordering."""
    blocks = mat.reshape(n, 3, n, 3).transpose(0, 2, 1, 3)
    emb = embed(blocks)  # (n, n, 6, 6)
    return emb.transpose(0, 2, 1, 3).reshape(6 * n, 6 * n)


@dataclass(frozen=True)
class NodalAdmittanceCache:
    """Per-w admittance data.

    ``y_line[l] = Z_l^-1``; ``y_nn[n] = sum of y_line over lines at n``;
    ``z_nn = y_nn^-1``.  ``ynb`` couples state nodes to state neighbours
    (``+Y_nk``) and ``ysrc`` couples them to the source, so the transition
    reads ``u = Z (conj(s)/conj(u) + ynb u + ysrc u0)``.
    """

    y_line: np.ndarray
    y_nn: np.ndarray
    z_nn: np.ndarray
    ynb: np.ndarray
    ysrc: np.ndarray
    zblk: np.ndarray
    xi: np.ndarray
    G: np.ndarray
    B: np.ndarray

    @property
    def n_state(self):
        return self.z_nn.shape[0]

    @cached_property
    def y_line_blk(self):
        return embed(self.y_line)

    @cached_property
    def z_nn_blk(self):
        return embed(self.z_nn)

    @cached_property
    def k_state(self):
        """``zblk @ ynb``: linear neighbour part of the transition."""
        return self.zblk @ self.ynb

    @cached_property
    def k_src(self):
        return self.zblk @ self.ysrc

    @cached_property
    def zblk_real(self):
        return embed_nodewise(self.zblk, self.n_state)

    @cached_property
    def ynb_real(self):
        return embed_nodewise(self.ynb, self.n_state)

    @cached_property
    def neighbours(self):
        """Sparse node adjacency ``(ptr, idx, y, y_real)`` of the state-to-state couplings.

        Entries of node ``n`` are ``ptr[n]:ptr[n+1]``; ``y[e]`` is the 3x3
        block ``Y_nk`` for ``k = idx[e]`` and ``y_real[e]`` its embedding.
        """
        n = self.n_state
        blocks = self.ynb.reshape(n, 3, n, 3).transpose(0, 2, 1, 3)
        nz = np.any(blocks != 0, axis=(2, 3))
        ptr = np.zeros(n + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(nz.sum(axis=1))
        rows, cols = np.nonzero(nz)
        y = np.ascontiguousarray(blocks[rows, cols])
        return ptr, cols.astype(np.int64), y, np.ascontiguousarray(embed(y))

    @cached_property
    def ysrc_blocks(self):
        return np.ascontiguousarray(self.ysrc.reshape(self.n_state, 3, 3))

    @cached_property
    def k_real(self):
        """Real form of ``zblk @ ynb``: the neighbour Jacobian of the transition."""
        return self.zblk_real @ self.ynb_real


def assemble_admittance(model, w=None, cond_cap=COND_CAP):
    """Build the :class:`NodalAdmittanceCache` for ``model`` at parameters ``w``."""
    w = model.params_vector() if w is None else np.asarray(w, dtype=float)
    check_vector_length(w, model.n_lines)
    G, B = _line_admittances(w, cond_cap)
    y_line = G + 1j * B
    n = model.n_state
    idx = model.state_index
    y_nn = np.zeros((n, 3, 3), dtype=complex)
    ynb = np.zeros((3 * n, 3 * n), dtype=complex)
    ysrc = np.zeros((3 * n, 3), dtype=complex)
    for li, ln in enumerate(model.lines):
        a, b = idx[ln.from_node], idx[ln.to_node]
        y = y_line[li]
        for p, q in ((a, b), (b, a)):
            if p < 0:
                continue
            y_nn[p] += y
            if q < 0:
                ysrc[3 * p : 3 * p + 3] += y
            else:
                ynb[3 * p : 3 * p + 3, 3 * q : 3 * q + 3] += y
    try:
        re, im, _ = woodbury_parts(y_nn.real, y_nn.imag, cond_cap)
    except SingularMatrix as exc:
        for p in range(n):
            try:
                woodbury_parts(y_nn[p].real, y_nn[p].imag, cond_cap)
            except SingularMatrix as one:
                raise SingularMatrix(f"node {model.state_nodes[p]}: {one}") from None
        raise exc
    z_nn = re + 1j * im
    zblk = np.zeros((3 * n, 3 * n), dtype=complex)
    for p in range(n):
        zblk[3 * p : 3 * p + 3, 3 * p : 3 * p + 3] = z_nn[p]
    return NodalAdmittanceCache(
        y_line=y_line,
        y_nn=y_nn,
        z_nn=z_nn,
        ynb=ynb,
        ysrc=ysrc,
        zblk=zblk,
        xi=vector_from_matrices(G, B),
        G=G,
        B=B,
    )


def injection_matrix(model):
    """Real ``(3N, M)`` matrix mapping metered consumption to phase injections.

    Injection (generation positive) is ``-injection_matrix @ (p + jq)``.
    Single-phase meters map to their phase, ``ABC`` meters split equally over
    three phases, delta meters put half on each involved phase.
    """
    n = model.n_state
    idx = model.state_index
    mat = np.zeros((3 * n, model.n_meters))
    for m, load in enumerate(model.loads):
        node = idx[load.node]
        mat[3 * node : 3 * node + 3, m] = _SPREAD[load.connection]
    return mat


def injections_from_meters(model, p, q):
    """Nodal three-phase complex injections from metered consumption.

    ``p``/``q`` are per-unit consumption arrays of shape ``(M,)`` or
    ``(T, M)``; returns ``(N, 3)`` or ``(T, N, 3)`` complex injections.
    Missing readings (NaN) raise :class:`MissingReading`.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    bad = ~np.isfinite(p) | ~np.isfinite(q)
    if np.any(bad):
        m = np.argwhere(bad)[0][-1]
        raise MissingReading(f"meter {model.loads[m].meter_id} has no reading")
    mat = injection_matrix(model)
    s = -(p + 1j * q) @ mat.T
    return s.reshape(s.shape[:-1] + (model.n_state, 3))


def features(s):
    """Real feature vectors ``[Re s; Im s]`` per node, shape ``(..., N, 6)``."""
    return np.concatenate([s.real, s.imag], axis=-1)


def u_to_x(u):
    """Complex node voltages ``(..., N, 3)`` -> stacked real state ``(..., 6N)``."""
    x = np.concatenate([u.real, u.imag], axis=-1)
    return x.reshape(x.shape[:-2] + (-1,))


def x_to_u(x):
    x = np.asarray(x)
    x = x.reshape(x.shape[:-1] + (-1, 6))
    return x[..., :3] + 1j * x[..., 3:]


@dataclass(frozen=True)
class Incidence:
    """Line-end bookkeeping used by the gradient code.

    One entry per (state node, incident line); ``other`` is the state index
    of the far end or -1 for the source.
    """

    node: np.ndarray
    line: np.ndarray
    other: np.ndarray
    lines_at: tuple = field(default=())


def incidences(model):
    idx = model.state_index
    node, line, other = [], [], []
    for li, ln in enumerate(model.lines):
        a, b = idx[ln.from_node], idx[ln.to_node]
        for p, q in ((a, b), (b, a)):
            if p >= 0:
                node.append(p)
                line.append(li)
                other.append(q)
    lines_at = tuple(tuple(l for nd, l in zip(node, line) if nd == p) for p in range(model.n_state))
    return Incidence(np.array(node, dtype=int), np.array(line, dtype=int), np.array(other, dtype=int), lines_at)
