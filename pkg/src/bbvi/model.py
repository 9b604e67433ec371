"""Model description: latent layout plus a factorized log joint.

A model is a list of :class:`Latent` entries and a list of
:class:`FactorPlate` objects. A plate is a vectorized group of log-joint
factors that share one evaluator; each member declares which latents it
depends on, one latent per named slot. The evaluator only ever sees the
gathered values of those latents, so dependency sets are exact by
construction.

Latent values for ``S`` joint draws live in a flat matrix ``Z`` of shape
``(S, n_values)``; each latent owns a contiguous block of columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .families import (
    GammaShapeRate,
    GaussianMeanLogStd,
    MeanFieldFamily,
    ordered_sum,
)


class ModelError(ValueError):
    """Raised for malformed models or failed validation."""


@dataclass(frozen=True)
class Latent:
    """One latent variable (possibly array valued).

    ``block`` is ``None`` for global latents and the observation-block index
    for local latents of a hierarchical model.
    """

    id: str
    support: str = "real"
    shape: tuple = ()
    block: int | None = None

    def __post_init__(self):
        if self.support not in ("real", "positive"):
            raise ModelError(f"unknown support {self.support!r}")

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


class FactorPlate:
    """A vectorized group of log-joint factors.

    Parameters
    ----------
    id : str
    slots : sequence of str
        Slot names handed to the evaluator.
    members : sequence of sequences of latent ids
        ``members[m][k]`` is the latent bound to slot ``k`` for member ``m``.
        Every latent bound to one slot must have the same shape.
    evaluator : callable
        ``evaluator(z, data) -> (S, M)`` where ``z[slot]`` has shape
        ``(S, M) + latent_shape`` and ``data[key]`` has leading dimension ``M``.
    data : mapping of str to array, optional
        Per-member data; every array has leading dimension ``M``.
    blocks : sequence of int or None, optional
        Data scope of each member (observation block, or ``None``).
    """

    def __init__(
        self,
        id: str,
        slots: Sequence[str],
        members: Sequence[Sequence[str]],
        evaluator: Callable,
        data: Mapping[str, np.ndarray] | None = None,
        blocks: Sequence[int | None] | None = None,
    ):
        self.id = id
        self.slots = tuple(slots)
        self.members = [tuple(m) for m in members]
        self.evaluator = evaluator
        self.data = {k: np.asarray(v) for k, v in (data or {}).items()}
        M = len(self.members)
        self.blocks = list(blocks) if blocks is not None else [None] * M
        if len(self.blocks) != M:
            raise ModelError(f"plate {id}: blocks length {len(self.blocks)} != {M} members")
        for m in self.members:
            if len(m) != len(self.slots):
                raise ModelError(f"plate {id}: member {m} does not fill slots {self.slots}")
        for k, v in self.data.items():
            if v.shape[:1] != (M,):
                raise ModelError(f"plate {id}: data {k!r} must have leading dimension {M}")

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        return f"FactorPlate({self.id!r}, {len(self)} members, slots={self.slots})"


def factor(id, depends_on, fn, data=None, block=None):
    """A single log-joint factor.

    ``fn(z, data) -> (S,)`` where ``z`` maps each latent id in ``depends_on``
    to an array of shape ``(S,) + shape``.
    """
    depends_on = tuple(depends_on)

    def evaluator(z, d):
        zz = {k: v[:, 0] for k, v in z.items()}
        dd = {k: v[0] for k, v in d.items()}
        return np.asarray(fn(zz, dd))[:, None]

    plate_data = {k: np.asarray(v)[None] for k, v in (data or {}).items()}
    return FactorPlate(id, depends_on, [depends_on], evaluator, plate_data, [block])


class ModelSpec:
    """Latent layout plus factorized log joint; immutable after construction.

    ``n_observations`` is the number of observation blocks of a hierarchical
    model (0 if the model is not hierarchical).
    """

    def __init__(self, latents: Sequence[Latent], plates: Sequence[FactorPlate],
                 n_observations: int = 0, name: str = "model"):
        self.name = name
        self.latents = list(latents)
        self.plates = list(plates)
        self.n_observations = int(n_observations)
        self.latent_ids = [lat.id for lat in self.latents]
        if len(set(self.latent_ids)) != len(self.latent_ids):
            raise ModelError("latent ids must be unique")
        self.index = {lid: i for i, lid in enumerate(self.latent_ids)}
        self.n_latents = len(self.latents)

        sizes = np.array([lat.size for lat in self.latents], dtype=int)
        self.value_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.n_values = int(self.value_offsets[-1])
        self.positive_cols = np.concatenate(
            [np.arange(self.value_offsets[i], self.value_offsets[i + 1])
             for i, lat in enumerate(self.latents) if lat.support == "positive"]
            + [np.zeros(0, dtype=int)]
        )

        # flatten plate members into one global member axis
        self.plate_offsets = np.concatenate(
            [[0], np.cumsum([len(p) for p in self.plates])]).astype(int)
        self.n_members = int(self.plate_offsets[-1])
        self.member_names = []
        self.member_blocks = np.full(self.n_members, -1, dtype=int)
        self._gather = []
        rows, cols = [], []
        for p, plate in enumerate(self.plates):
            off = self.plate_offsets[p]
            slot_idx = []
            for k, slot in enumerate(plate.slots):
                ids = [m[k] for m in plate.members]
                for lid in ids:
                    if lid not in self.index:
                        raise ModelError(f"plate {plate.id}: unknown latent {lid!r}")
                shapes = {self.latents[self.index[lid]].shape for lid in ids}
                if len(shapes) > 1:
                    raise ModelError(f"plate {plate.id}: slot {slot!r} mixes shapes {shapes}")
                shape = shapes.pop() if shapes else ()
                idx = np.array(
                    [np.arange(self.value_offsets[self.index[lid]],
                               self.value_offsets[self.index[lid] + 1]) for lid in ids],
                    dtype=int,
                ).reshape(len(ids), -1)
                slot_idx.append((slot, idx, shape))
            self._gather.append(slot_idx)
            for m, deps in enumerate(plate.members):
                j = off + m
                self.member_names.append(f"{plate.id}[{m}]")
                blk = plate.blocks[m]
                self.member_blocks[j] = -1 if blk is None else int(blk)
                for li in sorted({self.index[lid] for lid in deps}):
                    rows.append(li)
                    cols.append(j)
        # incidence: latent i appears in factor member j
        self.incidence = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n_latents, self.n_members))
        self.incidence.sort_indices()
        self._incidence_T = self.incidence.T.tocsr()
        self._check_structure()

    # structure -----------------------------------------------------------
    def _check_structure(self):
        counts = np.diff(self.incidence.indptr)
        orphans = [self.latent_ids[i] for i in np.flatnonzero(counts == 0)]
        if orphans:
            raise ModelError(f"latents not used by any factor: {orphans[:5]}")
        if self.n_observations <= 0:
            return
        blocks = np.array([-1 if lat.block is None else lat.block for lat in self.latents])
        if blocks.max(initial=-1) >= self.n_observations:
            raise ModelError("local block index out of range")
        for j in range(self.n_members):
            deps = self._incidence_T.indices[self._incidence_T.indptr[j]:self._incidence_T.indptr[j + 1]]
            b = self.member_blocks[j]
            bad = [self.latent_ids[i] for i in deps if blocks[i] not in (-1, b)]
            if bad:
                raise ModelError(
                    f"factor {self.member_names[j]} (scope {b}) touches foreign locals {bad[:3]}")

    @property
    def hierarchical(self) -> bool:
        return self.n_observations > 0

    def latent(self, latent_id) -> Latent:
        return self.latents[self._idx(latent_id)]

    def _idx(self, latent_id):
        try:
            return self.index[latent_id]
        except KeyError:
            raise ModelError(f"unknown latent id {latent_id!r}") from None

    def value_slice(self, latent_id):
        i = self._idx(latent_id)
        return slice(int(self.value_offsets[i]), int(self.value_offsets[i + 1]))

    def factors_of(self, latent_id) -> np.ndarray:
        """Indices of factor members whose dependency set contains the latent."""
        i = self._idx(latent_id)
        return self.incidence.indices[self.incidence.indptr[i]:self.incidence.indptr[i + 1]]

    def depends_on(self, member: int) -> set[str]:
        T = self._incidence_T
        return {self.latent_ids[i] for i in T.indices[T.indptr[member]:T.indptr[member + 1]]}

    def markov_blanket(self, latent_id) -> set[str]:
        """Latents sharing at least one factor with ``latent_id``."""
        out = set()
        for j in self.factors_of(latent_id):
            out |= self.depends_on(j)
        out.discard(latent_id)
        return out

    def interaction_graph(self) -> sparse.csr_matrix:
        """Boolean latent-latent adjacency (shared factor), without self loops."""
        A = self.incidence
        G = (A @ A.T).tocsr()
        G.setdiag(0)
        G.eliminate_zeros()
        return G

    def default_family(self, positive_kind=GammaShapeRate) -> MeanFieldFamily:
        """Gaussian factors for real latents, gamma factors for positive ones."""
        return MeanFieldFamily(
            [(lat.id, (positive_kind if lat.support == "positive" else GaussianMeanLogStd)(lat.size))
             for lat in self.latents])

    def check_family(self, family: MeanFieldFamily):
        if family.latent_ids != self.latent_ids:
            raise ModelError("family latents do not match the model layout")
        for lat, kind in zip(self.latents, family.kinds):
            if kind.dim != lat.size or kind.support != lat.support:
                raise ModelError(f"family factor for {lat.id} does not match its support/size")

    # evaluation ----------------------------------------------------------
    def as_values(self, z: Mapping[str, np.ndarray]) -> np.ndarray:
        """Pack a ``{latent_id: value}`` assignment into a ``(1, n_values)`` row."""
        Z = np.empty((1, self.n_values))
        for lid in self.latent_ids:
            if lid not in z:
                raise ModelError(f"assignment misses latent {lid!r}")
            Z[0, self.value_slice(lid)] = np.ravel(z[lid])
        return Z

    def unpack(self, row) -> dict:
        row = np.asarray(row, dtype=float)
        return {lat.id: row[self.value_slice(lat.id)].reshape(lat.shape) for lat in self.latents}

    def _out_of_support(self, Z):
        """(S, n_members) mask of factor members touching an off-support value."""
        if self.positive_cols.size == 0:
            return None
        bad_cols = ~(Z[:, self.positive_cols] > 0)
        if not bad_cols.any():
            return None
        bad_lat = np.zeros((Z.shape[0], self.n_latents), dtype=float)
        col_latent = np.searchsorted(self.value_offsets, self.positive_cols, side="right") - 1
        np.add.at(bad_lat, (slice(None), col_latent), bad_cols)
        return (self.incidence.T @ bad_lat.T).T > 0

    def evaluate(self, Z, members=None) -> np.ndarray:
        """Factor-member log values ``F`` of shape ``(S, n_members)``.

        ``members`` optionally restricts evaluation to a boolean mask over
        members; skipped members are reported as 0. Members touching a value
        outside its latent's support are set to ``-inf``.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        S = Z.shape[0]
        F = np.zeros((S, self.n_members))
        with np.errstate(all="ignore"):
            for p, plate in enumerate(self.plates):
                off, end = self.plate_offsets[p], self.plate_offsets[p + 1]
                sel = None if members is None else np.flatnonzero(members[off:end])
                if sel is not None and sel.size == 0:
                    continue
                z = {}
                for slot, idx, shape in self._gather[p]:
                    g = idx if sel is None else idx[sel]
                    z[slot] = Z[:, g].reshape((S, g.shape[0]) + tuple(shape))
                data = plate.data if sel is None else {k: v[sel] for k, v in plate.data.items()}
                vals = np.asarray(plate.evaluator(z, data), dtype=float)
                if sel is None:
                    F[:, off:end] = vals
                else:
                    F[:, off + sel] = vals
        bad = self._out_of_support(Z)
        if bad is not None:
            if members is not None:
                bad &= np.asarray(members, dtype=bool)[None, :]
            F[bad] = -np.inf
        return F

    def log_joint(self, Z, F=None) -> np.ndarray:
        """``log p(x, z)`` per row of ``Z``: sum over factor members in order."""
        if F is None:
            F = self.evaluate(Z)
        return ordered_sum(F, axis=1)

    def local_log_joints(self, F) -> np.ndarray:
        """``(S, n_latents)``: for each latent, the sum of factors that contain it."""
        return np.asarray((self.incidence @ F.T).T)

    def local_log_joint(self, Z, latent_id, F=None) -> np.ndarray:
        js = self.factors_of(latent_id)
        if F is None:
            mask = np.zeros(self.n_members, dtype=bool)
            mask[js] = True
            F = self.evaluate(Z, mask)
        return ordered_sum(F[:, js], axis=1)

    def random_point(self, rng, S=1) -> np.ndarray:
        """Prior-ish random values: N(0, 1) for reals, log-normal for positives."""
        Z = rng.standard_normal((S, self.n_values))
        Z[:, self.positive_cols] = np.exp(Z[:, self.positive_cols])
        return Z

    def validate(self, rng=None, n_points=100, points=None):
        """Evaluate the log joint at random points and reject NaN results."""
        rng = np.random.default_rng(0) if rng is None else rng
        Z = self.random_point(rng, n_points) if points is None else np.atleast_2d(points)
        F = self.evaluate(Z)
        if np.isnan(F).any():
            j = int(np.flatnonzero(np.isnan(F).any(axis=0))[0])
            raise ModelError(f"factor {self.member_names[j]} produced NaN during validation")
        return self


def log_joint(model: ModelSpec, z) -> float:
    """Log joint of a single assignment ``{latent_id: value}`` or flat row."""
    Z = model.as_values(z) if isinstance(z, Mapping) else np.atleast_2d(z)
    return float(model.log_joint(Z)[0])


def local_log_joint(model: ModelSpec, z, latent_id) -> float:
    Z = model.as_values(z) if isinstance(z, Mapping) else np.atleast_2d(z)
    return float(model.local_log_joint(Z, latent_id)[0])


def markov_blanket(model: ModelSpec, latent_id) -> set[str]:
    return model.markov_blanket(latent_id)
