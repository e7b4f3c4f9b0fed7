"""Low-discrepancy sequences, Latin hypercube designs, and the frozen
common-random-numbers (CRN) store shared by every Monte Carlo estimator."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

__all__ = [
    "CrnSet",
    "LhsDesign",
    "sobol_sequence",
    "latin_hypercube",
    "make_crn",
    "dump_crn",
]

DEFAULT_M = 300
DEFAULT_N = 1000


def sobol_sequence(dim: int, count: int, skip: int = 1) -> np.ndarray:
    """First `count` points of an (unscrambled) direction-number Sobol
    sequence in dimension `dim`, after discarding the first `skip` points.

    The all-zeros initial point is part of the standard construction, so the
    default ``skip=1`` avoids the degenerate corner of the unit cube.

    Returns
    -------
    np.ndarray of shape (count, dim) with entries in [0, 1).
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    if dim > qmc.Sobol.MAXDIM:
        raise ValueError(
            f"dim={dim} exceeds the available direction numbers "
            f"(max {qmc.Sobol.MAXDIM})"
        )
    if count == 0:
        return np.empty((0, dim))
    with warnings.catch_warnings():
        # scipy warns when count is not a power of two; the estimators here
        # rely on fixed-size frozen samples, not on dyadic balance.
        warnings.simplefilter("ignore", UserWarning)
        engine = qmc.Sobol(d=dim, scramble=False)
        if skip:
            engine.fast_forward(skip)
        return engine.random(count)


@dataclass(frozen=True)
class LhsDesign:
    """A Latin hypercube design on the unit cube: one point per axis-aligned
    stratum in each coordinate."""

    points: np.ndarray
    size: int

    def __post_init__(self):
        if self.points.shape[0] != self.size:
            raise ValueError("size does not match number of points")


def latin_hypercube(dim: int, size: int, seed: int) -> LhsDesign:
    """Seeded random Latin hypercube of `size` points on [0, 1)^dim.

    Each coordinate is a random permutation of the strata
    [k/size, (k+1)/size), with a uniform draw inside each stratum.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    cols = []
    for _ in range(dim):
        perm = rng.permutation(size)
        cols.append((perm + rng.random(size)) / size)
    return LhsDesign(points=np.column_stack(cols), size=size)


@dataclass(frozen=True)
class CrnSet:
    """Frozen common random numbers: a Sobol-derived sample of the uncertain
    variables plus a seeded block of standard normals for GP trajectories.

    The u sample and the normal block are generated once and shared by every
    estimator over the whole optimization, so estimation noise is consistent
    across candidate points and across iterations.

    Attributes
    ----------
    u_points : (M, m) array
        Uncertainty sample in raw (distribution) coordinates.
    u_unit : (M, m) array
        The same sample mapped affinely to the unit cube of the support box
        (the coordinates the GPs operate in).
    normal_block : (N, M) array
        Standard normal draws for the first trajectory stream.
    """

    u_points: np.ndarray
    u_unit: np.ndarray
    normal_block: np.ndarray
    seed: int
    M: int
    N: int
    _extra_blocks: dict = field(default_factory=dict, repr=False, compare=False)

    def normal_block_for(self, index: int) -> np.ndarray:
        """N x M standard-normal block for stream `index`.

        Stream 0 is `normal_block`; further streams (one per constraint, so
        trajectory ensembles are independent across constraints) are derived
        deterministically from the seed.
        """
        if index == 0:
            return self.normal_block
        if index not in self._extra_blocks:
            self._extra_blocks[index] = _normal_block(self.seed, index, self.N, self.M)
        return self._extra_blocks[index]


def _normal_block(seed: int, stream: int, n: int, m: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.default_rng(ss).standard_normal((n, m))


def make_crn(problem, M: int = DEFAULT_M, N: int = DEFAULT_N, seed: int = 0,
             skip: int = 1) -> CrnSet:
    """Build the frozen CRN set for `problem`.

    The u sample is the Sobol sequence mapped through the inverse CDF of the
    uncertainty distribution (so the set is a deterministic function of the
    sequence, not of an acceptance-rejection loop); the normal block is drawn
    from `seed` and never regenerated.
    """
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    unit = sobol_sequence(problem.dim_u, M, skip=skip)
    raw = problem.dist_u.ppf(unit)
    lo, hi = problem.dist_u.bounds()
    u_unit = (raw - lo) / (hi - lo)
    return CrnSet(
        u_points=raw,
        u_unit=u_unit,
        normal_block=_normal_block(seed, 0, N, M),
        seed=seed,
        M=M,
        N=N,
    )


def dump_crn(crn: CrnSet, path) -> None:
    """Write the CRN u sample and normal block to a CSV file for audit."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", crn.seed, "M", crn.M, "N", crn.N])
        writer.writerow([])
        writer.writerow([f"u{j+1}" for j in range(crn.u_points.shape[1])])
        for row in crn.u_points:
            writer.writerow([repr(v) for v in row])
        writer.writerow([])
        writer.writerow([f"w{j+1}" for j in range(crn.M)])
        for row in crn.normal_block:
            writer.writerow([repr(v) for v in row])
