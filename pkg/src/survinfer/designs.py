"""Probability sampling designs with analytic inclusion probabilities.

Supports SRSWOR, stratified SRSWOR, Bernoulli, and deterministic cut-off
designs. First- and second-order inclusion probabilities are analytic, which
keeps the Horvitz-Thompson total and variance machinery exactly unbiased
(verified by enumeration in the tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product
from typing import Callable, Iterable, Iterator, Union

import numpy as np

from .popframe import FinitePopulation
from .rng import derive_rng, srswor_indices


class DesignError(ValueError):
    """Invalid design specification or unsupported design operation."""


@dataclass(frozen=True)
class Srswor:
    n: int


@dataclass(frozen=True)
class StratifiedSrswor:
    scheme: str                     # domain scheme naming the strata
    allocation: tuple[tuple[str, int], ...]  # stratum label -> n_h

    @staticmethod
    def from_dict(scheme: str, allocation: dict[str, int]) -> "StratifiedSrswor":
        return StratifiedSrswor(scheme, tuple(sorted(allocation.items())))


@dataclass(frozen=True)
class CutOff:
    variable: str                   # feature column holding the size measure
    threshold: float


@dataclass(frozen=True)
class Bernoulli:
    pi: float


DesignKind = Union[Srswor, StratifiedSrswor, CutOff, Bernoulli]


class SamplingDesign:
    """A design kind bound to a population, with analytic pi_k and pi_kl."""

    def __init__(self, population: FinitePopulation, kind: DesignKind):
        self.population = population
        self.kind = kind
        self._pi = self._first_order()
        bad = (self._pi > 0) & ((self._pi > 1) | ~np.isfinite(self._pi))
        if bad.any():
            raise DesignError("first-order inclusion probabilities must lie in (0, 1]")

    # -- construction checks ------------------------------------------------

    def _first_order(self) -> np.ndarray:
        N = self.population.N
        kind = self.kind
        if isinstance(kind, Srswor):
            if not 1 <= kind.n <= N:
                raise DesignError(f"SRSWOR needs 1 <= n <= N, got n={kind.n}, N={N}")
            return np.full(N, kind.n / N)
        if isinstance(kind, StratifiedSrswor):
            labels = self.population.domain_values(kind.scheme)
            alloc = dict(kind.allocation)
            pi = np.zeros(N)
            for label, n_h in alloc.items():
                mask = labels == label
                N_h = int(mask.sum())
                if N_h == 0:
                    raise DesignError(f"stratum {label!r} empty in population")
                if not 1 <= n_h <= N_h:
                    raise DesignError(f"stratum {label!r}: need 1 <= n_h <= N_h={N_h}, got {n_h}")
                pi[mask] = n_h / N_h
            unallocated = set(np.unique(labels)) - set(alloc)
            if unallocated:
                raise DesignError(f"strata without allocation: {sorted(unallocated)}")
            return pi
        if isinstance(kind, CutOff):
            size = self.population.feature_column(kind.variable)
            return (size >= kind.threshold).astype(float)
        if isinstance(kind, Bernoulli):
            if not 0 < kind.pi <= 1:
                raise DesignError(f"Bernoulli pi must be in (0, 1], got {kind.pi}")
            return np.full(N, kind.pi)
        raise DesignError(f"unknown design kind {kind!r}")

    # -- probabilities ------------------------------------------------------

    @property
    def first_order(self) -> np.ndarray:
        """(N,) vector of pi_k; cut-off units below threshold have pi_k = 0."""
        return self._pi

    @property
    def probabilistic(self) -> np.ndarray:
        """Mask of units with pi_k > 0 (cut-off excludes the rest)."""
        return self._pi > 0

    def joint_inclusion(self, positions: np.ndarray) -> np.ndarray:
        """(m, m) matrix of pi_kl for the given population positions.

        Diagonal entries are pi_k. Raises for designs without computable
        joint probabilities among the requested units.
        """
        positions = np.asarray(positions, dtype=np.intp)
        pi = self._pi[positions]
        if (pi == 0).any():
            raise DesignError("joint inclusion undefined for units with pi_k = 0")
        kind = self.kind
        N = self.population.N
        if isinstance(kind, Srswor):
            n = kind.n
            off = n * (n - 1) / (N * (N - 1)) if N > 1 else 1.0
            mat = np.full((len(positions), len(positions)), off)
        elif isinstance(kind, StratifiedSrswor):
            labels = self.population.domain_values(kind.scheme)[positions]
            alloc = dict(kind.allocation)
            all_labels = self.population.domain_values(kind.scheme)
            mat = np.outer(pi, pi)  # independent across strata
            for label in np.unique(labels):
                n_h = alloc[label]
                N_h = int((all_labels == label).sum())
                same = labels == label
                if N_h > 1:
                    off = n_h * (n_h - 1) / (N_h * (N_h - 1))
                else:
                    off = 1.0
                block = np.outer(same, same)
                mat[block] = off
        elif isinstance(kind, CutOff):
            mat = np.outer(pi, pi)  # all entries 1 among included units
        elif isinstance(kind, Bernoulli):
            mat = np.full((len(positions), len(positions)), kind.pi * kind.pi)
        else:  # pragma: no cover
            raise DesignError(f"unknown design kind {kind!r}")
        np.fill_diagonal(mat, pi)
        return mat

    # -- drawing ------------------------------------------------------------

    def draw(self, rng_seed: int) -> "Sample":
        """Draw one sample; deterministic given (design, rng_seed)."""
        N = self.population.N
        kind = self.kind
        if isinstance(kind, Srswor):
            rng = derive_rng(rng_seed, 0)
            positions = srswor_indices(rng, N, kind.n)
        elif isinstance(kind, StratifiedSrswor):
            labels = self.population.domain_values(kind.scheme)
            chunks = []
            for h, (label, n_h) in enumerate(kind.allocation):
                stratum_positions = np.flatnonzero(labels == label)
                rng = derive_rng(rng_seed, h)
                chunks.append(stratum_positions[srswor_indices(rng, len(stratum_positions), n_h)])
            positions = np.sort(np.concatenate(chunks))
        elif isinstance(kind, CutOff):
            positions = np.flatnonzero(self._pi > 0)  # deterministic, seed ignored
        elif isinstance(kind, Bernoulli):
            rng = derive_rng(rng_seed, 0)
            positions = np.flatnonzero(rng.random(N) < kind.pi)
        else:  # pragma: no cover
            raise DesignError(f"unknown design kind {kind!r}")
        return Sample(design=self, positions=np.asarray(positions, dtype=np.intp))


@dataclass(frozen=True)
class Sample:
    """A realized sample: population positions plus design weights 1/pi_k."""

    design: SamplingDesign
    positions: np.ndarray

    def __post_init__(self) -> None:
        pi = self.design.first_order[self.positions]
        if (pi <= 0).any():
            raise DesignError("sample contains units with pi_k = 0")
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.intp))

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def member_ids(self) -> tuple[str, ...]:
        ids = self.design.population.ids
        return tuple(ids[i] for i in self.positions)

    @property
    def inclusion_probs(self) -> np.ndarray:
        return self.design.first_order[self.positions]

    @property
    def weights(self) -> np.ndarray:
        """Design weights d_k = 1/pi_k, finite and >= 1."""
        return 1.0 / self.inclusion_probs


YSelector = Union[None, np.ndarray, Callable[[FinitePopulation], np.ndarray]]


def _resolve_y(sample: Sample, y: YSelector) -> np.ndarray:
    pop = sample.design.population
    if y is None:
        values = pop.y_values
        if np.isnan(values[sample.positions]).any():
            missing = [pop.ids[i] for i in sample.positions if np.isnan(values[i])]
            raise DesignError(f"sampled units without observed y: {missing[:5]}")
    elif callable(y):
        values = np.asarray(y(pop), dtype=float)
    else:
        values = np.asarray(y, dtype=float)
    if values.shape != (pop.N,):
        raise DesignError("y selector must produce one value per population unit")
    return values


def ht_total(sample: Sample, y: YSelector = None) -> float:
    """Horvitz-Thompson total: sum of y_k/pi_k over the sample."""
    values = _resolve_y(sample, y)
    return float((values[sample.positions] / sample.inclusion_probs).sum())


def ht_variance_estimate(sample: Sample, y: YSelector = None) -> float:
    """Unbiased HT variance estimator.

    sum_{k,l in s} (pi_kl - pi_k pi_l)/pi_kl * (y_k/pi_k)(y_l/pi_l), with the
    diagonal using pi_kk = pi_k. Requires pi_kl > 0 for every sampled pair.
    """
    values = _resolve_y(sample, y)
    pi = sample.inclusion_probs
    pij = sample.design.joint_inclusion(sample.positions)
    off_zero = (pij == 0) & ~np.eye(len(pi), dtype=bool)
    if off_zero.any():
        raise DesignError("sampled pair with zero joint inclusion probability")
    t = values[sample.positions] / pi
    w = (pij - np.outer(pi, pi)) / pij
    return float(t @ w @ t)


def ht_true_variance(design: SamplingDesign, y: YSelector = None) -> float:
    """Design variance of the HT total by the population double sum."""
    pop = design.population
    if y is None:
        values = pop.y_values
    elif callable(y):
        values = np.asarray(y(pop), dtype=float)
    else:
        values = np.asarray(y, dtype=float)
    live = design.probabilistic
    if np.isnan(values[live]).any():
        raise DesignError("true variance needs y observed on all units with pi_k > 0")

    kind = design.kind
    pi = design.first_order
    if isinstance(kind, Bernoulli):
        return float((((1 - pi[live]) / pi[live]) * values[live] ** 2).sum())
    if isinstance(kind, CutOff):
        return 0.0
    if isinstance(kind, Srswor):
        blocks: Iterable[np.ndarray] = [np.flatnonzero(live)]
    elif isinstance(kind, StratifiedSrswor):
        labels = pop.domain_values(kind.scheme)
        blocks = [np.flatnonzero(live & (labels == lab)) for lab, _ in kind.allocation]
    else:  # pragma: no cover
        raise DesignError(f"unknown design kind {kind!r}")

    # Cross-block covariances vanish for these designs, so sum block by block.
    total = 0.0
    for block in blocks:
        if len(block) == 0:
            continue
        p = pi[block]
        pij = design.joint_inclusion(block)
        t = values[block] / p
        total += float(t @ (pij - np.outer(p, p)) @ t)
    return total


def enumerate_samples(design: SamplingDesign, cap: int = 1_000_000) -> Iterator[tuple[Sample, float]]:
    """Yield every possible (sample, probability) pair of the design.

    Intended for exact unbiasedness checks on small populations; refuses when
    the support exceeds ``cap`` samples.
    """
    N = design.population.N
    kind = design.kind
    if isinstance(kind, Srswor):
        count = math.comb(N, kind.n)
        if count > cap:
            raise DesignError(f"enumeration of {count} samples exceeds cap {cap}")
        prob = 1.0 / count
        for combo in combinations(range(N), kind.n):
            yield Sample(design, np.array(combo, dtype=np.intp)), prob
        return
    if isinstance(kind, StratifiedSrswor):
        labels = design.population.domain_values(kind.scheme)
        per_stratum = []
        count = 1
        for label, n_h in kind.allocation:
            positions = np.flatnonzero(labels == label)
            count *= math.comb(len(positions), n_h)
            per_stratum.append([np.array(c, dtype=np.intp)
                                for c in combinations(positions, n_h)])
        if count > cap:
            raise DesignError(f"enumeration of {count} samples exceeds cap {cap}")
        prob = 1.0 / count
        for combo in product(*per_stratum):
            yield Sample(design, np.sort(np.concatenate(combo))), prob
        return
    if isinstance(kind, Bernoulli):
        if 2**N > cap:
            raise DesignError(f"enumeration of 2^{N} samples exceeds cap {cap}")
        for r in range(N + 1):
            for combo in combinations(range(N), r):
                prob = kind.pi**r * (1 - kind.pi) ** (N - r)
                if r == 0:
                    continue  # empty sample carries no units; HT total is 0
                yield Sample(design, np.array(combo, dtype=np.intp)), prob
        return
    if isinstance(kind, CutOff):
        yield design.draw(0), 1.0
        return
    raise DesignError(f"unknown design kind {kind!r}")


def empty_sample_probability(design: SamplingDesign) -> float:
    """Probability mass of the empty sample (nonzero only for Bernoulli)."""
    if isinstance(design.kind, Bernoulli):
        return (1 - design.kind.pi) ** design.population.N
    return 0.0


def design_from_spec(population: FinitePopulation, spec: dict) -> SamplingDesign:
    """Build a design from a run-config mapping like {"kind": "srswor", "n": 100}."""
    spec = dict(spec)
    try:
        kind_name = spec.pop("kind")
    except KeyError:
        raise DesignError("design spec needs a 'kind' key") from None
    try:
        if kind_name == "srswor":
            kind: DesignKind = Srswor(n=int(spec.pop("n")))
        elif kind_name == "stratified":
            kind = StratifiedSrswor.from_dict(
                scheme=str(spec.pop("scheme")),
                allocation={str(k): int(v) for k, v in spec.pop("allocation").items()},
            )
        elif kind_name == "cutoff":
            kind = CutOff(variable=str(spec.pop("variable")), threshold=float(spec.pop("threshold")))
        elif kind_name == "bernoulli":
            kind = Bernoulli(pi=float(spec.pop("pi")))
        else:
            raise DesignError(f"unknown design kind {kind_name!r}")
    except KeyError as exc:
        raise DesignError(f"design spec missing key {exc}") from None
    if spec:
        raise DesignError(f"unknown design spec keys {sorted(spec)}")
    return SamplingDesign(population, kind)
