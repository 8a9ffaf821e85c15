"""Exact information measures on small discrete joints and brute-force bound checks.

Everything is computed from full probability tables in nats; no sampling. Axis
names used throughout: ``X`` (input), ``Xp`` (same-class partner of ``X``),
``Y`` (true label), ``Yt`` (observed, possibly corrupted label), ``Z``
(representation).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_INPUTS = 8
MAX_CODOMAIN = 4
SUM_TOL = 1e-12


class EnumerationGuardError(ValueError):
    """The requested exhaustive search is larger than the hard limits allow."""


# ---------------------------------------------------------------- generic measures


@dataclass(frozen=True)
class Joint:
    """A probability table with one named axis per random variable."""

    table: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", t)
        if t.ndim != len(self.names) or len(set(self.names)) != len(self.names):
            raise ValueError(f"need one distinct name per axis, got {self.names} for shape {t.shape}")
        if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-9:
            raise ValueError("table must be non-negative and sum to 1")

    def axes(self, names: Iterable[str]) -> tuple[int, ...]:
        out = []
        for n in names:
            if n not in self.names:
                raise ValueError(f"unknown variable {n!r}; have {self.names}")
            out.append(self.names.index(n))
        return tuple(out)

    def marginal(self, names: Sequence[str]) -> np.ndarray:
        keep = self.axes(names)
        drop = tuple(i for i in range(self.table.ndim) if i not in keep)
        m = self.table.sum(axis=drop)
        # put the kept axes in the requested order
        order = sorted(keep)
        return np.transpose(m, [order.index(k) for k in keep]) if m.ndim > 1 else m


def _plogp_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(joint: Joint, names: Sequence[str]) -> float:
    if not names:
        return 0.0
    return _plogp_sum(joint.marginal(list(names)).reshape(-1))


def conditional_entropy(joint: Joint, target: Sequence[str], given: Sequence[str] = ()) -> float:
    return entropy(joint, [*target, *given]) - entropy(joint, list(given))


def mutual_info(joint: Joint, a: Sequence[str], b: Sequence[str]) -> float:
    return conditional_mutual_info(joint, a, b, ())


def conditional_mutual_info(joint: Joint, a: Sequence[str], b: Sequence[str],
                            given: Sequence[str] = ()) -> float:
    """``I(A; B | C) = H(A, C) + H(B, C) - H(A, B, C) - H(C)``, clipped at 0 against round-off."""
    a, b, given = list(a), list(b), list(given)
    if set(a) & set(b) or (set(a) | set(b)) & set(given):
        raise ValueError("variable groups must be disjoint")
    val = (entropy(joint, a + given) + entropy(joint, b + given)
           - entropy(joint, a + b + given) - entropy(joint, given))
    return max(val, 0.0)


def info_measures(joint: Joint, query: str, a: Sequence[str] = (), b: Sequence[str] = (),
                  given: Sequence[str] = ()) -> float:
    """Dispatch on ``query`` in {entropy, conditional_entropy, mutual_info, conditional_mutual_info}."""
    if not a or (query.endswith("mutual_info") and not b):
        raise ValueError(f"{query} needs a non-empty variable selection")
    if query == "entropy":
        return entropy(joint, a)
    if query == "conditional_entropy":
        return conditional_entropy(joint, a, given)
    if query == "mutual_info":
        if given:
            raise ValueError("mutual_info takes no conditioning set")
        return mutual_info(joint, a, b)
    if query == "conditional_mutual_info":
        return conditional_mutual_info(joint, a, b, given)
    raise ValueError(f"unknown query {query!r}")


def binary_entropy(p: float) -> float:
    return _plogp_sum(np.array([p, 1.0 - p]))


# ---------------------------------------------------------------- the (X, Y, Yt) model


@dataclass(frozen=True)
class DiscreteJoint:
    """``p(x, y, yt)`` over a finite product.

    With ``markov=True`` (the default) construction checks ``p(yt | x, y) = p(yt | y)``.
    Instance-dependent corruption, where the observed label also depends on
    ``x``, needs ``markov=False``.
    """

    table: np.ndarray
    markov: bool = True

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", t)
        if t.ndim != 3:
            raise ValueError("table must have axes (X, Y, Yt)")
        if np.any(t < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(t.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {t.sum()!r}, not 1")
        if self.markov and not self.is_markov():
            raise ValueError("p(yt | x, y) depends on x; pass markov=False for instance-dependent noise")

    @classmethod
    def from_channel(cls, p_xy, channel) -> DiscreteJoint:
        """Class-conditional corruption: ``p(x, y, yt) = p(x, y) T[y, yt]``."""
        p_xy = np.asarray(p_xy, dtype=np.float64)
        T = np.asarray(channel, dtype=np.float64)
        if np.any(np.abs(T.sum(axis=1) - 1.0) > SUM_TOL):
            raise ValueError("channel rows must sum to 1")
        return cls(p_xy[:, :, None] * T[None, :, :])

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.table.shape

    def is_markov(self, tol: float = 1e-12) -> bool:
        t = self.table
        p_xy = t.sum(axis=2)
        p_y_yt = t.sum(axis=0)
        p_y = p_y_yt.sum(axis=1)
        # p(x,y,yt) p(y) == p(x,y) p(y,yt) everywhere
        return bool(np.all(np.abs(t * p_y[None, :, None] - p_xy[:, :, None] * p_y_yt[None]) <= tol))

    def joint(self) -> Joint:
        return Joint(self.table, ("X", "Y", "Yt"))

    def extended(self) -> Joint:
        """Add the same-class partner: ``p(x, xp, y, yt) = p(x, y, yt) p(xp | y)``."""
        p_xy = self.table.sum(axis=2)
        p_y = p_xy.sum(axis=0)
        if np.any(p_y <= 0):
            raise ValueError("every class needs positive probability")
        p_x_given_y = p_xy / p_y[None, :]
        ext = self.table[:, None, :, :] * p_x_given_y[None, :, :, None]
        return Joint(ext, ("X", "Xp", "Y", "Yt"))


def positive_pair_joint(D: DiscreteJoint) -> np.ndarray:
    """``p(x, xp) = sum_y p(y) p(x|y) p(xp|y)``: two draws that share a class."""
    p_xy = D.table.sum(axis=2)
    p_y = p_xy.sum(axis=0)
    if np.any(p_y <= 0):
        raise ValueError("every class needs positive probability")
    return (p_xy / p_y[None, :]) @ p_xy.T


@dataclass(frozen=True)
class EpsilonGammaReport:
    epsilon: float
    gamma: float
    satisfied: bool | None = None


def epsilon_gamma(D: DiscreteJoint, eps: float | None = None,
                  gamma: float | None = None) -> EpsilonGammaReport:
    """``I(X; Y | Xp)`` and ``I(X; Yt | Xp)``; ``satisfied`` answers a queried ``(eps, gamma)``."""
    J = D.extended()
    e = conditional_mutual_info(J, ["X"], ["Y"], ["Xp"])
    g = conditional_mutual_info(J, ["X"], ["Yt"], ["Xp"])
    sat = None
    if eps is not None and gamma is not None:
        sat = bool(e <= eps and g > gamma and gamma > eps)
    return EpsilonGammaReport(e, g, sat)


# ---------------------------------------------------------------- representations


@dataclass(frozen=True)
class RepresentationMap:
    table: tuple[int, ...]
    m: int

    def __post_init__(self):
        if self.m < 1 or any(not 0 <= z < self.m for z in self.table):
            raise ValueError("map values must lie in [0, m)")

    def onehot(self) -> np.ndarray:
        return np.eye(self.m)[list(self.table)]

    @classmethod
    def identity(cls, n: int) -> RepresentationMap:
        return cls(tuple(range(n)), n)

    @classmethod
    def constant(cls, n: int) -> RepresentationMap:
        return cls((0,) * n, 1)


def with_representation(D: DiscreteJoint, zmap: RepresentationMap) -> Joint:
    """Joint over ``(X, Xp, Y, Yt, Z)`` with ``Z = zmap(X)``."""
    if len(zmap.table) != D.sizes[0]:
        raise ValueError("map must be defined on every x")
    ext = D.extended().table
    full = ext[..., None] * zmap.onehot()[:, None, None, None, :]
    return Joint(full, ("X", "Xp", "Y", "Yt", "Z"))


def _mi_rows(p: np.ndarray) -> np.ndarray:
    """Mutual information of each 2-D table ``p[k]``."""
    pa = p.sum(axis=2, keepdims=True)
    pb = p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / (pa * pb)), 0.0)
    return terms.sum(axis=(1, 2))


def enumerate_maps(n: int, m: int) -> np.ndarray:
    """All maps ``{0..n-1} -> {0..m-1}`` in lexicographic order, one per row."""
    if n > MAX_INPUTS or m > MAX_CODOMAIN:
        raise EnumerationGuardError(
            f"refusing to enumerate {m}^{n} maps (limits: |X| <= {MAX_INPUTS}, m <= {MAX_CODOMAIN})")
    return np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64).reshape(-1, n)


@dataclass
class ZStarResult:
    zmap: RepresentationMap
    value: float
    ceiling: float
    n_maps: int
    n_ties: int


def brute_force_zstar(D: DiscreteJoint, m: int, tol: float = 1e-12) -> ZStarResult:
    """Deterministic ``Z = g(X)`` with ``|Z| <= m`` maximising ``I(Z; Xp)``.

    Ties within ``tol`` go to the lexicographically first map.
    """
    n = D.sizes[0]
    maps = enumerate_maps(n, m)
    pxx = positive_pair_joint(D)
    onehot = np.eye(m)[maps]                          # (M, n, m)
    pz_xp = np.einsum("kxz,xp->kzp", onehot, pxx)     # (M, m, n)
    values = _mi_rows(pz_xp)
    best = values.max()
    winners = np.flatnonzero(values >= best - tol)
    k = int(winners[0])
    if np.any(values > values[k] + tol):
        raise AssertionError("selected map is not a maximiser")
    ceiling = _mi_rows(pxx[None])[0]
    return ZStarResult(RepresentationMap(tuple(int(v) for v in maps[k]), m), float(values[k]),
                       float(ceiling), len(maps), len(winners))


# ---------------------------------------------------------------- theorem / lemma checks


@dataclass
class Theorem2Report:
    I_XY: float
    I_ZY: float
    I_XYt: float
    I_ZYt: float
    epsilon: float
    gamma: float
    I_ZXp: float
    I_XXp: float
    zmap: tuple[int, ...]
    precondition: bool
    eq2_lower: bool | None = None
    eq2_upper: bool | None = None
    eq3: bool | None = None
    markov: bool = True
    tol: float = 1e-9

    @property
    def passed(self) -> bool | None:
        if not self.precondition:
            return None
        return bool(self.eq2_lower and self.eq2_upper and self.eq3)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["zmap"] = list(self.zmap)
        d["passed"] = self.passed
        return d


def verify_theorem2(D: DiscreteJoint, m: int, tol: float = 1e-9) -> Theorem2Report:
    """Check both sandwich bounds and the corrupted-label bound at ``Z*``.

    ``epsilon`` and ``gamma`` are taken at their exact values, the tightest
    choice the definition admits. With ``gamma <= epsilon`` the precondition
    fails and no inequality is asserted.
    """
    z = brute_force_zstar(D, m)
    J = with_representation(D, z.zmap)
    eg = epsilon_gamma(D)
    rep = Theorem2Report(
        I_XY=mutual_info(J, ["X"], ["Y"]), I_ZY=mutual_info(J, ["Z"], ["Y"]),
        I_XYt=mutual_info(J, ["X"], ["Yt"]), I_ZYt=mutual_info(J, ["Z"], ["Yt"]),
        epsilon=eg.epsilon, gamma=eg.gamma, I_ZXp=z.value, I_XXp=z.ceiling,
        zmap=z.zmap.table, precondition=eg.gamma > eg.epsilon, markov=D.is_markov(), tol=tol)
    if rep.precondition:
        rep.eq2_lower = rep.I_ZY >= rep.I_XY - rep.epsilon - tol
        rep.eq2_upper = rep.I_ZY <= rep.I_XY + tol
        rep.eq3 = rep.I_ZYt <= rep.I_XYt - rep.gamma + rep.epsilon + tol
    return rep


@dataclass
class Lemma1Result:
    error: float
    bound: float | None
    vacuous: bool
    holds: bool
    # same numerator over log|Yt| - 1, as the lemma is stated in the main text
    stated_bound: float | None
    stated_holds: bool | None


def lemma1_bound(p_z_yt, classifier: Sequence[int], tol: float = 1e-9) -> Lemma1Result:
    """Fano-style lower bound on the error of ``yhat = classifier[z]`` against ``Yt``.

    Bound: ``(H(Yt) - I(Z; Yt) - H(e)) / log(|Yt| - 1)``. Two label values make the
    denominator zero and the bound vacuous.
    """
    p = np.asarray(p_z_yt, dtype=np.float64)
    n_z, n_y = p.shape
    g = np.asarray(classifier, dtype=np.int64)
    if g.shape != (n_z,) or np.any(g < 0) or np.any(g >= n_y):
        raise ValueError(f"classifier must map each of {n_z} z values into [0, {n_y})")
    J = Joint(p, ("Z", "Yt"))
    wrong = np.ones_like(p)
    wrong[np.arange(n_z), g] = 0.0
    err = float((p * wrong).sum())
    numer = entropy(J, ["Yt"]) - mutual_info(J, ["Z"], ["Yt"]) - binary_entropy(err)
    if n_y <= 2:
        bound, vacuous, holds = None, True, True
    else:
        bound = numer / np.log(n_y - 1)
        vacuous, holds = False, err >= bound - tol
    stated_den = np.log(n_y) - 1.0
    stated = numer / stated_den if stated_den > 0 else None
    stated_holds = None if stated is None else bool(err >= stated - tol)
    return Lemma1Result(err, None if bound is None else float(bound), vacuous, bool(holds),
                        None if stated is None else float(stated), stated_holds)


def risk_gap(D: DiscreteJoint, zmap: RepresentationMap) -> tuple[float, float]:
    """Minimum cross-entropy risks ``(H(Y | Z), H(Y | X))``."""
    J = with_representation(D, zmap)
    return conditional_entropy(J, ["Y"], ["Z"]), conditional_entropy(J, ["Y"], ["X"])


# ---------------------------------------------------------------- constructed family


def eg_instance(K: int, M: int, flip: Sequence[float], label_noise: float = 0.0) -> DiscreteJoint:
    """``X = (C, B)`` with class cue ``C`` and background ``B``, both uniform and independent.

    ``Y = C`` except with probability ``label_noise`` (then uniform over the other
    classes). The observed label is ``(Y + 1) mod K`` with probability ``flip[b]``,
    otherwise ``Y``. Index ``x = c * M + b``.
    """
    if len(flip) != M:
        raise ValueError("need one flip probability per background value")
    t = np.zeros((K * M, K, K))
    for c in range(K):
        for b in range(M):
            x = c * M + b
            for y in range(K):
                py = 1.0 - label_noise if y == c else label_noise / (K - 1)
                base = py / (K * M)
                t[x, y, y] += base * (1.0 - flip[b])
                t[x, y, (y + 1) % K] += base * flip[b]
    return DiscreteJoint(t / t.sum(), markov=False)


@dataclass
class FamilyMember:
    K: int
    M: int
    flip: tuple[float, ...]
    label_noise: float
    D: DiscreteJoint = field(repr=False)


DEFAULT_SHAPES = ((2, 2), (2, 3), (2, 4), (3, 2))


def eg_family(shapes=DEFAULT_SHAPES, flip_levels=(0.25, 0.5, 0.6, 0.75, 0.9, 1.0),
              label_noises=(0.0, 0.02, 0.05)) -> list[FamilyMember]:
    """Grid over ``(K, M)`` shapes; background ``b`` flips with probability ``level * b / (M - 1)``.

    Shapes with ``K * M`` above the enumeration limit are kept; verifying them
    raises :class:`EnumerationGuardError`.
    """
    out = []
    for K, M in shapes:
        if K < 2 or M < 2:
            raise ValueError(f"need K >= 2 and M >= 2, got {(K, M)}")
        for level in flip_levels:
            flip = tuple(level * b / (M - 1) for b in range(M))
            for eta in label_noises:
                out.append(FamilyMember(K, M, flip, eta, eg_instance(K, M, flip, eta)))
    return out


def verify_family(members: Sequence[FamilyMember], tol: float = 1e-9) -> list[dict]:
    """Every check on every member; one flat record per instance."""
    rows = []
    for fm in members:
        D = fm.D
        m = min(fm.K, MAX_CODOMAIN)
        t2 = verify_theorem2(D, m, tol)
        zmap = RepresentationMap(t2.zmap, m)
        J = with_representation(D, zmap)
        p_z_yt = J.marginal(["Z", "Yt"])
        # Bayes classifier plus every other classifier table on Z
        lemma1 = []
        for g in itertools.product(range(fm.K), repeat=m):
            lemma1.append(lemma1_bound(p_z_yt, g, tol))
        r_z, r_x = risk_gap(D, zmap)
        rows.append({
            "K": fm.K, "M": fm.M, "flip": list(fm.flip), "label_noise": fm.label_noise,
            "theorem2": t2.to_dict(),
            "lemma1_all_hold": all(r.holds for r in lemma1),
            "lemma1_vacuous": all(r.vacuous for r in lemma1),
            "lemma1_stated_form_all_hold": (None if lemma1[0].stated_bound is None
                                            else all(r.stated_holds for r in lemma1)),
            "lemma1_min_slack": (None if lemma1[0].vacuous
                                 else min(r.error - r.bound for r in lemma1)),
            "R_Z": r_z, "R_X": r_x,
            "lemma2": (r_z <= r_x + t2.epsilon + tol) if t2.precondition else None,
        })
    return rows
