"""Model variants, latent layout, priors and identifiability constraints.

A model jointly describes incidence (I) and mortality (M) counts through
log-linear predictors built from

* outcome-specific intercepts ``alpha_I``, ``alpha_M``,
* a shared spatial field ``kappa`` loaded with ``delta`` / ``1/delta``,
* optional unstructured spatial extras (``u`` mortality-only, ``v``/``u``
  separate, or ``w`` with a shared variance),
* outcome-specific temporal fields ``gamma_I``, ``gamma_M``,
* a space-time interaction, either one independent field per outcome or a
  single shared field loaded with block-wise time-varying scalings
  ``rho_k`` / ``1/rho_k``.

Shared interactions use an extended copy field x = (z, z*): z carries the
incidence-side loading (``z = Z3 chi``) and z* is a near-exact copy of the
mortality side (``z* = (Z3^-1)^2 z + eps``) with a high-precision
structured residual, ``eps ~ N(0, (tau_eps Q_chi)^-1)``, ``tau_eps =
exp(15)``.  ``build_qx`` assembles the resulting joint precision of x:

    [[ tau_chi D Q D + tau_eps D^2 Q D^2 , -tau_eps D^2 Q ],
     [ -tau_eps Q D^2                    ,  tau_eps Q     ]],

with D = Z3^-1 (diagonal) and Q the interaction structure matrix.

Cells are ordered area-fastest: cell (i, t) sits at flat index t*A + i.

The reciprocal loadings make the scalings directly identifiable: the log
loadings of the two outcomes cancel pairwise, so the sum of all 2l log
scaling loadings is identically zero (``check_scaling_identifiability``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .gmrf import ConstraintSet
from .graphs import (
    AdjacencyGraph,
    StructureMatrix,
    icar_structure,
    interaction_structure,
    rw1_structure,
    rw2_structure,
)

__all__ = [
    "PriorSettings",
    "ScalingBlocks",
    "ModelSpec",
    "LatentLayout",
    "HyperParams",
    "ModelStructures",
    "TAU_EPS",
    "layout",
    "resolve_blocks",
    "expand_rho",
    "build_z3",
    "build_qx",
    "constraints_for",
    "log_prior",
    "hyper_names",
    "hyper_to_vector",
    "hyper_from_vector",
    "build_structures",
    "prior_blocks",
    "prior_precision",
    "design_matrix",
    "linear_predictor",
    "check_scaling_identifiability",
]

TAU_EPS = math.exp(15.0)

FAMILIES = ("independent", "shared_single", "shared_flexible")
EXTRAS = ("none", "mortality_unstructured", "both_shared_variance", "both_separate")
TEMPORAL_PRIORS = ("RW1", "RW2")


@dataclass(frozen=True)
class PriorSettings:
    """Hyperprior configuration (defaults follow the model definition)."""

    sigma_upper: float = 1e3      # uniform prior on sd scale over (0, sigma_upper]
    gamma_shape: float = 10.0     # shape of the Gamma prior on delta and rho_k
    gamma_rate: float = 10.0
    alpha_precision: float = 1e-3  # Gaussian prior precision of the intercepts


@dataclass(frozen=True)
class ScalingBlocks:
    """Partition of the T periods into l blocks sharing one scaling each."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.sizes or any(int(m) <= 0 for m in self.sizes):
            raise ValueError(f"block sizes must be positive, got {self.sizes}")
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))

    @property
    def l(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one model variant.

    ``family`` selects the interaction construction (independent fields,
    shared with a single scaling, or shared with block-wise scalings),
    ``spatial_extras`` the unstructured spatial add-ons, and
    ``temporal_prior`` the random-walk order for the time effects.
    """

    family: str
    interaction: str
    blocks: ScalingBlocks | None = None
    spatial_extras: str = "none"
    temporal_prior: str = "RW1"
    priors: PriorSettings = field(default_factory=PriorSettings)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.interaction not in ("I", "II", "III", "IV"):
            raise ValueError(f"unknown interaction {self.interaction!r}")
        if self.spatial_extras not in EXTRAS:
            raise ValueError(f"unknown spatial_extras {self.spatial_extras!r}")
        if self.temporal_prior not in TEMPORAL_PRIORS:
            raise ValueError(f"unknown temporal_prior {self.temporal_prior!r}")
        if self.family == "shared_flexible" and self.blocks is None:
            raise ValueError("shared_flexible requires blocks")

    @property
    def shared(self) -> bool:
        return self.family != "independent"

    def n_rho(self, T: int) -> int:
        if not self.shared:
            return 0
        return resolve_blocks(self, T).l

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "interaction": self.interaction,
            "blocks": list(self.blocks.sizes) if self.blocks else None,
            "spatial_extras": self.spatial_extras,
            "temporal_prior": self.temporal_prior,
            "priors": {
                "sigma_upper": self.priors.sigma_upper,
                "gamma_shape": self.priors.gamma_shape,
                "gamma_rate": self.priors.gamma_rate,
                "alpha_precision": self.priors.alpha_precision,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        priors = PriorSettings(**d.get("priors", {}))
        blocks = ScalingBlocks(tuple(d["blocks"])) if d.get("blocks") else None
        return cls(
            family=d["family"],
            interaction=d["interaction"],
            blocks=blocks,
            spatial_extras=d.get("spatial_extras", "none"),
            temporal_prior=d.get("temporal_prior", "RW1"),
            priors=priors,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def resolve_blocks(spec: ModelSpec, T: int) -> ScalingBlocks | None:
    """Effective scaling blocks for a given number of periods."""
    if spec.family == "independent":
        return None
    if spec.family == "shared_single":
        return ScalingBlocks((T,))
    if spec.blocks.total != T:
        raise ValueError(f"blocks sum to {spec.blocks.total}, expected T={T}")
    return spec.blocks


@dataclass(frozen=True)
class LatentLayout:
    """Offsets of every block of the stacked latent vector."""

    A: int
    T: int
    slices: dict[str, slice]
    total: int
    shared: bool

    def view(self, name: str, x: np.ndarray) -> np.ndarray:
        return x[self.slices[name]]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.slices)


def layout(spec: ModelSpec, A: int, T: int) -> LatentLayout:
    """Deterministic latent layout for a model at size (A, T)."""
    if A < 1 or T < 2:
        raise ValueError(f"need A >= 1 and T >= 2, got A={A}, T={T}")
    resolve_blocks(spec, T)  # validates block sums early
    sizes = [("alpha_I", 1), ("alpha_M", 1), ("kappa", A)]
    if spec.spatial_extras == "mortality_unstructured":
        sizes.append(("u", A))
    elif spec.spatial_extras == "both_separate":
        sizes += [("u", A), ("v", A)]
    elif spec.spatial_extras == "both_shared_variance":
        sizes.append(("w", 2 * A))
    sizes += [("gamma_I", T), ("gamma_M", T)]
    if spec.shared:
        sizes += [("z", T * A), ("z_star", T * A)]
    else:
        sizes += [("chi_I", T * A), ("chi_M", T * A)]
    slices, offset = {}, 0
    for name, n in sizes:
        slices[name] = slice(offset, offset + n)
        offset += n
    return LatentLayout(A=A, T=T, slices=slices, total=offset, shared=spec.shared)


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameters of one model; all entries strictly positive.

    ``tau_eps`` is a fixed constant (exp(15)) and never optimized.  The
    mortality-side loadings are algebraically ``1/delta`` and ``1/rho_k``,
    never free parameters.
    """

    tau_kappa: float
    tau_gamma_I: float
    tau_gamma_M: float
    delta: float
    tau_chi_I: float | None = None
    tau_chi_M: float | None = None
    tau_chi: float | None = None
    rho: tuple[float, ...] | None = None
    tau_u: float | None = None
    tau_v: float | None = None
    tau_w: float | None = None
    tau_eps: float = TAU_EPS

    def __post_init__(self):
        for name in ("tau_kappa", "tau_gamma_I", "tau_gamma_M", "delta",
                     "tau_chi_I", "tau_chi_M", "tau_chi", "tau_u", "tau_v",
                     "tau_w", "tau_eps"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if self.rho is not None:
            if any(not r > 0 for r in self.rho):
                raise ValueError(f"rho must be positive, got {self.rho}")
            object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))


def hyper_names(spec: ModelSpec, T: int) -> list[str]:
    """Names of the free hyperparameters, in internal vector order."""
    names = ["tau_kappa", "tau_gamma_I", "tau_gamma_M", "delta"]
    if spec.shared:
        names.append("tau_chi")
        names += [f"rho_{k + 1}" for k in range(spec.n_rho(T))]
    else:
        names += ["tau_chi_I", "tau_chi_M"]
    if spec.spatial_extras == "mortality_unstructured":
        names.append("tau_u")
    elif spec.spatial_extras == "both_separate":
        names += ["tau_u", "tau_v"]
    elif spec.spatial_extras == "both_shared_variance":
        names.append("tau_w")
    return names


def hyper_to_vector(h: HyperParams, spec: ModelSpec, T: int) -> np.ndarray:
    """Pack hyperparameters into the internal log-scale vector."""
    vals = []
    for name in hyper_names(spec, T):
        if name.startswith("rho_"):
            vals.append(h.rho[int(name.split("_")[1]) - 1])
        else:
            vals.append(getattr(h, name))
    return np.log(np.asarray(vals, dtype=float))


def hyper_from_vector(theta: np.ndarray, spec: ModelSpec, T: int) -> HyperParams:
    """Unpack the internal log-scale vector into HyperParams."""
    names = hyper_names(spec, T)
    if len(theta) != len(names):
        raise ValueError(f"theta has length {len(theta)}, expected {len(names)}")
    vals = dict(zip(names, np.exp(np.asarray(theta, dtype=float))))
    rho = None
    if spec.shared:
        rho = tuple(vals.pop(f"rho_{k + 1}") for k in range(spec.n_rho(T)))
    return HyperParams(
        tau_kappa=vals["tau_kappa"],
        tau_gamma_I=vals["tau_gamma_I"],
        tau_gamma_M=vals["tau_gamma_M"],
        delta=vals["delta"],
        tau_chi_I=vals.get("tau_chi_I"),
        tau_chi_M=vals.get("tau_chi_M"),
        tau_chi=vals.get("tau_chi"),
        rho=rho,
        tau_u=vals.get("tau_u"),
        tau_v=vals.get("tau_v"),
        tau_w=vals.get("tau_w"),
    )


def expand_rho(blocks: ScalingBlocks, rho) -> np.ndarray:
    """Per-period scaling vector (rho_1 repeated m_1 times, ...)."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (blocks.l,):
        raise ValueError(f"need {blocks.l} scalings, got {rho.shape}")
    if np.any(rho <= 0):
        raise ValueError("scalings must be positive")
    return np.repeat(rho, blocks.sizes)


def build_z3(blocks: ScalingBlocks, rho, A: int) -> np.ndarray:
    """Diagonal of Z3 = diag(expanded rho) (x) I_A, area-fastest ordering.

    The inverse diagonal is the elementwise reciprocal.
    """
    per_period = expand_rho(blocks, rho)
    return np.repeat(per_period, A)


def build_qx(blocks: ScalingBlocks, rho, tau_chi: float, tau_eps: float,
             q_chi: StructureMatrix) -> StructureMatrix:
    """Joint precision of the extended copy field x = (z, z*).

    See the module docstring for the block formula.  The kernel has
    dimension twice that of the interaction structure: pairs
    (Z3 v, Z3^-1 v) for kernel vectors v, plus (0, w) for kernel vectors
    w absorbed by the copy residual.
    """
    if tau_chi <= 0 or tau_eps <= 0:
        raise ValueError("precisions must be positive")
    ta = q_chi.dim
    A, rem = divmod(ta, blocks.total)
    if rem:
        raise ValueError(f"interaction dim {ta} incompatible with T={blocks.total}")
    z3 = build_z3(blocks, rho, A)
    d = 1.0 / z3
    d2 = d * d
    q = q_chi.entries
    dd = sp.dia_array((d[None, :], [0]), shape=(ta, ta))
    dd2 = sp.dia_array((d2[None, :], [0]), shape=(ta, ta))
    upper_left = tau_chi * (dd @ q @ dd) + tau_eps * (dd2 @ q @ dd2)
    upper_right = -tau_eps * (dd2 @ q)
    lower_right = tau_eps * q
    mat = sp.csr_array(
        sp.bmat(
            [[upper_left, upper_right], [upper_right.T, lower_right]], format="csr"
        )
    )
    gens = []
    for col in range(q_chi.exact_kernel.shape[1]):
        v = q_chi.exact_kernel[:, col]
        gens.append(np.concatenate([z3 * v, d * v]))
        gens.append(np.concatenate([np.zeros(ta), v]))
    gen = np.stack(gens, axis=1) if gens else np.zeros((2 * ta, 0))
    rank = 2 * ta - 2 * q_chi.null_dim
    from .graphs import _make_structure

    return _make_structure(mat, rank=rank, generators=gen)


def _interaction_rows(kind: str, A: int, T: int, labels: np.ndarray) -> np.ndarray:
    """Identifiability rows for one interaction field (area-fastest cells)."""
    ta = T * A
    comps = sorted(set(labels.tolist()))
    rows = []
    if kind == "I":
        rows.append(np.ones(ta))
    elif kind == "II":
        for i in range(A):  # sum over periods, one row per area
            r = np.zeros(ta)
            r[i::A] = 1.0
            rows.append(r)
    elif kind == "III":
        for t in range(T):  # sum over areas (per component), one row per period
            for comp in comps:
                r = np.zeros(ta)
                r[t * A:(t + 1) * A][labels == comp] = 1.0
                rows.append(r)
    else:  # IV: per-area and per-period-per-component sums, redundancy dropped
        for i in range(A):
            r = np.zeros(ta)
            r[i::A] = 1.0
            rows.append(r)
        for comp in comps:
            for t in range(T - 1):  # last period per component is redundant
                r = np.zeros(ta)
                r[t * A:(t + 1) * A][labels == comp] = 1.0
                rows.append(r)
    return np.array(rows)


def constraints_for(spec: ModelSpec, A: int, T: int,
                    component_labels=None) -> ConstraintSet:
    """Identifiability constraints as rows over the full latent vector.

    Sum-to-zero on the spatial field (per graph component), temporal
    fields (plus a linear-trend row under RW2) and unstructured extras;
    interaction rows per type; for shared families, the interaction rows
    are applied to z and mirrored on z*.
    """
    lay = layout(spec, A, T)
    labels = (np.zeros(A, dtype=int) if component_labels is None
              else np.asarray(component_labels, dtype=int))
    if labels.shape != (A,):
        raise ValueError("component_labels must have length A")
    rows = []

    def block_row(name, values):
        r = np.zeros(lay.total)
        r[lay.slices[name]] = values
        rows.append(r)

    for comp in sorted(set(labels.tolist())):
        block_row("kappa", (labels == comp).astype(float))
    if "u" in lay.slices:
        block_row("u", np.ones(A))
    if "v" in lay.slices:
        block_row("v", np.ones(A))
    if "w" in lay.slices:
        half = np.concatenate([np.ones(A), np.zeros(A)])
        block_row("w", half)
        block_row("w", half[::-1])
    for name in ("gamma_I", "gamma_M"):
        block_row(name, np.ones(T))
        if spec.temporal_prior == "RW2":
            block_row(name, np.arange(1.0, T + 1.0))
    inter = _interaction_rows(spec.interaction, A, T, labels)
    targets = ("z", "z_star") if spec.shared else ("chi_I", "chi_M")
    for name in targets:
        for r in inter:
            block_row(name, r)
    return ConstraintSet(np.array(rows), lay.total)


def log_prior(h: HyperParams, spec: ModelSpec, T: int | None = None) -> float:
    """Log hyperprior density in the internal log parameterization.

    Gamma(shape, rate) on delta and each rho_k and a uniform prior on the
    standard-deviation scale over (0, sigma_upper] for every free
    precision, all with the log-scale Jacobians included.  The intercept
    priors are Gaussian components of the latent field precision, not
    hyperparameters, so they do not appear here.  tau_eps is fixed and
    contributes nothing.
    """
    p = spec.priors
    a, b = p.gamma_shape, p.gamma_rate
    gamma_const = a * math.log(b) - math.lgamma(a)

    def gamma_log(x):
        return gamma_const + a * math.log(x) - b * x

    def sigma_uniform_log(tau):
        sigma = tau ** -0.5
        if sigma > p.sigma_upper:
            return -math.inf
        # uniform density 1/U on sigma, Jacobian d sigma / d log tau = sigma/2
        return math.log(0.5) + math.log(sigma) - math.log(p.sigma_upper)

    total = gamma_log(h.delta)
    taus = [h.tau_kappa, h.tau_gamma_I, h.tau_gamma_M]
    if spec.shared:
        if h.tau_chi is None or h.rho is None:
            raise ValueError("shared family needs tau_chi and rho")
        taus.append(h.tau_chi)
        n_rho = spec.n_rho(T) if T is not None else len(h.rho)
        if len(h.rho) != n_rho:
            raise ValueError(f"expected {n_rho} scalings, got {len(h.rho)}")
        for r in h.rho:
            total += gamma_log(r)
    else:
        if h.tau_chi_I is None or h.tau_chi_M is None:
            raise ValueError("independent family needs tau_chi_I and tau_chi_M")
        taus += [h.tau_chi_I, h.tau_chi_M]
    for name, extra in (("mortality_unstructured", ("tau_u",)),
                        ("both_separate", ("tau_u", "tau_v")),
                        ("both_shared_variance", ("tau_w",))):
        if spec.spatial_extras == name:
            for attr in extra:
                val = getattr(h, attr)
                if val is None:
                    raise ValueError(f"{spec.spatial_extras} needs {attr}")
                taus.append(val)
    for tau in taus:
        total += sigma_uniform_log(tau)
    return total


@dataclass(frozen=True)
class ModelStructures:
    """Structure matrices for one (graph, T, spec) combination."""

    r_kappa: StructureMatrix
    r_gamma: StructureMatrix
    q_chi: StructureMatrix
    component_labels: tuple[int, ...]
    A: int
    T: int


def build_structures(graph: AdjacencyGraph, T: int, spec: ModelSpec) -> ModelStructures:
    r_kappa = icar_structure(graph)
    r_gamma = rw1_structure(T) if spec.temporal_prior == "RW1" else rw2_structure(T)
    q_chi = interaction_structure(spec.interaction, r_gamma, r_kappa)
    return ModelStructures(
        r_kappa=r_kappa,
        r_gamma=r_gamma,
        q_chi=q_chi,
        component_labels=graph.component_labels,
        A=graph.n_areas,
        T=T,
    )


def prior_blocks(spec: ModelSpec, h: HyperParams,
                 structures: ModelStructures) -> list[tuple[str, sp.sparray, float | None]]:
    """Latent precision blocks in layout order.

    Each entry is (block name, sparse block, scale) where ``scale`` is the
    hyperparameter multiplying a fixed template (None for the copy-field
    block, whose entries mix several hyperparameters).
    """
    A, T = structures.A, structures.T
    lay = layout(spec, A, T)
    alpha = sp.csc_array(np.array([[spec.priors.alpha_precision]]))
    blocks = [("alpha_I", alpha, spec.priors.alpha_precision),
              ("alpha_M", alpha, spec.priors.alpha_precision),
              ("kappa", h.tau_kappa * structures.r_kappa.entries, h.tau_kappa)]
    if "u" in lay.slices:
        blocks.append(("u", h.tau_u * sp.eye_array(A, format="csc"), h.tau_u))
    if "v" in lay.slices:
        blocks.append(("v", h.tau_v * sp.eye_array(A, format="csc"), h.tau_v))
    if "w" in lay.slices:
        blocks.append(("w", h.tau_w * sp.eye_array(2 * A, format="csc"), h.tau_w))
    blocks += [("gamma_I", h.tau_gamma_I * structures.r_gamma.entries, h.tau_gamma_I),
               ("gamma_M", h.tau_gamma_M * structures.r_gamma.entries, h.tau_gamma_M)]
    if spec.shared:
        qx = build_qx(resolve_blocks(spec, T), h.rho, h.tau_chi, h.tau_eps,
                      structures.q_chi)
        blocks.append(("x", qx.entries, None))
    else:
        blocks += [("chi_I", h.tau_chi_I * structures.q_chi.entries, h.tau_chi_I),
                   ("chi_M", h.tau_chi_M * structures.q_chi.entries, h.tau_chi_M)]
    return blocks


def prior_precision(spec: ModelSpec, h: HyperParams,
                    structures: ModelStructures) -> sp.csc_array:
    """Block-diagonal latent precision (improper on structure kernels)."""
    blocks = [b for _, b, _ in prior_blocks(spec, h, structures)]
    q = sp.block_diag(blocks, format="csc")
    lay = layout(spec, structures.A, structures.T)
    assert q.shape == (lay.total, lay.total)
    return sp.csc_array(q)


def design_matrix(spec: ModelSpec, lay: LatentLayout, h: HyperParams) -> sp.csr_array:
    """Sparse map latent -> stacked predictors (eta_I rows, then eta_M rows).

    Only the kappa columns depend on hyperparameters (loadings delta and
    1/delta); the shared-interaction loadings live inside the copy-field
    precision, so z and z* enter with unit coefficients.
    """
    A, T = lay.A, lay.T
    ta = T * A
    cell = np.arange(ta)
    rows, cols, vals = [], [], []

    def add(block, row_idx, col_idx, values):
        rows.append(row_idx)
        cols.append(col_idx + lay.slices[block].start)
        vals.append(np.broadcast_to(np.asarray(values, dtype=float), row_idx.shape))

    add("alpha_I", cell, np.zeros(ta, dtype=np.intp), 1.0)
    add("alpha_M", cell + ta, np.zeros(ta, dtype=np.intp), 1.0)
    area_of_cell = cell % A
    add("kappa", cell, area_of_cell, h.delta)
    add("kappa", cell + ta, area_of_cell, 1.0 / h.delta)
    if "u" in lay.slices:
        add("u", cell + ta, area_of_cell, 1.0)
    if "v" in lay.slices:
        add("v", cell, area_of_cell, 1.0)
    if "w" in lay.slices:
        add("w", cell, area_of_cell, 1.0)
        add("w", cell + ta, area_of_cell + A, 1.0)
    period_of_cell = cell // A
    add("gamma_I", cell, period_of_cell, 1.0)
    add("gamma_M", cell + ta, period_of_cell, 1.0)
    if lay.shared:
        add("z", cell, cell, 1.0)
        add("z_star", cell + ta, cell, 1.0)
    else:
        add("chi_I", cell, cell, 1.0)
        add("chi_M", cell + ta, cell, 1.0)
    return sp.csr_array(
        sp.coo_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * ta, lay.total),
        )
    )


def linear_predictor(spec: ModelSpec, lay: LatentLayout, latent: np.ndarray,
                     h: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Predictor pair (eta_I, eta_M), each of length T*A."""
    latent = np.asarray(latent, dtype=float)
    if latent.shape != (lay.total,):
        raise ValueError(f"latent has shape {latent.shape}, expected ({lay.total},)")
    eta = design_matrix(spec, lay, h) @ latent
    ta = lay.T * lay.A
    return eta[:ta], eta[ta:]


def check_scaling_identifiability(rho) -> bool:
    """Verify the log loadings of the 2l reciprocal scaling pairs sum to zero."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("scalings must be positive")
    total = float(np.sum(np.log(rho) + np.log(1.0 / rho)))
    if abs(total) > 1e-12:
        raise AssertionError(f"scaling loadings do not cancel: sum={total}")
    return True
