"""Finite-difference checks of every Cliff loss term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .criterion import CliffWeights, choose_zeta_rows, loss_biv, loss_kl_uni, loss_uni, total_loss
from .density import standardize

TERMS = ("l_uni", "l_biv", "l_kl_uni", "total")
TOLERANCE = 1e-4


@dataclass
class TermCheck:
    term: str
    n: int
    d: int
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _term_values(z, weights: CliffWeights, zeta_rows) -> dict[str, dg.Tensor]:
    sb = standardize(z)
    cfg = weights.kernel
    out = {"l_uni": loss_uni(sb, cfg)}
    out["l_biv"] = loss_biv(sb, cfg, weights, zeta_rows=zeta_rows) if sb.d >= 2 else dg.constant(0.0)
    out["l_kl_uni"] = loss_kl_uni(sb, cfg)
    out["total"] = total_loss(z, weights, zeta_rows=zeta_rows)[0]
    return out


def check_batch(z, weights: CliffWeights, zeta_rows, fd_step: float = 1e-5, stencil: int = 5) -> dict[str, float]:
    """Max relative error per term; one forward pass per perturbation serves all terms."""
    z = np.array(z, dtype=np.float64)
    analytic = {}
    for term in TERMS:
        leaf = dg.Tensor(z.copy())
        dg.backward(_term_values(leaf, weights, zeta_rows)[term])
        analytic[term] = leaf.grad.copy()

    def values(x):
        return np.array([t.item() for t in _term_values(dg.constant(x), weights, zeta_rows).values()])

    numeric = np.zeros((len(TERMS),) + z.shape)
    for coord in np.ndindex(z.shape):
        numeric[(slice(None),) + coord] = dg.central_difference(values, z, coord, fd_step, stencil)
    errors = {}
    for k, term in enumerate(TERMS):
        a, c = analytic[term], numeric[k]
        if not np.all(np.isfinite(c)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(c))[0])
            raise dg.NonFiniteError(f"{term}: non-finite loss when perturbing {bad}", bad)
        errors[term] = float(np.max(np.abs(a - c) / (np.abs(a) + np.abs(c) + 1e-12)))
    return errors


def run_gradcheck(seeds=(0, 1, 2), sizes=(16, 64), dims=(2, 3), m_conditioning: int = 5,
                  fd_step: float = 1e-5, stencil: int = 5) -> list[TermCheck]:
    """Check every term on standard-normal batches for each (seed, n, d)."""
    results = []
    for seed in seeds:
        for n in sizes:
            for d in dims:
                rng = np.random.default_rng([seed, n, d])
                z = rng.normal(size=(n, d))
                weights = CliffWeights(1.0, 1.0, 1.0, m_conditioning=m_conditioning)
                rows = choose_zeta_rows(n, m_conditioning, rng)
                errs = check_batch(z, weights, rows, fd_step, stencil)
                results.extend(TermCheck(t, n, d, seed, errs[t]) for t in TERMS)
    return results
