"""Extra Metropolis kernels interleaved with the Hamiltonian transitions.

In the centered parameterization the day-to-day wiggles of the levels
that the windowed counts cannot resolve have a spread proportional to the
noise scale of their continent, so the scale and those wiggles are
strongly coupled.  :class:`ScaleMove` updates them together: it proposes
``log sigma_b + delta`` and stretches the deviations of every level of
block ``b`` from a fixed reference path by ``exp(delta)``.  The map is an
involution in ``(theta, delta) -> (theta', -delta)`` with Jacobian
``exp(n_b delta)``, so the plain Metropolis ratio leaves the posterior
invariant.  The reference path and the proposal scale adapt during warmup
only.
"""

from __future__ import annotations

import math

import numpy as np


class ScaleMove:
    """Joint scale-and-stretch update for each continent block.

    Parameters
    ----------
    model : spikeevo.model.PosteriorModel
        Centered parameterization.
    target_rate : float
        Acceptance rate the proposal scale is tuned towards in warmup.
    repeats : int
        Proposals per block and transition.
    """

    def __init__(self, model, target_rate: float = 0.4, init_scale: float = 0.05,
                 repeats: int = 1):
        if model.parameterization != "centered":
            raise ValueError("ScaleMove needs the centered parameterization")
        self.model = model
        self.target_rate = target_rate
        self.repeats = int(repeats)
        K, T, C = model.shape
        D = C - 1
        sl = model.layout.slices
        self.sigma_index = np.arange(sl["log_sigma"].start, sl["log_sigma"].stop)
        self.level_index = []
        for blk in model.blocks:
            idx = [sl["p1"].start + i * D + np.arange(D) for i in blk]
            idx += [sl["latent"].start + i * (T - 1) * D + np.arange((T - 1) * D) for i in blk]
            self.level_index.append(np.concatenate(idx))
        self.log_scale = np.full(len(model.blocks), math.log(init_scale))
        self.reference = None
        self.accepted = np.zeros(len(model.blocks))
        self.proposed = 0

    def update(self, draws: np.ndarray) -> None:
        """Re-center the stretch on the mean of a warmup window."""
        self.reference = np.asarray(draws).mean(axis=0)

    def step(self, q, logp, rng: np.random.Generator, adapt: bool):
        if self.reference is None:
            self.reference = np.array(q, dtype=float)
        changed = False
        self.proposed += 1
        for b, idx in [(b, idx) for _ in range(self.repeats)
                       for b, idx in enumerate(self.level_index)]:
            delta = rng.normal() * math.exp(self.log_scale[b])
            prop = q.copy()
            prop[self.sigma_index[b]] += delta
            ref = self.reference[idx]
            prop[idx] = ref + math.exp(delta) * (q[idx] - ref)
            lp_prop = self.model(prop)[0]
            log_ratio = lp_prop - logp + idx.size * delta
            rate = math.exp(min(0.0, log_ratio)) if math.isfinite(log_ratio) else 0.0
            if rng.uniform() < rate:
                q, logp, changed = prop, float(lp_prop), True
                self.accepted[b] += 1
            if adapt:
                gain = 1.0 / math.sqrt(10.0 + self.proposed)
                self.log_scale[b] += gain * (rate - self.target_rate)
        return q, logp, changed

    def to_dict(self) -> dict:
        return {"kind": "scale", "scale": np.exp(self.log_scale).tolist(),
                "accept_rate": (self.accepted / max(self.proposed * self.repeats, 1)).tolist()}
