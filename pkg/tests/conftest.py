"""Shared builders for small synthetic panels and frozen sampler states."""

from __future__ import annotations

import numpy as np
import pytest

from lpmi.design import DesignSpec, StackedData, assemble_designs
from lpmi.joint import draw_pg_presence
from lpmi.marginal import MarginalFitConfig, init_state
from lpmi.model import PriorSpec
from lpmi.rng import RngStream
from lpmi.simulate import GeneratorConfig, Mechanism, generate

TIME_DESIGN = DesignSpec(fixed=("1",), profile=("time",), random=("1",))


def small_cohort(n=60, L=2, T=(4, 8), seed=0, p_miss=0.3, design=TIME_DESIGN,
                 presence_design=None, mechanism=None, **kwargs):
    """Two-class cohort with a linear-in-time profile contrast."""
    if L == 2:
        defaults = dict(
            eta=np.array([[0.0, 0.0, 0.0, 0.0], [-3.5, 0.45, 0.4, 0.3]]),
            beta=np.array([7.0]),
            beta_star=np.array([[0.0], [1.4]]),
            sigma2=np.array([0.2, 0.3]),
            Sigma_r=np.array([[0.09]]),
        )
    else:
        defaults = {}
    defaults.update(kwargs)
    cfg = GeneratorConfig(
        n=n, L=L, T=T, design=design,
        presence_design=presence_design,
        mechanism=mechanism if mechanism is not None else Mechanism(kind="mcar", p=p_miss),
        seed=seed, **defaults)
    return generate(cfg)


def frozen_state(n=20, T=(3, 5), L=2, seed=7, joint=False, warm_iterations=30):
    """Panel, stacked data, a warmed-up frozen chain state, and priors."""
    presence = TIME_DESIGN if joint else None
    panel, truth = small_cohort(n=n, L=L, T=T, seed=seed, presence_design=presence)
    designs = assemble_designs(panel, TIME_DESIGN)
    pdesigns = assemble_designs(panel, TIME_DESIGN) if joint else None
    data = StackedData(panel, designs, pdesigns)
    priors = PriorSpec.default(designs.p, designs.q, designs.r, designs.d, L,
                               p2=pdesigns.p if joint else None,
                               q2=pdesigns.q if joint else None,
                               r2=pdesigns.r if joint else None)
    cfg = MarginalFitConfig(L=L, iterations=warm_iterations + 10, burn_in=warm_iterations,
                            thin=1, seed=seed)
    stream = RngStream(seed, 5)
    state = init_state(data, cfg, priors, stream.substream(0).generator(), joint=joint)
    if joint:
        from lpmi.joint import _iterate_joint
        for it in range(1, warm_iterations + 1):
            _iterate_joint(state, data, priors, stream, it)
        draw_pg_presence(state, data, stream.substream(999).generator())
    else:
        from lpmi.marginal import _iterate
        for it in range(1, warm_iterations + 1):
            _iterate(state, data, priors, stream, it)
    # make sure both classes are populated so class-indexed blocks are proper
    if (state.allocation == 0).all() or (state.allocation == 1).all():
        state.allocation = np.arange(data.n) % L
    return panel, data, priors, state


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
