import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmm_rebalance.arbitrage import detect
from cfmm_rebalance.errors import InfeasibleSpec
from cfmm_rebalance.model import build_edges
from cfmm_rebalance.scenarios import GenSpec, corpus, corpus_spec, generate, is_connected
from cfmm_rebalance.serialization import dumps, scenario_to_dict


def test_three_tokens_three_cfmms_is_a_triangle():
    cfg = generate(GenSpec(seed=1, n_cfmms=3, n_tokens=3))
    pairs = {frozenset(c.tokens) for c in cfg.cfmms}
    assert len(pairs) == 3 and is_connected(cfg)


def test_same_spec_same_bytes():
    spec = GenSpec(seed=42, n_cfmms=6, n_tokens=4, active_fraction=0.5, oracle_count=1, fee_range=(0.9, 1.0))
    assert dumps(scenario_to_dict(generate(spec))) == dumps(scenario_to_dict(generate(spec)))


def test_different_seeds_differ():
    a = generate(GenSpec(seed=1, n_cfmms=4, n_tokens=3))
    b = generate(GenSpec(seed=2, n_cfmms=4, n_tokens=3))
    assert a != b


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_cfmms=1, n_tokens=3),
        dict(n_cfmms=3, n_tokens=1),
        dict(n_cfmms=3, n_tokens=3, pool_range=(0, 1)),
        dict(n_cfmms=3, n_tokens=3, fee_range=(0.5, 1.5)),
        dict(n_cfmms=3, n_tokens=3, oracle_count=3),
    ],
)
def test_infeasible_specs(kwargs):
    with pytest.raises(InfeasibleSpec):
        GenSpec(seed=0, **kwargs)


def test_oracles_agree_with_each_other():
    cfg = generate(GenSpec(seed=5, n_cfmms=6, n_tokens=3, oracle_count=3, active_fraction=0.5))
    oracles = [c for c in cfg.cfmms if c.is_oracle]
    assert len(oracles) == 3
    sub = cfg.__class__(tuple(oracles), cfg.tokens)
    assert detect(sub).is_free


@given(
    st.integers(0, 2**63 - 1),
    st.integers(2, 6),
    st.integers(0, 5),
    st.floats(0, 1),
    st.integers(0, 2),
    st.floats(0, 1),
)
def test_generated_configs_are_valid(seed, n_tokens, extra, frac, oracles, weighted):
    n_cfmms = n_tokens - 1 + extra + oracles
    spec = GenSpec(seed, n_cfmms, n_tokens, active_fraction=frac, oracle_count=oracles, weighted_fraction=weighted)
    cfg = generate(spec)
    assert len(cfg.cfmms) == n_cfmms
    assert is_connected(cfg)
    assert any(c.is_active for c in cfg.cfmms)
    assert sum(c.is_oracle for c in cfg.cfmms) == oracles
    for c in cfg.cfmms:
        if not c.is_oracle:
            assert 0.1 <= min(c.pools) and max(c.pools) <= 10.0
    assert generate(spec) == cfg


def test_corpus_bounds():
    sizes = [(len(cfg.cfmms), len(cfg.tokens)) for _, cfg in corpus()]
    assert len(sizes) == 500
    assert max(n for n, _ in sizes) <= 8
    assert {t for _, t in sizes} == {2, 3, 4, 5}
    assert corpus_spec(20).oracle_count == 1 and corpus_spec(20).active_fraction == 0.5
    assert corpus_spec(7).active_fraction == 1.0


def test_edges_exist_when_connected():
    cfg = generate(GenSpec(seed=3, n_cfmms=5, n_tokens=4))
    assert build_edges(cfg)
