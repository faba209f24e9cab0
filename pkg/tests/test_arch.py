import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vitprune import arch
from vitprune.arch import ArchSpec, BlockSpec
from vitprune.model import param_shapes

# exact counts, frozen from the independent per-layer oracle below
FROZEN = {
    "deit_b": (87_338_192, 17_656_811_520),
    "deit_s": (22_436_432, 4_624_140_288),
    "deit_t": (5_910_800, 1_261_003_776),
}


def oracle_params(spec):
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def oracle_flops(spec):
    n = spec.num_tokens
    patch = spec.num_patches * spec.patch_dim * spec.emb
    blocks = sum(oracles.block_macs(spec.emb, b.h, b.qk, b.v, b.mlp, n) for b in spec.blocks)
    return patch + blocks + 2 * spec.emb * spec.num_classes


@pytest.mark.parametrize("name", sorted(FROZEN))
def test_deit_counts_frozen(name):
    spec = arch.PRESETS[name]()
    assert (arch.count_params(spec), arch.count_flops(spec)) == FROZEN[name]
    assert FROZEN[name] == (oracle_params(spec), oracle_flops(spec))


def test_token_count():
    assert arch.deit_base().num_tokens == 14 * 14 + 2
    assert arch.desk().num_tokens == 16 + 2


block_st = st.builds(BlockSpec, h=st.integers(0, 5), qk=st.integers(1, 24), v=st.integers(1, 24),
                     mlp=st.integers(0, 64))


@settings(max_examples=60, deadline=None)
@given(emb=st.integers(1, 48), blocks=st.lists(block_st, min_size=1, max_size=4))
def test_counts_match_oracle(emb, blocks):
    spec = ArchSpec(emb=emb, blocks=tuple(blocks), patch_size=4, image_size=8, num_classes=5)
    assert arch.count_params(spec) == oracle_params(spec)
    assert arch.count_flops(spec) == oracle_flops(spec)


def test_block_macs_hand_example():
    # emb 2, h 1, qk 1, v 1, mlp 2, 3 tokens
    # 2*3*2*1 + 3*2*1 + 9*1 + 9*1 + 3*1*2 + 2*3*2*2 = 12+6+9+9+6+24
    assert arch.block_macs(2, 1, 1, 1, 2, 3) == 66


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec(emb=0, blocks=(BlockSpec(1, 1, 1, 1),))
    with pytest.raises(ValueError):
        ArchSpec(emb=4, blocks=(BlockSpec(1, 0, 1, 1),))
    with pytest.raises(ValueError):
        ArchSpec(emb=4, blocks=(BlockSpec(1, 1, 1, 1),), patch_size=5, image_size=8)


def test_ampere_predicate():
    assert arch.deit_base().is_ampere_legal()
    assert arch.desk().is_ampere_legal()
    assert arch.deit_tiny().is_ampere_legal()    # 3 heads * 64 = 192
    assert not arch.uniform(40, 1, 2, 8, 64).is_ampere_legal()


def test_json_roundtrip():
    spec = arch.desk(num_classes=7)
    assert ArchSpec.from_dict(spec.to_dict()) == spec
