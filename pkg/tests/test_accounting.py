import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcflow.accounting import (C2C_PARAMS_PER_LAYER, C2C_TOTAL_PARAMS, PAPER_PAIR, SYMMETRIC_PAIR, GeometrySpec,
                               adapter_size_bytes, adapter_size_mb, exact_size_mb, lcf_params_per_layer,
                               lcf_total_params, lcfx_pool_params, lcfx_pool_params_per_layer, param_table,
                               reduction_vs_c2c)
from lcflow.lcf import LcfAdapter, LcfConfig


def brute_force_count(geom, d):
    """Count by instantiating the projector's shape table."""
    from lcflow.lcf import layer_param_shapes
    import numpy as np
    cfg = LcfConfig(d=d, layers=geom.layers, kv_heads=geom.kv_heads, head_dim=geom.head_dim,
                    sharer_layers=geom.layers, sharer_kv_heads=geom.sharer_kv_heads,
                    sharer_head_dim=geom.sharer_head_dim)
    return sum(int(np.prod(s)) for s in layer_param_shapes(cfg).values())


def test_joint_widths():
    assert PAPER_PAIR.joint_width == 2304
    assert SYMMETRIC_PAIR.joint_width == 4096


def test_per_layer_exact_values():
    assert lcf_params_per_layer(PAPER_PAIR, 128) == 693_650
    assert lcf_params_per_layer(PAPER_PAIR, 64) == 282_322
    assert lcf_params_per_layer(SYMMETRIC_PAIR, 128) == 923_026


@pytest.mark.parametrize("d, per_layer, total", [(64, 282e3, 7.9e6), (128, 693e3, 19.4e6),
                                                 (256, 1.9e6, 53.4e6), (512, 5.9e6, 165.5e6)])
def test_published_table_within_one_percent(d, per_layer, total):
    assert lcf_params_per_layer(PAPER_PAIR, d) == pytest.approx(per_layer, rel=0.01)
    assert lcf_total_params(PAPER_PAIR, d) == pytest.approx(total, rel=0.01)


def test_symmetric_pair_projector_total():
    assert lcf_total_params(SYMMETRIC_PAIR, 128) == pytest.approx(25.8e6, rel=0.01)


@pytest.mark.parametrize("d", [64, 128, 256, 512])
def test_closed_form_matches_shape_table(d):
    for geom in (PAPER_PAIR, SYMMETRIC_PAIR):
        assert lcf_params_per_layer(geom, d) == brute_force_count(geom, d)


@given(st.integers(1, 4), st.integers(1, 3), st.sampled_from([2, 4, 8]), st.sampled_from([2, 4, 6, 8]))
def test_closed_form_matches_instantiated_adapter(layers, heads, dim, d):
    geom = GeometrySpec(sharer_kv_heads=heads, sharer_head_dim=dim, layers=layers, kv_heads=heads, head_dim=dim)
    cfg = LcfConfig(d=d, layers=layers, kv_heads=heads, head_dim=dim, sharer_layers=layers,
                    sharer_kv_heads=heads, sharer_head_dim=dim, pool=True)
    assert LcfAdapter.init(cfg, 0).param_count() == lcf_total_params(geom, d) + lcfx_pool_params(geom)


def test_pool_costs():
    assert lcfx_pool_params_per_layer(SYMMETRIC_PAIR) == 2048
    assert lcfx_pool_params(SYMMETRIC_PAIR) == 57_344
    assert lcfx_pool_params(GeometrySpec(1, 1, 1, 1, 1)) == 2


@pytest.mark.parametrize("count, mb", [(lcf_total_params(PAPER_PAIR, 128), 39),
                                       (lcf_total_params(PAPER_PAIR, 128, 19), 26),
                                       (lcf_total_params(PAPER_PAIR, 128, 9), 13),
                                       (lcf_total_params(PAPER_PAIR, 128, 6), 8),
                                       (lcf_total_params(PAPER_PAIR, 256), 107),
                                       (lcf_total_params(PAPER_PAIR, 512), 331),
                                       (lcf_total_params(PAPER_PAIR, 64), 16),
                                       (C2C_TOTAL_PARAMS, 956)])
def test_reported_sizes(count, mb):
    assert adapter_size_mb(count) == mb


def test_size_rounding_details():
    assert adapter_size_bytes(19_382_200) == 38_764_400
    assert adapter_size_mb(19_382_200) == 39
    # 12.486 MB is reported as 13 MB: the tenth is taken first, then the unit
    assert exact_size_mb(6_242_850) == pytest.approx(12.4857)
    assert adapter_size_mb(6_242_850) == 13
    assert adapter_size_mb(0) == 0
    with pytest.raises(ValueError):
        adapter_size_bytes(-1)


def test_ratio_to_published_c2c():
    ratio = C2C_PARAMS_PER_LAYER / lcf_params_per_layer(PAPER_PAIR, 128)
    assert 24.0 <= ratio <= 25.0
    assert reduction_vs_c2c(lcf_total_params(PAPER_PAIR, 128)) == pytest.approx(24.6, abs=0.1)
    assert reduction_vs_c2c(lcf_total_params(PAPER_PAIR, 128, 9)) == pytest.approx(76.5, abs=0.3)


def test_param_table_rows():
    row = param_table("paper", "lcf", 128)
    assert row["params_per_layer"] == 693_650 and row["size_mb"] == 39 and row["joint_width"] == 2304
    assert param_table("symmetric", "pool", 0)["total_params"] == 57_344
    assert param_table("paper", "c2c", 0)["size_mb"] == 956
    assert param_table("paper", "lcf", 128, 9)["size_mb"] == 13
    with pytest.raises(ValueError):
        param_table("paper", "lcf", 128, 29)
    with pytest.raises(ValueError):
        param_table("paper", "mlp", 128)
    with pytest.raises(ValueError):
        lcf_params_per_layer(PAPER_PAIR, 65)
