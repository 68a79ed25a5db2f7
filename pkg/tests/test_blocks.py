import numpy as np
import pytest

import oracles
from msfuse import ops
from msfuse.dense import DenseLayer, DenseMsfBlock, DenseMsfConfig, dense_input_channels
from msfuse.encoder import Encoder, check_streams, stream_widths
from msfuse.errors import ConfigError, DimensionError
from msfuse.focal import FocalFuseBlock, FocalFuseConfig, FocalState, RescaleCross, aggregate
from msfuse.tensor import Tensor, precision


def _streams(rng, widths, ext):
    return [Tensor(rng.standard_normal((w,) + tuple(n >> a for n in ext))) for a, w in enumerate(widths)]


def _perturb(module, rng):
    for p in module.parameters():
        p.data = (p.data + 0.2 * rng.standard_normal(p.shape)).astype(np.float64)


def test_stream_widths_double_per_scale():
    assert stream_widths(8) == [8, 16, 32, 64]


def test_encoder_pyramid_shapes():
    enc = Encoder(2, np.random.default_rng(0))
    out = enc(Tensor(np.zeros((2, 16, 8, 8))))
    assert [o.shape for o in out] == [(2, 16, 8, 8), (4, 8, 4, 4), (8, 4, 2, 2), (16, 2, 1, 1)]
    check_streams(out, [2, 4, 8, 16])


def test_encoder_rejects_extents_not_divisible_by_8():
    with pytest.raises(ConfigError):
        Encoder(2, np.random.default_rng(0))(Tensor(np.zeros((2, 12, 8, 8))))


def test_check_streams_rejects_wrong_pyramid():
    rng = np.random.default_rng(0)
    s = _streams(rng, [2, 4, 8, 16], (8, 8, 8))
    with pytest.raises(DimensionError):
        check_streams(s[:3])
    s[2] = Tensor(np.zeros((8, 3, 2, 2)))
    with pytest.raises(DimensionError):
        check_streams(s)


def test_aggregate_matches_voxel_loop():
    rng = np.random.default_rng(1)
    levels = [rng.standard_normal((3, 4, 4, 4)) for _ in range(3)]
    levels.append(rng.standard_normal((3, 1, 1, 1)))  # global level broadcasts
    gates = rng.standard_normal((4, 4, 4, 4))
    got = aggregate([Tensor(f) for f in levels], Tensor(gates)).data
    full = [np.broadcast_to(f, (3, 4, 4, 4)) for f in levels]
    np.testing.assert_allclose(got, oracles.aggregate(full, gates), rtol=1e-6)


def test_aggregate_rejects_gate_count_mismatch():
    with pytest.raises(DimensionError):
        aggregate([Tensor(np.ones((1, 2, 2, 2)))] * 2, Tensor(np.ones((3, 2, 2, 2))))


@pytest.mark.parametrize("src,dst", [(1, 2), (1, 4), (3, 1), (4, 2)])
def test_rescale_cross_matches_oracle(src, dst):
    rng = np.random.default_rng(src * 10 + dst)
    with precision(np.float64):
        r = RescaleCross(2, 3, src, dst, rng)
    _perturb(r, rng)
    x = rng.standard_normal((2,) + (8 >> (src - 1),) * 3)
    dw_b = None if r.resample.bias is None else r.resample.bias.data
    want = oracles.rescale(x, src, dst, r.resample.weight.data, dw_b, r.projection.weight.data, r.projection.bias.data)
    np.testing.assert_allclose(r(Tensor(x)).data, want, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("src,dst", [(1, 3), (4, 1)])
def test_rescale_initialisation_passes_constant_fields(src, dst):
    r = RescaleCross(2, 2, src, dst, np.random.default_rng(0))
    r.projection.set_identity()
    x = np.full((2,) + (8 >> (src - 1),) * 3, 1.5, dtype=np.float32)
    out = r(Tensor(x)).data
    # zero padding touches the borders of the downward path only
    interior = out[:, 1:-1, 1:-1, 1:-1] if src > dst else out
    assert out.shape[1:] == ((8 >> (dst - 1)),) * 3
    np.testing.assert_allclose(interior, 1.5, rtol=1e-6)


def test_rescale_down_is_block_mean_at_init():
    r = RescaleCross(1, 1, 1, 2, np.random.default_rng(0))
    r.projection.set_identity()
    x = np.random.default_rng(1).standard_normal((1, 4, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(r(Tensor(x)).data, oracles.pool3d(x, "avg"), rtol=1e-5, atol=1e-6)


def _dense_params(layer):
    return {
        "foreign": {b: {"dw_w": rc.resample.weight.data,
                        "dw_b": None if rc.resample.bias is None else rc.resample.bias.data,
                        "proj_w": rc.projection.weight.data, "proj_b": rc.projection.bias.data}
                    for b, rc in layer.foreign.items()},
        "mix_w": layer.mix.weight.data, "mix_b": layer.mix.bias.data,
        "dw_w": layer.dw.weight.data, "dw_b": layer.dw.bias.data,
    }


@pytest.mark.parametrize("a,l", [(0, 1), (1, 2), (3, 1)])
def test_dense_layer_matches_oracle(a, l):
    rng = np.random.default_rng(a + 7 * l)
    widths, g = [1, 2, 4, 8], 2
    layer = DenseLayer(a, l, widths, g, rng)
    _perturb(layer, rng)
    ext = (8, 8, 8)
    own = [rng.standard_normal((widths[a],) + tuple(n >> a for n in ext))]
    own += [rng.standard_normal((g,) + tuple(n >> a for n in ext)) for _ in range(l - 1)]
    foreign = {b: rng.standard_normal((widths[b] if l == 1 else g,) + tuple(n >> b for n in ext))
               for b in range(4) if b != a}
    got = layer([Tensor(h) for h in own], {b: Tensor(v) for b, v in foreign.items()}).data
    want = oracles.dense_layer(own, foreign, _dense_params(layer), a)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_dense_input_channel_count():
    assert dense_input_channels(8, 1, 4) == 8 + 3 * 4
    assert dense_input_channels(8, 3, 4) == 8 + 2 * 4 + 3 * 4


def _count_linear(cin, cout):
    return cin * cout + cout


def _count_rescale(cin, cout, src, dst, k=3):
    if src == dst:
        return 0
    if dst > src:
        return cin * k ** 3 + cin + _count_linear(cin, cout)
    return _count_linear(cin, cout) + cout * k ** 3


def test_focal_block_parameter_count_audit():
    widths, n, k = [2, 4, 8, 16], 2, 3
    block = FocalFuseBlock(widths, FocalFuseConfig(num_levels=n), np.random.default_rng(0))
    want = 0
    for a, w in enumerate(widths):
        want += _count_linear(w, w)  # embed
        for _ in range(n):
            want += sum(_count_rescale(widths[b], w, b + 1, a + 1) for b in range(4) if b != a)
            want += _count_linear(4 * w, w) + w * k ** 3 + w
        want += _count_linear(w, n + 1) + 2 * _count_linear(w, w)  # gate, query, out_proj
    assert block.num_parameters() == want


def test_dense_block_parameter_count_audit():
    widths, L, g, k = [2, 4, 8, 16], 3, 4, 3
    block = DenseMsfBlock(widths, DenseMsfConfig(layers_per_block=L, growth_rate=g), np.random.default_rng(0))
    want = 0
    for a, w in enumerate(widths):
        for l in range(1, L + 1):
            want += sum(_count_rescale(widths[b] if l == 1 else g, g, b + 1, a + 1) for b in range(4) if b != a)
            want += _count_linear(dense_input_channels(w, l, g), g) + g * k ** 3 + g
        want += _count_linear(w + L * g, w)
    assert block.num_parameters() == want


@pytest.mark.parametrize("make", [
    lambda w, r: FocalFuseBlock(w, FocalFuseConfig(num_levels=3), r),
    lambda w, r: DenseMsfBlock(w, DenseMsfConfig(layers_per_block=2, growth_rate=3), r),
])
def test_blocks_preserve_stream_shapes(make):
    rng = np.random.default_rng(0)
    widths = [2, 4, 8, 16]
    s = _streams(rng, widths, (16, 8, 8))
    out = make(widths, rng)(s)
    assert [o.shape for o in out] == [t.shape for t in s]


def test_focal_state_records_levels_and_gates():
    rng = np.random.default_rng(0)
    widths = [2, 4, 8, 16]
    block = FocalFuseBlock(widths, FocalFuseConfig(num_levels=2), rng)
    state = FocalState()
    streams = _streams(rng, widths, (8, 8, 8))
    out = block(streams, state)
    assert len(state.levels) == 4 and len(state.levels[0]) == 4  # F0, two levels, global
    assert state.gates[0].shape == (3, 8, 8, 8)
    assert state.levels[0][-1].shape == (2, 1, 1, 1)
    # modulation by hand: out_proj(aggregated * query(X))
    x = streams[1].data.astype(np.float64)
    q = oracles.pointwise(x, block.query[1].weight.data, block.query[1].bias.data)
    want = oracles.pointwise(state.aggregated[1].data * q, block.out_proj[1].weight.data, block.out_proj[1].bias.data)
    np.testing.assert_allclose(out[1].data, want, rtol=1e-4, atol=1e-5)


def test_freezing_cross_scale_projections_zeroes_foreign_contribution():
    rng = np.random.default_rng(0)
    widths = [2, 4, 8, 16]
    block = FocalFuseBlock(widths, FocalFuseConfig(num_levels=1), rng)
    for proj in block.cross_scale_projections():
        proj.weight.data[:] = 0.0
        proj.bias.data[:] = 0.0
    s = _streams(rng, widths, (8, 8, 8))
    base = block(s)[0].data
    s2 = list(s)
    s2[3] = Tensor(s[3].data + 100.0)  # foreign streams no longer reach stream 1
    np.testing.assert_array_equal(block(s2)[0].data, base)
