import numpy as np
import pytest

from tasseg.ase import Ase, AseConfig, AttentionBlock, ase_forward, block_window
from tasseg.gradcheck import gradcheck
from tasseg.tensor import ContractError, Tensor, window_mask

TINY = AseConfig(in_dim=5, num_classes=4, width=6, num_decoders=3, blocks_per_stage=3)


def test_window_schedule():
    cfg = AseConfig()
    assert [block_window(cfg, i, 10_000) for i in range(1, 10)] == [2**i for i in range(1, 10)]
    assert block_window(cfg, 9, 100) == 100
    assert block_window(cfg, 3, 5) == 5


def test_config_validation():
    with pytest.raises(ContractError):
        AseConfig(blocks_per_stage=0)
    with pytest.raises(ContractError):
        AseConfig(kernel_size=2)
    assert AseConfig().num_stages == 4


def test_forward_shapes(rng):
    stages = ase_forward(rng.normal(size=(32, 5)), Ase(TINY, seed=0))
    assert len(stages) == 4
    assert all(s.shape == (32, 4) for s in stages)


def test_full_default_shapes(rng):
    cfg = AseConfig(in_dim=8, num_classes=15)
    stages = Ase(cfg, seed=0)(rng.normal(size=(40, 8)))
    assert len(stages) == 4 and all(s.shape == (40, 15) for s in stages)


def test_rejects_empty_input():
    with pytest.raises(ContractError):
        Ase(TINY)(np.zeros((0, 5)))


@pytest.mark.parametrize("index", range(1, 8))
@pytest.mark.parametrize("cross", [False, True])
def test_block_shape_and_locality(rng, index, cross):
    t = 40
    block = AttentionBlock(rng, 6, index, cross=cross)
    x = Tensor(rng.normal(size=(t, 6)))
    enc = Tensor(rng.normal(size=(t, 6))) if cross else None
    w = block_window(AseConfig(), index, t)
    y, weights = block(x, w, enc, return_weights=True)
    assert y.shape == (t, 6)
    inside = window_mask(t, w)
    assert np.all(weights[~inside] == 0.0)
    np.testing.assert_allclose(weights.sum(1), 1.0, atol=1e-12)


def test_unit_window_attends_to_self(rng):
    block = AttentionBlock(rng, 6, 1)
    _, weights = block(Tensor(rng.normal(size=(12, 6))), 1, return_weights=True)
    np.testing.assert_array_equal(weights, np.eye(12))


def test_decoder_value_path_isolated_from_encoder(rng):
    block = AttentionBlock(rng, 6, 2, cross=True)
    x = Tensor(rng.normal(size=(15, 6)))
    enc = Tensor(rng.normal(size=(15, 6)))
    zero = Tensor(np.zeros((15, 6)))
    # with a unit window the weights are the identity, so only V matters
    a = block(x, 1, enc).data
    b = block(x, 1, zero).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    # a wider window lets Q/K (and thus the encoder) change the output
    assert not np.allclose(block(x, 4, enc).data, block(x, 4, zero).data)


def test_decoder_length_mismatch(rng):
    block = AttentionBlock(rng, 6, 1, cross=True)
    with pytest.raises(ContractError):
        block(Tensor(np.zeros((5, 6))), 2, Tensor(np.zeros((4, 6))))
    with pytest.raises(ContractError):
        block(Tensor(np.zeros((5, 6))), 2, None)


def test_deterministic(rng):
    x = rng.normal(size=(25, 5))
    a = [s.data for s in Ase(TINY, seed=9)(x)]
    b = [s.data for s in Ase(TINY, seed=9)(x)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    c = [s.data for s in Ase(TINY, seed=10)(x)]
    assert not np.array_equal(a[-1], c[-1])


@pytest.mark.parametrize("scale", [1.0, 1e2, 1e3])
def test_finite_for_large_inputs(rng, scale):
    stages = Ase(TINY, seed=1)(rng.normal(size=(50, 5)) * scale)
    assert all(np.all(np.isfinite(s.data)) for s in stages)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("cross", [False, True])
def test_gradcheck_block(seed, cross):
    rng = np.random.default_rng(seed)
    block = AttentionBlock(rng, 4, 1 + seed % 3, cross=cross)
    x = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
    enc = Tensor(rng.normal(size=(9, 4)), requires_grad=True) if cross else None
    g = Tensor(rng.normal(size=(9, 4)))
    w = 2 ** (1 + seed % 3)
    leaves = [x] + ([enc] if cross else []) + block.parameters()
    assert gradcheck(lambda: (block(x, w, enc) * g).sum(), leaves, max_coords=6, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_full_model(seed):
    rng = np.random.default_rng(seed)
    cfg = AseConfig(in_dim=3, num_classes=3, width=4, num_decoders=1, blocks_per_stage=2)
    model = Ase(cfg, seed=seed)
    x = rng.normal(size=(8, 3))
    g = [Tensor(rng.normal(size=(8, 3))) for _ in range(2)]
    loss = lambda: sum(((s * gi).sum() for s, gi in zip(model(x), g)), Tensor(0.0))  # noqa: E731
    assert gradcheck(loss, model.parameters(), max_coords=3, seed=seed) < 1e-4
