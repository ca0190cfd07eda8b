import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drvit import tensor as T
from drvit import vq as V
from drvit.tensor import Tensor

TINY = V.VQConfig(codebook_size=8, embed_dim=4, stages=(1, 1, 1), channel_mult=(1, 1, 1), channels=4)


def brute_force_indices(z, codebook):
    out = []
    for row in z.reshape(-1, z.shape[-1]):
        best, best_d = 0, math.inf
        for j, v in enumerate(codebook):
            d = sum((a - b) ** 2 for a, b in zip(row, v))
            if d < best_d:  # strict: ties keep the lower index
                best, best_d = j, d
        out.append(best)
    return np.array(out).reshape(z.shape[:-1])


def test_forced_argmin():
    cb = Tensor([[1.0, 0.0], [0.0, 1.0]])
    q = V.quantize(Tensor([[0.9, 0.1]]), cb)
    assert q.indices.tolist() == [0]
    assert np.array_equal(q.z_q.data, [[1.0, 0.0]])


def test_tie_goes_to_lowest_index():
    cb = np.zeros((6, 2))
    cb[2] = [1.0, 0.0]
    cb[5] = [-1.0, 0.0]
    cb[[0, 1, 3, 4]] = 10.0
    q = V.quantize(Tensor([[0.0, 0.0]]), Tensor(cb))
    assert q.indices.tolist() == [2]


def test_matches_brute_force_on_random_inputs():
    rng = np.random.default_rng(0)
    cb = rng.standard_normal((16, 4))
    z = rng.standard_normal((100, 4))
    assert np.array_equal(V.nearest_code(z, cb), brute_force_indices(z, cb))


def test_quantize_errors():
    with pytest.raises(T.ShapeError):
        V.quantize(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        V.nearest_code(np.ones((2, 3)), np.ones((0, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        V.VQConfig(codebook_size=1)
    with pytest.raises(ValueError):
        V.VQConfig(embed_dim=0)
    with pytest.raises(ValueError):
        V.vqvae_loss(Tensor([0.0]), Tensor([0.0]), Tensor([[0.0]]), Tensor([[0.0]]), beta=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 16), st.integers(1, 5))
def test_quantize_is_idempotent_and_optimal(seed, k, d):
    rng = np.random.default_rng(seed)
    cb = rng.standard_normal((k, d))
    z = rng.standard_normal((3, 2, d))
    q = V.quantize(Tensor(z), Tensor(cb))
    assert np.array_equal(q.z_q.data, cb[q.indices])
    again = V.quantize(Tensor(q.z_q.data), Tensor(cb))
    assert np.array_equal(again.indices, q.indices)
    dist = ((z[..., None, :] - cb) ** 2).sum(-1)
    chosen = np.take_along_axis(dist, q.indices[..., None], -1)[..., 0]
    assert np.all(chosen <= dist.min(-1))


def test_ste_sum_gives_ones():
    z_e = T.parameter(np.random.default_rng(0).standard_normal((2, 3)))
    q = V.quantize(z_e, Tensor(np.random.default_rng(1).standard_normal((5, 3))))
    assert V.straight_through_grad_property(T.sum_, z_e, q.ste_output)
    assert np.array_equal(z_e.grad, np.ones((2, 3)))


def test_ste_through_decoder_matches_zq_grad():
    rng = np.random.default_rng(3)
    model = V.VqVae(TINY, rng)
    x = rng.uniform(size=(2, 16, 16, 3))
    z_e = model.encode(x)
    q = model.quantize(z_e)
    assert V.straight_through_grad_property(lambda s: T.mse(model.decode(s), x), z_e, q.ste_output)


def test_ste_frozen_z_e_gets_no_grad():
    z_e = Tensor(np.ones((2, 3)))
    q = V.quantize(z_e, Tensor(np.zeros((4, 3))))
    assert V.straight_through_grad_property(T.sum_, z_e, q.ste_output)
    assert z_e.grad is None


def test_loss_zero_when_perfect():
    x = np.random.default_rng(0).uniform(size=(1, 4, 4, 3))
    z = np.ones((1, 2, 2, 3))
    loss = V.vqvae_loss(Tensor(x), Tensor(x), Tensor(z), Tensor(z), 0.25)
    assert loss.total.item() == 0.0


def test_default_beta():
    assert V.VQConfig().beta == 0.25


def test_loss_partition_dict_to_codebook_commit_to_encoder():
    rng = np.random.default_rng(0)
    v = T.parameter(rng.standard_normal((1, 1, 1, 3)))
    delta = np.array([0.3, -0.1, 0.2]).reshape(1, 1, 1, 3)
    z_e = T.parameter(v.data + delta)
    x = Tensor(np.zeros((1, 2, 2, 1)))
    beta = 0.25
    loss = V.vqvae_loss(x, x, z_e, v, beta)
    assert abs(loss.total.item() - (1 + beta) * float((delta ** 2).sum())) < 1e-12

    T.backward(loss.dict)
    assert z_e.grad is None
    np.testing.assert_allclose(v.grad, -2 * delta, atol=1e-12)
    v.grad = None
    T.backward(loss.commit)
    assert v.grad is None
    np.testing.assert_allclose(z_e.grad, 2 * beta * delta, atol=1e-12)


def test_full_step_stop_gradient_placement():
    """Dict term never reaches the encoder; commit term never reaches the codebook."""
    rng = np.random.default_rng(5)
    model = V.VqVae(TINY, rng)
    x = rng.uniform(size=(2, 16, 16, 3))
    losses, _ = model.loss(x)
    T.backward(losses.dict)
    assert all(p.grad is None for n, p in model.named_parameters() if n.startswith("encoder"))
    assert np.any(model.codebook.grad)
    model.zero_grad()
    losses, _ = model.loss(x)
    T.backward(losses.commit)
    assert model.codebook.grad is None
    assert any(p.grad is not None and np.any(p.grad)
               for n, p in model.named_parameters() if n.startswith("encoder"))


def test_perplexity_examples():
    assert V.codebook_perplexity([10, 0, 0]) == 1.0
    assert abs(V.codebook_perplexity(np.ones(64)) - 64.0) < 1e-9
    # exp(1.5 ln 2) = 2 ** 1.5
    assert abs(V.codebook_perplexity([2, 1, 1]) - 2.8284271247461903) < 1e-12
    with pytest.raises(ValueError):
        V.codebook_perplexity([0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=1, max_size=64).filter(lambda h: sum(h) > 0))
def test_perplexity_range(hist):
    p = V.codebook_perplexity(hist)
    assert 1.0 - 1e-9 <= p <= len(hist) + 1e-9


def test_prior_kl_is_log_k():
    assert V.prior_kl_constant(64) == math.log(64)


def test_encode_grid_shape_and_divisibility():
    model = V.VqVae(TINY, 0)
    assert model.encode(np.zeros((2, 32, 32, 3))).shape == (2, 4, 4, 4)
    with pytest.raises(T.ShapeError):
        model.encode(np.zeros((1, 30, 32, 3)))


def test_desk_config_downsamples_to_patch_size():
    cfg = V.VQConfig()
    assert (cfg.codebook_size, cfg.embed_dim, cfg.downsample) == (64, 32, 8)


def test_decode_range_shape_determinism():
    model = V.VqVae(TINY, 0)
    z = np.zeros((1, 4, 4, 4))
    a = model.decode(z).data
    b = model.decode(z).data
    assert a.shape == (1, 32, 32, 3)
    assert np.all(np.isfinite(a)) and a.min() >= 0.0 and a.max() <= 1.0
    assert a.tobytes() == b.tobytes()
    with pytest.raises(T.ShapeError):
        model.decode(np.zeros((1, 4, 4, 5)))


def test_checkpoint_roundtrip(tmp_path):
    model = V.VqVae(TINY, 7)
    path = tmp_path / "m.ckpt"
    digest = V.save_vq(model, path)
    assert digest == V.file_sha256(path)
    back = V.load_vq(path)
    assert back.config == model.config
    x = np.random.default_rng(0).uniform(size=(2, 16, 16, 3))
    assert back.reconstruct(x).tobytes() == model.reconstruct(x).tobytes()
    assert V.vq_checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    raw = V.vq_checkpoint_bytes(V.VqVae(TINY, 0))
    with pytest.raises(ValueError, match="offset"):
        V.vq_from_bytes(raw[:-3])
    with pytest.raises(ValueError, match="magic"):
        V.vq_from_bytes(b"XXXX" + raw[4:])
