import numpy as np
import pytest

from octforce import autodiff as ad
from octforce import nets
from octforce.autodiff import Tensor
from octforce.nets import ArchId, LayerSpec

from oracles import gru_cell_scalar, grad_check

TINY = LayerSpec(groups=((1, 2), (1, 3)), convgru_layers=2, convgru_maps=2, gru_layers=3, gru_hidden=3, cnn_gru_layers=2)
WIDER = LayerSpec(groups=((1, 8), (1, 16)), convgru_layers=1, convgru_maps=4)
GATES = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def gru_params(rng, n_in, hidden, scale=1.0):
    shapes = {"w": (n_in, hidden), "u": (hidden, hidden), "b": (hidden,)}
    return {g: Tensor(scale * rng.standard_normal(shapes[g[0]]), requires_grad=True) for g in GATES}


def convgru_params(rng, c_in, maps, k, scale=1.0):
    shapes = {"w": (maps, c_in, k), "u": (maps, maps, k), "b": (maps,)}
    return {g: Tensor(scale * rng.standard_normal(shapes[g[0]]), requires_grad=True) for g in GATES}


def block_params(rng, c_in, c_out, dims, project, scale=0.5):
    k = (3,) * dims
    p = {
        "w1": rng.standard_normal((c_out, c_in) + k),
        "b1": rng.standard_normal(c_out),
        "w2": rng.standard_normal((c_out, c_out) + k),
        "b2": rng.standard_normal(c_out),
    }
    if project:
        p["wp"] = rng.standard_normal((c_out, c_in) + (1,) * dims)
        p["bp"] = rng.standard_normal(c_out)
    return {n: Tensor(scale * v, requires_grad=True) for n, v in p.items()}


def _proj(out_fn, seed):
    r = np.random.default_rng(seed + 99)
    cache = {}

    def loss():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = r.standard_normal(out.shape)
        return (out * cache["r"]).sum()

    return loss


# --- GRU -----------------------------------------------------------------


def test_gru_zero_params_halves_state():
    rng = np.random.default_rng(0)
    p = {k: Tensor(np.zeros_like(v.value)) for k, v in gru_params(rng, 3, 4).items()}
    h = rng.standard_normal((2, 4))
    out = nets.gru_cell(Tensor(rng.standard_normal((2, 3))), Tensor(h), p)
    np.testing.assert_array_equal(out.value, 0.5 * h)


@pytest.mark.parametrize("seed", range(10))
def test_gru_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(rng, 3, 3)
    x, h = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    out = nets.gru_cell(Tensor(x), Tensor(h), p)
    ref = gru_cell_scalar(x, h, {k: v.value for k, v in p.items()})
    np.testing.assert_allclose(out.value, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gru_state_stays_bounded(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(rng, 4, 5, scale=3.0)
    h = Tensor(rng.uniform(-1, 1, (6, 5)))
    for _ in range(20):
        h = nets.gru_cell(Tensor(10 * rng.standard_normal((6, 4))), h, p)
        assert np.all(np.abs(h.value) <= 1.0)


def test_gru_shape_mismatch():
    rng = np.random.default_rng(0)
    p = gru_params(rng, 3, 4)
    with pytest.raises(ValueError, match="hidden state"):
        nets.gru_cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5))), p)
    with pytest.raises(ValueError, match="input"):
        nets.gru_cell(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 4))), p)


@pytest.mark.parametrize("seed", range(10))
def test_gru_cell_gradient(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(rng, 3, 4)
    x, h = Tensor(rng.standard_normal((2, 3)), requires_grad=True), Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    loss = _proj(lambda: nets.gru_cell(x, h, p), seed)
    assert grad_check(loss, [x, h] + list(p.values())) <= 1e-4


# --- convGRU -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_convgru_kernel1_is_pixelwise_gru(seed):
    rng = np.random.default_rng(seed)
    c_in, maps, length = 2, 3, 6
    p = convgru_params(rng, c_in, maps, 1)
    x, h = rng.standard_normal((2, c_in, length)), rng.standard_normal((2, maps, length))
    out = nets.convgru_cell(Tensor(x), Tensor(h), p).value
    # conv weight [maps, c_in, 1] acts like dense weight [c_in, maps]
    dense = {k: Tensor(v.value[..., 0].T if k[0] in "wu" else v.value) for k, v in p.items()}
    for pos in range(length):
        ref = nets.gru_cell(Tensor(x[:, :, pos]), Tensor(h[:, :, pos]), dense).value
        np.testing.assert_allclose(out[:, :, pos], ref, rtol=0, atol=1e-12)


def test_convgru_zero_params_and_shape():
    rng = np.random.default_rng(1)
    p = {k: Tensor(np.zeros_like(v.value)) for k, v in convgru_params(rng, 1, 4, 3).items()}
    for length in (1, 7, 70):
        h = rng.standard_normal((2, 4, length))
        out = nets.convgru_cell(Tensor(rng.standard_normal((2, 1, length))), Tensor(h), p)
        assert out.shape == (2, 4, length)
        np.testing.assert_array_equal(out.value, 0.5 * h)


@pytest.mark.parametrize("seed", range(10))
def test_convgru_cell_gradient(seed):
    rng = np.random.default_rng(seed)
    p = convgru_params(rng, 2, 2, 3, scale=0.7)
    x = Tensor(rng.standard_normal((2, 2, 5)), requires_grad=True)
    h = Tensor(rng.standard_normal((2, 2, 5)), requires_grad=True)
    loss = _proj(lambda: nets.convgru_cell(x, h, p), seed)
    assert grad_check(loss, [x, h] + list(p.values())) <= 1e-4


# --- residual blocks -----------------------------------------------------


def test_resblock_identity_shortcut():
    rng = np.random.default_rng(0)
    p = block_params(rng, 3, 3, 1, project=False)
    p["w2"] = Tensor(np.zeros_like(p["w2"].value))
    p["b2"] = Tensor(np.zeros(3))
    x = rng.standard_normal((2, 3, 9))
    y = nets.resblock_1d(Tensor(x), p, stride=1, F_out=3)
    np.testing.assert_array_equal(y.value, np.maximum(x, 0))


def test_resblock_stride2_shape():
    rng = np.random.default_rng(0)
    y = nets.resblock_1d(Tensor(rng.standard_normal((2, 3, 35))), block_params(rng, 3, 5, 1, True), 2, 5)
    assert y.shape == (2, 5, 18)
    y2 = nets.resblock_2d(Tensor(rng.standard_normal((2, 3, 7, 9))), block_params(rng, 3, 5, 2, True), 2, 5)
    assert y2.shape == (2, 5, 4, 5)
    with pytest.raises(ValueError):
        nets.resblock_1d(Tensor(np.zeros((1, 3, 8))), block_params(rng, 3, 3, 1, False), 3, 3)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("dims,stride,c_in,c_out", [(1, 1, 2, 2), (1, 2, 2, 3), (2, 1, 2, 2), (2, 2, 1, 2)])
def test_resblock_gradient(seed, dims, stride, c_in, c_out):
    rng = np.random.default_rng(seed)
    p = block_params(rng, c_in, c_out, dims, project=(stride != 1 or c_in != c_out))
    shape = (2, c_in, 7) if dims == 1 else (2, c_in, 4, 5)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    block = nets.resblock_1d if dims == 1 else nets.resblock_2d
    loss = _proj(lambda: block(x, p, stride, c_out), seed)
    assert grad_check(loss, [x] + list(p.values())) <= 1e-4


# --- full models ---------------------------------------------------------


@pytest.mark.parametrize("arch", list(ArchId))
def test_output_shape_default_window(arch):
    model = nets.build(arch, LayerSpec(groups=((1, 4), (1, 8)), convgru_maps=4, gru_hidden=8), d_c=70)
    x = np.random.default_rng(0).random((2, 50, 70)).astype(np.float32)
    assert model(x).shape == (2, 1)


@pytest.mark.parametrize("arch", list(ArchId))
def test_models_are_pure_functions(arch):
    model = nets.build(arch, TINY, d_c=8, seed=3, dtype=np.float64)
    x = np.random.default_rng(0).random((3, 4, 8))
    assert model(x).value.tobytes() == model(x).value.tobytes()


def test_cnn1d_ignores_history():
    model = nets.build(ArchId.Cnn1d, TINY, seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((3, 6, 8))
    shuffled = x.copy()
    shuffled[:, :-1] = x[:, rng.permutation(5)]
    shuffled[:, :-1] += rng.random((3, 5, 8))
    np.testing.assert_array_equal(model(x).value, model(shuffled).value)


def test_convgru_cnn_sees_temporal_order():
    rng = np.random.default_rng(0)
    changed = 0
    for trial in range(20):
        model = nets.build(ArchId.ConvGruCnn, WIDER, seed=trial, dtype=np.float64)
        x = rng.random((1, 6, 8))
        perm = x[:, rng.permutation(6)]
        changed += not np.allclose(model(x).value, model(perm).value, rtol=0, atol=1e-12)
    assert changed == 20


def test_trunk_param_count_formula():
    spec = LayerSpec()
    one = nets.build(ArchId.Cnn1d, spec)
    two = nets.build(ArchId.Cnn2d, spec)
    n1, n2 = one.n_params("cnn."), two.n_params("cnn.")
    assert n1 == nets.trunk_param_count(spec, 1, 1)
    assert n2 == nets.trunk_param_count(spec, 1, 2)
    # the 2D trunk swaps every 3-tap kernel for a 3x3 one: 6 extra weights per (out, in) pair
    pairs = (n2 - n1) // 6
    assert n2 - n1 == 6 * pairs
    assert pairs == sum(p.value[:, :, 0].size for k, p in one.params.items() if k.startswith("cnn.") and k[-2:] in ("w1", "w2"))


def test_build_rejects_bad_spec():
    with pytest.raises(ValueError, match="non-decreasing"):
        nets.build(ArchId.Cnn1d, LayerSpec(groups=((1, 8), (1, 4))))
    with pytest.raises(ValueError, match="odd"):
        nets.build(ArchId.Cnn1d, LayerSpec(kernel=4))
    with pytest.raises(ValueError, match="d_c"):
        nets.build(ArchId.Gru, LayerSpec())
    with pytest.raises(ValueError, match="unknown architecture"):
        ArchId.parse("lstm")


def test_arch_names_are_the_five_table_rows():
    assert [a.value for a in ArchId] == ["convgru-cnn", "cnn-gru", "2d-cnn", "1d-cnn", "gru"]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("arch", list(ArchId))
def test_end_to_end_gradient_tiny(arch, seed):
    model = nets.build(arch, TINY, d_c=8, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # zero-initialised biases put dead-ReLU positions exactly on the kink, where differences are undefined
    for name, p in model.params.items():
        if not np.any(p.value):
            p.value = rng.uniform(-0.5, 0.5, p.shape)
    x = rng.random((2, 4, 8))
    y = rng.random((2, 1))
    err = grad_check(lambda: ad.mse_loss(model(x), y), list(model.params.values()))
    assert err <= 1e-4, f"{arch.value}: {err:.2e}"


def test_checkpoint_round_trip(tmp_path):
    model = nets.build(ArchId.ConvGruCnn, TINY, seed=5)
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(model.params, path)
    loaded = nets.load_checkpoint(path)
    assert list(loaded) == list(model.params)
    for k, p in model.params.items():
        assert loaded[k].astype(p.dtype).tobytes() == p.value.tobytes()
    # a second save of the loaded arrays is byte-identical
    nets.save_checkpoint(loaded, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-3])
    with pytest.raises(nets.CheckpointError, match="truncated"):
        nets.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad2.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(nets.CheckpointError, match="magic"):
        nets.load_checkpoint(tmp_path / "bad2.ckpt")
