import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import fd_max_rel_error, random_problem
from metafap import checkpoint as ckpt_io
from metafap.checkpoint import Checkpoint
from metafap.data import Scaler
from metafap.errors import CheckpointError, ValidationError
from metafap.net import (
    Architecture,
    ModelParams,
    _layer_norm,
    backward,
    forward,
    init_params,
    loss_and_grad,
    predict_batch,
)
from metafap.objective import LossConfig, hubcor_loss

ARCH = Architecture()


def block_size(arch, prefix):
    return sum(int(np.prod(shape)) for name, shape in arch.shapes() if name.startswith(prefix))


def test_parameter_count_by_hand():
    # (in + 1) * out per dense layer, 2 * width per layer norm
    gating = 9 * 12 + 13 * 8
    other = 8 * 24 + 2 * 24 + 25 * 16
    freq = 2 * 8 + 9 * 8
    head = 33 * 48 + 2 * 48 + 49 * 24 + 25 * 3
    assert (gating, other, freq, head) == (212, 640, 88, 2931)
    assert ARCH.param_count() == gating + other + freq + head == 3871
    assert block_size(ARCH, "gate") == 212
    assert block_size(ARCH, "other") == 640
    assert block_size(ARCH, "freq") == 88
    assert block_size(ARCH, "head") + block_size(ARCH, "out") == 2931
    assert ARCH.concat_width == 32


@pytest.mark.parametrize("arch", [ARCH, Architecture(gating_hidden=5, other_hidden=10, head_hidden=7), Architecture(gate_mode="multiply")])
def test_layout_covers_vector(arch):
    slices = sorted((sl.start, sl.stop) for sl, _ in arch.layout.values())
    assert slices[0][0] == 0 and slices[-1][1] == arch.param_count()
    for (a0, a1), (b0, b1) in zip(slices, slices[1:]):
        assert a1 == b0
    assert len(init_params(arch)) == arch.param_count()


def test_architecture_validation_and_dict():
    with pytest.raises(ValidationError):
        Architecture(gate_mode="add")
    with pytest.raises(ValidationError):
        Architecture(drop_branch="gate")
    with pytest.raises(ValidationError):
        Architecture(dropout_rate=1.0)
    with pytest.raises(ValidationError):
        Architecture(gate_mode="multiply", gating_out=4)
    assert Architecture.from_dict(ARCH.to_dict()) == ARCH


def test_init_rules():
    p = init_params(ARCH, 3)
    assert np.array_equal(p.vector, init_params(ARCH, 3).vector)
    assert not np.array_equal(p.vector, init_params(ARCH, 4).vector)
    w = p.views()
    for name, shape in ARCH.shapes():
        kind = name.rsplit(".", 1)[1]
        if kind in ("b", "offset"):
            assert np.all(w[name] == 0), name
        elif kind == "gain":
            assert np.all(w[name] == 1), name
        else:
            limit = np.sqrt(6 / (shape[0] + shape[1]))
            assert np.all(np.abs(w[name]) <= limit), name


def test_params_immutable_and_length_checked():
    p = init_params(ARCH)
    with pytest.raises(ValueError):
        p.vector[0] = 1.0
    with pytest.raises(ValidationError):
        ModelParams(np.zeros(10), ARCH)


# -- forward ----------------------------------------------------------------------


def test_zero_params_uniform_output():
    out, _ = forward(ModelParams(np.zeros(3871)), np.random.default_rng(0).normal(size=(4, 8)))
    assert np.array_equal(out, np.full((4, 3), 1 / 3))


def test_eval_deterministic_and_train_stochastic():
    p = init_params(ARCH, 1)
    x = np.random.default_rng(1).normal(size=(16, 8))
    a, ca = forward(p, x, "eval")
    b, _ = forward(p, x, "eval")
    assert np.array_equal(a, b)
    assert ca.head_mask is None and ca.other_mask is None
    t1, _ = forward(p, x, "train", np.random.default_rng(0))
    t2, _ = forward(p, x, "train", np.random.default_rng(1))
    assert not np.array_equal(t1, t2)


def test_forward_errors():
    p = init_params(ARCH)
    with pytest.raises(ValidationError):
        forward(p, np.full((2, 8), np.nan))
    with pytest.raises(ValidationError):
        forward(p, np.zeros((2, 7)))
    with pytest.raises(ValidationError):
        forward(p, np.zeros((2, 8)), "train")
    with pytest.raises(ValidationError):
        forward(p, np.zeros((2, 8)), "infer")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 20))
def test_softmax_simplex(seed, scale):
    rng = np.random.default_rng(seed)
    p = ModelParams(scale * rng.normal(size=3871))
    out, _ = forward(p, scale * rng.normal(size=(5, 8)))
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.abs(out.sum(axis=1) - 1) < 1e-6)


def test_predict_batch_matches_forward():
    p = init_params(ARCH, 2)
    x = np.random.default_rng(2).normal(size=(10, 8))
    full = predict_batch(p, x)
    for i in range(10):
        assert np.array_equal(predict_batch(p, x[i : i + 1])[0], forward(p, x[i])[0][0])
    np.testing.assert_allclose(full, np.vstack([forward(p, r)[0] for r in x]), rtol=0, atol=1e-15)
    assert predict_batch(p, np.empty((0, 8))).shape == (0, 3)


def test_branch_drop_zeroes_branch():
    p = init_params(Architecture(drop_branch="freq"), 0)
    _, cache = forward(p, np.random.default_rng(0).normal(size=(3, 8)))
    assert np.all(cache.h_f == 0)
    # the branch weights stay in the layout so checkpoints keep one shape
    assert p.arch.param_count() == 3871


def test_layer_norm_shift_invariance():
    z = np.random.default_rng(0).normal(size=(6, 24))
    a, _ = _layer_norm(z, np.ones(24), np.zeros(24), 1e-5)
    b, _ = _layer_norm(z + 3.7, np.ones(24), np.zeros(24), 1e-5)
    assert np.max(np.abs(a - b)) < 1e-9


# -- backward ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "arch",
    [ARCH, Architecture(gate_mode="multiply"), Architecture(drop_branch="freq"), Architecture(drop_branch="other")],
    ids=["concat", "multiply", "no_freq", "no_other"],
)
@pytest.mark.parametrize("mode", ["eval", "train"])
def test_gradient_finite_differences(arch, mode):
    worst = max(fd_max_rel_error(*random_problem(arch, s), mode=mode, seed=s) for s in range(4))
    assert worst < 1e-4


def test_backward_loss_matches_objective():
    p, x, y = random_problem(ARCH, 5)
    out, cache = forward(p, x)
    assert backward(p, cache, y)[0] == hubcor_loss(out, y)[0]


def test_dropped_unit_has_zero_outgoing_gradient():
    p, x, y = random_problem(ARCH, 6)
    rng = np.random.default_rng(0)
    _, cache = forward(p, x, "train", rng)
    # unit 5 dropped for every row of the batch
    cache.head_mask[:, 5] = 0.0
    _, grad = backward(p, cache, y)
    sl, shape = ARCH.layout["head2.w"]
    assert np.all(grad[sl].reshape(shape)[5] == 0)


def test_stationary_point_under_mse_only():
    p = init_params(ARCH, 3)
    x = np.random.default_rng(3).normal(size=(8, 8))
    y = predict_batch(p, x)
    _, grad = loss_and_grad(p, x, y, LossConfig(huber_delta=10.0, corr_weight=0.0))
    assert np.linalg.norm(grad) < 1e-9


def test_cache_mismatch_rejected():
    p = init_params(ARCH)
    _, cache = forward(init_params(Architecture(drop_branch="freq")), np.zeros((2, 8)))
    with pytest.raises(ValidationError):
        backward(p, cache, np.full((2, 3), 1 / 3))


# -- checkpoints ------------------------------------------------------------------


def make_ckpt(arch=ARCH):
    rng = np.random.default_rng(0)
    return Checkpoint(init_params(arch, 1), Scaler(rng.normal(size=8), rng.random(8) + 0.5), {"seed": 1})


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    ck = make_ckpt()
    path = tmp_path / "c.json"
    ckpt_io.save(ck, path)
    back = ckpt_io.load(path, ARCH)
    assert np.array_equal(back.params.vector, ck.params.vector)
    assert np.array_equal(back.scaler.mean, ck.scaler.mean)
    assert back.metadata == {"seed": 1}
    assert ckpt_io.dumps(back) == path.read_text()
    assert path.stat().st_size < 256 * 1024


def test_checkpoint_errors(tmp_path):
    text = ckpt_io.dumps(make_ckpt())
    with pytest.raises(CheckpointError):
        ckpt_io.loads(text, Architecture(drop_branch="freq"))
    with pytest.raises(CheckpointError):
        ckpt_io.loads("{not json")
    with pytest.raises(CheckpointError):
        ckpt_io.loads(text.replace('"format_version": 1', '"format_version": 9'))


def test_checkpoint_predict_uses_scaler():
    ck = make_ckpt()
    raw = np.random.default_rng(1).normal(size=(4, 8))
    np.testing.assert_array_equal(ck.predict(raw), predict_batch(ck.params, ck.scaler.transform(raw)))
