import numpy as np
import pytest

from exfm.errors import DimensionMismatch
from exfm.models import (
    Layer,
    Mlp,
    VMArch,
    backward,
    check_capacity,
    deserialize_snapshot,
    fm_forward,
    forward,
    init_fm,
    init_mlp,
    init_vm,
    mlp_forward,
    serialize_snapshot,
    sgd_step,
)
from exfm.numerics import seeded_rng, sigmoid


def zero_vm(in_dim=5, b=4, hidden=3):
    rng = seeded_rng(0)
    bb = init_mlp(rng, [in_dim, b], ["relu"], zero=True)
    heads = [init_mlp(rng, [b, hidden, 1], zero=True) for _ in range(3)]
    return VMArch(bb, *heads)


def test_zero_network_gives_half():
    out = forward(zero_vm(), np.ones(5))
    for z in (out.y_s, out.y_d, out.y_sa_head):
        assert sigmoid(z) == 0.5


def test_linear_composition():
    w = np.array([0.5, -1.0, 2.0])
    bb = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
    head = Mlp([Layer(w[:, None], np.zeros(1), "identity")])
    vm = VMArch(bb, head, head.copy(), head.copy())
    x = np.array([1.0, 2.0, 3.0])
    assert forward(vm, x).y_s == pytest.approx(w @ x)


def test_forward_matches_reference_chain():
    vm = init_vm(seeded_rng(3), 6, (8, 5), 4)
    X = seeded_rng(4).standard_normal((7, 6))
    h = X
    for layer in vm.backbone.layers:
        h = np.maximum(h @ layer.weight + layer.bias, 0)
    ref = h
    for layer in vm.serving_head.layers:
        ref = ref @ layer.weight + layer.bias
        if layer.activation == "relu":
            ref = np.maximum(ref, 0)
    np.testing.assert_allclose(forward(vm, X).y_s, ref[:, 0], rtol=1e-12)


def test_forward_pure_and_dimension_checked():
    vm = init_vm(seeded_rng(1), 4)
    x = seeded_rng(2).standard_normal(4)
    assert forward(vm, x).y_s == forward(vm, x).y_s
    with pytest.raises(DimensionMismatch):
        forward(vm, np.ones(5))


def test_backward_zero_signal():
    vm = init_vm(seeded_rng(1), 4)
    fwd = forward(vm, np.ones(4))
    g = backward(vm, fwd, (0.0, 0.0, 0.0))
    assert all(not np.any(a) for a in g.arrays())


def test_gradient_scale_gate_and_linearity():
    rng = seeded_rng(5)
    base = init_vm(rng, 4, (6,), 3)
    X = rng.standard_normal((3, 4))
    d = (rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
    grads = {}
    for beta in (0.0, 1.0, 2.0):
        vm = VMArch(*base.parts(), grad_scale=beta)
        grads[beta] = backward(vm, forward(vm, X), d)
    serving_only = backward(VMArch(*base.parts(), grad_scale=1.0), forward(base, X),
                            (d[0], np.zeros(3), np.zeros(3)))
    for a, b in zip(grads[0.0].backbone.arrays(), serving_only.backbone.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-14)
    for g0, g1, g2 in zip(grads[0.0].backbone.arrays(), grads[1.0].backbone.arrays(),
                          grads[2.0].backbone.arrays()):
        np.testing.assert_allclose(g2, 2 * g1 - g0, atol=1e-10)
    # Head-internal gradients do not see beta.
    for a, b in zip(grads[0.0].ah_head.arrays(), grads[2.0].ah_head.arrays()):
        np.testing.assert_array_equal(a, b)


def test_sgd_step_arithmetic():
    assert sgd_step(np.array([1.0]), np.array([0.5]), 0.1)[0] == pytest.approx(0.95)
    vm = init_vm(seeded_rng(0), 3)
    zero = backward(vm, forward(vm, np.ones(3)), (0, 0, 0))
    stepped = sgd_step(vm, zero, 0.1)
    for a, b in zip(vm.arrays(), stepped.arrays()):
        np.testing.assert_array_equal(a, b)


def test_sgd_quadratic_converges_geometrically():
    w = np.array([0.0])
    gaps = []
    for _ in range(20):
        w = sgd_step(w, w - 3.0, 0.5)
        gaps.append(abs(3.0 - w[0]))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, 0.5)


def test_fm_forward_zero_and_logistic():
    fm = init_mlp(seeded_rng(0), [3, 4, 1], zero=True)
    assert fm_forward(fm, np.ones(3)) == 0.5
    w = np.array([0.3, -0.2, 1.1])
    unit = Mlp([Layer(w[:, None], np.zeros(1), "identity")])
    x = np.array([1.0, 2.0, -1.0])
    assert fm_forward(unit, x) == pytest.approx(sigmoid(w @ x))


def test_snapshot_round_trip_bitwise():
    fm = init_fm(seeded_rng(9), 6, (16, 8))
    X = seeded_rng(10).standard_normal((5, 6))
    blob = serialize_snapshot(fm, 12345)
    assert blob.startswith(b"EXFM-SNAP v1\n12345\n")
    version, back = deserialize_snapshot(blob)
    assert version == 12345
    assert fm_forward(back, X).tobytes() == fm_forward(fm, X).tobytes()


def test_snapshot_rejects_garbage():
    blob = serialize_snapshot(init_fm(seeded_rng(0), 2, (3,)), 1)
    with pytest.raises(ValueError):
        deserialize_snapshot(blob + b"x")
    with pytest.raises(ValueError):
        deserialize_snapshot(b"nope\n" + blob)


def test_capacity_ratio_enforced():
    rng = seeded_rng(0)
    vm = init_vm(rng, 16)
    check_capacity(init_fm(rng, 16, (256, 256)), [vm], 4)
    with pytest.raises(ValueError):
        check_capacity(init_fm(rng, 16, (8,)), [vm], 4)


def test_mlp_shapes_must_chain():
    with pytest.raises(ValueError):
        Mlp([Layer(np.zeros((2, 3)), np.zeros(3), "relu"), Layer(np.zeros((4, 1)), np.zeros(1), "identity")])


def test_mlp_forward_batch_shape():
    mlp = init_mlp(seeded_rng(0), [3, 5, 2])
    out, cache = mlp_forward(mlp, np.ones((4, 3)))
    assert out.shape == (4, 2)
