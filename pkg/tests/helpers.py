import numpy as np

from exfm.distill import AHConfig, DistillMode, composite_objective, head_dlogits
from exfm.models import VMArch, backward, forward, init_vm
from exfm.numerics import finite_diff_grad, seeded_rng


def flat_params(vm):
    return np.concatenate([a.ravel() for a in vm.arrays()])


def with_params(vm, flat):
    new = VMArch(*[p.copy() for p in vm.parts()], grad_scale=vm.grad_scale)
    i = 0
    for a in new.arrays():
        a[...] = flat[i:i + a.size].reshape(a.shape)
        i += a.size
    return new


def random_case(seed, mode):
    rng = seeded_rng(seed)
    in_dim = int(rng.integers(2, 6))
    depth = int(rng.integers(1, 3))
    widths = tuple(int(w) for w in rng.integers(2, 7, size=depth))
    beta = float(rng.uniform(0, 4))
    cfg = AHConfig(float(rng.uniform(0.2, 3)), float(rng.uniform(1, 2)), beta)
    vm = init_vm(rng, in_dim, widths, int(rng.integers(2, 5)), beta)
    # Nonzero biases keep pre-activations off the relu kink, where central
    # differences and the subgradient legitimately disagree.
    for part in vm.parts():
        for layer in part.layers:
            layer.bias[...] = rng.uniform(0.05, 0.3, size=layer.bias.shape) * rng.choice([-1, 1], size=layer.bias.shape)
    n = 3
    X = rng.standard_normal((n, in_dim))
    y = rng.integers(0, 2, size=n).astype(float)
    y_f = rng.uniform(0.05, 0.95, size=n)
    y_sa = rng.uniform(0.05, 0.95, size=n) if mode is DistillMode.AH_PLUS_SA else None
    return vm, X, y, y_f, y_sa, cfg


def gradient_error(seed: int, mode: DistillMode) -> float:
    """Relative gap between backprop and central differences on a random case.

    Backbone entries are compared against the derivative of
    ``serving + beta * distill`` and head entries against ``serving + distill``,
    which is what the gradient-scaling boundary prescribes.
    """
    vm, X, y, y_f, y_sa, cfg = random_case(seed, mode)
    fwd = forward(vm, X)
    dlogits, _ = head_dlogits(fwd, y, y_f, y_sa, mode, cfg)
    analytic = np.concatenate([a.ravel() for a in backward(vm, fwd, dlogits).arrays()])

    n_bb = sum(a.size for a in vm.backbone.arrays())
    theta = flat_params(vm)

    def total(weight):
        def f(flat):
            s, d = composite_objective(with_params(vm, flat), X, y, y_f, y_sa, mode, cfg)
            return s + weight * d
        return f

    fd_bb = finite_diff_grad(total(cfg.grad_scale), theta, h=1e-6)[:n_bb]
    fd_heads = finite_diff_grad(total(1.0), theta, h=1e-6)[n_bb:]
    numeric = np.concatenate([fd_bb, fd_heads])
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
