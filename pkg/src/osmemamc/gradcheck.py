"""Central-difference gradient oracle for the tensor core."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonDeterministicLoss, NotScalar
from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def _evaluate(loss_fn, arrays) -> float:
    out = loss_fn(*[Tensor(a) for a in arrays])
    if out.size != 1:
        raise NotScalar(f"loss_fn returned shape {out.shape}")
    return out.item()


def analytic_gradients(loss_fn: Callable[..., Tensor], point: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in point]
    loss = loss_fn(*leaves)
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def numeric_gradients(loss_fn: Callable[..., Tensor], point: Sequence[np.ndarray],
                      step: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in point]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = _evaluate(loss_fn, arrays)
            flat[k] = orig - step
            f_minus = _evaluate(loss_fn, arrays)
            flat[k] = orig
            gflat[k] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def grad_check(
    loss_fn: Callable[..., Tensor],
    point: Sequence[np.ndarray | Tensor],
    step: float = 1e-5,
    analytic_hook: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``loss_fn`` receives one Tensor per entry of ``point`` and must return a
    scalar Tensor. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. ``analytic_hook`` lets a caller tamper
    with the analytic gradients (used as a negative control).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in point]
    first, second = _evaluate(loss_fn, arrays), _evaluate(loss_fn, arrays)
    if first != second:
        raise NonDeterministicLoss(f"loss_fn gave {first!r} then {second!r} at the same point")

    analytic = analytic_gradients(loss_fn, arrays)
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)
    numeric = numeric_gradients(loss_fn, arrays, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst


# Named suites used by the command line and the acceptance tests.

THRESHOLDS = {"ops": 1e-6, "osme": 1e-4, "full": 1e-4}


def micro_osme_config():
    """W=H=4, C=8, r=2, D=4, P=2, K=2 on one conv stage."""
    from .osme import OsmeConfig, Stage
    return OsmeConfig(P=2, C=8, r=2, D=4, K=2, input_hw=(4, 4), backbone=(Stage(8),))


def _ops_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    from . import tensor as T

    readouts: dict = {}

    def proj(x: Tensor, shape) -> Tensor:
        # random linear readout so every output coordinate matters
        if shape not in readouts:
            readouts[shape] = rng.normal(size=shape)
        return T.reduce_sum(T.elementwise_multiply(x, Tensor(readouts[shape])))

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    m1, m2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    img, ker, bias = rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    gaps = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    logits, labels = rng.normal(size=(3, 4)), np.array([0, 3, 1])
    return [
        ("add", lambda x, y: proj(T.add(x, y), (3, 4)), [a, b]),
        ("subtract", lambda x, y: proj(T.subtract(x, y), (3, 4)), [a, b]),
        ("elementwise_multiply", lambda x, y: proj(T.elementwise_multiply(x, y), (3, 4)), [a, b]),
        ("scalar_multiply", lambda x: proj(T.scalar_multiply(x, -1.7), (3, 4)), [a]),
        ("relu", lambda x: proj(T.relu(x), (3, 4)), [a]),
        ("sigmoid", lambda x: proj(T.sigmoid(x), (3, 4)), [a]),
        ("exp", lambda x: proj(T.exp(x), (3, 4)), [a]),
        ("log", lambda x: proj(T.log(x), (3, 4)), [pos]),
        ("matmul", lambda x, y: proj(T.matmul(x, y), (3, 2)), [m1, m2]),
        ("inner_product", lambda x, y: T.inner_product(x, y), [a, b]),
        ("conv2d", lambda x, w, c: proj(T.conv2d(x, w, c), (2, 4, 4, 3)), [img, ker, bias]),
        ("max_pool", lambda x: proj(T.max_pool(x, 2), (2, 2, 2, 2)), [img]),
        ("global_average_pool", lambda x: proj(T.global_average_pool(x), (2, 2)), [img]),
        ("flatten", lambda x: proj(T.flatten(x), (2, 32)), [img]),
        ("concat", lambda x, y: proj(T.concat([x, y], axis=1), (3, 8)), [a, b]),
        ("l2_normalize", lambda x: proj(T.l2_normalize(x, axis=1), (3, 4)), [a]),
        ("log1p_sum_exp", lambda x: proj(T.log1p_sum_exp(x, mask, axis=1), (4,)), [gaps]),
        ("softmax_cross_entropy", lambda x: T.softmax_cross_entropy(x, labels), [logits]),
    ]


def _osme_cases(rng: np.random.Generator):
    from . import tensor as T
    from .osme import attend, backbone_forward, excite, init_params, osme_forward, reweight, squeeze

    cfg = micro_osme_config()
    params = init_params(cfg, rng)
    images = Tensor(rng.uniform(0, 1, size=(4, 4, 4, 1)))
    names = sorted(params)
    h, w = cfg.feature_hw
    U = rng.uniform(0, 1, size=(2, h, w, cfg.C))
    ru = rng.normal(size=(2, cfg.C))
    rf = rng.normal(size=(4, cfg.P, cfg.D))
    rl = rng.normal(size=(4, cfg.K))
    rc = rng.normal(size=(4, cfg.C))
    cases = []
    for p in range(cfg.P):
        def excite_loss(u, w1, w2, p=p):
            local = dict(params, **{f"branch.{p}.W1": w1, f"branch.{p}.W2": w2})
            return T.reduce_sum(T.elementwise_multiply(excite(squeeze(u), local, p, cfg), Tensor(ru)))
        cases.append((f"excite[{p}]", excite_loss,
                      [U, params[f"branch.{p}.W1"].data, params[f"branch.{p}.W2"].data]))

        def attend_loss(u, w3, p=p):
            local = dict(params, **{f"branch.{p}.W3": w3})
            m = excite(squeeze(u), local, p, cfg)
            return T.reduce_sum(T.elementwise_multiply(attend(reweight(u, m), local, p, cfg),
                                                       Tensor(rf[:2, p])))
        cases.append((f"reweight+attend[{p}]", attend_loss, [U, params[f"branch.{p}.W3"].data]))

    def backbone_loss(*ts):
        local = dict(params, **dict(zip(names, ts)))
        return T.reduce_sum(T.elementwise_multiply(squeeze(backbone_forward(local, images, cfg)),
                                                   Tensor(rc)))
    cases.append(("backbone", backbone_loss, [params[n].data for n in names]))

    def forward_loss(*ts):
        out = osme_forward(dict(params, **dict(zip(names, ts))), images, cfg)
        return T.add(T.reduce_sum(T.elementwise_multiply(out.features, Tensor(rf))),
                     T.reduce_sum(T.elementwise_multiply(out.logits, Tensor(rl))))
    cases.append(("osme_forward", forward_loss, [params[n].data for n in names]))
    return cases


def _full_cases(rng: np.random.Generator):
    from .mamc import BatchFeatures, mamc_loss
    from .osme import init_params, osme_forward

    cfg = micro_osme_config()
    params = init_params(cfg, rng)
    names = sorted(params)
    N = 2
    images = Tensor(rng.uniform(0, 1, size=(2 * N, 4, 4, 1)))
    labels = np.array([0, 0, 1, 1])
    cases = []
    for normalize in (False, True):
        def loss_fn(*ts, normalize=normalize):
            out = osme_forward(dict(params, **dict(zip(names, ts))), images, cfg)
            batch = BatchFeatures.from_forward(out.features, labels)
            return mamc_loss(batch, out.logits, labels, 0.5, normalize)[0]
        cases.append((f"mamc_loss(normalize={normalize})", loss_fn, [params[n].data for n in names]))
    return cases


def run_suite(scale: str, seed: int = 0, corrupt: bool = False) -> list[tuple[str, float]]:
    """Max relative error per component at ``scale`` in ``ops``, ``osme`` or ``full``.

    ``corrupt`` scales every analytic gradient by 1.01, a negative control
    that must push every row over its threshold.
    """
    builders = {"ops": _ops_cases, "osme": _osme_cases, "full": _full_cases}
    if scale not in builders:
        raise ValueError(f"unknown scale {scale!r}")
    hook = (lambda grads: [g * 1.01 for g in grads]) if corrupt else None
    rng = np.random.default_rng([seed, 17])
    return [(name, grad_check(fn, point, analytic_hook=hook)) for name, fn, point in builders[scale](rng)]
