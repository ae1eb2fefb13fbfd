"""Central finite-difference checks for the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

H = 1e-4
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-7)


def check_function(loss_fn, tensors: dict[str, ad.Tensor], rng: np.random.Generator,
                   max_entries: int = 40) -> tuple[float, int]:
    """Compare ``backward`` against central differences on sampled entries."""
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}
    worst, count = 0.0, 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        assert np.shares_memory(flat, t.data)
        n = flat.size
        picks = rng.choice(n, size=min(n, max_entries), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + H
            up = loss_fn().item()
            flat[j] = orig - H
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * H)
            worst = max(worst, rel_error(analytic[name].reshape(-1)[j], numeric))
            count += 1
    return worst, count


def _stack_loss(layers, params, x, weights, extras=None, mask=None):
    def fn():
        out = ad.forward(layers, params, x)
        if mask is not None:
            out = ad.masked_softmax(out, mask)
        return (out * weights).sum()
    return fn


def layer_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    cases = {
        "Conv2d": ([ad.Conv2d(2, 3, 3, 1, 0)], (2, 2, 5, 5)),
        "Conv2d(stride2,pad1)": ([ad.Conv2d(2, 3, 3, 2, 1)], (2, 2, 5, 5)),
        "Dense": ([ad.Dense(6, 4)], (3, 6)),
        "Tanh": ([ad.Dense(5, 5), ad.Tanh()], (3, 5)),
        "Flatten": ([ad.Conv2d(1, 2, 3), ad.Flatten(), ad.Dense(8, 3)], (2, 1, 4, 4)),
        "Softmax": ([ad.Dense(4, 4), ad.Softmax()], (3, 4)),
    }
    for name, (layers, in_shape) in cases.items():
        params = ad.init_params(layers, rng, gain=1.0)
        x = ad.Tensor(rng.standard_normal(in_shape), requires_grad=True)
        out_shape = (in_shape[0],) + ad.output_shape(layers, in_shape[1:])
        weights = rng.standard_normal(out_shape)
        tensors = dict(params, x=x)
        err, n = check_function(_stack_loss(layers, params, x, weights), tensors, rng)
        results.append(CheckResult(name, err, n))

    logits = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [0, 0, 1, 0], [1, 0, 1, 1]], dtype=float)
    weights = rng.standard_normal((4, 4))
    err, n = check_function(lambda: (ad.masked_softmax(logits, mask) * weights).sum(),
                            {"logits": logits}, rng)
    results.append(CheckResult("MaskedSoftmax", err, n))
    err, n = check_function(lambda: (ad.masked_log_softmax(logits, mask) * weights).sum(),
                            {"logits": logits}, rng)
    results.append(CheckResult("MaskedLogSoftmax", err, n))
    return results


def network_checks(seed: int, map_size: int = 6, max_agents: int = 5) -> list[CheckResult]:
    """Full actor and critic stacks at reduced spatial size."""
    from .policy import PolicySet

    rng = np.random.default_rng(seed)
    policy = PolicySet.create((map_size, map_size), max_agents=max_agents, seed=seed,
                              actor_head_gain=1.0)
    B = 3
    grids = rng.standard_normal((B, 2, map_size, map_size))
    actor_extra = rng.uniform(0, 1, (B, 7))
    masks = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [0, 1, 1, 1]], dtype=float)
    critic_extra = rng.uniform(0, 1, (B, 3 * max_agents))
    w_actor = rng.standard_normal((B, 4))
    w_critic = rng.standard_normal((B,))

    actor_params = policy.actors[0]
    res = []
    err, n = check_function(
        lambda: (policy.actor_probs(grids, actor_extra, masks) * w_actor).sum(), actor_params, rng)
    res.append(CheckResult("actor stack", err, n))
    err, n = check_function(
        lambda: (policy.critic_values(grids, critic_extra) * w_critic).sum(), policy.critic, rng)
    res.append(CheckResult("critic stack", err, n))
    return res


def run_suite(seeds=range(20), map_size: int = 6) -> list[CheckResult]:
    """Worst error per check name across all seeds."""
    worst: dict[str, CheckResult] = {}
    for seed in seeds:
        for r in layer_checks(seed) + network_checks(seed, map_size):
            prev = worst.get(r.name)
            if prev is None:
                worst[r.name] = r
            else:
                worst[r.name] = CheckResult(r.name, max(prev.max_rel_error, r.max_rel_error),
                                            prev.n_checked + r.n_checked)
    return list(worst.values())


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<22} {'max rel err':>12} {'entries':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.max_rel_error:12.3e} {r.n_checked:8d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
