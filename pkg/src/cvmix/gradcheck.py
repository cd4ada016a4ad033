"""End-to-end gradient validation: every aggregation-head tensor, both
descriptor gradients, and the temperature, all checked against central
finite differences of the full head+loss composite on a small random batch.
"""

from __future__ import annotations

import numpy as np

from .loss import LossConfig, _infonce_raw
from .mixer import MixerConfig, MixerParams, init_params, mixer_backward_batch, mixer_forward_batch
from .numerics import finite_diff_check

PASS_THRESHOLD = 1e-4


def gradient_check_report(
    mixer_cfg: MixerConfig,
    batch_size: int = 4,
    seed: int = 0,
    loss_cfg: LossConfig | None = None,
    corrupt: str | None = None,
) -> list[tuple[str, float]]:
    """(tensor name, max relative error) per checked gradient.

    `corrupt` names a tensor whose analytic gradient is deliberately
    perturbed; the negative control for the failure exit path.
    """
    if loss_cfg is None:
        loss_cfg = LossConfig(temperature_mode="learnable", label_smoothing=0.1)
    if mixer_cfg.num_maps * mixer_cfg.n * mixer_cfg.descriptor_len > 10**4 * 100:
        raise ValueError("gradient check is meant for small configs")
    rng = np.random.default_rng(seed)
    params = init_params(mixer_cfg, seed)
    params.b1[...] = 0.01 * rng.normal(size=params.b1.shape)
    params.b2[...] = 0.01 * rng.normal(size=params.b2.shape)
    tokens_g = rng.normal(size=(batch_size, mixer_cfg.n, mixer_cfg.num_maps))
    tokens_s = rng.normal(size=(batch_size, mixer_cfg.n, mixer_cfg.num_maps))
    tau = loss_cfg.initial_tau()
    eps = loss_cfg.label_smoothing

    def objective_with(params_probe: MixerParams) -> float:
        dg = mixer_forward_batch(tokens_g, params_probe, mixer_cfg)
        ds = mixer_forward_batch(tokens_s, params_probe, mixer_cfg)
        return _infonce_raw(dg, ds, tau, eps).loss

    # analytic gradients through the shared-weight composite
    desc_g, cache_g = mixer_forward_batch(tokens_g, params, mixer_cfg, True)
    desc_s, cache_s = mixer_forward_batch(tokens_s, params, mixer_cfg, True)
    res = _infonce_raw(desc_g, desc_s, tau, eps)
    grads_g = mixer_backward_batch(tokens_g, params, mixer_cfg, res.grad_q, cache_g)
    grads_s = mixer_backward_batch(tokens_s, params, mixer_cfg, res.grad_r, cache_s)
    grad_arrays = [
        a + b for a, b in zip(grads_g.params.as_list(), grads_s.params.as_list())
    ]

    names = ["W1", "b1", "W2", "b2", "W_d", "W_r"]
    arrays = params.as_list()
    report: list[tuple[str, float]] = []
    for idx, name in enumerate(names):
        analytic = grad_arrays[idx].copy()
        if corrupt == name:
            analytic += 0.1 * (1.0 + np.abs(analytic))

        def f(tensor, idx=idx):
            probe = [a if i != idx else tensor for i, a in enumerate(arrays)]
            return objective_with(MixerParams.from_list(probe))

        report.append((name, finite_diff_check(f, arrays[idx], analytic)))

    # descriptor gradients (loss w.r.t. both views' descriptors)
    report.append(("loss.grad_Q", finite_diff_check(
        lambda q: _infonce_raw(q, desc_s, tau, eps).loss, desc_g, res.grad_q)))
    report.append(("loss.grad_R", finite_diff_check(
        lambda r: _infonce_raw(desc_g, r, tau, eps).loss, desc_s, res.grad_r)))

    if loss_cfg.temperature_mode == "learnable":
        report.append(("loss.grad_tau", finite_diff_check(
            lambda t: _infonce_raw(desc_g, desc_s, float(t[0]), eps).loss,
            np.array([tau]), np.array([res.grad_tau]))))
        lam = float(np.log(1.0 / tau))
        report.append(("loss.log_inv_tau", finite_diff_check(
            lambda p: _infonce_raw(desc_g, desc_s, float(np.exp(-p[0])), eps).loss,
            np.array([lam]), np.array([res.grad_tau * (-tau)]))))

    # input-token gradients for both views
    def f_tokens_g(t):
        dg = mixer_forward_batch(t, params, mixer_cfg)
        return _infonce_raw(dg, desc_s, tau, eps).loss

    def f_tokens_s(t):
        ds = mixer_forward_batch(t, params, mixer_cfg)
        return _infonce_raw(desc_g, ds, tau, eps).loss

    report.append(("tokens.ground", finite_diff_check(
        f_tokens_g, tokens_g, grads_g.tokens)))
    report.append(("tokens.satellite", finite_diff_check(
        f_tokens_s, tokens_s, grads_s.tokens)))
    return report


def report_passes(report: list[tuple[str, float]]) -> bool:
    return all(err < PASS_THRESHOLD for _, err in report)
