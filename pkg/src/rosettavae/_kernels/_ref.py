"""Pure numpy implementation of the fused training-step kernel.

Computes the anchored objective and its gradient for one batch in a
single call, reading parameters from a flat vector described by a
ModelLayout. This is the import-time fallback when the compiled core is
unavailable and the reference the compiled core is tested against.

Objective (per batch of B rows, latent dim d):

    mean_b [ ||x_b - decode(z_b)||^2 + beta * KL_b ]
        + rho_eff * sum_r [ ||rx_r - decode(rz_r)||^2
                            + ||rz_r - posterior_mean(rx_r)||^2 ]

with z_b = mu_b + L_b @ eps_b, L_b the lower factor with diagonal
exp(logdiag_b), and KL_b the Gaussian KL to a standard normal.
"""

from __future__ import annotations

import numpy as np

from .common import ACT_RELU, ACT_TANH, ModelLayout

NAME = "python"


def _act_fwd(a, act):
    if act == ACT_RELU:
        return np.maximum(a, 0.0)
    if act == ACT_TANH:
        return np.tanh(a)
    return a


def _act_bwd(g, pre, post, act):
    if act == ACT_RELU:
        return g * (pre > 0.0)
    if act == ACT_TANH:
        return g * (1.0 - post * post)
    return g


def loss_and_grad(
    layout: ModelLayout,
    theta: np.ndarray,
    x: np.ndarray,
    eps: np.ndarray,
    beta: float,
    rho_eff: float,
    rx,
    rz,
):
    """Scalar loss plus the gradient as a flat vector matching `layout`."""
    act = layout.act
    n_enc = len(layout.enc_widths) - 1
    n_dec = len(layout.dec_widths) - 1
    last_dec = n_dec - 1
    d = layout.latent
    params = layout.unpack(theta)
    enc_w = [params[f"enc.W{i}"] for i in range(n_enc)]
    enc_b = [params[f"enc.b{i}"] for i in range(n_enc)]
    dec_w = [params[f"dec.W{i}"] for i in range(n_dec)]
    dec_b = [params[f"dec.b{i}"] for i in range(n_dec)]
    w_mu, b_mu = params["mu.W0"], params["mu.b0"]
    w_ld, b_ld = params["logdiag.W0"], params["logdiag.b0"]
    w_lo, b_lo = params["lower.W0"], params["lower.b0"]

    batch = x.shape[0]
    rows, cols = np.tril_indices(d, k=-1)
    nq = rows.shape[0]

    def enc_forward(inp):
        hs, pres = [inp], []
        h = inp
        for w, b in zip(enc_w, enc_b):
            a = h @ w.T + b
            pres.append(a)
            h = _act_fwd(a, act)
            hs.append(h)
        return hs, pres

    def dec_forward(z):
        gs, pres = [z], []
        g = z
        for i, (w, b) in enumerate(zip(dec_w, dec_b)):
            a = g @ w.T + b
            pres.append(a)
            g = a if i == last_dec else _act_fwd(a, act)
            gs.append(g)
        return gs, pres

    hs, hpres = enc_forward(x)
    ht = hs[-1]
    mu = ht @ w_mu.T + b_mu
    ld = ht @ w_ld.T + b_ld
    lo = ht @ w_lo.T + b_lo
    ed = np.exp(ld)
    z = mu + ed * eps
    for s in range(nq):
        z[:, rows[s]] = z[:, rows[s]] + lo[:, s] * eps[:, cols[s]]
    gs, gpres = dec_forward(z)
    xhat = gs[-1]
    diff = xhat - x
    recon = (diff * diff).sum(axis=1)
    kl = 0.5 * ((ed * ed).sum(axis=1) + (lo * lo).sum(axis=1) + (mu * mu).sum(axis=1) - d) - ld.sum(axis=1)
    loss = float((recon + beta * kl).mean())

    grad_flat = np.zeros(layout.total)
    g_view = layout.unpack(grad_flat)
    g_enc_w = [g_view[f"enc.W{i}"] for i in range(n_enc)]
    g_enc_b = [g_view[f"enc.b{i}"] for i in range(n_enc)]
    g_dec_w = [g_view[f"dec.W{i}"] for i in range(n_dec)]
    g_dec_b = [g_view[f"dec.b{i}"] for i in range(n_dec)]
    g_w_mu, g_b_mu = g_view["mu.W0"], g_view["mu.b0"]
    g_w_ld, g_b_ld = g_view["logdiag.W0"], g_view["logdiag.b0"]
    g_w_lo, g_b_lo = g_view["lower.W0"], g_view["lower.b0"]

    def dec_backward(dout, gs_, pres_):
        grad = dout
        for i in range(last_dec, -1, -1):
            if i != last_dec:
                grad = _act_bwd(grad, pres_[i], gs_[i + 1], act)
            g_dec_w[i] += grad.T @ gs_[i]
            g_dec_b[i] += grad.sum(axis=0)
            grad = grad @ dec_w[i]
        return grad

    def enc_backward(dht, hs_, pres_):
        grad = dht
        for i in range(n_enc - 1, -1, -1):
            grad = _act_bwd(grad, pres_[i], hs_[i + 1], act)
            g_enc_w[i] += grad.T @ hs_[i]
            g_enc_b[i] += grad.sum(axis=0)
            grad = grad @ enc_w[i]

    dz = dec_backward((2.0 / batch) * diff, gs, gpres)
    kb = beta / batch
    dmu = dz + kb * mu
    dld = dz * eps * ed + kb * (ed * ed - 1.0)
    dlo = np.empty_like(lo)
    for s in range(nq):
        dlo[:, s] = dz[:, rows[s]] * eps[:, cols[s]] + kb * lo[:, s]
    g_w_mu += dmu.T @ ht
    g_b_mu += dmu.sum(axis=0)
    g_w_ld += dld.T @ ht
    g_b_ld += dld.sum(axis=0)
    g_w_lo += dlo.T @ ht
    g_b_lo += dlo.sum(axis=0)
    enc_backward(dmu @ w_mu + dld @ w_ld + dlo @ w_lo, hs, hpres)

    if rho_eff != 0.0 and rx is not None and rx.shape[0] > 0:
        rgs, rgpres = dec_forward(rz)
        rdiff = rgs[-1] - rx
        rhs, rpres = enc_forward(rx)
        rht = rhs[-1]
        mur = rht @ w_mu.T + b_mu
        zdiff = mur - rz
        loss += rho_eff * float((rdiff * rdiff).sum() + (zdiff * zdiff).sum())
        dec_backward((2.0 * rho_eff) * rdiff, rgs, rgpres)
        dmur = (2.0 * rho_eff) * zdiff
        g_w_mu += dmur.T @ rht
        g_b_mu += dmur.sum(axis=0)
        enc_backward(dmur @ w_mu, rhs, rpres)

    return loss, grad_flat
