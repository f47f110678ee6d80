# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training-step kernel.

Same contract as the numpy fallback in ``_ref``: parameters come in as a
flat vector described by a ModelLayout and the gradient goes out the same
way. Everything runs over one flat workspace with offsets computed per
call, so the only per-call Python costs are a handful of buffer
acquisitions. Results agree with ``_ref`` up to floating-point summation
order.
"""

import numpy as np

from libc.math cimport exp as c_exp, tanh as c_tanh

NAME = "compiled"

cdef int ACT_RELU_C = 0
cdef int ACT_TANH_C = 1


cdef void _zero(double[::1] ws, Py_ssize_t off, Py_ssize_t count) noexcept:
    cdef Py_ssize_t i
    for i in range(count):
        ws[off + i] = 0.0


cdef void _copy2d(double[:, ::1] src, double[::1] ws, Py_ssize_t off) noexcept:
    cdef Py_ssize_t n = src.shape[0], m = src.shape[1]
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            ws[off + i * m + j] = src[i, j]


cdef void _transpose(double[::1] th, Py_ssize_t w_off, double[::1] ws,
                     Py_ssize_t t_off, Py_ssize_t fout, Py_ssize_t fin) noexcept:
    # ws[t_off:] holds W^T as (fin, fout) row-major.
    cdef Py_ssize_t j, k
    for j in range(fout):
        for k in range(fin):
            ws[t_off + k * fout + j] = th[w_off + j * fin + k]


cdef void _aff_fwd(double[::1] ws, Py_ssize_t in_off, Py_ssize_t wt_off,
                   double[::1] th, Py_ssize_t b_off, Py_ssize_t out_off,
                   Py_ssize_t n, Py_ssize_t fin, Py_ssize_t fout) noexcept:
    # out = in @ W^T + b with the transposed weight; contiguous axpy rows.
    cdef Py_ssize_t i, j, k, ob, ib
    cdef double v
    for i in range(n):
        ob = out_off + i * fout
        ib = in_off + i * fin
        for j in range(fout):
            ws[ob + j] = th[b_off + j]
        for k in range(fin):
            v = ws[ib + k]
            for j in range(fout):
                ws[ob + j] += v * ws[wt_off + k * fout + j]


cdef void _act_fwd(double[::1] ws, Py_ssize_t pre_off, Py_ssize_t post_off,
                   Py_ssize_t count, int act) noexcept:
    cdef Py_ssize_t i
    if act == ACT_RELU_C:
        for i in range(count):
            ws[post_off + i] = ws[pre_off + i] if ws[pre_off + i] > 0.0 else 0.0
    elif act == ACT_TANH_C:
        for i in range(count):
            ws[post_off + i] = c_tanh(ws[pre_off + i])
    else:
        for i in range(count):
            ws[post_off + i] = ws[pre_off + i]


cdef void _act_bwd(double[::1] ws, Py_ssize_t grad_off, Py_ssize_t pre_off,
                   Py_ssize_t post_off, Py_ssize_t count, int act) noexcept:
    cdef Py_ssize_t i
    if act == ACT_RELU_C:
        for i in range(count):
            if ws[pre_off + i] <= 0.0:
                ws[grad_off + i] = 0.0
    elif act == ACT_TANH_C:
        for i in range(count):
            ws[grad_off + i] *= 1.0 - ws[post_off + i] * ws[post_off + i]


cdef void _grad_params(double[::1] ws, Py_ssize_t g_off, Py_ssize_t in_off,
                       double[::1] gr, Py_ssize_t gw_off, Py_ssize_t gb_off,
                       Py_ssize_t n, Py_ssize_t fout, Py_ssize_t fin) noexcept:
    # gw += grad^T @ in ; gb += column sums of grad.
    cdef Py_ssize_t i, j, k, gb_row, ib
    cdef double g
    for i in range(n):
        ib = in_off + i * fin
        for j in range(fout):
            g = ws[g_off + i * fout + j]
            gr[gb_off + j] += g
            gb_row = gw_off + j * fin
            for k in range(fin):
                gr[gb_row + k] += g * ws[ib + k]


cdef void _grad_input(double[::1] ws, Py_ssize_t g_off, double[::1] th,
                      Py_ssize_t w_off, Py_ssize_t out_off,
                      Py_ssize_t n, Py_ssize_t fout, Py_ssize_t fin) noexcept:
    # out += grad @ W (natural (fout, fin) layout; contiguous axpy rows).
    cdef Py_ssize_t i, j, k, ob
    cdef double g
    for i in range(n):
        ob = out_off + i * fin
        for j in range(fout):
            g = ws[g_off + i * fout + j]
            for k in range(fin):
                ws[ob + k] += g * th[w_off + j * fin + k]


cdef double _latent_fwd(double[::1] ws, Py_ssize_t mu_off, Py_ssize_t ld_off,
                        Py_ssize_t lo_off, Py_ssize_t eps_off, Py_ssize_t ed_off,
                        Py_ssize_t z_off, Py_ssize_t n, Py_ssize_t d) noexcept:
    # Fills ed and z; returns the summed KL over the batch.
    cdef Py_ssize_t i, j, k, s, row, q
    cdef double e, sq, sld, zz, kl_sum
    q = d * (d - 1) // 2
    kl_sum = 0.0
    for i in range(n):
        row = i * d
        sq = 0.0
        sld = 0.0
        for j in range(d):
            e = c_exp(ws[ld_off + row + j])
            ws[ed_off + row + j] = e
            ws[z_off + row + j] = ws[mu_off + row + j] + e * ws[eps_off + row + j]
            sq += e * e + ws[mu_off + row + j] * ws[mu_off + row + j]
            sld += ws[ld_off + row + j]
        s = 0
        for j in range(1, d):
            zz = ws[z_off + row + j]
            for k in range(j):
                zz += ws[lo_off + i * q + s] * ws[eps_off + row + k]
                sq += ws[lo_off + i * q + s] * ws[lo_off + i * q + s]
                s += 1
            ws[z_off + row + j] = zz
        kl_sum += 0.5 * (sq - d) - sld
    return kl_sum


cdef void _latent_bwd(double[::1] ws, Py_ssize_t dz_off, Py_ssize_t mu_off,
                      Py_ssize_t lo_off, Py_ssize_t eps_off, Py_ssize_t ed_off,
                      double kb, Py_ssize_t dmu_off, Py_ssize_t dld_off,
                      Py_ssize_t dlo_off, Py_ssize_t n, Py_ssize_t d) noexcept:
    cdef Py_ssize_t i, j, k, s, row, q
    q = d * (d - 1) // 2
    for i in range(n):
        row = i * d
        for j in range(d):
            ws[dmu_off + row + j] = ws[dz_off + row + j] + kb * ws[mu_off + row + j]
            ws[dld_off + row + j] = (
                ws[dz_off + row + j] * ws[eps_off + row + j] * ws[ed_off + row + j]
                + kb * (ws[ed_off + row + j] * ws[ed_off + row + j] - 1.0)
            )
        s = 0
        for j in range(1, d):
            for k in range(j):
                ws[dlo_off + i * q + s] = (
                    ws[dz_off + row + j] * ws[eps_off + row + k]
                    + kb * ws[lo_off + i * q + s]
                )
                s += 1


cdef double _diff_sq(double[::1] ws, Py_ssize_t a_off, Py_ssize_t b_off,
                     Py_ssize_t diff_off, Py_ssize_t count) noexcept:
    cdef Py_ssize_t i
    cdef double acc = 0.0, dd
    for i in range(count):
        dd = ws[a_off + i] - ws[b_off + i]
        ws[diff_off + i] = dd
        acc += dd * dd
    return acc


cdef void _scale(double[::1] ws, Py_ssize_t off, Py_ssize_t count, double c) noexcept:
    cdef Py_ssize_t i
    for i in range(count):
        ws[off + i] *= c


def loss_and_grad(layout, theta, x, eps, double beta, double rho_eff, rx, rz):
    """Scalar loss plus the gradient as a flat vector matching `layout`."""
    cdef int act = layout.act
    enc_widths = layout.enc_widths
    dec_widths = layout.dec_widths
    cdef Py_ssize_t d = layout.latent
    cdef Py_ssize_t q = d * (d - 1) // 2
    cdef Py_ssize_t m = enc_widths[0]
    cdef Py_ssize_t trunk = enc_widths[len(enc_widths) - 1]
    n_enc = len(enc_widths) - 1
    n_dec = len(dec_widths) - 1

    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t R = 0
    if rho_eff != 0.0 and rx is not None and rx.shape[0] > 0:
        R = rx.shape[0]

    # Parameter offsets in canonical order.
    enc_woff, enc_boff, dec_woff, dec_boff = [], [], [], []
    off = 0
    for i in range(n_enc):
        enc_woff.append(off)
        off += enc_widths[i + 1] * enc_widths[i]
        enc_boff.append(off)
        off += enc_widths[i + 1]
    head_offs = []
    for width in (d, d, q):
        head_offs.append((off, off + width * trunk))
        off += width * trunk + width
    (mu_woff, mu_boff), (ld_woff, ld_boff), (lo_woff, lo_boff) = head_offs
    for i in range(n_dec):
        dec_woff.append(off)
        off += dec_widths[i + 1] * dec_widths[i]
        dec_boff.append(off)
        off += dec_widths[i + 1]
    total_params = off

    # Workspace offsets: transposed weights first, then batch buffers,
    # then anchor buffers.
    ws_off = 0
    enc_twoff, dec_twoff = [], []
    for i in range(n_enc):
        enc_twoff.append(ws_off)
        ws_off += enc_widths[i + 1] * enc_widths[i]
    mu_twoff = ws_off
    ws_off += d * trunk
    ld_twoff = ws_off
    ws_off += d * trunk
    lo_twoff = ws_off
    ws_off += q * trunk
    for i in range(n_dec):
        dec_twoff.append(ws_off)
        ws_off += dec_widths[i + 1] * dec_widths[i]

    max_w = max(max(enc_widths), max(dec_widths), d, q)

    def alloc(count):
        nonlocal ws_off
        out = ws_off
        ws_off += count
        return out

    x_off = alloc(B * m)
    eps_off = alloc(B * d)
    enc_pre, enc_post = [], []
    for i in range(n_enc):
        enc_pre.append(alloc(B * enc_widths[i + 1]))
        enc_post.append(alloc(B * enc_widths[i + 1]))
    mu_off = alloc(B * d)
    ld_off = alloc(B * d)
    lo_off = alloc(B * q)
    ed_off = alloc(B * d)
    z_off = alloc(B * d)
    dec_pre, dec_post = [], []
    for i in range(n_dec):
        dec_pre.append(alloc(B * dec_widths[i + 1]))
        dec_post.append(alloc(B * dec_widths[i + 1]))
    diff_off = alloc(B * m)
    dmu_off = alloc(B * d)
    dld_off = alloc(B * d)
    dlo_off = alloc(B * q)
    gbuf_a = alloc(B * max_w)
    gbuf_b = alloc(B * max_w)

    if R > 0:
        rx_off = alloc(R * m)
        rz_off = alloc(R * d)
        renc_pre, renc_post = [], []
        for i in range(n_enc):
            renc_pre.append(alloc(R * enc_widths[i + 1]))
            renc_post.append(alloc(R * enc_widths[i + 1]))
        rmu_off = alloc(R * d)
        rdec_pre, rdec_post = [], []
        for i in range(n_dec):
            rdec_pre.append(alloc(R * dec_widths[i + 1]))
            rdec_post.append(alloc(R * dec_widths[i + 1]))
        rdiff_off = alloc(R * m)
        rzdiff_off = alloc(R * d)
        rgbuf_a = alloc(R * max_w)
        rgbuf_b = alloc(R * max_w)

    ws_np = np.empty(ws_off)
    grad_np = np.zeros(total_params)
    cdef double[::1] ws = ws_np
    cdef double[::1] th = theta
    cdef double[::1] gr = grad_np
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ev = eps
    cdef double[:, ::1] rxv
    cdef double[:, ::1] rzv

    # Transposed weights.
    for i in range(n_enc):
        _transpose(th, enc_woff[i], ws, enc_twoff[i], enc_widths[i + 1], enc_widths[i])
    _transpose(th, mu_woff, ws, mu_twoff, d, trunk)
    _transpose(th, ld_woff, ws, ld_twoff, d, trunk)
    _transpose(th, lo_woff, ws, lo_twoff, q, trunk)
    for i in range(n_dec):
        _transpose(th, dec_woff[i], ws, dec_twoff[i], dec_widths[i + 1], dec_widths[i])

    _copy2d(xv, ws, x_off)
    _copy2d(ev, ws, eps_off)

    # Encoder forward.
    cur = x_off
    for i in range(n_enc):
        _aff_fwd(ws, cur, enc_twoff[i], th, enc_boff[i], enc_pre[i],
                 B, enc_widths[i], enc_widths[i + 1])
        _act_fwd(ws, enc_pre[i], enc_post[i], B * enc_widths[i + 1], act)
        cur = enc_post[i]
    ht_off = cur
    _aff_fwd(ws, ht_off, mu_twoff, th, mu_boff, mu_off, B, trunk, d)
    _aff_fwd(ws, ht_off, ld_twoff, th, ld_boff, ld_off, B, trunk, d)
    _aff_fwd(ws, ht_off, lo_twoff, th, lo_boff, lo_off, B, trunk, q)
    cdef double kl_sum = _latent_fwd(ws, mu_off, ld_off, lo_off, eps_off, ed_off,
                                     z_off, B, d)

    # Decoder forward (last layer identity).
    cur = z_off
    for i in range(n_dec):
        _aff_fwd(ws, cur, dec_twoff[i], th, dec_boff[i], dec_pre[i],
                 B, dec_widths[i], dec_widths[i + 1])
        if i == n_dec - 1:
            _act_fwd(ws, dec_pre[i], dec_post[i], B * dec_widths[i + 1], 2)
        else:
            _act_fwd(ws, dec_pre[i], dec_post[i], B * dec_widths[i + 1], act)
        cur = dec_post[i]

    cdef double recon_sum = _diff_sq(ws, dec_post[n_dec - 1], x_off, diff_off, B * m)
    cdef double loss = (recon_sum + beta * kl_sum) / B

    # Batch backward: reconstruction into the decoder, then the latent
    # block, then the heads and trunk.
    _scale(ws, diff_off, B * m, 2.0 / B)
    g_cur = diff_off
    for i in range(n_dec - 1, -1, -1):
        if i != n_dec - 1:
            _act_bwd(ws, g_cur, dec_pre[i], dec_post[i], B * dec_widths[i + 1], act)
        _grad_params(ws, g_cur, z_off if i == 0 else dec_post[i - 1], gr,
                     dec_woff[i], dec_boff[i], B, dec_widths[i + 1], dec_widths[i])
        g_next = gbuf_a if g_cur != gbuf_a else gbuf_b
        _zero(ws, g_next, B * dec_widths[i])
        _grad_input(ws, g_cur, th, dec_woff[i], g_next, B, dec_widths[i + 1], dec_widths[i])
        g_cur = g_next
    dz_off = g_cur

    _latent_bwd(ws, dz_off, mu_off, lo_off, eps_off, ed_off, beta / B,
                dmu_off, dld_off, dlo_off, B, d)
    _grad_params(ws, dmu_off, ht_off, gr, mu_woff, mu_boff, B, d, trunk)
    _grad_params(ws, dld_off, ht_off, gr, ld_woff, ld_boff, B, d, trunk)
    _grad_params(ws, dlo_off, ht_off, gr, lo_woff, lo_boff, B, q, trunk)
    g_cur = gbuf_a if dz_off != gbuf_a else gbuf_b
    _zero(ws, g_cur, B * trunk)
    _grad_input(ws, dmu_off, th, mu_woff, g_cur, B, d, trunk)
    _grad_input(ws, dld_off, th, ld_woff, g_cur, B, d, trunk)
    _grad_input(ws, dlo_off, th, lo_woff, g_cur, B, q, trunk)
    for i in range(n_enc - 1, -1, -1):
        _act_bwd(ws, g_cur, enc_pre[i], enc_post[i], B * enc_widths[i + 1], act)
        _grad_params(ws, g_cur, x_off if i == 0 else enc_post[i - 1], gr,
                     enc_woff[i], enc_boff[i], B, enc_widths[i + 1], enc_widths[i])
        if i > 0:
            g_next = gbuf_a if g_cur != gbuf_a else gbuf_b
            _zero(ws, g_next, B * enc_widths[i])
            _grad_input(ws, g_cur, th, enc_woff[i], g_next, B, enc_widths[i + 1], enc_widths[i])
            g_cur = g_next

    cdef double pen
    if R > 0:
        rxv = rx
        rzv = rz
        _copy2d(rxv, ws, rx_off)
        _copy2d(rzv, ws, rz_off)
        # Decoder on anchor latents.
        cur = rz_off
        for i in range(n_dec):
            _aff_fwd(ws, cur, dec_twoff[i], th, dec_boff[i], rdec_pre[i],
                     R, dec_widths[i], dec_widths[i + 1])
            if i == n_dec - 1:
                _act_fwd(ws, rdec_pre[i], rdec_post[i], R * dec_widths[i + 1], 2)
            else:
                _act_fwd(ws, rdec_pre[i], rdec_post[i], R * dec_widths[i + 1], act)
            cur = rdec_post[i]
        pen = _diff_sq(ws, rdec_post[n_dec - 1], rx_off, rdiff_off, R * m)
        # Posterior mean of anchor inputs.
        cur = rx_off
        for i in range(n_enc):
            _aff_fwd(ws, cur, enc_twoff[i], th, enc_boff[i], renc_pre[i],
                     R, enc_widths[i], enc_widths[i + 1])
            _act_fwd(ws, renc_pre[i], renc_post[i], R * enc_widths[i + 1], act)
            cur = renc_post[i]
        rht_off = cur
        _aff_fwd(ws, rht_off, mu_twoff, th, mu_boff, rmu_off, R, trunk, d)
        pen += _diff_sq(ws, rmu_off, rz_off, rzdiff_off, R * d)
        loss += rho_eff * pen

        _scale(ws, rdiff_off, R * m, 2.0 * rho_eff)
        g_cur = rdiff_off
        for i in range(n_dec - 1, -1, -1):
            if i != n_dec - 1:
                _act_bwd(ws, g_cur, rdec_pre[i], rdec_post[i], R * dec_widths[i + 1], act)
            _grad_params(ws, g_cur, rz_off if i == 0 else rdec_post[i - 1], gr,
                         dec_woff[i], dec_boff[i], R, dec_widths[i + 1], dec_widths[i])
            if i > 0:
                g_next = rgbuf_a if g_cur != rgbuf_a else rgbuf_b
                _zero(ws, g_next, R * dec_widths[i])
                _grad_input(ws, g_cur, th, dec_woff[i], g_next, R, dec_widths[i + 1], dec_widths[i])
                g_cur = g_next

        _scale(ws, rzdiff_off, R * d, 2.0 * rho_eff)
        _grad_params(ws, rzdiff_off, rht_off, gr, mu_woff, mu_boff, R, d, trunk)
        g_cur = rgbuf_a
        _zero(ws, g_cur, R * trunk)
        _grad_input(ws, rzdiff_off, th, mu_woff, g_cur, R, d, trunk)
        for i in range(n_enc - 1, -1, -1):
            _act_bwd(ws, g_cur, renc_pre[i], renc_post[i], R * enc_widths[i + 1], act)
            _grad_params(ws, g_cur, rx_off if i == 0 else renc_post[i - 1], gr,
                         enc_woff[i], enc_boff[i], R, enc_widths[i + 1], enc_widths[i])
            if i > 0:
                g_next = rgbuf_a if g_cur != rgbuf_a else rgbuf_b
                _zero(ws, g_next, R * enc_widths[i])
                _grad_input(ws, g_cur, th, enc_woff[i], g_next, R, enc_widths[i + 1], enc_widths[i])
                g_cur = g_next

    return loss, grad_np
