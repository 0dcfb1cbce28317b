"""Independent high-precision cascade evaluation used as a test oracle.

Written from the circuit description only: explicit 2x2 products and the
textbook ABCD-to-S conversion, in mpmath at 50 digits.
"""
import mpmath as mp

mp.mp.dps = 50
ETA0 = mp.mpf("376.730313668")
C0 = mp.mpf(299792458)


def mat_mul(a, b):
    return [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]


def response(f_ghz, theta_deg, spacing, cvt_ff, cvb_pf, rv, lv_ph, n, *, er=4.3, tand=0.025, h_mm=2.0,
             bottom_l_ph=800, bottom_r=0.5, k_s=0.08, k_a=0.05, fill=0.3, pol="TE"):
    f = mp.mpf(f_ghz) * mp.mpf(10) ** 9
    w = 2 * mp.pi * f
    c_eff = mp.mpf(cvt_ff) * (1 + mp.mpf(k_s) * (mp.mpf("0.5") - mp.mpf(spacing))) * (1 + mp.mpf(k_a) / n) * mp.mpf(10) ** -15
    z_top = mp.mpf(rv) + 1j * (w * mp.mpf(lv_ph) * mp.mpf(10) ** -12 - 1 / (w * c_eff))
    z_bot = mp.mpf(bottom_r) + 1j * (w * mp.mpf(bottom_l_ph) * mp.mpf(10) ** -12 - 1 / (w * mp.mpf(cvb_pf) * mp.mpf(10) ** -12))
    y1, y2 = mp.mpf(fill) / z_top, mp.mpf(fill) / z_bot
    th = mp.radians(mp.mpf(theta_deg))
    eps = mp.mpf(er) * (1 - 1j * mp.mpf(tand))
    cos_t = mp.sqrt(1 - mp.sin(th) ** 2 / eps)
    gamma = 1j * (w / C0) * mp.sqrt(eps) * cos_t
    eta_d = ETA0 / mp.sqrt(eps)
    zc = eta_d / cos_t if pol == "TE" else eta_d * cos_t
    gl = gamma * mp.mpf(h_mm) / 1000
    line = [[mp.cosh(gl), zc * mp.sinh(gl)], [mp.sinh(gl) / zc, mp.cosh(gl)]]
    m = mat_mul(mat_mul([[1, 0], [y1, 1]], line), [[1, 0], [y2, 1]])
    z0 = ETA0 / mp.cos(th) if pol == "TE" else ETA0 * mp.cos(th)
    a, b, c, d = m[0][0], m[0][1], m[1][0], m[1][1]
    delta = a + b / z0 + c * z0 + d
    s11 = (a + b / z0 - c * z0 - d) / delta
    s21 = 2 / delta
    t, r = abs(s21) ** 2, abs(s11) ** 2
    return t, r, 1 - t - r
