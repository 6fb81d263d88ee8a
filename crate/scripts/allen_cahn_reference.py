"""Reference solution of u_t = eps u_xx + r (u - u^3) on x in [-1, 1), periodic.

Fourier pseudo-spectral discretisation in space with ETDRK4 time stepping
(contour-integral evaluation of the phi functions). Writes a CSV with
columns t,x,u on a 100 x 256 grid, t in [0, 1].

Usage: python scripts/allen_cahn_reference.py crates/cli/fixtures/allen_cahn.csv
"""

import sys

import numpy as np

EPS = 1e-5
RATE = 5.0
N_MODES = 512
N_X = 256
N_T = 100
DT = 1e-5


def main(path):
    x = -1.0 + 2.0 * np.arange(N_MODES) / N_MODES
    u = x**2 * np.cos(np.pi * x)
    k = np.fft.fftfreq(N_MODES, d=2.0 / N_MODES) * 2.0 * np.pi
    lin = -EPS * k**2 + RATE
    e = np.exp(DT * lin)
    e2 = np.exp(DT * lin / 2.0)
    m = 32
    roots = np.exp(1j * np.pi * (np.arange(1, m + 1) - 0.5) / m)
    lr = DT * lin[:, None] + roots[None, :]
    q = DT * np.real(np.mean((np.exp(lr / 2.0) - 1.0) / lr, axis=1))
    f1 = DT * np.real(np.mean((-4.0 - lr + np.exp(lr) * (4.0 - 3.0 * lr + lr**2)) / lr**3, axis=1))
    f2 = DT * np.real(np.mean((2.0 + lr + np.exp(lr) * (-2.0 + lr)) / lr**3, axis=1))
    f3 = DT * np.real(np.mean((-4.0 - 3.0 * lr - lr**2 + np.exp(lr) * (4.0 - lr)) / lr**3, axis=1))

    def nonlin(vhat):
        w = np.real(np.fft.ifft(vhat))
        return -RATE * np.fft.fft(w**3)

    times = np.linspace(0.0, 1.0, N_T)
    steps = np.rint(times / DT).astype(int)
    vhat = np.fft.fft(u)
    out = [np.real(np.fft.ifft(vhat))]
    n = 0
    for target in steps[1:]:
        while n < target:
            nv = nonlin(vhat)
            a = e2 * vhat + q * nv
            na = nonlin(a)
            b = e2 * vhat + q * na
            nb = nonlin(b)
            c = e2 * a + q * (2.0 * nb - nv)
            nc = nonlin(c)
            vhat = e * vhat + nv * f1 + 2.0 * (na + nb) * f2 + nc * f3
            n += 1
        out.append(np.real(np.fft.ifft(vhat)))
    stride = N_MODES // N_X
    with open(path, "w") as fh:
        fh.write("t,x,u\n")
        for t, sol in zip(times, out):
            for xi, ui in zip(x[::stride], sol[::stride]):
                fh.write(f"{t:.17g},{xi:.17g},{ui:.17g}\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "allen_cahn.csv")
