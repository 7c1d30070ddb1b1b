"""Pure numpy implementations of the hot kernels.

Must stay numerically interchangeable with ``_ckernels.pyx`` (same inputs,
same outputs up to floating-point summation order).
"""
import numpy as np


def conv_out_len(n_in, kernel, stride, pad_left, pad_right):
    return (n_in + pad_left + pad_right - kernel) // stride + 1


class PhaseLayout:
    """Batch-interleaved phase planes of a padded, strided 1-D convolution.

    ``planes[r, f, b * P + j] = xpad[b, f, r + stride * j]`` with ``P`` phase
    columns per batch item. Kernel tap ``k`` then reads the contiguous column
    range starting at ``k // stride`` of plane ``k % stride``, so each tap of
    the whole batch is a single matrix product. Columns ``j >= n_out`` hold
    junk in the output and are dropped.
    """

    def __init__(self, nb, nt, kernel, stride, pad_left, pad_right):
        self.nb, self.nt, self.kernel, self.stride = nb, nt, kernel, stride
        self.pad_left = pad_left
        self.n_out = conv_out_len(nt, kernel, stride, pad_left, pad_right)
        if self.n_out <= 0:
            raise ValueError("kernel longer than padded input")
        self.n_phase = -(-(nt + pad_left + pad_right) // stride)
        self.n_cols = nb * self.n_phase
        self.width = self.n_cols + (kernel - 1) // stride

    def _phases(self):
        # input samples t0, t0 + stride, ... land in plane r from column j0
        for r in range(self.stride):
            t0 = (r - self.pad_left) % self.stride
            if t0 < self.nt:
                yield r, t0, (t0 + self.pad_left) // self.stride, len(range(t0, self.nt, self.stride))

    def planes(self, x):
        nb, nf = x.shape[:2]
        out = np.zeros((self.stride, nf, self.width))
        grid = out[:, :, :self.n_cols].reshape(self.stride, nf, nb, self.n_phase)
        for r, t0, j0, n in self._phases():
            grid[r, :, :, j0:j0 + n] = x[:, :, t0::self.stride].transpose(1, 0, 2)
        return out

    def unplanes(self, planes):
        """Adjoint of ``planes``: gather plane columns back to ``(B, F, Nt)``."""
        nf = planes.shape[1]
        grid = planes[:, :, :self.n_cols].reshape(self.stride, nf, self.nb, self.n_phase)
        x = np.empty((self.nb, nf, self.nt))
        for r, t0, j0, n in self._phases():
            x[:, :, t0::self.stride] = grid[r, :, :, j0:j0 + n].transpose(1, 0, 2)
        return x

    def outputs(self, full):
        """``(Fout, B * P)`` -> ``(B, Fout, n_out)``."""
        full = full.reshape(full.shape[0], self.nb, self.n_phase)[:, :, :self.n_out]
        return np.ascontiguousarray(full.transpose(1, 0, 2))

    def grad_outputs(self, dout):
        """``(B, Fout, n_out)`` -> zero-filled ``(Fout, B * P)``."""
        full = np.zeros((dout.shape[1], self.nb, self.n_phase))
        full[:, :, :self.n_out] = dout.transpose(1, 0, 2)
        return full.reshape(dout.shape[1], -1)

    def tap(self, k):
        """Plane index and first column read by kernel offset ``k``."""
        return k % self.stride, k // self.stride


def conv1d_forward(x, w, stride, pad_left, pad_right):
    """``out[b, g, t] = sum_{f,k} w[g, f, k] * xpad[b, f, stride*t + k]``."""
    x = np.asarray(x, dtype=np.float64)
    lay = PhaseLayout(x.shape[0], x.shape[2], w.shape[2], stride, pad_left, pad_right)
    planes = lay.planes(x)
    full = np.zeros((w.shape[0], lay.n_cols))
    for k in range(w.shape[2]):
        r, c = lay.tap(k)
        full += w[:, :, k] @ planes[r, :, c:c + lay.n_cols]
    return lay.outputs(full)


def conv1d_backward(dout, x, w, stride, pad_left, pad_right):
    """Gradients of ``conv1d_forward`` w.r.t. its input and weights."""
    x = np.asarray(x, dtype=np.float64)
    lay = PhaseLayout(x.shape[0], x.shape[2], w.shape[2], stride, pad_left, pad_right)
    planes = lay.planes(x)
    dfull = lay.grad_outputs(dout)
    dplanes = np.zeros_like(planes)
    dw = np.empty_like(w, dtype=np.float64)
    for k in range(w.shape[2]):
        r, c = lay.tap(k)
        dw[:, :, k] = dfull @ planes[r, :, c:c + lay.n_cols].T
        dplanes[r, :, c:c + lay.n_cols] += w[:, :, k].T @ dfull
    return lay.unplanes(dplanes), dw


def candidate_scores(wc, sxx, stt, sxt, proj, tol=1e-20):
    """Both correlation coefficients for every candidate channel combination.

    ``wc`` holds candidates as columns. With centred instance ``X`` and
    template ``T`` (channels x time): ``sxx = X X'``, ``stt = T T'``,
    ``sxt = X T'`` and ``proj = X Q`` where ``Q`` is an orthonormal basis of the
    centred reference rows. Candidates whose combined instance or template is
    constant come back with ``valid = False`` and zero coefficients.
    """
    vx = np.einsum("ck,cd,dk->k", wc, sxx, wc)
    vt = np.einsum("ck,cd,dk->k", wc, stt, wc)
    cxt = np.einsum("ck,cd,dk->k", wc, sxt, wc)
    p = proj.T @ wc  # (R, K)
    scale = np.einsum("ck,ck->k", wc, wc)
    valid = (vx > tol * np.trace(sxx) * scale) & (vt > tol * np.trace(stt) * scale)
    rho1 = np.zeros(wc.shape[1])
    rho2 = np.zeros(wc.shape[1])
    rho1[valid] = cxt[valid] / np.sqrt(vx[valid] * vt[valid])
    rho2[valid] = np.sqrt(np.einsum("rk,rk->k", p, p)[valid] / vx[valid])
    np.clip(rho1, -1.0, 1.0, out=rho1)
    np.clip(rho2, 0.0, 1.0, out=rho2)
    return rho1, rho2, valid
