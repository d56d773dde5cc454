# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the dense ReLU network.

Same contract as ``_pykernels``. Matrix products go through the BLAS
``dgemm`` that scipy exports, so the inner loops never touch the
interpreter; elementwise work (bias, ReLU, softmax, sign steps) is plain C.

Row-major arrays are handed to column-major BLAS by reading them as their
transposes.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double LOG_FLOOR = 1e-300

cdef int MODE_UNTARGETED = 0
cdef int MODE_TARGETED = 1
cdef int MODE_NONE = 2


cdef inline void _xwT(const double* X, const double* W, double* Z,
                      int n, int din, int dout) noexcept nogil:
    # Z (n, dout) = X (n, din) @ W.T ; W is (dout, din)
    cdef double one = 1.0, zero = 0.0
    dgemm(b"T", b"N", &dout, &n, &din, &one, <double*>W, &din,
          <double*>X, &din, &zero, Z, &dout)


cdef inline void _gw(const double* G, const double* W, double* D,
                     int n, int din, int dout) noexcept nogil:
    # D (n, din) = G (n, dout) @ W (dout, din)
    cdef double one = 1.0, zero = 0.0
    dgemm(b"N", b"N", &din, &n, &dout, &one, <double*>W, &din,
          <double*>G, &dout, &zero, D, &din)


cdef inline void _gTh(const double* G, const double* H, double* dW,
                      int n, int din, int dout) noexcept nogil:
    # dW (dout, din) = G.T (dout, n) @ H (n, din)
    cdef double one = 1.0, zero = 0.0
    dgemm(b"N", b"T", &din, &dout, &n, &one, <double*>H, &din,
          <double*>G, &dout, &zero, dW, &din)


cdef class _MLP:
    """Weight pointers plus work buffers for a fixed batch size."""
    cdef int L, n
    cdef list Ws, bs, acts, grads
    cdef int[::1] dims

    def __init__(self, list weights, list biases, int n):
        cdef int i
        self.L = len(weights)
        self.n = n
        self.Ws = [np.ascontiguousarray(W, dtype=np.float64) for W in weights]
        self.bs = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.dims = np.empty(self.L + 1, dtype=np.intc)
        self.dims[0] = self.Ws[0].shape[1]
        for i in range(self.L):
            if self.Ws[i].shape[1] != self.dims[i]:
                raise ValueError(f"layer {i}: expects input width {self.Ws[i].shape[1]}, got {self.dims[i]}")
            self.dims[i + 1] = self.Ws[i].shape[0]
        self.acts = [None] + [np.empty((n, self.dims[i + 1])) for i in range(self.L)]
        self.grads = [np.empty((n, self.dims[i])) for i in range(self.L + 1)]

    cdef double* _act(self, int i):
        return <double*>cnp.PyArray_DATA(self.acts[i])

    cdef double* _grad(self, int i):
        return <double*>cnp.PyArray_DATA(self.grads[i])

    cdef double* _w(self, int i):
        return <double*>cnp.PyArray_DATA(self.Ws[i])

    cdef double* _b(self, int i):
        return <double*>cnp.PyArray_DATA(self.bs[i])

    cdef void forward(self, const double* X):
        cdef int i, r, c, dout
        cdef const double* h = X
        cdef double* z
        cdef double* b
        for i in range(self.L):
            dout = self.dims[i + 1]
            z = self._act(i + 1)
            b = self._b(i)
            _xwT(h, self._w(i), z, self.n, self.dims[i], dout)
            if i < self.L - 1:
                for r in range(self.n):
                    for c in range(dout):
                        z[r * dout + c] += b[c]
                        if z[r * dout + c] < 0.0:
                            z[r * dout + c] = 0.0
            else:
                for r in range(self.n):
                    for c in range(dout):
                        z[r * dout + c] += b[c]
            h = z

    cdef void input_grad(self):
        # grads[L] holds the logit gradient; leaves dX in grads[0]
        cdef int i, k, size
        cdef double* g
        cdef double* h
        for i in range(self.L - 1, -1, -1):
            _gw(self._grad(i + 1), self._w(i), self._grad(i),
                self.n, self.dims[i], self.dims[i + 1])
            if i > 0:
                g = self._grad(i)
                h = self._act(i)
                size = self.n * self.dims[i]
                for k in range(size):
                    if not h[k] > 0.0:
                        g[k] = 0.0

    cdef void soft_ce(self, const double* Q, double* loss):
        # loss = -sum Q log softmax(logits); grads[L] = softmax - Q
        cdef int r, c, C = self.dims[self.L]
        cdef double* z = self._act(self.L)
        cdef double* g = self._grad(self.L)
        cdef double m, s, p, acc
        for r in range(self.n):
            m = z[r * C]
            for c in range(1, C):
                if z[r * C + c] > m:
                    m = z[r * C + c]
            s = 0.0
            for c in range(C):
                p = exp(z[r * C + c] - m)
                g[r * C + c] = p
                s += p
            acc = 0.0
            for c in range(C):
                p = g[r * C + c] / s
                if Q[r * C + c] != 0.0:
                    acc -= Q[r * C + c] * log(p if p > LOG_FLOOR else LOG_FLOOR)
                g[r * C + c] = p - Q[r * C + c]
            loss[r] = acc

    cdef void fooled(self, const long* labels, int mode, char* out):
        cdef int r, c, best, C = self.dims[self.L]
        cdef double* z = self._act(self.L)
        for r in range(self.n):
            if mode == MODE_NONE:
                out[r] = 0
                continue
            best = 0
            for c in range(1, C):
                if z[r * C + c] > z[r * C + best]:
                    best = c
            if mode == MODE_TARGETED:
                out[r] = best == labels[r]
            else:
                out[r] = best != labels[r]


def forward(list weights, list biases, cnp.ndarray X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    cdef _MLP net = _MLP(weights, biases, X.shape[0])
    if X.shape[1] != net.dims[0]:
        raise ValueError(f"layer 0: expects input width {net.dims[0]}, got {X.shape[1]}")
    net.forward(<double*>cnp.PyArray_DATA(X))
    return [X] + net.acts[1:]


def backward(list weights, list acts, cnp.ndarray G, bint need_params=True):
    cdef int L = len(weights), i, r, c, n = G.shape[0], din, dout, k, size
    cdef list dWs = [None] * L, dbs = [None] * L
    cdef cnp.ndarray g = np.ascontiguousarray(G, dtype=np.float64)
    cdef cnp.ndarray W, h, dW, db, gnext
    cdef double* gp
    cdef double* hp
    cdef double* dbp
    for i in range(L - 1, -1, -1):
        W = np.ascontiguousarray(weights[i], dtype=np.float64)
        h = np.ascontiguousarray(acts[i], dtype=np.float64)
        dout = W.shape[0]
        din = W.shape[1]
        gp = <double*>cnp.PyArray_DATA(g)
        if need_params:
            dW = np.empty((dout, din))
            _gTh(gp, <double*>cnp.PyArray_DATA(h), <double*>cnp.PyArray_DATA(dW), n, din, dout)
            db = np.zeros(dout)
            dbp = <double*>cnp.PyArray_DATA(db)
            for r in range(n):
                for c in range(dout):
                    dbp[c] += gp[r * dout + c]
            dWs[i] = dW
            dbs[i] = db
        gnext = np.empty((n, din))
        _gw(gp, <double*>cnp.PyArray_DATA(W), <double*>cnp.PyArray_DATA(gnext), n, din, dout)
        if i > 0:
            gp = <double*>cnp.PyArray_DATA(gnext)
            hp = <double*>cnp.PyArray_DATA(h)
            size = n * din
            for k in range(size):
                if not hp[k] > 0.0:
                    gp[k] = 0.0
        g = gnext
    return dWs, dbs, g


def loss_input_grad(list weights, list biases, cnp.ndarray X, cnp.ndarray Q):
    X = np.ascontiguousarray(X, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef int n = X.shape[0]
    cdef _MLP net = _MLP(weights, biases, n)
    cdef cnp.ndarray loss = np.empty(n)
    net.forward(<double*>cnp.PyArray_DATA(X))
    net.soft_ce(<double*>cnp.PyArray_DATA(Q), <double*>cnp.PyArray_DATA(loss))
    net.input_grad()
    return net.acts[net.L].copy(), loss, net.grads[0].copy()


def pgd_loop(list weights, list biases, cnp.ndarray X, cnp.ndarray Q,
             cnp.ndarray labels, int mode, cnp.ndarray start, cnp.ndarray lo,
             cnp.ndarray hi, double step, int K, double direction,
             bint start_is_clean):
    X = np.ascontiguousarray(X, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    cdef cnp.ndarray lab = np.ascontiguousarray(labels, dtype=np.int_)
    cdef int n = X.shape[0], d = X.shape[1], r, j, k
    cdef _MLP net = _MLP(weights, biases, n)
    cdef cnp.ndarray cur_a = np.array(start, dtype=np.float64, order="C", copy=True)
    cdef cnp.ndarray best_a = X.copy()
    cdef cnp.ndarray best_obj_a = np.full(n, -INFINITY)
    cdef cnp.ndarray best_fooled_a = np.zeros(n, dtype=np.int8)
    cdef cnp.ndarray kappa_a = np.zeros(n, dtype=np.int64)
    cdef cnp.ndarray loss_a = np.empty(n)
    cdef cnp.ndarray fooled_a = np.empty(n, dtype=np.int8)
    cdef cnp.ndarray alive_a = np.ones(n, dtype=np.int8)
    cdef double* x = <double*>cnp.PyArray_DATA(X)
    cdef double* q = <double*>cnp.PyArray_DATA(Q)
    cdef double* lop = <double*>cnp.PyArray_DATA(lo)
    cdef double* hip = <double*>cnp.PyArray_DATA(hi)
    cdef long* lb = <long*>cnp.PyArray_DATA(lab)
    cdef double* cur = <double*>cnp.PyArray_DATA(cur_a)
    cdef double* best = <double*>cnp.PyArray_DATA(best_a)
    cdef double* best_obj = <double*>cnp.PyArray_DATA(best_obj_a)
    cdef char* best_fooled = <char*>cnp.PyArray_DATA(best_fooled_a)
    cdef long long* kappa = <long long*>cnp.PyArray_DATA(kappa_a)
    cdef double* loss = <double*>cnp.PyArray_DATA(loss_a)
    cdef char* fooled = <char*>cnp.PyArray_DATA(fooled_a)
    cdef char* alive = <char*>cnp.PyArray_DATA(alive_a)
    cdef double* g
    cdef double obj, s, v, dstep = direction * step
    cdef bint better

    if not start_is_clean:
        net.forward(x)
        net.soft_ce(q, loss)
        net.fooled(lb, mode, best_fooled)
        for r in range(n):
            best_obj[r] = direction * loss[r]
            alive[r] = not best_fooled[r]

    for k in range(K + 1):
        net.forward(cur)
        net.soft_ce(q, loss)
        net.fooled(lb, mode, fooled)
        for r in range(n):
            obj = direction * loss[r]
            better = (fooled[r] and not best_fooled[r]) or (
                fooled[r] == best_fooled[r] and obj > best_obj[r])
            if better:
                best_obj[r] = obj
                for j in range(d):
                    best[r * d + j] = cur[r * d + j]
            if fooled[r]:
                best_fooled[r] = 1
        if k == K:
            break
        for r in range(n):
            if fooled[r]:
                alive[r] = 0
            kappa[r] += alive[r]
        net.input_grad()
        g = net._grad(0)
        for j in range(n * d):
            v = g[j]
            s = 1.0 if v > 0.0 else (-1.0 if v < 0.0 else 0.0)
            v = cur[j] + dstep * s
            if v < lop[j]:
                v = lop[j]
            if v > hip[j]:
                v = hip[j]
            cur[j] = v

    for r in range(n):
        best_obj[r] = direction * best_obj[r]
    return best_a, best_obj_a, best_fooled_a.astype(bool), kappa_a
