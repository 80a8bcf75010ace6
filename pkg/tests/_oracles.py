"""Independent reference implementations used as test oracles."""
import numpy as np

from gtc import tensor as T


def triple_loop_matmul(a, b):
    """Float32 product accumulated in ascending inner index, one rounding per step."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def naive_conv(x, w, stride, pad):
    """Six nested loops; the (c, i, j) sum runs in C order like the im2col columns."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), np.float32)
    for b in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    acc = np.float32(0.0)
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc = np.float32(acc + np.float32(xp[b, ch, y * stride + i, z * stride + j]
                                                                  * w[o, ch, i, j]))
                    out[b, o, y, z] = acc
    return out


def numeric_grad(f, arrays, h=1e-3):
    """Central differences of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, np.float64)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_op_gradient(op, shapes, rng, rtol=1e-3, atol=1e-6, positive=False):
    """Compare reverse-mode and central-difference gradients of sum(op(*xs) * r) in float64."""
    with T.default_dtype(np.float64):
        arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
        r = rng.normal(size=out.shape)
        loss = T.tsum(T.mul(out, T.Tensor(r)))
        T.backward(loss)

        def f():
            return float(np.sum(op(*[T.Tensor(l.data) for l in leaves]).data * r))

        numeric = numeric_grad(f, [l.data for l in leaves])
    for leaf, num in zip(leaves, numeric):
        np.testing.assert_allclose(leaf.grad, num, rtol=rtol, atol=atol)


def random_quantized_layer(rng, max_size=300):
    """An arbitrary valid layer: random shape, exponent range, zeros and thetas."""
    from gtc.quant import QuantizedLayer, layer_bits

    rank = int(rng.integers(0, 4))
    shape = tuple(int(d) for d in rng.integers(1, 8, rank))
    if rank and rng.random() < 0.3:
        shape = (int(rng.integers(1, max_size)),) + shape[1:]
    n = int(np.prod(shape)) if rank else 1
    signs = rng.choice(np.array([-1, 0, 1], np.int8), n, p=rng.dirichlet([1, 1, 1]))
    m = int(rng.integers(-126, 120))
    span = int(rng.integers(0, min(40, 126 - m) + 1))
    exps = np.where(signs != 0, rng.integers(m, m + span + 1, n), 0).astype(np.int32)
    nz = signs != 0
    lo, hi = (int(exps[nz].min()), int(exps[nz].max())) if nz.any() else (None, None)
    t1, t2 = (float(np.float32(v)) for v in rng.normal(0, 3, 2))
    name = "".join(rng.choice(list("abcxyz019_é"), int(rng.integers(0, 12))))
    return QuantizedLayer(signs=signs.reshape(shape), exponents=exps.reshape(shape), m=lo, M=hi,
                          bits=layer_bits(lo, hi), theta1=t1, theta2=t2, name=name, shape=shape)
