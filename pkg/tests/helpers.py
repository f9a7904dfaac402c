"""Independent oracles shared by the test modules."""
import numpy as np


def central_difference(f, arr: np.ndarray, index, step: float = 1e-4) -> float:
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place."""
    old = arr[index]
    arr[index] = old + step
    fp = f()
    arr[index] = old - step
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * step)


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def dense_attention(q, k, v, heads):
    """Per-head loop reference for multi-head scaled dot-product attention."""
    lq, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out


def ref_layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def ref_silu(x):
    return x / (1 + np.exp(-x))


def randomize(module, seed: int, scale: float = 0.3) -> None:
    """Overwrite every parameter (including zero-initialized gates) with seeded noise."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = rng.normal(0, scale, size=p.shape).astype(p.dtype)


def ref_mha(attn, x, ctx):
    """Projected multi-head attention for one sequence, from raw weight arrays."""
    lin = lambda layer, a: a @ layer.weight.data + layer.bias.data
    h = dense_attention(lin(attn.wq, x), lin(attn.wk, ctx), lin(attn.wv, ctx), attn.heads)
    return lin(attn.wo, h)


def ref_mlp(mlp, x):
    h = ref_gelu(x @ mlp.fc1.weight.data + mlp.fc1.bias.data)
    return h @ mlp.fc2.weight.data + mlp.fc2.bias.data


def ref_cdit_block(block, x, ctx, cond):
    """Single example: x (n, d), ctx (L, d), cond (d,) already passed through SiLU."""
    d = block.dim
    mod = cond @ block.adaln.weight.data + block.adaln.bias.data
    sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = (mod[i * d:(i + 1) * d] for i in range(9))
    x = x + g1 * ref_mha(block.self_attn, ref_layer_norm(x) * (1 + sc1) + sh1,
                         ref_layer_norm(x) * (1 + sc1) + sh1)
    x = x + g2 * ref_mha(block.cross_attn, ref_layer_norm(x) * (1 + sc2) + sh2, ctx)
    return x + g3 * ref_mlp(block.mlp, ref_layer_norm(x) * (1 + sc3) + sh3)


def ref_dit_block(block, x, cond):
    d = block.dim
    mod = cond @ block.adaln.weight.data + block.adaln.bias.data
    sh1, sc1, g1, sh3, sc3, g3 = (mod[i * d:(i + 1) * d] for i in range(6))
    h = ref_layer_norm(x) * (1 + sc1) + sh1
    x = x + g1 * ref_mha(block.self_attn, h, h)
    return x + g3 * ref_mlp(block.mlp, ref_layer_norm(x) * (1 + sc3) + sh3)
