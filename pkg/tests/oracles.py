"""Reference implementations written directly from the formulas.

Nothing here touches the autodiff engine: plain numpy on one image at a time,
with explicit loops where the library vectorises. Tests compare the library
against these.
"""

import math

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x * x * x)))


def layernorm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = row.sum() / row.size
        var = ((row - mu) ** 2).sum() / row.size
        out[i] = (row - mu) / math.sqrt(var + eps) * g + b
    return out


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def mean_rows(x):
    acc = np.zeros(x.shape[1])
    for row in x:
        acc = acc + row
    return acc / x.shape[0]


def lstm(x, h, c, cell):
    """cell: dict gate -> (Wx, Wh, b) for gates input, forget, cell, output."""
    i = sigmoid(x @ cell["input"][0] + h @ cell["input"][1] + cell["input"][2])
    f = sigmoid(x @ cell["forget"][0] + h @ cell["forget"][1] + cell["forget"][2])
    g = np.tanh(x @ cell["cell"][0] + h @ cell["cell"][1] + cell["cell"][2])
    o = sigmoid(x @ cell["output"][0] + h @ cell["output"][1] + cell["output"][2])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def gru(x, h, cell):
    z = sigmoid(x @ cell["update"][0] + h @ cell["update"][1] + cell["update"][2])
    r = sigmoid(x @ cell["reset"][0] + h @ cell["reset"][1] + cell["reset"][2])
    cand = np.tanh(x @ cell["candidate"][0] + (r * h) @ cell["candidate"][1] + cell["candidate"][2])
    return (1.0 - z) * h + z * cand


def cell_dict(cell):
    return {name: (cell.wx[g].data, cell.wh[g].data, cell.b[g].data) for g, name in enumerate(cell.gates)}


def layer_dict(lw):
    return {f: getattr(lw, f).data for f in lw.__dataclass_fields__}


def transformer_layer(x, p, heads):
    """Pre-norm layer on a single (T, D) sequence; returns (y, attn[heads, T, T])."""
    T, D = x.shape
    dh = D // heads
    hN = layernorm(x, p["ln1_g"], p["ln1_b"])
    q = hN @ p["wq"] + p["bq"]
    k = hN @ p["wk"] + p["bk"]
    v = hN @ p["wv"] + p["bv"]
    ctx = np.zeros((T, D))
    attn = np.zeros((heads, T, T))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for t in range(T):
            a = softmax(q[t, sl] @ k[:, sl].T / math.sqrt(dh))
            attn[hd, t] = a
            ctx[t, sl] = a @ v[:, sl]
    x = x + ctx @ p["wo"] + p["bo"]
    m = gelu(layernorm(x, p["ln2_g"], p["ln2_b"]) @ p["w1"] + p["b1"])
    return x + m @ p["w2"] + p["b2"], attn


def embed(image, w):
    cfg = w.config
    P, (gh, gw) = cfg.patch, cfg.grid
    rows = []
    for r in range(gh):
        for c in range(gw):
            rows.append(image[:, r * P : (r + 1) * P, c * P : (c + 1) * P].reshape(-1))
    return np.array(rows) @ w.patch_w.data + w.patch_b.data + w.pos_embed.data


def unrolled_forward(image, w, bank, spatial="mean", temporal="lstm"):
    """Straight-line version of the prompt pipeline for one image.

    Returns (logits, per-block list of dicts with 'prompt_in', 'cls', 'prompts', 'patches', 'attn').
    """
    blocks = [layer_dict(b) for b in w.blocks]
    L, heads = len(blocks), w.config.heads
    X = embed(image, w)
    xc = w.class_token.data.copy()
    P = [p.data for p in bank.prompts]
    Np = P[0].shape[0] if P else 0
    xp = P[0].copy() if P else np.zeros((0, X.shape[1]))
    C = np.zeros_like(xp)
    cell = cell_dict(bank.cells[0]) if bank.cells else None
    trace = []
    for l in range(L):
        seq = np.concatenate([xc, xp, X])
        y, attn = transformer_layer(seq, blocks[l], heads)
        out_c, out_p, out_x = y[:1], y[1 : 1 + Np], y[1 + Np :]
        trace.append({"prompt_in": xp, "cls": out_c, "prompts": out_p, "patches": out_x, "attn": attn})
        if l == L - 1:
            xc = out_c
            break
        fresh = P[l + 1]
        if spatial is None and temporal is None:
            xp = fresh.copy()
        else:
            S = out_p + mean_rows(out_x) if spatial == "mean" else out_p
            if temporal == "lstm":
                xp, C = lstm(fresh, S, C, cell)
            elif temporal == "gru":
                xp = gru(fresh, S, cell)
            else:
                xp = S + fresh
        xc, X = out_c, out_x
    logits = xc[0] @ bank.head_w.data + bank.head_b.data
    return logits, trace


def cosine(u, v):
    nu, nv = math.sqrt(sum(a * a for a in u)), math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def prompt_patch_cosine(prompts, patches):
    Np, N = prompts.shape[0], patches.shape[0]
    out = np.zeros(N)
    for i in range(N):
        s = 0.0
        for k in range(Np):
            s += cosine(prompts[k], patches[i])
        out[i] = s / Np
    return out


def class_attention(attn, Np):
    heads, T, _ = attn.shape
    N = T - 1 - Np
    row = np.zeros(N)
    for hd in range(heads):
        for i in range(N):
            row[i] += attn[hd, 0, 1 + Np + i]
    row /= heads
    return row / row.sum()
