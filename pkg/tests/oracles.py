"""Slow, loop-based reference implementations used only by the tests.

Everything here is plain Python float arithmetic, written independently of
the vectorized engine code.
"""

import math


def round_half_away(v):
    return math.floor(v + 0.5) if v >= 0 else -math.floor(-v + 0.5)


def out_size(n, r):
    return int(round_half_away(max(n * r, 1.5)))


def conv2d_loops(x, w, b, pad):
    """x [B][C][H][W] nested lists or arrays, w [O][C][K][K], same-size output."""
    batch, chans, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    outs, k = len(w), len(w[0][0])
    y = [[[[0.0] * wd for _ in range(h)] for _ in range(outs)] for _ in range(batch)]
    for n in range(batch):
        for o in range(outs):
            for i in range(h):
                for j in range(wd):
                    acc = float(b[o])
                    for c in range(chans):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - pad, j + dj - pad
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[n][c][ii][jj]) * float(w[o][c][di][dj])
                    y[n][o][i][j] = acc
    return y


def bilinear_point(img, qh, qw):
    """Sample a 2-D list-of-lists at normalized (qh, qw), replicate border."""
    h, w = len(img), len(img[0])

    def axis(q, n):
        u = ((q + 1.0) * n - 1.0) / 2.0
        u = min(max(u, 0.0), n - 1.0)
        i0 = min(int(math.floor(u)), max(n - 2, 0))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, u - i0

    h0, h1, fh = axis(qh, h)
    w0, w1, fw = axis(qw, w)
    return ((1 - fh) * (1 - fw) * img[h0][w0] + (1 - fh) * fw * img[h0][w1]
            + fh * (1 - fw) * img[h1][w0] + fh * fw * img[h1][w1])


def dynopool_loops(img, r_h, r_w):
    """Brute-force resize of one 2-D channel: cells, 4 query points, max."""
    h, w = len(img), len(img[0])
    ho, wo = out_size(h, r_h), out_size(w, r_w)
    dh, dw = 0.5 / ho, 0.5 / wo
    out = []
    for i in range(ho):
        ph = -1.0 + (2 * i + 1) / ho
        row = []
        for j in range(wo):
            pw = -1.0 + (2 * j + 1) / wo
            best = -math.inf
            for sh in (-1, 1):
                for sw in (-1, 1):
                    best = max(best, bilinear_point(img, ph + sh * dh, pw + sw * dw))
            row.append(best)
        out.append(row)
    return out


def count_gmacs(layers, input_hw, ratios):
    """Independent GMACs count for a sequential conv/relu/dynopool/gap/linear list.

    ``layers`` holds tuples: ("conv", cin, cout, k), ("relu",),
    ("dynopool", rid), ("gap",), ("linear", fin, fout). ``ratios`` maps rid to
    (r_h, r_w). Sizes are chained with the discrete rounding rule.
    """
    h, w = input_hw
    total = 0.0
    for layer in layers:
        if layer[0] == "conv":
            _, cin, cout, k = layer
            total += cin * cout * k * k * h * w / 1e9
        elif layer[0] == "dynopool":
            r_h, r_w = ratios[layer[1]]
            h, w = out_size(h, r_h), out_size(w, r_w)
        elif layer[0] == "linear":
            total += layer[1] * layer[2] / 1e9
    return total
