"""Brute-force reference implementations used as independent oracles.

Each function works on plain nested loops over uint8 / float arrays and
shares no code with the package.
"""
import math


def o_histogram(img):
    counts = [0] * 256
    for v in img.reshape(-1):
        counts[int(v)] += 1
    return counts


def o_entropy(img):
    counts = {}
    total = 0
    for v in img.reshape(-1):
        counts[int(v)] = counts.get(int(v), 0) + 1
        total += 1
    h = 0.0
    for c in counts.values():
        p = c / total
        h -= p * math.log2(p)
    return h


def o_npcr(a, b):
    diff = 0
    n = 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        n += 1
        if int(x) != int(y):
            diff += 1
    return 100.0 * diff / n


def o_psnr(a, b):
    s = 0.0
    n = 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        d = float(x) - float(y)
        s += d * d
        n += 1
    if s == 0:
        return math.inf
    return 20 * math.log10(255.0 / math.sqrt(s / n))


def _ssim_window(xs, ys):
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    c3 = c2 / 2
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((v - mx) ** 2 for v in xs) / n
    vy = sum((v - my) ** 2 for v in ys) / n
    cov = sum((u - mx) * (v - my) for u, v in zip(xs, ys)) / n
    sx, sy = math.sqrt(vx), math.sqrt(vy)
    l = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    c = (2 * sx * sy + c2) / (vx + vy + c2)
    s = (cov + c3) / (sx * sy + c3)
    return l * c * s


def o_ssim(a, b, window=8):
    """a, b: H x W x C arrays of gray levels. Sliding windows, or one global window for small images."""
    h, w, ch = a.shape
    per_channel = []
    for c in range(ch):
        if min(h, w) < 2 * window:
            xs = [float(a[i, j, c]) for i in range(h) for j in range(w)]
            ys = [float(b[i, j, c]) for i in range(h) for j in range(w)]
            per_channel.append(_ssim_window(xs, ys))
            continue
        vals = []
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                xs = [float(a[i + p, j + q, c]) for p in range(window) for q in range(window)]
                ys = [float(b[i + p, j + q, c]) for p in range(window) for q in range(window)]
                vals.append(_ssim_window(xs, ys))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


def o_dice(g, p):
    inter = gs = ps = 0
    for x, y in zip(g.reshape(-1), p.reshape(-1)):
        x = 1 if x >= 0.5 else 0
        y = 1 if y >= 0.5 else 0
        gs += x
        ps += y
        inter += x * y
    if gs + ps == 0:
        return 1.0
    return inter / ((gs + ps) / 2)


def fd_gradient_errors(net, loss_fn, h=1e-6):
    """Compare autograd against central differences for every parameter entry.

    ``net`` must be float64. Returns a list of (name, index, analytic, numeric).
    """
    import torch

    net.zero_grad(set_to_none=True)
    loss_fn(net).backward()
    rows = []
    with torch.no_grad():
        for name, p in net.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + h
                plus = loss_fn(net).item()
                flat[i] = keep - h
                minus = loss_fn(net).item()
                flat[i] = keep
                rows.append((name, i, analytic[i].item(), (plus - minus) / (2 * h)))
    return rows


def fd_mismatches(rows, rel=1e-4, floor=1e-8):
    return [r for r in rows if abs(r[2] - r[3]) > rel * max(abs(r[2]), abs(r[3])) + floor]
