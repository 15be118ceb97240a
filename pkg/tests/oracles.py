"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                y = r * stride + i - padding
                                xx = q * stride + j - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[bi, ic, y, xx] * w[oc, ic, i, j]
                    out[bi, oc, r, q] = acc
    return out


def max_pool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for ci in range(c):
            for r in range(ho):
                for q in range(wo):
                    out[bi, ci, r, q] = max(
                        x[bi, ci, r * stride + i, q * stride + j] for i in range(k) for j in range(k)
                    )
    return out


def box_map_by_area(boxes, rows, cols):
    """Cell is set iff its overlap area with some box is strictly positive."""
    grid = np.zeros((rows, cols), dtype=np.uint8)
    for i in range(rows):
        for j in range(cols):
            cx0, cx1 = j / cols, (j + 1) / cols
            cy0, cy1 = i / rows, (i + 1) / rows
            for b in boxes:
                bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
                by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
                ow = min(cx1, bx1) - max(cx0, bx0)
                oh = min(cy1, by1) - max(cy0, by0)
                if ow > 0 and oh > 0 and ow * oh > 0:
                    grid[i, j] = 1
    return grid


def corner_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _corners(d):
    return (d.cx - d.w / 2, d.cy - d.h / 2, d.cx + d.w / 2, d.cy + d.h / 2)


def nms_bruteforce(dets, thr):
    """Walk detections by score; keep one iff no already-kept same-class box overlaps > thr."""
    idx = list(range(len(dets)))
    # selection sort by (score desc, index asc) to stay independent of sorted()
    ordered = []
    while idx:
        best = idx[0]
        for i in idx[1:]:
            if dets[i].score > dets[best].score:
                best = i
        ordered.append(best)
        idx.remove(best)
    kept = []
    for i in ordered:
        ok = True
        for k in kept:
            if dets[k].class_id == dets[i].class_id and corner_iou(_corners(dets[k]), _corners(dets[i])) > thr:
                ok = False
        if ok:
            kept.append(i)
    return [dets[i] for i in kept]


def ap_bruteforce(dets, gts, thr):
    """Single-image class-mean AP: explicit greedy matching + 101-point envelope by scanning."""
    classes = sorted({d.class_id for d in dets} | {g.class_id for g in gts})
    aps = []
    for c in classes:
        cd = [(d, i) for i, d in enumerate(dets) if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        if not cg:
            aps.append(0.0)
            continue
        # stable order: higher score first, earlier index first on ties
        cd.sort(key=lambda t: (-t[0].score, t[1]))
        matched = [False] * len(cg)
        flags = []
        for d, _ in cd:
            cand = [(corner_iou(_corners(d), _corners(g)), j) for j, g in enumerate(cg) if not matched[j]]
            best = None
            for v, j in cand:
                if best is None or v > best[0]:
                    best = (v, j)
            if best is not None and best[0] >= thr:
                matched[best[1]] = True
                flags.append(1)
            else:
                flags.append(0)
        prec, rec = [], []
        tp = 0
        for k, f in enumerate(flags, start=1):
            tp += f
            prec.append(tp / k)
            rec.append(tp / len(cg))
        samples = []
        for p in range(101):
            r = p / 100
            cands = [prec[k] for k in range(len(prec)) if rec[k] >= r]
            samples.append(max(cands) if cands else 0.0)
        aps.append(math.fsum(samples) / 101)
    return math.fsum(aps) / len(aps) if aps else 1.0
