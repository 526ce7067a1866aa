"""Independent reference implementations used to check the engine.

Everything here is deliberately written the slow, obvious way (explicit
loops, closed forms, shapely for polygon work) and shares no code with the
engine paths it validates.
"""

import math

import numpy as np


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Direct 6-nested-loop cross-correlation."""
    B, C, H, W = x.shape
    OC, IC, kh, kw = w.shape
    assert C == IC
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, OC, OH, OW), dtype=np.float64)
    for b in range(B):
        for oc in range(OC):
            for oy in range(OH):
                for ox in range(OW):
                    acc = 0.0
                    for ic in range(IC):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[b, ic, oy * stride + ky, ox * stride + kx]
                                        * w[oc, ic, ky, kx])
                    out[b, oc, oy, ox] = acc + (bias[oc] if bias is not None else 0.0)
    return out


def two_pass_batchnorm(x, scale, shift, eps=1e-5):
    """Reference train-mode batch norm with explicit two-pass statistics."""
    B, C, H, W = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for c in range(C):
        vals = x[:, c].astype(np.float64)
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        out[:, c] = (vals - mu) / math.sqrt(var + eps) * scale[c] + shift[c]
    return out


def bilinear_reference(x, factor):
    """Half-pixel-center bilinear upsample, one output pixel at a time."""
    B, C, H, W = x.shape
    OH, OW = H * factor, W * factor
    out = np.zeros((B, C, OH, OW), dtype=np.float64)
    for oy in range(OH):
        sy = (oy + 0.5) / factor - 0.5
        y0 = math.floor(sy)
        wy1 = sy - y0
        y0c, y1c = min(max(y0, 0), H - 1), min(max(y0 + 1, 0), H - 1)
        for ox in range(OW):
            sx = (ox + 0.5) / factor - 0.5
            x0 = math.floor(sx)
            wx1 = sx - x0
            x0c, x1c = min(max(x0, 0), W - 1), min(max(x0 + 1, 0), W - 1)
            out[:, :, oy, ox] = (
                x[:, :, y0c, x0c] * (1 - wy1) * (1 - wx1)
                + x[:, :, y0c, x1c] * (1 - wy1) * wx1
                + x[:, :, y1c, x0c] * wy1 * (1 - wx1)
                + x[:, :, y1c, x1c] * wy1 * wx1
            )
    return out


def scatter_splat_reference(features, depth_logits, plan, cells):
    """Brute-force lift-splat in plan order with float32 scalar accumulation
    so the result is bit-comparable with the engine's scatter.

    The depth softmax is computed on the full contiguous array: numpy's SIMD
    exp differs from the scalar strided path by 1 ulp, and this oracle checks
    the scatter (plan honoring + accumulation order), not exp rounding.
    """
    B, N, C, fh, fw = features.shape
    D = depth_logits.shape[2]
    m = depth_logits.max(axis=2, keepdims=True)
    e = np.exp(depth_logits - m)
    probs = e / e.sum(axis=2, keepdims=True)
    out = np.zeros((B, C, cells, cells), dtype=features.dtype)
    for b in range(B):
        flat = out[b].reshape(C, cells * cells)
        for e in range(plan.n_entries):
            cam = int(plan.cam[e])
            dbin = int(plan.bin[e])
            pix = int(plan.pix[e])
            cell = int(plan.cell[e])
            i, j = divmod(pix, fw)
            wgt = probs[b, cam, dbin, i, j]
            for c in range(C):
                flat[c, cell] = flat[c, cell] + features[b, cam, c, i, j] * wgt
    return out


def fd_gradient(f, x, h=1e-4):
    """Central finite differences of scalar-valued f at x (any-shape array)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, tol=1e-4):
    """Relative agreement with an absolute floor of 1."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) <= tol


def shapely_box_iou(box_a, box_b):
    from shapely.geometry import Polygon

    pa = Polygon(box_a.corners_bev())
    pb = Polygon(box_b.corners_bev())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def confusion_reference(pred, gt, num_classes=18):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)):
        cm[int(g), int(p)] += 1
    return cm


def miou_reference(pred, gt, num_classes=18, free_id=0):
    cm = confusion_reference(pred, gt, num_classes)
    vals = []
    for c in range(num_classes):
        if c == free_id:
            continue
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        if cm[c, :].sum() + cm[:, c].sum() == 0:
            continue
        vals.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
    return float(np.mean(vals)) if vals else 0.0


def ap_reference(pred_lists, gt_lists, cls, threshold, recall_samples=101):
    """Independent greedy matcher + 101-point interpolated AP for one class
    and one center-distance threshold."""
    scored = []
    for si, preds in enumerate(pred_lists):
        for p in preds:
            if p.cls == cls:
                scored.append((p.score, si, p))
    scored.sort(key=lambda t: -t[0])
    gt_used = {si: [False] * len(gts) for si, gts in enumerate(gt_lists)}
    num_gt = sum(1 for gts in gt_lists for g in gts if g.cls == cls)
    flags = []
    for score, si, p in scored:
        cands = [(math.hypot(p.x - g.x, p.y - g.y), gi)
                 for gi, g in enumerate(gt_lists[si])
                 if g.cls == cls and not gt_used[si][gi]]
        cands.sort()
        if cands and cands[0][0] <= threshold:
            gt_used[si][cands[0][1]] = True
            flags.append(1)
        else:
            flags.append(0)
    if num_gt == 0 or not flags:
        return 0.0
    tp = fp = 0
    prec, rec = [], []
    for fl in flags:
        tp += fl
        fp += 1 - fl
        prec.append(tp / (tp + fp))
        rec.append(tp / num_gt)
    total = 0.0
    for r in np.linspace(0, 1, recall_samples):
        best = max((p for p, q in zip(prec, rec) if q >= r), default=0.0)
        total += best
    return total / recall_samples
