"""Shared test utilities: finite-difference gradient oracle and fixtures."""

from __future__ import annotations

import numpy as np

from cellfuse import tensor as T


def finite_diff_grads(build_loss, leaves, eps: float = 1e-3):
    """Central finite differences of ``build_loss()`` w.r.t. each leaf.

    ``build_loss`` must reconstruct the forward graph from the leaves'
    current ``.data`` (64-bit) and return a scalar Tensor4.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = build_loss().item()
            flat[i] = orig - eps
            down = build_loss().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(build_loss, leaves, eps: float = 1e-3, tol: float = 1e-4) -> float:
    """Run backward once and compare every leaf grad against finite differences."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    T.backward(loss)
    numeric = finite_diff_grads(build_loss, leaves, eps=eps)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None, "leaf received no gradient"
        worst = max(worst, max_rel_err(leaf.grad, num))
    assert worst < tol, f"gradient check failed: max rel err {worst:.3e} >= {tol}"
    return worst


def check_gradients_adaptive(build_loss, leaves, tol: float = 1e-4,
                             eps_ladder=(1e-4, 1e-5, 1e-6)) -> float:
    """fd check robust to ReLU/abs kink crossings.

    A crossing inflates the fd estimate only for the eps that straddles the
    kink, so a pass at any single eps certifies the analytic gradient; a real
    gradient bug mismatches at every eps. Returns the best worst-case error.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    T.backward(loss)
    best = np.inf
    for eps in eps_ladder:
        numeric = finite_diff_grads(build_loss, leaves, eps=eps)
        worst = 0.0
        for leaf, num in zip(leaves, numeric):
            assert leaf.grad is not None, "leaf received no gradient"
            worst = max(worst, max_rel_err(leaf.grad, num))
        best = min(best, worst)
        if worst < tol:
            return worst
    raise AssertionError(f"gradient check failed at every eps: best rel err {best:.3e} >= {tol}")


def rand4(rng: np.random.Generator, shape, lo: float = -1.0, hi: float = 1.0,
          requires_grad: bool = True, dtype=np.float64) -> T.Tensor4:
    data = rng.uniform(lo, hi, size=shape).astype(dtype)
    return T.Tensor4(data, requires_grad=requires_grad)


def away_from_kinks(t: T.Tensor4, margin: float = 0.05) -> T.Tensor4:
    """Push values out of the +-margin band around 0 (ReLU/abs kinks)."""
    d = t.data
    small = np.abs(d) < margin
    d[small] = np.sign(d[small] + 1e-12) * (margin + np.abs(d[small]))
    return t


# ---------------------------------------------------------------------------
# random label scenes and the brute-force matcher used as the metric oracle

def random_label_scene(rng: np.random.Generator, size: int = 96,
                       max_instances: int = 20, n_types: int = 3):
    """Random disk instances, first-placed keeps contested pixels."""
    from cellfuse.labelmap import InstanceLabelMap

    labels = np.zeros((size, size), dtype=np.int32)
    yy, xx = np.mgrid[0:size, 0:size]
    k = int(rng.integers(0, max_instances + 1))
    next_id = 1
    for _ in range(k):
        r = int(rng.integers(3, max(4, size // 8)))
        cy = int(rng.integers(0, size))
        cx = int(rng.integers(0, size))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        fresh = disk & (labels == 0)
        if fresh.sum() < 4:
            continue
        labels[fresh] = next_id
        next_id += 1
    out = InstanceLabelMap(labels, {}).renumbered()
    out.types = {i: int(rng.integers(1, n_types + 1)) for i in range(1, out.n_instances + 1)}
    return out


def perturb_scene(rng: np.random.Generator, gt):
    """Shift / erode / drop instances and add spurious blobs to make a pred map."""
    from cellfuse.labelmap import InstanceLabelMap

    size = gt.labels.shape[0]
    pred = np.zeros_like(gt.labels)
    next_id = 1
    types = {}
    for i in range(1, gt.n_instances + 1):
        roll = rng.random()
        if roll < 0.15:
            continue  # dropped: becomes a FN
        mask = gt.labels == i
        dy, dx = rng.integers(-2, 3, size=2)
        shifted = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
        if roll < 0.3:
            shifted &= rng.random(mask.shape) > 0.5  # heavy erosion
        fresh = shifted & (pred == 0)
        if fresh.sum() == 0:
            continue
        pred[fresh] = next_id
        types[next_id] = gt.types.get(i, 1)
        next_id += 1
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(0, 3))):  # spurious blobs: FPs
        r = int(rng.integers(2, 6))
        cy, cx = rng.integers(0, size, size=2)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (pred == 0)
        if disk.sum() >= 4:
            pred[disk] = next_id
            types[next_id] = int(rng.integers(1, 4))
            next_id += 1
    return InstanceLabelMap(pred, types).renumbered()


def brute_force_match(gt, pred):
    """All-pairs IoU over boolean masks; the independent oracle route."""
    from cellfuse.metrics import MatchResult

    gt_ids = [int(i) for i in np.unique(gt.labels) if i > 0]
    pred_ids = [int(i) for i in np.unique(pred.labels) if i > 0]
    pairs = []
    matched_gt, matched_pred = set(), set()
    for g in gt_ids:
        gm = gt.labels == g
        for p in pred_ids:
            pm = pred.labels == p
            inter = int(np.logical_and(gm, pm).sum())
            if inter == 0:
                continue
            union = int(np.logical_or(gm, pm).sum())
            iou = inter / union
            if iou > 0.5:
                pairs.append((g, p, iou))
                matched_gt.add(g)
                matched_pred.add(p)
    pairs.sort()
    return MatchResult(pairs=pairs,
                       fp_ids=sorted(set(pred_ids) - matched_pred),
                       fn_ids=sorted(set(gt_ids) - matched_gt),
                       n_gt=len(gt_ids), n_pred=len(pred_ids))
