"""Finite-difference gradient verification.

``numeric_grad`` is the independent oracle: it only ever calls the forward
path, so agreement with tape gradients validates every backward rule.
``gradcheck_all`` runs the registered per-op checks and tabulates the worst
relative error for each; the harness CLI exposes it as a verification
command with a nonzero exit status on failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor

H_DEFAULT = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def numeric_grad(f, x, h=H_DEFAULT, entries=None):
    """Central finite differences of scalar ``f`` w.r.t. entries of ``x``.

    With ``entries`` only those flat indices are perturbed (the rest of the
    returned gradient is NaN and must be masked by the caller); None means
    every entry.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if entries is None:
        entries = range(flat.size)
        g = np.zeros_like(x)
    else:
        g = np.full_like(x, np.nan)
    gf = g.reshape(-1)
    for i in entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def _entry_sample(size, limit, seed=1234):
    """Deterministic index subset for finite differences on large tensors."""
    if limit is None or size <= limit:
        return None
    return np.random.default_rng([seed, size]).choice(size, size=limit, replace=False)


def max_rel_error(analytic, numeric, floor=ABS_FLOOR):
    """Worst-case elementwise relative error with an absolute floor.

    NaN entries in ``numeric`` mark unchecked positions and are skipped.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    mask = ~np.isnan(n)
    a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradient(forward, inputs, h=H_DEFAULT, floor=ABS_FLOOR, max_entries=None):
    """Compare tape gradients of ``forward(*tensors)`` against finite differences.

    ``forward`` maps gradient-enabled Tensors to a scalar Tensor; ``inputs``
    are float64 arrays. Returns the max relative error over all inputs.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = forward(*tensors)
    tape.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            probe = [Tensor(a.copy()) for a in arrays]
            probe[i] = Tensor(x.copy())
            return forward(*probe).item()

        num = numeric_grad(f, arrays[i], h=h, entries=_entry_sample(arrays[i].size, max_entries))
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, max_rel_error(ana, num, floor=floor))
    return worst


def scalar_readout(out, weights):
    """Fixed random linear functional turning any op output into a scalar."""
    from .tensor import mul, tsum

    return tsum(mul(out, Tensor(weights)))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def _readout_weights(rng, shape):
    return rng.standard_normal(shape)


def _tensor_op_checks(rng):
    """Per-op gradient checks on at least 3 random shapes each."""
    from . import tensor as T

    checks = []

    def opcheck(name, fn, shapes_list, tol=REL_TOL):
        def run():
            worst = 0.0
            for shapes in shapes_list:
                arrays = [rng.standard_normal(s) for s in shapes]
                out_probe = fn(*[Tensor(a) for a in arrays])
                w = _readout_weights(rng, out_probe.shape)
                worst = max(worst, check_gradient(lambda *ts: scalar_readout(fn(*ts), w), arrays))
            return worst

        checks.append((name, run, tol))

    three = lambda *shape_groups: list(shape_groups)

    opcheck("add", T.add, three([(3, 4), (3, 4)], [(5,), (5,)], [(2, 3, 2), (2, 3, 2)]))
    opcheck("mul", T.mul, three([(3, 4), (3, 4)], [(6,), (6,)], [(2, 2, 3), (2, 2, 3)]))
    opcheck("scale", lambda x: T.scale(x, 1.7), three([(3, 4)], [(7,)], [(2, 3, 2)]))
    opcheck("sum", lambda x: T.tsum(x, axis=0), three([(3, 4)], [(5, 2)], [(2, 3, 2)]))
    opcheck("mean", lambda x: T.mean(x, axis=1), three([(3, 4)], [(5, 2)], [(2, 3, 2)]))
    opcheck("concat", lambda a, b: T.concat([a, b], axis=0), three([(2, 3), (4, 3)], [(1, 2), (3, 2)], [(2, 2, 2), (1, 2, 2)]))
    opcheck("stack", lambda a, b: T.stack([a, b], axis=0), three([(2, 3), (2, 3)], [(4,), (4,)], [(2, 2), (2, 2)]))
    opcheck("gather_rows", lambda x: T.gather_rows(x, np.array([0, 2, 2, 1])), three([(4, 3)], [(5, 2)], [(3, 2, 2)]))
    opcheck("matmul", T.matmul, three([(3, 4), (4, 5)], [(2, 3), (3, 2)], [(2, 3, 4), (2, 4, 2)]))
    opcheck("linear", T.linear, three([(5, 7), (3, 7), (3,)], [(2, 4, 6), (2, 6), (2,)], [(4,), (3, 4), (3,)]))
    opcheck(
        "conv2d",
        lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
        three([(4, 8, 8), (8, 4, 3, 3), (8,)], [(2, 6, 6), (3, 2, 3, 3), (3,)], [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        tol=1e-6,
    )
    opcheck(
        "conv2d_strided",
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
        three([(3, 8, 8), (6, 3, 3, 3), (6,)], [(2, 6, 6), (2, 2, 3, 3), (2,)], [(1, 2, 10, 10), (3, 2, 3, 3), (3,)]),
    )
    opcheck("global_avg_pool", T.global_avg_pool, three([(3, 4, 4)], [(2, 3, 5, 5)], [(6, 2, 2)]))
    opcheck("softmax", lambda x: T.softmax(x, axis=-1), three([(3, 4)], [(5,)], [(2, 3, 4)]))
    # relu checked away from the kink at 0
    def relu_shifted(x):
        return T.relu(x)

    def relu_check():
        worst = 0.0
        for shape in [(3, 4), (6,), (2, 3, 2)]:
            a = rng.standard_normal(shape)
            a = np.where(np.abs(a) < 0.2, np.sign(a) * 0.5 + a, a)
            w = _readout_weights(rng, shape)
            worst = max(worst, check_gradient(lambda t: scalar_readout(relu_shifted(t), w), [a]))
        return worst

    checks.append(("relu", relu_check, REL_TOL))

    def ce_check():
        worst = 0.0
        for n, k in [(4, 3), (6, 5), (3, 13)]:
            logits = rng.standard_normal((n, k))
            labels = rng.integers(0, k, size=n)
            worst = max(worst, check_gradient(lambda t: T.cross_entropy(t, labels), [logits]))
        return worst

    checks.append(("cross_entropy", ce_check, REL_TOL))

    def sl1_check():
        worst = 0.0
        for shape in [(3, 4), (8,), (2, 2, 3)]:
            pred = rng.standard_normal(shape)
            target = pred + rng.uniform(0.1, 0.8, size=shape) * rng.choice([-1.0, 1.0], size=shape)
            worst = max(worst, check_gradient(lambda p, t: T.smooth_l1(p, t), [pred, target]))
            far = pred + rng.uniform(1.3, 3.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
            worst = max(worst, check_gradient(lambda p, t: T.smooth_l1(p, t), [pred, far]))
        return worst

    checks.append(("smooth_l1", sl1_check, REL_TOL))

    def bce_check():
        worst = 0.0
        for shape in [(6,), (3, 4), (2, 5)]:
            z = rng.standard_normal(shape)
            t = rng.integers(0, 2, size=shape).astype(np.float64)
            worst = max(worst, check_gradient(lambda lt: T.bce_with_logits(lt, t), [z]))
        return worst

    checks.append(("bce_with_logits", bce_check, REL_TOL))
    return checks


def _module_checks(rng):
    """Gradient checks through the attention, pooling and head modules."""
    from . import tensor as T
    from .attention import DenseCrossAttention, attend, similarity
    from .detector import DetectorConfig, FewShotDetector
    from .roi import BranchAttention, MultiScalePooler, RoIBox, resize_bilinear, roi_align

    checks = []

    def sim_check():
        worst = 0.0
        for hq, hs in [(3, 4), (2, 2), (4, 3)]:
            kq = rng.standard_normal((4, hq, hq))
            ks = rng.standard_normal((4, hs, hs))
            pw = rng.standard_normal((4, 4))
            ppw = rng.standard_normal((4, 4))
            w = _readout_weights(rng, (hq * hq, hs * hs))
            worst = max(
                worst,
                check_gradient(lambda a, b, c, d: scalar_readout(similarity(a, b, c, d), w), [kq, ks, pw, ppw]),
            )
        return worst

    checks.append(("attention.similarity", sim_check, REL_TOL))

    def attend_check():
        worst = 0.0
        for m, n in [(3, 4), (5, 2), (2, 6)]:
            sim = rng.standard_normal((m, n))
            w = _readout_weights(rng, (m, n))
            worst = max(worst, check_gradient(lambda s: scalar_readout(attend(s).w, w), [sim]))
        return worst

    checks.append(("attention.attend", attend_check, REL_TOL))

    def distill_check():
        worst = 0.0
        for c, hq, hs, n in [(16, 3, 3, 2), (8, 2, 4, 1), (16, 4, 2, 3)]:
            drd = DenseCrossAttention("drd", c, np.random.default_rng(11), dtype=np.float64)
            fq = rng.standard_normal((c, hq, hq))
            fs = rng.standard_normal((n, c, hs, hs))
            w = _readout_weights(rng, (c, hq, hq))

            def fwd(a, b):
                return scalar_readout(drd.refine(a, b), w)

            worst = max(worst, check_gradient(fwd, [fq, fs], max_entries=150))
            for p in drd.parameters():  # grads of the feature check would double-count
                p.tensor.grad = None
            # and w.r.t. the learned 1x1 similarity transforms phi / phi'
            with Tape() as tape:
                loss = scalar_readout(drd.refine(Tensor(fq), Tensor(fs)), w)
            tape.backward(loss)
            for p in (drd.phi, drd.phi_prime):
                arr = p.tensor.data.copy()

                def f(x, p=p, arr=arr):
                    p.tensor.data = x
                    val = scalar_readout(drd.refine(Tensor(fq), Tensor(fs)), w).item()
                    p.tensor.data = arr.copy()
                    return val

                num = numeric_grad(f, arr.copy(), entries=_entry_sample(arr.size, 120))
                worst = max(worst, max_rel_error(p.tensor.grad, num))
                p.tensor.grad = None
        return worst

    checks.append(("attention.distill", distill_check, REL_TOL))

    def roi_align_check():
        worst = 0.0
        for c, h in [(3, 8), (2, 10), (4, 6)]:
            feat = rng.standard_normal((c, h, h))
            box = RoIBox(1.3, 2.1, h - 2.2, h - 1.4)
            w = _readout_weights(rng, (c, 4, 4))
            worst = max(
                worst,
                check_gradient(
                    lambda f: scalar_readout(roi_align(f, box, 4, spatial_scale=1.0)[0], w), [feat]
                ),
            )
        return worst

    checks.append(("roi.roi_align", roi_align_check, REL_TOL))

    def resize_check():
        worst = 0.0
        for r, t in [(4, 8), (12, 8), (3, 5)]:
            m = rng.standard_normal((2, r, r))
            w = _readout_weights(rng, (2, t, t))
            worst = max(worst, check_gradient(lambda x: scalar_readout(resize_bilinear(x, t), w), [m]))
        return worst

    checks.append(("roi.resize_bilinear", resize_check, REL_TOL))

    def branch_check():
        worst = 0.0
        for c in (8, 16, 8):
            branch = BranchAttention("attn", c, np.random.default_rng(5), dtype=np.float64)
            pooled = rng.standard_normal((c, 4, 4))
            with Tape() as tape:
                logit = branch.logit(Tensor(pooled[None]))
            tape.backward(logit)
            for p in branch.parameters():
                arr = p.tensor.data.copy()

                def f(x, p=p, arr=arr):
                    p.tensor.data = x
                    val = branch.logit(Tensor(pooled[None])).item()
                    p.tensor.data = arr.copy()
                    return val

                num = numeric_grad(f, arr.copy(), entries=_entry_sample(arr.size, 120))
                worst = max(worst, max_rel_error(p.tensor.grad, num))
                p.tensor.grad = None
        return worst

    checks.append(("roi.branch_weight", branch_check, REL_TOL))

    def aggregate_check():
        worst = 0.0
        pooler = MultiScalePooler("cfa", 8, np.random.default_rng(7), dtype=np.float64)
        feat = rng.standard_normal((8, 10, 10))
        box = RoIBox(2.0, 1.5, 8.5, 9.0)
        w = _readout_weights(rng, (8, 8, 8))
        worst = max(
            worst,
            check_gradient(lambda f: scalar_readout(pooler.aggregate(f, box).fused, w), [feat], max_entries=200),
        )
        for p in pooler.parameters():  # grads of the feature check would double-count
            p.tensor.grad = None
        with Tape() as tape:
            loss = scalar_readout(pooler.aggregate(Tensor(feat), box).fused, w)
        tape.backward(loss)
        for p in pooler.parameters():
            arr = p.tensor.data.copy()

            def f(x, p=p, arr=arr):
                p.tensor.data = x
                val = scalar_readout(pooler.aggregate(Tensor(feat), box).fused, w).item()
                p.tensor.data = arr.copy()
                return val

            num = numeric_grad(f, arr.copy(), entries=_entry_sample(arr.size, 120))
            worst = max(worst, max_rel_error(p.tensor.grad, num))
            p.tensor.grad = None
        return worst

    checks.append(("roi.aggregate", aggregate_check, REL_TOL))

    def roi_head_check():
        cfg = DetectorConfig(feature_dim=16, stage_channels=(8, 16, 16, 16), num_classes=4, head_hidden=64)
        model = FewShotDetector(cfg, seed=3, dtype=np.float64)
        fused = rng.standard_normal((2, 16, 8, 8))
        labels = np.array([1, cfg.num_classes])
        worst = 0.0
        with Tape() as tape:
            logits, deltas = model.roi_head(Tensor(fused))
            loss = T.add(T.cross_entropy(logits, labels), T.tsum(T.mul(deltas, deltas)))
        tape.backward(loss)
        for p in model.roi_head.parameters():
            arr = p.tensor.data.copy()

            def f(x, p=p, arr=arr):
                p.tensor.data = x
                lg, dl = model.roi_head(Tensor(fused))
                val = T.cross_entropy(lg, labels).item() + float((dl.data ** 2).sum())
                p.tensor.data = arr.copy()
                return val

            num = numeric_grad(f, arr.copy(), entries=_entry_sample(arr.size, 120))
            worst = max(worst, max_rel_error(p.tensor.grad, num))
            p.tensor.grad = None
        return worst

    checks.append(("detector.roi_head", roi_head_check, REL_TOL))
    return checks


def gradcheck_all(seed=0, corrupt_op=None):
    """Run every registered gradient check; returns a list of CheckResult.

    ``corrupt_op`` is a test hook: the named check's measured error is
    inflated past tolerance, simulating a broken backward rule.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, run, tol in _tensor_op_checks(rng) + _module_checks(rng):
        err = run()
        if corrupt_op == name:
            err = max(err, 1.0)
        results.append(CheckResult(name, err, tol))
    return results


def format_report(results):
    lines = ["op                          max rel err   tolerance   status"]
    for r in results:
        lines.append(f"{r.name:<28}{r.max_rel_err:>11.3e}{r.tolerance:>12.1e}   {'pass' if r.passed else 'FAIL'}")
    npass = sum(r.passed for r in results)
    lines.append(f"{npass}/{len(results)} checks passed")
    return "\n".join(lines)
