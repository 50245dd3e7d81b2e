"""Exhaustive WBF reference: enumerate every clustering, keep the greedy-feasible one.

Shares no code with the package beyond the input types. Arithmetic is exact
(``Fraction``), so it also pins down the fused coordinates independently of
floating-point evaluation order.
"""

from fractions import Fraction


def restricted_growth(n):
    """All set partitions of ``range(n)`` as restricted growth strings."""
    if n == 0:
        yield ()
        return

    def rec(prefix, top):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for c in range(top + 2):
            yield from rec(prefix + [c], max(top, c))

    yield from rec([0], 0)


def _coords(inst):
    return [Fraction(v) for v in (inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2)]


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _mean_box(members):
    ws = [Fraction(m.score) for m in members]
    if sum(ws) == 0:
        ws = [Fraction(1)] * len(members)
    total = sum(ws)
    cs = [_coords(m) for m in members]
    return [sum(w * c[k] for w, c in zip(ws, cs)) / total for k in range(4)]


def _feasible(order, assignment, tau):
    clusters = []  # member lists in creation order
    for inst, c in zip(order, assignment):
        ious = [_iou(_mean_box(ms), _coords(inst)) for ms in clusters]
        ok = [k for k, v in enumerate(ious) if v >= tau]
        if ok:
            best = max(ious[k] for k in ok)
            want = min(k for k in ok if ious[k] == best)
        else:
            want = len(clusters)
        if c != want:
            return None
        if c == len(clusters):
            clusters.append([])
        clusters[c].append(inst)
    return clusters


def _label(members):
    # score-weighted vote; ties go to the earliest (top-ranked) member holding a tied label
    tally = {}
    for m in members:
        tally[m.label] = tally.get(m.label, Fraction(0)) + Fraction(m.score)
    best = max(tally.values())
    return next(m.label for m in members if tally[m.label] == best)


def reference_wbf(instances, tau):
    """Returns ``[(members, fused_box, fused_score, label)]`` in creation order, all exact."""
    order = sorted(instances, key=lambda i: (-i.score, (i.box.x1, i.box.y1, i.box.x2, i.box.y2), i.label, i.view or ""))
    tau = Fraction(tau)
    found = [cl for a in restricted_growth(len(order)) if (cl := _feasible(order, a, tau)) is not None]
    if len(found) != 1:
        raise AssertionError(f"expected exactly one greedy-feasible clustering, found {len(found)}")
    return [(ms, _mean_box(ms), sum(Fraction(m.score) for m in ms) / len(ms), _label(ms)) for ms in found[0]]
