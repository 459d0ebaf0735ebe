"""Dense convex QP solver and a branch-and-bound layer for indicator binaries.

The QP solver is a primal active-set method over

    min 0.5 x'Hx + g'x   s.t.  Aeq x = beq,  Ain x <= bin

with H symmetric positive semidefinite.  Feasibility is restored first by
a least-squares phase over slack variables on the initially violated
rows.  Singular reduced Hessians (flat directions) are handled by
stepping along a zero-curvature descent ray to the nearest blocking
constraint, and anti-cycling uses Bland-style smallest-index rules for
both adding and dropping constraints.

The MIQP layer solves problems whose only integrality is one binary per
(interval, polyhedron) pair: activating a binary enforces a block of
inequality rows, and each interval must activate at least one.  Binaries
enter the relaxations through big-M rows and are branched best-first on
the most fractional one.
"""

from __future__ import annotations

import heapq
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as scipy_qr

FEAS_TOL = 1e-9
STEP_TOL = 1e-11
MULT_TOL = 1e-9


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    Aeq: np.ndarray = None
    beq: np.ndarray = None
    Ain: np.ndarray = None
    bin: np.ndarray = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        n = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        self.Aeq = np.zeros((0, n)) if self.Aeq is None else np.asarray(self.Aeq, dtype=float).reshape(-1, n)
        self.beq = np.zeros(0) if self.beq is None else np.asarray(self.beq, dtype=float).reshape(-1)
        self.Ain = np.zeros((0, n)) if self.Ain is None else np.asarray(self.Ain, dtype=float).reshape(-1, n)
        self.bin = np.zeros(0) if self.bin is None else np.asarray(self.bin, dtype=float).reshape(-1)
        if self.Aeq.shape[0] != self.beq.shape[0] or self.Ain.shape[0] != self.bin.shape[0]:
            raise ValueError("constraint matrix/vector sizes disagree")
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise ValueError("H must be symmetric")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def cost(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass
class QpResult:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    lam_eq: np.ndarray | None = None
    lam_in: np.ndarray | None = None
    iterations: int = 0
    working_set: list = field(default_factory=list)


class _Unbounded(Exception):
    pass


def _nullspace(a: np.ndarray) -> np.ndarray:
    n = a.shape[1]
    if a.shape[0] == 0:
        return np.eye(n)
    # pivoted QR: reliable rank detection at a fraction of the SVD cost
    q, r, _ = scipy_qr(a.T, mode="full", pivoting=True)
    k = min(a.shape)
    diag = np.abs(np.diag(r)[:k]) if k else np.zeros(0)
    top = diag[0] if diag.size else 0.0
    tol = max(max(a.shape) * np.finfo(float).eps * top, 1e-13)
    rank = int(np.sum(diag > tol))
    return q[:, rank:]


def _active_set(H, g, aeq, beq, ain, bin_, x, work, max_iter):
    """Primal active-set loop from a feasible point.

    ``work`` is the initial working set (indices into ``ain``), assumed
    active at ``x``.  Returns (x, lam_eq, lam_in, iterations, work).
    """
    n_in = ain.shape[0]
    in_w = np.zeros(n_in, dtype=bool)
    work = sorted(set(work))
    for i in work:
        in_w[i] = True

    def blocking(direction, limit):
        """Largest feasible step along direction and the Bland blocker."""
        ad = ain @ direction
        slack = bin_ - ain @ x
        cand = (~in_w) & (ad > 1e-12)
        if not cand.any():
            return limit, None
        idx = np.flatnonzero(cand)
        ratios = np.maximum(slack[idx], 0.0) / ad[idx]
        amax = ratios.min()
        if amax >= limit:
            return limit, None
        hit = idx[ratios <= amax + 1e-12 * max(1.0, amax)]
        return amax, int(hit.min())

    lam_eq = np.zeros(aeq.shape[0])
    lam_in = np.zeros(n_in)
    it = 0
    while it < max_iter:
        it += 1
        a_act = np.vstack([aeq, ain[work]]) if work else aeq
        grad = H @ x + g
        z = _nullspace(a_act)
        ray = None
        p = np.zeros_like(x)
        if z.shape[1]:
            gr = z.T @ grad
            hr = z.T @ H @ z
            w, v = np.linalg.eigh(hr)
            ctol = 1e-9 * max(1.0, float(w[-1]) if w.size else 0.0)
            pos = w > ctol
            grn = v.T @ gr
            flat_grad = grn.copy()
            flat_grad[pos] = 0.0
            if np.max(np.abs(flat_grad), initial=0.0) > 1e-10 * (1.0 + np.max(np.abs(grad), initial=0.0)):
                y = -(v @ flat_grad)
                d = z @ y
                d /= np.linalg.norm(d)
                alpha, blocker = blocking(d, np.inf)
                if blocker is None:
                    raise _Unbounded
                x = x + alpha * d
                in_w[blocker] = True
                work = sorted(work + [blocker])
                continue
            y = np.zeros_like(grn)
            y[pos] = -grn[pos] / w[pos]
            p = z @ (v @ y)
        if np.max(np.abs(p), initial=0.0) <= STEP_TOL * (1.0 + np.max(np.abs(x), initial=0.0)):
            lam, *_ = np.linalg.lstsq(a_act.T, -grad, rcond=None)
            lam_eq = lam[: aeq.shape[0]]
            lam_w = lam[aeq.shape[0] :]
            bad = [work[i] for i in range(len(work)) if lam_w[i] < -MULT_TOL]
            if not bad:
                lam_in = np.zeros(n_in)
                for i, row in enumerate(work):
                    lam_in[row] = max(lam_w[i], 0.0)
                return x, lam_eq, lam_in, it, work
            drop = min(bad)
            in_w[drop] = False
            work = [i for i in work if i != drop]
            continue
        alpha, blocker = blocking(p, 1.0)
        x = x + alpha * p
        if blocker is not None:
            in_w[blocker] = True
            work = sorted(work + [blocker])
    raise RuntimeError("active-set iteration limit exceeded")


def solve_qp(problem: QpProblem, tol: float = 1e-8, x0=None, w0=None) -> QpResult:
    """Solve a convex QP.  Returns status "infeasible" when the phase-1
    residual exceeds ``tol``; otherwise the optimum with multipliers whose
    KKT residuals are well below ``tol``."""
    n = problem.n
    H, g = problem.H, problem.g

    # drop all-zero rows, rejecting contradictions they encode
    def clean(a, b, slackful):
        norms = np.max(np.abs(a), axis=1) if a.shape[0] else np.zeros(0)
        zero = norms < 1e-13
        if zero.any():
            bad = b[zero] < -tol if slackful else np.abs(b[zero]) > tol
            if bad.any():
                return None, None, None
        keep = np.flatnonzero(~zero)
        return a[keep], b[keep], keep

    aeq, beq, _ = clean(problem.Aeq, problem.beq, slackful=False)
    if aeq is None:
        return QpResult(status="infeasible")
    ain, bin_, keep_in = clean(problem.Ain, problem.bin, slackful=True)
    if ain is None:
        return QpResult(status="infeasible")

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if aeq.shape[0]:
        resid = beq - aeq @ x
        if np.max(np.abs(resid), initial=0.0) > 1e-12:
            corr, *_ = np.linalg.lstsq(aeq, resid, rcond=None)
            x = x + corr
        if np.max(np.abs(aeq @ x - beq), initial=0.0) > tol:
            return QpResult(status="infeasible")

    iterations = 0
    viol = ain @ x - bin_ if ain.shape[0] else np.zeros(0)
    bad = np.flatnonzero(viol > FEAS_TOL)
    if bad.size:
        x, extra_it, ok = _phase1(H.shape[0], aeq, beq, ain, bin_, x, bad, tol)
        iterations += extra_it
        if not ok:
            return QpResult(status="infeasible")

    work = []
    if w0:
        slack = bin_ - ain @ x
        kept = set(keep_in.tolist())
        remap = {orig: i for i, orig in enumerate(keep_in.tolist())}
        work = [remap[i] for i in w0 if i in kept and slack[remap[i]] <= 1e-9]

    max_iter = 200 + 30 * n + 2 * ain.shape[0]
    try:
        x, lam_eq, lam_in, it, work = _active_set(H, g, aeq, beq, ain, bin_, x, work, max_iter)
    except _Unbounded:
        raise RuntimeError("QP is unbounded below; feasible set must be bounded")
    iterations += it

    lam_in_full = np.zeros(problem.Ain.shape[0])
    lam_in_full[keep_in] = lam_in
    lam_eq_full = np.zeros(problem.Aeq.shape[0])
    nz = np.max(np.abs(problem.Aeq), axis=1) >= 1e-13 if problem.Aeq.shape[0] else np.zeros(0, bool)
    lam_eq_full[np.flatnonzero(nz)] = lam_eq
    return QpResult(
        status="optimal",
        x=x,
        objective=problem.cost(x),
        lam_eq=lam_eq_full,
        lam_in=lam_in_full,
        iterations=iterations,
        working_set=[int(keep_in[i]) for i in work],
    )


def _phase1(n, aeq, beq, ain, bin_, x, bad, tol):
    """Minimize squared slacks on the initially violated rows."""
    k = bad.size
    nn = n + k
    h1 = np.zeros((nn, nn))
    h1[n:, n:] = np.eye(k)
    g1 = np.zeros(nn)
    aeq1 = np.hstack([aeq, np.zeros((aeq.shape[0], k))])
    a_main = np.hstack([ain, np.zeros((ain.shape[0], k))])
    for i, r in enumerate(bad):
        a_main[r, n + i] = -1.0
    sneg = np.hstack([np.zeros((k, n)), -np.eye(k)])
    a1 = np.vstack([a_main, sneg])
    b1 = np.concatenate([bin_, np.zeros(k)])
    s0 = np.maximum(ain[bad] @ x - bin_[bad], 0.0)
    x1 = np.concatenate([x, s0])
    try:
        x1, _, _, it, _ = _active_set(h1, g1, aeq1, beq, a1, b1, x1, [], 200 + 30 * nn + 2 * a1.shape[0])
    except _Unbounded:
        return x, 0, False
    xf = x1[:n]
    worst = np.max(ain @ xf - bin_, initial=0.0)
    return xf, it, worst <= tol


# -- MIQP --------------------------------------------------------------------


@dataclass
class MiqpProblem:
    """Continuous base QP plus indicator row blocks gated by binaries.

    ``ind_owner[r]`` names the binary that activates inequality row r of
    ``ind_rows``; ``covers[i]`` lists the binaries of interval i, of which
    at least one must be active; ``big_m[r]`` relaxes row r when its
    binary is off.
    """

    base: QpProblem
    binaries: list
    ind_rows: np.ndarray
    ind_rhs: np.ndarray
    ind_owner: np.ndarray
    covers: list
    big_m: np.ndarray

    def __post_init__(self):
        self.ind_rows = np.asarray(self.ind_rows, dtype=float).reshape(-1, self.base.n)
        self.ind_rhs = np.asarray(self.ind_rhs, dtype=float).reshape(-1)
        self.ind_owner = np.asarray(self.ind_owner, dtype=int).reshape(-1)
        self.big_m = np.asarray(self.big_m, dtype=float).reshape(-1)
        seen = [bid for cover in self.covers for bid in cover]
        if sorted(seen) != list(range(len(self.binaries))):
            raise ValueError("every binary must appear in exactly one cover")
        if not (len(self.ind_rhs) == len(self.ind_owner) == len(self.big_m) == self.ind_rows.shape[0]):
            raise ValueError("indicator row arrays disagree in length")

    @property
    def n_continuous(self) -> int:
        return self.base.n

    @property
    def n_binary(self) -> int:
        return len(self.binaries)


@dataclass
class MiqpSolution:
    status: str  # "optimal" | "infeasible" | "timeout"
    x: np.ndarray | None = None
    b: np.ndarray | None = None
    assignment: np.ndarray | None = None
    objective: float | None = None
    nodes_explored: int = 0


def _relaxation(problem: MiqpProblem):
    """Joint (continuous, binary) QP with big-M rows and binary boxes."""
    n, nb = problem.n_continuous, problem.n_binary
    nv = n + nb
    H = np.zeros((nv, nv))
    H[:n, :n] = problem.base.H
    g = np.concatenate([problem.base.g, np.zeros(nb)])
    aeq = np.hstack([problem.base.Aeq, np.zeros((problem.base.Aeq.shape[0], nb))])
    beq = problem.base.beq

    blocks = [np.hstack([problem.base.Ain, np.zeros((problem.base.Ain.shape[0], nb))])]
    rhs = [problem.base.bin]
    if problem.ind_rows.shape[0]:
        gate = np.zeros((problem.ind_rows.shape[0], nb))
        gate[np.arange(problem.ind_rows.shape[0]), problem.ind_owner] = problem.big_m
        blocks.append(np.hstack([problem.ind_rows, gate]))
        rhs.append(problem.ind_rhs + problem.big_m)
    cover_rows = np.zeros((len(problem.covers), nv))
    for i, cover in enumerate(problem.covers):
        for bid in cover:
            cover_rows[i, n + bid] = -1.0
    blocks.append(cover_rows)
    rhs.append(-np.ones(len(problem.covers)))
    box = np.zeros((2 * nb, nv))
    box[np.arange(nb), n + np.arange(nb)] = 1.0
    box[nb + np.arange(nb), n + np.arange(nb)] = -1.0
    blocks.append(box)
    rhs.append(np.concatenate([np.ones(nb), np.zeros(nb)]))
    return QpProblem(H=H, g=g, Aeq=aeq, beq=beq, Ain=np.vstack(blocks), bin=np.concatenate(rhs))


def _bid_rows(problem: MiqpProblem):
    rows = [[] for _ in range(problem.n_binary)]
    for r, owner in enumerate(problem.ind_owner):
        rows[owner].append(r)
    return [np.asarray(r, dtype=int) for r in rows]


def _extract_assignment(problem: MiqpProblem, xc, bid_rows, tol_feas):
    """Try to complete the continuous point into an integral assignment.

    Returns the chosen binary per cover (lowest id wins) or None when some
    cover has no satisfiable block at the point.
    """
    resid = problem.ind_rows @ xc - problem.ind_rhs if problem.ind_rows.shape[0] else np.zeros(0)
    assignment = np.full(len(problem.covers), -1, dtype=int)
    for i, cover in enumerate(problem.covers):
        for bid in cover:
            rows = bid_rows[bid]
            if rows.size == 0 or np.max(resid[rows]) <= tol_feas:
                assignment[i] = bid
                break
        if assignment[i] < 0:
            return None
    return assignment


def solve_miqp(problem: MiqpProblem, budget: int = 20000, warm=None, tol_feas: float = 1e-7) -> MiqpSolution:
    """Best-first branch and bound over big-M relaxations (b in [0, 1]),
    branching on the most fractional binary, seeded by an optional warm
    interval assignment."""
    n, nb = problem.n_continuous, problem.n_binary
    relax = _relaxation(problem)
    bid_rows = _bid_rows(problem)
    cover_of = np.empty(nb, dtype=int)
    for i, cover in enumerate(problem.covers):
        for bid in cover:
            cover_of[bid] = i

    nodes = 0
    incumbent = None  # (objective, x, b, assignment)
    gap = lambda obj: 1e-9 * max(1.0, abs(obj))

    def node_qp(fix0, fix1, xstart, wstart):
        nonlocal nodes
        nodes += 1
        extra = []
        ebs = []
        for bid in fix0:
            row = np.zeros(relax.n)
            row[n + bid] = 1.0
            extra.append(row)
            ebs.append(0.0)
        for bid in fix1:
            row = np.zeros(relax.n)
            row[n + bid] = 1.0
            extra.append(row)
            ebs.append(1.0)
        aeq = np.vstack([relax.Aeq] + extra) if extra else relax.Aeq
        beq = np.concatenate([relax.beq, np.asarray(ebs)]) if extra else relax.beq
        sub = QpProblem(H=relax.H, g=relax.g, Aeq=aeq, beq=beq, Ain=relax.Ain, bin=relax.bin)
        if xstart is not None:
            # pin the fixed binaries in place so the equality projection does
            # not smear the correction over every variable
            xstart = np.asarray(xstart, dtype=float).copy()
            for bid in fix0:
                xstart[n + bid] = 0.0
            for bid in fix1:
                xstart[n + bid] = 1.0
        return solve_qp(sub, x0=xstart, w0=wstart)

    pi_to_bid = [{problem.binaries[bid][1]: bid for bid in cover} for cover in problem.covers]
    if warm is not None:
        warm = np.asarray(warm, dtype=int)
        warm_bids = []
        for i in range(len(problem.covers)):
            bid = pi_to_bid[i].get(int(warm[i]))
            if bid is None:
                raise ValueError("warm assignment names a polyhedron outside its cover")
            warm_bids.append(bid)
        fix1 = set(warm_bids)
        fix0 = set(range(nb)) - fix1
        res = node_qp(sorted(fix0), sorted(fix1), None, None)
        if res.status == "optimal":
            bvec = np.zeros(nb)
            bvec[sorted(fix1)] = 1.0
            incumbent = (res.objective, res.x[:n], bvec, np.asarray(warm_bids, dtype=int))
        if nodes >= budget:
            return _finish(problem, incumbent, "timeout", nodes)

    counter = 0
    heap = [(-np.inf, counter, (), (), None, None)]
    proven = False
    while heap:
        if nodes >= budget:
            return _finish(problem, incumbent, "timeout", nodes)
        bound_est, _, fix0, fix1, xstart, wstart = heapq.heappop(heap)
        if incumbent is not None and bound_est >= incumbent[0] - gap(incumbent[0]):
            proven = True
            break
        res = node_qp(list(fix0), list(fix1), xstart, wstart)
        if res.status != "optimal":
            continue
        bound = res.objective
        if incumbent is not None and bound >= incumbent[0] - gap(incumbent[0]):
            continue
        xc = res.x[:n]
        bvec = res.x[n:]
        assignment = _extract_assignment(problem, xc, bid_rows, tol_feas)
        if assignment is not None:
            incumbent = (bound, xc.copy(), bvec.copy(), assignment)
            continue
        frac = np.minimum(bvec, 1.0 - bvec)
        frac[list(fix0)] = -1.0
        frac[list(fix1)] = -1.0
        bid = int(np.argmax(frac))
        for child_fix0, child_fix1 in (
            (fix0 + (bid,), fix1),
            (fix0, fix1 + (bid,)),
        ):
            counter += 1
            heapq.heappush(
                heap, (bound, counter, child_fix0, child_fix1, res.x.copy(), list(res.working_set))
            )
    if incumbent is None:
        return MiqpSolution(status="infeasible", nodes_explored=nodes)
    return _finish(problem, incumbent, "optimal", nodes)


def _finish(problem, incumbent, status, nodes):
    if incumbent is None:
        return MiqpSolution(status=status if status != "optimal" else "infeasible", nodes_explored=nodes)
    obj, x, b, bids = incumbent
    assignment = np.array([problem.binaries[int(bid)][1] for bid in bids], dtype=int)
    return MiqpSolution(
        status=status,
        x=x,
        b=b,
        assignment=assignment,
        objective=obj,
        nodes_explored=nodes,
    )


# -- textual dump / load -------------------------------------------------------


def _write_matrix(out, name, m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    nz = np.argwhere(m != 0.0)
    out.write(f"matrix {name} {m.shape[0]} {m.shape[1]} {len(nz)}\n")
    for i, j in nz:
        out.write("%d %d %.17g\n" % (i, j, m[i, j]))


def _write_vector(out, name, v):
    v = np.asarray(v).reshape(-1)
    out.write(f"vector {name} {v.shape[0]}\n")
    if v.shape[0]:
        out.write(" ".join("%.17g" % x for x in v) + "\n")


def dump_miqp(problem: MiqpProblem) -> str:
    out = io.StringIO()
    out.write("miqp 1\n")
    out.write(f"sizes {problem.n_continuous} {problem.n_binary} {len(problem.covers)}\n")
    out.write("binaries\n")
    for ni, pi in problem.binaries:
        out.write(f"{ni} {pi}\n")
    _write_matrix(out, "H", problem.base.H)
    _write_vector(out, "g", problem.base.g)
    _write_matrix(out, "Aeq", problem.base.Aeq)
    _write_vector(out, "beq", problem.base.beq)
    _write_matrix(out, "Ain", problem.base.Ain)
    _write_vector(out, "bin", problem.base.bin)
    _write_matrix(out, "ind_rows", problem.ind_rows)
    _write_vector(out, "ind_rhs", problem.ind_rhs)
    _write_vector(out, "ind_owner", problem.ind_owner)
    _write_vector(out, "big_m", problem.big_m)
    out.write(f"covers {len(problem.covers)}\n")
    for cover in problem.covers:
        out.write(" ".join(str(b) for b in cover) + "\n")
    return out.getvalue()


def load_miqp(text: str) -> MiqpProblem:
    lines = text.splitlines()
    pos = 0

    def take():
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    if take().split()[0] != "miqp":
        raise ValueError("not a miqp dump")
    _, n, nb, ncov = take().split()
    n, nb, ncov = int(n), int(nb), int(ncov)
    if take() != "binaries":
        raise ValueError("expected binaries section")
    binaries = []
    for _ in range(nb):
        a, b = take().split()
        binaries.append((int(a), int(b)))

    def read_matrix():
        head = take().split()
        rows, cols, nnz = int(head[2]), int(head[3]), int(head[4])
        m = np.zeros((rows, cols))
        for _ in range(nnz):
            i, j, v = take().split()
            m[int(i), int(j)] = float(v)
        return m

    def read_vector():
        head = take().split()
        count = int(head[2])
        if count == 0:
            return np.zeros(0)
        return np.array([float(x) for x in take().split()])

    H = read_matrix()
    g = read_vector()
    aeq = read_matrix()
    beq = read_vector()
    ain = read_matrix()
    bin_ = read_vector()
    ind_rows = read_matrix()
    ind_rhs = read_vector()
    ind_owner = read_vector().astype(int)
    big_m = read_vector()
    head = take().split()
    covers = []
    for _ in range(int(head[1])):
        covers.append([int(x) for x in take().split()])
    base = QpProblem(H=H, g=g, Aeq=aeq, beq=beq, Ain=ain, bin=bin_)
    if ind_rows.shape == (0, 0) or ind_rows.size == 0:
        ind_rows = np.zeros((0, n))
    return MiqpProblem(
        base=base,
        binaries=binaries,
        ind_rows=ind_rows,
        ind_rhs=ind_rhs,
        ind_owner=ind_owner,
        covers=covers,
        big_m=big_m,
    )
