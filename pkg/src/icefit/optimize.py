"""Quasi-Newton training of damage-rate closures with failed-solve handling.

Both optimizers treat an unsolvable trial point as carrying the sentinel
loss: the line search (or trust region) then backs the step off without ever
requesting a gradient there, which reproduces the "back out of bad parameter
regions" behavior the failed-solve sentinel is designed for.

``bfgs_minimize`` is dense BFGS with a cubic-interpolation line search
enforcing the strong Wolfe conditions; ``trust_region_bfgs_minimize`` keeps a
damped direct Hessian approximation and takes dogleg steps inside an adaptive
radius.  Both record an iteration trace and one of four termination reasons:
``gradient_tol``, ``step_stall``, ``max_iter``, ``line_search_failure``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import loss_gradient
from .errors import ContractViolation
from .network import (
    MlpParams,
    NetworkRate,
    detect_constant_collapse,
    feasible_init,
    mlp_init,
)
from .observers import (
    InvariantDomainGrid,
    LossSpec,
    experimental_loss,
    invariant_loss,
    invariant_rmse,
)

TERMINATIONS = ("gradient_tol", "step_stall", "max_iter", "line_search_failure")


@dataclass
class OptimSettings:
    gtol: float = 1e-8  # scaled by (1 + |loss|)
    step_tol: float = 1e-12  # scaled by (1 + |x|)
    max_iter: int = 500
    c1: float = 1e-4
    c2: float = 0.9
    max_bracket: int = 20
    max_zoom: int = 25
    tr_init_radius: float = 1.0
    tr_max_radius: float = 100.0
    tr_eta: float = 1e-4


@dataclass
class RunRecord:
    """One optimization run: hyperparameters, trace, and final metrics."""

    shape: tuple = ()
    activation: str = ""
    optimizer: str = "bfgs"
    observer: str = ""
    noise: float = 0.0
    seed: int = 0
    feasible_alpha: float = 1.0
    init_loss: float = np.nan
    final_loss: float = np.nan
    init_invariant_loss: float = np.nan
    final_invariant_loss: float = np.nan
    init_invariant_rmse: float = np.nan
    final_invariant_rmse: float = np.nan
    final_gradient_norm: float = np.nan
    termination: str = ""
    collapsed: bool = False
    n_iterations: int = 0
    n_loss_evals: int = 0
    n_grad_evals: int = 0
    n_failed_solves: int = 0
    trace: list = field(default_factory=list)
    final_params: list = field(default_factory=list)
    layer_sizes: tuple = ()

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["shape"] = list(self.shape)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d) -> "RunRecord":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", ()))
        d["layer_sizes"] = tuple(d.get("layer_sizes", ()))
        return cls(**d)


class ObjectiveAdapter:
    """Loss/gradient closure over the PDE solve with sentinel substitution.

    Evaluations are cached by parameter bytes so a line search asking for the
    value and then the derivative at the same point runs one forward solve.
    The gradient path is only ever taken at points whose forward solve
    converged; a failed trial returns the sentinel loss and no gradient.
    """

    def __init__(self, sim, stress, rate: NetworkRate, spec: LossSpec, obs,
                 initial_guess=None, continuation=False):
        self.sim = sim
        self.stress = stress
        self.rate = rate
        self.spec = spec
        self.obs = obs
        self.initial_guess = initial_guess
        self.continuation = continuation
        self.n_loss = 0
        self.n_grad = 0
        self.n_failed = 0
        self._cache_key = None
        self._cache = None

    def _evaluate(self, theta, need_grad):
        key = np.asarray(theta, dtype=float).tobytes()
        if self._cache_key == key:
            cached = self._cache
            if not need_grad or cached.gradient is not None or not cached.solved:
                return cached
        self.rate.set_params(theta)
        if need_grad:
            self.n_grad += 1
            res = loss_gradient(
                self.sim, self.stress, self.rate, self.spec, self.obs,
                initial_guess=self.initial_guess,
                continuation=self.continuation,
            )
        else:
            self.n_loss += 1
            outcome = self.sim.solve_forward(
                self.stress, self.rate, initial_guess=self.initial_guess,
                continuation=self.continuation,
            )
            if outcome.converged:
                val = experimental_loss(self.sim, outcome.state, self.obs, self.spec)
                res = _Eval(val, None, True)
            else:
                res = _Eval(self.spec.failed_solve_loss, None, False)
        if not res.solved:
            self.n_failed += 1
        self._cache_key = key
        self._cache = res
        return res

    def loss(self, theta):
        res = self._evaluate(theta, need_grad=False)
        return res.loss, res.solved

    def loss_and_grad(self, theta):
        res = self._evaluate(theta, need_grad=True)
        if not res.solved:
            return res.loss, None, False
        return res.loss, res.gradient, True


@dataclass
class _Eval:
    loss: float
    gradient: np.ndarray | None
    solved: bool


def _cubic_min(a, fa, dfa, b, fb, c, fc):
    """Minimizer of the cubic through (a, fa) with slope dfa, (b, fb), (c, fc)."""
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        db, dc = b - a, c - a
        denom = (db * dc) ** 2 * (db - dc)
        t1 = fb - fa - dfa * db
        t2 = fc - fa - dfa * dc
        A = (dc**2 * t1 - db**2 * t2) / denom
        B = (-(dc**3) * t1 + db**3 * t2) / denom
        radical = B * B - 3.0 * A * dfa
        if radical < 0 or A == 0:
            return None
        xmin = a + (-B + np.sqrt(radical)) / (3.0 * A)
    return xmin if np.isfinite(xmin) else None


def _quad_min(a, fa, dfa, b, fb):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        db = b - a
        denom = 2.0 * (fb - fa - dfa * db)
        if denom == 0.0 or not np.isfinite(denom):
            return None
        xmin = a - dfa * db * db / denom
    return xmin if np.isfinite(xmin) else None


def _zoom(phi, derphi, a_lo, a_hi, f_lo, f_hi, d_lo, f0, d0, c1, c2, max_zoom):
    """Nocedal-Wright zoom: cubic, then quadratic, then bisection.

    Sentinel (failed-solve) values always land on the high side, so their
    derivative is never requested.  Returns (alpha, f, wolfe_ok); when no
    strong-Wolfe point is found, falls back to the best simple-decrease
    point, and to (None, None, False) if there is none.
    """
    a_rec, f_rec = 0.0, f0
    for j in range(max_zoom):
        delta = a_hi - a_lo
        lo, hi = (a_lo, a_hi) if delta > 0 else (a_hi, a_lo)
        a_j = None
        if np.isfinite(f_hi) and j > 0:
            a_j = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, a_rec, f_rec)
            if a_j is not None and not (
                lo + 0.2 * abs(delta) <= a_j <= hi - 0.2 * abs(delta)
            ):
                a_j = None
        if a_j is None and np.isfinite(f_hi):
            a_j = _quad_min(a_lo, f_lo, d_lo, a_hi, f_hi)
            if a_j is not None and not (
                lo + 0.1 * abs(delta) <= a_j <= hi - 0.1 * abs(delta)
            ):
                a_j = None
        if a_j is None:
            a_j = a_lo + 0.5 * delta
        f_j = phi(a_j)
        if f_j > f0 + c1 * a_j * d0 or f_j >= f_lo:
            a_rec, f_rec = a_hi, f_hi
            a_hi, f_hi = a_j, f_j
        else:
            d_j = derphi(a_j)
            if abs(d_j) <= -c2 * d0:
                return a_j, f_j, True
            if d_j * (a_hi - a_lo) >= 0:
                a_rec, f_rec = a_hi, f_hi
                a_hi, f_hi = a_lo, f_lo
            else:
                a_rec, f_rec = a_lo, f_lo
            a_lo, f_lo, d_lo = a_j, f_j, d_j
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    if f_lo < f0:
        return a_lo, f_lo, False
    return None, None, False


def _wolfe_line_search(phi, derphi, f0, d0, settings: OptimSettings):
    """Strong-Wolfe step; returns (alpha, f_alpha, wolfe_ok) or (None, ..)."""
    if d0 >= 0:
        return None, None, False
    a_prev, f_prev = 0.0, f0
    d_prev = d0
    a = 1.0
    for i in range(settings.max_bracket):
        f_a = phi(a)
        if f_a > f0 + settings.c1 * a * d0 or (f_a >= f_prev and i > 0):
            return _zoom(
                phi, derphi, a_prev, a, f_prev, f_a, d_prev, f0, d0,
                settings.c1, settings.c2, settings.max_zoom,
            )
        d_a = derphi(a)
        if abs(d_a) <= -settings.c2 * d0:
            return a, f_a, True
        if d_a >= 0:
            return _zoom(
                phi, derphi, a, a_prev, f_a, f_prev, d_a, f0, d0,
                settings.c1, settings.c2, settings.max_zoom,
            )
        a_prev, f_prev, d_prev = a, f_a, d_a
        a = min(2.0 * a, 64.0)
        if a == a_prev:
            break
    return None, None, False


def bfgs_minimize(objective, x0, settings: OptimSettings | None = None) -> RunRecord:
    """Dense BFGS with a strong-Wolfe cubic line search.

    A trial point whose forward solve fails carries the sentinel loss, so the
    sufficient-decrease test rejects it and the search backs off; gradients
    are only evaluated at points that satisfy sufficient decrease (hence
    solvable ones).
    """
    settings = settings or OptimSettings()
    x = np.asarray(x0, dtype=float).copy()
    record = RunRecord(optimizer="bfgs")
    f, g, solved = objective.loss_and_grad(x)
    if not solved:
        raise ContractViolation("initial point must be solvable (use feasible_init)")
    n = x.size
    H = np.eye(n)
    record.init_loss = f
    record.trace.append(
        {"iteration": 0, "loss": f, "grad_norm": float(np.linalg.norm(g)),
         "step_norm": 0.0}
    )
    termination = "max_iter"
    can_reset = False  # becomes True once H carries curvature information
    for it in range(1, settings.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= settings.gtol * (1.0 + abs(f)):
            termination = "gradient_tol"
            break
        p = -H @ g
        d0 = float(p @ g)
        if d0 >= 0:  # safeguard: reset to steepest descent
            H = np.eye(n)
            can_reset = False
            p = -g
            d0 = float(p @ g)

        grad_new = [None]

        def phi(a):
            val, _ = objective.loss(x + a * p)
            return val

        def derphi(a):
            val, grad, ok = objective.loss_and_grad(x + a * p)
            if not ok:
                return np.inf
            grad_new[0] = grad
            return float(grad @ p)

        alpha, f_new, wolfe_ok = _wolfe_line_search(phi, derphi, f, d0, settings)
        if alpha is None:
            if can_reset:
                # stale curvature can poison the search direction; retry once
                # from a fresh steepest-descent model before giving up
                H = np.eye(n)
                can_reset = False
                continue
            termination = "line_search_failure"
            break
        can_reset = True
        if grad_new[0] is None or not wolfe_ok:
            _, grad_here, ok = objective.loss_and_grad(x + alpha * p)
            if not ok:
                termination = "line_search_failure"
                break
            grad_new[0] = grad_here
        s = alpha * p
        y = grad_new[0] - g
        step_norm = float(np.linalg.norm(s))
        x = x + s
        f, g = f_new, grad_new[0]
        record.trace.append(
            {"iteration": it, "loss": f, "grad_norm": float(np.linalg.norm(g)),
             "step_norm": step_norm}
        )
        sy = float(s @ y)
        if it == 1 and sy > 0:
            H *= sy / float(y @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            I = np.eye(n)
            V = I - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        if step_norm <= settings.step_tol * (1.0 + float(np.linalg.norm(x))):
            # report convergence rather than stalling when both hold
            if float(np.linalg.norm(g)) <= settings.gtol * (1.0 + abs(f)):
                termination = "gradient_tol"
            else:
                termination = "step_stall"
            break
    record.termination = termination
    record.final_loss = f
    record.final_gradient_norm = float(np.linalg.norm(g))
    record.n_iterations = len(record.trace) - 1
    record.final_params = x.tolist()
    return record


def _dogleg(B, g, radius):
    """Dogleg step for model m(p) = f + g.p + p.B.p/2 inside the radius."""
    p_newton = -np.linalg.solve(B, g)
    if np.linalg.norm(p_newton) <= radius:
        return p_newton
    gBg = float(g @ B @ g)
    gnorm = float(np.linalg.norm(g))
    if gBg <= 0:
        return -radius / gnorm * g
    p_cauchy = -(gnorm**2 / gBg) * g
    pc_norm = float(np.linalg.norm(p_cauchy))
    if pc_norm >= radius:
        return -radius / gnorm * g
    d = p_newton - p_cauchy
    a = float(d @ d)
    b = 2.0 * float(p_cauchy @ d)
    c = pc_norm**2 - radius**2
    tau = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return p_cauchy + tau * d


def trust_region_bfgs_minimize(
    objective, x0, settings: OptimSettings | None = None
) -> RunRecord:
    """Dogleg trust-region with a damped BFGS Hessian approximation.

    The radius shrinks on poor agreement and on failed-solve trial points; no
    trial point is ever evaluated outside the current radius.
    """
    settings = settings or OptimSettings()
    x = np.asarray(x0, dtype=float).copy()
    record = RunRecord(optimizer="trust_region_bfgs")
    f, g, solved = objective.loss_and_grad(x)
    if not solved:
        raise ContractViolation("initial point must be solvable (use feasible_init)")
    n = x.size
    B = np.eye(n)
    radius = settings.tr_init_radius
    record.init_loss = f
    record.trace.append(
        {"iteration": 0, "loss": f, "grad_norm": float(np.linalg.norm(g)),
         "step_norm": 0.0}
    )
    termination = "max_iter"
    accepted = 0
    for it in range(1, settings.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= settings.gtol * (1.0 + abs(f)):
            termination = "gradient_tol"
            break
        if radius < 1e-14:
            termination = "line_search_failure"
            break
        p = _dogleg(B, g, radius)
        pred = -(float(g @ p) + 0.5 * float(p @ B @ p))
        if pred <= 0:
            B = np.eye(n)
            radius *= 0.25
            continue
        f_trial, trial_solved = objective.loss(x + p)
        rho = (f - f_trial) / pred if trial_solved else -np.inf
        pnorm = float(np.linalg.norm(p))
        if rho < 0.25:
            radius *= 0.25
        elif rho > 0.75 and pnorm >= 0.99 * radius:
            radius = min(2.0 * radius, settings.tr_max_radius)
        if rho > settings.tr_eta:
            _, g_new, ok = objective.loss_and_grad(x + p)
            if not ok:
                termination = "line_search_failure"
                break
            s = p
            y = g_new - g
            Bs = B @ s
            sBs = float(s @ Bs)
            sy = float(s @ y)
            if sy < 0.2 * sBs:  # Powell damping keeps B positive definite
                theta_d = 0.8 * sBs / (sBs - sy)
                y = theta_d * y + (1.0 - theta_d) * Bs
                sy = float(s @ y)
            if sy > 1e-12:
                B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            x = x + p
            f, g = f_trial, g_new
            accepted += 1
            record.trace.append(
                {"iteration": it, "loss": f,
                 "grad_norm": float(np.linalg.norm(g)), "step_norm": pnorm}
            )
            if pnorm <= settings.step_tol * (1.0 + float(np.linalg.norm(x))):
                if float(np.linalg.norm(g)) <= settings.gtol * (1.0 + abs(f)):
                    termination = "gradient_tol"
                else:
                    termination = "step_stall"
                break
    record.termination = termination
    record.final_loss = f
    record.final_gradient_norm = float(np.linalg.norm(g))
    record.n_iterations = len(record.trace) - 1
    record.final_params = x.tolist()
    return record


MINIMIZERS = {
    "bfgs": bfgs_minimize,
    "trust_region_bfgs": trust_region_bfgs_minimize,
}


def run_training(
    truth,
    shape,
    activation: str,
    optimizer: str,
    observer: str,
    noise: float,
    seed: int,
    settings: OptimSettings | None = None,
    sim=None,
) -> RunRecord:
    """One full training run against stored truth artifacts.

    Pipeline: seeded random network -> feasibility scaling -> quasi-Newton
    minimization of the observer loss -> final invariant metrics against the
    generating closure.  Deterministic given (truth, hyperparameters, seed).
    """
    from .closures import IsotropicStress
    from .fem import Simulation

    if optimizer not in MINIMIZERS:
        raise ContractViolation(f"unknown optimizer {optimizer!r}")
    config = truth.config
    sim = sim if sim is not None else Simulation(config)
    stress = IsotropicStress(config.glen_params(), config.damage_params())
    glen_w = sim.state_to_vector(truth.glen_state)
    obs = truth.observation(noise)
    spec = LossSpec(
        observer=observer, gamma_u=truth.gamma_u, gamma_p=truth.gamma_p
    )
    layer_sizes = (2, *tuple(int(s) for s in shape), 1)
    candidate = mlp_init(seed, layer_sizes, activation)

    def probe(params: MlpParams) -> bool:
        rate = NetworkRate(params, truth.scaler)
        return sim.solve_forward(stress, rate, initial_guess=glen_w).converged

    net_init = feasible_init(candidate, probe)
    cand_norm = float(np.linalg.norm(candidate.flatten()))
    alpha = (
        float(np.linalg.norm(net_init.flatten())) / cand_norm if cand_norm else 1.0
    )

    rate = NetworkRate(net_init, truth.scaler)
    adapter = ObjectiveAdapter(
        sim, stress, rate, spec, obs, initial_guess=glen_w
    )
    record = MINIMIZERS[optimizer](adapter, net_init.flatten(), settings)

    record.shape = tuple(int(s) for s in shape)
    record.activation = activation
    record.optimizer = optimizer
    record.observer = observer
    record.noise = float(noise)
    record.seed = int(seed)
    record.layer_sizes = layer_sizes
    record.feasible_alpha = alpha
    record.n_loss_evals = adapter.n_loss
    record.n_grad_evals = adapter.n_grad
    record.n_failed_solves = adapter.n_failed

    truth_rate = config.truth_rate()
    init_rate = NetworkRate(net_init, truth.scaler)
    final_net = MlpParams.from_flat(record.final_params, layer_sizes, activation)
    final_rate = NetworkRate(final_net, truth.scaler)
    record.init_invariant_loss, err0 = invariant_loss(
        init_rate, truth_rate, truth.grid
    )
    record.final_invariant_loss, err1 = invariant_loss(
        final_rate, truth_rate, truth.grid
    )
    mask = truth.grid.in_distribution
    record.init_invariant_rmse = invariant_rmse(err0, truth.grid, mask)
    record.final_invariant_rmse = invariant_rmse(err1, truth.grid, mask)
    record.collapsed = detect_constant_collapse(
        final_net, truth.scaler, truth.grid.nodes
    )
    return record


@dataclass
class SweepSpec:
    """Hyperparameter grid: one run per cell per seed."""

    shapes: tuple = ((2,), (2, 2), (2, 2, 2), (4,), (4, 4), (4, 4, 4))
    activations: tuple = ("tanh", "relu", "softplus")
    optimizers: tuple = ("bfgs", "trust_region_bfgs")
    observers: tuple = ("interior", "surface", "surface_plus_borehole")
    noises: tuple = (0.0, 0.01, 0.05)
    seeds: tuple = (0, 1, 2, 3, 4)

    def cells(self):
        for shape in self.shapes:
            for act in self.activations:
                for opt in self.optimizers:
                    for obs in self.observers:
                        for noise in self.noises:
                            for seed in self.seeds:
                                yield (tuple(shape), act, opt, obs, float(noise),
                                       int(seed))


def record_filename(cell) -> str:
    shape, act, opt, obs, noise, seed = cell
    shape_tag = "-".join(str(s) for s in shape)
    return f"run_{shape_tag}_{act}_{opt}_{obs}_{noise:.4f}_s{seed}.json"


def _run_cell(args):
    truth, cell, settings = args
    shape, act, opt, obs, noise, seed = cell
    return run_training(truth, shape, act, opt, obs, noise, seed, settings)


def run_sweep(
    truth,
    sweep: SweepSpec,
    out_dir=None,
    settings: OptimSettings | None = None,
    workers: int = 1,
) -> list:
    """Run (or resume) every sweep cell; persists one record per run.

    Existing record files are loaded instead of recomputed, so an
    interrupted sweep picks up where it stopped.  With ``workers > 1`` cells
    run in parallel processes; records are written only by this process.
    """
    import json as _json
    import os as _os

    cells = list(sweep.cells())
    records: dict = {}
    pending = []
    for cell in cells:
        if out_dir is not None:
            path = _os.path.join(out_dir, "runs", record_filename(cell))
            if _os.path.exists(path):
                with open(path) as fh:
                    records[cell] = RunRecord.from_dict(_json.load(fh))
                continue
        pending.append(cell)

    if out_dir is not None:
        _os.makedirs(_os.path.join(out_dir, "runs"), exist_ok=True)

    def persist(cell, record):
        if out_dir is None:
            return
        path = _os.path.join(out_dir, "runs", record_filename(cell))
        with open(path, "w") as fh:
            _json.dump(record.to_dict(), fh)
            fh.write("\n")

    if workers > 1 and len(pending) > 1:
        import concurrent.futures as _fut

        with _fut.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_cell, (truth, cell, settings)): cell
                for cell in pending
            }
            for future in _fut.as_completed(futures):
                cell = futures[future]
                record = future.result()
                records[cell] = record
                persist(cell, record)
    else:
        sim = None
        if pending:
            from .fem import Simulation

            sim = Simulation(truth.config)
        for cell in pending:
            record = run_training(truth, *cell, settings=settings, sim=sim)
            records[cell] = record
            persist(cell, record)
    return [records[cell] for cell in cells]
