"""Penalized training of the control network: Monte-Carlo losses for analytic
and empirical targets, the iteration loop, evaluation, and penalty sweeps.

The loss is running-cost / penalty + a kernel term whose expectation is the
squared MMD between the terminal law and the target, up to a constant. The
running cost uses the squared control norm |u|^2, matching the control
objective the penalty limit recovers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamState, ControlNet, GradientError, Node, Tape, adam_step, backward
from .kernels import (
    EmpiricalMeasure,
    GaussianMixture,
    Kernel,
    double_integral,
    gram_sum,
    mean_embedding_batch,
    mmd_sq_analytic_target,
    mmd_sq_unbiased,
)
from .sde import (
    SdeModel,
    SimulationError,
    TimeGrid,
    normal_increments,
    sample_initial,
    stream_generator,
    uniform_block,
)

__all__ = [
    "SolverConfig",
    "LossReport",
    "LossGraph",
    "TrainResult",
    "EvalResult",
    "TrainingDiverged",
    "loss_analytic",
    "loss_empirical",
    "train",
    "evaluate",
    "lambda_sweep",
    "loss_reports_to_csv",
]

# stream layout within a seed: low indices are fixed purposes, training
# iterations advance in pairs from _STREAM_ITER_BASE, evaluation lives far away
_STREAM_NET = 0
_STREAM_INIT_A = 1
_STREAM_INIT_B = 2
_STREAM_TAU = 3
_STREAM_ITER_BASE = 8
_STREAM_EVAL_BASE = 1 << 48

_EVAL_CHUNK = 32768


class TrainingDiverged(RuntimeError):
    """Loss or state became non-finite; carries the last good parameters."""

    def __init__(self, message: str, iteration: int, theta: np.ndarray, reports: list):
        super().__init__(message)
        self.iteration = iteration
        self.theta = theta
        self.reports = reports


@dataclass(frozen=True)
class SolverConfig:
    """Everything a training run needs; fully determines the run given a seed."""

    penalty: float  # weight on the squared-MMD terminal term
    n_steps: int
    batch_paths: int  # spatial batch M_x
    batch_times: int  # time batch M_t
    iterations: int
    learning_rate: float
    seed: int
    kernel: Kernel
    target: GaussianMixture | EmpiricalMeasure
    mu0: object  # GaussianMixture | EmpiricalMeasure | atom vector
    model: SdeModel
    net_dims: list[int]
    grid: TimeGrid | None = None

    def __post_init__(self) -> None:
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")
        if self.batch_paths < 2:
            raise ValueError("spatial batch must be at least 2")
        if self.batch_times < 1:
            raise ValueError("time batch must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.net_dims[0] != 1 + self.model.d or self.net_dims[-1] != self.model.m:
            raise ValueError("net dims must map (t, x) to the noise dimension")

    def time_grid(self) -> TimeGrid:
        return self.grid if self.grid is not None else TimeGrid.uniform(self.n_steps)

    @property
    def analytic_target(self) -> bool:
        return isinstance(self.target, GaussianMixture)

    def target_constant(self) -> float:
        """The target-only constant completing the kernel term to squared MMD."""
        if self.analytic_target:
            return double_integral(self.kernel, self.target)
        y = self.target.samples
        m = y.shape[0]
        return gram_sum(self.kernel, y, y, exclude_diagonal=True) / (m * (m - 1))


@dataclass(frozen=True)
class LossReport:
    """One training iteration; loss == control_cost / penalty + mmd_term."""

    iteration: int
    loss: float
    control_cost: float  # Monte-Carlo estimate of the mean squared control norm
    mmd_term: float
    lambda_scaled: float  # penalty * (loss + target constant)
    wall_ms: float


@dataclass
class LossGraph:
    """A recorded loss, ready for one backward pass."""

    tape: Tape
    loss: Node
    leaves: list[Node]
    control_cost: float
    mmd_term: float


@dataclass
class TrainResult:
    net: ControlNet
    reports: list[LossReport]
    config: SolverConfig


@dataclass
class EvalResult:
    mmd_sq: float
    control_cost: float
    terminal: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)


def _tau_counts(cfg: SolverConfig, rng: np.random.Generator) -> np.ndarray:
    """Multiplicities of the sampled evaluation times over the grid points.

    Uniform grids sample uniformly over all N+1 points; non-uniform grids
    sample proportionally to trapezoid weights so the running-cost estimate
    stays a quadrature of the time integral.
    """
    grid = cfg.time_grid()
    n1 = grid.n_steps + 1
    if grid.is_uniform:
        idx = (rng.random(cfg.batch_times) * n1).astype(np.int64)
    else:
        dt = grid.deltas()
        w = np.empty(n1)
        w[0] = dt[0] / 2
        w[-1] = dt[-1] / 2
        w[1:-1] = (dt[:-1] + dt[1:]) / 2
        p = np.cumsum(w / w.sum())
        idx = np.searchsorted(p, rng.random(cfg.batch_times), side="right")
    return np.bincount(idx, minlength=n1)


def _sigma_step(model: SdeModel, dt: float):
    """Per-step multiplier applied to the control inside the tape rollout."""
    sig = model.diffusion_matrix()
    if model.d == model.m and np.allclose(sig, sig[0, 0] * np.eye(model.d)):
        return float(sig[0, 0]) * dt  # scalar fast path
    return sig * dt  # (d, m) matrix


def _rollout(
    tape: Tape,
    leaves: list[Node],
    net: ControlNet,
    cfg: SolverConfig,
    x0: np.ndarray,
    noise: np.ndarray,
    need_terminal_control: bool,
) -> tuple[list[Node], Node]:
    """Tape-recorded controlled Euler-Maruyama rollout.

    Returns the control nodes at every grid time that may be sampled and the
    terminal state node. Noise has shape (M, N, m) of standard normals.
    """
    model = cfg.model
    grid = cfg.time_grid()
    dts = grid.deltas()
    sig = model.diffusion_matrix()
    sqdt = np.sqrt(dts)
    x = tape.leaf(x0)
    controls: list[Node] = []
    for i in range(grid.n_steps):
        t = float(grid.times[i])
        dt = float(dts[i])
        u = net.forward_tape(tape, leaves, t, x)
        controls.append(u)
        mult = _sigma_step(model, dt)
        if isinstance(mult, float):
            incr = tape.mul(u, mult)
        else:
            incr = tape.matmul_t_const(u, mult)  # u @ (sig*dt).T -> (M, d)
        # constant part of the step: base drift and diffusion noise
        const_part = (noise[:, i, :] * sqdt[i]) @ sig.T
        if model.drift is not None:
            if isinstance(model.drift, tuple):
                slope, intercept = model.drift
                x_lin = tape.matmul_const(x, np.asarray(slope, dtype=np.float64).T * dt)
                incr = tape.add(incr, x_lin)
                const_part = const_part + np.asarray(intercept, dtype=np.float64) * dt
            elif callable(model.drift):
                raise ValueError("callable drift is not differentiable on the tape; use an affine form")
            else:
                const_part = const_part + np.asarray(model.drift, dtype=np.float64) * dt
        x = tape.add(tape.add(x, incr), const_part)
        if not np.all(np.isfinite(x.value)):
            raise SimulationError(f"non-finite state at step {i + 1} during training rollout")
    if need_terminal_control:
        controls.append(net.forward_tape(tape, leaves, float(grid.times[-1]), x))
    return controls, x


def _control_term(
    tape: Tape, controls: list[Node], counts: np.ndarray, batch_paths: int, batch_times: int
) -> Node:
    """Weighted mean of |u|^2 over sampled times and the spatial batch."""
    term: Node | None = None
    for idx in np.nonzero(counts)[0]:
        s = tape.sum(tape.square(controls[idx]))
        piece = tape.mul(s, counts[idx] / (batch_times * batch_paths))
        term = piece if term is None else tape.add(term, piece)
    assert term is not None
    return term


def _pairwise_gauss(tape: Tape, alpha: float, xa: Node, xb: Node) -> Node:
    """exp(-alpha * squared distances) between two batch nodes."""
    ra = tape.sum(tape.square(xa), axis=1, keepdims=True)  # (M, 1)
    rb = tape.sum(tape.square(xb), axis=1)  # (M,) broadcasts over columns
    cross = tape.mul(tape.matmul_t(xa, xb), -2.0)
    d2 = tape.add(tape.add(cross, ra), rb)
    return tape.exp(tape.mul(d2, -alpha))


def _pairwise_gauss_const(tape: Tape, alpha: float, xa: Node, y: np.ndarray) -> Node:
    ra = tape.sum(tape.square(xa), axis=1, keepdims=True)
    ry = np.sum(y * y, axis=1)
    cross = tape.mul(tape.matmul_t_const(xa, y), -2.0)
    d2 = tape.add(tape.add(cross, ra), ry)
    return tape.exp(tape.mul(d2, -alpha))


def _embedding_mean(tape: Tape, kernel: Kernel, target: GaussianMixture, x: Node) -> Node:
    """Tape version of the closed-form mean embedding, averaged over the batch."""
    a = kernel.bandwidth
    total: Node | None = None
    for c in range(target.n_components):
        denom = 1.0 + 2.0 * a * target.variances[c]  # (d,)
        coef = float(target.weights[c] * np.prod(denom) ** -0.5)
        diff = tape.add(x, -target.means[c])
        scaled = tape.mul(tape.square(diff), 1.0 / denom)
        e = tape.exp(tape.mul(tape.sum(scaled, axis=1), -a))
        piece = tape.mul(e, coef)
        total = piece if total is None else tape.add(total, piece)
    return tape.mean(total)


def loss_analytic(
    net: ControlNet,
    cfg: SolverConfig,
    *,
    x0_pair: tuple[np.ndarray, np.ndarray],
    noise_pair: tuple[np.ndarray, np.ndarray],
    tau_counts: np.ndarray,
) -> LossGraph:
    """Penalized loss against an analytic Gaussian-mixture target.

    Kernel term: all-pairs mean of the target-centered kernel across the two
    independent batches. Its expectation is the squared MMD minus the target
    constant; every cross pair is independent, so the all-pairs average is the
    lowest-variance Monte-Carlo estimate the two batches support.
    """
    if not cfg.analytic_target:
        raise ValueError("config target is not an analytic mixture")
    tape = Tape()
    leaves = net.leaves(tape)
    need_last = bool(tau_counts[-1])
    controls_a, xa = _rollout(tape, leaves, net, cfg, x0_pair[0], noise_pair[0], need_last)
    controls_b, xb = _rollout(tape, leaves, net, cfg, x0_pair[1], noise_pair[1], False)
    cost = _control_term(tape, controls_a, tau_counts, cfg.batch_paths, cfg.batch_times)
    gmean = tape.mean(_pairwise_gauss(tape, cfg.kernel.bandwidth, xa, xb))
    ea = _embedding_mean(tape, cfg.kernel, cfg.target, xa)
    eb = _embedding_mean(tape, cfg.kernel, cfg.target, xb)
    mmd_term = tape.sub(gmean, tape.add(ea, eb))
    loss = tape.add(tape.mul(cost, 1.0 / cfg.penalty), mmd_term)
    return LossGraph(tape, loss, leaves, float(cost.value), float(mmd_term.value))


def loss_empirical(
    net: ControlNet,
    cfg: SolverConfig,
    target_samples: np.ndarray,
    *,
    x0: np.ndarray,
    noise: np.ndarray,
    tau_counts: np.ndarray,
) -> LossGraph:
    """Penalized loss against target samples: diagonal-excluded own term plus
    the cross term, a single simulated batch, no independent copy."""
    tape = Tape()
    leaves = net.leaves(tape)
    need_last = bool(tau_counts[-1])
    controls, x1 = _rollout(tape, leaves, net, cfg, x0, noise, need_last)
    cost = _control_term(tape, controls, tau_counts, cfg.batch_paths, cfg.batch_times)
    m = cfg.batch_paths
    my = target_samples.shape[0]
    alpha = cfg.kernel.bandwidth
    g_own = _pairwise_gauss(tape, alpha, x1, x1)
    # gaussian diagonal is exactly 1, so the trace is m
    own = tape.mul(tape.add(tape.sum(g_own), -float(m)), 1.0 / (m * (m - 1)))
    g_cross = _pairwise_gauss_const(tape, alpha, x1, target_samples)
    cross = tape.mul(tape.sum(g_cross), -2.0 / (m * my))
    mmd_term = tape.add(own, cross)
    loss = tape.add(tape.mul(cost, 1.0 / cfg.penalty), mmd_term)
    return LossGraph(tape, loss, leaves, float(cost.value), float(mmd_term.value))


def _flatten_grads(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def make_net(cfg: SolverConfig) -> ControlNet:
    return ControlNet(cfg.net_dims, rng=stream_generator(cfg.seed, _STREAM_NET))


def train(
    cfg: SolverConfig,
    *,
    checkpoint_every: int = 0,
    checkpoint_path: str | None = None,
) -> TrainResult:
    """Run the stochastic-optimization loop.

    Initial samples are drawn once up front; path noise and evaluation times
    are fresh every iteration. The whole run is a deterministic function of
    the config, including its seed.
    """
    net = make_net(cfg)
    if cfg.iterations == 0:
        return TrainResult(net, [], cfg)
    model = cfg.model
    n, m_noise = cfg.n_steps, model.m
    mb = cfg.batch_paths
    x0_a = sample_initial(cfg.mu0, mb, cfg.seed, _STREAM_INIT_A)
    x0_b = sample_initial(cfg.mu0, mb, cfg.seed, _STREAM_INIT_B) if cfg.analytic_target else None
    tau_rng = stream_generator(cfg.seed, _STREAM_TAU)
    target_samples = None if cfg.analytic_target else cfg.target.samples
    const = cfg.target_constant()
    theta = net.theta()
    opt = AdamState.fresh(theta.size, cfg.learning_rate)
    reports: list[LossReport] = []
    for it in range(1, cfg.iterations + 1):
        t_start = time.perf_counter()
        counts = _tau_counts(cfg, tau_rng)
        stream = _STREAM_ITER_BASE + 2 * it
        try:
            if cfg.analytic_target:
                noise_a = normal_increments(cfg.seed, stream, (mb, n, m_noise))
                noise_b = normal_increments(cfg.seed, stream + 1, (mb, n, m_noise))
                graph = loss_analytic(
                    net, cfg, x0_pair=(x0_a, x0_b), noise_pair=(noise_a, noise_b), tau_counts=counts
                )
            else:
                noise = normal_increments(cfg.seed, stream, (mb, n, m_noise))
                graph = loss_empirical(
                    net, cfg, target_samples, x0=x0_a, noise=noise, tau_counts=counts
                )
            loss_val = float(graph.loss.value)
            if not np.isfinite(loss_val):
                raise SimulationError("non-finite loss")
            grad = _flatten_grads(backward(graph.tape, graph.loss, graph.leaves))
            theta, opt = adam_step(opt, theta, grad)
        except (SimulationError, GradientError) as exc:
            raise TrainingDiverged(str(exc), it, theta, reports) from exc
        net.set_theta(theta)
        wall = (time.perf_counter() - t_start) * 1e3
        reports.append(
            LossReport(
                iteration=it,
                loss=loss_val,
                control_cost=graph.control_cost,
                mmd_term=graph.mmd_term,
                lambda_scaled=cfg.penalty * (loss_val + const),
                wall_ms=wall,
            )
        )
        if checkpoint_every and checkpoint_path and it % checkpoint_every == 0:
            net.save(checkpoint_path)
    return TrainResult(net, reports, cfg)


def evaluate(
    net: ControlNet,
    cfg: SolverConfig,
    n_eval: int,
    *,
    stream_salt: int = 0,
    snapshot_steps: tuple[int, ...] = (),
) -> EvalResult:
    """Fresh-seed rollout and unbiased squared-MMD of the terminal sample.

    Control cost is the time-quadrature mean of |u|^2 along the paths. Paths
    are processed in blocks so memory stays flat at any n_eval.
    """
    model = cfg.model
    grid = cfg.time_grid()
    dts = grid.deltas()
    sig = model.diffusion_matrix()
    base = _STREAM_EVAL_BASE + 4 * stream_salt
    x0 = sample_initial(cfg.mu0, n_eval, cfg.seed, base)
    terminal = np.empty((n_eval, model.d))
    snaps = {s: np.empty((n_eval, model.d)) for s in snapshot_steps}
    cost_total = 0.0
    n, m_noise = grid.n_steps, model.m
    for lo in range(0, n_eval, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, n_eval)
        block = hi - lo
        from .sde import uniform_block
        from scipy.special import ndtri

        start = lo * n * m_noise
        u = uniform_block(cfg.seed, base + 1, start, block * n * m_noise)
        noise = ndtri(np.maximum(u, 2.0**-64)).reshape(block, n, m_noise)
        x = x0[lo:hi].copy()
        if 0 in snaps:
            snaps[0][lo:hi] = x
        for i in range(n):
            t = float(grid.times[i])
            uval = net.forward_batch(t, x)
            cost_total += float(np.sum(uval * uval)) * dts[i]
            drift = model.drift_at(t, x) + uval @ sig.T
            x = x + drift * dts[i] + (noise[:, i, :] * np.sqrt(dts[i])) @ sig.T
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"non-finite state at step {i + 1} during evaluation")
            if (i + 1) in snaps:
                snaps[i + 1][lo:hi] = x
        terminal[lo:hi] = x
    cost = cost_total / n_eval
    if cfg.analytic_target:
        msq = mmd_sq_analytic_target(cfg.kernel, terminal, cfg.target, unbiased_own_term=True)
    else:
        msq = mmd_sq_unbiased(cfg.kernel, terminal, cfg.target.samples)
    return EvalResult(mmd_sq=float(msq), control_cost=cost, terminal=terminal, snapshots=snaps)


@dataclass
class SweepEntry:
    penalty: float
    result: TrainResult
    final: EvalResult
    cost_plus_penalty: float  # J estimate: control cost + penalty * mmd_sq
    half_j: float


def lambda_sweep(cfg: SolverConfig, penalties: list[float], *, n_eval: int = 20000) -> list[SweepEntry]:
    """Full training run per penalty value, all from the same initial seed."""
    if any(b <= a for a, b in zip(penalties, penalties[1:])):
        raise ValueError("penalty values must be increasing")
    entries = []
    for lam in penalties:
        run_cfg = replace(cfg, penalty=float(lam))
        result = train(run_cfg)
        final = evaluate(result.net, run_cfg, n_eval)
        j_est = final.control_cost + lam * final.mmd_sq
        entries.append(
            SweepEntry(
                penalty=float(lam),
                result=result,
                final=final,
                cost_plus_penalty=j_est,
                half_j=0.5 * j_est,
            )
        )
    return entries


def loss_reports_to_csv(reports: list[LossReport], path: str, *, include_wall_ms: bool = True) -> None:
    """Write the per-iteration records; wall_ms can be dropped so reruns of a
    seeded run produce byte-identical files."""
    cols = "iter,loss,control_cost,mmd_term,lambda_scaled"
    with open(path, "w") as fh:
        fh.write(cols + (",wall_ms\n" if include_wall_ms else "\n"))
        for r in reports:
            row = f"{r.iteration},{r.loss:.17g},{r.control_cost:.17g},{r.mmd_term:.17g},{r.lambda_scaled:.17g}"
            if include_wall_ms:
                row += f",{r.wall_ms:.3f}"
            fh.write(row + "\n")
