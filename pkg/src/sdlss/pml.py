"""Sparsity-driven latent space sampling with proximal meta-learning.

The inner loop runs ``T`` projected gradient steps on each latent,

    z <- P_s(z - beta * grad_z ||y - M(G(z))||),

where ``P_s`` keeps the ``s`` largest-magnitude entries.  The outer (meta)
step differentiates the batch loss through the unrolled inner loop and takes
one SGD step on the generator parameters, and on the sensor parameters when
the sensor is a learned network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import PiecewiseLinear, Tape, Tensor
from .errors import ConfigError, ContractError, NonFiniteError
from .metrics import batch_record
from .models import GeneratorModel, MeasurementOperator, gen_forward, sense
from . import seeding

log = logging.getLogger(__name__)

_RELU = PiecewiseLinear((0.0,), (0.0, 1.0))
SREC_FORMS = ("hinge", "literal")
DIVERGENCE_FACTOR = 10.0


@dataclass
class PmlConfig:
    s: int
    T: int = 5
    beta: float = 0.01
    alpha: float = 0.01
    srec_gamma: float = 1.0
    srec_delta: float = 0.001
    srec_form: str = "hinge"
    batch_size: int = 64
    eps: float = 1e-12
    project: bool = True
    beta_decay: float = 1.0
    momentum: float = 0.0
    max_epochs: int = 10
    tol: float = 1e-3
    t_eval: int = 10
    restarts: int = 3

    def validate(self, k=None):
        if k is not None and self.s > k:
            raise ConfigError(f"sparsity s={self.s} exceeds latent dim k={k}")
        if self.s < 1:
            raise ConfigError("sparsity s must be >= 1")
        if self.T < 1 or self.t_eval < 1:
            raise ConfigError("inner step counts must be >= 1")
        if self.beta <= 0 or self.alpha < 0:
            raise ConfigError("step sizes must be positive")
        if self.srec_gamma <= 0:
            raise ConfigError("S-REC gamma must be > 0")
        if self.srec_delta < 0:
            raise ConfigError("S-REC delta must be >= 0")
        if self.srec_form not in SREC_FORMS:
            raise ConfigError(f"srec_form must be one of {SREC_FORMS}")
        if self.batch_size < 1 or self.restarts < 1:
            raise ConfigError("batch_size and restarts must be >= 1")
        if not 0 < self.beta_decay <= 1:
            raise ConfigError("beta_decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        return self


# -- projection ----------------------------------------------------------------

def hard_threshold_mask(v, s):
    """0/1 mask of the ``s`` largest |v| entries per row (lowest index wins ties)."""
    v = np.asarray(v, dtype=np.float64)
    k = v.shape[-1]
    if s < 0 or s > k:
        raise ConfigError(f"sparsity s={s} outside [0, {k}]")
    rows = v.reshape(-1, k)
    mask = np.zeros_like(rows)
    if s > 0:
        order = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, :s]
        np.put_along_axis(mask, order, 1.0, axis=1)
    return mask.reshape(v.shape)


def hard_threshold(v, s):
    """P_s: keep the ``s`` largest-magnitude entries of each row, zero the rest."""
    v = np.asarray(v, dtype=np.float64)
    if s == v.shape[-1]:
        return v.copy()
    return v * hard_threshold_mask(v, s)


def l0(v):
    return np.count_nonzero(np.asarray(v), axis=-1)


# -- objectives ----------------------------------------------------------------

def measurement_objective(y, z, G: GeneratorModel, M: MeasurementOperator, eps=1e-12,
                          gparams=None, mparams=None) -> Tensor:
    """f(y, z) = ||y - M(G(z))||_2, one value per row for batched input."""
    y = dc.constant(y)
    resid = y - sense(M, gen_forward(G, z, gparams), mparams)
    return dc.euclid_norm(resid, eps, axis=-1)


def srec_loss(x1, x2, M: MeasurementOperator, gamma=1.0, delta=0.001, form="hinge",
              mparams=None, eps=1e-12) -> Tensor:
    """S-REC loss averaged over row pairs.

    hinge:   mean max(0, gamma ||x1 - x2|| - delta - ||M(x1) - M(x2)||)
    literal: mean ||M(x1) - M(x2)|| + delta - gamma ||x1 - x2||
    """
    if gamma <= 0:
        raise ConfigError("S-REC gamma must be > 0")
    if form not in SREC_FORMS:
        raise ConfigError(f"srec form must be one of {SREC_FORMS}")
    x1, x2 = dc.constant(x1), dc.constant(x2)
    if x1.ndim == 1:
        x1, x2 = dc.reshape(x1, (1, -1)), dc.reshape(x2, (1, -1))
    signal_gap = dc.euclid_norm(x1 - x2, eps, axis=-1)
    measured_gap = dc.euclid_norm(sense(M, x1, mparams) - sense(M, x2, mparams), eps, axis=-1)
    if form == "hinge":
        per_pair = dc.pwl_forward(gamma * signal_gap - delta - measured_gap, _RELU)
    else:
        per_pair = measured_gap + delta - gamma * signal_gap
    return dc.mean(per_pair)


def generator_loss(ys, zs, G, M, gparams=None, mparams=None, eps=1e-12):
    """Batch generator loss.

    Returns ``(residual, l0_mean)``: the differentiable mean residual and the
    mean latent support size, which is logged but carries no gradient.
    """
    f = measurement_objective(ys, zs, G, M, eps, gparams, mparams)
    zv = zs.value if isinstance(zs, Tensor) else np.asarray(zs)
    return dc.mean(f), float(np.mean(l0(zv)))


# -- inner loop ----------------------------------------------------------------

@dataclass
class PmlResult:
    z: Tensor
    f: np.ndarray
    history: np.ndarray
    flagged: np.ndarray

    @property
    def any_flagged(self):
        return bool(np.any(self.flagged))


def _values(params):
    return None if params is None else [p.value if isinstance(p, Tensor) else p for p in params]


def pml_inner_loop(y, z0, G, M, cfg: PmlConfig, gparams=None, mparams=None,
                   create_graph=False, T=None) -> PmlResult:
    """Unrolled proximal gradient descent on the latent.

    With ``create_graph`` every step is recorded on the tape that tracks
    ``gparams`` / ``mparams`` (and ``y``), so the returned latent can be
    differentiated w.r.t. the model parameters.  Otherwise each step uses a
    throwaway tape and the result is a constant.

    A sample whose objective grows more than tenfold over the run is flagged
    and its best iterate is returned instead of the last one.
    """
    T = cfg.T if T is None else T
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    Z0 = z0.reshape(1, -1) if single else z0
    k = Z0.shape[1]
    if cfg.project and not 0 <= cfg.s <= k:
        raise ConfigError(f"sparsity s={cfg.s} outside [0, {k}]")
    y = dc.constant(y)
    Y = dc.reshape(y, (1, -1)) if y.ndim == 1 else y
    project = cfg.project and cfg.s < k

    if create_graph:
        tracked = [t.tape for t in [*(gparams or []), *(mparams or []), Y] if t.tracked]
        if not tracked:
            raise ContractError("create_graph needs at least one tracked parameter or measurement")
        tape = tracked[0]
        z = tape.watch(Z0)
    else:
        gvals, mvals = _values(gparams), _values(mparams)
        Yc = dc.constant(Y.value)
        z = dc.constant(Z0)

    iterates, history = [], []
    beta = cfg.beta
    for _ in range(T):
        if create_graph:
            f = measurement_objective(Y, z, G, M, cfg.eps, gparams, mparams)
            grad, = tape.gradient(dc.tsum(f), [z], create_graph=True)
        else:
            with Tape() as step_tape:
                zl = step_tape.watch(z.value)
                f = measurement_objective(Yc, zl, G, M, cfg.eps, gvals, mvals)
                grad, = step_tape.gradient(dc.tsum(f), [zl])
            grad = dc.constant(grad.value)
        iterates.append(z)
        history.append(f.value.copy())
        step = z - beta * grad
        if project:
            step = step * dc.constant(hard_threshold_mask(step.value, cfg.s))
        z = step
        beta *= cfg.beta_decay

    f_final = measurement_objective(
        dc.constant(Y.value), z.value, G, M, cfg.eps, _values(gparams), _values(mparams)
    ).value
    iterates.append(z)
    history.append(f_final)
    history = np.stack(history)
    flagged = f_final > DIVERGENCE_FACTOR * history[0]
    if np.any(flagged):
        # best-so-far only among s-sparse iterates (t >= 1) when projecting
        first = 1 if project else 0
        best = first + np.argmin(history[first:], axis=0)
        keep = np.where(flagged, 0.0, 1.0)[:, None]
        z = z * dc.constant(keep)
        for t, zt in enumerate(iterates):
            sel = (flagged & (best == t)).astype(np.float64)[:, None]
            if sel.any():
                z = z + zt * dc.constant(sel)
        f_final = np.where(flagged, history[best, np.arange(len(best))], f_final)
        log.warning("inner loop diverged on %d sample(s); returning best iterate", flagged.sum())
    if single:
        z = dc.reshape(z, (k,))
        f_final = f_final[0]
        flagged = flagged[0]
    return PmlResult(z, f_final, history, flagged)


# -- meta step -----------------------------------------------------------------

@dataclass
class BatchResult:
    loss_g: float
    loss_a: float
    total: float
    l0: float
    residual_rel: float
    grads_g: list
    grads_m: list
    flagged: int = 0


def batch_loss(G, M, X, z0, z_srec, cfg: PmlConfig, with_grad=True) -> BatchResult:
    """Total SDLSS loss of one batch and its gradients through the inner loop.

    ``z0`` are the inner-loop initialisations and ``z_srec`` the latents used
    to draw generator samples for the S-REC term.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with Tape() as tape:
        gp = [tape.watch(p) for p in G.params()]
        mp = [tape.watch(p) for p in M.params()] if M.trainable else None
        Y = sense(M, X, mp)
        Y_const = Y.value
        if with_grad:
            res = pml_inner_loop(Y, z0, G, M, cfg, gp, mp, create_graph=True)
        else:
            res = pml_inner_loop(Y_const, z0, G, M, cfg, gp, mp)
        loss_g, l0_mean = generator_loss(Y, res.z, G, M, gp, mp, cfg.eps)

        zs = hard_threshold(z_srec, cfg.s) if cfg.project else np.asarray(z_srec)
        X2 = gen_forward(G, zs, gp)
        loss_a = srec_loss(X, X2, M, cfg.srec_gamma, cfg.srec_delta, cfg.srec_form, mp, cfg.eps)
        # fixed linear sensors have nothing to train on the S-REC term
        total = loss_g + loss_a if M.trainable else loss_g

        y_norm = float(np.mean(np.linalg.norm(Y_const, axis=1)))
        residual_rel = loss_g.item() / max(y_norm, 1e-300)
        grads_g, grads_m = [], []
        if with_grad:
            wrt = gp + (mp or [])
            grads = [g.value for g in tape.gradient(total, wrt)]
            grads_g, grads_m = grads[:len(gp)], grads[len(gp):]
    return BatchResult(loss_g.item(), loss_a.item(), total.item(), l0_mean, residual_rel,
                       grads_g, grads_m, int(np.sum(res.flagged)))


@dataclass
class EpochRow:
    epoch: int
    loss_g: float
    loss_a: float
    l0: float
    val_psnr: float
    val_ssim: float
    val_re: float
    val_residual: float
    aborted: int = 0


@dataclass
class TrainState:
    generator: GeneratorModel
    sensor: MeasurementOperator
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)
    velocity: list | None = None
    status: str = "running"
    steps: int = 0


def meta_update(state: TrainState, grads_g, grads_m, alpha, momentum=0.0) -> TrainState:
    """One SGD step theta <- theta - alpha dL/dtheta (and phi for a network sensor)."""
    for g in list(grads_g) + list(grads_m):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite meta-gradient")
    params = state.generator.params() + (state.sensor.params() if state.sensor.trainable else [])
    grads = list(grads_g) + (list(grads_m) if state.sensor.trainable else [])
    if momentum > 0:
        if state.velocity is None:
            state.velocity = [np.zeros_like(p) for p in params]
        state.velocity = [momentum * v + g for v, g in zip(state.velocity, grads)]
        grads = state.velocity
    new = [p - alpha * g for p, g in zip(params, grads)]
    ng = len(state.generator.params())
    state.generator = state.generator.with_params(new[:ng])
    if state.sensor.trainable:
        state.sensor = state.sensor.with_params(new[ng:])
    state.steps += 1
    return state


# -- recovery ------------------------------------------------------------------

@dataclass
class Recovery:
    x: np.ndarray
    z: np.ndarray
    f: np.ndarray


def recover(y, G, M, cfg: PmlConfig, restarts=None, rng=None, T=None) -> Recovery:
    """Best-of-restarts latent recovery with frozen G and M.

    Each restart draws z0 ~ N(0, I) and runs ``T`` (default ``cfg.t_eval``)
    proximal steps; per sample the restart with the smallest objective wins.
    """
    restarts = cfg.restarts if restarts is None else restarts
    T = cfg.t_eval if T is None else T
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y.reshape(1, -1) if single else y
    B = Y.shape[0]
    # all restarts run as one stacked batch; draws are identical to a sequential loop
    Z0 = np.concatenate([rng.standard_normal((B, G.k)) for _ in range(restarts)])
    res = pml_inner_loop(np.tile(Y, (restarts, 1)), Z0, G, M, cfg, T=T)
    f = res.f.reshape(restarts, B)
    Z = res.z.value.reshape(restarts, B, G.k)
    best_z, best_f = Z[0].copy(), f[0].copy()
    for r in range(1, restarts):
        better = f[r] < best_f
        best_z[better] = Z[r][better]
        best_f = np.where(better, f[r], best_f)
    x = gen_forward(G, best_z).value
    if single:
        return Recovery(x[0], best_z[0], best_f[0])
    return Recovery(x, best_z, best_f)


# -- training ------------------------------------------------------------------

def _validate(state, X_val, cfg, image_shape, epoch, experiment):
    M, G = state.sensor, state.generator
    Y = sense(M, X_val).value
    rec = recover(Y, G, M, cfg, rng=seeding.stream(state.seed, "val"))
    r = batch_record(X_val, rec.x, image_shape, experiment, epoch, M.m, G.k, cfg.s)
    return r, float(np.mean(rec.f))


def train(X_train, cfg: PmlConfig, generator: GeneratorModel, sensor: MeasurementOperator,
          seed=0, X_val=None, image_shape=None, experiment="sdlss", on_epoch=None) -> TrainState:
    """Joint generator / sensor training.

    Per batch: sense every image, draw z ~ N(0, I), run ``cfg.T`` proximal
    steps, then one meta step.  Stops when the mean relative residual of a
    batch drops to ``cfg.tol``, after ``cfg.max_epochs``, or when the epoch
    loss stays above ten times the first epoch's for three epochs.
    """
    cfg.validate(generator.k)
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    if X_train.shape[0] == 0:
        raise ConfigError("empty training set")
    state = TrainState(generator.copy(), sensor.copy(), seed=int(seed))
    shuffle = seeding.stream(seed, "data")
    latent = seeding.stream(seed, "latent")
    initial = None
    bad_epochs = 0
    N = cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(X_train.shape[0])
        lg, la, l0s, aborted = [], [], [], 0
        converged = False
        for start in range(0, len(order), N):
            X = X_train[order[start:start + N]]
            z0 = latent.standard_normal((X.shape[0], generator.k))
            z2 = latent.standard_normal((X.shape[0], generator.k))
            try:
                br = batch_loss(state.generator, state.sensor, X, z0, z2, cfg)
                meta_update(state, br.grads_g, br.grads_m, cfg.alpha, cfg.momentum)
            except NonFiniteError as exc:
                log.error("epoch %d aborted at batch %d: %s", epoch, start // N, exc)
                aborted = 1
                break
            lg.append(br.loss_g)
            la.append(br.loss_a)
            l0s.append(br.l0)
            if br.residual_rel <= cfg.tol:
                converged = True
                break
        state.epoch = epoch
        vals = (float("nan"),) * 4
        if X_val is not None:
            try:
                rec, resid = _validate(state, X_val, cfg, image_shape, epoch, experiment)
                vals = (rec.psnr_db, rec.ssim, rec.re_db, resid)
            except NonFiniteError as exc:
                log.error("validation failed after epoch %d: %s", epoch, exc)
                aborted = 1
        row = EpochRow(epoch, _avg(lg), _avg(la), _avg(l0s), *vals, aborted=aborted)
        state.history.append(row)
        if on_epoch is not None:
            on_epoch(state, row)
        log.info("epoch %d  L_G=%.5g  L_A=%.5g  val_re=%.3f", epoch, row.loss_g, row.loss_a, row.val_re)
        if converged:
            state.status = "converged"
            break
        if aborted and state.history[-2:] and all(r.aborted for r in state.history[-2:]) \
                and len(state.history) >= 2:
            state.status = "nonfinite"
            break
        if initial is None and np.isfinite(row.loss_g):
            initial = row.loss_g
        elif initial is not None and row.loss_g > DIVERGENCE_FACTOR * initial:
            bad_epochs += 1
            if bad_epochs >= 3:
                state.status = "diverged"
                break
        else:
            bad_epochs = 0
    else:
        state.status = "max_epochs"
    return state


def _avg(values):
    return float(np.mean(values)) if values else float("nan")


def with_sparsity(cfg: PmlConfig, s: int) -> PmlConfig:
    return replace(cfg, s=int(s))
