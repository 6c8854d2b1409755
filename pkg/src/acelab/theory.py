"""Numerical checks of ACE's gradient algebra.

Two families of checks live here:

* Exact-expectation identities on tabular policies, computed by enumerating
  the whole sequence space: ACE's extra gradient, the selective regularizer,
  its product-rule gradient and the residual left out by the stop-gradient.
* Monte-Carlo checks of the gradient-quality analysis in the Gaussian linear
  model ``u ~ N(mu, sigma^2)``, ``phi = a + b u``.

Theory checks use the raw (length-unnormalized) confidence ``c``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from acelab.advantage import ADV_EPS, sigmoid, softplus
from acelab.env import TaskSpec, correct_mask
from acelab.policy import PolicyParams, sample_batch, token_logprobs, weighted_score_sum

MIN_MC_SAMPLES = 1000


class DegenerateInstance(ValueError):
    """The task's exact pass rate is 0 or 1, so the negative advantage vanishes."""


@dataclass
class _Incorrect:
    tokens: np.ndarray
    probs: np.ndarray
    c: np.ndarray
    pass_rate: float
    abs_adv: float


def _incorrect_set(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> _Incorrect:
    seqs, correct = correct_mask(task)
    lp = token_logprobs(params, task.prompt_class, seqs).sum(axis=1)
    lr = token_logprobs(ref, task.prompt_class, seqs).sum(axis=1)
    probs = np.exp(lp)
    p = float(probs[correct].sum())
    if not correct.any() or correct.all() or p <= 0.0 or p >= 1.0:
        raise DegenerateInstance(f"exact pass rate {p} leaves no negative advantage")
    abs_adv = p / (np.sqrt(p * (1 - p)) + ADV_EPS)
    wrong = ~correct
    return _Incorrect(seqs[wrong], probs[wrong], (lp - lr)[wrong], p, abs_adv)


def negative_advantage_magnitude(params: PolicyParams, task: TaskSpec) -> float:
    """``|A^-| = p / (sqrt(p(1-p)) + eps)`` from the exact pass rate."""
    return _incorrect_set(params, params, task).abs_adv


def ace_extra_gradient(params: PolicyParams, ref: PolicyParams, task: TaskSpec, alpha: float) -> np.ndarray:
    """Exact infinite-group extra gradient of ACE over GRPO (objective-ascent form).

    ``-alpha |A^-| sum_{y wrong} pi(y) softplus(c(y)) grad log pi(y)`` with
    ``softplus(c)`` held fixed.
    """
    inc = _incorrect_set(params, ref, task)
    w = -alpha * inc.abs_adv * inc.probs * softplus(inc.c)
    return weighted_score_sum(params, task.prompt_class, inc.tokens, w)


def selective_regularizer_value(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> float:
    inc = _incorrect_set(params, ref, task)
    return float(inc.abs_adv * np.sum(inc.probs * softplus(inc.c)))


def selective_regularizer_approx(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> float:
    """Reverse-KL form: keep only wrong sequences with ``c > 0`` and replace softplus(c) by c."""
    inc = _incorrect_set(params, ref, task)
    pos = inc.c > 0
    return float(inc.abs_adv * np.sum(inc.probs[pos] * inc.c[pos]))


def regularizer_term_one(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> np.ndarray:
    """``|A^-| sum softplus(c) grad pi``: the part of the regularizer gradient ACE reproduces."""
    inc = _incorrect_set(params, ref, task)
    w = inc.abs_adv * inc.probs * softplus(inc.c)
    return weighted_score_sum(params, task.prompt_class, inc.tokens, w)


def residual_gradient(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> np.ndarray:
    """``|A^-| sum pi sigmoid(c) grad log pi``: the through-``c`` term ACE omits."""
    inc = _incorrect_set(params, ref, task)
    w = inc.abs_adv * inc.probs * sigmoid(inc.c)
    return weighted_score_sum(params, task.prompt_class, inc.tokens, w)


def selective_regularizer_gradient(params: PolicyParams, ref: PolicyParams, task: TaskSpec) -> np.ndarray:
    """Full gradient of the selective regularizer with ``|A^-|`` held constant.

    Product rule on ``pi(y) * softplus(log pi(y) - log ref(y))``:
    ``softplus(c) grad pi + pi sigmoid(c) grad log pi``.
    """
    return regularizer_term_one(params, ref, task) + residual_gradient(params, ref, task)


@dataclass
class DecompositionReport:
    delta_grad: np.ndarray
    reg_grad: np.ndarray
    residual: np.ndarray
    identity_defect: float
    r_sel_value: float
    alpha: float
    pass_rate: float
    residual_dropped: bool = False

    def summary(self) -> dict:
        return {
            "identity_defect": self.identity_defect,
            "r_sel_value": self.r_sel_value,
            "alpha": self.alpha,
            "pass_rate": self.pass_rate,
            "residual_dropped": self.residual_dropped,
            "delta_grad_maxabs": float(np.abs(self.delta_grad).max()),
            "reg_grad_maxabs": float(np.abs(self.reg_grad).max()),
            "residual_maxabs": float(np.abs(self.residual).max()),
        }


def verify_decomposition(
    params: PolicyParams,
    ref: PolicyParams,
    task: TaskSpec,
    alpha: float,
    drop_residual: bool = False,
) -> DecompositionReport:
    """Evaluate ``max |delta + alpha * grad R_sel - alpha * residual|``.

    ``drop_residual`` replaces the residual by zero; it exists as a negative
    control and should produce a large defect.
    """
    delta = ace_extra_gradient(params, ref, task, alpha)
    reg = selective_regularizer_gradient(params, ref, task)
    res = residual_gradient(params, ref, task)
    used = np.zeros_like(res) if drop_residual else res
    defect = float(np.abs(delta + alpha * reg - alpha * used).max())
    inc = _incorrect_set(params, ref, task)
    return DecompositionReport(
        delta_grad=delta,
        reg_grad=reg,
        residual=res,
        identity_defect=defect,
        r_sel_value=float(inc.abs_adv * np.sum(inc.probs * softplus(inc.c))),
        alpha=alpha,
        pass_rate=inc.pass_rate,
        residual_dropped=drop_residual,
    )


def per_sequence_scores(params: PolicyParams, prompt_class: int, tokens: np.ndarray) -> np.ndarray:
    """Dense score vectors, one flattened logit-gradient row per sequence."""
    tokens = np.atleast_2d(tokens)
    n, length = tokens.shape
    out = np.zeros((n,) + params.logits.shape[1:])
    prev = np.full(n, params.bos)
    rows = np.arange(n)
    for t in range(length):
        logits = params.logits[prompt_class, t, prev]
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        out[rows, t, prev] -= probs
        out[rows, t, prev, tokens[:, t]] += 1.0
        prev = tokens[:, t]
    full = np.zeros((n,) + params.logits.shape)
    full[:, prompt_class] = out
    return full.reshape(n, -1)


def sampled_extra_gradient(
    params: PolicyParams,
    ref: PolicyParams,
    task: TaskSpec,
    alpha: float,
    G: int,
    rng: np.random.Generator,
    exact_scale: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Finite-group estimate of the ACE extra gradient and its per-entry standard error.

    With ``exact_scale`` the per-prompt factor ``|A^-|`` comes from the exact
    pass rate; otherwise from the sampled group, as in training.
    """
    tokens, lp = sample_batch(params, task.prompt_class, G, task.length, rng)
    lr = token_logprobs(ref, task.prompt_class, tokens)
    c = lp.sum(axis=1) - lr.sum(axis=1)
    wrong = (tokens.sum(axis=1) % task.modulus != task.target)
    if exact_scale:
        scale = negative_advantage_magnitude(params, task)
    else:
        p = 1.0 - wrong.mean()
        scale = p / (np.sqrt(p * (1 - p)) + ADV_EPS)
    contrib = per_sequence_scores(params, task.prompt_class, tokens)
    contrib *= (-alpha * scale * wrong * softplus(c))[:, None]
    mean = contrib.mean(axis=0).reshape(params.logits.shape)
    se = (contrib.std(axis=0, ddof=1) / np.sqrt(G)).reshape(params.logits.shape)
    return mean, se


# --- Gaussian linear model --------------------------------------------------


@dataclass
class GaussianModelConfig:
    mu: float = 0.5
    sigma: float = 1.0
    a: float = 0.5
    b: float = 1.0
    alpha: float = 0.05
    n_samples: int = 10**6
    seed: int = 0
    penalty_scale: float = 1.0  # per-prompt |A^-|; cancels in every ratio

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.a <= 0:
            raise ValueError("a must be > 0")
        if self.b < 0:
            raise ValueError("b must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class Estimate:
    value: float
    se: float

    def z(self, target: float) -> float:
        return (self.value - target) / self.se if self.se > 0 else (0.0 if self.value == target else np.inf)

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.value - target) <= k * self.se


@dataclass
class QualityReport:
    config: GaussianModelConfig
    delta1: Estimate
    delta1_analytic: float
    gamma: float
    gamma_analytic: float
    C: Estimate
    C_analytic: float
    cov_phi_u2: Estimate
    cov_phi_u2_analytic: float
    ratio_analytic: float | None
    q_std: float
    q_std_analytic: float
    q_ace: float
    q_ace_analytic: float
    second_moment_std: float
    second_moment_ace: float
    var_increase: Estimate
    negative_phi_fraction: float

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v
        return out


def _mean_product_stat(x, y, z) -> Estimate:
    """``E[x] - E[y] E[z]`` with a delta-method standard error."""
    mx, my, mz = x.mean(), y.mean(), z.mean()
    psi = (x - mx) - mz * (y - my) - my * (z - mz)
    return Estimate(float(mx - my * mz), float(psi.std(ddof=1) / np.sqrt(x.size)))


def _gaussian_raw_moments(mu: float, sigma: float) -> tuple[float, float, float, float]:
    s2 = sigma**2
    return mu, mu**2 + s2, mu**3 + 3 * mu * s2, mu**4 + 6 * mu**2 * s2 + 3 * s2**2


def gaussian_q_ace(mu: float, sigma: float, a: float, b: float, alpha: float) -> float:
    """Exact quality ratio of ``(1 + alpha phi) u`` in the Gaussian linear model."""
    m1, m2, m3, m4 = _gaussian_raw_moments(mu, sigma)
    k0, k1 = 1 + alpha * a, alpha * b  # (1 + alpha phi) u = k0 u + k1 u^2
    mean = k0 * m1 + k1 * m2
    second = k0**2 * m2 + 2 * k0 * k1 * m3 + k1**2 * m4
    return mean**2 / (second - mean**2)


def _draw(cfg: GaussianModelConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.n_samples < MIN_MC_SAMPLES:
        raise ValueError(f"n_samples={cfg.n_samples} < {MIN_MC_SAMPLES}: too few for a meaningful estimate")
    rng = np.random.default_rng(cfg.seed)
    u = rng.normal(cfg.mu, cfg.sigma, cfg.n_samples)
    return u, cfg.a + cfg.b * u


def _quality(wu: np.ndarray) -> float:
    return float(wu.mean() ** 2 / wu.var())


def gaussian_quality_report(cfg: GaussianModelConfig) -> QualityReport:
    u, phi = _draw(cfg)
    mu, s2 = cfg.mu, cfg.sigma**2
    w = 1.0 + cfg.alpha * phi
    wu = w * u

    delta1 = _mean_product_stat(phi * u**2, u, phi * u)
    C = _mean_product_stat(phi * u, phi, u)
    cov2 = _mean_product_stat(phi * u**2, phi, u**2)
    q_std = _quality(u)
    gamma = C.value * u.mean() * (1 + q_std) - q_std * cov2.value

    m_wu, m_u = wu.mean(), u.mean()
    psi = (wu**2 - (wu**2).mean()) - 2 * m_wu * (wu - m_wu) - (u**2 - (u**2).mean()) + 2 * m_u * (u - m_u)
    var_inc = Estimate(float(wu.var() - u.var()), float(psi.std(ddof=1) / np.sqrt(u.size)))

    q_an = mu**2 / s2
    return QualityReport(
        config=cfg,
        delta1=delta1,
        delta1_analytic=2 * cfg.b * mu * s2 + cfg.a * s2,
        gamma=float(gamma),
        gamma_analytic=cfg.b * s2 * mu * (1 - q_an),
        C=C,
        C_analytic=cfg.b * s2,
        cov_phi_u2=cov2,
        cov_phi_u2_analytic=2 * cfg.b * mu * s2,
        ratio_analytic=(cfg.b * s2 * mu) / (2 * cfg.b * mu * s2) if cfg.b * mu != 0 else None,
        q_std=q_std,
        q_std_analytic=q_an,
        q_ace=_quality(wu),
        q_ace_analytic=gaussian_q_ace(mu, cfg.sigma, cfg.a, cfg.b, cfg.alpha),
        second_moment_std=float(np.mean(u**2)),
        second_moment_ace=float(np.mean(wu**2)),
        var_increase=var_inc,
        negative_phi_fraction=float(np.mean(phi < 0)),
    )


@dataclass
class QualityVerdict:
    improved: bool
    hypothesis_holds: bool
    q_std: float
    q_ace: float
    q_ace_analytic: float
    q_std_analytic: float


def quality_improvement_check(cfg: GaussianModelConfig, max_alpha: float = 0.1) -> QualityVerdict:
    """Compare Monte-Carlo quality ratios of the ACE and standard weightings.

    The first-order argument only covers small ``alpha``; larger values are
    refused.  ``hypothesis_holds`` reports whether the high-noise condition
    ``Q_std < 1`` and a positive slope ``b`` are met.
    """
    if cfg.alpha > max_alpha:
        raise ValueError(f"alpha={cfg.alpha} outside the first-order regime (<= {max_alpha})")
    u, phi = _draw(cfg)
    q_std = _quality(u)
    q_ace = _quality((1.0 + cfg.alpha * phi) * u)
    q_an = cfg.mu**2 / cfg.sigma**2
    return QualityVerdict(
        improved=q_ace > q_std,
        hypothesis_holds=q_an < 1 and cfg.b > 0,
        q_std=q_std,
        q_ace=q_ace,
        q_ace_analytic=gaussian_q_ace(cfg.mu, cfg.sigma, cfg.a, cfg.b, cfg.alpha),
        q_std_analytic=q_an,
    )


@dataclass
class SecondMomentVerdict:
    increased: bool
    moment_std: float
    moment_ace: float
    increase: Estimate
    increase_analytic: float


def second_moment_check(cfg: GaussianModelConfig, score_dim: int = 8) -> SecondMomentVerdict:
    """Mean squared gradient norm with and without ACE weighting.

    Score vectors have projection ``u`` on the signal direction and
    ``score_dim - 1`` independent standard-normal orthogonal components, so
    ``|s|^2 = u^2 + chi2(score_dim - 1)``.
    """
    if score_dim < 1:
        raise ValueError("score_dim must be >= 1")
    u, phi = _draw(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    k = score_dim - 1
    norm2 = u**2 + (rng.chisquare(k, u.size) if k else 0.0)
    scale2 = cfg.penalty_scale**2
    diff = scale2 * ((1 + cfg.alpha * phi) ** 2 - 1) * norm2
    m_std = scale2 * float(norm2.mean())
    m_ace = scale2 * float(((1 + cfg.alpha * phi) ** 2 * norm2).mean())

    m1, m2, m3, m4 = _gaussian_raw_moments(cfg.mu, cfg.sigma)
    a, b = cfg.a, cfg.b
    e_phi_s = a * (m2 + k) + b * (m3 + k * m1)
    e_phi2_s = a * a * m2 + 2 * a * b * m3 + b * b * m4 + k * (a * a + 2 * a * b * m1 + b * b * m2)
    analytic = scale2 * (2 * cfg.alpha * e_phi_s + cfg.alpha**2 * e_phi2_s)
    return SecondMomentVerdict(
        increased=m_ace > m_std,
        moment_std=m_std,
        moment_ace=m_ace,
        increase=Estimate(float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size))),
        increase_analytic=float(analytic),
    )


# --- exact tabular version of the quality analysis ---------------------------


@dataclass
class TabularQualityReport:
    mean_u: float
    var_u: float
    C: float
    cov_phi_u2: float
    q_std: float
    q_ace: float
    assumption_holds: bool


def tabular_quality_report(
    params: PolicyParams, ref: PolicyParams, task: TaskSpec, alpha: float
) -> TabularQualityReport:
    """Exact moments of the projected score over wrong sequences of a tabular policy.

    Reports whether ``Cov(phi, u^2) > 0`` actually holds for this instance.
    """
    inc = _incorrect_set(params, ref, task)
    w = inc.probs / inc.probs.sum()
    s = per_sequence_scores(params, task.prompt_class, inc.tokens)
    mean_s = w @ s
    norm = np.linalg.norm(mean_s)
    if norm == 0:
        raise DegenerateInstance("expected score over wrong sequences is zero")
    u = s @ (mean_s / norm)
    phi = softplus(inc.c)

    def e(x):
        return float(w @ x)

    mu, var = e(u), e(u**2) - e(u) ** 2
    C = e(phi * u) - e(phi) * mu
    cov2 = e(phi * u**2) - e(phi) * e(u**2)
    wu = (1 + alpha * phi) * u
    q_ace = e(wu) ** 2 / (e(wu**2) - e(wu) ** 2)
    return TabularQualityReport(mu, var, C, cov2, mu**2 / var, q_ace, cov2 > 0)


# --- verification campaign ----------------------------------------------------

GRID_MU = (0.25, 0.5, 1.0)
GRID_SIGMA = (0.5, 1.0, 2.0)
GRID_B = (0.5, 1.0, 2.0)
SECOND_MOMENT_ALPHAS = (0.1, 1.0)
IDENTITY_TOL = 1e-8
MC_SIGMAS = 3.0


def random_instance(seed: int, vocab_size: int = 3, length: int = 2, scale: float = 1.0):
    """Seeded non-uniform tabular instance with ``params != ref``."""
    rng = np.random.default_rng([seed, 7])
    params = PolicyParams.random(vocab_size, length, 1, scale, rng)
    ref = PolicyParams.random(vocab_size, length, 1, scale, rng)
    task = TaskSpec("mod_sum", vocab_size, seed % vocab_size, vocab_size, length, 0)
    alpha = (0.5, 1.0)[seed % 2]
    return params, ref, task, alpha


def _instance_payload(params, ref, task, alpha) -> dict:
    return {
        "params": params.logits.tolist(),
        "ref": ref.logits.tolist(),
        "task": asdict(task),
        "alpha": alpha,
    }


def instance_from_payload(payload: dict):
    params = PolicyParams(np.asarray(payload["params"], dtype=np.float64))
    ref = PolicyParams(np.asarray(payload["ref"], dtype=np.float64))
    return params, ref, TaskSpec(**payload["task"]), float(payload["alpha"])


def decomposition_check(params, ref, task, alpha, drop_residual=False, tol=IDENTITY_TOL) -> dict:
    rep = verify_decomposition(params, ref, task, alpha, drop_residual=drop_residual)
    return {"kind": "decomposition", "passed": rep.identity_defect <= tol, "tolerance": tol, **rep.summary()}


def gaussian_point_check(mu, sigma, b, a=0.5, n_samples=10**6, seed=0, alpha=0.05) -> dict:
    cfg = GaussianModelConfig(mu=mu, sigma=sigma, a=a, b=b, alpha=alpha, n_samples=n_samples, seed=seed)
    rep = gaussian_quality_report(cfg)
    z = {
        "delta1": rep.delta1.z(rep.delta1_analytic),
        "C": rep.C.z(rep.C_analytic),
        "cov_phi_u2": rep.cov_phi_u2.z(rep.cov_phi_u2_analytic),
    }
    verdict = quality_improvement_check(cfg)
    failures = [k for k, v in z.items() if abs(v) > MC_SIGMAS]
    if rep.ratio_analytic != 0.5:
        failures.append("ratio")
    if verdict.hypothesis_holds and not verdict.improved:
        failures.append("quality")
    moments = {}
    for alpha_sm in SECOND_MOMENT_ALPHAS:
        sm = second_moment_check(replace_alpha(cfg, alpha_sm))
        zs = sm.increase.z(sm.increase_analytic)
        moments[str(alpha_sm)] = {"increased": sm.increased, "z": zs}
        if not sm.increased or abs(zs) > MC_SIGMAS:
            failures.append(f"second_moment@{alpha_sm}")
    return {
        "kind": "gaussian",
        "passed": not failures,
        "failures": failures,
        "config": asdict(cfg),
        "z": z,
        "q_std": rep.q_std,
        "q_ace": rep.q_ace,
        "quality_hypothesis": verdict.hypothesis_holds,
        "quality_improved": verdict.improved,
        "gamma": rep.gamma,
        "gamma_analytic": rep.gamma_analytic,
        "negative_phi_fraction": rep.negative_phi_fraction,
        "second_moment": moments,
    }


def replace_alpha(cfg: GaussianModelConfig, alpha: float) -> GaussianModelConfig:
    return GaussianModelConfig(**{**asdict(cfg), "alpha": alpha})


def run_suite(
    seed: int = 0,
    instances: int = 100,
    n_samples: int = 10**6,
    inject_fault: bool = False,
    fail_fast: bool = True,
    gaussian: bool = True,
) -> tuple[dict, dict | None]:
    """Decomposition instances followed by the Gaussian grid.

    Returns ``(report, failure)``; ``failure`` holds the first failing check
    together with everything needed to replay it, or ``None``.
    """
    checks, failure = [], None
    for i in range(instances):
        inst = random_instance(seed * 100003 + i)
        res = decomposition_check(*inst, drop_residual=inject_fault)
        res["instance"] = i
        checks.append(res)
        if not res["passed"] and failure is None:
            failure = {"check": res, "instance": _instance_payload(*inst), "drop_residual": inject_fault}
            if fail_fast:
                break
    if gaussian and not (failure and fail_fast):
        for mu in GRID_MU:
            for sigma in GRID_SIGMA:
                for b in GRID_B:
                    res = gaussian_point_check(mu, sigma, b, n_samples=n_samples, seed=seed)
                    checks.append(res)
                    if not res["passed"] and failure is None:
                        failure = {"check": res}
                        if fail_fast:
                            break
                if failure and fail_fast:
                    break
            if failure and fail_fast:
                break
    defects = [c["identity_defect"] for c in checks if c["kind"] == "decomposition"]
    report = {
        "seed": seed,
        "inject_fault": inject_fault,
        "n_decomposition": len(defects),
        "n_gaussian": sum(c["kind"] == "gaussian" for c in checks),
        "max_identity_defect": max(defects) if defects else None,
        "passed": failure is None,
        "checks": checks,
    }
    return report, failure
