"""Portfolio scaling, information ratio and a rank-game competition simulator."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

ASSET_WEIGHT = 0.0025
SHORT_LADDER = (0, 10, 100)


class BankruptcyError(ArithmeticError):
    pass


class UndefinedIRError(ArithmeticError):
    pass


@dataclass
class PortfolioWeights:
    weights: np.ndarray
    alpha: float
    w_tilde: np.ndarray | None
    degenerate: bool


def decompose(w) -> PortfolioWeights:
    """Split weights into gross exposure ``alpha = sum|w|`` and scaleless ``w / alpha``."""
    w = np.asarray(w, dtype=np.float64)
    alpha = float(np.abs(w).sum())
    if alpha == 0.0:
        return PortfolioWeights(w, 0.0, None, True)
    return PortfolioWeights(w, alpha, w / alpha, False)


def round_log_returns(weights, returns) -> np.ndarray:
    """``ln(1 + sum_m w[t, m] * r[t, m])`` per round."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    returns = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    if weights.shape != returns.shape:
        raise ValueError(f"weights {weights.shape} and returns {returns.shape} differ")
    gross = 1.0 + (weights * returns).sum(axis=1)
    if np.any(gross <= 0):
        raise BankruptcyError("portfolio lost everything in some round")
    return np.log(gross)


def ir_from_log_returns(ret) -> float:
    ret = np.asarray(ret, dtype=np.float64)
    if ret.size < 2:
        raise UndefinedIRError("IR needs at least two rounds")
    sd = ret.std(ddof=1)
    if sd == 0:
        raise UndefinedIRError("zero standard deviation of round returns")
    return float(ret.sum() / sd)


def information_ratio(weights, returns) -> tuple[float, np.ndarray]:
    ret = round_log_returns(weights, returns)
    return ir_from_log_returns(ret), ret


def ir_curve(x: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """IR of log returns ``ln(1 + alpha * x)`` for paths ``x`` (..., T) and each alpha.

    Returns an array of shape (..., len(alphas)).
    """
    x = np.asarray(x, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    g = 1.0 + x[..., None, :] * alphas[:, None]
    if np.any(g <= 0):
        raise BankruptcyError("scaled portfolio lost everything in some round")
    ret = np.log(g)
    sd = ret.std(axis=-1, ddof=1)
    if np.any(sd == 0):
        raise UndefinedIRError("zero standard deviation of round returns")
    return ret.sum(axis=-1) / sd


@dataclass
class ScalingCurve:
    alphas: np.ndarray
    ir: np.ndarray
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if tot == 0 else 1.0 - float(resid @ resid) / tot
    return float(slope), float(intercept), float(r2)


def scaling_curve(w_tilde, returns, alphas) -> ScalingCurve:
    """IR as a function of the gross exposure for fixed scaleless weights.

    ``w_tilde`` is (n,) (held every round) or (T, n); ``returns`` is (T, n).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("alpha grid must lie in (0, 1]")
    returns = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    x = (np.broadcast_to(w_tilde, returns.shape) * returns).sum(axis=1)
    ir = ir_curve(x, alphas)
    slope, intercept, r2 = linear_fit(alphas, ir)
    return ScalingCurve(alphas, ir, slope, intercept, r2)


# rank-aware shorting -----------------------------------------------------------

def adversarial_policy(rank: int, n_participants: int, thresholds: tuple[int, int] = (20, 80),
                       ladder: Sequence[int] = SHORT_LADDER) -> int:
    """Number of short positions given the current leaderboard rank.

    Safe ranks (``<= thresholds[0]``) stay fully long, middling ranks short
    a few assets, hopeless ranks go fully short.
    """
    safe, risky = thresholds
    if not 0 <= safe <= risky <= n_participants:
        raise ValueError(f"invalid thresholds {thresholds} for {n_participants} participants")
    if not 1 <= rank <= n_participants:
        raise ValueError(f"rank {rank} outside [1, {n_participants}]")
    if rank <= safe:
        return ladder[0]
    if rank <= risky:
        return ladder[1]
    return ladder[2]


@dataclass
class PolicyState:
    n_short: int = 0
    round_index: int = 0
    rank: int | None = None
    target_rank: int = 20
    magnitude: float = ASSET_WEIGHT
    n_assets: int = 100

    @property
    def n_long(self) -> int:
        return self.n_assets - self.n_short


def signed_weights(n_short: np.ndarray, n_assets: int, rng: np.random.Generator,
                   magnitude: float = ASSET_WEIGHT) -> np.ndarray:
    """Rows of ``+magnitude`` with ``n_short[i]`` randomly chosen entries negated."""
    n_short = np.asarray(n_short)
    keys = rng.random((len(n_short), n_assets))
    order = np.argsort(keys, axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n_assets)[None, :].repeat(len(n_short), 0), axis=1)
    short = ranks < n_short[:, None]
    return np.where(short, -magnitude, magnitude)


# competition simulator ------------------------------------------------------------

@dataclass
class MarketConfig:
    n_assets: int = 100
    factor_mean: float = 0.01
    factor_vol: float = 0.05
    idio_vol: float = 0.08
    beta_dispersion: float = 0.2


@dataclass
class CompetitorConfig:
    # weight on a random sparse long-biased tilt; 0 makes everyone hold the market
    selection_noise: float = 0.2
    inclusion_prob: float = 0.2
    long_prob: float = 0.9
    alpha: float = 0.25
    # per-round return shock drawn independently for every participant, ours included;
    # lowers the correlation between participants
    participant_vol: float = 0.01


def simulate_returns(rng: np.random.Generator, n_paths: int, n_rounds: int,
                     market: MarketConfig | None = None) -> np.ndarray:
    """Factor-model asset returns per 4-week round, shape (paths, rounds, assets)."""
    market = market or MarketConfig()
    betas = 1.0 + market.beta_dispersion * rng.standard_normal((n_paths, 1, market.n_assets))
    f = market.factor_mean + market.factor_vol * rng.standard_normal((n_paths, n_rounds, 1))
    e = market.idio_vol * rng.standard_normal((n_paths, n_rounds, market.n_assets))
    return np.clip(betas * f + e, -0.95, None)


def _competitor_weights(rng, shape, n_assets, comp: CompetitorConfig) -> np.ndarray:
    incl = rng.random((*shape, n_assets)) < comp.inclusion_prob
    sign = np.where(rng.random((*shape, n_assets)) < comp.long_prob, 1.0, -1.0)
    tilt = incl * sign
    gross = np.abs(tilt).sum(axis=-1, keepdims=True)
    tilt = np.divide(tilt, gross, out=np.full_like(tilt, 1.0 / n_assets), where=gross > 0)
    base = np.full(n_assets, 1.0 / n_assets)
    return comp.alpha * ((1 - comp.selection_noise) * base + comp.selection_noise * tilt)


def _cumulative_scores(logret: np.ndarray) -> np.ndarray:
    """Leaderboard score after each round: IR once two rounds exist, else the log return.

    ``logret`` is (..., T); returns (..., T).
    """
    T = logret.shape[-1]
    out = np.empty_like(logret)
    csum = np.cumsum(logret, axis=-1)
    out[..., 0] = logret[..., 0]
    for t in range(1, T):
        sd = logret[..., : t + 1].std(axis=-1, ddof=1)
        out[..., t] = csum[..., t] / np.where(sd > 0, sd, np.inf)
    return out


def leaderboard(scores: np.ndarray) -> np.ndarray:
    """1-based ranks along the last axis, best score first.

    Ties are broken by participant index (lower index ranks higher), so our
    slot, always the last, loses every tie.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=-1, kind="stable")
    ranks = np.empty(order.shape, dtype=np.int64)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(1, scores.shape[-1] + 1), order.shape).copy(),
                      axis=-1)
    return ranks


def _rank_of_last(scores: np.ndarray) -> np.ndarray:
    """1-based rank (higher score = better) of the last participant; ties go against it."""
    ours = scores[..., -1:]
    return 1 + (scores[..., :-1] >= ours).sum(axis=-1)


Policy = Callable[[np.ndarray, int], np.ndarray]


def static_policy(ranks: np.ndarray, n_participants: int) -> np.ndarray:
    return np.zeros_like(ranks)


def make_adaptive_policy(thresholds=(20, 80), ladder=SHORT_LADDER) -> Policy:
    safe, risky = thresholds

    def policy(ranks: np.ndarray, n_participants: int) -> np.ndarray:
        if not 0 <= safe <= risky <= n_participants:
            raise ValueError(f"invalid thresholds {thresholds}")
        return np.where(ranks <= safe, ladder[0], np.where(ranks <= risky, ladder[1], ladder[2]))

    return policy


@dataclass
class PolicyOutcome:
    final_rank: np.ndarray
    final_ir: np.ndarray
    cumulative_return: np.ndarray
    ranks: np.ndarray


@dataclass
class SimulationResult:
    outcomes: dict[str, PolicyOutcome]
    n_participants: int
    n_rounds: int
    replications: int
    seed: int
    summary: dict = field(default_factory=dict)


def _summarise(outcomes: dict[str, PolicyOutcome], ks=(1, 5, 10, 20)) -> dict:
    summary = {}
    for name, out in outcomes.items():
        R = len(out.final_rank)
        entry = {}
        for k in ks:
            p = float(np.mean(out.final_rank <= k))
            entry[f"p_top{k}"] = p
            entry[f"se_top{k}"] = float(np.sqrt(p * (1 - p) / R))
        entry["mean_rank"] = float(out.final_rank.mean())
        entry["mean_cumulative_return"] = float(out.cumulative_return.mean())
        entry["se_cumulative_return"] = float(out.cumulative_return.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0
        summary[name] = entry
    names = list(outcomes)
    if len(names) >= 2:
        a, b = outcomes[names[0]], outcomes[names[1]]
        for k in ks:
            d = (a.final_rank <= k).astype(float) - (b.final_rank <= k).astype(float)
            se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
            summary[f"diff_top{k}_{names[0]}_minus_{names[1]}"] = {
                "mean": float(d.mean()), "se": se,
                "ci95": [float(d.mean() - 1.96 * se), float(d.mean() + 1.96 * se)]}
        d = a.cumulative_return - b.cumulative_return
        se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
        summary[f"diff_return_{names[0]}_minus_{names[1]}"] = {
            "mean": float(d.mean()), "se": se,
            "ci95": [float(d.mean() - 1.96 * se), float(d.mean() + 1.96 * se)]}
    return summary


def simulate_competition(policies: dict[str, Policy | str], n_participants: int = 163, n_rounds: int = 12,
                         replications: int = 10_000, seed: int = 0,
                         market: MarketConfig | None = None, competitors: CompetitorConfig | None = None,
                         chunk: int = 250) -> SimulationResult:
    """Monte Carlo of the investment leaderboard.

    Every replication draws one market path and ``n_participants - 1``
    competitor portfolios per round; all policies are evaluated against the
    same draws (common random numbers).  A policy maps the current ranks
    (after the previous round) to a number of short positions; the string
    ``"competitor"`` makes our slot draw from the competitor law instead.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    market = market or MarketConfig()
    competitors = competitors or CompetitorConfig()
    n_assets, N, T = market.n_assets, n_participants, n_rounds
    root = np.random.SeedSequence(seed)
    chunk_seeds = root.spawn((replications + chunk - 1) // chunk)
    acc = {name: ([], [], [], []) for name in policies}
    for c, ss in enumerate(chunk_seeds):
        R = min(chunk, replications - c * chunk)
        market_rng, comp_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        r = simulate_returns(market_rng, R, T, market)
        comp_ret = np.empty((R, T, N - 1))
        for t in range(T):
            w = _competitor_weights(comp_rng, (R, N - 1), n_assets, competitors)
            comp_ret[:, t] = np.einsum("rna,ra->rn", w, r[:, t])
        comp_ret += competitors.participant_vol * comp_rng.standard_normal(comp_ret.shape)
        comp_log = np.log1p(comp_ret)
        for p_idx, (name, policy) in enumerate(policies.items()):
            prng = np.random.default_rng(np.random.SeedSequence([seed, c, p_idx]))
            shock = competitors.participant_vol * prng.standard_normal((R, T))
            our_log = np.empty((R, T))
            our_simple = np.empty((R, T))
            ranks = np.empty((R, T), dtype=np.int64)
            current = np.ones(R, dtype=np.int64)
            for t in range(T):
                if policy == "competitor":
                    w = _competitor_weights(prng, (R,), n_assets, competitors)
                else:
                    n_short = np.asarray(policy(current, N)) if t > 0 else np.zeros(R, dtype=np.int64)
                    w = signed_weights(n_short, n_assets, prng)
                our_simple[:, t] = (w * r[:, t]).sum(axis=1) + shock[:, t]
                our_log[:, t] = np.log1p(our_simple[:, t])
                logs = np.concatenate([comp_log[:, : t + 1], our_log[:, : t + 1, None]], axis=2)
                scores = _cumulative_scores(np.moveaxis(logs, 1, 2))[..., t]
                current = _rank_of_last(scores)
                ranks[:, t] = current
            final_ir = our_log.sum(axis=1) / our_log.std(axis=1, ddof=1)
            acc[name][0].append(ranks[:, -1])
            acc[name][1].append(final_ir)
            acc[name][2].append(np.prod(1.0 + our_simple, axis=1) - 1.0)
            acc[name][3].append(ranks)
    outcomes = {name: PolicyOutcome(*(np.concatenate(v) for v in vals)) for name, vals in acc.items()}
    res = SimulationResult(outcomes, N, T, replications, seed)
    res.summary = _summarise(outcomes)
    return res


@dataclass
class ScalingExperiment:
    alphas: np.ndarray
    ir: np.ndarray              # (paths, len(alphas))
    frac_low_beats_high: float  # share of paths with IR(low) > IR(high)
    low: float
    high: float
    mean_curve: ScalingCurve    # linear fit of the path-averaged IR curve


def scaling_experiment(n_paths: int = 1000, n_rounds: int = 12, alphas=None, seed: int = 0,
                       market: MarketConfig | None = None, low: float = 0.25, high: float = 1.0
                       ) -> ScalingExperiment:
    """IR against gross exposure for an equal-weight long book on simulated paths."""
    market = market or MarketConfig()
    alphas = np.round(np.arange(0.05, 1.0 + 1e-9, 0.05), 10) if alphas is None else np.asarray(alphas, float)
    grid = np.union1d(alphas, [low, high])
    rng = np.random.default_rng(seed)
    r = simulate_returns(rng, n_paths, n_rounds, market)
    w_tilde = np.full(market.n_assets, 1.0 / market.n_assets)
    x = (r * w_tilde).sum(axis=-1)
    ir = ir_curve(x, grid)
    i_low, i_high = np.searchsorted(grid, low), np.searchsorted(grid, high)
    frac = float(np.mean(ir[:, i_low] > ir[:, i_high]))
    keep = np.isin(grid, alphas)
    mean_ir = ir[:, keep].mean(axis=0)
    slope, intercept, r2 = linear_fit(grid[keep], mean_ir)
    return ScalingExperiment(grid[keep], ir[:, keep], frac, low, high,
                             ScalingCurve(grid[keep], mean_ir, slope, intercept, r2))


def write_scaling(exp: ScalingExperiment, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "mean_ir", "sd_ir"])
        for a, col in zip(exp.alphas, exp.ir.T):
            w.writerow([repr(float(a)), repr(float(col.mean())), repr(float(col.std(ddof=1)))])
    c = exp.mean_curve
    doc = {"n_paths": int(exp.ir.shape[0]), "low": exp.low, "high": exp.high,
           "frac_low_beats_high": exp.frac_low_beats_high,
           "slope": c.slope, "intercept": c.intercept, "r2": c.r2}
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def write_simulation(result: SimulationResult, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "replication", "final_rank", "final_IR", "cumulative_return"])
        for name, out in result.outcomes.items():
            for i in range(len(out.final_rank)):
                w.writerow([name, i, int(out.final_rank[i]), repr(float(out.final_ir[i])),
                            repr(float(out.cumulative_return[i]))])
    doc = {"n_participants": result.n_participants, "n_rounds": result.n_rounds,
           "replications": result.replications, "seed": result.seed, "summary": result.summary}
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
