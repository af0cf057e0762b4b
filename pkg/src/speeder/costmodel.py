"""Closed-form cost/scalability model plus empirical counters.

All closed-form evaluators do plain Python arithmetic so integer inputs stay
exact (the polynomial identity below is checked bit for bit against the direct
form). Costs are unitless operation counts, not seconds.

Definitions, for prompt length N = avg_token * (n + m) + t0:

    space  = P_MRC + P_Adapters + P_LLM + n_max*d + vocab*d
    train  = T * B * L * (N^2 * d + N * d^2)           (per full run)
    infer  = L * t_out * (N * d + d^2)                 (per sample)
    fusion = (n + m) * (T_fusion + T_adapters)         (one-off, reported apart)

and the train cost is identically T*B*L*(k1*n^2 + k2*n + k3) with

    k  = m * avg_token + t0
    k1 = avg_token^2 * d
    k2 = avg_token * (2*k*d + d^2)
    k3 = k * d * (k + d)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class CostParams:
    """Parameters of one configuration in the cost model."""

    n: int = 10          # interaction-sequence length
    m: int = 5           # candidate-pool size
    avg_token: int = 2   # slots per item (index + embedding = 2; title mode ~ 20)
    t0: int = 50         # constant non-item slots in the template
    d: int = 64          # model width
    L: int = 2           # decoder layers
    B: int = 128         # batch size
    T: int = 100         # optimization steps
    t_out: int = 1       # generated answer tokens
    n_max: int = 50      # position-prompt table rows
    vocab: int = 1000    # cached items (embedding cache rows)
    p_mrc: int = 0       # compression-block parameter count
    p_adapters: int = 0  # adapter parameter count
    p_llm: int = 0       # backbone parameter count

    def with_n(self, n) -> "CostParams":
        return replace(self, n=n)


def prompt_len(p: CostParams):
    """Slot count N of one assembled prompt."""
    return p.avg_token * (p.n + p.m) + p.t0


def space_cost(p: CostParams) -> dict:
    """Itemized parameter/state scalar counts; 'total' sums the items."""
    items = {
        "p_mrc": p.p_mrc,
        "p_adapters": p.p_adapters,
        "p_llm": p.p_llm,
        "ppl_table": p.n_max * p.d,
        "embedding_cache": p.vocab * p.d,
    }
    items["total"] = sum(items.values())
    return items


def fusion_overhead(p: CostParams, t_fusion, t_adapters):
    """One-off per-sequence encoding/adaptation work, kept out of train_cost."""
    return (p.n + p.m) * (t_fusion + t_adapters)


def train_cost(p: CostParams):
    """Full-run optimization cost: T*B*L*(N^2 d + N d^2)."""
    N = prompt_len(p)
    return p.T * p.B * p.L * (N * N * p.d + N * p.d * p.d)


def train_cost_coeffs(p: CostParams):
    """Quadratic-in-n coefficients (k1, k2, k3) of the per-step core cost."""
    k = p.m * p.avg_token + p.t0
    k1 = p.avg_token * p.avg_token * p.d
    k2 = p.avg_token * (2 * k * p.d + p.d * p.d)
    k3 = k * p.d * (k + p.d)
    return k1, k2, k3


def train_cost_poly(p: CostParams):
    """Train cost via the expanded polynomial; identical to train_cost."""
    k1, k2, k3 = train_cost_coeffs(p)
    return p.T * p.B * p.L * (k1 * p.n * p.n + k2 * p.n + k3)


def infer_cost(p: CostParams):
    """Per-sample generation cost: L*t_out*(N d + d^2)."""
    N = prompt_len(p)
    return p.L * p.t_out * (N * p.d + p.d * p.d)


def train_improvement(baseline: CostParams, fast: CostParams, n):
    """Relative training speedup I(n) = C_baseline/C_fast - 1 at sequence length n."""
    return train_cost(baseline.with_n(n)) / train_cost(fast.with_n(n)) - 1.0


def infer_improvement(baseline: CostParams, fast: CostParams, n):
    return infer_cost(baseline.with_n(n)) / infer_cost(fast.with_n(n)) - 1.0


def improvement_limits(baseline: CostParams, fast: CostParams) -> tuple[float, float]:
    """n -> infinity limits of the improvement ratios.

    Training is dominated by the N^2 d term, so the limit is
    (avg_b/avg_f)^2 - 1; inference is linear in both N and t_out, giving
    (t_b*avg_b)/(t_f*avg_f) - 1. With the reference setting (20 vs 2 tokens
    per item, 20 vs 1 output tokens) these are 99 and 199.
    """
    r = baseline.avg_token / fast.avg_token
    train_lim = r * r - 1.0
    infer_lim = (baseline.t_out * baseline.avg_token) / (fast.t_out * fast.avg_token) - 1.0
    return train_lim, infer_lim


def improvement_curve(baseline: CostParams, fast: CostParams, n_grid) -> list[dict]:
    """Improvement ratios over a grid of sequence lengths."""
    rows = []
    for n in n_grid:
        n = int(n)
        rows.append(
            {
                "n": n,
                "N_baseline": prompt_len(baseline.with_n(n)),
                "N_fast": prompt_len(fast.with_n(n)),
                "train_improvement": train_improvement(baseline, fast, n),
                "infer_improvement": infer_improvement(baseline, fast, n),
            }
        )
    return rows


def log_grid(lo: int, hi: int, points: int) -> list[int]:
    """Integer log-spaced grid, deduplicated, endpoints included."""
    if lo < 1 or hi < lo:
        raise ValueError(f"bad grid bounds [{lo}, {hi}]")
    import math

    out = []
    for i in range(points):
        f = i / max(1, points - 1)
        out.append(round(math.exp(math.log(lo) + f * (math.log(hi) - math.log(lo)))))
    seen = set()
    uniq = [x for x in out if not (x in seen or seen.add(x))]
    return uniq


# -- empirical counters ---------------------------------------------------


def empirical_counters(run_fn, repeats: int = 3) -> dict:
    """Measure a callable: wall time (median of repeats) plus its FLOP proxy.

    ``run_fn`` must execute one unit of work (e.g. one training step or one
    decoded sample) when called. The FLOP proxy counts matmul products
    recorded by the numerics layer during the final call.
    """
    from .numerics import count_flops

    times = []
    flops = 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        with count_flops() as c:
            run_fn()
        times.append(time.perf_counter() - t0)
        flops = c.total
    times.sort()
    return {"wall_seconds": times[len(times) // 2], "flop_proxy": flops}
