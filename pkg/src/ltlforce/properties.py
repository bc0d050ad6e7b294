"""Fast self-checks of the core guarantees, run by ``ltlforce property-suite``."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import mpmath
import numpy as np

from ltlforce.decode import ParseFailure, translate_batch
from ltlforce.grammar import Grammar
from ltlforce.losses import cross_entropy, forced_cross_entropy, grad_ce, grad_forced_ce, mask_logits
from ltlforce.ltl import FormulaSyntaxError, parse_kinds
from ltlforce.model import ModelDims, init_model


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_triple(rng, v=16):
    z = rng.normal(scale=3.0, size=v)
    k = int(rng.integers(1, v + 1))
    valid = np.zeros(v, dtype=bool)
    valid[rng.choice(v, size=k, replace=False)] = True
    y = int(rng.choice(np.flatnonzero(valid)))
    return z, valid, y


def check_validity(n: int = 200, seed: int = 0) -> tuple[bool, str]:
    g = Grammar(5)
    params = init_model(ModelDims(40, g.vocab.size, 16, 32), seed)
    rng = np.random.default_rng(seed)
    srcs = [rng.integers(2, 40, size=int(rng.integers(1, 12))).tolist() for _ in range(n)]
    outs = translate_batch(params, srcs, True, 64, g)
    bad = sum(isinstance(o, ParseFailure) for o in outs)
    return bad == 0, f"{n - bad}/{n} constrained decodes parse"


def check_forced_le_ce(n: int = 2000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    viol = eq_fail = 0
    for _ in range(n):
        z, valid, y = _random_triple(rng)
        if forced_cross_entropy(z, y, valid) > cross_entropy(z, y):
            viol += 1
        zm = mask_logits(z, valid)
        if forced_cross_entropy(zm, y, valid) != cross_entropy(zm, y):
            eq_fail += 1
    return viol == 0 and eq_fail == 0, f"{viol} inequality violations, {eq_fail} pre-masked mismatches"


def check_zero_grad(n: int = 2000, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    viol = 0
    for _ in range(n):
        z, valid, y = _random_triple(rng)
        viol += int(np.count_nonzero(grad_forced_ce(z, y, valid)[~valid]))
    return viol == 0, f"{viol} nonzero entries outside the valid set"


def _mp_loss(z, y, idx) -> mpmath.mpf:
    # log1p form: exactly zero when y is the only index
    return mpmath.log1p(mpmath.fsum(mpmath.exp(z[u] - z[y]) for u in idx if u != y))


def mp_central_diff(z, y, idx, h: float = 1e-5) -> np.ndarray:
    """Central differences with the loss evaluated in 50-digit arithmetic.

    Float64 evaluation would put a roundoff floor of about eps/h on every
    coordinate, which dominates when the softmax is nearly saturated.
    """
    with mpmath.workdps(50):
        out = np.zeros(len(z))
        for k in range(len(z)):
            zp, zm = [mpmath.mpf(float(v)) for v in z], [mpmath.mpf(float(v)) for v in z]
            zp[k] += mpmath.mpf(h)
            zm[k] -= mpmath.mpf(h)
            out[k] = float((_mp_loss(zp, y, idx) - _mp_loss(zm, y, idx)) / (2 * mpmath.mpf(h)))
    return out


def relative_error(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def check_loss_gradients(n: int = 50, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        z, valid, y = _random_triple(rng)
        num = mp_central_diff(z, y, range(len(z)))
        worst = max(worst, relative_error(grad_ce(z, y), num))
        num_f = mp_central_diff(z, y, np.flatnonzero(valid))
        worst = max(worst, relative_error(grad_forced_ce(z, y, valid), num_f))
    return worst <= 1e-8, f"max relative error {worst:.2e}"


def check_grammar_parser(max_len: int = 4) -> tuple[bool, str]:
    g = Grammar(2)
    n = g.vocab.size
    mismatches = total = 0
    for length in range(max_len + 1):
        for seq in itertools.product(range(n), repeat=length):
            total += 1
            ok = bool(seq) and seq[-1] == g.vocab.EOS
            if ok:
                try:
                    parse_kinds([g.vocab.kind(t) for t in seq])
                except FormulaSyntaxError:
                    ok = False
            mismatches += ok != g.accepts(seq)
    return mismatches == 0, f"{mismatches} mismatches over {total} sequences"


CHECKS = (
    ("validity", check_validity),
    ("forced_ce_le_ce", check_forced_le_ce),
    ("zero_grad_outside_valid", check_zero_grad),
    ("loss_gradients", check_loss_gradients),
    ("grammar_parser_equivalence", check_grammar_parser),
)


def run_all() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        passed, detail = fn()
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return results
