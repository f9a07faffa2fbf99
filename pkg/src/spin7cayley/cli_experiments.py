"""Command-line runner for the numerical experiments.

Every subcommand builds a ResultTable with a ``pass`` column; the exit code is
0 exactly when every row passes.  Tables are written as CSV or JSON, wall
time and the config digest go to stderr so that the table itself is
byte-identical for identical (config, seed).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from . import calibration_structures as cs
from . import cayley_geometry as cg
from . import deformation_bvp as bvp
from . import nonlinear_cayley as nl
from . import spin7_algebra as alg

DEFAULT_TOLERANCES = {
    "algebra": 1e-10,      # pointwise identities
    "rank_gap": 1e6,       # singular-value gap ratio
    "newton": 1e-10,       # Newton residual
    "greens": 1e-6,        # compactly supported Green's residual
    "volume": 1e-6,        # relative flux drift
    "bsmetric": 1e-5,      # Christoffel symbols at the zero section
}

# which tolerance --tol overrides for each subcommand
TOL_KEY = {"identities": "algebra", "symbols": "algebra", "moduli": "rank_gap",
           "newton": "newton", "greens": "greens", "volume": "volume",
           "bsmetric": "bsmetric"}

DEFAULT_LADDER = {"moduli": (4, 5, 6), "greens": (8, 12, 16, 24)}
DEFAULT_TRIALS = {"identities": 10_000, "symbols": 1000, "volume": 100}

NEWTON_MAX_STEPS = 6
QUADRATIC_BOUND = 100.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    n: int = 6
    lengths: tuple = (1.0, 1.0, 1.0, 1.0)
    k: int | None = None
    eps: float | None = None
    trials: int | None = None
    ladder: tuple | None = None
    workers: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(self.tolerances or {})
        self.tolerances = tol
        self.lengths = tuple(float(v) for v in self.lengths)
        if self.ladder is not None:
            self.ladder = tuple(int(v) for v in self.ladder)
        self.validate()

    def validate(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        for key, v in self.tolerances.items():
            if not v > 0:
                raise ValueError(f"tolerance {key!r} must be positive")
        for n in (self.n,) + (self.ladder or ()):
            if n < 4:
                raise ValueError("grid size must be at least 4")
        if len(self.lengths) != 4 or min(self.lengths) <= 0:
            raise ValueError("lengths must be four positive numbers")
        if self.k is not None and not 0 <= self.k <= 4:
            raise ValueError("k must lie in 0..4")
        if self.trials is not None and self.trials < 1:
            raise ValueError("trials must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        grid = raw.pop("grid", {})
        if "n" in grid:
            raw["n"] = grid["n"]
        if "lengths" in grid:
            raw["lengths"] = grid["lengths"]
        known = set(cls.__dataclass_fields__)
        extra = {k: raw.pop(k) for k in list(raw) if k not in known}
        raw.setdefault("params", {}).update(extra)
        return cls(**raw)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResultTable:
    header: list
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *row):
        if len(row) != len(self.header):
            raise ValueError("row length does not match the header")
        self.rows.append(list(row))

    @property
    def passed(self) -> bool:
        if "pass" not in self.header:
            return True
        j = self.header.index("pass")
        # rows whose pass cell is blank are informational
        return all(bool(r[j]) for r in self.rows if r[j] not in ("", None))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def to_json(self) -> str:
        objs = [{h: _json_value(v) for h, v in zip(self.header, r)} for r in self.rows]
        return json.dumps(objs, indent=1) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return "" if v is None else str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(f"{float(v):.6e}")
    return v


def cell_rng(seed: int, key: str) -> np.random.Generator:
    """Counter-based generator for one experiment cell."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(key.encode())])
    return np.random.Generator(np.random.Philox(ss))


def run_cells(fn, cells, workers: int = 1):
    """Evaluate fn on each cell; results come back in cell-key order."""
    cells = sorted(cells, key=lambda c: c[0])
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, cells))
    return [fn(c) for c in cells]


def _domain(cfg: ExperimentConfig, n=None) -> bvp.FlatCayleyDomain:
    return bvp.FlatCayleyDomain(cfg.n if n is None else n, cfg.lengths)


def fitted_order(hs, res) -> float:
    return float(np.polyfit(np.log(hs), np.log(res), 1)[0])


# ---------------------------------------------------------------------------
# identities

def cmd_identities(cfg: ExperimentConfig) -> ResultTable:
    tol = cfg.tolerances["algebra"]
    samples = cfg.trials or DEFAULT_TRIALS["identities"]
    rng = cell_rng(cfg.seed, "identities")
    t = ResultTable(["identity", "samples", "value", "tol", "pass"])

    for name, v in alg.algebra_identity_residuals(rng, samples).items():
        t.add(name, samples, v, tol, v < tol)

    ev = np.linalg.eigvalsh(alg.star_wedge_matrix(alg.phi0()))
    lo, hi = ev[:7], ev[7:]
    dev = float(max(np.max(np.abs(lo + 3)), np.max(np.abs(hi - 1))))
    t.add("star_wedge_spectrum(-3x7,+1x21)", 1, dev, cs.SPECTRUM_TOL, dev < cs.SPECTRUM_TOL)
    P = alg.lambda4_projectors()
    keys = ("1", "7", "27", "35")
    dims = tuple(int(round(np.trace(P[k]))) for k in keys)
    orth = max(float(np.max(np.abs(P[a] @ P[b]))) for a in keys for b in keys if a < b)
    orth = max(orth, float(np.max(np.abs(sum(P[k] for k in keys) - np.eye(70)))))
    t.add(f"lambda4_dims{dims}", 1, orth, tol, dims == (1, 7, 27, 35) and orth < tol)

    nf = max(samples // 10, 1)
    worst = 0.0
    for _ in range(nf):
        worst = max(worst, cg.frame_pattern_residual(cg.random_spin7_frame(rng)))
    t.add("frame_completion", nf, worst, tol, worst < tol)

    lam_max, agree = -np.inf, 0
    for i in range(samples):
        if i % 2:
            V = cg.random_cayley_plane(rng).tangent
            if i % 4 == 1:
                V = V[[1, 0, 2, 3]]
        else:
            V = rng.normal(size=(4, 8))
        lam = cg.calibration_value(V)
        lam_max = max(lam_max, abs(lam))
        agree += (abs(abs(lam) - 1) < 1e-10) == cg.is_cayley(V)
    t.add("calibration_inequality", samples, lam_max - 1, 1e-12, lam_max <= 1 + 1e-12)
    t.add("cayley_iff_tau_zero_rate", samples, agree / samples, 1.0, agree == samples)

    nl_s = max(samples // 10, 1)
    w1 = w2 = w3 = 0.0
    for _ in range(nl_s):
        plane = cg.random_cayley_plane(rng)
        fib = cg.scaffold_fiber(plane, int(rng.integers(1, 5)),
                                _random_rotation(rng))
        e = rng.normal(size=28)
        w1 = max(w1, cg.structure_variation_identity(e, plane, fib))
        w2 = max(w2, cg.b_tilde_cancellation(e, plane, fib))
        w3 = max(w3, max(cg.restriction_law_residuals(plane, rng, 4).values()))
    t.add("structure_variation_F_H", nl_s, w1, tol, w1 < tol)
    t.add("structure_variation_B_cancel", nl_s, w2, tol, w2 < tol)
    t.add("cross_restriction_laws", nl_s, w3, tol, w3 < tol)
    return t


def _random_rotation(rng) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(4, 4)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


# ---------------------------------------------------------------------------
# moduli

def _moduli_cell(cell):
    key, k, n, lengths, gap, seed, rotate = cell
    rng = cell_rng(seed, key)
    R = _random_rotation(rng) if rotate else np.eye(4)
    dom = bvp.FlatCayleyDomain(n, lengths)
    sys_ = bvp.assemble_bvp(dom, bvp.BCSpec(k, R))
    rep = bvp.kernel_dim(sys_, gap=gap, vectors=True, method="fourier")
    rep_t = bvp.kernel_dim(bvp._transpose_system(sys_), gap=gap, method="fourier")
    dev = bvp.constant_kernel_deviation(sys_, rep.basis) if rep.basis is not None else np.nan
    tail = ";".join(f"{v:.3e}" for v in rep.sigma[-(k + 2):])
    return (k, n, rep.dim, rep_t.dim, rep.gap_ratio, tail, dev, sys_.is_square)


def cmd_moduli(cfg: ExperimentConfig) -> ResultTable:
    gap = cfg.tolerances["rank_gap"]
    ks = [cfg.k] if cfg.k is not None else list(range(5))
    ns = cfg.ladder or DEFAULT_LADDER["moduli"]
    rotate = bool(cfg.params.get("rotate", False))
    cells = [(f"moduli/k={k}/n={n}", k, n, cfg.lengths, gap, cfg.seed, rotate)
             for k in ks for n in ns]
    t = ResultTable(["k", "n", "kernel_dim", "transpose_dim", "gap_ratio",
                     "smallest_sigma", "constant_deviation", "square", "pass"])
    for k, n, d, dt, ratio, tail, dev, sq in run_cells(_moduli_cell, cells, cfg.workers):
        ok = d == k and dt == k and sq and ratio > gap and (k != 4 or dev < 1e-8)
        t.add(k, n, "indeterminate" if d is None else d, dt, ratio, tail, dev, sq, ok)
    return t


# ---------------------------------------------------------------------------
# Green's formula

def greens_fields(dom: bvp.FlatCayleyDomain):
    """Fixed analytic test fields with non-oscillatory parts."""
    x1, x2, x3, x4 = dom.coords()
    p = 2 * np.pi
    s = np.stack([np.sin(p * x1) * np.cos(x4) + np.exp(x4),
                  np.cos(p * x2) * np.exp(x4) + x4**2,
                  1 + np.sin(p * (x1 + x3)) * x4,
                  np.cos(2 * x4)], axis=-1)
    t = np.stack([np.cos(p * x3) * x4 + np.sin(x4),
                  1 + x4**3,
                  np.exp(-x4) * (2 + np.cos(p * x2)),
                  np.cosh(x4) + np.sin(p * (x2 - x3))], axis=-1)
    return s, t


def compact_fields(dom: bvp.FlatCayleyDomain):
    X = dom.coords()
    r2 = sum((x - 0.5) ** 2 for x in X) / 0.35**2
    b = np.where(r2 < 1, np.exp(1 - 1 / np.maximum(1 - r2, 1e-300)), 0.0)
    s = b[..., None] * np.array([1.0, -0.5, 0.25, 2.0])
    t = (b * np.sin(2 * np.pi * X[0]))[..., None] * np.array([0.3, 1.0, -1.0, 0.5])
    return s, t


def cmd_greens(cfg: ExperimentConfig) -> ResultTable:
    ns = cfg.ladder or DEFAULT_LADDER["greens"]
    t = ResultTable(["case", "n", "residual", "order", "pass"])
    res, hs = [], []
    for n in ns:
        dom = _domain(cfg, n)
        r = bvp.greens_residual(dom, *greens_fields(dom))
        res.append(r)
        hs.append(float(np.max(dom.h)))
        t.add("analytic", n, r, "", "")
    order = fitted_order(hs, res) if len(ns) > 1 else np.nan
    mono = all(b < a for a, b in zip(res, res[1:]))
    t.add("analytic_fit", ns[-1], res[-1], order, mono and order >= 1)
    dom = _domain(cfg, 16)
    rc = bvp.greens_residual(dom, *compact_fields(dom))
    tol = cfg.tolerances["greens"]
    t.add("compact", 16, rc, "", rc < tol)
    return t


# ---------------------------------------------------------------------------
# symbols

def cmd_symbols(cfg: ExperimentConfig) -> ResultTable:
    trials = cfg.trials or DEFAULT_TRIALS["symbols"]
    tol = cfg.tolerances["algebra"]
    rng = cell_rng(cfg.seed, "symbols")
    iso = 0.0
    for _ in range(trials):
        xi = rng.normal(size=4)
        S = bvp.interior_symbol(xi)
        iso = max(iso, float(np.max(np.abs(S.T @ S - (xi @ xi) * np.eye(4)))) / (xi @ xi))
    t = ResultTable(["check", "k", "samples", "value", "pass"])
    t.add("interior_isometry", "", trials, iso, iso < max(tol * 1e-2, 1e-12))
    ks = [cfg.k] if cfg.k is not None else list(range(5))
    for k in ks:
        worst = 0.0
        for _ in range(trials):
            xi = rng.normal(size=3)
            worst = max(worst, bvp.boundary_symbol_check(xi, k, _random_rotation(rng)))
        t.add("boundary_condition_number", k, trials, worst, bool(np.isfinite(worst) and worst < 1e12))
    return t


# ---------------------------------------------------------------------------
# Newton

def translation_perturbation(dom, eps: float, direction=(0.3, -0.2, 0.1, 0.5)):
    d = np.asarray(direction, float)
    vals = np.broadcast_to(eps * d, (2,) + dom.shape[:3] + (4,)).copy()
    return nl.ScaffoldPerturbation(vals), eps * d


def smooth_start(dom, amplitude: float) -> np.ndarray:
    """Interior perturbation vanishing on the boundary and depending on all coordinates."""
    x1, x2, x3, x4 = dom.coords()
    p = 2 * np.pi
    w = np.sin(np.pi * x4 / dom.lengths[3])
    f = np.stack([np.sin(p * x1) * np.cos(p * x2), np.cos(p * x3) * np.sin(p * x2),
                  np.sin(p * (x1 + x3)), np.cos(p * (x2 - x1))], axis=-1)
    return amplitude * w[..., None] * f


def dump_field(values: np.ndarray) -> str:
    """Plain-text records: i1 i2 i3 i4 s1 s2 s3 s4."""
    lines = []
    for idx in np.ndindex(values.shape[:-1]):
        lines.append(" ".join(map(str, idx)) + " " + " ".join(f"{v:.17e}" for v in values[idx]))
    return "\n".join(lines) + "\n"


def cmd_newton(cfg: ExperimentConfig) -> ResultTable:
    k = 0 if cfg.k is None else cfg.k
    eps = 1e-2 if cfg.eps is None else cfg.eps
    amp = float(cfg.params.get("start_amplitude", 0.03))
    dom = _domain(cfg)
    R = _random_rotation(cell_rng(cfg.seed, "newton")) if cfg.params.get("rotate") else np.eye(4)
    bc = bvp.BCSpec(k, R)
    pert, expected = translation_perturbation(dom, eps)
    t = ResultTable(["start", "iteration", "residual", "ratio_to_square", "pass"])
    tol = cfg.tolerances["newton"]
    for label, s0 in (("zero", None), ("perturbed", expected + smooth_start(dom, amp))):
        res = nl.newton_solve(dom, bc, pert, s0=s0, tol=tol)
        for i, r in enumerate(res.trace):
            prev = res.trace[i - 1] if i else None
            ratio = r / prev**2 if prev else ""
            t.add(label, i, r, ratio, "")
        err = float(np.max(np.abs(res.solution - expected)))
        q = nl.quadratic_rate(res.trace)
        ok = res.converged and res.iterations <= NEWTON_MAX_STEPS and err < 1e-8 and q < QUADRATIC_BOUND
        t.add(label + "_error_vs_translation", res.iterations, err, q, ok)
        t.metadata.setdefault("solutions", {})[label] = res.solution
    return t


# ---------------------------------------------------------------------------
# volume and flux

def cmd_volume(cfg: ExperimentConfig) -> ResultTable:
    trials = cfg.trials or DEFAULT_TRIALS["volume"]
    dom = _domain(cfg, cfg.params.get("volume_n", 8))
    tol = cfg.tolerances["volume"]
    flat = float(np.sum(dom.weights()))
    w = dom.weights()
    t = ResultTable(["trial", "volume", "flux", "excess", "F_squared", "min_margin", "pass"])
    excess, fsq = [], []
    for i in range(trials):
        rng = cell_rng(cfg.seed, f"volume/{i}")
        g = nl.random_bumps(dom, rng, count=8, amplitude=float(rng.uniform(0.005, 0.025)),
                            radius=0.35)
        r = nl.volume_and_flux(g)
        F = nl.cayley_residual(g)
        f2 = float(np.sum(w * np.sum(F**2, axis=-1)))
        drift = abs(r.flux - flat) / flat
        mm = float(np.min(r.margin))
        ok = drift < tol and r.volume > flat and mm >= -1e-12
        excess.append(r.volume - r.flux)
        fsq.append(f2)
        t.add(i, r.volume, r.flux, r.volume - r.flux, f2, mm, ok)
    rho = float(spearmanr(excess, fsq).statistic) if trials > 2 else np.nan
    t.add("spearman", "", "", "", "", rho, bool(rho > 0.9))
    return t


# ---------------------------------------------------------------------------
# Bryant-Salamon local model

def cmd_bsmetric(cfg: ExperimentConfig) -> ResultTable:
    rng = cell_rng(cfg.seed, "bsmetric")
    anti = lambda M: M - np.swapaxes(M, -1, -2)
    scale = float(cfg.params.get("gauge_scale", 0.3))
    model = cs.WarpedMetricModel(anti(rng.normal(size=(4, 4, 4))),
                                 anti(rng.normal(size=(4, 4, 4, 4))),
                                 # a non-orthogonal fibre gauge makes the h^2 error visible
                                 rng.normal(size=(4, 4, 4)) * scale)
    x0 = rng.normal(size=4) * 0.1
    hs = [float(h) for h in cfg.params.get("h_ladder", (2e-3, 1e-3, 5e-4))]
    vals = [cs.christoffel_fiber_check(model, h, x0) for h in hs]
    order = float(np.log2(vals[0] / vals[1])) if len(hs) > 1 else np.nan
    tol = cfg.tolerances["bsmetric"]
    t = ResultTable(["quantity", "h", "value", "pass"])
    fs, fn = cs.bs_warping(0.0)
    t.add("f_s(0)", "", fs, fs == 5.0)
    t.add("f_nu(0)", "", fn, fn == 4.0)
    for h, v in zip(hs, vals):
        t.add("max_christoffel", h, v, v < tol if h <= 1e-3 else "")
    t.add("observed_order", hs[1] if len(hs) > 1 else "", order, order >= 1.9)
    return t


COMMANDS = {
    "identities": cmd_identities,
    "moduli": cmd_moduli,
    "greens": cmd_greens,
    "symbols": cmd_symbols,
    "newton": cmd_newton,
    "volume": cmd_volume,
    "bsmetric": cmd_bsmetric,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spin7cayley", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--grid", help="grid size n, or a comma-separated ladder")
    p.add_argument("--eps", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--tol", type=float, help="overrides the main tolerance of the command")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--dump", help="newton: write the perturbed-start solution here")
    return p


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
    else:
        cfg = ExperimentConfig()
    upd = {}
    for name in ("seed", "k", "eps", "trials", "workers"):
        v = getattr(args, name)
        if v is not None:
            upd[name] = v
    if args.grid:
        parts = [int(v) for v in args.grid.split(",")]
        if len(parts) == 1:
            upd["n"] = parts[0]
            upd["ladder"] = (parts[0],)
        else:
            upd["ladder"] = tuple(parts)
    if args.tol is not None:
        tol = dict(cfg.tolerances)
        tol[TOL_KEY[args.command]] = args.tol
        upd["tolerances"] = tol
    return replace(cfg, **upd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        table = COMMANDS[args.command](cfg)
    except (ValueError, nl.NewtonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - t0
    text = table.to_csv() if args.format == "csv" else table.to_json()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.dump and "solutions" in table.metadata:
        with open(args.dump, "w") as fh:
            fh.write(dump_field(table.metadata["solutions"]["perturbed"]))
    print(f"# {args.command} config={cfg.digest()} wall={wall:.2f}s "
          f"{'PASS' if table.passed else 'FAIL'}", file=sys.stderr)
    return 0 if table.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
