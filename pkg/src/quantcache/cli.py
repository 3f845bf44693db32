"""Experiment driver: ``quantcache --config run.json [--preset NAME] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import SAMPLERS, PipelineConfig, write_trajectories_csv
from .experiment import SELECTORS, Lab, calibration_pool, fit_quantized, select
from .metrics import (exposure_bias_curve, mean_off_diagonal, quantization_quality,
                      similarity_heatmap, stochastically_larger, variance_density,
                      write_density_csv, write_json, write_matrix_csv, write_series_csv)
from .tap import TapConfig, complexity_benchmark
from .vc import GUARD_EPS, SOLVERS, estimate_factors, with_correction

PRESETS = ("challenge1", "challenge2", "ablation", "alpha-sweep", "cluster-ablation", "complexity")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# disjoint seed blocks per role, offset by the run seed
SEED_BLOCKS = {"pool": 100_000, "eval": 200_000, "vc": 300_000, "analysis": 400_000}


class ConfigError(ValueError):
    pass


@dataclass
class MixtureSpec:
    dim: int = 16
    components: int = 8
    scale: float = 0.15
    variance: float = 0.05


@dataclass
class VcSpec:
    enabled: bool = True
    batch_size: int = 64
    solver: str = "channel"
    guard_eps: float = GUARD_EPS


@dataclass
class TrajectoryCounts:
    pool: int = 64
    eval: int = 64


@dataclass
class AnalysisSpec:
    """Step-redundancy analysis: one trajectory per seed, one sample per step."""

    sampler: str = "ddim"
    seeds: int = 10
    feature: str = "output"


@dataclass
class DbscanSpec:
    eps: float = 0.08
    min_pts: int = 5


@dataclass
class ComplexitySpec:
    sizes: list = field(default_factory=lambda: [1000, 2000])
    landmarks: int = 100
    repeats: int = 3
    dense: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    T: int = 50
    sampler: str = "ddpm"
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    bits_weights: int = 4
    bits_activations: int = 4
    cache_interval: int = 5
    min_samples: int | None = None
    selection: str = "tap"
    tap: TapConfig = field(default_factory=TapConfig)
    vc: VcSpec = field(default_factory=VcSpec)
    trajectories: TrajectoryCounts = field(default_factory=TrajectoryCounts)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    alphas: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    cluster_methods: list = field(default_factory=lambda: ["kmeans", "dbscan", "agglomerative",
                                                           "tap", "random"])
    dbscan: DbscanSpec = field(default_factory=DbscanSpec)
    complexity: ComplexitySpec = field(default_factory=ComplexitySpec)
    preset: str = "ablation"
    out: str = "runs"
    dump_trajectories: bool = True

    def seeds(self, role: str, count: int) -> list:
        base = self.seed * 1_000_000 + SEED_BLOCKS[role]
        return list(range(base, base + count))

    @property
    def pool_size(self) -> int:
        return self.trajectories.pool * self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap"] = self.selection if self.selection != "tap" else self.tap.to_dict()
        d.pop("selection")
        return d

    def check(self) -> list:
        """Violated invariants as ``field: message`` strings."""
        out = []

        def need(cond, name, msg):
            if not cond:
                out.append(f"{name}: {msg}")

        need(self.T >= 1, "T", "must be >= 1")
        need(self.sampler in SAMPLERS, "sampler", f"must be one of {list(SAMPLERS)}")
        m = self.mixture
        need(m.dim >= 2, "mixture.dim", "must be >= 2")
        need(1 <= m.components < 1 << max(0, (m.dim - 1).bit_length()), "mixture.components",
             "must be >= 1 and below the next power of two >= dim")
        need(m.scale > 0, "mixture.scale", "must be > 0")
        need(m.variance > 0, "mixture.variance", "must be > 0")
        for name in ("bits_weights", "bits_activations"):
            need(2 <= getattr(self, name) <= 32, name, "must lie in [2, 32]")
        need(self.cache_interval >= 1, "cache_interval", "must be >= 1")
        need(self.min_samples is None or self.min_samples >= 1, "min_samples", "must be >= 1")
        need(self.selection in SELECTORS, "tap", f"baseline tag must be one of {list(SELECTORS)}")
        for msg in self.tap.check(self.pool_size):
            out.append(msg)
        need(self.tap.target <= self.pool_size, "tap.target",
             f"{self.tap.target} exceeds pool size {self.pool_size}")
        need(self.vc.batch_size >= 2, "vc.batch_size", "must be >= 2")
        need(self.vc.solver in SOLVERS, "vc.solver", f"must be one of {sorted(SOLVERS)}")
        need(self.vc.guard_eps >= 0, "vc.guard_eps", "must be >= 0")
        need(self.trajectories.pool >= 1, "trajectories.pool", "must be >= 1")
        need(self.trajectories.eval >= 1, "trajectories.eval", "must be >= 1")
        need(self.analysis.sampler in SAMPLERS, "analysis.sampler",
             f"must be one of {list(SAMPLERS)}")
        need(self.analysis.seeds >= 1, "analysis.seeds", "must be >= 1")
        need(self.analysis.feature in ("output", "input"), "analysis.feature",
             "must be 'output' or 'input'")
        need(all(0.0 <= a <= 1.0 for a in self.alphas), "alphas", "values must lie in [0, 1]")
        bad = [mth for mth in self.cluster_methods if mth not in SELECTORS]
        need(not bad, "cluster_methods", f"unknown method(s) {bad}")
        need(self.dbscan.eps > 0, "dbscan.eps", "must be > 0")
        need(self.dbscan.min_pts >= 1, "dbscan.min_pts", "must be >= 1")
        c = self.complexity
        need(all(n >= c.landmarks for n in c.sizes), "complexity.sizes",
             "every size must be >= complexity.landmarks")
        need(max(c.sizes, default=0) <= self.pool_size, "complexity.sizes",
             f"largest size exceeds pool size {self.pool_size}")
        need(self.tap.k <= c.landmarks, "complexity.landmarks",
             f"must be >= tap.k={self.tap.k}")
        need(c.repeats >= 1, "complexity.repeats", "must be >= 1")
        need(self.preset in PRESETS, "preset", f"must be one of {list(PRESETS)}")
        return out


_SECTIONS = {"mixture": MixtureSpec, "vc": VcSpec, "trajectories": TrajectoryCounts,
             "analysis": AnalysisSpec, "dbscan": DbscanSpec, "complexity": ComplexitySpec,
             "tap": TapConfig}


def _typed(name, value, default):
    """Coerce ``value`` to the type of ``default``; raise ConfigError naming ``name``."""
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{name}: expected an integer or null, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if value in ("on", "off"):
            return value == "on"
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")


def _section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {raw!r}")
    proto = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}")
    kwargs = {k: _typed(f"{name}.{k}", v, getattr(proto, k)) for k, v in raw.items()}
    return cls(**kwargs)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)} - {"selection"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {unknown}")
    for key, value in raw.items():
        if key == "tap" and isinstance(value, str):
            cfg.selection = value
            cfg.tap = TapConfig()
        elif key == "vc" and value in ("on", "off"):
            cfg.vc = VcSpec(enabled=value == "on")
        elif key in _SECTIONS:
            setattr(cfg, key, _section(key, _SECTIONS[key], value))
        else:
            setattr(cfg, key, _typed(key, value, getattr(cfg, key)))
    return cfg


def load_config(path) -> RunConfig:
    """Read and parse a config file (no invariant checks)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


def validate(path) -> list:
    """Diagnostics for the config at ``path``; empty when it is valid."""
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return [str(exc)]
    return cfg.check()


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{__version__}+unknown"


# ---------------------------------------------------------------- presets

class Runner:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        m = cfg.mixture
        self.lab = Lab.build(cfg.T, cfg.sampler, m.dim, m.components, m.scale, m.variance)
        self.files = []
        self._pool = None
        self._truth = None

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    @property
    def pool(self):
        if self._pool is None:
            seeds = self.cfg.seeds("pool", self.cfg.trajectories.pool)
            self._pool = calibration_pool(self.lab, seeds, self.cfg.cache_interval)
        return self._pool

    @property
    def truth(self):
        if self._truth is None:
            self._truth = self.lab.run(self.lab.truth(), self.cfg.seeds("eval", self.cfg.trajectories.eval))
        return self._truth

    def select(self, method: str, tap: TapConfig | None = None):
        cfg = self.cfg
        return select(self.pool, method, tap or cfg.tap, self.lab.T,
                      dbscan_eps=cfg.dbscan.eps, dbscan_min_pts=cfg.dbscan.min_pts)

    def quantized(self, idx):
        cal = self.pool.subset(idx)
        return fit_quantized(self.lab, cal, self.cfg.bits_weights, self.cfg.bits_activations,
                             self.cfg.min_samples)

    def manifest_entry(self, idx, report, qs) -> dict:
        cal = self.pool.subset(idx)
        return {
            "selection": report,
            "indices": idx.tolist(),
            "traj_ids": cal.traj_ids.tolist(),
            "timesteps": cal.timesteps.tolist(),
            "act_in": qs.act_in.to_dict(),
            "act_out": qs.act_out.to_dict(),
            "weights": [p.to_dict() for p in qs.weight_params],
        }

    # --- step-to-step redundancy with and without caching
    def challenge1(self) -> dict:
        cfg = self.cfg
        lab = self.lab.with_sampler(cfg.analysis.sampler)
        rows = []
        for s in cfg.seeds("analysis", cfg.analysis.seeds):
            pair = {}
            for tag, interval in (("uncached", 1), ("cached", cfg.cache_interval)):
                batch = lab.run(PipelineConfig(lab.schedule, lab.analytic, interval), [s])
                feats = batch.eps[0, :-1] if cfg.analysis.feature == "output" else batch.xs[0, :-1]
                H = similarity_heatmap(feats, batch.ts[:-1])
                write_matrix_csv(self.path(f"heatmap_{tag}_{s}.csv"), H)
                pair[tag] = mean_off_diagonal(H)
            rows.append({"seed": s, **pair, "cached_higher": pair["cached"] > pair["uncached"]})
        return {"protocol": {"sampler": cfg.analysis.sampler, "feature": cfg.analysis.feature,
                             "samples": "one per step from one trajectory"},
                "per_seed": rows,
                "cached_higher": int(sum(r["cached_higher"] for r in rows)),
                "seeds": len(rows)}

    # --- drift and variance spread under quantization and caching
    def challenge2(self) -> dict:
        cfg = self.cfg
        idx, report = self.select(cfg.selection)
        _, qs = self.quantized(idx)
        seeds = cfg.seeds("eval", cfg.trajectories.eval)
        runs = {
            "quant-only": PipelineConfig(self.lab.schedule, qs, 1, None, "quant-only"),
            "cache-only": self.lab.cache_only(cfg.cache_interval),
            "quant+cache": PipelineConfig(self.lab.schedule, qs, cfg.cache_interval, None,
                                          "quant+cache"),
        }
        batches = {k: self.lab.run(v, seeds) for k, v in runs.items()}
        curves = [exposure_bias_curve(b, self.truth, k) for k, b in batches.items()]
        write_series_csv(self.path("exposure_bias.csv"), curves)
        T = self.lab.T
        late = sorted({T // 10, T // 20, 0}, reverse=True)
        ts = sorted({T - 1, T // 2, *late}, reverse=True)
        dens = {"ground-truth": variance_density(self.truth, ts),
                "quant+cache": variance_density(batches["quant+cache"], ts)}
        write_density_csv(self.path("variance_density.csv"), dens)
        final = {c.label: c.final for c in curves}
        return {
            "final_mse": final,
            "super_additive": final["quant+cache"] > max(final["quant-only"], final["cache-only"]),
            "variance_shift_p": {t: stochastically_larger(dens["quant+cache"][t],
                                                          dens["ground-truth"][t]) for t in late},
            "selection": report,
        }

    # --- component ablation
    def ablation(self) -> dict:
        cfg = self.cfg
        seeds = cfg.seeds("eval", cfg.trajectories.eval)
        vc_seeds = cfg.seeds("vc", cfg.vc.batch_size)
        manifest, curves, final, factors_out = {}, [], {}, {}
        for sel_label, method in (("random", "random"), ("tap", cfg.selection)):
            idx, report = self.select(method)
            _, qs = self.quantized(idx)
            manifest[sel_label] = self.manifest_entry(idx, report, qs)
            base = PipelineConfig(self.lab.schedule, qs, cfg.cache_interval)
            if cfg.vc.enabled:
                factors = estimate_factors(base, self.lab.truth(), vc_seeds, self.lab.dim,
                                           solver=cfg.vc.solver, guard_eps=cfg.vc.guard_eps)
            plain = "Baseline" if sel_label == "random" else "+TAP"
            corrected = "+VC" if sel_label == "random" else "+TAP+VC"
            variants = [(plain, base)]
            if cfg.vc.enabled:
                factors_out[corrected] = factors
                variants.append((corrected, with_correction(base, factors)))
            for label, config in variants:
                batch = self.lab.run(config, seeds)
                batch.label = label
                c = exposure_bias_curve(batch, self.truth, label)
                curves.append(c)
                final[label] = c.final
                if cfg.dump_trajectories:
                    write_trajectories_csv(self.path(f"trajectories_{_slug(label)}.csv"), batch)
        order = [k for k in ("Baseline", "+VC", "+TAP", "+TAP+VC") if k in final]
        curves.sort(key=lambda c: order.index(c.label))
        write_series_csv(self.path("exposure_bias.csv"), curves)
        write_json(self.path("calibration_manifest.json"), manifest)
        for label, f in factors_out.items():
            write_json(self.path(f"vc_factors_{_slug(label)}.json"), f.to_dict())
        return {"final_mse": {k: final[k] for k in order}, "selection_method": cfg.selection,
                "vc": asdict(cfg.vc)}

    # --- fusion weight sweep
    def alpha_sweep(self) -> dict:
        cfg = self.cfg
        rows = []
        for a in cfg.alphas:
            tap = TapConfig(**{**cfg.tap.to_dict(), "alpha": float(a)})
            idx, _ = self.select("tap", tap)
            q = quantization_quality(self.pool.subset(idx), self.truth, self.lab, cfg.bits_weights,
                                     cfg.bits_activations, cfg.cache_interval, cfg.min_samples)
            rows.append({"alpha": float(a), **q})
        _write_table(self.path("alpha_sweep.csv"), rows, ["alpha"])
        return {"reports": rows}

    # --- clustering method comparison
    def cluster_ablation(self) -> dict:
        cfg = self.cfg
        rows = []
        for method in cfg.cluster_methods:
            idx, report = self.select(method)
            q = quantization_quality(self.pool.subset(idx), self.truth, self.lab, cfg.bits_weights,
                                     cfg.bits_activations, cfg.cache_interval, cfg.min_samples)
            rows.append({"method": method, "clusters": report.get("clusters"), **q})
        _write_table(self.path("cluster_ablation.csv"), rows, ["method", "clusters"])
        return {"reports": rows}

    def complexity(self) -> dict:
        cfg = self.cfg
        pool = self.pool
        c = cfg.complexity
        rows = complexity_benchmark(lambda N: pool.subset(np.arange(N)), c.sizes, c.landmarks,
                                    cfg.tap, repeats=c.repeats, dense=c.dense, T=self.lab.T)
        _write_table(self.path("complexity.csv"), rows, ["N", "landmarks"])
        return {"timings": rows}


def _slug(label: str) -> str:
    return label.strip("+").replace("+", "_").lower() or "run"


def _write_table(path, rows, lead) -> None:
    import csv
    scalar = [k for k in rows[0] if k not in lead and not isinstance(rows[0][k], list)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(lead + scalar)
        for r in rows:
            w.writerow([r[k] for k in lead] + [repr(r[k]) if isinstance(r[k], float) else r[k]
                                               for k in scalar])


def run(cfg: RunConfig, preset: str, out) -> dict:
    """Run ``preset`` and write its files plus ``report.json`` into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, out)
    method = getattr(runner, preset.replace("-", "_"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = method()
    seen = []
    for w in caught:
        text = f"{w.category.__name__}: {w.message}"
        if text not in seen:
            seen.append(text)
    report = {"preset": preset, "build": build_id(), "config": cfg.to_dict(),
              "warnings": seen, "results": results, "files": sorted(runner.files)}
    write_json(out / "report.json", report)
    return report


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="quantcache", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="path to the JSON run config")
    ap.add_argument("--preset", choices=PRESETS, help="experiment to run (default: config 'preset')")
    ap.add_argument("--out", help="output directory (default: config 'out')")
    ap.add_argument("--seed", type=int, help="override the run seed (also seeds TAP)")
    ap.add_argument("--validate-only", action="store_true", help="check the config and exit")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.tap.seed = args.seed
    if args.preset:
        cfg.preset = args.preset
    if args.out:
        cfg.out = args.out
    problems = cfg.check()
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    if args.validate_only:
        print("config OK")
        return EXIT_OK
    try:
        report = run(cfg, cfg.preset, cfg.out)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"preset": report["preset"], "out": str(cfg.out),
                      "warnings": len(report["warnings"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
