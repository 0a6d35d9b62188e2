"""Configuration, seeding, ordered task pools, experiment dispatch and manifests.

Configs are flat TOML files.  Physical keys carry their unit or role in the
name and have no defaults; only resource caps do.  Every run writes its data
files atomically and one ``manifest.json`` that lists them.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import hashlib
import json
import math
import os
import platform
import re
import time

import numpy as np
import tomli

from . import __version__
from ._io import atomic_write_text
from .disorder import bernoulli, derive_seed, discrete, uniform

EXPERIMENTS = ("propagate", "localization", "eigenfraction", "diagrams", "boltzmann",
               "convergence", "selftest")


class ConfigError(ValueError):
    pass


class CapExceeded(RuntimeError):
    pass


class TaskFailed(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        super().__init__(f"{len(failures)} task(s) failed: {failures[0]['error']}")


# ---------------------------------------------------------------------------
# schema

SCHEMAS = {
    "propagate": {"dim": int, "box_side_sites": int, "distribution": str,
                  "coupling_lambda": float, "time_t": float, "n_realizations": int},
    "localization": {"box_side_sites": int, "distribution": str, "coupling_lambda": float,
                     "shell_delta": float, "shell_ell_sites": float, "time_t": float,
                     "n_realizations": int},
    "eigenfraction": {"box_halfwidth_sites": int, "distribution": str,
                      "coupling_lambda": float, "shell_delta": float,
                      "shell_ell_sites": float, "epsilon": float, "time_t": float,
                      "n_realizations": int},
    "diagrams": {"box_dim": int, "box_side_sites": int, "distribution": str,
                 "coupling_lambda": float, "time_t": float, "max_order": int},
    "boltzmann": {"macro_time_T": float, "n_particles": int, "width_X": float,
                  "velocity_k0": list},
    "convergence": {"couplings_lambda": list, "macro_time_T": float, "box_side_sites": int,
                    "distribution": str, "n_realizations": int, "width_X": float,
                    "velocity_k0": list, "n_particles": int},
    "selftest": {},
}

OPTIONAL = {
    "boltzmann": {"rate_scale": 1.0},
    "diagrams": {"crossing_eps_list": [], "crossing_points": 0, "crossing_samples": 60000},
}

CAPS = {"cap_max_sites": 2 ** 22, "cap_max_order": 20000, "cap_time_budget_s": 7200.0,
        "cap_tolerance": 1e-12, "threads": 1}

DISTRIBUTIONS = {"bernoulli": bernoulli, "uniform": uniform}


def make_distribution(name):
    """``bernoulli``, ``uniform`` or ``discrete:v1,v2,...;w1,w2,...``."""
    if name in DISTRIBUTIONS:
        return DISTRIBUTIONS[name]()
    if name.startswith("discrete:"):
        vals, wts = name[len("discrete:"):].split(";")
        return discrete([float(v) for v in vals.split(",")], [float(w) for w in wts.split(",")])
    raise ConfigError(f"unknown distribution {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.  ``params`` holds the physical keys."""

    experiment: str
    seed: int
    params: dict = field(default_factory=dict)
    caps: dict = field(default_factory=dict)
    out_dir: str = "results"

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        kind = raw.pop("experiment", None)
        if kind not in SCHEMAS:
            raise ConfigError(f"unknown or missing experiment kind {kind!r}")
        if "seed" not in raw:
            raise ConfigError("missing key 'seed'")
        seed = raw.pop("seed")
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        out_dir = raw.pop("out_dir", "results")
        schema = SCHEMAS[kind]
        optional = OPTIONAL.get(kind, {})
        unknown = set(raw) - set(schema) - set(optional) - set(CAPS)
        if unknown:
            raise ConfigError(f"unknown keys for {kind}: {sorted(unknown)}")
        missing = set(schema) - set(raw)
        if missing:
            raise ConfigError(f"missing keys for {kind}: {sorted(missing)}")
        params = {}
        for key, typ in schema.items():
            params[key] = _coerce(key, raw[key], typ)
        for key, default in optional.items():
            params[key] = raw.get(key, default)
        caps = {k: raw.get(k, v) for k, v in CAPS.items()}
        cfg = cls(kind, seed, params, caps, out_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))

    def to_dict(self):
        out = {"experiment": self.experiment, "seed": self.seed, "out_dir": self.out_dir}
        out.update(self.params)
        out.update(self.caps)
        return out

    def to_toml(self):
        return dumps_toml(self.to_dict())

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self):
        p = self.params
        if "distribution" in p:
            make_distribution(p["distribution"])
        for key in ("n_realizations", "n_particles"):
            if key in p and p[key] < 1:
                raise ConfigError(f"{key} must be positive")
        if self.experiment == "localization":
            from .localization import BoxTooSmall
            if p["box_side_sites"] < 4 * math.floor(p["shell_ell_sites"]):
                raise BoxTooSmall(f"box_side_sites={p['box_side_sites']} is below "
                                  f"4*floor(shell_ell_sites)={4 * math.floor(p['shell_ell_sites'])}")
        sites = None
        if "box_side_sites" in p:
            sites = p["box_side_sites"] ** p.get("dim", p.get("box_dim", 3))
        if "box_halfwidth_sites" in p:
            sites = (2 * p["box_halfwidth_sites"] + 1) ** 3
        if sites is not None and sites > self.caps["cap_max_sites"]:
            raise CapExceeded(f"{sites} sites exceed cap_max_sites={self.caps['cap_max_sites']}")


def _coerce(key, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or isinstance(value, bool):
        raise ConfigError(f"key {key!r} expects {typ.__name__}, got {type(value).__name__}")
    return value


def dumps_toml(d):
    """Minimal TOML writer for flat tables of scalars and scalar lists."""
    lines = []
    for k in sorted(d):
        lines.append(f"{k} = {_toml_value(d[k])}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            return {float("inf"): "inf", float("-inf"): "-inf"}.get(v, "nan")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__}")


# ---------------------------------------------------------------------------
# seeds and pools


def seed_stream(master, task_id):
    """Independent reproducible Philox generator for ``(master, task_id)``.

    The generator state round-trips through ``bit_generator.state``.
    """
    return np.random.Generator(np.random.Philox(derive_seed(master, task_id)))


def stream_state(gen):
    """JSON-serializable state of a generator made by :func:`seed_stream`."""
    return _jsonable(gen.bit_generator.state)


def restore_stream(state):
    """Rebuild a generator from :func:`stream_state` output."""
    state = dict(state)
    state["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()}
    state["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


class TaskPool:
    """Ordered map over independent tasks on a thread pool.

    Results come back in submission order so downstream reductions are
    deterministic.  A task that raises is recorded and surfaces as
    :class:`TaskFailed` once every task has finished.
    """

    def __init__(self, threads=1):
        self.threads = max(1, int(threads))
        self.failures = []

    def map(self, fn, items):
        items = list(items)

        def guarded(pair):
            i, item = pair
            try:
                return True, fn(item)
            except Exception as exc:  # noqa: BLE001 - recorded, then re-raised
                return False, {"task": i, "error": f"{type(exc).__name__}: {exc}"}

        if self.threads == 1:
            out = [guarded(p) for p in enumerate(items)]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                out = list(ex.map(guarded, enumerate(items)))
        failed = [r for ok, r in out if not ok]
        if failed:
            self.failures.extend(failed)
            raise TaskFailed(failed)
        return [r for _, r in out]

    __call__ = map


# ---------------------------------------------------------------------------
# output


def fmt(x):
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def csv_text(header, rows):
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


_FLOAT_MARK = "@f17@"


def json_text(obj):
    """JSON with floats written at 17 significant digits."""
    text = json.dumps(_mark_floats(_jsonable(obj)), indent=2, sort_keys=True)
    return re.sub(f'"{_FLOAT_MARK}([^"]*)"', r"\1", text) + "\n"


def _mark_floats(x):
    if isinstance(x, dict):
        return {k: _mark_floats(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_mark_floats(v) for v in x]
    if isinstance(x, float):
        return _FLOAT_MARK + format(x, ".17g")
    return x


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    experiment: str
    seed: int
    started: float
    wall_clock_s: float = 0.0
    task_seeds: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    failed_tasks: list = field(default_factory=list)
    error: str = ""

    @property
    def all_pass(self):
        return bool(self.checks) and all(self.checks.values()) and not self.error

    def to_dict(self):
        return {"config_hash": self.config_hash, "code_version": self.code_version,
                "experiment": self.experiment, "seed": self.seed,
                "started_unix": self.started, "wall_clock_s": self.wall_clock_s,
                "task_seeds": [str(s) for s in self.task_seeds], "checks": self.checks,
                "all_pass": self.all_pass, "files": self.files,
                "failed_tasks": self.failed_tasks, "error": self.error,
                "python": platform.python_version()}


class Writer:
    def __init__(self, out_dir, manifest):
        self.out_dir = out_dir
        self.manifest = manifest

    def text(self, name, text):
        atomic_write_text(os.path.join(self.out_dir, name), text)
        self.manifest.files.append(name)

    def csv(self, name, header, rows):
        self.text(name, csv_text(header, rows))

    def json(self, name, obj):
        self.text(name, json_text(obj))


# ---------------------------------------------------------------------------
# experiments


def _run_propagate(cfg, pool, out):
    from .lattice import BoxSpec, delta
    from .disorder import sample_field
    from .propagate import PropagatorConfig, energy, evolve
    p = cfg.params
    box = BoxSpec(p["dim"], p["box_side_sites"])
    dist = make_distribution(p["distribution"])
    pc = PropagatorConfig(tolerance=max(cfg.caps["cap_tolerance"], 1e-15),
                          max_order=cfg.caps["cap_max_order"])
    seeds = [derive_seed(cfg.seed, i) for i in range(p["n_realizations"])]
    out.manifest.task_seeds = seeds

    def task(s):
        omega = sample_field(dist, box, s)
        psi0 = delta(box)
        psi = evolve(psi0, omega, p["coupling_lambda"], p["time_t"], pc)
        back = evolve(psi, omega, p["coupling_lambda"], -p["time_t"], pc)
        e0 = energy(psi0, omega, p["coupling_lambda"])
        e1 = energy(psi, omega, p["coupling_lambda"])
        return (abs(psi.norm_sq() - 1.0), float(np.max(np.abs(back.amplitudes - psi0.amplitudes))),
                abs(e1 - e0), float(np.abs(psi.amplitudes[box.index(np.zeros(box.dim, int))]) ** 2))

    rows = pool(task, seeds)
    out.csv("propagate.csv", ["realization", "norm_defect", "reversal_error", "energy_drift",
                              "return_probability"], [(i,) + r for i, r in enumerate(rows)])
    return {"unitarity": all(r[0] <= 1e-10 for r in rows),
            "time_reversal": all(r[1] <= 1e-10 for r in rows),
            "energy_conservation": all(r[2] <= 1e-10 for r in rows)}


def _run_localization(cfg, pool, out):
    from .lattice import BoxSpec
    from .localization import localization_observable
    from .propagate import PropagatorConfig
    p = cfg.params
    box = BoxSpec(3, p["box_side_sites"])
    rep = localization_observable(make_distribution(p["distribution"]), p["coupling_lambda"],
                                  p["shell_delta"], p["time_t"], box, p["n_realizations"],
                                  cfg.seed, ell=p["shell_ell_sites"],
                                  cfg=PropagatorConfig(max_order=cfg.caps["cap_max_order"]),
                                  mapper=pool)
    out.manifest.task_seeds = rep.seeds
    out.csv("localization.csv", ["realization", "shell_mass", "difference"],
            [(i, a, b) for i, (a, b) in enumerate(zip(rep.samples, rep.differences))])
    out.json("localization_summary.json", rep.summary())
    return {"gap_positive": rep.gap > 0, "gap_finite": math.isfinite(rep.gap)}


def _run_eigenfraction(cfg, pool, out):
    from .localization import eigen_fraction_experiment
    p = cfg.params
    dist = make_distribution(p["distribution"])
    seeds = [derive_seed(cfg.seed, i) for i in range(p["n_realizations"])]
    out.manifest.task_seeds = seeds

    def task(s):
        return eigen_fraction_experiment(dist, p["coupling_lambda"], p["shell_delta"],
                                         p["shell_ell_sites"], p["epsilon"],
                                         p["box_halfwidth_sites"], s, t=p["time_t"])

    reps = pool(task, seeds)
    keys = list(reps[0].summary())
    out.csv("eigenfraction.csv", keys, [[r.summary()[k] for k in keys] for r in reps])
    return {"chain_holds": all(r.chain_holds for r in reps)}


def verify_oracle(box, dist, lam, t, max_order, x=None, rel_tol=1e-8):
    """Brute-force expectation against the partition sum for all ``n + n' <= max_order``."""
    from .diagrams import AmplitudeContext, amplitude_sum, expectation_bruteforce
    x = tuple([0] * box.dim) if x is None else tuple(x)
    ctx = AmplitudeContext.build(box, lam, t, dist, x)
    rows = []
    for n in range(max_order + 1):
        for npr in range(max_order + 1 - n):
            bf = expectation_bruteforce(n, npr, box, dist, x, t, lam)
            if (n + npr) % 2:
                rows.append({"n": n, "n_prime": npr, "bruteforce": [bf.real, bf.imag],
                             "diagram_sum": [0.0, 0.0], "relative_error": 0.0,
                             "pass": bf == 0})
                continue
            am = amplitude_sum(n, npr, ctx)
            err = abs(bf - am) / max(abs(bf), 1e-300)
            rows.append({"n": n, "n_prime": npr, "bruteforce": [bf.real, bf.imag],
                         "diagram_sum": [am.real, am.imag], "relative_error": err,
                         "pass": err <= rel_tol})
    return rows


def _run_diagrams(cfg, pool, out):
    from .lattice import BoxSpec
    p = cfg.params
    box = BoxSpec(p["box_dim"], p["box_side_sites"])
    rows = verify_oracle(box, make_distribution(p["distribution"]), p["coupling_lambda"],
                         p["time_t"], p["max_order"])
    report = {"box": [box.dim, box.side], "distribution": p["distribution"],
              "lambda": p["coupling_lambda"], "time_t": p["time_t"], "rows": rows,
              "all_pass": all(r["pass"] for r in rows)}
    out.json("oracle_report.json", report)
    checks = {"oracle_equivalence": report["all_pass"]}
    eps_list = [float(e) for e in p.get("crossing_eps_list", [])]
    if eps_list and p.get("crossing_points", 0):
        rows, ok_bound, exps = crossing_scan(eps_list, p["crossing_points"],
                                             p["crossing_samples"], cfg.seed, pool)
        out.csv("crossing_scan.csv", ["point", "w1", "w2", "w3", "alpha", "eps", "value",
                                      "stderr", "apriori"], rows)
        checks["crossing_apriori_bound"] = ok_bound
        checks["crossing_exponent_range"] = all(0.5 <= e < 1.0 for e in exps)
    return checks


def crossing_points(n_points, seed):
    """Random ``(w, alpha)`` with ``w`` uniform on the torus and ``alpha`` in ``(0.5, 5.5)``."""
    rng = seed_stream(seed, 7)
    return [(rng.uniform(size=3), float(rng.uniform(0.5, 5.5))) for _ in range(n_points)]


def crossing_scan(eps_list, n_points, n_samples, seed, pool=map):
    """Crossing integrals on a grid of ``eps`` at random points; ``beta = alpha``.

    Returns ``(rows, bound_ok, exponents)``.
    """
    from .diagrams import crossing_integral, fit_growth_exponent
    pts = crossing_points(n_points, seed)
    jobs = [(i, j) for i in range(len(pts)) for j in range(len(eps_list))]

    def task(job):
        i, j = job
        w, a = pts[i]
        return crossing_integral(w, a, a, eps_list[j], n_samples, seed=derive_seed(seed, i, j))

    res = list(pool(task, jobs))
    rows, exps, ok = [], [], True
    for i, (w, a) in enumerate(pts):
        vals = []
        for j, eps in enumerate(eps_list):
            r = res[i * len(eps_list) + j]
            rows.append((i, w[0], w[1], w[2], a, eps, r.value, r.stderr, r.apriori))
            vals.append(r.value)
            ok &= r.bound_holds
        exps.append(fit_growth_exponent(eps_list, vals))
    return rows, ok, exps


def _run_boltzmann(cfg, pool, out):
    from .kinetic import boltzmann_evolve, initial_ensemble, SemiclassicalSpec
    p = cfg.params
    spec = SemiclassicalSpec(width=p["width_X"], k0=tuple(p["velocity_k0"]), eta=1.0)
    ens = initial_ensemble(spec, p["n_particles"], seed_stream(cfg.seed, 0))
    out.manifest.task_seeds = [derive_seed(cfg.seed, 0), derive_seed(cfg.seed, "kmc")]
    fin = boltzmann_evolve(ens, p["macro_time_T"], derive_seed(cfg.seed, "kmc"),
                           rate_scale=p["rate_scale"], mapper=pool)
    out.text("particles.txt", fin.to_columns())
    e0, e1 = ens.energies(), fin.energies()
    return {"weight_conserved": fin.total_weight() == ens.total_weight(),
            "energy_invariant": bool(np.max(np.abs(e1 - e0)) <= 1e-12)}


def default_tests():
    """The two built-in test functions of the convergence experiment."""
    from .kinetic import TestFunction
    return [
        TestFunction(centre=(0.3, 0.0, 0.0), width=0.6,
                     coefficients=(((1, 0, 0), -0.5j), ((-1, 0, 0), 0.5j))),
        TestFunction(centre=(0.0, 0.2, 0.0), width=0.6,
                     coefficients=(((0, 0, 0), 1.0), ((0, 1, 0), 0.5), ((0, -1, 0), 0.5))),
    ]


def _run_convergence(cfg, pool, out):
    from .kinetic import SemiclassicalSpec, convergence_experiment
    p = cfg.params
    k0 = tuple(p["velocity_k0"])
    rows = convergence_experiment(
        lambda eta: SemiclassicalSpec(width=p["width_X"], k0=k0, eta=eta),
        make_distribution(p["distribution"]), p["couplings_lambda"], p["macro_time_T"],
        default_tests(), p["n_realizations"], cfg.seed, box_side=p["box_side_sites"],
        n_particles=p["n_particles"], mapper=pool)
    out.csv("convergence.csv", ["lambda", "test", "D", "stderr", "lattice", "boltzmann"],
            [(r.lam, r.test_index, r.discrepancy, r.stderr, r.lattice_mean, r.boltzmann_mean)
             for r in rows])
    checks = {}
    for j in sorted({r.test_index for r in rows}):
        ds = [r.discrepancy for r in sorted((r for r in rows if r.test_index == j),
                                            key=lambda r: -r.lam)]
        checks[f"decreasing_test{j}"] = all(a > b for a, b in zip(ds, ds[1:]))
    return checks


def _run_selftest(cfg, pool, out):
    """Fast oracle checks across the modules."""
    from .diagrams import (SimplexKernelInput, count_partitions, enumerate_partitions,
                           simplex_kernel)
    from .disorder import raw_moments, renormalized_cumulants
    from .lattice import BoxSpec
    checks = {}
    checks["partition_counts"] = all(
        len(enumerate_partitions(nb, nb)) == sum(count_partitions(nb, m) for m in range(1, nb + 1))
        for nb in range(1, 4))
    k = simplex_kernel(SimplexKernelInput((0.7, 0.7, 0.7), 2.0))
    checks["kernel_equal_energies"] = abs(k - 2.0 * np.exp(-1.4j)) < 1e-12
    cum = renormalized_cumulants(raw_moments(bernoulli(), 8))
    checks["bernoulli_cumulants"] = [int(cum[2 * m]) for m in range(1, 5)] == [1, -2, 16, -272]
    rows = verify_oracle(BoxSpec(1, 4), bernoulli(), 0.5, 1.0, 4)
    checks["oracle_equivalence"] = all(r["pass"] for r in rows)
    out.json("selftest.json", checks)
    return checks


RUNNERS = {"propagate": _run_propagate, "localization": _run_localization,
           "eigenfraction": _run_eigenfraction, "diagrams": _run_diagrams,
           "boltzmann": _run_boltzmann, "convergence": _run_convergence,
           "selftest": _run_selftest}


def run(cfg, out_dir=None, threads=None):
    """Dispatch ``cfg`` to its experiment, write outputs and the manifest."""
    out_dir = out_dir or cfg.out_dir
    threads = threads or cfg.caps.get("threads", 1)
    manifest = RunManifest(cfg.digest(), __version__, cfg.experiment, cfg.seed, time.time())
    writer = Writer(out_dir, manifest)
    pool = TaskPool(threads)
    t0 = time.perf_counter()
    writer.text("config.toml", cfg.to_toml())
    try:
        manifest.checks = {k: bool(v) for k, v in RUNNERS[cfg.experiment](cfg, pool, writer).items()}
    except TaskFailed as exc:
        manifest.failed_tasks = exc.failures
        manifest.error = str(exc)
    except (ValueError, RuntimeError) as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
    manifest.wall_clock_s = time.perf_counter() - t0
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json_text(manifest.to_dict()))
    return manifest
