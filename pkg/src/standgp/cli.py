"""Command-line entry point: simulate, fit, predict, assess.

Configuration is a flat ``key = value`` text file with namespaced keys
(``model.variant``, ``chains.iters``, ...); unknown keys are errors.  All
randomness flows from one root seed through documented sub-streams, and
every output file is written atomically (temp file, then rename) with no
timestamps or absolute paths, so a fixed seed reproduces byte-identical
outputs on one platform.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import assess as assess_mod
from . import predict as predict_mod
from .covariance import SiteSet
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    NumericError,
    SingularCovarianceError,
    StandGPError,
)
from .model import Dataset, ModelSpec
from .sampler import (
    ChainStore,
    ParamLayout,
    Schedule,
    load_chain_csv,
    run_chains,
    save_chain_csv,
)
from .sim import SimConfig, simulate
from .util import atomic_write_text, derive_rng, sha256_file

MANIFEST_FORMAT = "standgp-fit-manifest-v1"
ASSESSMENT_FORMAT = "standgp-assessment-v1"

ALLOWED_KEYS = {
    "seed",
    "data.path",
    "data.area_factor",
    "model.variant",
    "model.beta_dynamics",
    "model.shared_sigma_eta",
    "model.m0",
    "model.sigma0_diag",
    "model.r_eta",
    "model.upsilon_eta_scale",
    "model.r_gamma",
    "model.upsilon_gamma_scale",
    "model.phi_lo",
    "model.phi_hi",
    "chains.count",
    "chains.iters",
    "chains.burnin",
    "chains.thin",
    "chains.batch",
    "chains.overdispersion",
    "chains.workers",
    "sim.n",
    "sim.q",
    "sim.m",
    "sim.p",
    "sim.side",
    "sim.intercept",
    "sim.beta0_sd",
    "sim.sigma_eta",
    "sim.a_diag",
    "sim.a_offdiag",
    "sim.phi",
    "sim.include_w",
    "predict.fit",
    "predict.sites",
    "predict.draws",
    "predict.per_hectare",
    "assess.fits",
    "assess.holdout",
    "assess.draws",
}


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------


def parse_config(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; unknown or duplicate keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in ALLOWED_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as fh:
        return parse_config(fh.read())


def _get(cfg, key, default=None, required=False):
    if key in cfg:
        return cfg[key]
    if required:
        raise ConfigError(f"missing required config key {key!r}")
    return default


def _get_int(cfg, key, default=None, required=False):
    raw = _get(cfg, key, required=required)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}") from None


def _get_float(cfg, key, default=None, required=False):
    raw = _get(cfg, key, required=required)
    if raw is None:
        return default
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be a number, got {raw!r}") from None
    if not math.isfinite(value):
        raise ConfigError(f"config key {key!r} must be finite")
    return value


def _get_bool(cfg, key, default=None):
    raw = _get(cfg, key)
    if raw is None:
        return default
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    raise ConfigError(f"config key {key!r} must be 'true' or 'false', got {raw!r}")


def model_spec_from_config(cfg: dict[str, str]) -> ModelSpec:
    try:
        return ModelSpec(
            variant=_get(cfg, "model.variant", "spatial_covariates"),
            beta_dynamics=_get(cfg, "model.beta_dynamics", "markov"),
            shared_sigma_eta=_get_bool(cfg, "model.shared_sigma_eta", True),
            m0=_get_float(cfg, "model.m0", 0.0),
            sigma0_diag=_get_float(cfg, "model.sigma0_diag", 1000.0),
            r_eta=_get_int(cfg, "model.r_eta"),
            upsilon_eta_scale=_get_float(cfg, "model.upsilon_eta_scale", 0.01),
            r_gamma=_get_int(cfg, "model.r_gamma"),
            upsilon_gamma_scale=_get_float(cfg, "model.upsilon_gamma_scale", 0.01),
            phi_bounds=(
                _get_float(cfg, "model.phi_lo", 0.1),
                _get_float(cfg, "model.phi_hi", 6.0),
            ),
        )
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

_BASE_COLUMNS = ["site_id", "x", "y", "species", "class", "count"]


def _covariate_columns(p_minus_1: int) -> list[str]:
    return [f"x{k}" for k in range(1, p_minus_1 + 1)]


def write_dataset_csv(dataset: Dataset, path: str) -> None:
    """Write the standard input CSV: one row per (site, species, class)."""
    q, m, n = dataset.q, dataset.m, dataset.n
    p = dataset.p
    header = _BASE_COLUMNS + _covariate_columns(p - 1)
    lines = [",".join(header)]
    for k in range(n):
        sid = dataset.sites.ids[k]
        sx, sy = dataset.sites.coords[k]
        for i in range(q):
            for j in range(m):
                row = [sid, repr(float(sx)), repr(float(sy)), str(i + 1), str(j + 1),
                       str(int(dataset.counts[i, j, k]))]
                row += [repr(float(v)) for v in dataset.covariates[i, j, k, 1:]]
                lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def ingest(data_path: str, area_factor: float = 1.0) -> Dataset:
    """Read and validate the standard input CSV into a Dataset.

    Every (site, species, class) combination must appear exactly once;
    missing combinations are errors rather than implicit zeros.
    """
    if not os.path.isfile(data_path):
        raise DataError(f"data file not found: {data_path}")
    with open(data_path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{data_path}: file is empty (no header)") from None
        header = [h.strip() for h in header]
        if header[: len(_BASE_COLUMNS)] != _BASE_COLUMNS:
            raise DataError(
                f"{data_path}: header must start with {','.join(_BASE_COLUMNS)}"
            )
        cov_names = header[len(_BASE_COLUMNS):]
        if cov_names != _covariate_columns(len(cov_names)):
            raise DataError(
                f"{data_path}: covariate columns must be named x1..x{len(cov_names)} in order"
            )
        p = 1 + len(cov_names)

        site_order: list[str] = []
        site_xy: dict[str, tuple[float, float]] = {}
        cells: dict[tuple[str, int, int], tuple[int, list[float]]] = {}
        max_i = 0
        max_j = 0
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{data_path} row {rownum}: expected {len(header)} fields")
            sid = row[0].strip()
            try:
                sx, sy = float(row[1]), float(row[2])
            except ValueError:
                raise DataError(f"{data_path} row {rownum}: bad coordinates") from None
            if not (math.isfinite(sx) and math.isfinite(sy)):
                raise DataError(f"{data_path} row {rownum}: coordinates must be finite")
            try:
                i = int(row[3])
                j = int(row[4])
            except ValueError:
                raise DataError(
                    f"{data_path} row {rownum}: species and class must be integers"
                ) from None
            if i < 1 or j < 1:
                raise DataError(f"{data_path} row {rownum}: species and class are 1-based")
            try:
                count = int(row[5])
            except ValueError:
                raise DataError(f"{data_path} row {rownum}: non-integer count {row[5]!r}") from None
            if count < 0:
                raise DataError(f"{data_path} row {rownum}: negative count")
            try:
                covs = [float(v) for v in row[6:]]
            except ValueError:
                raise DataError(f"{data_path} row {rownum}: bad covariate value") from None
            if not all(math.isfinite(v) for v in covs):
                raise DataError(f"{data_path} row {rownum}: covariates must be finite")

            if sid not in site_xy:
                site_order.append(sid)
                site_xy[sid] = (sx, sy)
            elif site_xy[sid] != (sx, sy):
                raise DataError(
                    f"{data_path} row {rownum}: site {sid!r} has inconsistent coordinates"
                )
            key = (sid, i, j)
            if key in cells:
                raise DataError(
                    f"{data_path} row {rownum}: duplicate (site, species, class) = {key}"
                )
            cells[key] = (count, covs)
            max_i = max(max_i, i)
            max_j = max(max_j, j)

    if not cells:
        raise DataError(f"{data_path}: no data rows (empty dataset)")
    n, q, m = len(site_order), max_i, max_j
    counts = np.zeros((q, m, n), dtype=np.int64)
    x = np.ones((q, m, n, p))
    missing = []
    for k, sid in enumerate(site_order):
        for i in range(1, q + 1):
            for j in range(1, m + 1):
                cell = cells.get((sid, i, j))
                if cell is None:
                    missing.append((sid, i, j))
                    continue
                counts[i - 1, j - 1, k] = cell[0]
                x[i - 1, j - 1, k, 1:] = cell[1]
    if missing:
        preview = ", ".join(str(t) for t in missing[:5])
        raise DataError(
            f"{data_path}: {len(missing)} missing (site, species, class) combinations "
            f"(e.g. {preview}); missing cells must be recorded explicitly"
        )
    coords = np.array([site_xy[s] for s in site_order], dtype=float)
    try:
        return Dataset(
            sites=SiteSet(coords, tuple(site_order)),
            counts=counts,
            covariates=x,
            area_factor=area_factor,
        )
    except DomainError as exc:
        raise DataError(f"{data_path}: {exc}") from exc


def ingest_sites(path: str, q: int, m: int, p: int):
    """Read a prediction-sites CSV.

    Either ``site_id,x,y`` (intercept-only models) or the full per-cell
    schema ``site_id,x,y,species,class,x1..xP``.  Returns (SiteSet,
    covariates-or-None).
    """
    if not os.path.isfile(path):
        raise DataError(f"sites file not found: {path}")
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = [r for r in reader if r and any(f.strip() for f in r)]
    if not rows:
        raise DataError(f"{path}: no site rows")

    if header == ["site_id", "x", "y"]:
        if p > 1:
            raise DataError(
                f"{path}: the fitted model uses covariates; provide the per-cell "
                "schema site_id,x,y,species,class,x1..xP"
            )
        ids, coords = [], []
        for rownum, row in enumerate(rows, start=2):
            if len(row) != 3:
                raise DataError(f"{path} row {rownum}: expected 3 fields")
            sid = row[0].strip()
            if sid in ids:
                raise DataError(f"{path} row {rownum}: duplicate site {sid!r}")
            try:
                coords.append((float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path} row {rownum}: bad coordinates") from None
            ids.append(sid)
        return SiteSet(np.array(coords), tuple(ids)), None

    expected = ["site_id", "x", "y", "species", "class"] + _covariate_columns(p - 1)
    if header != expected:
        raise DataError(f"{path}: header must be {','.join(expected)}")
    site_order: list[str] = []
    site_xy: dict[str, tuple[float, float]] = {}
    cells: dict[tuple[str, int, int], list[float]] = {}
    for rownum, row in enumerate(rows, start=2):
        if len(row) != len(expected):
            raise DataError(f"{path} row {rownum}: expected {len(expected)} fields")
        sid = row[0].strip()
        try:
            sx, sy = float(row[1]), float(row[2])
            i, j = int(row[3]), int(row[4])
            covs = [float(v) for v in row[5:]]
        except ValueError:
            raise DataError(f"{path} row {rownum}: bad value") from None
        if not (1 <= i <= q and 1 <= j <= m):
            raise DataError(
                f"{path} row {rownum}: species/class must be within the fitted (q={q}, m={m})"
            )
        if sid not in site_xy:
            site_order.append(sid)
            site_xy[sid] = (sx, sy)
        elif site_xy[sid] != (sx, sy):
            raise DataError(f"{path} row {rownum}: site {sid!r} has inconsistent coordinates")
        key = (sid, i, j)
        if key in cells:
            raise DataError(f"{path} row {rownum}: duplicate (site, species, class)")
        cells[key] = covs
    n0 = len(site_order)
    x0 = np.ones((q, m, n0, p))
    for k, sid in enumerate(site_order):
        for i in range(1, q + 1):
            for j in range(1, m + 1):
                covs = cells.get((sid, i, j))
                if covs is None:
                    raise DataError(
                        f"{path}: missing covariates for (site={sid!r}, species={i}, class={j})"
                    )
                x0[i - 1, j - 1, k, 1:] = covs
    coords = np.array([site_xy[s] for s in site_order], dtype=float)
    return SiteSet(coords, tuple(site_order)), x0


# ---------------------------------------------------------------------------
# Manifests and reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_kv(path: str, items: list[tuple[str, object]]) -> None:
    atomic_write_text(path, "\n".join(f"{k} = {_fmt(v)}" for k, v in items) + "\n")


def read_kv(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise DataError(f"file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_manifest(
    path: str,
    spec: ModelSpec,
    dataset: Dataset,
    data_path: str,
    schedule: Schedule,
    chains: int,
    overdispersion: float,
    seed: int,
) -> None:
    p_eff = spec.effective_p(dataset)
    items = [
        ("format", MANIFEST_FORMAT),
        ("data.file", os.path.basename(data_path)),
        ("data.sha256", sha256_file(data_path)),
        ("data.n", dataset.n),
        ("data.q", dataset.q),
        ("data.m", dataset.m),
        ("data.p", dataset.p),
        ("data.area_factor", float(dataset.area_factor)),
        ("model.variant", spec.variant),
        ("model.beta_dynamics", spec.beta_dynamics),
        ("model.shared_sigma_eta", spec.shared_sigma_eta),
        ("model.m0", float(spec.m0)),
        ("model.sigma0_diag", float(spec.sigma0_diag)),
        ("model.r_eta", spec.r_eta_value(p_eff) if spec.beta_dynamics != "flat" else 0),
        ("model.upsilon_eta_scale", float(spec.upsilon_eta_scale)),
        ("model.r_gamma", spec.r_gamma_value(dataset.q) if spec.spatial else 0),
        ("model.upsilon_gamma_scale", float(spec.upsilon_gamma_scale)),
        ("model.phi_lo", float(np.asarray(spec.phi_bounds)[..., 0].min())),
        ("model.phi_hi", float(np.asarray(spec.phi_bounds)[..., 1].max())),
        ("chains.count", chains),
        ("chains.iters", schedule.iters),
        ("chains.burnin", schedule.resolved_burnin),
        ("chains.thin", schedule.thin),
        ("chains.batch", schedule.batch),
        ("chains.overdispersion", float(overdispersion)),
        ("seed", seed),
    ]
    write_kv(path, items)


def read_manifest(fit_dir: str):
    path = os.path.join(fit_dir, "manifest.txt")
    kv = read_kv(path)
    if kv.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a standgp fit manifest")
    spec = ModelSpec(
        variant=kv["model.variant"],
        beta_dynamics=kv["model.beta_dynamics"],
        shared_sigma_eta=kv["model.shared_sigma_eta"] == "true",
        m0=float(kv["model.m0"]),
        sigma0_diag=float(kv["model.sigma0_diag"]),
        r_eta=int(kv["model.r_eta"]) or None,
        upsilon_eta_scale=float(kv["model.upsilon_eta_scale"]),
        r_gamma=int(kv["model.r_gamma"]) or None,
        upsilon_gamma_scale=float(kv["model.upsilon_gamma_scale"]),
        phi_bounds=(float(kv["model.phi_lo"]), float(kv["model.phi_hi"])),
    )
    info = {
        "sha256": kv["data.sha256"],
        "file": kv["data.file"],
        "n": int(kv["data.n"]),
        "q": int(kv["data.q"]),
        "m": int(kv["data.m"]),
        "p": int(kv["data.p"]),
        "area_factor": float(kv["data.area_factor"]),
        "chains": int(kv["chains.count"]),
        "seed": int(kv["seed"]),
    }
    return spec, info


def _check_fit_data(fit_dir: str, info: dict, data_path: str, dataset: Dataset) -> None:
    actual = sha256_file(data_path)
    if actual != info["sha256"]:
        raise DataError(
            f"data fingerprint mismatch: {data_path} does not match the data used to "
            f"fit {fit_dir} (expected sha256 {info['sha256'][:12]}..., got {actual[:12]}...)"
        )
    if (dataset.n, dataset.q, dataset.m, dataset.p) != (
        info["n"],
        info["q"],
        info["m"],
        info["p"],
    ):
        raise DataError(f"dataset dimensions do not match the fit manifest in {fit_dir}")


def load_fit_chains(fit_dir: str, dataset: Dataset, spec: ModelSpec, count: int) -> list[ChainStore]:
    layout = ParamLayout.from_model(dataset, spec)
    stores = []
    for c in range(1, count + 1):
        path = os.path.join(fit_dir, f"chain{c}.csv")
        if not os.path.isfile(path):
            raise DataError(f"missing posterior samples file: {path}")
        stores.append(load_chain_csv(path, layout))
    return stores


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _resolve_seed(cfg: dict[str, str], cli_seed: int | None) -> int:
    if cli_seed is not None:
        return cli_seed
    seed = _get_int(cfg, "seed", 0)
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    return seed


def cmd_simulate(cfg: dict[str, str], out_dir: str, seed: int) -> int:
    config = SimConfig(
        n=_get_int(cfg, "sim.n", 50),
        q=_get_int(cfg, "sim.q", 2),
        m=_get_int(cfg, "sim.m", 4),
        p=_get_int(cfg, "sim.p", 2),
        seed=seed,
        side=_get_float(cfg, "sim.side", 2.0),
        beta0_mean=None,
        beta0_sd=_get_float(cfg, "sim.beta0_sd", 0.3),
        sigma_eta=_get_float(cfg, "sim.sigma_eta", 0.01),
        include_w=_get_bool(cfg, "sim.include_w", True),
    )
    intercept = _get_float(cfg, "sim.intercept")
    if intercept is not None:
        mean0 = np.zeros(config.p)
        mean0[0] = intercept
        config.beta0_mean = mean0
    a_diag = _get_float(cfg, "sim.a_diag")
    a_off = _get_float(cfg, "sim.a_offdiag")
    if a_diag is not None or a_off is not None:
        A = np.zeros((config.m, config.q, config.q))
        for j in range(config.m):
            A[j] = np.diag(np.full(config.q, a_diag if a_diag is not None else 0.4))
            for r in range(1, config.q):
                A[j, r, r - 1] = a_off if a_off is not None else 0.15
        config.A = A
    phi = _get_float(cfg, "sim.phi")
    if phi is not None:
        config.phi = np.full((config.m, config.q), phi)

    dataset, truth = simulate(config)
    write_dataset_csv(dataset, os.path.join(out_dir, "data.csv"))

    layout = ParamLayout(
        q=dataset.q,
        m=dataset.m,
        n=dataset.n,
        p=dataset.p,
        dynamics="markov",
        shared_sigma_eta=True,
        spatial=config.include_w,
    )
    names = layout.names()
    values = layout.flatten(truth)
    lines = ["name,value"] + [f"{nm},{repr(float(v))}" for nm, v in zip(names, values)]
    atomic_write_text(os.path.join(out_dir, "truth.csv"), "\n".join(lines) + "\n")
    print(
        f"simulated dataset: n={dataset.n} q={dataset.q} m={dataset.m} p={dataset.p}, "
        f"total count {int(dataset.counts.sum())}"
    )
    return 0


def fit_settings(cfg: dict[str, str]):
    """Chain plan from config; defaults: 3 chains of 75000 with 15000 burn-in."""
    iters = _get_int(cfg, "chains.iters", 75000)
    burnin = _get_int(cfg, "chains.burnin", 15000)
    thin = _get_int(cfg, "chains.thin", 1)
    batch = _get_int(cfg, "chains.batch", 50)
    count = _get_int(cfg, "chains.count", 3)
    overdispersion = _get_float(cfg, "chains.overdispersion", 0.5)
    workers = _get_int(cfg, "chains.workers")
    if count < 1:
        raise ConfigError("chains.count must be at least 1")
    if iters <= burnin:
        raise ConfigError(f"chains.iters ({iters}) must exceed chains.burnin ({burnin})")
    try:
        schedule = Schedule(iters=iters, burnin=burnin, thin=thin, batch=batch)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    return schedule, count, overdispersion, workers


def cmd_fit(cfg: dict[str, str], out_dir: str, seed: int) -> int:
    data_path = _get(cfg, "data.path", required=True)
    dataset = ingest(data_path, area_factor=_get_float(cfg, "data.area_factor", 1.0))
    print(
        f"ingested {data_path}: n={dataset.n} q={dataset.q} m={dataset.m} "
        f"p={dataset.p}, total count {int(dataset.counts.sum())}"
    )
    spec = model_spec_from_config(cfg)
    schedule, count, overdispersion, workers = fit_settings(cfg)

    stores = run_chains(
        dataset,
        spec,
        schedule,
        seed,
        chains=count,
        overdispersion=overdispersion,
        workers=workers,
    )
    for store in stores:
        save_chain_csv(store, os.path.join(out_dir, f"chain{store.chain_id}.csv"))
        print(
            f"chain {store.chain_id}: {store.n_draws} retained draws, "
            f"final log_joint {store.log_joint[-1]:.3f}"
        )
    if count >= 2:
        table = assess_mod.rhat_table(stores)
        lines = ["parameter,rhat"] + [f"{k},{repr(v)}" for k, v in table.items()]
        atomic_write_text(os.path.join(out_dir, "convergence.csv"), "\n".join(lines) + "\n")
        finite = [v for v in table.values() if not math.isnan(v)]
        if finite:
            print(f"max R-hat over {len(finite)} parameters: {max(finite):.4f}")
    write_manifest(
        os.path.join(out_dir, "manifest.txt"),
        spec,
        dataset,
        data_path,
        schedule,
        count,
        overdispersion,
        seed,
    )
    return 0


def cmd_predict(cfg: dict[str, str], out_dir: str, seed: int) -> int:
    fit_dir = _get(cfg, "predict.fit", required=True)
    spec, info = read_manifest(fit_dir)
    data_path = _get(cfg, "data.path", required=True)
    dataset = ingest(data_path, area_factor=info["area_factor"])
    _check_fit_data(fit_dir, info, data_path, dataset)
    chains = load_fit_chains(fit_dir, dataset, spec, info["chains"])

    sites_path = _get(cfg, "predict.sites", required=True)
    p_eff = spec.effective_p(dataset)
    new_sites, x0 = ingest_sites(sites_path, dataset.q, dataset.m, dataset.p)
    if x0 is not None and p_eff < dataset.p:
        x0 = x0[..., :p_eff]
    if x0 is None and p_eff > 1:
        raise DataError("the fitted model uses covariates; provide a per-cell sites file")
    request = predict_mod.PredictionRequest(
        new_sites=new_sites,
        covariates=x0,
        draws=_get_int(cfg, "predict.draws", 500),
    )
    rng = derive_rng(seed, 2)
    draws = predict_mod.predictive_counts(request, chains, dataset, spec, rng)
    factor = dataset.area_factor if _get_bool(cfg, "predict.per_hectare", False) else 1.0
    summary = predict_mod.summarize_predictive(draws, area_factor=factor)

    lines = ["site_id,x,y,species,class,median,lower95,upper95,range"]
    for k in range(new_sites.n):
        sx, sy = new_sites.coords[k]
        for i in range(dataset.q):
            for j in range(dataset.m):
                lines.append(
                    ",".join(
                        [
                            new_sites.ids[k],
                            repr(float(sx)),
                            repr(float(sy)),
                            str(i + 1),
                            str(j + 1),
                            repr(float(summary.median[k, i, j])),
                            repr(float(summary.lower95[k, i, j])),
                            repr(float(summary.upper95[k, i, j])),
                            repr(float(summary.range95[k, i, j])),
                        ]
                    )
                )
    atomic_write_text(os.path.join(out_dir, "predictions.csv"), "\n".join(lines) + "\n")
    print(f"predicted {new_sites.n} sites x {dataset.q} groups x {dataset.m} classes")
    return 0


def cmd_assess(cfg: dict[str, str], out_dir: str, seed: int) -> int:
    fits_raw = _get(cfg, "assess.fits", required=True)
    fit_dirs = [f.strip() for f in fits_raw.split(",") if f.strip()]
    if not fit_dirs:
        raise ConfigError("assess.fits must list at least one fit directory")
    data_path = _get(cfg, "data.path", required=True)
    holdout_path = _get(cfg, "assess.holdout")
    n_draws = _get_int(cfg, "assess.draws", 500)

    items: list[tuple[str, object]] = [
        ("format", ASSESSMENT_FORMAT),
        ("models", ",".join(f"model{k + 1}" for k in range(len(fit_dirs)))),
    ]
    holdout = None
    if holdout_path is not None:
        try:
            holdout = ingest(holdout_path)
        except DataError as exc:
            if "no data rows" in str(exc):
                raise DataError(f"{holdout_path}: holdout file contains no rows") from exc
            raise
        items.append(("holdout.sites", holdout.n))

    for k, fit_dir in enumerate(fit_dirs):
        label = f"model{k + 1}"
        spec, info = read_manifest(fit_dir)
        dataset = ingest(data_path, area_factor=info["area_factor"])
        _check_fit_data(fit_dir, info, data_path, dataset)
        chains = load_fit_chains(fit_dir, dataset, spec, info["chains"])
        trace = assess_mod.deviance_trace(dataset, chains, spec)
        result = assess_mod.dic(trace)
        items += [
            (f"{label}.variant", spec.variant),
            (f"{label}.p_d", result.p_d),
            (f"{label}.dic", result.dic),
            (f"{label}.mean_deviance", result.mean_deviance),
        ]
        print(f"{label} ({spec.variant}): p_D={result.p_d:.2f} DIC={result.dic:.2f}")

        if holdout is not None:
            if (holdout.q, holdout.m, holdout.p) != (dataset.q, dataset.m, dataset.p):
                raise DataError("holdout dimensions do not match the training data")
            p_eff = spec.effective_p(dataset)
            x0 = holdout.covariates[..., :p_eff]
            request = predict_mod.PredictionRequest(
                new_sites=holdout.sites, covariates=x0, draws=n_draws
            )
            rng = derive_rng(seed, 3, k + 1)
            draws = predict_mod.predictive_counts(request, chains, dataset, spec, rng)
            report = assess_mod.score_report(holdout, draws.intensities)
            for i in range(dataset.q):
                for j in range(dataset.m):
                    prefix = f"{label}.scores.species{i + 1}.class{j + 1}"
                    items += [
                        (f"{prefix}.logs", float(report.logs[i, j])),
                        (f"{prefix}.ses", float(report.ses[i, j])),
                        (f"{prefix}.dss", float(report.dss[i, j])),
                    ]
    write_kv(os.path.join(out_dir, "assessment.txt"), items)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="standgp",
        description="Dynamic multivariate Poisson spatial regression for "
        "species-by-size-class count tables",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, fn in (
        ("simulate", cmd_simulate),
        ("fit", cmd_fit),
        ("predict", cmd_predict),
        ("assess", cmd_assess),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the key = value config file")
        sp.add_argument("--out", default="standgp_out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = _resolve_seed(cfg, args.seed)
        os.makedirs(args.out, exist_ok=True)
        return args.handler(cfg, args.out, seed)
    except ConfigError as exc:
        print(f"standgp: config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"standgp: data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, SingularCovarianceError, DomainError) as exc:
        print(f"standgp: numeric failure: {exc}", file=sys.stderr)
        return 4
    except StandGPError as exc:
        print(f"standgp: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
