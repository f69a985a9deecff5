"""Batch command-line pipeline with a reproducible TOML configuration.

Each subcommand consumes the artifacts of earlier stages from the output
directory, so runs are resumable stage by stage; ``pipeline`` chains them
all and writes a manifest (config hash, seed, versions, artifact digests)
that makes reruns byte-for-byte verifiable. Identical config and seed give
identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .bayes import posterior_rank
from .clustering import (
    Partition,
    grid_search,
    knn_sparsify,
    merge_ris,
    partition_at,
    partition_from_frame,
    random_partition,
    select_K,
    split_subclusters,
)
from .embedding import mds_embed
from .errors import CipcaError, ConfigError
from .evaluation import alpha_regression, factor_stats, ordered_selection, tangency_backtest
from .factor_model import (
    RestrictionMask,
    fit,
    oos_factor_returns,
    restriction_mask_from_partition,
)
from .panel import PanelSchema, build_weights, load_panel, rank_transform, standardize
from .similarity import similarity_matrix, to_distance

logger = logging.getLogger(__name__)

MODES = ("ic", "dc", "pdc", "rc", "ipca")
SELECTIONS = ("ordered", "bayes", "none")


@dataclass
class RunConfig:
    """Resolved run configuration; see the README for an annotated example."""

    panel_path: str
    out_dir: str
    schema: PanelSchema = field(default_factory=PanelSchema)
    mode: str = "dc"
    weights: str = "value"
    seed: int = 0
    jobs: int = 1
    training_months: int = 180
    price_floor: float = 5.0
    # clustering
    ic_partition: str | None = None
    knn_grid: list[int] = field(default_factory=list)
    m_grid: list[int] = field(default_factory=list)
    knn: int | None = None
    m: int | None = None
    K: int | None = None
    f: float = 1e3
    eta: float = 1.3
    # factor model
    include_zc: bool = True
    n_factors: int | None = None
    oos_burn_in: int | None = None
    tol: float = 1e-8
    max_iter: int = 1000
    ridge: bool = False
    # selection / evaluation
    selection: str = "ordered"
    tangency_burn_in: int = 60
    tr: float = 0.1
    sh2max: float | None = None
    top_n: int = 10
    market_factor: str | None = None
    benchmarks: str | None = None
    nw_lags: int | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        inp = dict(raw.get("input", {}))
        run = dict(raw.get("run", {}))
        clu = dict(raw.get("clustering", {}))
        fac = dict(raw.get("factors", {}))
        sel = dict(raw.get("selection", {}))
        try:
            panel_path = inp.pop("panel")
        except KeyError:
            raise ConfigError("config needs [input] panel = <path>") from None
        schema_keys = {k: inp.pop(k) for k in list(inp)
                       if k in PanelSchema.__dataclass_fields__}
        if inp:
            raise ConfigError(f"unknown [input] keys: {sorted(inp)}")
        kwargs: dict = {
            "panel_path": panel_path,
            "schema": PanelSchema.from_dict(schema_keys),
        }
        sections = {"run": run, "clustering": clu, "factors": fac, "selection": sel}
        rename = {("run", "out"): "out_dir", ("selection", "mode"): "selection"}
        for sec_name, sec in sections.items():
            for key, val in sec.items():
                attr = rename.get((sec_name, key), key)
                if attr not in cls.__dataclass_fields__ or attr in kwargs:
                    raise ConfigError(f"unknown config key [{sec_name}] {key}")
                kwargs[attr] = val
        if "out_dir" not in kwargs:
            raise ConfigError("config needs [run] out = <dir>")
        return cls(**kwargs)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        if self.weights not in ("value", "equal"):
            raise ConfigError("weights must be 'value' or 'equal'")
        if not Path(self.panel_path).exists():
            raise ConfigError(f"panel file not found: {self.panel_path}")
        if self.mode in ("ic", "dc"):
            if not self.ic_partition:
                raise ConfigError(f"mode {self.mode!r} needs [clustering] ic_partition")
            if not Path(self.ic_partition).exists():
                raise ConfigError(f"prior partition not found: {self.ic_partition}")
        if self.mode == "rc" and (self.K is None or self.seed is None):
            raise ConfigError("mode 'rc' needs [clustering] K and [run] seed")
        if self.mode == "ipca" and not self.n_factors:
            raise ConfigError("mode 'ipca' needs [factors] n_factors")
        if self.mode in ("dc", "pdc") and self.knn is None and not (self.knn_grid and self.m_grid):
            raise ConfigError(f"mode {self.mode!r} needs fixed (knn, m) or grids")
        if self.benchmarks and not Path(self.benchmarks).exists():
            raise ConfigError(f"benchmark file not found: {self.benchmarks}")

    def resolved(self) -> dict:
        d = asdict(self)
        d["schema"] = {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(self.schema).items()}
        return d


def load_config(path: str, overrides: tuple[str, ...] = ()) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            parsed = tomllib.loads(f"v = {val}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = val
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# artifact helpers

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False)


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_clean_panel(cfg: RunConfig):
    path = _out(cfg) / "panel_clean.csv"
    if not path.exists():
        raise CipcaError("panel_clean.csv missing; run the ingest stage first")
    return load_panel(path, PanelSchema(characteristics=()))


def _training(panel, cfg: RunConfig):
    months = min(cfg.training_months, panel.n_months)
    return panel.subset(slice(0, months))


def _factor_names(cfg: RunConfig, partition: Partition | None) -> list[str]:
    if cfg.mode == "ipca":
        return [f"f{j}" for j in range(cfg.n_factors)]
    labels = partition.labels or [str(k) for k in range(partition.K)]
    names = [f"f{k}_{labels[k]}" for k in range(partition.K)]
    if cfg.include_zc:
        names.append("ZC")
    return names


def _load_partition(cfg: RunConfig):
    path = _out(cfg) / "partition.csv"
    if not path.exists():
        raise CipcaError("partition.csv missing; run the cluster stage first")
    panel = _load_clean_panel(cfg)
    return partition_from_frame(pd.read_csv(path), panel.char_names), panel


def _mask_for(cfg: RunConfig, partition: Partition | None, n_chars: int) -> RestrictionMask:
    if cfg.mode == "ipca":
        return RestrictionMask.unrestricted(n_chars, cfg.n_factors)
    return restriction_mask_from_partition(partition, include_zc=cfg.include_zc)


def _read_factors(path: Path) -> tuple[list[int], np.ndarray, list[str]]:
    if not path.exists():
        raise CipcaError(f"{path.name} missing; run earlier stages first")
    df = pd.read_csv(path)
    names = [c for c in df.columns if c != "date"]
    return df["date"].astype(int).tolist(), df[names].to_numpy(dtype=float), names


def _market_index(cfg: RunConfig, names: list[str]) -> int:
    if cfg.market_factor is None:
        return len(names) - 1  # ZC/market sits in the last column
    if cfg.market_factor in names:
        return names.index(cfg.market_factor)
    try:
        idx = int(cfg.market_factor)
    except ValueError:
        raise ConfigError(f"market factor {cfg.market_factor!r} not in {names}") from None
    if not 0 <= idx < len(names):
        raise ConfigError(f"market factor index {idx} out of range")
    return idx


# ---------------------------------------------------------------------------
# stages

def stage_ingest(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    panel = load_panel(cfg.panel_path, cfg.schema)
    _write_csv(panel.to_frame(), out / "panel_clean.csv")
    _write_csv(standardize(panel).to_frame(panel), out / "standardized.csv")
    _write_csv(rank_transform(panel).to_frame(panel), out / "ranks.csv")
    return ["panel_clean.csv", "standardized.csv", "ranks.csv"]


def stage_similarity(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    panel = _training(_load_clean_panel(cfg), cfg)
    ranks = rank_transform(panel)
    weights = build_weights(panel, cfg.weights, cfg.price_floor)
    sim = similarity_matrix(ranks, weights)
    dist = to_distance(sim)
    sim.to_frame("S").to_csv(out / "similarity.csv")
    sim.to_frame("rho").to_csv(out / "rho.csv")
    dist.to_frame().to_csv(out / "distance.csv")
    _write_json({"characteristics": sim.char_names, "S": sim.S.tolist(),
                 "rho": sim.rho.tolist(), "D": dist.D.tolist()},
                out / "similarity.json")
    return ["similarity.csv", "rho.csv", "distance.csv", "similarity.json"]


def _read_similarity(cfg: RunConfig):
    from .similarity import SimilarityMatrix

    path = _out(cfg) / "similarity.csv"
    if not path.exists():
        raise CipcaError("similarity.csv missing; run the similarity stage first")
    df = pd.read_csv(path, index_col=0)
    rho = pd.read_csv(_out(cfg) / "rho.csv", index_col=0)
    return SimilarityMatrix(S=df.to_numpy(), rho=rho.to_numpy(),
                            char_names=list(df.columns))


def stage_cluster(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    panel = _load_clean_panel(cfg)
    I = panel.n_chars
    prior = None
    if cfg.ic_partition:
        prior = partition_from_frame(pd.read_csv(cfg.ic_partition), panel.char_names)

    trace = None
    hyper: dict = {"mode": cfg.mode, "f": cfg.f, "eta": cfg.eta}
    if cfg.mode == "ipca":
        _write_json({"mode": "ipca", "n_factors": cfg.n_factors}, out / "hyperparams.json")
        return ["hyperparams.json"]
    if cfg.mode == "ic":
        partition = prior
        hyper["K"] = partition.K
    elif cfg.mode == "rc":
        partition = random_partition(I, cfg.K, cfg.seed)
        hyper.update(K=cfg.K, seed=cfg.seed)
    else:  # dc / pdc
        constrained = cfg.mode == "dc"
        sim = _read_similarity(cfg)
        if cfg.knn is not None and cfg.m is not None:
            graph = knn_sparsify(sim, cfg.knn)
            subs = split_subclusters(graph, prior, cfg.m, constrained=constrained)
            _, trace = merge_ris(subs, graph, 1)
            K = cfg.K if cfg.K is not None else select_K(trace, cfg.m, cfg.f, cfg.eta)
            partition = partition_at(trace, K, I)
            hyper.update(knn=cfg.knn, m=cfg.m, K=K)
        else:
            training = _training(panel, cfg)
            params, partition = grid_search(
                training, prior, cfg.knn_grid, cfg.m_grid, scheme=cfg.weights,
                price_floor=cfg.price_floor, f=cfg.f, eta=cfg.eta,
                constrained=constrained, include_zc=cfg.include_zc,
                tangency_burn_in=cfg.tangency_burn_in, fit_tol=cfg.tol,
                fit_max_iter=cfg.max_iter, jobs=cfg.jobs)
            hyper.update(knn=params.knn, m=params.m, K=params.K)

    artifacts = ["partition.csv", "hyperparams.json"]
    _write_csv(partition.to_frame(panel.char_names), out / "partition.csv")
    _write_json(hyper, out / "hyperparams.json")
    if trace is not None:
        _write_json(trace.to_dict(), out / "merge_trace.json")
        artifacts.append("merge_trace.json")
    return artifacts


def stage_fit(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    partition = None
    if cfg.mode == "ipca":
        panel = _load_clean_panel(cfg)
    else:
        partition, panel = _load_partition(cfg)
    training = _training(panel, cfg)
    Z = standardize(training)
    weights = build_weights(training, cfg.weights, cfg.price_floor)
    mask = _mask_for(cfg, partition, panel.n_chars)
    model = fit(Z, training.returns, weights, mask,
                tol=cfg.tol, max_iter=cfg.max_iter, ridge=cfg.ridge)
    names = _factor_names(cfg, partition)
    _write_json(model.to_dict(), out / "model.json")
    gamma = pd.DataFrame(model.Gamma, columns=names,
                         index=panel.char_names + ["const"])
    gamma.to_csv(out / "gamma.csv")
    df = pd.DataFrame(model.factors, columns=names)
    df.insert(0, "date", model.dates)
    _write_csv(df, out / "factors_insample.csv")
    return ["model.json", "gamma.csv", "factors_insample.csv"]


def stage_oos(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    partition = None
    if cfg.mode == "ipca":
        panel = _load_clean_panel(cfg)
    else:
        partition, panel = _load_partition(cfg)
    Z = standardize(panel)
    weights = build_weights(panel, cfg.weights, cfg.price_floor)
    mask = _mask_for(cfg, partition, panel.n_chars)
    burn_in = cfg.oos_burn_in if cfg.oos_burn_in is not None else cfg.training_months
    series = oos_factor_returns(Z, panel.returns, weights, mask, burn_in=burn_in,
                                tol=cfg.tol, max_iter=cfg.max_iter, ridge=cfg.ridge)
    names = _factor_names(cfg, partition)
    _write_csv(series.to_frame(names), out / "factors_oos.csv")
    artifacts = ["factors_oos.csv", "factor_stats.csv"]
    stats = _stats_table(cfg, series.F, names)
    _write_csv(stats, out / "factor_stats.csv")
    return artifacts


def _stats_table(cfg: RunConfig, F: np.ndarray, names: list[str]) -> pd.DataFrame:
    rows = []
    bench = None
    if cfg.benchmarks:
        bdf = pd.read_csv(cfg.benchmarks)
        bench = bdf[[c for c in bdf.columns if c != "date"]].to_numpy(dtype=float)
        if bench.shape[0] != F.shape[0]:
            logger.warning("benchmark length %d != factor length %d; skipping alphas",
                           bench.shape[0], F.shape[0])
            bench = None
    for j, name in enumerate(names):
        st = factor_stats(F[:, j])
        row = {"factor": name, "mean_pct": st.mean, "sd_pct": st.sd,
               "sharpe": st.sharpe, "mdd_pct": st.mdd}
        if bench is not None:
            rep = alpha_regression(F[:, j], bench, cfg.nw_lags)
            row.update(alpha_pct=rep.alpha, alpha_tstat=rep.tstat_alpha,
                       nw_lags=rep.nw_lags)
        rows.append(row)
    return pd.DataFrame(rows)


def stage_tangency(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    dates, F, names = _read_factors(out / "factors_oos.csv")
    burn_in = max(cfg.tangency_burn_in, F.shape[1] + 2)
    result = tangency_backtest(F, burn_in=burn_in, ridge=cfg.ridge)
    ret = pd.DataFrame({"date": dates[burn_in:], "ret": result.returns})
    _write_csv(ret, out / "tangency_returns.csv")
    wdf = pd.DataFrame(np.array(result.weights_path), columns=names)
    wdf.insert(0, "date", dates[burn_in:])
    wdf["scaling"] = result.scaling_path
    _write_csv(wdf, out / "tangency_weights.csv")
    _write_json({"sharpe": result.sharpe, "burn_in": burn_in,
                 "months": len(result.returns)}, out / "tangency_summary.json")
    return ["tangency_returns.csv", "tangency_weights.csv", "tangency_summary.json"]


def stage_select_ordered(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    _, F_train, names = _read_factors(out / "factors_insample.csv")
    _, F_oos, _ = _read_factors(out / "factors_oos.csv")
    market = _market_index(cfg, names)
    sel = ordered_selection(F_train, market)
    rows = []
    for j, model in enumerate(sel.models, start=1):
        burn_in = max(cfg.tangency_burn_in, len(model) + 2)
        sharpe = tangency_backtest(F_oos[:, model], burn_in=burn_in,
                                   ridge=cfg.ridge).sharpe
        rows.append({"J": j, "added_factor": names[sel.order[j - 1]],
                     "train_sharpe": sel.sharpes[sel.order[j - 1]],
                     "oos_tangency_sharpe": sharpe})
    _write_csv(pd.DataFrame(rows), out / "ordered_selection.csv")
    _write_json({"order": [names[i] for i in sel.order],
                 "models": [[names[i] for i in m] for m in sel.models]},
                out / "ordered_models.json")
    return ["ordered_selection.csv", "ordered_models.json"]


def stage_select_bayes(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    _, F_train, names = _read_factors(out / "factors_insample.csv")
    _, F_oos, _ = _read_factors(out / "factors_oos.csv")
    ranked = posterior_rank(F_train, tr=cfg.tr, sh2max=cfg.sh2max, top_n=cfg.top_n)
    rows = []
    for rank, mp in enumerate(ranked, start=1):
        cols = list(mp.spec.included)
        burn_in = max(cfg.tangency_burn_in, len(cols) + 2)
        sharpe = tangency_backtest(F_oos[:, cols], burn_in=burn_in,
                                   ridge=cfg.ridge).sharpe
        rows.append({
            "rank": rank, "posterior": mp.posterior,
            "log_marginal": mp.log_marginal, "J": len(cols),
            "included": "|".join(names[i] for i in cols),
            "oos_tangency_sharpe": sharpe,
        })
    _write_csv(pd.DataFrame(rows), out / "bayes_models.csv")
    _write_json(rows, out / "bayes_models.json")
    return ["bayes_models.csv", "bayes_models.json"]


def stage_embed(cfg: RunConfig) -> list[str]:
    out = _out(cfg)
    path = out / "distance.csv"
    if not path.exists():
        raise CipcaError("distance.csv missing; run the similarity stage first")
    dist = pd.read_csv(path, index_col=0)
    emb = mds_embed(dist.to_numpy(), seed=cfg.seed)
    df = pd.DataFrame({"characteristic": list(dist.columns),
                       "x": emb.coords[:, 0], "y": emb.coords[:, 1]})
    ppath = out / "partition.csv"
    if ppath.exists():
        part = pd.read_csv(ppath)
        df = df.merge(part, on="characteristic", how="left")
    _write_csv(df, out / "embedding.csv")
    _write_json({"stress": emb.stress, "iterations": emb.iterations},
                out / "embedding_summary.json")
    return ["embedding.csv", "embedding_summary.json"]


PIPELINE = [
    ("ingest", stage_ingest),
    ("similarity", stage_similarity),
    ("cluster", stage_cluster),
    ("fit", stage_fit),
    ("oos", stage_oos),
    ("tangency", stage_tangency),
    ("select", None),  # resolved from config
    ("embed", stage_embed),
]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage and write the manifest; returns the manifest dict."""
    out = _out(cfg)
    resolved = cfg.resolved()
    config_hash = hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()).hexdigest()
    produced: list[str] = []
    completed: list[str] = []
    failure = None
    for name, func in PIPELINE:
        if name == "select":
            if cfg.selection == "none":
                continue
            func = stage_select_ordered if cfg.selection == "ordered" else stage_select_bayes
            name = f"select-{cfg.selection}"
        try:
            produced += func(cfg)
            completed.append(name)
        except CipcaError as exc:
            failure = (name, str(exc))
            break
    stale = sorted(p.name for p in out.glob("*")
                   if p.name not in produced and p.name != "manifest.json")
    manifest = {
        "config": resolved,
        "config_hash": config_hash,
        "seed": cfg.seed,
        "versions": _versions(),
        "stages": completed,
        "artifacts": {a: _sha256(out / a) for a in sorted(set(produced))},
        "stale": stale,
        "status": "ok" if failure is None else "failed",
    }
    if failure is not None:
        manifest["failed_stage"], manifest["error"] = failure
    _write_json(manifest, out / "manifest.json")
    if failure is not None:
        raise CipcaError(f"stage {failure[0]} failed: {failure[1]}")
    return manifest


def _versions() -> dict:
    import scipy

    return {
        "cipca": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "python": ".".join(map(str, sys.version_info[:3])),
    }


# ---------------------------------------------------------------------------
# click wiring

def _common_options(func):
    func = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Override a config key (dotted path).")(func)
    func = click.option("--jobs", type=int, default=None,
                        help="Parallel workers for grid search.")(func)
    func = click.option("--seed", type=int, default=None)(func)
    func = click.option("--weights", type=click.Choice(["value", "equal"]),
                        default=None)(func)
    func = click.option("--mode", type=click.Choice(list(MODES)), default=None)(func)
    func = click.option("--out", "out_dir", type=click.Path(), default=None)(func)
    func = click.option("--config", "config_path", required=True,
                        type=click.Path(exists=True))(func)
    return func


def _build_config(config_path, out_dir, mode, weights, seed, jobs, overrides) -> RunConfig:
    extra = list(overrides)
    if out_dir is not None:
        extra.append(f'run.out="{out_dir}"')
    if mode is not None:
        extra.append(f'run.mode="{mode}"')
    if weights is not None:
        extra.append(f'run.weights="{weights}"')
    if seed is not None:
        extra.append(f"run.seed={seed}")
    if jobs is not None:
        extra.append(f"run.jobs={jobs}")
    return load_config(config_path, tuple(extra))


def _stage_command(name: str, func):
    @main.command(name=name, help=f"Run the {name} stage.")
    @_common_options
    def _cmd(config_path, out_dir, mode, weights, seed, jobs, overrides, _func=func):
        cfg = _build_config(config_path, out_dir, mode, weights, seed, jobs, overrides)
        try:
            artifacts = _func(cfg)
        except CipcaError as exc:
            raise click.ClickException(f"{name}: {exc}") from exc
        click.echo(f"{name}: wrote {', '.join(artifacts)}")


@click.group()
def main():
    """Cluster-restricted instrumented-PCA batch pipeline."""
    level = os.environ.get("CIPCA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


for _name, _func in [
    ("ingest", stage_ingest),
    ("similarity", stage_similarity),
    ("cluster", stage_cluster),
    ("fit", stage_fit),
    ("oos", stage_oos),
    ("tangency", stage_tangency),
    ("select-ordered", stage_select_ordered),
    ("select-bayes", stage_select_bayes),
    ("embed", stage_embed),
]:
    _stage_command(_name, _func)


@main.command(name="pipeline", help="Run every stage and write the manifest.")
@_common_options
def pipeline_cmd(config_path, out_dir, mode, weights, seed, jobs, overrides):
    cfg = _build_config(config_path, out_dir, mode, weights, seed, jobs, overrides)
    try:
        manifest = run_pipeline(cfg)
    except CipcaError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"pipeline: {len(manifest['artifacts'])} artifacts in {cfg.out_dir}")


if __name__ == "__main__":
    main()
