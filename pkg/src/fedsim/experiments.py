"""Experiment runner: local-only baselines, federated runs, result tables.

Config files are INI.  ``[experiment]`` holds defaults; every
``[run <name>]`` section describes one row of the results table and may
override any default.  Keys:

    seed, rounds, local_epochs, batch_size, lr, share_fraction, carrier,
    patch_radius, hidden_units, init_scale
    mode          federated | local
    client        (local runs) client name or index to train on
    client_mode   plain | fedprox | dtp
    mu, gamma, alpha, kpi_exponent
    strategy      fedavg | dwa
    T, xi, normalize_xi
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import _kernels
from .client import Client, ClientConfig, train_round
from .datagen import ClientDataset, default_benchmark, generate
from .model import ModelSpec, dice_score, init_params, predict
from .param_math import UsageError
from .server import AggregationConfig
from .transport import config_digest, run_federation

CLASS_NAMES = {1: "organ", 2: "tumor"}
RESULTS_FILE = "results.csv"
TRACE_FILE = "trace.csv"
RUN_FILE = "run.json"
TRACE_COLUMNS = ["run", "round", "client", "weight", "avg_loss", "val_dice", "loss_scale"]


@dataclass
class RunConfig:
    name: str
    mode: str = "federated"
    client: str = ""
    client_mode: str = "plain"
    mu: float = 0.0
    gamma: float = 1.0
    alpha: float = 0.9
    kpi_exponent: float = 1.0
    strategy: str = "fedavg"
    T: float = 2.0
    xi: int = 1
    normalize_xi: bool = False
    rounds: int = 20
    local_epochs: int = 2
    batch_size: int = 2
    lr: float = 5e-3
    share_fraction: float = 0.25
    carrier: str = "loopback"
    seed: int = 1
    patch_radius: int = 2
    hidden_units: int = 16
    init_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("federated", "local"):
            raise UsageError(f"run {self.name!r}: unknown mode {self.mode!r}")
        if self.mode == "local" and self.client == "":
            raise UsageError(f"run {self.name!r}: local runs need a client")

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.patch_radius, self.hidden_units, 3)

    def client_config(self, client_id: int, mode: str | None = None) -> ClientConfig:
        return ClientConfig(
            client_id=client_id,
            mode=mode or self.client_mode,
            mu=self.mu,
            gamma=self.gamma,
            alpha=self.alpha,
            kpi_exponent=self.kpi_exponent,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            share_fraction=self.share_fraction,
            seed=self.seed,
        )

    def aggregation_config(self, n_clients: int) -> AggregationConfig:
        return AggregationConfig(self.strategy, self.T, self.xi, self.normalize_xi,
                                 min_clients=n_clients, rounds=self.rounds)


@dataclass
class ExperimentConfig:
    seed: int = 1
    runs: list = field(default_factory=list)

    def __post_init__(self):
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise UsageError("run names must be unique")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(seed, [dataclasses.replace(r, seed=seed) for r in self.runs])

    def with_carrier(self, carrier: str) -> "ExperimentConfig":
        return ExperimentConfig(self.seed, [dataclasses.replace(r, carrier=carrier) for r in self.runs])


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    defaults = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _FIELD_TYPES or key == "name":
                raise UsageError(f"unknown experiment key {key!r}")
            defaults[key] = _coerce(key, raw)
    runs = []
    for section in parser.sections():
        if section == "experiment":
            continue
        if not section.startswith("run "):
            raise UsageError(f"unknown section [{section}]")
        values = dict(defaults)
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES or key == "name":
                raise UsageError(f"[{section}]: unknown key {key!r}")
            values[key] = _coerce(key, raw)
        runs.append(RunConfig(name=section[4:].strip(), **values))
    return ExperimentConfig(defaults.get("seed", 1), runs)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def benchmark_datasets(seed: int) -> list[ClientDataset]:
    return [generate(s) for s in default_benchmark(seed)]


def result_columns(datasets) -> list[tuple[int, int, str]]:
    """(client index, class id, column name) for every supervised foreground class."""
    cols = []
    for i, ds in enumerate(datasets):
        label = ds.name or str(ds.client_id)
        for c in ds.label_space:
            if c != 0:
                cols.append((i, c, f"client{label}_{CLASS_NAMES.get(c, f'class{c}')}"))
    return cols


def evaluate(params, spec: ModelSpec, datasets, split: str = "test", classes=None) -> dict:
    """Hard Dice of one model on every client's split, plus the unweighted average.

    ``classes`` limits predictions to the label space the model was trained
    on; ``None`` means all classes.
    """
    row = {}
    preds = {}
    for i, c, name in result_columns(datasets):
        data = getattr(datasets[i], split)
        if i not in preds:
            preds[i] = predict(params, spec, data.images, classes)
        row[name] = dice_score(preds[i], data.labels, c)
    row["all_avg"] = float(np.mean(list(row.values())))
    return row


def _client_index(datasets, key: str) -> int:
    for i, ds in enumerate(datasets):
        if key in (ds.name, str(ds.client_id)):
            return i
    raise UsageError(f"no client named {key!r}")


def initial_params(run: RunConfig) -> np.ndarray:
    return init_params(run.model_spec, [run.seed, 1], run.init_scale)


def train_standalone(params, dataset: ClientDataset, cfg: ClientConfig, rounds: int, spec: ModelSpec):
    """``rounds * local_epochs`` epochs of local training, optimizer reset every round."""
    params = np.array(params, dtype=np.float64)
    losses = []
    for r in range(1, rounds + 1):
        res = train_round(params, dataset, cfg, r, spec, validate=False)
        params = res.params
        losses.append(res.report.avg_loss)
    return params, losses


def run_local_baseline(run: RunConfig, datasets):
    """Train on one client only; evaluate on all clients' test splits."""
    idx = _client_index(datasets, run.client)
    spec = run.model_spec
    cfg = run.client_config(datasets[idx].client_id, mode="plain")
    params, losses = train_standalone(initial_params(run), datasets[idx], cfg, run.rounds, spec)
    if not np.all(np.isfinite(params)):
        raise RuntimeError(f"run {run.name!r}: training diverged")
    return params, evaluate(params, spec, datasets, classes=datasets[idx].label_space), losses


def run_federated(run: RunConfig, datasets, log=None):
    """Federated run; evaluates the best global model on all test splits."""
    spec = run.model_spec
    clients = [Client(ds, run.client_config(ds.client_id), spec) for ds in datasets]
    digest = config_digest(json.dumps(dataclasses.asdict(run), sort_keys=True))
    result = run_federation(run.aggregation_config(len(clients)), clients, initial_params(run),
                            carrier=run.carrier, digest=digest, log=log)
    return result, evaluate(result.best_params, spec, datasets)


def execute_run(run: RunConfig, datasets=None) -> dict:
    datasets = datasets if datasets is not None else benchmark_datasets(run.seed)
    start = time.perf_counter()
    if run.mode == "local":
        _, row, _ = run_local_baseline(run, datasets)
        trace, best_round = [], None
    else:
        result, row = run_federated(run, datasets)
        trace, best_round = result.trace, result.best_round
    return {
        "name": run.name,
        "row": row,
        "trace": trace,
        "best_round": best_round,
        "seconds": time.perf_counter() - start,
    }


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(execute_run, cfg.runs))
    cache = {}
    out = []
    for run in cfg.runs:
        if run.seed not in cache:
            cache[run.seed] = benchmark_datasets(run.seed)
        out.append(execute_run(run, cache[run.seed]))
    return out


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _stamp() -> str:
    return f"# fedsim generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n"


def results_csv(outcomes) -> str:
    columns = list(outcomes[0]["row"]) if outcomes else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", *columns])
    for o in outcomes:
        w.writerow([o["name"], *(f"{o['row'][c]:.4f}" for c in columns)])
    return buf.getvalue()


def trace_csv(outcomes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for o in outcomes:
        for t in o["trace"]:
            w.writerow([o["name"], t.round, t.client_id, f"{t.weight:.4f}", f"{t.avg_loss:.4f}",
                        f"{t.val_dice:.4f}", f"{t.loss_scale:.4f}"])
    return buf.getvalue()


def write_outputs(out_dir, cfg: ExperimentConfig, outcomes) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESULTS_FILE).write_text(_stamp() + results_csv(outcomes))
    (out / TRACE_FILE).write_text(_stamp() + trace_csv(outcomes))
    meta = {
        "seed": cfg.seed,
        "backend": _kernels.BACKEND,
        "runs": [dataclasses.asdict(r) for r in cfg.runs],
        "best_rounds": {o["name"]: o["best_round"] for o in outcomes},
        "seconds": {o["name"]: round(o["seconds"], 3) for o in outcomes},
    }
    (out / RUN_FILE).write_text(json.dumps(meta, indent=2) + "\n")


def read_results(out_dir) -> list[dict]:
    text = (Path(out_dir) / RESULTS_FILE).read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def format_table(rows) -> str:
    """Fixed-width table of Dice percentages."""
    if not rows:
        return "(no runs)"
    columns = [c for c in rows[0] if c != "run"]
    width = max(len("run"), *(len(r["run"]) for r in rows)) + 2
    head = "run".ljust(width) + "".join(c.rjust(max(len(c), 7) + 2) for c in columns)
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = "".join(f"{100 * float(r[c]):.1f}%".rjust(max(len(c), 7) + 2) for c in columns)
        lines.append(r["run"].ljust(width) + cells)
    return "\n".join(lines)
