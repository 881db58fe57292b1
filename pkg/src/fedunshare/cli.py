"""Command-line pipeline driver.

Commands: prepare | train | unlearn | retrain | eval | report-storage.
Global flags: --config PATH, --seed N, --out DIR, --threads N. One master
seed drives every stream; configs are plain key = value text with unknown
keys rejected; every artifact embeds the configuration hash and a lock
file serializes commands per run directory.

Exit codes: 0 success, 1 config error, 2 missing prerequisite, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from .datasets import (
    assign_sharing,
    filter_min_interactions,
    issue_unshare_requests,
    load_interactions,
    load_prepared,
    split_holdout,
    write_prepared,
)
from .evaluation import ModelView, evaluate, forgetting_score
from .fedlearn import (
    ServerState,
    SnapshotStore,
    TrainConfig,
    init_clients,
    run_learning,
)
from .graph import EmbeddingTable, build_bipartite
from .losses import LossConfig
from .reporting import (
    save_forgetting_figure,
    save_metric_bars,
    save_storage_figure,
    save_training_curves,
)
from .unlearn import (
    STORAGE_METHODS,
    UnlearnConfig,
    apply_unshare,
    apply_unshare_requests,
    render_storage_table,
    retrain_oracle,
    run_unlearning,
    storage_cost,
    write_unshare_requests,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_RUNTIME = 3

# configuration fields that only locate outputs or size thread pools; they
# never change results, so the config hash ignores them
_UNHASHED = {"out", "threads"}

# fields that determine the prepared data artifacts
_DATA_FIELDS = (
    "interactions", "delimiter", "min_interactions", "split_ratios",
    "group_ratios", "partial_ratio", "unshare_ratio", "seed",
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass
class RunConfig:
    """Every tunable of the pipeline in one flat key = value namespace."""

    # data preparation
    interactions: str = ""
    delimiter: str = "tab"
    min_interactions: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)
    group_ratios: tuple = (0.1, 0.2, 0.7)
    partial_ratio: float = 0.3
    unshare_ratio: float = 0.3
    # model + learning phase
    dim: int = 32
    rounds: int = 10
    clients_per_round: float = 1.0
    local_epochs: int = 1
    learning_rate: float = 0.01
    server_epochs: int = 1
    client_layers: int = 1
    server_layers: int = 3
    snapshots: int = 3
    cl_batch_size: int = 256
    local_data_mode: str = "remaining"
    server_bpr: bool = True
    # loss surface
    tau: float = 0.2
    lambda_reg: float = 0.0
    lambda_cl: float = 0.1
    negatives_per_positive: int = 1
    # unlearning phase
    unlearn_rounds: int = 2
    unlearn_clients_per_round: float = 1.0
    unlearn_learning_rate: float = 0.01
    unlearn_epochs: int = 1
    unlearn_cl_batch_size: int = 256
    snapshots_used: int = 0
    use_forgotten_graph: bool = True
    remaining_fl: bool = True
    # evaluation
    eval_ks: tuple = (10, 20)
    eval_every: int = 0
    # run plumbing
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"


_BOOL_WORDS = {
    "true": True, "yes": True, "on": True, "1": True,
    "false": False, "no": False, "off": False, "0": False,
}


def _parse_value(name: str, kind, text: str):
    text = text.strip()
    if kind is bool:
        if text.lower() not in _BOOL_WORDS:
            raise CliError(EXIT_CONFIG, f"config key {name}: not a boolean: {text!r}")
        return _BOOL_WORDS[text.lower()]
    if kind is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        try:
            if name == "eval_ks":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"config key {name}: bad list: {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise CliError(
            EXIT_CONFIG, f"config key {name}: expected {kind.__name__}: {text!r}"
        )


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse key = value lines; # starts a comment; unknown keys fail."""
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(
                EXIT_CONFIG, f"{source}:{lineno}: expected key = value, got {raw!r}"
            )
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, types[key], value)
    return RunConfig(**values)


def load_config_file(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig, include_plumbing: bool = False) -> str:
    """Canonical text form; parse_config_text round-trips it unchanged.

    Plumbing keys (output directory, thread count) never affect results and
    are left out by default so two runs of one experiment echo identical
    configuration files.
    """
    lines = [
        f"{f.name} = {_format_value(getattr(cfg, f.name))}"
        for f in fields(RunConfig)
        if include_plumbing or f.name not in _UNHASHED
    ]
    return "\n".join(lines) + "\n"


def _hash_fields(cfg: RunConfig, names) -> str:
    blob = "\n".join(
        f"{n}={_format_value(getattr(cfg, n))}" for n in sorted(names)
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    names = [f.name for f in fields(RunConfig) if f.name not in _UNHASHED]
    return _hash_fields(cfg, names)


def data_hash(cfg: RunConfig) -> str:
    return _hash_fields(cfg, _DATA_FIELDS)


def resolve_delimiter(name: str) -> str:
    return {"tab": "\t", "comma": ",", "space": " "}.get(name, name)


def build_train_config(cfg: RunConfig) -> TrainConfig:
    try:
        loss = LossConfig(
            tau=cfg.tau, lambda_reg=cfg.lambda_reg, lambda_cl=cfg.lambda_cl,
            negatives_per_positive=cfg.negatives_per_positive,
        )
        return TrainConfig(
            dim=cfg.dim, rounds=cfg.rounds,
            clients_per_round=cfg.clients_per_round,
            local_epochs=cfg.local_epochs, learning_rate=cfg.learning_rate,
            server_epochs=cfg.server_epochs, client_layers=cfg.client_layers,
            server_layers=cfg.server_layers, snapshots=cfg.snapshots,
            cl_batch_size=cfg.cl_batch_size,
            local_data_mode=cfg.local_data_mode, server_bpr=cfg.server_bpr,
            seed=cfg.seed, threads=cfg.threads, eval_every=cfg.eval_every,
            eval_ks=tuple(cfg.eval_ks), loss=loss,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid training configuration: {exc}")


def build_unlearn_config(cfg: RunConfig) -> UnlearnConfig:
    try:
        loss = LossConfig(
            tau=cfg.tau, lambda_reg=cfg.lambda_reg, lambda_cl=cfg.lambda_cl,
            negatives_per_positive=cfg.negatives_per_positive,
        )
        return UnlearnConfig(
            rounds=cfg.unlearn_rounds,
            clients_per_round=cfg.unlearn_clients_per_round,
            learning_rate=cfg.unlearn_learning_rate,
            epochs=cfg.unlearn_epochs,
            cl_batch_size=cfg.unlearn_cl_batch_size,
            snapshots_used=cfg.snapshots_used, seed=cfg.seed,
            use_forgotten_graph=cfg.use_forgotten_graph,
            remaining_fl=cfg.remaining_fl, loss=loss,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid unlearning configuration: {exc}")


class run_lock:
    """Exclusive per-run-directory lock held for one command."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                EXIT_RUNTIME,
                f"lock file {self.path} exists; another command may be "
                "running on this run directory (delete the file if stale)",
            )
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()) + "\n")
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


# -- checkpoints ------------------------------------------------------------------

def _graph_pairs(graph) -> np.ndarray:
    if graph is None:
        return np.zeros((0, 2), dtype=np.int64)
    return np.stack(
        [graph.user_ids[graph.edge_u], graph.item_ids[graph.edge_i]], axis=1
    )


def save_checkpoint(dir_path, state: ServerState, snapshots: SnapshotStore,
                    clients: dict, cfg_hash: str, phase: str, seed: int) -> None:
    os.makedirs(dir_path, exist_ok=True)
    arrays = {
        "item_ids": state.item_table.ids,
        "item_values": state.item_table.values,
        "user_ids": state.server_user_table.ids,
        "user_values": state.server_user_table.values,
        "graph_edges": _graph_pairs(state.shared_graph),
        "client_ids": np.array(sorted(clients), dtype=np.int64),
        "client_vecs": np.stack(
            [clients[u].user_embedding for u in sorted(clients)]
        ),
        "snap_rounds": np.array(snapshots.rounds(), dtype=np.int64),
        "snapshots": (
            np.stack(snapshots.tables())
            if len(snapshots)
            else np.zeros((0,) + state.item_table.values.shape)
        ),
    }
    for name, arr in arrays.items():
        np.save(os.path.join(dir_path, f"{name}.npy"), arr)
    meta = {
        "phase": phase,
        "config_hash": cfg_hash,
        "round": state.round,
        "seed": seed,
        "snapshot_capacity": snapshots.capacity,
        "format": 1,
    }
    with open(os.path.join(dir_path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(dir_path: str) -> dict:
    meta_path = os.path.join(dir_path, "meta.json")
    if not os.path.exists(meta_path):
        raise CliError(
            EXIT_MISSING,
            f"no checkpoint under {dir_path} (run the producing command first)",
        )
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    load = lambda name: np.load(os.path.join(dir_path, f"{name}.npy"))
    edges = load("graph_edges")
    graph = build_bipartite(edges) if len(edges) else None
    state = ServerState(
        item_table=EmbeddingTable(load("item_ids"), load("item_values")),
        server_user_table=EmbeddingTable(load("user_ids"), load("user_values")),
        shared_graph=graph,
        round=int(meta["round"]),
    )
    snapshots = SnapshotStore(int(meta["snapshot_capacity"]))
    snap_rounds = load("snap_rounds")
    snap_values = load("snapshots")
    for r, values in zip(snap_rounds, snap_values):
        snapshots.push(int(r), values)
    client_vecs = {
        int(u): vec
        for u, vec in zip(load("client_ids"), load("client_vecs"))
    }
    return {
        "state": state, "snapshots": snapshots,
        "client_vecs": client_vecs, "meta": meta,
    }


def require_hash(meta: dict, cfg_hash: str, what: str) -> None:
    if meta.get("config_hash") != cfg_hash:
        raise CliError(
            EXIT_MISSING,
            f"{what} was produced under config hash {meta.get('config_hash')}"
            f" but the current config hashes to {cfg_hash}; re-run the "
            "producing command or pass the original config",
        )


# -- shared command plumbing --------------------------------------------------------

class NdjsonSink:
    """Writes one sorted-key JSON record per line as they arrive."""

    def __init__(self, path: str):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _record_timing(out_dir: str, command: str, seconds: float) -> None:
    # wall-clock facts live apart from the deterministic artifacts
    path = os.path.join(out_dir, "timings.json")
    timings = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            timings = json.load(fh)
    timings[command] = seconds
    _write_json(path, timings)


def _load_prepared_or_fail(out_dir: str, cfg: RunConfig):
    prep_dir = os.path.join(out_dir, "prepared")
    try:
        splits, partition, manifest = load_prepared(prep_dir)
    except FileNotFoundError:
        raise CliError(
            EXIT_MISSING,
            f"no prepared data under {prep_dir}; run the prepare command first",
        )
    if manifest.get("data_hash") != data_hash(cfg):
        raise CliError(
            EXIT_MISSING,
            "prepared data was built from different data settings "
            f"(hash {manifest.get('data_hash')} vs {data_hash(cfg)}); "
            "re-run prepare with this config",
        )
    return splits, partition, manifest


def _figures_dir(out_dir: str) -> str:
    path = os.path.join(out_dir, "figures")
    os.makedirs(path, exist_ok=True)
    return path


_PHASE_DIRS = {
    "learning": "learning",
    "unlearning": "unlearned",
    "retrain": "retrain",
}


# -- commands -----------------------------------------------------------------------

def cmd_prepare(args, cfg: RunConfig) -> None:
    if not cfg.interactions:
        raise CliError(
            EXIT_CONFIG, "config key 'interactions' is required for prepare"
        )
    if not os.path.exists(cfg.interactions):
        raise CliError(
            EXIT_MISSING, f"input interactions file not found: {cfg.interactions}"
        )
    table = load_interactions(cfg.interactions, resolve_delimiter(cfg.delimiter))
    if cfg.min_interactions:
        table = filter_min_interactions(table, cfg.min_interactions)
    splits = split_holdout(table, tuple(cfg.split_ratios), cfg.seed)
    partition = assign_sharing(
        splits, tuple(cfg.group_ratios), cfg.partial_ratio, cfg.seed
    )
    partition = issue_unshare_requests(partition, cfg.unshare_ratio, cfg.seed)

    out_dir = cfg.out
    prep_dir = os.path.join(out_dir, "prepared")
    manifest = write_prepared(prep_dir, splits, partition, manifest_extra={
        "config_hash": config_hash(cfg),
        "data_hash": data_hash(cfg),
        "seed": cfg.seed,
    })
    requests_path = os.path.join(out_dir, "requests.ndjson")
    n_requests = write_unshare_requests(requests_path, partition, splits.train)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    print(
        f"prepared {manifest['users']} users, {manifest['items']} items, "
        f"{manifest['pairs']['train']} train pairs under {prep_dir}; "
        f"{n_requests} unshare requests"
    )


def cmd_train(args, cfg: RunConfig) -> None:
    splits, partition, _ = _load_prepared_or_fail(cfg.out, cfg)
    tcfg = build_train_config(cfg)
    sink = NdjsonSink(os.path.join(cfg.out, "metrics.ndjson"))
    try:
        result = run_learning(tcfg, partition, splits, metrics_sink=sink)
    finally:
        sink.close()
    ck = os.path.join(cfg.out, "checkpoints", "learning")
    save_checkpoint(ck, result.server, result.snapshots, result.clients,
                    config_hash(cfg), "learning", cfg.seed)
    _write_json(os.path.join(cfg.out, "history.json"), {
        "config_hash": config_hash(cfg), "rounds": result.history,
    })
    figure = save_training_curves(
        result.history, os.path.join(_figures_dir(cfg.out), "training_curves.png")
    )
    print(
        f"trained {tcfg.rounds} rounds; checkpoint at {ck}; "
        f"{len(result.snapshots)} snapshots; curves at {figure}"
    )


def cmd_unlearn(args, cfg: RunConfig) -> None:
    splits, partition, _ = _load_prepared_or_fail(cfg.out, cfg)
    if args.requests:
        if not os.path.exists(args.requests):
            raise CliError(
                EXIT_MISSING, f"requests file not found: {args.requests}"
            )
        partition = apply_unshare_requests(args.requests, partition, splits.train)
    if not partition.unlearn_edges():
        raise CliError(
            EXIT_MISSING,
            "no unshare requests in the prepared data (unshare_ratio = 0?); "
            "nothing to unlearn",
        )
    ck = load_checkpoint(os.path.join(cfg.out, "checkpoints", "learning"))
    require_hash(ck["meta"], config_hash(cfg), "learning checkpoint")
    if len(ck["snapshots"]) == 0:
        raise CliError(
            EXIT_MISSING,
            "the learning checkpoint stores no snapshots; re-run train "
            "with snapshots >= 1",
        )
    tcfg = build_train_config(cfg)
    ucfg = build_unlearn_config(cfg)

    clients = init_clients(partition, splits, tcfg)
    for u, vec in ck["client_vecs"].items():
        clients[u].user_embedding = vec
    before = ModelView(
        EmbeddingTable(ck["state"].item_table.ids,
                       ck["state"].item_table.values.copy()),
        {u: vec.copy() for u, vec in ck["client_vecs"].items()},
    )
    state = apply_unshare(ck["state"], partition)
    sink = NdjsonSink(os.path.join(cfg.out, "metrics_unlearn.ndjson"))
    try:
        result = run_unlearning(state, ck["snapshots"], partition, clients,
                                tcfg, ucfg, metrics_sink=sink)
    finally:
        sink.close()
    after = ModelView(
        result.server.item_table,
        {u: clients[u].user_embedding for u in clients},
    )
    report = forgetting_score(before, after, result.forgotten_views,
                              partition, splits)
    out_ck = os.path.join(cfg.out, "checkpoints", "unlearned")
    save_checkpoint(out_ck, result.server, ck["snapshots"], clients,
                    config_hash(cfg), "unlearning", cfg.seed)
    _write_json(os.path.join(cfg.out, "unlearn_history.json"), {
        "config_hash": config_hash(cfg), "rounds": result.history,
    })
    payload = dict(report.to_dict(), config_hash=config_hash(cfg))
    _write_json(os.path.join(cfg.out, "forgetting.json"), payload)
    figure = save_forgetting_figure(
        payload, os.path.join(_figures_dir(cfg.out), "forgetting.png")
    )
    print(
        f"unlearned {ucfg.rounds} rounds over "
        f"{report.withdrawn_items} withdrawn items; "
        f"cosine to forgotten views {report.mean_cos_before:.4f} -> "
        f"{report.mean_cos_after:.4f}; checkpoint at {out_ck}; "
        f"figure at {figure}"
    )


def cmd_retrain(args, cfg: RunConfig) -> None:
    splits, partition, _ = _load_prepared_or_fail(cfg.out, cfg)
    tcfg = build_train_config(cfg)
    sink = NdjsonSink(os.path.join(cfg.out, "metrics_retrain.ndjson"))
    try:
        result = retrain_oracle(tcfg, partition, splits, metrics_sink=sink)
    finally:
        sink.close()
    ck = os.path.join(cfg.out, "checkpoints", "retrain")
    save_checkpoint(ck, result.server, result.snapshots, result.clients,
                    config_hash(cfg), "retrain", cfg.seed)
    _write_json(os.path.join(cfg.out, "retrain_history.json"), {
        "config_hash": config_hash(cfg), "rounds": result.history,
    })
    print(f"retrained from scratch on remaining data; checkpoint at {ck}")


def eval_vectors(checkpoint: dict, server_users: bool) -> dict:
    """Per-user scoring vectors: local embeddings, optionally overridden by
    the server-side user table for the users it covers."""
    vectors = dict(checkpoint["client_vecs"])
    if server_users:
        table = checkpoint["state"].server_user_table
        for pos, uid in enumerate(table.ids):
            vectors[int(uid)] = table.values[pos]
    return vectors


def cmd_eval(args, cfg: RunConfig) -> None:
    splits, partition, _ = _load_prepared_or_fail(cfg.out, cfg)
    phase = args.phase
    ck = load_checkpoint(
        os.path.join(cfg.out, "checkpoints", _PHASE_DIRS[phase])
    )
    require_hash(ck["meta"], config_hash(cfg), f"{phase} checkpoint")
    report = evaluate(
        eval_vectors(ck, args.server_users), ck["state"].item_table, splits,
        ks=tuple(cfg.eval_ks), phase=phase, seed=cfg.seed,
        config_hash=config_hash(cfg),
    )
    base = os.path.join(cfg.out, f"eval_{phase}")
    report.write_json(base + ".json")
    report.write_csv(base + ".csv")
    figure = save_metric_bars(
        report.to_dict(),
        os.path.join(_figures_dir(cfg.out), f"metrics_{phase}.png"),
    )
    lines = [f"phase {phase}  users {report.user_count}  "
             f"config {config_hash(cfg)}"]
    lines.append(f"{'K':>4}  {'HR':>8}  {'NDCG':>8}")
    for k in report.ks:
        lines.append(
            f"{k:>4}  {report.mean_hr[k]:>8.4f}  {report.mean_ndcg[k]:>8.4f}"
        )
    print("\n".join(lines))
    print(f"wrote {base}.json, {base}.csv, {figure}")


def cmd_report_storage(args, cfg: RunConfig) -> None:
    items = args.items
    clients = args.clients
    prep_dir = os.path.join(cfg.out, "prepared")
    if items is None and os.path.exists(os.path.join(prep_dir, "manifest.json")):
        with open(os.path.join(prep_dir, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        items = int(manifest["items"])
        if clients is None:
            clients = max(
                1, math.ceil(cfg.clients_per_round * manifest["users"])
            )
    if items is None:
        raise CliError(
            EXIT_CONFIG,
            "pass --items (or prepare data first) so storage formulas have "
            "an item count",
        )
    if clients is None:
        clients = 1
    params = {
        "items": items, "dim": cfg.dim, "snapshots": cfg.snapshots,
        "rounds": cfg.rounds, "clients_per_round": clients,
        "retention": args.retention,
    }
    reports = [storage_cost(m, params) for m in STORAGE_METHODS]
    payload = {
        "config_hash": config_hash(cfg),
        "reports": [r.to_dict() for r in reports],
    }
    _write_json(os.path.join(cfg.out, "storage.json"), payload)
    text = render_storage_table(reports)
    with open(os.path.join(cfg.out, "storage.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    save_storage_figure(
        [r.to_dict() for r in reports],
        os.path.join(_figures_dir(cfg.out), "storage.png"),
    )
    print(text)


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "report-storage": cmd_report_storage,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="run directory override")
    common.add_argument("--threads", type=int, help="client thread pool size")
    common.add_argument("--rounds", type=int, help="learning rounds override")
    common.add_argument("--lr", type=float, help="learning rate override")
    common.add_argument("--no-cl", action="store_true",
                        help="drop the server contrastive term (sets its weight to 0)")
    common.add_argument("--no-server-bpr", action="store_true",
                        help="skip server-side ranking refinement")
    common.add_argument("--no-forgotten-graph", action="store_true",
                        help="use raw snapshot rows instead of propagated forgotten views")
    common.add_argument("--no-remaining-fl", action="store_true",
                        help="skip the per-round federated pass during unlearning")

    parser = argparse.ArgumentParser(
        prog="fedunshare",
        description="federated recommendation with shareable, unlearnable "
                    "user data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common],
                   help="split interactions and materialize the sharing partition")
    sub.add_parser("train", parents=[common],
                   help="run the federated learning phase")
    p_unlearn = sub.add_parser("unlearn", parents=[common],
                               help="withdraw shared data and unlearn its influence")
    p_unlearn.add_argument("--requests",
                           help="newline-delimited JSON unshare requests "
                                "(default: the prepared partition)")
    sub.add_parser("retrain", parents=[common],
                   help="train the from-scratch reference on remaining data")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="rank held-out items and report HR/NDCG")
    p_eval.add_argument("--phase", choices=sorted(_PHASE_DIRS),
                        default="learning")
    p_eval.add_argument("--server-users", action="store_true",
                        help="score sharing users with the server-side user "
                             "table instead of their local vectors")
    p_storage = sub.add_parser("report-storage", parents=[common],
                               help="analytic storage costs per unlearning strategy")
    p_storage.add_argument("--items", type=int,
                           help="item count (default: prepared data)")
    p_storage.add_argument("--clients", type=int,
                           help="participants per round for gradient history")
    p_storage.add_argument("--retention", type=float, default=1.0,
                           help="gradient retention rate rho")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.no_cl:
        cfg.lambda_cl = 0.0
    if args.no_server_bpr:
        cfg.server_bpr = False
    if args.no_forgotten_graph:
        cfg.use_forgotten_graph = False
    if args.no_remaining_fl:
        cfg.remaining_fl = False
    # fail fast on invalid numbers regardless of the command
    build_train_config(cfg)
    build_unlearn_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        with run_lock(cfg.out):
            started = time.perf_counter()
            _COMMANDS[args.command](args, cfg)
            _record_timing(cfg.out, args.command,
                           time.perf_counter() - started)
    except CliError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
