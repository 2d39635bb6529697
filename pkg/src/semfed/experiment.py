"""Experiment configuration, mode dispatch and result emission.

Modes:

``proposed``        shared graph adapter with cross-modal edges, confidence
                    masking and consensus pruning.
``single_modal_fl`` one adapter head per modality, no cross-modal edges,
                    no denoising; the conventional baseline.
``no_denoise``      ``proposed`` with q = 0 and pruning off.
``local_only``      ``proposed`` without aggregation; each client keeps its
                    own adapter.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .adapter import AdapterHyper, AdapterParams, adapter_forward, init_params
from .dataio import (
    ClientShard,
    DatasetManifest,
    PairedData,
    dirichlet_proportions,
    generate_synthetic,
    inject_label_error,
    load_features,
    save_features,
    split_by_proportions,
)
from .federation import (
    ClientProfile,
    ClientState,
    FederationConfig,
    GlobalState,
    RoundOutcome,
    load_checkpoint,
    run_rounds,
    save_checkpoint,
)
from .labeling import LabelLedger
from .metrics import METRIC_KEYS, rsum
from .skb import Skb, skb_load, skb_save
from .trainer import TrainConfig

log = logging.getLogger(__name__)

MODES = ("proposed", "single_modal_fl", "no_denoise", "local_only")
CSV_COLUMNS = ("round", "rsum") + METRIC_KEYS + ("mean_loss", "retained_fraction", "pruned_total", "sim_duration")

DEFAULTS: dict[str, Any] = {
    "mode": "proposed",
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "synthetic",
        "n_classes": 20,
        "n_per_class": 50,
        "d_s": 64,
        "d_img": 256,
        "d_txt": 128,
        "noise_sigma": 0.1,
        "eval_fraction": 0.2,
        "image_features": None,
        "text_features": None,
        "manifest": None,
        "skb": None,
    },
    "federation": {
        "n_clients": 10,
        "rounds": 50,
        "alpha": 0.5,
        "dropout": 0.1,
        "compute_speed": [0.5, 2.0],
        "label_stats_every": 1,
    },
    "adapter": {
        "d_h": 128,
        "k_intra": 8,
        "k_cross": 8,
        "sigma": 1.0,
        "layers": 1,
        "attn_scale": 1.5,
    },
    "train": {
        "margin": 0.2,
        "reg_weight": 1.0,
        "lr": 2e-3,
        "batch_size": 128,
        "local_epochs": 10,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "labeling": {"q": 0.1, "patience": 3, "tau_percentile": 25.0},
    "errors": {"mild_rate": 0.10, "severe_rate": 0.40, "n_mild": 0, "n_severe": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve_config(raw: dict | None = None, base_dir: Path | None = None) -> dict:
    """Merge ``raw`` over the defaults and validate; raises ConfigError."""
    cfg = _merge(DEFAULTS, raw or {})
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    ds = cfg["dataset"]
    if ds["kind"] == "files":
        for key in ("image_features", "text_features", "manifest"):
            if not ds[key]:
                raise ConfigError(f"dataset.{key} is required for kind=files")
            p = Path(ds[key])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.{key} file {p} does not exist")
            ds[key] = str(p)
        if ds["skb"]:
            p = Path(ds["skb"])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.skb file {p} does not exist")
            ds["skb"] = str(p)
    elif ds["kind"] != "synthetic":
        raise ConfigError("dataset.kind must be 'synthetic' or 'files'")
    fed = cfg["federation"]
    if fed["n_clients"] < 1 or fed["rounds"] < 0:
        raise ConfigError("federation.n_clients >= 1 and rounds >= 0 required")
    if not fed["alpha"] > 0:
        raise ConfigError("federation.alpha must be positive")
    if not 0.0 <= fed["dropout"] < 1.0:
        raise ConfigError("federation.dropout must be in [0, 1)")
    lo, hi = fed["compute_speed"]
    if not 0 < lo <= hi:
        raise ConfigError("federation.compute_speed must be [lo, hi] with 0 < lo <= hi")
    err = cfg["errors"]
    if err["n_mild"] + err["n_severe"] > fed["n_clients"]:
        raise ConfigError("more error-group clients than clients")
    for key in ("mild_rate", "severe_rate"):
        if not 0.0 <= err[key] <= 1.0:
            raise ConfigError(f"errors.{key} must be in [0, 1]")
    if not 0.0 <= cfg["labeling"]["q"] < 1.0:
        raise ConfigError("labeling.q must be in [0, 1)")
    try:
        train_config(cfg)
        adapter_hyper(cfg, 2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (the output directory does not)."""
    relevant = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    q = 0.0 if cfg["mode"] in ("no_denoise", "single_modal_fl") else cfg["labeling"]["q"]
    return TrainConfig(
        margin=t["margin"], reg_weight=t["reg_weight"], lr=t["lr"], batch_size=t["batch_size"],
        local_epochs=t["local_epochs"], attn_scale=cfg["adapter"]["attn_scale"], q=q,
        beta1=t["beta1"], beta2=t["beta2"], adam_eps=t["adam_eps"], seed=cfg["seed"],
    )


def adapter_hyper(cfg: dict, d_s: int) -> AdapterHyper:
    a = cfg["adapter"]
    baseline = cfg["mode"] == "single_modal_fl"
    return AdapterHyper(
        d_h=a["d_h"], d_s=d_s, attn_scale=a["attn_scale"], k_intra=a["k_intra"], k_cross=a["k_cross"],
        sigma=a["sigma"], layers=a["layers"], per_modality_heads=baseline, cross_edges=not baseline,
    )


def federation_config(cfg: dict) -> FederationConfig:
    denoise = cfg["mode"] not in ("no_denoise", "single_modal_fl")
    return FederationConfig(
        rounds=cfg["federation"]["rounds"],
        seed=cfg["seed"],
        aggregate=cfg["mode"] != "local_only",
        prune=denoise,
        patience=cfg["labeling"]["patience"],
        tau_percentile=cfg["labeling"]["tau_percentile"],
        label_stats_every=cfg["federation"]["label_stats_every"],
    )


# ---------------------------------------------------------------------------
# setup


@dataclass
class Setup:
    data: PairedData
    manifest: DatasetManifest
    skb: Skb
    state: GlobalState
    eval_ids: list[int]
    group_eval: dict[str, list[int]]
    group_clients: dict[str, list[int]]
    corrupted: dict[int, set[int]]  # client -> image ids whose pairing was corrupted


def load_dataset(cfg: dict) -> tuple[PairedData, DatasetManifest, Skb]:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return generate_synthetic(
            n_classes=ds["n_classes"], n_per_class=ds["n_per_class"], d_s=ds["d_s"], d_img=ds["d_img"],
            d_txt=ds["d_txt"], noise_sigma=ds["noise_sigma"], seed=cfg["seed"], eval_fraction=ds["eval_fraction"],
        )
    image = load_features(ds["image_features"])
    text = load_features(ds["text_features"])
    manifest = DatasetManifest.from_json(Path(ds["manifest"]).read_text(encoding="utf-8"))
    if ds["skb"]:
        skb = skb_load(ds["skb"])
    elif manifest.skb_prototypes_file:
        skb = skb_load(Path(ds["manifest"]).parent / manifest.skb_prototypes_file)
    else:
        raise ConfigError("no SKB given: set dataset.skb or skb_prototypes_file in the manifest")
    return PairedData(image, text), manifest, skb


def _error_levels(cfg: dict) -> list[str]:
    err = cfg["errors"]
    n = cfg["federation"]["n_clients"]
    levels = ["mild"] * err["n_mild"] + ["severe"] * err["n_severe"]
    return levels + ["none"] * (n - len(levels))


def build_setup(cfg: dict) -> Setup:
    data, manifest, skb = load_dataset(cfg)
    seed = cfg["seed"]
    fed = cfg["federation"]
    n_clients = fed["n_clients"]
    props = dirichlet_proportions(manifest, n_clients, fed["alpha"], seed)
    train_shards = split_by_proportions(manifest, props, "train", seed)
    eval_shards = split_by_proportions(manifest, props, "eval", seed)
    partner = manifest.partner()
    levels = _error_levels(cfg)
    rates = {"none": 0.0, "mild": cfg["errors"]["mild_rate"], "severe": cfg["errors"]["severe_rate"]}
    lo, hi = fed["compute_speed"]
    speeds = np.random.default_rng([seed, 0xC5]).uniform(lo, hi, size=n_clients)

    hyper = adapter_hyper(cfg, skb.d_s)
    sigs = (data.image.signature, data.text.signature)
    params = init_params(sigs, hyper, seed)
    clients, corrupted = {}, {}
    for cid in range(n_clients):
        image_ids = np.array(train_shards[cid], dtype=np.int64)
        clean = np.array([partner[int(i)] for i in image_ids], dtype=np.int64)
        texts = inject_label_error(clean, rates[levels[cid]], seed * 1000 + cid)
        corrupted[cid] = {int(i) for i, t, c in zip(image_ids, texts, clean) if t != c}
        profile = ClientProfile(cid, sigs, float(speeds[cid]), fed["dropout"], levels[cid])
        shard = ClientShard(cid, image_ids, texts, data)
        clients[cid] = ClientState(profile, shard, LabelLedger.for_samples(image_ids.tolist()))
    state = GlobalState(0, params, clients, skb)

    groups: dict[str, list[int]] = {}
    for cid, lvl in enumerate(levels):
        groups.setdefault(lvl, []).append(cid)
    group_eval = {g: sorted(i for c in cs for i in eval_shards[c]) for g, cs in groups.items()}
    return Setup(data, manifest, skb, state, sorted(manifest.splits["eval"]), group_eval, groups, corrupted)


def evaluate(params: AdapterParams, data: PairedData, manifest: DatasetManifest, image_ids) -> tuple[float, dict]:
    """RSUM of ``params`` over the clean eval pairs of ``image_ids`` in one graph."""
    partner = manifest.partner()
    ids = [int(i) for i in image_ids]
    img, txt = data.slices(ids, [partner[i] for i in ids])
    out = adapter_forward((img, txt), params)
    return rsum(out.tokens[out.slices[0]], out.tokens[out.slices[1]])


# ---------------------------------------------------------------------------
# run


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_configured(cfg: dict, out_dir: Path | None = None) -> dict:
    """Run a resolved config; writes metrics.csv, summary.json, config-echo.json, pruned.csv."""
    out_dir = Path(out_dir or cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "config-echo.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    setup = build_setup(cfg)
    train = train_config(cfg)
    fed = federation_config(cfg)
    records: list[dict] = []
    group_curves: dict[str, list[float]] = {g: [] for g in setup.group_eval}
    partial = out_dir / "metrics.csv.partial"
    fh = open(partial, "w", encoding="utf-8", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)

    def models(state: GlobalState) -> list[AdapterParams]:
        if fed.aggregate:
            return [state.params]
        return [c.params or state.params for _, c in sorted(state.clients.items())]

    def mean_eval(state: GlobalState, ids) -> tuple[float, dict]:
        results = [evaluate(p, setup.data, setup.manifest, ids) for p in models(state)]
        keys = results[0][1].keys()
        parts = {k: float(np.mean([r[1][k] for r in results])) for k in keys}
        return float(sum(parts.values())), parts

    def on_round(state: GlobalState, outcome: RoundOutcome | None) -> None:
        total, parts = mean_eval(state, setup.eval_ids)
        rec = {"round": state.round_index, "rsum": total, **parts}
        if outcome is None:
            rec.update(mean_loss=float("nan"), retained_fraction=float("nan"), pruned_total=0, sim_duration=0.0)
        else:
            rec.update(
                mean_loss=outcome.mean_loss, retained_fraction=outcome.retained_fraction,
                pruned_total=outcome.pruned_total, sim_duration=outcome.sim_duration,
            )
        for g, ids in setup.group_eval.items():
            group_curves[g].append(mean_eval(state, ids)[0] if ids else float("nan"))
        records.append(rec)
        writer.writerow([_fmt(rec[c]) for c in CSV_COLUMNS])
        fh.flush()
        log.info("round %d rsum %.2f", rec["round"], rec["rsum"])

    try:
        final_state = run_rounds(setup.state, train, fed, fed.rounds, on_round)
    finally:
        fh.close()
    os.replace(partial, out_dir / "metrics.csv")
    ck_tmp = out_dir / "checkpoint.semc.tmp"
    save_checkpoint(final_state.params, final_state.round_index, ck_tmp)
    os.replace(ck_tmp, out_dir / "checkpoint.semc")

    pruned_rows = [
        (rnd, cid, sid, int(sid in setup.corrupted[cid])) for rnd, cid, sid in final_state.pruned_log
    ]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "client_id", "sample_id", "corrupted"])
    w.writerows(pruned_rows)
    _atomic_write(out_dir / "pruned.csv", buf.getvalue())

    best = max(records, key=lambda r: (r["rsum"], -r["round"]))
    summary = {
        "mode": cfg["mode"],
        "config_hash": config_hash(cfg),
        "final": {k: records[-1][k] for k in CSV_COLUMNS},
        "best": {k: best[k] for k in CSV_COLUMNS},
        "groups": {
            g: {
                "clients": setup.group_clients[g],
                "label_error_rate": {"none": 0.0, "mild": cfg["errors"]["mild_rate"],
                                     "severe": cfg["errors"]["severe_rate"]}[g],
                "eval_pairs": len(setup.group_eval[g]),
                "final_rsum": curve[-1],
                "best_rsum": max(curve),
                "rsum_by_round": curve,
                "corrupted_pairs": sum(len(setup.corrupted[c]) for c in setup.group_clients[g]),
                "pruned": sum(1 for _, c, _ in final_state.pruned_log if c in setup.group_clients[g]),
            }
            for g, curve in sorted(group_curves.items())
        },
    }
    _atomic_write(out_dir / "summary.json", json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    return {"records": records, "summary": summary, "state": final_state, "setup": setup}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def run_experiment(config_path, out_dir=None, seed=None, rounds=None) -> int:
    """CLI entry: 0 ok, 1 validation error, 2 runtime failure."""
    try:
        path = Path(config_path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        if seed is not None:
            raw["seed"] = seed
        if rounds is not None:
            raw.setdefault("federation", {})["rounds"] = rounds
        if out_dir is not None:
            raw["output_dir"] = str(out_dir)
        cfg = resolve_config(raw, path.parent)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        log.error("invalid config: %s", exc)
        return 1
    try:
        run_configured(cfg)
    except Exception:
        log.exception("run failed")
        return 2
    return 0


def write_dataset(cfg: dict, out_dir) -> dict[str, Path]:
    """Write the configured synthetic dataset as feature files, SKB and manifest."""
    if cfg["dataset"]["kind"] != "synthetic":
        raise ConfigError("gen-data needs dataset.kind = synthetic")
    data, manifest, skb = load_dataset(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "image_features": out / "image.semf",
        "text_features": out / "text.semf",
        "skb": out / "skb.bin",
        "manifest": out / "manifest.json",
    }
    save_features(data.image, paths["image_features"])
    save_features(data.text, paths["text_features"])
    skb_save(skb, paths["skb"])
    manifest = DatasetManifest(manifest.pairings, manifest.class_labels, manifest.splits, "skb.bin")
    _atomic_write(paths["manifest"], manifest.to_json() + "\n")
    return paths


def evaluate_checkpoint(cfg: dict, checkpoint) -> tuple[float, dict]:
    """RSUM of a saved adapter on the configured dataset's eval split."""
    data, manifest, _ = load_dataset(cfg)
    params, _ = load_checkpoint(checkpoint)
    return evaluate(params, data, manifest, sorted(manifest.splits["eval"]))


def compare_runs(run_dirs, output_path) -> int:
    """Merge runs' metrics.csv into one long CSV: run, round, metric, value."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        f = d / "metrics.csv"
        if not f.exists():
            raise FileNotFoundError(f"run {d} has no metrics.csv")
        with open(f, encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                for metric in CSV_COLUMNS[1:]:
                    rows.append((d.name, int(rec["round"]), metric, rec[metric]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "round", "metric", "value"])
    w.writerows(rows)
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, buf.getvalue())
    return len(rows)
