"""Job runners behind the service and the CLI.

Each job reads the artifacts it needs from the run directory (rebuilding the
cheap upstream ones from the config when they are absent), writes its own
outputs and records their hashes in ``manifest.json``. All outputs are pure
functions of the config and its master seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import privacy
from .config import RunConfig, header_line
from .fednet import decentralized_arnoldi, knowledge_audit
from .fednet.transcript import Fabric, comm_report, comm_report_csv, fit_linear_coefficient
from .graph import (
    Graph,
    GraphError,
    LabelSplit,
    bernoulli_graph,
    build_graph,
    cut_fraction,
    edge_homophily,
    partition,
    sbm_generate,
    split_labels,
    views_from_owner,
)
from .graphio import load_graph_files, write_id_map
from .learner import DivergenceError, TrainConfig, fedsgd_train, save_checkpoint
from .learner.train import METRIC_FIELDS
from .npzio import npz_bytes
from .spectral import SpectralError, arnoldi_graph, hessenberg_eig, load_basis, save_basis, spectral_basis

OUTPUT_ENV = "FEDLAP_OUTPUT_DIR"
MANIFEST = "manifest.json"
KS_LIMIT = 0.02
MIN_POSITIVE_PAIRS = 1000


class JobError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(JobError):
    exit_code = 2
    kind = "config"


class DivergenceAbort(JobError):
    exit_code = 3
    kind = "divergence"


class MissingArtifact(JobError):
    exit_code = 4
    kind = "missing-artifact"


class VerificationFailed(JobError):
    exit_code = 1
    kind = "verification"


def _key(cfg: RunConfig, *sections: str) -> str:
    data = cfg.model_dump(mode="json", include=set(sections))
    data["master_seed"] = cfg.master_seed
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """A config bound to its output directory."""

    def __init__(self, cfg: RunConfig, output_dir: Optional[str] = None) -> None:
        self.cfg = cfg
        self.root = Path(output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []
        self.warnings: list[str] = []

    @property
    def stamp(self) -> dict:
        return self.cfg.stamp()

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def note(self, rel: str) -> None:
        if rel not in self.written:
            self.written.append(rel)

    def write_text(self, rel: str, text: str) -> None:
        self.path(rel).write_text(text, encoding="utf-8")
        self.note(rel)

    def write_json(self, rel: str, obj: dict) -> None:
        self.write_text(rel, _dump({**obj, **self.stamp}))

    def header(self) -> str:
        return header_line(self.cfg)

    def commit(self) -> None:
        mpath = self.root / MANIFEST
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"files": {}}
        for rel in self.written:
            manifest["files"][rel] = {"sha256": _sha256(self.root / rel), "config_hash": self.cfg.config_hash(),
                                      "master_seed": self.cfg.master_seed}
        manifest.update(self.stamp)
        mpath.write_text(_dump(manifest))

    def result(self, job: str, summary: dict) -> dict:
        self.commit()
        return {"job": job, "status": "ok", "exit_code": 0, "output_dir": str(self.root),
                "outputs": list(self.written), "warnings": list(self.warnings), "summary": summary, **self.stamp}


# --------------------------------------------------------------------------
# ingest


def _generate(cfg: RunConfig) -> tuple[Graph, Optional[dict]]:
    ds = cfg.dataset
    seed = cfg.module_seed("dataset")
    try:
        if ds.source == "sbm":
            return sbm_generate(ds.block_sizes, ds.p_in, ds.p_out, seed=seed, feature_dim=ds.feature_dim,
                                feature_signal=ds.feature_signal), None
        if ds.source == "bernoulli":
            return bernoulli_graph(ds.n, ds.p, seed=seed, feature_dim=ds.feature_dim), None
        for f in (ds.edges, ds.features, ds.labels, ds.id_map):
            if f is not None and not Path(f).exists():
                raise MissingArtifact(f"input file not found: {f}")
        g, mapping, _ = load_graph_files(ds.edges, ds.features, ds.labels, ds.id_map)
        return g, mapping
    except GraphError as exc:
        raise ConfigError(str(exc)) from None


def ingest(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    g = _ingest(run)
    return run.result("ingest", {"n": g.n, "m": g.m, "num_classes": g.num_classes,
                                 "self_loops_dropped": g.self_loops_dropped})


def _ingest(run: Run) -> Graph:
    cfg = run.cfg
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g, mapping = _generate(cfg)
    run.warnings += [str(w.message) for w in caught]
    if g.n < cfg.partition.K:
        raise ConfigError(f"K={cfg.partition.K} exceeds node count n={g.n}")
    labels = g.labels if g.labels is not None else np.full(g.n, -1, dtype=np.int64)
    blob = npz_bytes(edges=g.edges, features=g.features, labels=labels, n=np.int64(g.n),
             self_loops_dropped=np.int64(g.self_loops_dropped), config_hash=np.array(cfg.config_hash()),
             master_seed=np.int64(cfg.master_seed), dataset_key=np.array(_key(cfg, "dataset")))
    run.path("graph.npz").write_bytes(blob)
    run.note("graph.npz")
    run.write_json("graph.json", {
        "n": g.n, "m": g.m, "num_classes": g.num_classes, "fingerprint": g.fingerprint(),
        "edge_homophily": edge_homophily(g) if g.labels is not None else None,
        "self_loops_dropped": g.self_loops_dropped, "dataset_key": _key(cfg, "dataset"),
    })
    if mapping is not None:
        write_id_map(mapping, run.path("id_map.csv"), header=run.header())
        run.note("id_map.csv")
    return g


def load_graph(run: Run) -> Graph:
    p = run.root / "graph.npz"
    if p.exists():
        with np.load(p) as z:
            if str(z["dataset_key"]) == _key(run.cfg, "dataset"):
                labels = z["labels"]
                return build_graph(z["edges"], z["features"], labels if np.any(labels >= 0) else None,
                                   n=int(z["n"]))
    return _ingest(run)


# --------------------------------------------------------------------------
# partition


def partition_job(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    g = load_graph(run)
    views = _partition(run, g)
    return run.result("partition", {"K": len(views), "sizes": [v.n_i for v in views],
                                    "cut_fraction": cut_fraction(g, views)})


def _partition(run: Run, g: Graph):
    cfg = run.cfg
    try:
        base = partition(g, cfg.partition.scheme, cfg.partition.K, seed=cfg.module_seed("partition"))
    except GraphError as exc:
        raise ConfigError(str(exc)) from None
    owner = base[0].layout.owner
    ds = cfg.dataset
    splits = split_labels(g, ds.train_frac, ds.val_frac, seed=cfg.module_seed("split"), scheme=ds.label_split,
                          owner=owner)
    views = views_from_owner(g, owner, splits)
    buf = io.StringIO()
    buf.write(run.header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_id", "client", "split"])
    for v in range(g.n):
        tag = ("train" if splits.train[v] else "val" if splits.val[v] else "test" if splits.test[v]
               else "unlabeled")
        w.writerow([v, int(owner[v]), tag])
    run.write_text("partition.csv", buf.getvalue())
    run.write_json("partition.json", {
        "K": len(views), "scheme": cfg.partition.scheme, "sizes": [v.n_i for v in views],
        "partition_id": views[0].layout.partition_id, "cut_fraction": cut_fraction(g, views),
        "train": int(splits.train.sum()), "val": int(splits.val.sum()), "test": int(splits.test.sum()),
        "partition_key": _key(cfg, "dataset", "partition"),
    })
    return views


def load_views(run: Run):
    g = load_graph(run)
    meta_p, csv_p = run.root / "partition.json", run.root / "partition.csv"
    if meta_p.exists() and csv_p.exists():
        meta = json.loads(meta_p.read_text())
        if meta.get("partition_key") == _key(run.cfg, "dataset", "partition"):
            with open(csv_p, encoding="utf-8", newline="") as fh:
                rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")][1:]
            if len(rows) == g.n:
                owner = np.array([int(r[1]) for r in rows], dtype=np.int64)
                tags = np.array([r[2] for r in rows])
                splits = LabelSplit(train=tags == "train", val=tags == "val", test=tags == "test")
                return g, views_from_owner(g, owner, splits)
    return g, _partition(run, g)


# --------------------------------------------------------------------------
# offline


def _transcript_jsonl(run: Run, transcript, phase: str) -> str:
    meta = json.dumps({"meta": {"phase": phase, **run.stamp}}, sort_keys=True) + "\n"
    return meta + transcript.to_jsonl()


def offline(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    if cfg.r is None:
        raise ConfigError("the offline phase needs r")
    g, views = load_views(run)
    if cfg.r > g.n:
        raise ConfigError(f"r={cfg.r} exceeds node count n={g.n}")
    seed = cfg.module_seed("offline")
    try:
        res = decentralized_arnoldi(views, cfg.r, seed=seed, backend=cfg.backend)
    except SpectralError as exc:
        raise ConfigError(str(exc)) from None
    V, sigma = hessenberg_eig(res.H)
    r_eff = min(cfg.r, res.m)
    if r_eff < cfg.r:
        run.warnings.append(f"Krylov space exhausted after {res.m} steps; keeping {r_eff} vectors")
    key = _key(cfg, "dataset", "partition", "r", "backend")
    extra = {**run.stamp, "offline_key": key}
    for v in views:
        b = spectral_basis(res.client_factorization(v.client_id), r_eff, node_ids=v.internal_nodes,
                           client_id=v.client_id, eig=(V, sigma))
        rel = f"basis/client_{v.client_id}.bin"
        save_basis(b, run.path(rel), extra=extra)
        run.note(rel)
        run.note(rel + ".json")
    if cfg.centralized:
        f = arnoldi_graph(g, cfg.r, seed=seed)
        b = spectral_basis(f, min(r_eff, f.m), node_ids=np.arange(g.n), client_id=None)
        save_basis(b, run.path("basis/centralized.bin"), extra=extra)
        run.note("basis/centralized.bin")
        run.note("basis/centralized.bin.json")
    tr = res.transcript
    run.write_text("transcript_offline.jsonl", _transcript_jsonl(run, tr, "offline"))
    report = comm_report(tr, "offline")
    run.write_text("comm_offline.csv", comm_report_csv(report, header=run.header()))
    violations = knowledge_audit(tr, views, res.Q_blocks)
    summary = {
        "K": len(views), "n": g.n, "r": r_eff, "arnoldi_steps": res.m, "residual_norm": res.residual_norm,
        "ritz_values": [float(s) for s in sigma[:r_eff]], "offline_scalars": tr.scalars("offline"),
        "transcript_sha256": tr.digest(), "audit_violations": violations, "offline_key": key,
    }
    run.write_json("offline.json", {**summary, "H": res.H.tolist()})
    return run.result("offline", summary)


# --------------------------------------------------------------------------
# train


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    try:
        return TrainConfig(mode=cfg.mode, learning_rate=t.learning_rate, weight_decay=t.weight_decay,
                           epochs=t.epochs, lambda_reg=t.lambda_reg, d_s=t.d_s, r=cfg.r or 0,
                           seed=cfg.module_seed("train"), hidden=tuple(t.hidden),
                           struct_hidden=tuple(t.struct_hidden), feature_form=t.feature_form,
                           monotone_guard=t.monotone_guard, u_scale=t.u_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_client_bases(run: Run, K: int) -> list:
    key = _key(run.cfg, "dataset", "partition", "r", "backend")
    out = []
    for k in range(K):
        p = run.root / f"basis/client_{k}.bin"
        side = run.root / f"basis/client_{k}.bin.json"
        if not p.exists() or not side.exists():
            raise MissingArtifact(f"offline artifact missing: {p}; run the offline job first")
        if json.loads(side.read_text()).get("offline_key") != key:
            raise MissingArtifact(f"{p} was produced for a different graph, partition or rank; rerun offline")
        try:
            out.append(load_basis(p))
        except SpectralError as exc:
            raise MissingArtifact(str(exc)) from None
    return out


def train(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    tc = _train_config(cfg)
    g, views = load_views(run)
    if g.labels is None:
        raise ConfigError("training needs node labels")
    bases = load_client_bases(run, len(views)) if cfg.mode == "fedlap-plus" else None
    fabric = Fabric(cfg.backend, session_seed=cfg.module_seed("online"))
    try:
        res = fedsgd_train(views, bases, tc, fabric=fabric, n_classes=g.num_classes)
    except DivergenceError as exc:
        raise DivergenceAbort(str(exc)) from None
    buf = io.StringIO()
    buf.write(run.header())
    w = csv.DictWriter(buf, fieldnames=list(METRIC_FIELDS), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in res.metrics:
        w.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items() if k in METRIC_FIELDS})
    run.write_text("metrics.csv", buf.getvalue())
    save_checkpoint(res.state, run.path("checkpoint.npz"), seed=tc.seed, config_hash=cfg.config_hash())
    side = run.path("checkpoint.json")
    side.write_text(_dump({**json.loads(side.read_text()), **run.stamp}))
    run.note("checkpoint.npz")
    run.note("checkpoint.json")
    tr = res.fabric.transcript
    run.write_text("transcript_online.jsonl", _transcript_jsonl(run, tr, "online"))
    run.write_text("comm_online.csv", comm_report_csv(comm_report(tr, "online"), header=run.header()))
    node_msgs = sum(1 for m in tr.messages if m.phase == "online" and m.kind.startswith("nsf"))
    last = res.metrics[-1]
    summary = {"epochs": len(res.metrics), "final": {k: last[k] for k in METRIC_FIELDS},
               "online_scalars": tr.scalars("online"), "per_node_messages": node_msgs, "mode": cfg.mode}
    run.write_json("train.json", summary)
    return run.result("train", summary)


# --------------------------------------------------------------------------
# attack


def _ks_attack(res: privacy.AttackResult, alpha: float) -> float:
    z1 = (res.llr_pos - alpha / 2) / np.sqrt(alpha)
    z0 = (res.llr_neg + alpha / 2) / np.sqrt(alpha)
    return float(max(stats.kstest(z1, "norm").statistic, stats.kstest(z0, "norm").statistic))


def attack(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    at = cfg.attack
    pairs = [(float(p), int(n)) for p, n in at.pairs]
    sweep = privacy.r_sweep(pairs, at.r_grid, mode="theory")
    rows = []
    per_pair = []
    for p, n in pairs:
        thr = privacy.threshold_rank(p, n, at.r_grid, at.level)
        below = [row for row in sweep if row["p"] == p and row["n"] == n and row["max_pr"] <= at.level]
        per_pair.append({"p": p, "n": n, "threshold_r": thr,
                         "largest_private_r": max((row["r"] for row in below), default=None)})
        # curves on both sides of the threshold
        for r in sorted({x for x in (per_pair[-1]["largest_private_r"], thr) if x is not None}):
            s = privacy.AttackSetting(n=n, p=p, r=r)
            rows += privacy.curve_rows(s, privacy.theory_curves(s), "theory")
    settings = []
    if not at.theory_only:
        seed = cfg.module_seed("attack")
        s = privacy.AttackSetting(n=at.empirical_n, p=at.empirical_p, r=at.empirical_r)
        trials = at.trials
        res = privacy.run_attack(s, trials=trials, seed=seed, attacker=at.attacker, backend=cfg.backend)
        if res.llr_pos.size < MIN_POSITIVE_PAIRS:
            trials = trials * max(2, int(np.ceil(MIN_POSITIVE_PAIRS / max(res.llr_pos.size, 1))))
            run.warnings.append(f"only {res.llr_pos.size} positive pairs sampled; rerunning with {trials} trials")
            res = privacy.run_attack(s, trials=trials, seed=seed, attacker=at.attacker, backend=cfg.backend)
        rows += privacy.curve_rows(s, res.empirical, f"empirical-{at.attacker}")
        ks = _ks_attack(res, privacy.alpha_approx(s.r, s.n, s.p))
        settings.append({"kind": "attack", "p": s.p, "n": s.n, "r": s.r, "attacker": at.attacker,
                         "trials": trials, "positive_pairs": int(res.llr_pos.size), "graphs": res.graphs,
                         "dominance_gap": res.dominance_gap(), "ks": ks, "ks_ok": ks <= KS_LIMIT})
        rep = privacy.validate_llr_law(at.ks_n, at.ks_p, at.ks_r, samples=at.ks_samples, seed=seed)
        settings.append({"kind": "llr-law", "p": at.ks_p, "n": at.ks_n, "r": at.ks_r,
                         "samples": rep.samples_h1 + rep.samples_h0, "mean_ratio_h1": rep.mean_ratio_h1,
                         "mean_ratio_h0": rep.mean_ratio_h0, "var_ratio_h1": rep.var_ratio_h1,
                         "var_ratio_h0": rep.var_ratio_h0, "ks": rep.ks, "ks_ok": rep.ks <= KS_LIMIT})
    run.write_text("curves.csv", privacy.curves_csv(rows, header=run.header()))
    buf = io.StringIO()
    buf.write(run.header())
    w = csv.DictWriter(buf, fieldnames=["p", "n", "r", "max_pr"], lineterminator="\n")
    w.writeheader()
    w.writerows(sweep)
    run.write_text("r_sweep.csv", buf.getvalue())
    summary = {"level": at.level, "pairs": per_pair, "theory_only": at.theory_only, "settings": settings}
    run.write_json("attack_summary.json", summary)
    return run.result("attack", summary)


# --------------------------------------------------------------------------
# report


def comm_scaling_study(seed: int, backend: str = "mock", base=(4, 2, 200), p: float = 0.02) -> dict:
    """Offline scalar counts at a base ``(r, K, n)`` and with each factor doubled."""
    r0, K0, n0 = base
    points = [(r0, K0, n0), (2 * r0, K0, n0), (r0, 2 * K0, n0), (r0, K0, 2 * n0)]
    rows = []
    for r, K, n in points:
        g = bernoulli_graph(n, p, seed=seed)
        views = partition(g, "random", K, seed=seed)
        res = decentralized_arnoldi(views, r, seed=seed, backend=backend)
        rows.append((r, K, n, res.transcript.scalars("offline")))
    base_count = rows[0][3]
    fit = fit_linear_coefficient(rows)
    fit["points"] = [{"r": r, "K": K, "n": n, "scalars": c} for r, K, n, c in rows]
    fit["doubling_ratios"] = {"r": rows[1][3] / base_count, "K": rows[2][3] / base_count,
                              "n": rows[3][3] / base_count}
    return fit


def report(cfg: RunConfig, output_dir: Optional[str] = None) -> dict:
    run = Run(cfg, output_dir)
    out = {}
    for name in ("graph", "partition", "offline", "train", "attack_summary"):
        p = run.root / f"{name}.json"
        if p.exists():
            d = json.loads(p.read_text())
            d.pop("H", None)
            out[name] = d
    if cfg.scaling_study:
        fit = comm_scaling_study(cfg.module_seed("report"), cfg.backend)
        off = out.get("offline")
        if off:
            pred = fit["coefficient"] * off["r"] * off["K"] * off["n"]
            fit["run_prediction"] = {"predicted": pred, "observed": off["offline_scalars"],
                                     "relative_error": abs(off["offline_scalars"] - pred) / pred}
        out["comm_scaling"] = fit
    run.write_json("report.json", out)
    return run.result("report", {"sections": sorted(out)})


# --------------------------------------------------------------------------
# verify


def _embedded(root: Path, rel: str, entry: dict) -> bool:
    p = root / rel
    needle = entry["config_hash"]
    if p.suffix in (".csv", ".json", ".jsonl"):
        return needle in p.read_text(encoding="utf-8")
    if p.suffix == ".npz":
        with np.load(p) as z:
            if "config_hash" in z.files:
                return str(z["config_hash"]) == needle
        side = p.with_suffix(".json")
        return side.exists() and needle in side.read_text()
    side = p.with_name(p.name + ".json")
    return side.exists() and needle in side.read_text()


def verify(cfg: Optional[RunConfig] = None, output_dir: Optional[str] = None) -> dict:
    root = Path(output_dir or os.environ.get(OUTPUT_ENV) or (cfg.output_dir if cfg else "."))
    mpath = root / MANIFEST
    if not mpath.exists():
        raise MissingArtifact(f"no manifest in {root}")
    manifest = json.loads(mpath.read_text())
    problems = []
    for rel, entry in sorted(manifest["files"].items()):
        p = root / rel
        if not p.exists():
            problems.append(f"{rel}: missing")
        elif _sha256(p) != entry["sha256"]:
            problems.append(f"{rel}: sha256 mismatch")
        elif not _embedded(root, rel, entry):
            problems.append(f"{rel}: config hash not embedded")
    summary = {"checked": len(manifest["files"]), "problems": problems}
    if problems:
        err = VerificationFailed("; ".join(problems))
        err.summary = summary
        raise err
    return {"job": "verify", "status": "ok", "exit_code": 0, "output_dir": str(root), "outputs": [],
            "warnings": [], "summary": summary, "config_hash": manifest.get("config_hash"),
            "master_seed": manifest.get("master_seed")}


JOBS = {
    "ingest": ingest,
    "partition": partition_job,
    "offline": offline,
    "train": train,
    "attack": attack,
    "report": report,
    "verify": verify,
}
