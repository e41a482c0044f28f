"""Command-line client for the fedlap service.

Every job subcommand builds a :class:`RunConfig` from flags (a JSON ``--config``
file overrides them), posts it to the service and prints the JSON result.
Without ``--server`` the service runs in-process.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Optional

import click
from pydantic import ValidationError

from .config import RunConfig

SERVER_ENV = "FEDLAP_SERVER"


def _ints(text: Optional[str]):
    return None if text is None else [int(x) for x in text.split(",") if x.strip()]


def _pairs(text: Optional[str]):
    if text is None:
        return None
    out = []
    for item in text.split(","):
        p, n = item.split(":")
        out.append((float(p), int(n)))
    return out


# (flag, dest path in RunConfig, click kwargs, converter)
FLAGS = [
    ("--source", "dataset.source", dict(type=click.Choice(["sbm", "bernoulli", "files"])), None),
    ("--block-sizes", "dataset.block_sizes", dict(help="comma-separated SBM block sizes"), _ints),
    ("--p-in", "dataset.p_in", dict(type=float), None),
    ("--p-out", "dataset.p_out", dict(type=float), None),
    ("--n", "dataset.n", dict(type=int, help="Bernoulli graph size"), None),
    ("--p", "dataset.p", dict(type=float, help="Bernoulli edge probability"), None),
    ("--feature-dim", "dataset.feature_dim", dict(type=int), None),
    ("--feature-signal", "dataset.feature_signal", dict(type=float), None),
    ("--edges", "dataset.edges", dict(type=click.Path()), None),
    ("--features", "dataset.features", dict(type=click.Path()), None),
    ("--labels", "dataset.labels", dict(type=click.Path()), None),
    ("--id-map", "dataset.id_map", dict(type=click.Path()), None),
    ("--train-frac", "dataset.train_frac", dict(type=float), None),
    ("--val-frac", "dataset.val_frac", dict(type=float), None),
    ("--label-split", "dataset.label_split", dict(type=click.Choice(["global-stratified", "per-client"])), None),
    ("--scheme", "partition.scheme", dict(type=click.Choice(["random", "bfs-community"])), None),
    ("--K", "partition.K", dict(type=int, help="number of clients"), None),
    ("--mode", "mode", dict(type=click.Choice(["fedlap", "fedlap-plus", "none"])), None),
    ("--r", "r", dict(type=int, help="spectral rank"), None),
    ("--backend", "backend", dict(type=click.Choice(["mock", "mask"])), None),
    ("--lr", "train.learning_rate", dict(type=float), None),
    ("--weight-decay", "train.weight_decay", dict(type=float), None),
    ("--epochs", "train.epochs", dict(type=int), None),
    ("--lambda-reg", "train.lambda_reg", dict(type=float), None),
    ("--d-s", "train.d_s", dict(type=int), None),
    ("--hidden", "train.hidden", dict(help="comma-separated hidden widths"), _ints),
    ("--feature-form", "train.feature_form", dict(type=click.Choice(["mean", "mlp"])), None),
    ("--monotone-guard/--no-monotone-guard", "train.monotone_guard", dict(default=None), None),
    ("--u-scale", "train.u_scale", dict(type=float), None),
    ("--pairs", "attack.pairs", dict(help="comma-separated p:n pairs"), _pairs),
    ("--r-grid", "attack.r_grid", dict(help="comma-separated ranks"), _ints),
    ("--theory-only/--empirical", "attack.theory_only", dict(default=None), None),
    ("--attacker", "attack.attacker", dict(type=click.Choice(["strong", "realistic"])), None),
    ("--trials", "attack.trials", dict(type=int), None),
    ("--centralized/--no-centralized", "centralized", dict(default=None), None),
    ("--scaling-study/--no-scaling-study", "scaling_study", dict(default=None), None),
    ("--output-dir", "output_dir", dict(type=click.Path()), None),
    ("--master-seed", "master_seed", dict(type=int), None),
]


def _dest(flag: str) -> str:
    return flag.split("/")[0].lstrip("-").replace("-", "_").lower()


def _set(tree: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        tree = tree.setdefault(k, {})
    tree[last] = value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def build_config(flags: dict, config_file: Optional[str]) -> RunConfig:
    tree: dict = {}
    for flag, dotted, _, conv in FLAGS:
        value = flags.get(_dest(flag))
        if value is not None:
            _set(tree, dotted, conv(value) if conv else value)
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            tree = _merge(tree, json.load(fh))
    return RunConfig(**tree)


def _emit(body: dict, code: int) -> None:
    click.echo(json.dumps(body, indent=2, sort_keys=True))
    sys.exit(code)


def _post(server: Optional[str], job: str, payload: dict) -> tuple[dict, int]:
    if server:
        import httpx

        try:
            resp = httpx.post(server.rstrip("/") + f"/{job}", json=payload, timeout=None)
        except httpx.HTTPError as exc:
            return {"job": job, "status": "error", "error": f"cannot reach {server}: {exc}", "kind": "transport",
                    "exit_code": 1}, 1
    else:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

        from .service import app

        with TestClient(app, raise_server_exceptions=False) as client:
            resp = client.post(f"/{job}", json=payload)
    try:
        body = resp.json()
    except ValueError:
        body = {"job": job, "status": "error", "error": resp.text, "kind": "transport", "exit_code": 1}
    return body, int(body.get("exit_code", 0 if resp.status_code == 200 else 1))


def job_command(job: str, help_text: str):
    def run(server, config, **flags):
        try:
            cfg = build_config(flags, config)
        except (ValidationError, ValueError, OSError) as exc:
            _emit({"job": job, "status": "error", "error": str(exc), "kind": "config", "exit_code": 2}, 2)
        payload = {"config": cfg.model_dump(mode="json")}
        body, code = _post(server, job, payload)
        _emit(body, code)

    run.__name__ = job
    for flag, dotted, kwargs, _ in reversed(FLAGS):
        run = click.option(flag, _dest(flag), **{"help": dotted, **kwargs})(run)
    run = click.option("--config", type=click.Path(), help="JSON config file; overrides flags")(run)
    run = click.option("--server", envvar=SERVER_ENV, help="service URL (default: run in-process)")(run)
    return click.command(name=job, help=help_text)(run)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Federated spectral graph learning: offline basis, FedSGD training and privacy analysis."""


HELP = {
    "ingest": "Load or generate the graph and write graph.npz/graph.json.",
    "partition": "Split the graph into K client views and the label masks.",
    "offline": "Run decentralized Arnoldi and write one basis file per client.",
    "train": "Run federated training and write metrics.csv and a checkpoint.",
    "attack": "Compute privacy curves, rank sweep and summary.",
    "report": "Collect run summaries and the communication scaling fit.",
    "verify": "Re-hash every file in the manifest and check embedded config hashes.",
}

for _job, _help in HELP.items():
    main.add_command(job_command(_job, _help))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host: str, port: int):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("fedlap.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
