"""Thin command-line client for the training service.

By default commands run against an in-process instance of the service (no
server needed); point --server (or RELDISTILL_SERVER) at a running
``reldistill serve`` to execute remotely instead. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric divergence, 1 anything else.
"""

from __future__ import annotations

import asyncio
import sys

import click
import httpx

from .config import parse_config_file
from .errors import ConfigError

_EXIT_CODES = {"config": 2, "data": 3, "divergence": 4}


def _config_values(config_path: str | None, overrides: tuple[str, ...]) -> dict[str, str]:
    values = dict(parse_config_file(config_path)) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


async def _request_async(server: str, path: str, payload: dict) -> httpx.Response:
    if server:
        async with httpx.AsyncClient(base_url=server, timeout=None) as client:
            return await client.post(path, json=payload)
    from .service import app

    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://reldistill") as client:
        return await client.post(path, json=payload)


def _post(server: str, path: str, payload: dict) -> dict:
    try:
        response = asyncio.run(_request_async(server, path, payload))
    except httpx.HTTPError as exc:
        click.echo(f"error (connection): {exc}", err=True)
        sys.exit(1)
    if response.status_code == 200:
        return response.json()
    try:
        detail = response.json().get("detail")
    except ValueError:
        detail = response.text
    if isinstance(detail, dict) and "kind" in detail:
        kind, message = detail["kind"], detail["message"]
    else:
        kind, message = ("config" if response.status_code == 422 else "internal"), str(detail)
    click.echo(f"error ({kind}): {message}", err=True)
    sys.exit(_EXIT_CODES.get(kind, 1))


def _fail_config(exc: ConfigError) -> None:
    click.echo(f"error (config): {exc}", err=True)
    sys.exit(exc.exit_code)


_config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="Config file with flat dotted keys, one 'key = value' per line.",
)
_set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Override a config key; repeatable.",
)


@click.group()
@click.option(
    "--server", envvar="RELDISTILL_SERVER", default="",
    help="Base URL of a running service; empty runs the service in-process.",
)
@click.pass_context
def main(ctx: click.Context, server: str) -> None:
    """Few-shot training service client: pretrain, distill, evaluate."""
    ctx.obj = server


@main.command()
@_config_option
@_set_option
@click.pass_obj
def pretrain(server: str, config_path: str | None, overrides: tuple[str, ...]) -> None:
    """Train the global learner (stage 1) and write its checkpoint."""
    try:
        config = _config_values(config_path, overrides)
    except ConfigError as exc:
        _fail_config(exc)
    result = _post(server, "/api/pretrain", {"config": config})
    click.echo(f"run dir: {result['run_dir']}")
    click.echo(f"checkpoint: {result['checkpoint']}")
    click.echo(
        f"final l_c={result['final_l_c']:.4f} l_r={result['final_l_r']:.4f} "
        f"train_acc={result['final_train_accuracy']:.4f}"
    )


@main.command()
@click.option("--teacher", required=True, type=click.Path(), help="Stage-1 checkpoint.")
@_config_option
@_set_option
@click.pass_obj
def distill(server: str, teacher: str, config_path: str | None, overrides: tuple[str, ...]) -> None:
    """Train the meta learner (stage 2) from a frozen stage-1 teacher."""
    try:
        config = _config_values(config_path, overrides)
    except ConfigError as exc:
        _fail_config(exc)
    result = _post(server, "/api/distill", {"config": config, "teacher_checkpoint": teacher})
    click.echo(f"run dir: {result['run_dir']}")
    click.echo(f"checkpoint: {result['checkpoint']}")
    if result.get("best_val_accuracy") is not None:
        click.echo(
            f"best val accuracy {result['best_val_accuracy']:.4f} "
            f"at epoch {result['best_epoch']}"
        )


@main.command(name="eval")
@click.option("--student", required=True, type=click.Path(), help="Trained student checkpoint.")
@_config_option
@_set_option
@click.pass_obj
def eval_cmd(server: str, student: str, config_path: str | None, overrides: tuple[str, ...]) -> None:
    """Episodic evaluation; prints mean accuracy with 95% interval."""
    try:
        config = _config_values(config_path, overrides)
    except ConfigError as exc:
        _fail_config(exc)
    result = _post(server, "/api/eval", {"config": config, "student_checkpoint": student})
    click.echo(
        f"accuracy: {result['mean_accuracy']:.4f} +/- {result['ci95_halfwidth']:.4f} "
        f"({result['n_episodes']} episodes)"
    )
    click.echo(f"result file: {result['result_path']}")


@main.command(name="export-embeddings")
@click.option("--student", required=True, type=click.Path(), help="Trained student checkpoint.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Output file.")
@click.option("--n-samples", type=int, default=None, help="Rows to export.")
@_config_option
@_set_option
@click.pass_obj
def export_embeddings_cmd(
    server: str,
    student: str,
    out_path: str | None,
    n_samples: int | None,
    config_path: str | None,
    overrides: tuple[str, ...],
) -> None:
    """Export embeddings + labels as packed binary for external plotting."""
    try:
        config = _config_values(config_path, overrides)
    except ConfigError as exc:
        _fail_config(exc)
    payload = {
        "config": config,
        "student_checkpoint": student,
        "out_path": out_path,
        "n_samples": n_samples,
    }
    result = _post(server, "/api/export-embeddings", payload)
    click.echo(f"wrote {result['count']} x {result['dim']} embeddings to {result['path']}")


@main.command()
@click.option("--teacher", required=True, type=click.Path(), help="Stage-1 checkpoint.")
@click.option(
    "--modes", default="full,whole_matrix,no_regularizer",
    help="Comma-separated ablation modes.",
)
@_config_option
@_set_option
@click.pass_obj
def ablate(
    server: str, teacher: str, modes: str, config_path: str | None, overrides: tuple[str, ...]
) -> None:
    """Train and evaluate one student per ablation mode under a shared seed."""
    try:
        config = _config_values(config_path, overrides)
    except ConfigError as exc:
        _fail_config(exc)
    payload = {
        "config": config,
        "teacher_checkpoint": teacher,
        "modes": [m.strip() for m in modes.split(",") if m.strip()],
    }
    result = _post(server, "/api/ablate", payload)
    for row in result["rows"]:
        click.echo(
            f"{row['mode']:<22} {row['mean_accuracy']:.4f} +/- {row['ci95_halfwidth']:.4f}"
        )
    click.echo(f"table file: {result['table_path']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
